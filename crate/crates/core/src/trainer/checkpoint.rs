//! Binary checkpoints: resolved config, frame, hierarchy, parameters and
//! optional optimizer moments.
//!
//! Layout (little endian): magic `MSPNFCKP`, `u32` version, 8-byte config
//! hash, `u64` config text length + text, `u64` step, `u32` state tensor
//! count + records, `u32` parameter count + records, `u8` optimizer flag and,
//! when set, `u64` optimizer step, `u8` kind and the moment arrays of every
//! parameter in store order.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;

use crate::autodiff::ParamStore;
use crate::config::{hash_text, Config, OptimizerKind};
use crate::error::{Error, Result};
use crate::field::group_for_name;
use crate::field::io::{put_f64s, put_u32, put_u64, write_tensor, NamedTensor, Reader};
use crate::hierarchy::{PointHierarchy, ScaleLevel, Schedule};
use crate::pipeline::Model;
use crate::scene_io::CanonicalFrame;
use crate::Vec3;

use super::OptimizerState;

pub const MAGIC: &[u8; 8] = b"MSPNFCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

fn vec3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn state_tensors(model: &Model) -> Vec<NamedTensor> {
    let f = &model.frame;
    let h = &model.hierarchy;
    let mut rot = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            rot.push(f.rotation[(r, c)]);
        }
    }
    let t = |name: &str, shape: Vec<usize>, data: Vec<f64>| NamedTensor { name: name.into(), shape, data };
    let mut out = vec![
        t("frame.rotation", vec![3, 3], rot),
        t("frame.translation", vec![3], vec3(&f.translation).to_vec()),
        t("frame.scale", vec![3], vec3(&f.scale).to_vec()),
        t("frame.padded", vec![1], vec![f.padded_axes as f64]),
        t("hierarchy.schedule", vec![2], vec![h.schedule.omega, h.schedule.gamma]),
        t("hierarchy.global_center", vec![3], vec3(&h.global_center).to_vec()),
        t("hierarchy.anchor", vec![3], vec3(&h.anchor).to_vec()),
    ];
    for l in &h.levels {
        let s = l.level_index;
        out.push(t(
            &format!("hierarchy.level{s}.points"),
            vec![l.len(), 3],
            l.representatives.iter().flat_map(vec3).collect(),
        ));
        out.push(t(&format!("hierarchy.level{s}.edge"), vec![1], vec![l.voxel_edge]));
        out.push(t(
            &format!("hierarchy.level{s}.counts"),
            vec![l.len()],
            l.source_counts.iter().map(|&c| c as f64).collect(),
        ));
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(model: &Model, optimizer: Option<&OptimizerState>, step: u64) -> Vec<u8> {
    let text = model.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&hash_text(&text));
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u64(&mut out, step);

    let state = state_tensors(model);
    put_u32(&mut out, state.len() as u32);
    for t in &state {
        write_tensor(&mut out, &t.name, &t.shape, &t.data);
    }
    let params = model.field.store.tensors();
    put_u32(&mut out, params.len() as u32);
    for t in params {
        write_tensor(&mut out, &t.name, &t.shape, &t.data);
    }
    match optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            put_u64(&mut out, opt.step);
            out.push(match opt.kind {
                OptimizerKind::Adam => 0,
                OptimizerKind::Sgd => 1,
            });
            for buf in opt.first.iter().chain(&opt.second) {
                put_f64s(&mut out, buf);
            }
        }
    }
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    optimizer: Option<&OptimizerState>,
    step: u64,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optimizer, step);
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct StateMap(Vec<NamedTensor>);

impl StateMap {
    fn get(&self, name: &str, len: usize) -> Result<&[f64]> {
        let t = self
            .0
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing state tensor {name}")))?;
        if t.data.len() != len {
            return Err(Error::Checkpoint(format!(
                "state tensor {name} has {} values, expected {len}",
                t.data.len()
            )));
        }
        Ok(&t.data)
    }

    fn vec3(&self, name: &str) -> Result<Vec3> {
        let d = self.get(name, 3)?;
        Ok(Vec3::new(d[0], d[1], d[2]))
    }

    fn rows(&self, name: &str) -> Result<usize> {
        self.0
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.first().copied().unwrap_or(0))
            .ok_or_else(|| Error::Checkpoint(format!("missing state tensor {name}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash: [u8; 8] = r.take(8)?.try_into().unwrap();
    let n = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
        .to_string();
    if hash_text(&text) != hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let config = Config::from_text(&text)?;
    let step = r.u64()?;

    let n_state = r.u32()? as usize;
    let state = StateMap((0..n_state).map(|_| r.tensor()).collect::<Result<_>>()?);
    let rot = state.get("frame.rotation", 9)?;
    let frame = CanonicalFrame {
        rotation: Matrix3::from_row_slice(rot),
        translation: state.vec3("frame.translation")?,
        scale: state.vec3("frame.scale")?,
        padded_axes: state.get("frame.padded", 1)?[0] as usize,
    };
    let sched = state.get("hierarchy.schedule", 2)?;
    let mut levels = Vec::with_capacity(config.num_levels);
    for s in 1..=config.num_levels {
        let name = format!("hierarchy.level{s}.points");
        let rows = state.rows(&name)?;
        let pts = state.get(&name, rows * 3)?;
        levels.push(ScaleLevel {
            level_index: s,
            voxel_edge: state.get(&format!("hierarchy.level{s}.edge"), 1)?[0],
            representatives: pts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            source_counts: state
                .get(&format!("hierarchy.level{s}.counts"), rows)?
                .iter()
                .map(|&c| c as usize)
                .collect(),
        });
    }
    let hierarchy = PointHierarchy {
        levels,
        global_center: state.vec3("hierarchy.global_center")?,
        schedule: Schedule { omega: sched[0], gamma: sched[1] },
        anchor: state.vec3("hierarchy.anchor")?,
    };

    let n_params = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let t = r.tensor()?;
        if store.id(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", t.name)));
        }
        let group = group_for_name(&t.name);
        store.insert(t.name, t.shape, group, t.data);
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let opt_step = r.u64()?;
            let kind = match r.u8()? {
                0 => OptimizerKind::Adam,
                1 => OptimizerKind::Sgd,
                k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
            };
            let lens: Vec<usize> = store.tensors().iter().map(|t| t.len()).collect();
            let read = |r: &mut Reader| lens.iter().map(|&l| r.f64s(l)).collect::<Result<Vec<_>>>();
            let first = read(&mut r)?;
            let second = read(&mut r)?;
            Some(OptimizerState { kind, step: opt_step, first, second })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if !r.is_at_end() {
        return Err(Error::Checkpoint(format!("trailing bytes after offset {}", r.position())));
    }
    let model = Model::from_parts(config, frame, hierarchy, Some(store))?;
    Ok(Checkpoint { step, model, optimizer })
}
