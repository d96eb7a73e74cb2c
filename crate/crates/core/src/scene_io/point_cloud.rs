//! Point clouds and ASCII PLY input/output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.positions.is_empty() {
            return None;
        }
        let sum = self.positions.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.positions.len() as f64)
    }

    /// Keeps the points whose index satisfies `keep`.
    pub fn filter_indexed(&self, mut keep: impl FnMut(usize, &Vec3) -> bool) -> PointCloud {
        PointCloud {
            positions: self
                .positions
                .iter()
                .enumerate()
                .filter(|(i, p)| keep(*i, p))
                .map(|(_, p)| *p)
                .collect(),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Reads the `vertex` element of an ASCII PLY file, preserving file order.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

fn header_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(header_err(path, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (_, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(header_err(path, "only 'format ascii 1.0' is supported"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| header_err(path, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(path, format!("element {name} has no valid count")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err(path, "property before any element"))?;
                let kind = tok.next().ok_or_else(|| header_err(path, "property without type"))?;
                if kind == "list" {
                    if el.name == "vertex" {
                        return Err(header_err(path, "list properties on vertex are not supported"));
                    }
                    // list <count type> <item type> <name>
                    tok.next();
                    tok.next();
                }
                let name = tok.next().ok_or_else(|| header_err(path, "property without name"))?;
                el.properties.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(header_err(path, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(header_err(path, "missing end_header"));
    }
    if !saw_format {
        return Err(header_err(path, "missing format line"));
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err(path, "no vertex element"))?;
    let vertex = &elements[vi];
    let find = |n: &str| {
        vertex
            .properties
            .iter()
            .position(|p| p == n)
            .ok_or_else(|| header_err(path, format!("vertex element lacks property '{n}'")))
    };
    let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);

    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
    let mut data = lines.filter(|(_, l)| !l.trim().is_empty()).skip(skip);
    let mut positions = Vec::with_capacity(vertex.count);
    for k in 0..vertex.count {
        let (lineno, line) = data.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected {} vertices, found {k}", vertex.count),
        })?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < vertex.properties.len() {
            return Err(parse_err(format!(
                "expected {} values, found {}",
                vertex.properties.len(),
                fields.len()
            )));
        }
        let coord = |i: usize| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| parse_err(format!("invalid number '{}'", fields[i])))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite coordinate '{}'", fields[i])));
            }
            Ok(v)
        };
        positions.push(Vec3::new(coord(ix)?, coord(iy)?, coord(iz)?));
    }
    Ok(PointCloud { positions })
}

/// Writes an ASCII PLY with `double` x, y, z. Values use shortest round-trip formatting.
pub fn save_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        writeln!(w, "end_header")?;
        for p in &cloud.positions {
            writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}
