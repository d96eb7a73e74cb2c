use super::*;
use crate::scene_io::PointCloud;
use crate::Vec3;

fn scalar_store(x: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("theta", vec![1], ParamGroup::Decoder, vec![x]);
    s
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = scalar_store(0.0);
    let mut grads = Gradients::zeros_like(&store);
    grads.buffers_mut()[0][0] = 1.0;
    let mut st = OptimizerState::new(OptimizerKind::Adam, &store);
    let lr = LrMap { decoder: 0.1, features: 0.1 };
    adam_step(&mut store, &grads, &mut st, &lr, &AdamHyper::default()).unwrap();
    assert!((store.tensors()[0].data[0] + 0.1).abs() < 1e-6);
    assert_eq!(st.step, 1);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut store = scalar_store(0.7);
    let grads = Gradients::zeros_like(&store);
    let mut st = OptimizerState::new(OptimizerKind::Adam, &store);
    let lr = LrMap { decoder: 0.1, features: 0.1 };
    adam_step(&mut store, &grads, &mut st, &lr, &AdamHyper::default()).unwrap();
    assert_eq!(store.tensors()[0].data[0], 0.7);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::new();
    store.insert("theta", vec![3], ParamGroup::Features, vec![1.0, -2.0, 0.5]);
    let loss = |s: &ParamStore| s.tensors()[0].data.iter().map(|x| x * x).sum::<f64>();
    let l0 = loss(&store);
    let mut st = OptimizerState::new(OptimizerKind::Adam, &store);
    let lr = LrMap { decoder: 0.1, features: 0.1 };
    for _ in 0..100 {
        let mut g = Gradients::zeros_like(&store);
        for (gi, x) in g.buffers_mut()[0].iter_mut().zip(&store.tensors()[0].data) {
            *gi = 2.0 * x;
        }
        adam_step(&mut store, &g, &mut st, &lr, &AdamHyper::default()).unwrap();
    }
    assert!(loss(&store) < 0.01 * l0, "{} vs {l0}", loss(&store));
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut store = scalar_store(0.0);
    let mut grads = Gradients::zeros_like(&store);
    grads.buffers_mut()[0][0] = f64::NAN;
    let mut st = OptimizerState::new(OptimizerKind::Adam, &store);
    let lr = LrMap { decoder: 0.1, features: 0.1 };
    let err = adam_step(&mut store, &grads, &mut st, &lr, &AdamHyper::default()).unwrap_err();
    assert!(err.to_string().contains("theta"));
    assert_eq!(store.tensors()[0].data[0], 0.0);
}

#[test]
fn groups_use_their_own_rate() {
    let mut store = ParamStore::new();
    store.insert("decoder.density.weight", vec![2], ParamGroup::Decoder, vec![0.0; 2]);
    store.insert("level1.features", vec![2], ParamGroup::Features, vec![0.0; 2]);
    let mut g = Gradients::zeros_like(&store);
    g.buffers_mut()[0].fill(1.0);
    g.buffers_mut()[1].fill(-3.0);
    let lr = LrMap { decoder: 1e-3, features: 5e-2 };
    let mut st = OptimizerState::new(OptimizerKind::Sgd, &store);
    let mut s2 = store.clone();
    sgd_step(&mut s2, &g, &mut st, &lr).unwrap();
    assert_eq!(s2.tensors()[0].data, vec![-1e-3; 2]);
    assert!((s2.tensors()[1].data[0] - 0.15).abs() < 1e-15);

    let mut st = OptimizerState::new(OptimizerKind::Adam, &store);
    adam_step(&mut store, &g, &mut st, &lr, &AdamHyper::default()).unwrap();
    assert!((store.tensors()[0].data[0] + 1e-3).abs() < 1e-8);
    assert!((store.tensors()[1].data[0] - 5e-2).abs() < 1e-8);
}

#[test]
fn learning_rate_schedule() {
    let mut c = Config::default();
    c.decay_every = 1000.0;
    assert_eq!(lr_at(0, &c).decoder, 5e-4);
    assert_eq!(lr_at(0, &c).features, 2e-3);
    assert!((lr_at(1000, &c).decoder - 5e-5).abs() < 1e-18);
    assert!((lr_at(500, &c).features - 2e-3 * 10f64.powf(-0.5)).abs() < 1e-15);
    c.decay_mode = DecayMode::Step;
    assert_eq!(lr_at(999, &c).decoder, 5e-4);
    assert!((lr_at(1500, &c).decoder - 5e-5).abs() < 1e-18);
}

fn tiny_setup() -> (Model, Vec<(Camera, Image)>) {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "feature_dim=4",
        "hidden_dim=8",
        "num_levels=2",
        "mlp_levels=1",
        "global_resolution=4",
        "pe_frequencies=2",
        "dir_frequencies=1",
        "omega=0.3",
        "gamma=2",
        "num_samples=6",
        "batch_rays=40",
        "iterations=6",
        "checkpoint_every=3",
        "frame=fixed:0,0,0,1,1,1",
    ])
    .unwrap();
    let pts: Vec<Vec3> = (0..20)
        .map(|i| {
            let a = i as f64 * 0.7;
            Vec3::new(0.4 * a.cos(), 0.4 * a.sin(), 0.05 * i as f64 - 0.5)
        })
        .collect();
    let model = Model::build(&PointCloud::new(pts).unwrap(), &cfg).unwrap();
    let cam = Camera::look_at(Vec3::new(0.0, -2.5, 0.3), Vec3::zeros(), Vec3::z(), 8.0, 8, 8, 1.0, 4.0);
    let img = Image::new(8, 8, (0..64).map(|i| [0.1 + 0.01 * i as f32, 0.5, 0.3]).collect()).unwrap();
    (model, vec![(cam, img)])
}

#[test]
fn zero_iterations_keep_initial_parameters() {
    let (mut model, views) = tiny_setup();
    model.config.iterations = 0;
    let before = model.field.store.clone();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, &model.field.store);
    let rep = train(&mut model, &mut opt, 0, &views, &[], &TrainOptions::default()).unwrap();
    assert_eq!(model.field.store, before);
    assert!(rep.records.is_empty());
}

#[test]
fn checkpoints_round_trip_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (mut model, views) = tiny_setup();
    let initial = model.clone();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, &model.field.store);
    let opts = TrainOptions { workers: 1, out_dir: Some(dir.path().to_path_buf()) };
    let rep = train(&mut model, &mut opt, 0, &views, &[], &opts).unwrap();
    assert_eq!(rep.step_losses.len(), 6);
    assert_eq!(read_metrics(dir.path().join(METRICS_FILE)).unwrap(), rep.records);

    let final_bytes = fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let ck = decode_checkpoint(&final_bytes).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.model.field.store, model.field.store);
    assert_eq!(encode_checkpoint(&ck.model, ck.optimizer.as_ref(), ck.step), final_bytes);

    // resume from step 3 and land on the same final state
    let mid = load_checkpoint(dir.path().join(checkpoint_name(3))).unwrap();
    let mut m2 = mid.model;
    let mut o2 = mid.optimizer.unwrap();
    let rep2 = train(&mut m2, &mut o2, mid.step, &views, &[], &TrainOptions::default()).unwrap();
    assert_eq!(rep2.step_losses, rep.step_losses[3..].to_vec());
    assert_eq!(encode_checkpoint(&m2, Some(&o2), 6), final_bytes);

    // parameters moved, frame and hierarchy did not
    assert_ne!(initial.field.store, model.field.store);
    assert_eq!(ck.model.hierarchy, initial.hierarchy);
    assert_eq!(ck.model.frame, initial.frame);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (model, _) = tiny_setup();
    let bytes = encode_checkpoint(&model, None, 0);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
    let mut bad = bytes.clone();
    bad[24] ^= 1; // inside the config text
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn worker_count_does_not_change_training() {
    let (m0, views) = tiny_setup();
    let run = |workers| {
        let mut m = m0.clone();
        let mut o = OptimizerState::new(OptimizerKind::Adam, &m.field.store);
        train(&mut m, &mut o, 0, &views, &[], &TrainOptions { workers, out_dir: None }).unwrap();
        encode_checkpoint(&m, Some(&o), 6)
    };
    assert_eq!(run(1), run(3));
}
