use super::*;
use crate::config::Config;
use crate::pipeline::{worker_pool, Model};
use crate::scene_io::PointCloud;
use proptest::prelude::*;

fn small_model(seed: u64) -> Model {
    let mut cfg = Config::default();
    for (k, v) in [
        ("feature_dim", "4"),
        ("hidden_dim", "8"),
        ("num_levels", "2"),
        ("mlp_levels", "1"),
        ("triplane_pyramid", "4,2"),
        ("global_resolution", "4"),
        ("pe_frequencies", "2"),
        ("dir_frequencies", "2"),
        ("omega", "0.3"),
        ("gamma", "2"),
        ("num_samples", "8"),
        ("density_shift", "0"),
        ("frame", "fixed:0,0,0,1,1,1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    let pts: Vec<Vec3> = (0..12)
        .map(|i| {
            let a = i as f64 * 0.5;
            Vec3::new(0.5 * a.cos(), 0.5 * a.sin(), 0.1 * (i as f64 - 6.0) / 6.0)
        })
        .collect();
    Model::build(&PointCloud::new(pts).unwrap(), &cfg).unwrap()
}

fn batch(n: usize, with_gt: bool) -> RayBatch {
    let mut b = RayBatch::with_capacity(n);
    for i in 0..n {
        let a = i as f64 * 0.37;
        let o = Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.3);
        let d = (Vec3::new(0.1 * a.sin(), 0.0, 0.0) - o).normalize();
        let gt = with_gt.then(|| [0.2 + 0.01 * i as f64 % 0.5, 0.5, 0.7]);
        b.push(o, d, 0.5, 3.5, gt);
    }
    b
}

#[test]
fn midpoints_and_deltas() {
    let s = midpoint_samples(0.0, 4.0, 4);
    assert_eq!(s.depths, vec![0.5, 1.5, 2.5, 3.5]);
    assert_eq!(s.deltas, vec![1.0, 1.0, 1.0, 0.5]);
}

#[test]
fn stratified_samples_stay_in_their_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = sample_ray(1.0, 3.0, 10, true, &mut rng);
    for (i, t) in s.depths.iter().enumerate() {
        let lo = 1.0 + 0.2 * i as f64;
        assert!(*t >= lo && *t < lo + 0.2 + 1e-12);
    }
    assert!(s.deltas.iter().all(|d| *d >= 0.0));
    let again = sample_ray(1.0, 3.0, 10, true, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(s, again);
}

#[test]
fn empty_space_shows_background() {
    let c = composite(&[[1.0, 0.0, 0.0]; 3], &[0.0; 3], &[0.1; 3], [0.2, 0.3, 0.4]);
    assert_eq!(c.pixel, [0.2, 0.3, 0.4]);
    assert_eq!(c.residual_t, 1.0);
    assert!(c.weights.iter().all(|w| *w == 0.0));
}

#[test]
fn half_opacity_segment() {
    let c = composite(&[[1.0, 1.0, 1.0]], &[std::f64::consts::LN_2], &[1.0], [0.0; 3]);
    assert!((c.weights[0] - 0.5).abs() < 1e-15);
    assert!((c.residual_t - 0.5).abs() < 1e-15);
}

#[test]
fn constant_density_matches_beer_lambert() {
    let n = 1000;
    // sigma = 2 over a unit-length ray
    let deltas = vec![1.0 / n as f64; n];
    let c = composite(&vec![[0.0; 3]; n], &vec![2.0; n], &deltas, [1.0; 3]);
    assert!((c.residual_t - (-2.0f64).exp()).abs() < 1e-9);
    assert!((c.residual_t - 0.13534).abs() < 1e-5);
}

proptest! {
    #[test]
    fn weights_conserve_and_transmittance_decreases(
        dens in prop::collection::vec(0.0f64..50.0, 1..40),
        dt in prop::collection::vec(0.0f64..0.5, 40),
        bg in prop::array::uniform3(0.0f64..1.0),
    ) {
        let n = dens.len();
        let cols = vec![[0.3, 0.6, 0.9]; n];
        let c = composite(&cols, &dens, &dt[..n], bg);
        let total: f64 = c.weights.iter().sum::<f64>() + c.residual_t;
        prop_assert!((total - 1.0).abs() < 1e-12);
        let mut t = 1.0;
        for w in &c.weights {
            prop_assert!(*w >= 0.0);
            let next = t - w;
            prop_assert!(next <= t + 1e-15);
            t = next;
        }
    }

    #[test]
    fn background_enters_linearly(
        dens in prop::collection::vec(0.0f64..5.0, 1..10),
        bg in prop::array::uniform3(0.0f64..1.0),
    ) {
        let n = dens.len();
        let cols = vec![[0.1, 0.2, 0.3]; n];
        let d = vec![0.1; n];
        let a = composite(&cols, &dens, &d, [0.0; 3]);
        let b = composite(&cols, &dens, &d, bg);
        for k in 0..3 {
            prop_assert!((b.pixel[k] - a.pixel[k] - a.residual_t * bg[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_front_sample_occludes(color in prop::array::uniform3(0.0f64..1.0)) {
        let c = composite(&[color, [1.0, 0.0, 1.0]], &[1e4, 3.0], &[1.0, 1.0], [0.5; 3]);
        for k in 0..3 {
            prop_assert!((c.pixel[k] - color[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_composite_matches_pure_composite() {
    let store = crate::autodiff::ParamStore::new();
    let mut tape = Tape::new(&store);
    let dens = [0.3, 2.0, 0.0, 5.0];
    let cols = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.4, 0.4, 0.4], [0.0, 1.0, 0.2]];
    let deltas = [0.2, 0.1, 0.3, 0.25];
    let entries: Vec<(Var, Var, f64)> = (0..4)
        .map(|i| (tape.input(&[dens[i]]), tape.input(&cols[i]), deltas[i]))
        .collect();
    let px = composite_on_tape(&mut tape, &entries, [1.0, 0.5, 0.0]).unwrap();
    let want = composite(&cols, &dens, &deltas, [1.0, 0.5, 0.0]);
    for k in 0..3 {
        assert!((tape.value(px)[k] - want.pixel[k]).abs() < 1e-14);
    }
}

#[test]
fn rendering_is_deterministic_and_pool_invariant() {
    let m = small_model(5);
    let b = batch(70, true);
    let settings = m.render_settings(true);
    let seeds: Vec<u64> = (0..70).map(|i| i * 7 + 1).collect();
    let a = render_rays(&m.view(), &b, &settings, Some(&seeds), true, None).unwrap();
    let pool = worker_pool(3).unwrap();
    let c = render_rays(&m.view(), &b, &settings, Some(&seeds), true, pool.as_ref()).unwrap();
    assert_eq!(a.colors, c.colors);
    assert_eq!(a.loss.unwrap().to_bits(), c.loss.unwrap().to_bits());
    assert_eq!(a.gradients.unwrap().buffers(), c.gradients.unwrap().buffers());
}

#[test]
fn zero_density_renders_background() {
    let mut m = small_model(1);
    m.config.background = [0.25, 0.5, 0.75];
    m.field.zero_parameters();
    // softplus(-large) is the zero-density limit
    let bias = m.field.density.1;
    m.field.store.data_mut(bias)[0] = -800.0;
    let out = render_rays(&m.view(), &batch(5, false), &m.render_settings(false), None, false, None).unwrap();
    for c in out.colors {
        assert_eq!(c, [0.25, 0.5, 0.75]);
    }
}

#[test]
fn mismatched_hierarchy_is_rejected() {
    let m = small_model(2);
    let view = RenderModel { field: &m.field, indices: &m.indices[..1], frame: &m.frame };
    let err = render_rays(&view, &batch(2, false), &m.render_settings(false), None, false, None).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)));
}

#[test]
fn gradients_need_targets() {
    let m = small_model(2);
    assert!(render_rays(&m.view(), &batch(2, false), &m.render_settings(false), None, true, None).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut m = small_model(9);
    let b = batch(2, true);
    let settings = m.render_settings(false);
    let out = render_rays(&m.view(), &b, &settings, None, true, None).unwrap();
    let g = out.gradients.unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for id in m.field.store.ids().collect::<Vec<_>>() {
        let len = m.field.store.data(id).len();
        for j in (0..len).step_by((len / 5).max(1)) {
            let x0 = m.field.store.data(id)[j];
            m.field.store.data_mut(id)[j] = x0 + h;
            let lp = render_rays(&m.view(), &b, &settings, None, false, None).unwrap().loss.unwrap();
            m.field.store.data_mut(id)[j] = x0 - h;
            let lm = render_rays(&m.view(), &b, &settings, None, false, None).unwrap().loss.unwrap();
            m.field.store.data_mut(id)[j] = x0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.get(id)[j];
            if fd.abs() > 1e-8 {
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9, "{} [{j}]: fd {fd} vs {an}", m.field.store.tensor(id).name);
                checked += 1;
            }
        }
    }
    assert!(checked > 10);
}
