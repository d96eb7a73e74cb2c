use super::*;
use crate::scene_io::Camera;
use crate::Vec3;

fn small_spec() -> SceneSpec {
    SceneSpec {
        width: 12,
        height: 12,
        focal: 15.0,
        num_train_views: 2,
        num_test_views: 1,
        num_points: 300,
        gt_samples: 256,
        ..SceneSpec::toy()
    }
}

#[test]
fn opaque_sphere_on_axis_shows_its_albedo() {
    let spec = SceneSpec {
        primitives: vec![Primitive {
            shape: Shape::Sphere { center: Vec3::zeros(), radius: 0.5 },
            albedo: [0.2, 0.6, 0.4],
        }],
        texture_amplitude: 0.0,
        ..SceneSpec::toy()
    };
    let f = spec.analytic_field();
    let o = Vec3::new(0.0, -3.0, 0.0);
    let d = Vec3::new(0.0, 1.0, 0.0);
    // opacity through the diameter from the closed-form density integral
    let t = f.render_ray(&o, &d, 1.0, 5.0, 4096, [0.0; 3]);
    let t_white = f.render_ray(&o, &d, 1.0, 5.0, 4096, [1.0; 3]);
    let opacity = 1.0 - (t_white[0] - t[0]);
    assert!(opacity >= 0.99);
    for k in 0..3 {
        assert!((t[k] - spec.primitives[0].albedo[k] * opacity).abs() < 1e-3, "{t:?}");
    }
}

#[test]
fn spec_validation() {
    let mut s = SceneSpec::toy();
    s.primitives.clear();
    assert!(s.validate().is_err());
    let mut s = SceneSpec::toy();
    s.num_train_views = 1;
    s.num_test_views = 0;
    assert!(s.validate().is_err());
    assert!(SceneSpec::from_text("primitive.0 = cone 1 2 3\n", std::path::Path::new("s")).is_err());
    let err = SceneSpec::from_text("colour = 1\n", std::path::Path::new("s")).unwrap_err().to_string();
    assert!(err.contains("valid keys") && err.contains("num_points"));
}

#[test]
fn spec_text_round_trip() {
    let s = SceneSpec::toy();
    assert_eq!(SceneSpec::from_text(&s.to_text(), std::path::Path::new("s")).unwrap(), s);
}

#[test]
fn cameras_interleave_test_views() {
    let cams = SceneSpec::toy().cameras();
    let splits: Vec<&str> = cams.iter().map(|c| c.split.as_str()).collect();
    assert_eq!(splits.len(), 10);
    assert_eq!(splits.iter().filter(|s| **s == "test").count(), 2);
    assert_eq!(splits[2], "test");
    assert_eq!(splits[7], "test");
    for c in &cams {
        // the origin projects to the image center
        let p = c.camera.rotation * Vec3::zeros() + c.camera.translation;
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z < 0.0);
    }
}

#[test]
fn points_lie_on_visible_surfaces() {
    let spec = SceneSpec::toy();
    let f = spec.analytic_field();
    let pts = f.sample_points(2000, 3).unwrap();
    for p in &pts.positions {
        let d: Vec<f64> = f.primitives.iter().map(|q| q.sdf(p)).collect();
        assert!(d.iter().any(|v| v.abs() < 1e-9));
        assert!(d.iter().all(|v| *v > -1e-9));
    }
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let spec = small_spec();
    let a = generate_scene(&spec, 4).unwrap();
    let b = generate_scene(&spec, 4).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.points, b.points);
    assert_ne!(generate_scene(&spec, 5).unwrap().points, a.points);
    assert!(a.holes.removed_fraction >= spec.hole_fraction);
    assert_eq!(a.points.len(), ((1.0 - a.holes.removed_fraction) * 300.0).round() as usize);

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    a.save(d1.path()).unwrap();
    b.save(d2.path()).unwrap();
    for f in ["scene.txt", "cameras.txt", "points.ply", "holes.txt", "images/train_001.f32img"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let back = SyntheticScene::load(d1.path()).unwrap();
    assert_eq!(back.images, a.images);
    assert_eq!(back.points, a.points);
    assert_eq!(back.cameras, a.cameras);
    assert_eq!(back.spec, a.spec);
    assert_eq!(back.train_views().len(), 2);
    assert_eq!(back.test_views().len(), 1);
}

#[test]
fn quarter_quadrature_reproduces_ground_truth() {
    let spec = SceneSpec::toy();
    let f = spec.analytic_field();
    let cam: Camera = spec.cameras()[1].camera.clone();
    let gt = f.render(&cam, spec.gt_samples, spec.background).unwrap();
    let coarse = f.render(&cam, spec.gt_samples / 4, spec.background).unwrap();
    let p = psnr(&gt, &coarse).unwrap();
    assert!(p >= 45.0, "oracle psnr {p}");
}
