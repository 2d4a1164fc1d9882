use facecap::fixtures::{random_params, HeadConfig, HeadFixture};
use facecap::render::{rasterize, RenderOptions, RenderSetup, Texture};
use facecap::solver::{blend_parameters, solve_frame, solve_sequence, SequenceMode, SolveConfig, SolveStatus};
use facecap::PoseParams;

fn w_rms(a: &PoseParams, b: &PoseParams) -> f64 {
    (a.w.iter().zip(&b.w).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.w.len() as f64).sqrt()
}

#[test]
fn segmented_round_trip_recovers_pose_and_controls() {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(64, 64);
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    for seed in [0, 1] {
        let truth = random_params(10, 10.0, 40.0, seed);
        let target = rasterize(&setup, &truth).image;
        let r = solve_frame(&target, &setup, &head.neutral_params(), &SolveConfig::default()).unwrap();
        assert!((r.params.pitch - truth.pitch).abs() < 2.0, "seed {seed}: {:?} vs {:?}", r.params, truth);
        assert!((r.params.yaw - truth.yaw).abs() < 2.0, "seed {seed}");
        assert!(w_rms(&r.params, &truth) < 0.05, "seed {seed}: rms {}", w_rms(&r.params, &truth));
        assert!(r.params.w.iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(r.loss_trace.windows(2).all(|p| p[1] <= p[0]), "trace {:?}", r.loss_trace);
        assert_eq!(r.loss, *r.loss_trace.last().unwrap());
    }
}

#[test]
fn ground_truth_init_is_a_fixed_point() {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(48, 48);
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let truth = random_params(10, 10.0, 30.0, 9);
    let target = rasterize(&setup, &truth).image;
    let r = solve_frame(&target, &setup, &truth, &SolveConfig::default()).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.params, truth);
    assert!(r.converged());
}

#[test]
fn invisible_texture_reports_no_descent() {
    // flat texture in the background color: every render is blank
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(32, 32);
    let texture = Texture::Flat { color: [0.0; 3] };
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let mut target = rasterize(&setup, &head.neutral_params()).image;
    for p in &mut target.pixels {
        *p = [0.3, 0.3, 0.3];
    }
    let init = head.neutral_params();
    let r = solve_frame(&target, &setup, &init, &SolveConfig::default()).unwrap();
    assert_eq!(r.status, SolveStatus::NoDescent);
    assert_eq!(r.params, init);
}

#[test]
fn independent_sequence_is_order_invariant() {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(32, 32);
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let config = SolveConfig {
        epochs: 4,
        joint_epochs: 2,
        ..SolveConfig::default()
    };
    let frames: Vec<_> = (0..3).map(|s| rasterize(&setup, &random_params(10, 5.0, 10.0, s)).image).collect();
    let reversed: Vec<_> = frames.iter().rev().cloned().collect();
    let init = head.neutral_params();
    let a = solve_sequence(&frames, &setup, &init, &config, SequenceMode::Independent);
    let mut b = solve_sequence(&reversed, &setup, &init, &config, SequenceMode::Independent);
    b.reverse();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.as_ref().unwrap(), y.as_ref().unwrap());
    }
    let single = solve_frame(&frames[0], &setup, &init, &config).unwrap();
    assert_eq!(&single, a[0].as_ref().unwrap());
}

#[test]
fn blending_identical_tracks_is_identity() {
    let track: Vec<_> = (0..4).map(|s| random_params(10, 10.0, 40.0, s)).collect();
    assert_eq!(blend_parameters(&track, &track, &[2, 3, 8]).unwrap(), track);
    assert!(blend_parameters(&track, &track[..3], &[]).is_err());
}
