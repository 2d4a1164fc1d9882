use facecap::fixtures::{random_params, HeadConfig, HeadFixture};
use facecap::render::{
    image_flow_linearization, image_loss, image_loss_grad, rasterize, GradientMethod, RenderOptions, RenderSetup,
    Texture,
};

fn fixture() -> (HeadFixture, facecap::render::Camera) {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(64, 64);
    (head, camera)
}

// brows, lids and pucker move interior region edges but not the outline
const OFF_SILHOUETTE: [usize; 5] = [6, 7, 8, 9, 10];

#[test]
fn fixed_correspondence_matches_differences_off_silhouette() {
    let (head, camera) = fixture();
    let texture = head.segmented_texture().prefiltered(1.5);
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    for seed in 0..4 {
        let truth = random_params(10, 10.0, 30.0, seed);
        let target = rasterize(&setup, &truth).image;
        let mut at = truth.clone();
        for w in &mut at.w {
            *w = (*w - 0.15).max(0.0);
        }
        for sigma in [0.0, 1.0] {
            let (_, fc) = image_loss_grad(&setup, &at, &target, &OFF_SILHOUETTE, GradientMethod::FixedCorrespondence, sigma).unwrap();
            let (_, fd) =
                image_loss_grad(&setup, &at, &target, &OFF_SILHOUETTE, GradientMethod::FiniteDifference { step: 1e-4 }, sigma)
                    .unwrap();
            let scale = fd.iter().map(|g| g.abs()).fold(0.0, f64::max);
            for (k, (a, b)) in fc.iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() <= 0.1 * b.abs().max(0.1 * scale),
                    "seed {seed} sigma {sigma} index {}: {a:e} vs {b:e}",
                    OFF_SILHOUETTE[k]
                );
            }
        }
    }
}

#[test]
fn matching_target_has_zero_loss_and_finite_gradients() {
    let (head, camera) = fixture();
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let params = random_params(10, 10.0, 30.0, 3);
    let target = rasterize(&setup, &params).image;
    let block: Vec<usize> = (0..12).collect();
    for method in [GradientMethod::FixedCorrespondence, GradientMethod::ImageFlow, GradientMethod::FiniteDifference { step: 1e-3 }] {
        let (loss, grad) = image_loss_grad(&setup, &params, &target, &block, method, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}

#[test]
fn flow_linearization_agrees_with_flow_gradient() {
    let (head, camera) = fixture();
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let target = rasterize(&setup, &random_params(10, 10.0, 30.0, 1)).image;
    let at = random_params(10, 10.0, 30.0, 2);
    let block = [0, 1, 2, 5, 9];
    for sigma in [0.0, 2.0] {
        let lin = image_flow_linearization(&setup, &at, &target, &block, sigma).unwrap();
        let (loss, grad) = image_loss_grad(&setup, &at, &target, &block, GradientMethod::ImageFlow, sigma).unwrap();
        assert!((lin.loss - loss).abs() < 1e-15);
        assert!((lin.loss - image_loss(&setup, &at, &target, sigma)).abs() < 1e-15);
        let g = lin.gradient();
        let tol = 1e-6 * g.norm();
        for (a, b) in g.iter().zip(&grad) {
            assert!((a - b).abs() <= tol, "{a:e} vs {b:e}");
        }
    }
}

#[test]
fn flow_gradient_points_downhill_on_the_blurred_loss() {
    let (head, camera) = fixture();
    let texture = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let block: Vec<usize> = (0..12).collect();
    for seed in 0..5 {
        let truth = random_params(10, 10.0, 30.0, seed);
        let target = rasterize(&setup, &truth).image;
        let mut at = truth.clone();
        at.pitch += 3.0;
        at.yaw -= 4.0;
        for w in &mut at.w {
            *w = (*w + 0.2).min(1.0);
        }
        let sigma = 2.0;
        let (loss, g) = image_loss_grad(&setup, &at, &target, &block, GradientMethod::ImageFlow, sigma).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = at.to_vector();
        let stepped: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - 0.05 * gi / norm).collect();
        let after = image_loss(&setup, &facecap::PoseParams::from_vector(&stepped), &target, sigma);
        assert!(after < loss, "seed {seed}: {after:e} !< {loss:e}");
    }
}

#[test]
fn flat_texture_has_no_fixed_correspondence_gradient() {
    let (head, camera) = fixture();
    let texture = Texture::Flat { color: [0.5; 3] };
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let target = rasterize(&setup, &random_params(10, 10.0, 30.0, 4)).image;
    let (_, g) = image_loss_grad(&setup, &head.neutral_params(), &target, &[0, 1, 2], GradientMethod::FixedCorrespondence, 0.0)
        .unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}
