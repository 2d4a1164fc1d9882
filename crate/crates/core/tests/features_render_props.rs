use facecap::features::{expression_feature, lighting_feature, pose_feature, NOSE_INDICES};
use facecap::fixtures::{random_params, HeadConfig, HeadFixture};
use facecap::geom::{LandmarkSet, PoseFitConfig, DEFAULT_RIGID_INDICES};
use facecap::render::{
    extract_region_boundaries, rasterize, rasterize_fragments, rasterize_uv, Camera, Mesh, Projection, RenderOptions,
    RenderSetup, Sampling, ScreenPoint,
};
use facecap::{BlendshapeRig, Image, PoseParams, Vec2, Vec3};
use proptest::prelude::*;
use std::sync::OnceLock;

fn head() -> &'static HeadFixture {
    static HEAD: OnceLock<HeadFixture> = OnceLock::new();
    HEAD.get_or_init(|| HeadFixture::new(&HeadConfig::default()))
}

fn fixture_landmarks(seed: u64) -> LandmarkSet {
    let h = head();
    h.landmarks(&random_params(10, 10.0, 30.0, seed), &h.camera(128, 128), "x").unwrap()
}

fn ortho(width: usize, height: usize) -> Camera {
    Camera {
        width,
        height,
        projection: Projection::Orthographic { scale: 1.0 },
        eye: Vec3::new(0.0, 0.0, 10.0),
        target: Vec3::zeros(),
        up: Vec3::new(0.0, 1.0, 0.0),
    }
}

fn empty_rig() -> BlendshapeRig {
    BlendshapeRig {
        neutral: Vec::new(),
        deltas: Vec::new(),
        skin_weights: Vec::new(),
        jaw_rotations: Vec::new(),
        jaw_translations: Vec::new(),
        jaw_controls: Vec::new(),
        shape_names: Vec::new(),
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expression_ignores_global_similarity(
        seed in 0u64..50,
        scale in 0.5f64..2.0,
        angle in -3.0f64..3.0,
        tx in -0.5f64..0.5,
        ty in -0.5f64..0.5,
    ) {
        let parts = head().part_spec();
        let marks = fixture_landmarks(seed);
        let (s, c) = angle.sin_cos();
        let moved: Vec<Vec2> = marks
            .points
            .iter()
            .map(|p| scale * Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y) + Vec2::new(tx, ty))
            .collect();
        let a = expression_feature(&marks, &parts).unwrap();
        let b = expression_feature(&LandmarkSet::new("y", moved).unwrap(), &parts).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn pose_feature_ignores_non_rigid_landmarks(seed in 0u64..50, dx in -0.05f64..0.05, dy in -0.05f64..0.05) {
        let marks = fixture_landmarks(seed);
        let mut moved = marks.clone();
        for (i, p) in moved.points.iter_mut().enumerate() {
            if !DEFAULT_RIGID_INDICES.contains(&i) {
                *p += Vec2::new(dx, dy * (i as f64 / 68.0));
            }
        }
        let config = PoseFitConfig::default();
        let a = pose_feature(&marks, &head().template, &config).unwrap();
        let b = pose_feature(&moved, &head().template, &config).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn lighting_follows_image_translation(seed in 0u64..20, sx in 0usize..12, sy in 0usize..12) {
        let size = 96;
        let marks = fixture_landmarks(seed);
        let image = Image::from_fn(size, size, |x, y| {
            let (u, v) = (x as f64, y as f64);
            [(u * 0.07).sin() * 0.5 + 0.5, (v * 0.05 + u * 0.01).cos() * 0.5 + 0.5, ((u + v) * 0.02) % 1.0]
        });
        let shifted = Image::from_fn(size + 12, size + 12, |x, y| {
            if x >= sx && y >= sy && x - sx < size && y - sy < size {
                image.get(x - sx, y - sy)
            } else {
                [0.0; 3]
            }
        });
        // landmarks are normalized, so map them through pixel space
        let scale = |p: &Vec2, dx: usize, dy: usize, from: usize, to: usize| {
            Vec2::new((p.x * from as f64 + dx as f64) / to as f64, (p.y * from as f64 + dy as f64) / to as f64)
        };
        let moved = LandmarkSet::new("s", marks.points.iter().map(|p| scale(p, sx, sy, size, size + 12)).collect()).unwrap();
        let a = lighting_feature(&image, &marks).unwrap();
        let b = lighting_feature(&shifted, &moved).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn coverage_matches_half_plane_oracle(
        pts in proptest::collection::vec((0.3f64..31.7, 0.3f64..31.7), 3),
    ) {
        let camera = ortho(32, 32);
        let screen: Vec<ScreenPoint> = pts.iter().map(|&(x, y)| ScreenPoint { x, y, depth: 1.0 }).collect();
        let frags = rasterize_fragments(&screen, &[[0, 1, 2]], &camera);
        let (a, b, c) = (pts[0], pts[1], pts[2]);
        let area = edge(a, b, c);
        prop_assume!(area.abs() > 1e-3);
        for py in 0..32 {
            for px in 0..32 {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let e = [edge(a, b, p), edge(b, c, p), edge(c, a, p)];
                // skip centers lying numerically on an edge
                prop_assume!(e.iter().all(|v| v.abs() > 1e-9));
                let inside = e.iter().all(|v| v.signum() == area.signum());
                prop_assert_eq!(frags.covered(py * 32 + px).is_some(), inside, "pixel {} {}", px, py);
            }
        }
    }
}

#[test]
fn ramp_lighting_rows_increase() {
    let marks = fixture_landmarks(3);
    let image = Image::from_fn(128, 128, |x, _| [x as f64 / 127.0; 3]);
    let f = lighting_feature(&image, &marks).unwrap();
    for row in 0..3 {
        for col in 1..4 {
            assert!(f.values[(row * 4 + col) * 3] > f.values[(row * 4 + col - 1) * 3]);
        }
    }
    let nose: Vec<_> = NOSE_INDICES.collect();
    assert_eq!(nose.len(), 9);
}

#[test]
fn centroid_pixel_gets_mean_uv() {
    // screen = (16 + x, 16 - y) for this camera
    let world = |sx: f64, sy: f64| Vec3::new(sx - 16.0, 16.0 - sy, 0.0);
    let (a, b, c) = ((4.0, 6.0), (20.5, 9.0), (7.0, 22.5));
    let centroid = ((a.0 + b.0 + c.0) / 3.0, (a.1 + b.1 + c.1) / 3.0);
    assert_eq!(centroid, (10.5, 12.5));
    let mesh = Mesh {
        vertices: vec![world(a.0, a.1), world(b.0, b.1), world(c.0, c.1)],
        triangles: vec![[0, 1, 2]],
        uvs: vec![Vec2::new(0.1, 0.2), Vec2::new(0.9, 0.3), Vec2::new(0.4, 0.8)],
    };
    let raster = rasterize_uv(&mesh, &ortho(32, 32), &PoseParams::neutral(0), &empty_rig());
    let idx = 12 * 32 + 10;
    assert!(raster.valid[idx]);
    let mean = (mesh.uvs[0] + mesh.uvs[1] + mesh.uvs[2]) / 3.0;
    assert!((raster.uv[idx] - mean).norm() < 1e-6);
    assert!(!raster.valid[0]);
}

fn segmented_setup_render(params: &PoseParams, sampling: Sampling) -> Image {
    let h = head();
    let camera = h.camera(64, 64);
    let texture = h.segmented_texture();
    let setup = RenderSetup {
        mesh: &h.mesh,
        camera: &camera,
        rig: &h.rig,
        texture: &texture,
        options: RenderOptions {
            sampling,
            ..RenderOptions::default()
        },
    };
    rasterize(&setup, params).image
}

#[test]
fn nearest_segmented_render_uses_only_palette_colors() {
    let h = head();
    for seed in 0..4 {
        let img = segmented_setup_render(&random_params(10, 10.0, 60.0, seed), Sampling::Nearest);
        for p in &img.pixels {
            assert!(h.segmented.colors.contains(p), "{p:?}");
        }
    }
}

#[test]
fn rendering_is_bit_reproducible() {
    let p = random_params(10, 10.0, 40.0, 17);
    let a = segmented_setup_render(&p, Sampling::Bilinear);
    let b = segmented_setup_render(&p, Sampling::Bilinear);
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.labels, b.labels);
}

#[test]
fn boundary_points_sit_on_label_changes() {
    for seed in 0..3 {
        let img = segmented_setup_render(&random_params(10, 10.0, 40.0, seed), Sampling::Nearest);
        let labels = img.labels.as_ref().expect("segmented renders carry labels");
        let (w, h) = (img.width, img.height);
        let mut changes = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                if x + 1 < w && labels[y * w + x + 1] != l {
                    changes.push(Vec2::new(x as f64 + 1.0, y as f64 + 0.5));
                }
                if y + 1 < h && labels[(y + 1) * w + x] != l {
                    changes.push(Vec2::new(x as f64 + 0.5, y as f64 + 1.0));
                }
            }
        }
        let b = extract_region_boundaries(labels, w, h);
        assert!(!b.curves.is_empty());
        for p in b.curves.iter().flat_map(|c| &c.points).chain(b.junctions.iter().map(|j| &j.point)) {
            let near = changes.iter().map(|c| (c - p).norm()).fold(f64::INFINITY, f64::min);
            assert!(near <= 1.0, "seed {seed}: point {p:?} is {near} px from a label change");
        }
    }
}
