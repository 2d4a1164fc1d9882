use facecap::fixtures::{HeadConfig, HeadFixture};
use facecap::render::{rasterize, uv_from_fragments, RenderOptions, RenderSetup, Texture};
use facecap::texture::{gather, merge, turntable_poses, GatherConfig, KdTree2, PhotonMap, PhotonSample, TextureMap};
use facecap::{PoseParams, Vec2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(n: usize, seed: u64) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect()
}

fn brute_knn(points: &[Vec2], q: &Vec2, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, (p - q).norm())).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn kdtree_agrees_with_linear_scan() {
    let points = random_points(1000, 1);
    let tree = KdTree2::build(points.clone());
    for (qi, q) in random_points(300, 2).iter().enumerate() {
        for k in [1, 8, 25] {
            let got: Vec<usize> = tree.knn(q, k).iter().map(|n| n.0).collect();
            let want: Vec<usize> = brute_knn(&points, q, k).iter().map(|n| n.0).collect();
            assert_eq!(got, want, "query {qi} k {k}");
        }
    }
}

#[test]
fn kdtree_orders_duplicates_by_index() {
    let mut points = random_points(50, 3);
    points.extend(std::iter::repeat_n(Vec2::new(0.5, 0.5), 10));
    let tree = KdTree2::build(points.clone());
    let got: Vec<usize> = tree.knn(&Vec2::new(0.5, 0.5), 10).iter().map(|n| n.0).collect();
    assert_eq!(got, (50..60).collect::<Vec<_>>());
}

#[test]
fn confidence_ranks_match_brute_force_radii() {
    let points = random_points(1000, 4);
    let map = PhotonMap {
        samples: points
            .iter()
            .map(|&uv| PhotonSample {
                uv,
                color: [uv.x, uv.y, 0.5],
                source: 0,
            })
            .collect(),
        sources: vec!["s".into()],
    };
    let config = GatherConfig {
        width: 32,
        height: 32,
        cutoff: 1.0,
        ..GatherConfig::default()
    };
    let tex = gather(&map, &config).unwrap();
    let radii: Vec<f64> = (0..32 * 32)
        .map(|t| brute_knn(&points, &tex.texel_center(t % 32, t / 32), config.k).last().unwrap().1)
        .collect();
    let mut by_conf: Vec<usize> = (0..radii.len()).collect();
    by_conf.sort_by(|&a, &b| tex.confidence[b].total_cmp(&tex.confidence[a]).then(a.cmp(&b)));
    let mut by_radius: Vec<usize> = (0..radii.len()).collect();
    by_radius.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]).then(a.cmp(&b)));
    assert_eq!(by_conf, by_radius);
    for (c, r) in tex.confidence.iter().zip(&radii) {
        assert_eq!(*c, 1.0 / (config.epsilon + r));
    }
}

#[test]
fn twenty_view_self_splat_reconstructs_the_texture() {
    let head = HeadFixture::new(&HeadConfig::default());
    let truth = &head.skin;
    let texture = Texture::Rgb(truth.clone());
    let camera = head.camera(128, 128);
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &texture,
        options: RenderOptions::default(),
    };
    let mut map = PhotonMap::new();
    let poses = turntable_poses(4, 5, (-20.0, 20.0), (-70.0, 70.0));
    assert_eq!(poses.len(), 20);
    for (i, (pitch, yaw)) in poses.into_iter().enumerate() {
        let params = PoseParams {
            pitch,
            yaw,
            ..head.neutral_params()
        };
        let out = rasterize(&setup, &params);
        map.splat(&out.image, &uv_from_fragments(&head.mesh, &out.fragments), &format!("view{i}"))
            .unwrap();
    }
    let config = GatherConfig {
        width: truth.width,
        height: truth.height,
        ..GatherConfig::default()
    };
    let gathered = gather(&map, &config).unwrap();
    let tree = KdTree2::build(map.samples.iter().map(|s| s.uv).collect());
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..truth.len() {
        let c = gathered.texel_center(t % truth.width, t / truth.width);
        let mut views: Vec<u32> = tree.knn(&c, config.k).iter().map(|n| map.samples[n.0].source).collect();
        views.sort();
        views.dedup();
        if !gathered.valid[t] || views.len() < 3 {
            continue;
        }
        let want = truth.pixels[t];
        total += (0..3).map(|ch| (gathered.colors[t][ch] - want[ch]).abs()).sum::<f64>() / 3.0;
        count += 1;
    }
    assert!(count > truth.len() / 4, "only {count} texels seen in 3 views");
    let mean = total / count as f64;
    assert!(mean < 0.02, "mean RGB error {mean}");
}

fn map_with(conf: f64, color: f64, valid: bool) -> TextureMap {
    TextureMap {
        width: 1,
        height: 1,
        colors: vec![[color; 3]],
        confidence: vec![conf],
        valid: vec![valid],
    }
}

proptest! {
    #[test]
    fn merge_lies_between_inputs(cf in 0.1f64..100.0, ch in 0.1f64..100.0, a in 0.0f64..1.0, b in 0.0f64..1.0, lambda in 0.5f64..8.0) {
        let out = merge(&map_with(cf, a, true), &map_with(ch, b, true), lambda).unwrap();
        let c = out.colors[0][0];
        prop_assert!(c >= a.min(b) - 1e-12 && c <= a.max(b) + 1e-12);
        prop_assert_eq!(out.confidence[0], (lambda * cf).max(ch));
    }

    #[test]
    fn merge_passes_through_a_lone_valid_input(c in 0.1f64..100.0, a in 0.0f64..1.0) {
        let out = merge(&map_with(c, a, true), &map_with(5.0, 0.3, false), 4.0).unwrap();
        prop_assert!((out.colors[0][0] - a).abs() < 1e-12);
        let out = merge(&map_with(5.0, 0.3, false), &map_with(c, a, true), 4.0).unwrap();
        prop_assert!((out.colors[0][0] - a).abs() < 1e-12);
    }
}

fn colored_map(points: &[Vec2]) -> PhotonMap {
    PhotonMap {
        samples: points
            .iter()
            .map(|&uv| PhotonSample {
                uv,
                color: [uv.x, uv.y, uv.x * uv.y],
                source: 0,
            })
            .collect(),
        sources: vec!["s".into()],
    }
}

fn small_gather(k: usize) -> GatherConfig {
    GatherConfig {
        width: 24,
        height: 24,
        k,
        cutoff: 1.0,
        ..GatherConfig::default()
    }
}

#[test]
fn gather_ignores_sample_order() {
    let points = random_points(400, 8);
    let mut shuffled = points.clone();
    shuffled.reverse();
    shuffled.rotate_left(37);
    let a = gather(&colored_map(&points), &small_gather(8)).unwrap();
    let b = gather(&colored_map(&shuffled), &small_gather(8)).unwrap();
    assert_eq!(a.valid, b.valid);
    for t in 0..a.colors.len() {
        assert!((a.confidence[t] - b.confidence[t]).abs() < 1e-12);
        for c in 0..3 {
            assert!((a.colors[t][c] - b.colors[t][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicating_every_sample_never_lowers_confidence() {
    let points = random_points(300, 9);
    let doubled: Vec<Vec2> = points.iter().chain(&points).copied().collect();
    let a = gather(&colored_map(&points), &small_gather(8)).unwrap();
    let b = gather(&colored_map(&doubled), &small_gather(8)).unwrap();
    for t in 0..a.colors.len() {
        assert!(b.confidence[t] >= a.confidence[t]);
    }
    // with k = 1 the nearest sample, and so the color, is unchanged
    let a = gather(&colored_map(&points), &small_gather(1)).unwrap();
    let b = gather(&colored_map(&doubled), &small_gather(1)).unwrap();
    assert_eq!(a.colors, b.colors);
    assert_eq!(a.confidence, b.confidence);
}

#[test]
fn merging_a_map_with_itself_keeps_its_colors() {
    let tex = gather(&colored_map(&random_points(300, 10)), &small_gather(8)).unwrap();
    let merged = merge(&tex, &tex, 4.0).unwrap();
    for t in 0..tex.colors.len() {
        for c in 0..3 {
            assert!((merged.colors[t][c] - tex.colors[t][c]).abs() < 1e-12);
        }
    }
}
