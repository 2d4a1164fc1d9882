use criterion::{criterion_group, criterion_main, Criterion};
use facecap::fixtures::{feature_dataset, random_params, segmented_frame, HeadConfig, HeadFixture};
use facecap::index::{build_index, IndexConfig};
use facecap::render::{rasterize, rasterize_uv, RenderOptions, RenderSetup};
use facecap::solver::{solve_frame, SolveConfig};
use facecap::texture::{gather, GatherConfig, KdTree2, PhotonMap};
use facecap::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn render(c: &mut Criterion) {
    let head = HeadFixture::new(&HeadConfig::default());
    let tex = head.skin_texture();
    let params = random_params(head.rig.shape_count(), 10.0, 40.0, 1);
    for size in [64, 256] {
        let camera = head.camera(size, size);
        let setup = RenderSetup {
            mesh: &head.mesh,
            camera: &camera,
            rig: &head.rig,
            texture: &tex,
            options: RenderOptions::default(),
        };
        c.bench_function(&format!("rasterize_{size}"), |b| b.iter(|| rasterize(black_box(&setup), black_box(&params))));
    }
}

fn solve(c: &mut Criterion) {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(64, 64);
    let tex = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &tex,
        options: RenderOptions::default(),
    };
    let truth = random_params(head.rig.shape_count(), 10.0, 40.0, 3);
    let target = segmented_frame(&head, &camera, &truth);
    let mut group = c.benchmark_group("solver");
    group.sample_size(10);
    group.bench_function("solve_frame_64", |b| {
        b.iter(|| solve_frame(&target, &setup, &head.neutral_params(), &SolveConfig::default()).unwrap())
    });
    group.finish();
}

fn texture(c: &mut Criterion) {
    let head = HeadFixture::new(&HeadConfig::default());
    let camera = head.camera(128, 128);
    let tex = head.skin_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &camera,
        rig: &head.rig,
        texture: &tex,
        options: RenderOptions::default(),
    };
    let mut map = PhotonMap::new();
    for (i, yaw) in [-40.0, 0.0, 40.0].into_iter().enumerate() {
        let mut p = head.neutral_params();
        p.yaw = yaw;
        let img = rasterize(&setup, &p).image;
        let raster = rasterize_uv(&head.mesh, &camera, &p, &head.rig);
        map.splat(&img, &raster, &format!("v{i}")).unwrap();
    }
    c.bench_function("gather_128", |b| b.iter(|| gather(black_box(&map), &GatherConfig::default()).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<Vec2> = (0..20_000).map(|_| Vec2::new(rng.random(), rng.random())).collect();
    let tree = KdTree2::build(points);
    c.bench_function("kdtree_knn8", |b| b.iter(|| tree.knn(black_box(&Vec2::new(0.4, 0.6)), 8)));
}

fn index(c: &mut Criterion) {
    let head = HeadFixture::new(&HeadConfig::default());
    let features = feature_dataset(&head, 500, 64, 7).unwrap();
    let mut group = c.benchmark_group("index");
    group.sample_size(10);
    group.bench_function("build_500", |b| b.iter(|| build_index(black_box(&features), &IndexConfig::default()).unwrap()));
    let idx = build_index(&features, &IndexConfig::default()).unwrap();
    let q = idx.query_features_of(&features[0]);
    group.bench_function("query", |b| b.iter(|| idx.query(black_box(&q), &[2, 3, 1]).unwrap()));
    group.finish();
}

criterion_group!(benches, render, solve, texture, index);
criterion_main!(benches);
