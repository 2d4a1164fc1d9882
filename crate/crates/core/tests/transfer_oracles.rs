use facecap::transfer::{
    contract, expand, fit_pca_transfer, knn_scores, sample_params, DomainTransfer, Embedded, JitterConfig, Provenance,
    RegionCap, SampleConfig, Subspace, DEFAULT_K_NN, DEFAULT_PRUNE_FRACTION,
};
use facecap::Image;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_cloud(prefix: &str, n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Embedded> {
    (0..n)
        .map(|i| Embedded {
            source_id: format!("{prefix}{i:05}"),
            z: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
        })
        .collect()
}

#[test]
fn planted_outlier_is_pruned_first() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = gaussian_cloud("r", 150, 8, &mut rng);
        let mut synth = gaussian_cloud("s", 199, 8, &mut rng);
        let at = rng.random_range(0..synth.len());
        synth.insert(
            at,
            Embedded {
                source_id: "planted".into(),
                z: (0..8).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect(),
            },
        );
        let part = contract(&synth, &real, DEFAULT_PRUNE_FRACTION, DEFAULT_K_NN).unwrap();
        assert_eq!(part.removed.len(), 40);
        assert_eq!(part.removed[0], at, "seed {seed}");
        assert_eq!(part.kept.len() + part.removed.len(), synth.len());
    }
}

#[test]
fn knn_scores_match_sorted_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = gaussian_cloud("q", 40, 5, &mut rng);
    let r = gaussian_cloud("r", 60, 5, &mut rng);
    for k in [1, 5, 60, 100] {
        let scores = knn_scores(&q, &r, k);
        for (qi, s) in q.iter().zip(&scores) {
            let mut d: Vec<f64> = r
                .iter()
                .map(|ri| qi.z.iter().zip(&ri.z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            assert!((d[k.min(60) - 1] - s).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn contract_removes_the_ceiling_count(n in 1usize..400, fraction in 0.0f64..1.0, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = gaussian_cloud("r", 20, 3, &mut rng);
        let synth = gaussian_cloud("s", n, 3, &mut rng);
        let part = contract(&synth, &real, fraction, 5).unwrap();
        let want = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
        prop_assert_eq!(part.removed.len(), want);
        let worst_kept = part.kept.iter().map(|&i| part.scores[i]).fold(f64::NEG_INFINITY, f64::max);
        for &i in &part.removed {
            prop_assert!(part.scores[i] >= worst_kept);
        }
    }

    #[test]
    fn expansion_stays_in_the_unit_cube(seed in 0u64..200, n_boot in 1usize..30, n_target in 1usize..600) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boot: Vec<Vec<f64>> = (0..n_boot).map(|_| (0..10).map(|_| rng.random()).collect()).collect();
        let out = expand(&boot, &JitterConfig { seed, ..JitterConfig::default() }, n_target).unwrap();
        prop_assert_eq!(out.len(), n_target);
        for s in &out {
            prop_assert!(s.w.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn expansion_records_how_each_sample_was_made() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let boot: Vec<Vec<f64>> = (0..25).map(|_| (0..10).map(|_| rng.random()).collect()).collect();
    let out = expand(&boot, &JitterConfig::default(), 500).unwrap();
    assert_eq!(out.len(), 500);
    let (mut jitters, mut interps) = (0, 0);
    for (i, s) in out.iter().enumerate() {
        match &s.provenance {
            Provenance::Bootstrap { index } => {
                assert!(i < boot.len());
                assert_eq!(s.w, boot[*index]);
            }
            Provenance::Jitter { index, diag } => {
                jitters += 1;
                assert!(diag.iter().all(|d| (0.8..=1.2).contains(d)));
                for ((w, b), d) in s.w.iter().zip(&boot[*index]).zip(diag) {
                    assert_eq!(*w, (b * d).clamp(0.0, 1.0));
                }
            }
            Provenance::Interpolation { a, b, alpha } => {
                interps += 1;
                assert!(a != b && *alpha > 0.0 && *alpha < 1.0);
            }
        }
    }
    assert!(jitters > 200 && interps > 200);
    assert_eq!(expand(&boot, &JitterConfig::default(), 500).unwrap(), out);
}

#[test]
fn two_point_pca_is_the_connecting_line() {
    let a = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
    let b = DVector::from_vec(vec![3.0, 1.0, 0.0, 0.5]);
    let data = DMatrix::from_rows(&[a.transpose(), b.transpose()]);
    let s = Subspace::fit(&data, 1).unwrap();
    let mid = (&a + &b) * 0.5;
    assert!((&s.mean - &mid).norm() < 1e-12);
    let dir = (&b - &a).normalize();
    let col = s.basis.column(0).into_owned();
    assert!((col.dot(&dir).abs() - 1.0).abs() < 1e-12);
    let imax = col.iamax();
    assert!(col[imax] > 0.0);
    assert!((s.eigenvalues[0] - (&b - &a).norm_squared() / 4.0).abs() < 1e-12);
    assert!((s.project(&a) - &a).norm() < 1e-12);
    assert!(Subspace::fit(&data, 2).is_err());
}

#[test]
fn full_rank_pca_reconstructs_its_training_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut noise_image = || {
        let v: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random()).collect();
        Image::from_flat(8, 8, &v)
    };
    let real: Vec<Image> = (0..6).map(|_| noise_image()).collect();
    let synth: Vec<Image> = (0..6).map(|_| noise_image()).collect();
    let t = fit_pca_transfer(&real, &synth, 11, 8).unwrap();
    assert_eq!(t.latent_dim(), 11);
    for img in &synth {
        let back = t.decode_synthetic(&t.encode(img));
        assert!(back.mse(img) < 1e-20);
    }
    for img in &real {
        let back = t.decode_real(&t.encode(img));
        assert!(back.mse(img) < 1e-20);
    }
}

#[test]
fn sampled_parameters_respect_caps_and_ranges() {
    let config = SampleConfig {
        n_samples: 2000,
        regions: vec![RegionCap {
            name: "lips".into(),
            controls: vec![2, 3, 8],
            cap: 2,
        }],
        seed: 4,
        ..SampleConfig::default()
    };
    let params = sample_params(10, &config).unwrap();
    assert_eq!(params, sample_params(10, &config).unwrap());
    for p in &params {
        assert!([2, 3, 8].iter().filter(|&&c| p.w[c] > 0.0).count() <= 2);
        assert!((-10.0..=10.0).contains(&p.pitch) && (-80.0..=80.0).contains(&p.yaw));
    }
    let mean_yaw = params.iter().map(|p| p.yaw).sum::<f64>() / params.len() as f64;
    assert!(mean_yaw.abs() < 4.0);
}
