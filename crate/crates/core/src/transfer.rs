//! Domain transfer and latent-space dataset curation.
//!
//! [`DomainTransfer`] is the seam for a shared-encoder, dual-decoder image
//! translator. [`PcaTransfer`] implements it with linear subspaces so the
//! curation logic (contraction, gap finding, expansion) has a real embedding
//! to work in.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::render::{rasterize, RenderSetup};
use crate::rig::PoseParams;
use crate::{Error, Image, Result};

pub const PCA_VERSION: u32 = 1;

/// Shared encoder with one decoder per domain.
pub trait DomainTransfer {
    fn latent_dim(&self) -> usize;
    fn encode(&self, image: &Image) -> Vec<f64>;
    fn decode_synthetic(&self, z: &[f64]) -> Image;
    fn decode_real(&self, z: &[f64]) -> Image;

    /// Re-embedding through the synthetic decoder, `E(D_S(E(I)))`.
    fn reembed(&self, image: &Image) -> Vec<f64> {
        self.encode(&self.decode_synthetic(&self.encode(image)))
    }
}

/// Affine subspace `mean + span(basis)` in flattened-thumbnail space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub mean: DVector<f64>,
    /// Orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Variance captured by each column, descending.
    pub eigenvalues: Vec<f64>,
}

impl Subspace {
    /// Top-`d` principal subspace of the rows of `data` via the Gram matrix.
    pub fn fit(data: &DMatrix<f64>, d: usize) -> Result<Self> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::InsufficientData("no images to fit".into()));
        }
        let mean: DVector<f64> = data.row_mean().transpose();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = 1e-10 * top.max(1e-300);
        let usable = order.iter().take_while(|&&i| eig.eigenvalues[i] > tol).count();
        if usable < d {
            return Err(Error::InsufficientData(format!(
                "{d} components requested but the data spans only {usable}"
            )));
        }
        let dim = data.ncols();
        let mut basis = DMatrix::zeros(dim, d);
        let mut eigenvalues = Vec::with_capacity(d);
        for (c, &i) in order.iter().take(d).enumerate() {
            let lambda = eig.eigenvalues[i];
            let mut col = centered.transpose() * eig.eigenvectors.column(i) / lambda.sqrt();
            col /= col.norm();
            // sign: largest-magnitude entry positive
            let (imax, _) = col.iter().enumerate().fold((0, 0.0), |acc, (j, v)| {
                if v.abs() > acc.1 {
                    (j, v.abs())
                } else {
                    acc
                }
            });
            if col[imax] < 0.0 {
                col = -col;
            }
            basis.set_column(c, &col);
            eigenvalues.push(lambda / n as f64);
        }
        Ok(Self {
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthogonal projection of `x` onto the affine subspace.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = x - &self.mean;
        &self.mean + &self.basis * (self.basis.transpose() * c)
    }
}

/// Linear stand-in for the dual autoencoder, fit on `size x size` thumbnails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransfer {
    pub version: u32,
    pub thumb_size: usize,
    pub shared: Subspace,
    pub real: Subspace,
    pub synthetic: Subspace,
}

pub fn thumbnail(image: &Image, size: usize) -> DVector<f64> {
    let t = if image.width == size && image.height == size {
        image.clone()
    } else {
        image.resize_area(size, size)
    };
    DVector::from_vec(t.to_flat())
}

fn stack(images: &[Image], size: usize) -> DMatrix<f64> {
    let rows: Vec<DVector<f64>> = images.par_iter().map(|im| thumbnail(im, size)).collect();
    let dim = size * size * 3;
    DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c])
}

fn domain_dim(n: usize, d: usize) -> usize {
    d.min(n.saturating_sub(1))
}

fn fit_domain(data: &DMatrix<f64>, d: usize) -> Result<Subspace> {
    let mut k = domain_dim(data.nrows(), d);
    loop {
        match Subspace::fit(data, k) {
            Ok(s) => return Ok(s),
            Err(Error::InsufficientData(_)) if k > 0 => k -= 1,
            Err(e) => return Err(e),
        }
    }
}

/// Shared basis from both domains together; each decoder projects onto the
/// principal subspace of its own domain (up to `d` components).
pub fn fit_pca_transfer(real: &[Image], synthetic: &[Image], d: usize, thumb_size: usize) -> Result<PcaTransfer> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::InsufficientData("both domains need at least one image".into()));
    }
    let all: Vec<Image> = real.iter().chain(synthetic).cloned().collect();
    let shared = Subspace::fit(&stack(&all, thumb_size), d)?;
    let real = fit_domain(&stack(real, thumb_size), d)?;
    let synthetic = fit_domain(&stack(synthetic, thumb_size), d)?;
    Ok(PcaTransfer {
        version: PCA_VERSION,
        thumb_size,
        shared,
        real,
        synthetic,
    })
}

impl PcaTransfer {
    fn decode_into(&self, domain: &Subspace, z: &[f64]) -> Image {
        let x = &self.shared.mean + &self.shared.basis * DVector::from_column_slice(z);
        let y = domain.project(&x);
        Image::from_flat(self.thumb_size, self.thumb_size, y.as_slice())
    }
}

impl DomainTransfer for PcaTransfer {
    fn latent_dim(&self) -> usize {
        self.shared.dim()
    }

    fn encode(&self, image: &Image) -> Vec<f64> {
        let x = thumbnail(image, self.thumb_size) - &self.shared.mean;
        (self.shared.basis.transpose() * x).as_slice().to_vec()
    }

    fn decode_synthetic(&self, z: &[f64]) -> Image {
        self.decode_into(&self.synthetic, z)
    }

    fn decode_real(&self, z: &[f64]) -> Image {
        self.decode_into(&self.real, z)
    }
}

/// Controls that share an activation budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCap {
    pub name: String,
    pub controls: Vec<usize>,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub regions: Vec<RegionCap>,
    pub pitch_range: (f64, f64),
    pub yaw_range: (f64, f64),
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            regions: Vec::new(),
            pitch_range: (-10.0, 10.0),
            yaw_range: (-80.0, 80.0),
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pitch_range.0 <= self.pitch_range.1 && self.yaw_range.0 <= self.yaw_range.1) {
            return Err(Error::InvalidInput("sample ranges must be ordered".into()));
        }
        Ok(())
    }
}

/// Normal centered in `range` with σ = half the range, resampled until inside.
pub fn truncated_gaussian(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    let half = 0.5 * (range.1 - range.0);
    let mid = 0.5 * (range.0 + range.1);
    if half <= 0.0 {
        return mid;
    }
    let normal = Normal::new(mid, half).expect("positive sigma");
    loop {
        let x = normal.sample(rng);
        if x >= range.0 && x <= range.1 {
            return x;
        }
    }
}

/// Zero the lowest activations of each region beyond its cap (ties: the
/// higher control index goes first).
pub fn enforce_caps(w: &mut [f64], regions: &[RegionCap]) {
    for region in regions {
        let mut active: Vec<usize> = region.controls.iter().copied().filter(|&c| w[c] > 0.0).collect();
        if active.len() <= region.cap {
            continue;
        }
        active.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        for &c in &active[region.cap..] {
            w[c] = 0.0;
        }
    }
}

/// Random controls, uniform in [0, 1] then capped per region, with
/// truncated-Gaussian head pose.
pub fn sample_params(n_controls: usize, config: &SampleConfig) -> Result<Vec<PoseParams>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok((0..config.n_samples)
        .map(|_| {
            let mut w: Vec<f64> = (0..n_controls).map(|_| rng.random::<f64>()).collect();
            enforce_caps(&mut w, &config.regions);
            let pitch = truncated_gaussian(&mut rng, config.pitch_range);
            let yaw = truncated_gaussian(&mut rng, config.yaw_range);
            PoseParams { pitch, yaw, w }
        })
        .collect())
}

/// Sampled parameters with their renders.
pub fn sample_dataset(setup: &RenderSetup, config: &SampleConfig) -> Result<Vec<(PoseParams, Image)>> {
    let params = sample_params(setup.rig.shape_count(), config)?;
    Ok(params
        .into_par_iter()
        .map(|p| {
            let img = rasterize(setup, &p).image;
            (p, img)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub source_id: String,
    pub z: Vec<f64>,
}

/// Distance from each query point to its `k_nn`-th nearest reference point
/// (`k_nn` is clamped to the reference count).
pub fn knn_scores(query: &[Embedded], reference: &[Embedded], k_nn: usize) -> Vec<f64> {
    let k = k_nn.clamp(1, reference.len().max(1));
    query
        .par_iter()
        .map(|q| {
            let mut d: Vec<f64> = reference.iter().map(|r| crate::features::euclidean(&q.z, &r.z)).collect();
            if d.is_empty() {
                return f64::INFINITY;
            }
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Split of a dataset into kept and removed points, as indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Original order.
    pub kept: Vec<usize>,
    /// Highest score first.
    pub removed: Vec<usize>,
    pub scores: Vec<f64>,
}

fn remove_top(points: &[Embedded], scores: Vec<f64>, fraction: f64) -> Partition {
    let n = points.len();
    let n_remove = ((fraction.clamp(0.0, 1.0) * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| points[a].source_id.cmp(&points[b].source_id))
            .then(a.cmp(&b))
    });
    let removed: Vec<usize> = order[..n_remove].to_vec();
    let mut is_removed = vec![false; n];
    for &i in &removed {
        is_removed[i] = true;
    }
    Partition {
        kept: (0..n).filter(|&i| !is_removed[i]).collect(),
        removed,
        scores,
    }
}

pub const DEFAULT_PRUNE_FRACTION: f64 = 0.2;
pub const DEFAULT_K_NN: usize = 5;

/// Drop the synthetic points farthest (k-NN distance) from the real data.
pub fn contract(synthetic: &[Embedded], real: &[Embedded], prune_fraction: f64, k_nn: usize) -> Result<Partition> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::InsufficientData("contract needs both sets non-empty".into()));
    }
    let scores = knn_scores(synthetic, real, k_nn);
    Ok(remove_top(synthetic, scores, prune_fraction))
}

/// Real points poorly covered by the synthetic data; `removed` holds the gaps.
pub fn real_outliers(real: &[Embedded], synthetic: &[Embedded], fraction: f64, k_nn: usize) -> Result<Partition> {
    contract(real, synthetic, fraction, k_nn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub diag_range: (f64, f64),
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            diag_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Bootstrap { index: usize },
    Jitter { index: usize, diag: Vec<f64> },
    Interpolation { a: usize, b: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSample {
    pub w: Vec<f64>,
    pub provenance: Provenance,
}

pub fn jitter(w: &[f64], diag: &[f64]) -> Vec<f64> {
    w.iter().zip(diag).map(|(x, d)| (x * d).clamp(0.0, 1.0)).collect()
}

pub fn interpolate(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (alpha * x + (1.0 - alpha) * y).clamp(0.0, 1.0)).collect()
}

/// Grow the bootstrap controls (fit to real gap frames by a solver) to
/// `n_target` samples by alternating diagonal jitters and pairwise
/// interpolations.
pub fn expand(bootstrap: &[Vec<f64>], config: &JitterConfig, n_target: usize) -> Result<Vec<ExpandedSample>> {
    if bootstrap.is_empty() {
        return Err(Error::InsufficientData("expand needs bootstrap parameters".into()));
    }
    let (lo, hi) = config.diag_range;
    if !(lo <= hi) {
        return Err(Error::InvalidInput("jitter range must be ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out: Vec<ExpandedSample> = bootstrap
        .iter()
        .take(n_target)
        .enumerate()
        .map(|(index, w)| ExpandedSample {
            w: w.iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            provenance: Provenance::Bootstrap { index },
        })
        .collect();
    let n = bootstrap.len();
    let mut turn = 0usize;
    while out.len() < n_target {
        let interp = turn % 2 == 1 && n >= 2;
        turn += 1;
        if interp {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let alpha = loop {
                let x: f64 = rng.random();
                if x > 0.0 {
                    break x;
                }
            };
            out.push(ExpandedSample {
                w: interpolate(&bootstrap[a], &bootstrap[b], alpha),
                provenance: Provenance::Interpolation { a, b, alpha },
            });
        } else {
            let index = rng.random_range(0..n);
            let diag: Vec<f64> = bootstrap[index]
                .iter()
                .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect();
            out.push(ExpandedSample {
                w: jitter(&bootstrap[index], &diag),
                provenance: Provenance::Jitter { index, diag },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, z: Vec<f64>) -> Embedded {
        Embedded {
            source_id: id.into(),
            z,
        }
    }

    #[test]
    fn caps_zero_lowest_excess() {
        let mut w = vec![0.9, 0.1, 0.5, 0.7, 0.3];
        enforce_caps(
            &mut w,
            &[RegionCap {
                name: "r".into(),
                controls: vec![0, 1, 2, 3],
                cap: 2,
            }],
        );
        assert_eq!(w, vec![0.9, 0.0, 0.0, 0.7, 0.3]);
    }

    #[test]
    fn zero_caps_zero_everything() {
        let cfg = SampleConfig {
            n_samples: 20,
            regions: vec![RegionCap {
                name: "all".into(),
                controls: (0..4).collect(),
                cap: 0,
            }],
            ..Default::default()
        };
        for p in sample_params(4, &cfg).unwrap() {
            assert!(p.w.iter().all(|&x| x == 0.0));
            assert!(p.pitch.abs() <= 10.0 && p.yaw.abs() <= 80.0);
        }
    }

    #[test]
    fn prune_fraction_zero_keeps_all() {
        let pts: Vec<Embedded> = (0..5).map(|i| emb(&format!("{i}"), vec![i as f64])).collect();
        let p = contract(&pts, &pts, 0.0, 1).unwrap();
        assert_eq!(p.kept.len(), 5);
        assert!(p.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ties_break_by_source_id() {
        let pts: Vec<Embedded> = ["c", "a", "b"].iter().map(|id| emb(id, vec![0.0])).collect();
        let p = contract(&pts, &pts, 0.34, 1).unwrap();
        assert_eq!(p.removed, vec![1, 2]);
    }

    #[test]
    fn jitter_of_zero_is_zero() {
        let out = expand(&[vec![0.0; 4]], &JitterConfig::default(), 10).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|s| s.w.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn midpoint_interpolation() {
        assert_eq!(interpolate(&[0.2, 1.0], &[0.4, 0.0], 0.5), vec![0.30000000000000004, 0.5]);
    }
}
