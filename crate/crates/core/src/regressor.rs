//! Staged motion-capture regressor.
//!
//! Four small MLPs over a latent embedding `e`: pose `P(e)`, jaw controls
//! `J(e, p)`, expression controls `W(e, p, w_j)` and landmarks
//! `L(p, w_j, w_c)`. Stage 1 trains P, J, W on synthetic ground truth (with
//! teacher-forced terms), stage 2 trains L alone with a hinge landmark loss,
//! and stage 3 fine-tunes P, J, W through the frozen L on synthetic and real
//! landmarks together.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::LANDMARK_COUNT;
use crate::rig::PoseParams;
use crate::transfer::DomainTransfer;
use crate::{Error, Image, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_HINGE_DELTA: f64 = 0.01;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected stack: leaky-ReLU hidden layers, sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// `out x in` per layer.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Layer inputs and pre-activations of one batched forward pass; columns are
/// samples.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl Mlp {
    /// He-style uniform initialization.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput("an MLP needs >= 2 non-zero layer sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let bound = (6.0 / pair[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(pair[1], pair[0], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::zeros(pair[1]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|p| DMatrix::zeros(p[1], p[0])).collect(),
            biases: sizes.windows(2).map(|p| DVector::zeros(p[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<MlpCache> {
        if input.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.nrows(),
            });
        }
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut a = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let next = z.map(if l == last { sigmoid } else { leaky });
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: a,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input))?.output;
        Ok(out.as_slice().to_vec())
    }

    /// Parameter gradients and input gradient for `dL/d output`.
    pub fn backward(&self, cache: &MlpCache, d_output: &DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let last = self.weights.len() - 1;
        let mut grads = MlpGrads::zeros_like(self);
        // output layer: sigmoid' = s (1 - s)
        let mut delta = d_output.zip_map(&cache.output, |g, s| g * s * (1.0 - s));
        for l in (0..=last).rev() {
            grads.weights[l] = &delta * cache.inputs[l].transpose();
            grads.biases[l] = delta.column_sum();
            let d_in = self.weights[l].transpose() * &delta;
            if l == 0 {
                return (grads, d_in);
            }
            delta = d_in.zip_map(&cache.pre[l - 1], |g, z| g * leaky_grad(z));
        }
        unreachable!("loop returns at layer 0")
    }
}

/// SGD with momentum over one network.
#[derive(Debug, Clone)]
struct Momentum {
    velocity: MlpGrads,
}

impl Momentum {
    fn new(mlp: &Mlp) -> Self {
        Self {
            velocity: MlpGrads::zeros_like(mlp),
        }
    }

    fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads, lr: f64, momentum: f64) {
        for ((w, v), g) in mlp.weights.iter_mut().zip(&mut self.velocity.weights).zip(&grads.weights) {
            *v = &*v * momentum - g * lr;
            *w += &*v;
        }
        for ((b, v), g) in mlp.biases.iter_mut().zip(&mut self.velocity.biases).zip(&grads.biases) {
            *v = &*v * momentum - g * lr;
            *b += &*v;
        }
    }
}

/// Affine map of (pitch, yaw) in degrees onto [0, 1]².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalization {
    pub pitch_range: (f64, f64),
    pub yaw_range: (f64, f64),
}

impl Default for PoseNormalization {
    fn default() -> Self {
        Self {
            pitch_range: (-10.0, 10.0),
            yaw_range: (-80.0, 80.0),
        }
    }
}

impl PoseNormalization {
    pub fn normalize(&self, pitch: f64, yaw: f64) -> [f64; 2] {
        [
            (pitch - self.pitch_range.0) / (self.pitch_range.1 - self.pitch_range.0),
            (yaw - self.yaw_range.0) / (self.yaw_range.1 - self.yaw_range.0),
        ]
    }

    pub fn denormalize(&self, n: &[f64]) -> (f64, f64) {
        (
            self.pitch_range.0 + n[0] * (self.pitch_range.1 - self.pitch_range.0),
            self.yaw_range.0 + n[1] * (self.yaw_range.1 - self.yaw_range.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub landmark_hidden: Vec<usize>,
    pub jaw_controls: Vec<usize>,
    pub expression_controls: Vec<usize>,
    pub landmark_count: usize,
}

impl Architecture {
    pub fn new(latent_dim: usize, jaw_controls: Vec<usize>, expression_controls: Vec<usize>) -> Self {
        Self {
            latent_dim,
            hidden: vec![256; 3],
            landmark_hidden: vec![128; 2],
            jaw_controls,
            expression_controls,
            landmark_count: LANDMARK_COUNT,
        }
    }

    fn sizes(&self, input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend_from_slice(hidden);
        s.push(output);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorBundle {
    pub version: u32,
    pub arch: Architecture,
    pub normalization: PoseNormalization,
    pub p: Mlp,
    pub j: Mlp,
    pub w: Mlp,
    pub l: Mlp,
}

impl RegressorBundle {
    pub fn new(arch: Architecture, normalization: PoseNormalization, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, nj, nw) = (arch.latent_dim, arch.jaw_controls.len(), arch.expression_controls.len());
        if nj == 0 || nw == 0 {
            return Err(Error::InvalidInput("need at least one jaw and one expression control".into()));
        }
        let p = Mlp::new(&arch.sizes(d, &arch.hidden, 2), &mut rng)?;
        let j = Mlp::new(&arch.sizes(d + 2, &arch.hidden, nj), &mut rng)?;
        let w = Mlp::new(&arch.sizes(d + 2 + nj, &arch.hidden, nw), &mut rng)?;
        let l = Mlp::new(&arch.sizes(2 + nj + nw, &arch.landmark_hidden, 2 * arch.landmark_count), &mut rng)?;
        Ok(Self {
            version: BUNDLE_VERSION,
            arch,
            normalization,
            p,
            j,
            w,
            l,
        })
    }

    pub fn n_controls(&self) -> usize {
        self.arch.jaw_controls.len() + self.arch.expression_controls.len()
    }

    /// Sequential prediction from an embedding.
    pub fn predict(&self, e: &[f64]) -> Result<PoseParams> {
        let pose = self.p.predict(e)?;
        let jaw = self.j.predict(&concat(&[e, &pose]))?;
        let expr = self.w.predict(&concat(&[e, &pose, &jaw]))?;
        let (pitch, yaw) = self.normalization.denormalize(&pose);
        let mut w = vec![0.0; self.n_controls()];
        for (&c, v) in self.arch.jaw_controls.iter().zip(&jaw) {
            w[c] = *v;
        }
        for (&c, v) in self.arch.expression_controls.iter().zip(&expr) {
            w[c] = *v;
        }
        Ok(PoseParams { pitch, yaw, w })
    }

    /// Normalized landmark prediction `L(P(e), J, W)`.
    pub fn predict_landmarks(&self, e: &[f64]) -> Result<Vec<f64>> {
        let pose = self.p.predict(e)?;
        let jaw = self.j.predict(&concat(&[e, &pose]))?;
        let expr = self.w.predict(&concat(&[e, &pose, &jaw]))?;
        self.l.predict(&concat(&[&pose, &jaw, &expr]))
    }
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts[0].ncols();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(p);
        r += p.nrows();
    }
    out
}

/// Ground truth of a synthetic sample, controls split as the bundle splits them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pitch: f64,
    pub yaw: f64,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub e: Vec<f64>,
    pub truth: Option<GroundTruth>,
    /// 68 normalized landmarks, `x0, y0, x1, ..`.
    pub landmarks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate multiplier per epoch.
    pub decay: f64,
    pub hinge_delta: f64,
    /// Weight of the landmark hinge in stage 3. The hinge sums over all
    /// markers, so it is weighted well below the control losses.
    pub landmark_weight: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            decay: 0.99,
            hinge_delta: DEFAULT_HINGE_DELTA,
            landmark_weight: 0.05,
            seed: 0,
        }
    }
}

/// Per-marker hinge `Σ_k max(0, ‖pred_k − m_k‖ − δ)` per column, averaged
/// over columns, and its gradient with respect to `pred`.
pub fn hinge_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>, delta: f64) -> (f64, DMatrix<f64>) {
    let batch = pred.ncols().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = DMatrix::zeros(pred.nrows(), pred.ncols());
    for c in 0..pred.ncols() {
        for k in 0..pred.nrows() / 2 {
            let dx = pred[(2 * k, c)] - target[(2 * k, c)];
            let dy = pred[(2 * k + 1, c)] - target[(2 * k + 1, c)];
            let dist = dx.hypot(dy);
            if dist > delta {
                loss += dist - delta;
                grad[(2 * k, c)] = dx / (dist * batch);
                grad[(2 * k + 1, c)] = dy / (dist * batch);
            }
        }
    }
    (loss / batch, grad)
}

/// Mean over columns of the squared norm of `pred − target`, with gradient.
pub fn squared_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let batch = pred.ncols().max(1) as f64;
    let diff = pred - target;
    (diff.norm_squared() / batch, diff * (2.0 / batch))
}

/// Column-stacked batch tensors.
struct Batch {
    e: DMatrix<f64>,
    pose: DMatrix<f64>,
    jaw: DMatrix<f64>,
    expr: DMatrix<f64>,
    marks: DMatrix<f64>,
}

impl RegressorBundle {
    fn batch(&self, samples: &[&TrainSample]) -> Result<Batch> {
        let n = samples.len();
        let d = self.arch.latent_dim;
        let (nj, nw) = (self.arch.jaw_controls.len(), self.arch.expression_controls.len());
        let nm = 2 * self.arch.landmark_count;
        let mut b = Batch {
            e: DMatrix::zeros(d, n),
            pose: DMatrix::zeros(2, n),
            jaw: DMatrix::zeros(nj, n),
            expr: DMatrix::zeros(nw, n),
            marks: DMatrix::zeros(nm, n),
        };
        for (c, s) in samples.iter().enumerate() {
            if s.e.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.e.len() });
            }
            if s.landmarks.len() != nm {
                return Err(Error::DimensionMismatch {
                    expected: nm,
                    got: s.landmarks.len(),
                });
            }
            b.e.set_column(c, &DVector::from_column_slice(&s.e));
            b.marks.set_column(c, &DVector::from_column_slice(&s.landmarks));
            if let Some(t) = &s.truth {
                let pn = self.normalization.normalize(t.pitch, t.yaw);
                b.pose[(0, c)] = pn[0];
                b.pose[(1, c)] = pn[1];
                for (r, &ctrl) in self.arch.jaw_controls.iter().enumerate() {
                    b.jaw[(r, c)] = t.w[ctrl];
                }
                for (r, &ctrl) in self.arch.expression_controls.iter().enumerate() {
                    b.expr[(r, c)] = t.w[ctrl];
                }
            }
        }
        Ok(b)
    }
}

fn split_rows(m: &DMatrix<f64>, sizes: &[usize]) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    let mut r = 0;
    for &s in sizes {
        out.push(m.rows(r, s).into_owned());
        r += s;
    }
    out
}

/// Gradients for P, J, W from one synthetic batch of the stage-1 objective
/// (optionally plus the predicted-input landmark hinge through L).
struct ChainGrads {
    p: MlpGrads,
    j: MlpGrads,
    w: MlpGrads,
    loss: f64,
}

impl RegressorBundle {
    /// Forward chain with predicted inputs, returning caches.
    fn chain(&self, e: &DMatrix<f64>) -> Result<(MlpCache, MlpCache, MlpCache)> {
        let cp = self.p.forward(e)?;
        let cj = self.j.forward(&vstack(&[e, &cp.output]))?;
        let cw = self.w.forward(&vstack(&[e, &cp.output, &cj.output]))?;
        Ok((cp, cj, cw))
    }

    /// Stage-1 objective on a batch:
    /// `‖P(e) − p‖² + ‖J(e, P(e)) − w_j‖² + ‖J(e, p) − w_j‖²
    ///  + ‖W(e, P(e), J(e, P(e))) − w_c‖² + ‖W(e, p, w_j) − w_c‖²`.
    /// With `landmark_weight > 0` the hinge on `L(P, J, W)` is added, L frozen.
    fn stage1_grads(&self, b: &Batch, with_supervised: bool, landmark_weight: f64, delta: f64) -> Result<ChainGrads> {
        let d = self.arch.latent_dim;
        let nj = self.arch.jaw_controls.len();
        let (cp, cj, cw) = self.chain(&b.e)?;
        let mut loss = 0.0;
        let mut g_pose = DMatrix::zeros(2, b.e.ncols());
        let mut g_jaw = DMatrix::zeros(nj, b.e.ncols());
        let mut g_expr = DMatrix::zeros(cw.output.nrows(), b.e.ncols());
        let mut gp = MlpGrads::zeros_like(&self.p);
        let mut gj = MlpGrads::zeros_like(&self.j);
        let mut gw = MlpGrads::zeros_like(&self.w);

        if with_supervised {
            let (lp, dp) = squared_loss(&cp.output, &b.pose);
            let (lj, dj) = squared_loss(&cj.output, &b.jaw);
            let (lw, dw) = squared_loss(&cw.output, &b.expr);
            loss += lp + lj + lw;
            g_pose += dp;
            g_jaw += dj;
            g_expr += dw;

            // teacher-forced terms
            let cj_t = self.j.forward(&vstack(&[&b.e, &b.pose]))?;
            let (lj_t, dj_t) = squared_loss(&cj_t.output, &b.jaw);
            gj.add(&self.j.backward(&cj_t, &dj_t).0);
            let cw_t = self.w.forward(&vstack(&[&b.e, &b.pose, &b.jaw]))?;
            let (lw_t, dw_t) = squared_loss(&cw_t.output, &b.expr);
            gw.add(&self.w.backward(&cw_t, &dw_t).0);
            loss += lj_t + lw_t;
        }

        if landmark_weight > 0.0 {
            let cl = self.l.forward(&vstack(&[&cp.output, &cj.output, &cw.output]))?;
            let (lh, dh) = hinge_loss(&cl.output, &b.marks, delta);
            loss += landmark_weight * lh;
            let (_, d_in) = self.l.backward(&cl, &(dh * landmark_weight));
            let parts = split_rows(&d_in, &[2, nj, cw.output.nrows()]);
            g_pose += &parts[0];
            g_jaw += &parts[1];
            g_expr += &parts[2];
        }

        // W(e, P, J): route input gradients to P and J
        let (gw_main, dw_in) = self.w.backward(&cw, &g_expr);
        gw.add(&gw_main);
        let parts = split_rows(&dw_in, &[d, 2, nj]);
        g_pose += &parts[1];
        g_jaw += &parts[2];
        let (gj_main, dj_in) = self.j.backward(&cj, &g_jaw);
        gj.add(&gj_main);
        g_pose += split_rows(&dj_in, &[d, 2]).remove(1);
        gp.add(&self.p.backward(&cp, &g_pose).0);
        Ok(ChainGrads {
            p: gp,
            j: gj,
            w: gw,
            loss,
        })
    }

    /// Stage-2 hinge on L with predicted and ground-truth inputs.
    fn stage2_grads(&self, b: &Batch, delta: f64) -> Result<(MlpGrads, f64)> {
        let (cp, cj, cw) = self.chain(&b.e)?;
        let mut g = MlpGrads::zeros_like(&self.l);
        let mut loss = 0.0;
        for input in [vstack(&[&cp.output, &cj.output, &cw.output]), vstack(&[&b.pose, &b.jaw, &b.expr])] {
            let cl = self.l.forward(&input)?;
            let (lh, dh) = hinge_loss(&cl.output, &b.marks, delta);
            loss += lh;
            g.add(&self.l.backward(&cl, &dh).0);
        }
        Ok((g, loss))
    }
}

/// Per-epoch mean batch loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: u8,
    pub epoch_loss: Vec<f64>,
}

fn check_supervised(samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if samples.iter().any(|s| s.truth.is_none()) {
        return Err(Error::InvalidInput("synthetic samples need ground truth".into()));
    }
    Ok(())
}

fn batches<'a>(samples: &'a [TrainSample], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a TrainSample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(|c| c.iter().map(|&i| &samples[i]).collect()).collect()
}

pub fn train_stage1(bundle: &mut RegressorBundle, synthetic: &[TrainSample], hyper: &Hyper) -> Result<TrainLog> {
    check_supervised(synthetic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let (mut mp, mut mj, mut mw) = (Momentum::new(&bundle.p), Momentum::new(&bundle.j), Momentum::new(&bundle.w));
    let mut log = TrainLog {
        stage: 1,
        ..Default::default()
    };
    let mut lr = hyper.learning_rate;
    for _ in 0..hyper.epochs {
        let mut total = 0.0;
        let bs = batches(synthetic, hyper.batch_size, &mut rng);
        for chunk in &bs {
            let b = bundle.batch(chunk)?;
            let g = bundle.stage1_grads(&b, true, 0.0, hyper.hinge_delta)?;
            mp.step(&mut bundle.p, &g.p, lr, hyper.momentum);
            mj.step(&mut bundle.j, &g.j, lr, hyper.momentum);
            mw.step(&mut bundle.w, &g.w, lr, hyper.momentum);
            total += g.loss;
        }
        log.epoch_loss.push(total / bs.len() as f64);
        lr *= hyper.decay;
    }
    Ok(log)
}

/// Trains L only; P, J, W are read but never written.
pub fn train_stage2(bundle: &mut RegressorBundle, synthetic: &[TrainSample], hyper: &Hyper) -> Result<TrainLog> {
    check_supervised(synthetic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut ml = Momentum::new(&bundle.l);
    let mut log = TrainLog {
        stage: 2,
        ..Default::default()
    };
    let mut lr = hyper.learning_rate;
    for _ in 0..hyper.epochs {
        let mut total = 0.0;
        let bs = batches(synthetic, hyper.batch_size, &mut rng);
        for chunk in &bs {
            let b = bundle.batch(chunk)?;
            let (g, loss) = bundle.stage2_grads(&b, hyper.hinge_delta)?;
            ml.step(&mut bundle.l, &g, lr, hyper.momentum);
            total += loss;
        }
        log.epoch_loss.push(total / bs.len() as f64);
        lr *= hyper.decay;
    }
    Ok(log)
}

/// Fine-tunes P, J, W on the stage-1 objective plus the landmark hinge over
/// synthetic and real samples; L is read but never written.
pub fn train_stage3(
    bundle: &mut RegressorBundle,
    synthetic: &[TrainSample],
    real: &[TrainSample],
    hyper: &Hyper,
) -> Result<TrainLog> {
    check_supervised(synthetic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let (mut mp, mut mj, mut mw) = (Momentum::new(&bundle.p), Momentum::new(&bundle.j), Momentum::new(&bundle.w));
    let mut log = TrainLog {
        stage: 3,
        ..Default::default()
    };
    let mut lr = hyper.learning_rate;
    for _ in 0..hyper.epochs {
        let mut total = 0.0;
        let sb = batches(synthetic, hyper.batch_size, &mut rng);
        let rb = if real.is_empty() {
            Vec::new()
        } else {
            batches(real, hyper.batch_size, &mut rng)
        };
        for (i, chunk) in sb.iter().enumerate() {
            let b = bundle.batch(chunk)?;
            let mut g = bundle.stage1_grads(&b, true, hyper.landmark_weight, hyper.hinge_delta)?;
            if !rb.is_empty() {
                let r = bundle.batch(&rb[i % rb.len()])?;
                let gr = bundle.stage1_grads(&r, false, hyper.landmark_weight, hyper.hinge_delta)?;
                g.p.add(&gr.p);
                g.j.add(&gr.j);
                g.w.add(&gr.w);
                g.loss += gr.loss;
            }
            mp.step(&mut bundle.p, &g.p, lr, hyper.momentum);
            mj.step(&mut bundle.j, &g.j, lr, hyper.momentum);
            mw.step(&mut bundle.w, &g.w, lr, hyper.momentum);
            total += g.loss;
        }
        log.epoch_loss.push(total / sb.len() as f64);
        lr *= hyper.decay;
    }
    Ok(log)
}

/// Stage-3 objective on whole sets: stage-1 terms on `synthetic`, hinge on
/// both sets.
pub fn combined_objective(bundle: &RegressorBundle, synthetic: &[TrainSample], real: &[TrainSample], hyper: &Hyper) -> Result<f64> {
    let s: Vec<&TrainSample> = synthetic.iter().collect();
    let mut total = bundle.stage1_grads(&bundle.batch(&s)?, true, hyper.landmark_weight, hyper.hinge_delta)?.loss;
    if !real.is_empty() {
        let r: Vec<&TrainSample> = real.iter().collect();
        total += bundle.stage1_grads(&bundle.batch(&r)?, false, hyper.landmark_weight, hyper.hinge_delta)?.loss;
    }
    Ok(total)
}

/// Regress pose and controls from an image through the re-embedding.
pub fn infer(bundle: &RegressorBundle, image: &Image, transfer: &dyn DomainTransfer) -> Result<PoseParams> {
    bundle.predict(&transfer.reembed(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_half() {
        let mlp = Mlp::zeros(&[3, 4, 2]);
        assert_eq!(mlp.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn hinge_dead_zone_and_value() {
        let pred = DMatrix::from_column_slice(4, 1, &[0.5, 0.5, 0.1, 0.1]);
        let target = DMatrix::from_column_slice(4, 1, &[0.505, 0.5, 0.1, 0.13]);
        let (loss, grad) = hinge_loss(&pred, &target, 0.01);
        assert!((loss - 0.02).abs() < 1e-12);
        assert_eq!(grad[(0, 0)], 0.0);
        assert_eq!(grad[(1, 0)], 0.0);
        let (l0, g0) = hinge_loss(&pred, &pred, 0.01);
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn pose_normalization_round_trip() {
        let n = PoseNormalization::default();
        let (p, y) = n.denormalize(&n.normalize(3.5, -61.0));
        assert!((p - 3.5).abs() < 1e-10 && (y + 61.0).abs() < 1e-10);
        assert_eq!(n.denormalize(&[0.5, 0.5]), (0.0, 0.0));
    }

    #[test]
    fn input_dimension_checked() {
        let mlp = Mlp::zeros(&[3, 2]);
        assert!(matches!(mlp.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }
}
