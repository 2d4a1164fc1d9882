//! Inverse rendering by block coordinate descent.
//!
//! Each epoch visits the rigid pose, then the jaw-skinned controls, then the
//! remaining expression controls. A block step is either a damped
//! Gauss-Newton step on the image-flow linearization (default) or a
//! normalized gradient step, both accepted by projected Armijo backtracking.
//! The final `joint_epochs` descend every parameter as one block. A
//! coarse-to-fine blur schedule applies to the residual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::render::{image_flow_linearization, image_loss, image_loss_grad, GradientMethod, RenderSetup};
use crate::rig::{BlendshapeRig, PoseParams};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Armijo sufficient-decrease constant.
    pub c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Growth of the step length after an accepted step.
    pub grow: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            c: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
            grow: 2.0,
        }
    }
}

/// Texture prefilter (texels) and residual blur (pixels) from `first_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurStage {
    pub first_epoch: usize,
    pub texture_sigma: f64,
    pub image_sigma: f64,
}

impl BlurStage {
    pub fn image(first_epoch: usize, image_sigma: f64) -> Self {
        Self {
            first_epoch,
            texture_sigma: 0.0,
            image_sigma,
        }
    }

    pub fn texture(first_epoch: usize, texture_sigma: f64) -> Self {
        Self {
            first_epoch,
            texture_sigma,
            image_sigma: 0.0,
        }
    }
}

/// How a block picks its search direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepRule {
    /// Normalized negative gradient from [`SolveConfig::gradient`], with an
    /// adaptive step length starting at [`SolveConfig::initial_steps`].
    Gradient,
    /// Levenberg-Marquardt direction on the image-flow linearization;
    /// `damping` is the initial multiplier of the normal-matrix diagonal.
    GaussNewton { damping: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Parameter-vector indices per block (`0` pitch, `1` yaw, `2 + i`
    /// control `i`). Empty means pose, jaw, expression from the rig.
    pub blocks: Vec<Vec<usize>>,
    /// Initial step length per block in parameter units; the last entry
    /// repeats for extra blocks.
    pub initial_steps: Vec<f64>,
    pub epochs: usize,
    /// Early stop when the relative decrease over `patience` epochs falls
    /// below this.
    pub rel_tolerance: f64,
    pub patience: usize,
    /// Descent steps per block visit.
    pub inner_iterations: usize,
    /// The last `joint_epochs` epochs descend all parameters as one block.
    pub joint_epochs: usize,
    pub line_search: LineSearch,
    pub step_rule: StepRule,
    pub gradient: GradientMethod,
    /// Blur stages by starting epoch, ascending.
    pub schedule: Vec<BlurStage>,
    /// Pose is kept inside these bounds (degrees).
    pub pitch_limit: f64,
    pub yaw_limit: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            initial_steps: vec![4.0, 0.2, 0.2],
            epochs: 30,
            rel_tolerance: 1e-5,
            patience: 3,
            inner_iterations: 3,
            joint_epochs: 20,
            line_search: LineSearch::default(),
            step_rule: StepRule::GaussNewton { damping: 1e-2 },
            gradient: GradientMethod::ImageFlow,
            schedule: vec![BlurStage::image(0, 4.0), BlurStage::image(8, 2.0), BlurStage::image(16, 1.0)],
            pitch_limit: 60.0,
            yaw_limit: 90.0,
        }
    }
}

impl SolveConfig {
    pub fn resolved_blocks(&self, rig: &BlendshapeRig) -> Vec<Vec<usize>> {
        if !self.blocks.is_empty() {
            return self.blocks.clone();
        }
        default_blocks(rig)
    }

    fn stage_at(&self, epoch: usize) -> usize {
        self.schedule.iter().rposition(|s| s.first_epoch <= epoch).unwrap_or(0)
    }

    fn step_for(&self, block: usize) -> f64 {
        self.initial_steps
            .get(block)
            .or(self.initial_steps.last())
            .copied()
            .unwrap_or(1.0)
    }
}

/// Pose, jaw-skinned controls, then the rest.
pub fn default_blocks(rig: &BlendshapeRig) -> Vec<Vec<usize>> {
    let jaw: Vec<usize> = rig.jaw_controls.iter().map(|&j| j + 2).collect();
    let expr: Vec<usize> = rig.non_jaw_controls().into_iter().map(|j| j + 2).collect();
    let mut blocks = vec![vec![0, 1]];
    if !jaw.is_empty() {
        blocks.push(jaw);
    }
    if !expr.is_empty() {
        blocks.push(expr);
    }
    blocks
}

fn check_blocks(blocks: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in blocks.iter().flatten() {
        if i >= n || seen[i] {
            return Err(Error::InvalidInput("blocks must partition the parameter vector".into()));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidInput("blocks must partition the parameter vector".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxEpochs,
    /// No block lowered the loss in the first epoch; params are the init.
    NoDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub params: PoseParams,
    /// Unblurred loss of `params`.
    pub loss: f64,
    /// Best unblurred loss seen after each epoch (starting with the init).
    pub loss_trace: Vec<f64>,
    pub status: SolveStatus,
    pub epochs: usize,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

fn project(x: &mut [f64], config: &SolveConfig) {
    x[0] = x[0].clamp(-config.pitch_limit, config.pitch_limit);
    x[1] = x[1].clamp(-config.yaw_limit, config.yaw_limit);
    for w in &mut x[2..] {
        *w = w.clamp(0.0, 1.0);
    }
}

/// One block visit: up to `inner_iterations` projected steps along the
/// normalized negative gradient. Returns the new loss.
fn descend_block(
    setup: &RenderSetup,
    target: &Image,
    x: &mut Vec<f64>,
    mut loss: f64,
    block: &[usize],
    step: &mut f64,
    sigma: f64,
    config: &SolveConfig,
) -> Result<f64> {
    let ls = &config.line_search;
    for _ in 0..config.inner_iterations {
        let params = PoseParams::from_vector(x);
        let (_, grad) = image_loss_grad(setup, &params, target, block, config.gradient, sigma)?;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm > 0.0) {
            break;
        }
        let mut alpha = *step;
        let mut accepted = false;
        for _ in 0..=ls.max_backtracks {
            let mut trial = x.clone();
            for (&i, g) in block.iter().zip(&grad) {
                trial[i] -= alpha * g / gnorm;
            }
            project(&mut trial, config);
            let decrease: f64 = block.iter().zip(&grad).map(|(&i, g)| g * (x[i] - trial[i])).sum();
            if decrease <= 0.0 {
                // projection removed the whole step
                break;
            }
            let trial_loss = image_loss(setup, &PoseParams::from_vector(&trial), target, sigma);
            if trial_loss <= loss - ls.c * decrease {
                *x = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            alpha *= ls.shrink;
        }
        if accepted {
            *step = alpha * ls.grow;
        } else {
            *step = alpha.max(1e-12);
            break;
        }
    }
    Ok(loss)
}

/// One block visit with damped Gauss-Newton directions. `damping` adapts:
/// divided by `grow` after an accepted step, multiplied by `1 / shrink` per
/// backtrack.
fn gauss_newton_block(
    setup: &RenderSetup,
    target: &Image,
    x: &mut Vec<f64>,
    mut loss: f64,
    block: &[usize],
    damping: &mut f64,
    sigma: f64,
    config: &SolveConfig,
) -> Result<f64> {
    let ls = &config.line_search;
    for _ in 0..config.inner_iterations {
        let lin = image_flow_linearization(setup, &PoseParams::from_vector(x), target, block, sigma)?;
        let grad = lin.gradient();
        if !(grad.norm() > 0.0) {
            break;
        }
        let normal = lin.normal_matrix();
        let floor = 1e-9 * normal.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        for _ in 0..=ls.max_backtracks {
            let mut a = normal.clone();
            for k in 0..block.len() {
                a[(k, k)] += *damping * normal[(k, k)] + floor;
            }
            let Some(chol) = a.cholesky() else {
                *damping /= ls.shrink;
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let mut trial = x.clone();
            for (&i, d) in block.iter().zip(delta.iter()) {
                trial[i] += d;
            }
            project(&mut trial, config);
            let decrease: f64 = block.iter().zip(grad.iter()).map(|(&i, g)| g * (x[i] - trial[i])).sum();
            if decrease > 0.0 {
                let trial_loss = image_loss(setup, &PoseParams::from_vector(&trial), target, sigma);
                if trial_loss <= loss - ls.c * decrease {
                    *x = trial;
                    loss = trial_loss;
                    accepted = true;
                    break;
                }
            }
            *damping /= ls.shrink;
        }
        if accepted {
            *damping = (*damping / ls.grow).max(1e-9);
        } else {
            *damping = damping.min(1e9);
            break;
        }
    }
    Ok(loss)
}

/// Fit pose and controls so the render matches `target`.
pub fn solve_frame(target: &Image, setup: &RenderSetup, init: &PoseParams, config: &SolveConfig) -> Result<SolveResult> {
    let n = 2 + setup.rig.shape_count();
    if init.w.len() != setup.rig.shape_count() {
        return Err(Error::DimensionMismatch {
            expected: setup.rig.shape_count(),
            got: init.w.len(),
        });
    }
    if target.width != setup.camera.width || target.height != setup.camera.height {
        return Err(Error::DimensionMismatch {
            expected: setup.camera.width * setup.camera.height,
            got: target.len(),
        });
    }
    let blocks = config.resolved_blocks(setup.rig);
    check_blocks(&blocks, n)?;

    let mut x = init.to_vector();
    project(&mut x, config);
    let init_loss = image_loss(setup, init, target, 0.0);
    let mut best = (init_loss, x.clone());
    let mut trace = vec![init_loss];
    let joint: Vec<usize> = (0..n).collect();
    let mut steps: Vec<f64> = (0..=blocks.len())
        .map(|b| match config.step_rule {
            StepRule::Gradient => config.step_for(b),
            StepRule::GaussNewton { damping } => damping,
        })
        .collect();
    if init_loss <= f64::EPSILON {
        return Ok(SolveResult {
            params: init.clone(),
            loss: init_loss,
            loss_trace: trace,
            status: SolveStatus::Converged,
            epochs: 0,
        });
    }

    let textures: Vec<_> = config
        .schedule
        .iter()
        .map(|st| setup.texture.prefiltered(st.texture_sigma))
        .collect();
    let final_stage = config.schedule.len().saturating_sub(1);
    let final_from = config.schedule.last().map(|s| s.first_epoch).unwrap_or(0);
    let mut status = SolveStatus::MaxEpochs;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        let (stage_setup, sigma) = match config.schedule.get(config.stage_at(epoch)) {
            Some(st) => (
                RenderSetup {
                    texture: &textures[config.stage_at(epoch)],
                    ..*setup
                },
                st.image_sigma,
            ),
            None => (*setup, 0.0),
        };
        let mut loss = image_loss(&stage_setup, &PoseParams::from_vector(&x), target, sigma);
        let start = loss;
        let visits: Vec<(usize, &[usize])> = if epoch + config.joint_epochs >= config.epochs {
            vec![(blocks.len(), &joint[..])]
        } else {
            blocks.iter().map(|b| &b[..]).enumerate().collect()
        };
        for (b, block) in visits {
            loss = match config.step_rule {
                StepRule::Gradient => {
                    descend_block(&stage_setup, target, &mut x, loss, block, &mut steps[b], sigma, config)?
                }
                StepRule::GaussNewton { .. } => {
                    gauss_newton_block(&stage_setup, target, &mut x, loss, block, &mut steps[b], sigma, config)?
                }
            };
        }
        if epoch == 0 && !(loss < start) {
            status = SolveStatus::NoDescent;
            break;
        }
        let plain = image_loss(setup, &PoseParams::from_vector(&x), target, 0.0);
        if plain < best.0 {
            best = (plain, x.clone());
        }
        trace.push(best.0);
        let in_final = config.stage_at(epoch) == final_stage && epoch >= final_from;
        if in_final && epoch >= final_from + config.patience && trace.len() > config.patience {
            let prev = trace[trace.len() - 1 - config.patience];
            if prev - best.0 <= config.rel_tolerance * prev.abs() {
                status = SolveStatus::Converged;
                break;
            }
        }
        if best.0 <= f64::EPSILON {
            status = SolveStatus::Converged;
            break;
        }
    }
    let params = if status == SolveStatus::NoDescent {
        init.clone()
    } else {
        PoseParams::from_vector(&best.1)
    };
    let loss = if status == SolveStatus::NoDescent { init_loss } else { best.0 };
    Ok(SolveResult {
        params,
        loss,
        loss_trace: trace,
        status,
        epochs: epochs_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Every frame starts from the same init; frames solve in parallel.
    Independent,
    /// Each frame starts from the previous frame's solution.
    WarmStart,
}

/// Per-frame results; a failed frame does not stop the others.
pub fn solve_sequence(
    targets: &[Image],
    setup: &RenderSetup,
    init: &PoseParams,
    config: &SolveConfig,
    mode: SequenceMode,
) -> Vec<Result<SolveResult>> {
    match mode {
        SequenceMode::Independent => targets.par_iter().map(|t| solve_frame(t, setup, init, config)).collect(),
        SequenceMode::WarmStart => {
            let mut start = init.clone();
            targets
                .iter()
                .map(|t| {
                    let r = solve_frame(t, setup, &start, config);
                    if let Ok(res) = &r {
                        start = res.params.clone();
                    }
                    r
                })
                .collect()
        }
    }
}

/// Pose and unmasked controls from `track_a`, masked controls from `track_b`.
pub fn blend_parameters(track_a: &[PoseParams], track_b: &[PoseParams], mask: &[usize]) -> Result<Vec<PoseParams>> {
    if track_a.len() != track_b.len() {
        return Err(Error::LengthMismatch {
            left: track_a.len(),
            right: track_b.len(),
        });
    }
    track_a
        .iter()
        .zip(track_b)
        .map(|(a, b)| {
            if a.w.len() != b.w.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.w.len(),
                    got: b.w.len(),
                });
            }
            let mut out = a.clone();
            for &i in mask {
                if i >= out.w.len() {
                    return Err(Error::InvalidInput(format!("mask control {i} out of range")));
                }
                out.w[i] = b.w[i];
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize, base: f64) -> Vec<PoseParams> {
        (0..n)
            .map(|i| PoseParams {
                pitch: base + i as f64,
                yaw: -base,
                w: vec![base, base * 0.5, i as f64 * 0.1],
            })
            .collect()
    }

    #[test]
    fn blend_with_empty_mask_is_track_a() {
        let a = track(3, 0.2);
        assert_eq!(blend_parameters(&a, &track(3, 0.7), &[]).unwrap(), a);
    }

    #[test]
    fn blend_takes_masked_controls_from_b() {
        let (a, b) = (track(2, 0.2), track(2, 0.7));
        let out = blend_parameters(&a, &b, &[1]).unwrap();
        assert_eq!(out[0].w, vec![0.2, 0.35, 0.0]);
        assert_eq!(out[1].pitch, a[1].pitch);
    }

    #[test]
    fn blend_rejects_length_mismatch() {
        let err = blend_parameters(&track(2, 0.1), &track(3, 0.1), &[0]);
        assert!(matches!(err, Err(Error::LengthMismatch { left: 2, right: 3 })));
    }

    #[test]
    fn blocks_must_partition() {
        assert!(check_blocks(&[vec![0, 1], vec![2]], 3).is_ok());
        assert!(check_blocks(&[vec![0, 1]], 3).is_err());
        assert!(check_blocks(&[vec![0, 1, 1], vec![2]], 3).is_err());
    }

    #[test]
    fn schedule_lookup() {
        let cfg = SolveConfig::default();
        assert_eq!(cfg.stage_at(0), 0);
        assert_eq!(cfg.stage_at(9), 1);
        assert_eq!(cfg.stage_at(29), 2);
    }
}
