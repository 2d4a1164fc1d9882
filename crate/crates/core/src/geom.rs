//! Rigid alignment of 2D point sets and pitch/yaw pose fitting.

use log::warn;
use nalgebra::{Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec2, Vec3};

/// Number of points in a landmark set (68-point convention).
pub const LANDMARK_COUNT: usize = 68;

/// Default rigid subset: temples, nose bridge, nose base and eye corners.
pub const DEFAULT_RIGID_INDICES: [usize; 13] = [0, 16, 27, 28, 29, 30, 31, 33, 35, 36, 39, 42, 45];

/// Ordered 68-point landmark set in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub source_id: String,
    pub points: Vec<Vec2>,
}

impl LandmarkSet {
    pub fn new(source_id: impl Into<String>, points: Vec<Vec2>) -> Result<Self> {
        let set = Self {
            source_id: source_id.into(),
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != LANDMARK_COUNT {
            return Err(Error::DimensionMismatch {
                expected: LANDMARK_COUNT,
                got: self.points.len(),
            });
        }
        if self.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "landmarks of {} contain non-finite coordinates",
                self.source_id
            )));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Vec2> {
        indices.iter().map(|&i| self.points[i]).collect()
    }
}

/// `x -> scale * R(rotation) * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f64,
    /// Radians, counter-clockwise in the coordinate frame of the points.
    pub rotation: f64,
    pub translation: Vec2,
}

impl Default for Similarity2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity2D {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Vec2::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.rotation.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply(&self, p: &Vec2) -> Vec2 {
        self.scale * (self.rotation_matrix() * p) + self.translation
    }

    pub fn apply_all(&self, pts: &[Vec2]) -> Vec<Vec2> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let inv = Similarity2D {
            scale: 1.0 / self.scale,
            rotation: -self.rotation,
            translation: Vec2::zeros(),
        };
        Similarity2D {
            translation: -inv.apply(&self.translation),
            ..inv
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Similarity2D) -> Self {
        Similarity2D {
            scale: self.scale * other.scale,
            rotation: self.rotation + other.rotation,
            translation: self.apply(&other.translation),
        }
    }
}

/// Sum of squared distances between `t(src)` and `dst`.
pub fn alignment_residual(t: &Similarity2D, src: &[Vec2], dst: &[Vec2]) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum()
}

/// Least-squares similarity (or rigid, when `allow_scale` is false) mapping
/// `src` onto `dst`, reflection excluded (Umeyama, 2x2 SVD).
pub fn rigid_align(src: &[Vec2], dst: &[Vec2], allow_scale: bool) -> Result<Similarity2D> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 2 {
        return Err(Error::DegenerateInput("rigid_align needs at least two points".into()));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec2>() / n;
    let mu_d = dst.iter().sum::<Vec2>() / n;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    let scale_ref = src
        .iter()
        .chain(dst)
        .map(|p| p.amax())
        .fold(1.0_f64, f64::max);
    if var_s <= (1e-14 * scale_ref).powi(2) {
        return Err(Error::DegenerateInput("all source points coincide".into()));
    }
    let mut cov = Matrix2::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let reflect = (u.determinant() * v_t.determinant()) < 0.0;
    let signs = Matrix2::from_diagonal(&nalgebra::Vector2::new(1.0, if reflect { -1.0 } else { 1.0 }));
    let r = u * signs * v_t;
    let scale = if allow_scale {
        let sv = svd.singular_values;
        let trace = sv[0] + if reflect { -sv[1] } else { sv[1] };
        trace / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput("target points coincide; scale collapses to zero".into()));
    }
    let rotation = r[(1, 0)].atan2(r[(0, 0)]);
    let t = Similarity2D {
        scale,
        rotation,
        translation: Vec2::zeros(),
    };
    Ok(Similarity2D {
        translation: mu_d - t.apply(&mu_s),
        ..t
    })
}

/// Head rotation for pitch (about x) then yaw (about y), both in degrees.
pub fn head_rotation(pitch_deg: f64, yaw_deg: f64) -> Matrix3<f64> {
    rot_y(yaw_deg.to_radians()) * rot_x(pitch_deg.to_radians())
}

pub(crate) fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Orthographic projection into image orientation (y down).
#[inline]
pub fn project_ortho(p: &Vec3) -> Vec2 {
    Vec2::new(p.x, -p.y)
}

/// Canonical head with the rigid marker vertices; pitch = yaw = 0 faces +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateModel {
    pub vertices: Vec<Vec3>,
    pub marker_indices: Vec<usize>,
}

impl TemplateModel {
    pub fn marker_centroid(&self) -> Vec3 {
        let sum: Vec3 = self.marker_indices.iter().map(|&i| self.vertices[i]).sum();
        sum / self.marker_indices.len() as f64
    }

    /// Orthographic projection of the markers after rotating the head by
    /// (pitch, yaw) about the marker centroid.
    pub fn project_markers(&self, pitch_deg: f64, yaw_deg: f64) -> Vec<Vec2> {
        let r = head_rotation(pitch_deg, yaw_deg);
        let c = self.marker_centroid();
        self.marker_indices
            .iter()
            .map(|&i| project_ortho(&(r * (self.vertices[i] - c))))
            .collect()
    }

    /// The frontal 2D template for the rigid markers.
    pub fn frontal_template(&self) -> Vec<Vec2> {
        self.project_markers(0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFitConfig {
    pub rigid_indices: Vec<usize>,
    pub pitch_range: (f64, f64),
    pub yaw_range: (f64, f64),
    pub grid_step: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for PoseFitConfig {
    fn default() -> Self {
        Self {
            rigid_indices: DEFAULT_RIGID_INDICES.to_vec(),
            pitch_range: (-40.0, 40.0),
            yaw_range: (-90.0, 90.0),
            grid_step: 5.0,
            max_iterations: 50,
            step_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFit {
    pub pitch: f64,
    pub yaw: f64,
    /// Mean marker distance after alignment, in template units.
    pub residual: f64,
    /// False when refinement hit the iteration cap; the pose is then the best
    /// grid point.
    pub converged: bool,
}

struct PoseObjective<'a> {
    template: &'a TemplateModel,
    aligned: Vec<Vec2>,
}

impl PoseObjective<'_> {
    /// Residual vector after mapping the projected markers onto the aligned
    /// landmarks with the optimal similarity.
    fn residuals(&self, pitch: f64, yaw: f64) -> Vec<f64> {
        let q = self.template.project_markers(pitch, yaw);
        let Ok(t) = rigid_align(&q, &self.aligned, true) else {
            return vec![f64::INFINITY; 2 * q.len()];
        };
        q.iter()
            .zip(&self.aligned)
            .flat_map(|(qk, ak)| {
                let d = t.apply(qk) - ak;
                [d.x, d.y]
            })
            .collect()
    }

    fn cost(&self, pitch: f64, yaw: f64) -> f64 {
        self.residuals(pitch, yaw).iter().map(|r| r * r).sum()
    }

    fn mean_error(&self, pitch: f64, yaw: f64) -> f64 {
        let r = self.residuals(pitch, yaw);
        let n = r.len() / 2;
        r.chunks_exact(2).map(|c| c[0].hypot(c[1])).sum::<f64>() / n as f64
    }
}

/// Fit the template's pitch and yaw to the rigid landmark subset: align the
/// subset to the frontal template, scan a coarse grid, then refine with
/// damped Gauss-Newton.
pub fn fit_pitch_yaw(landmarks: &LandmarkSet, template: &TemplateModel, config: &PoseFitConfig) -> Result<PoseFit> {
    landmarks.validate()?;
    if config.rigid_indices.len() != template.marker_indices.len() {
        return Err(Error::DimensionMismatch {
            expected: template.marker_indices.len(),
            got: config.rigid_indices.len(),
        });
    }
    let observed = landmarks.subset(&config.rigid_indices);
    let frontal = template.frontal_template();
    let pre = rigid_align(&observed, &frontal, true)?;
    let objective = PoseObjective {
        template,
        aligned: pre.apply_all(&observed),
    };

    let (mut best_p, mut best_y, mut best_cost) = (0.0, 0.0, f64::INFINITY);
    let steps = |lo: f64, hi: f64| ((hi - lo) / config.grid_step).round() as usize;
    for i in 0..=steps(config.pitch_range.0, config.pitch_range.1) {
        let p = config.pitch_range.0 + i as f64 * config.grid_step;
        for j in 0..=steps(config.yaw_range.0, config.yaw_range.1) {
            let y = config.yaw_range.0 + j as f64 * config.grid_step;
            let c = objective.cost(p, y);
            if c < best_cost {
                (best_p, best_y, best_cost) = (p, y, c);
            }
        }
    }

    let (grid_p, grid_y) = (best_p, best_y);
    let (mut p, mut y, mut cost) = (best_p, best_y, best_cost);
    let mut converged = false;
    let h = 1e-4;
    for _ in 0..config.max_iterations {
        let r = objective.residuals(p, y);
        let rp = objective.residuals(p + h, y);
        let rm = objective.residuals(p - h, y);
        let yp = objective.residuals(p, y + h);
        let ym = objective.residuals(p, y - h);
        let mut jtj = Matrix2::zeros();
        let mut jtr = nalgebra::Vector2::zeros();
        for k in 0..r.len() {
            let jp = (rp[k] - rm[k]) / (2.0 * h);
            let jy = (yp[k] - ym[k]) / (2.0 * h);
            jtj += Matrix2::new(jp * jp, jp * jy, jp * jy, jy * jy);
            jtr += nalgebra::Vector2::new(jp * r[k], jy * r[k]);
        }
        let damping = 1e-9 * (jtj[(0, 0)] + jtj[(1, 1)]).max(1e-12);
        let Some(inv) = (jtj + Matrix2::identity() * damping).try_inverse() else {
            break;
        };
        let mut step = -(inv * jtr);
        let mut accepted = false;
        while step.norm() >= config.step_tolerance {
            let c = objective.cost(p + step.x, y + step.y);
            if c <= cost {
                p += step.x;
                y += step.y;
                cost = c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < config.step_tolerance {
            converged = true;
            break;
        }
    }

    if !converged {
        warn!(
            "pose refinement for {} hit {} iterations; returning grid point",
            landmarks.source_id, config.max_iterations
        );
        return Ok(PoseFit {
            pitch: grid_p,
            yaw: grid_y,
            residual: objective.mean_error(grid_p, grid_y),
            converged: false,
        });
    }
    Ok(PoseFit {
        pitch: p,
        yaw: y,
        residual: objective.mean_error(p, y),
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn square() -> Vec<Vec2> {
        vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(0.0, 1.0)]
    }

    #[test]
    fn identity_when_sets_match() {
        let t = rigid_align(&square(), &square(), true).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.rotation.abs() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
        assert!(alignment_residual(&t, &square(), &square()) < 1e-20);
    }

    #[test]
    fn quarter_turn_recovered() {
        let rot = Similarity2D {
            scale: 1.0,
            rotation: FRAC_PI_2,
            translation: Vec2::zeros(),
        };
        let dst = rot.apply_all(&square());
        let t = rigid_align(&square(), &dst, true).unwrap();
        assert!((t.rotation - FRAC_PI_2).abs() < 1e-10);
        assert!((t.scale - 1.0).abs() < 1e-10);
        assert!(alignment_residual(&t, &square(), &dst) < 1e-10);
    }

    #[test]
    fn reflection_is_excluded() {
        let src = vec![Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(0.5, 0.2)];
        let mirrored: Vec<Vec2> = src.iter().map(|p| Vec2::new(-p.x, p.y)).collect();
        let t = rigid_align(&src, &mirrored, true).unwrap();
        // a proper rotation cannot reproduce a mirror image
        assert!(alignment_residual(&t, &src, &mirrored) > 0.1);
    }

    #[test]
    fn coincident_source_is_degenerate() {
        let src = vec![Vec2::new(0.3, 0.3); 5];
        let err = rigid_align(&src, &square().into_iter().chain([Vec2::zeros()]).collect::<Vec<_>>(), true);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn without_scale_keeps_unit_scale() {
        let dst: Vec<Vec2> = square().iter().map(|p| 3.0 * p).collect();
        let t = rigid_align(&square(), &dst, false).unwrap();
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn inverse_and_compose() {
        let t = Similarity2D {
            scale: 2.5,
            rotation: 0.7,
            translation: Vec2::new(1.0, -3.0),
        };
        let id = t.compose(&t.inverse());
        let p = Vec2::new(0.4, 9.0);
        assert!((id.apply(&p) - p).norm() < 1e-12);
    }
}
