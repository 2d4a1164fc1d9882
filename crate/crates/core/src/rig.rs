//! Linear blendshape rig with jaw skinning.
//!
//! A shape is stored de-skinned: the sculpted target `S_i` is recovered as
//! `(M R_i + (1 - M) I)(N + D_i) + M T_i`, and a control vector `w` poses the
//! rig as `S(w) = (M R(w) + (1 - M) I)(N + Σ w_i D_i) + M T(w)` with `R(w)`
//! interpolated in Euler-angle space and `T(w) = Σ w_i T_i`.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::geom::{head_rotation, rot_x, rot_y, rot_z};
use crate::{Error, Result, Vec3};

/// Condition number above which a per-vertex blend matrix counts as singular.
pub const MAX_BLEND_CONDITION: f64 = 1e8;

mod sparse_deltas {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Vec3;

    #[derive(Serialize, Deserialize)]
    struct SparseShape {
        len: usize,
        rows: Vec<(usize, [f64; 3])>,
    }

    pub fn serialize<S: Serializer>(deltas: &[Vec<Vec3>], s: S) -> Result<S::Ok, S::Error> {
        let shapes: Vec<SparseShape> = deltas
            .iter()
            .map(|d| SparseShape {
                len: d.len(),
                rows: d
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != Vec3::zeros())
                    .map(|(i, v)| (i, [v.x, v.y, v.z]))
                    .collect(),
            })
            .collect();
        shapes.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<Vec3>>, D::Error> {
        let shapes = Vec::<SparseShape>::deserialize(d)?;
        shapes
            .into_iter()
            .map(|shape| {
                let mut out = vec![Vec3::zeros(); shape.len];
                for (i, [x, y, z]) in shape.rows {
                    *out.get_mut(i).ok_or_else(|| serde::de::Error::custom(format!("delta row {i} out of range")))? =
                        Vec3::new(x, y, z);
                }
                Ok(out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendshapeRig {
    pub neutral: Vec<Vec3>,
    /// Stored on disk as the non-zero rows of each shape.
    #[serde(with = "sparse_deltas")]
    pub deltas: Vec<Vec<Vec3>>,
    pub skin_weights: Vec<f64>,
    /// Intrinsic XYZ Euler angles in degrees, one triple per shape.
    pub jaw_rotations: Vec<Vec3>,
    pub jaw_translations: Vec<Vec3>,
    pub jaw_controls: Vec<usize>,
    #[serde(default)]
    pub shape_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub pitch: f64,
    pub yaw: f64,
    pub w: Vec<f64>,
}

impl PoseParams {
    pub fn neutral(n_shapes: usize) -> Self {
        Self {
            pitch: 0.0,
            yaw: 0.0,
            w: vec![0.0; n_shapes],
        }
    }

    /// `[pitch, yaw, w_0, ..]`
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![self.pitch, self.yaw];
        v.extend_from_slice(&self.w);
        v
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            pitch: v[0],
            yaw: v[1],
            w: v[2..].to_vec(),
        }
    }

    pub fn clamp_controls(&mut self) {
        for x in &mut self.w {
            *x = x.clamp(0.0, 1.0);
        }
    }
}

/// Intrinsic XYZ rotation from Euler angles in degrees.
pub fn euler_xyz(deg: &Vec3) -> Matrix3<f64> {
    rot_x(deg.x.to_radians()) * rot_y(deg.y.to_radians()) * rot_z(deg.z.to_radians())
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Derivatives of [`euler_xyz`] with respect to each angle, per degree.
fn euler_xyz_partials(deg: &Vec3) -> [Matrix3<f64>; 3] {
    let (a, b, c) = (deg.x.to_radians(), deg.y.to_radians(), deg.z.to_radians());
    let k = std::f64::consts::PI / 180.0;
    [
        drot_x(a) * rot_y(b) * rot_z(c) * k,
        rot_x(a) * drot_y(b) * rot_z(c) * k,
        rot_x(a) * rot_y(b) * drot_z(c) * k,
    ]
}

impl BlendshapeRig {
    pub fn vertex_count(&self) -> usize {
        self.neutral.len()
    }

    pub fn shape_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_jaw(&self, shape: usize) -> bool {
        self.jaw_controls.contains(&shape)
    }

    pub fn non_jaw_controls(&self) -> Vec<usize> {
        (0..self.shape_count()).filter(|i| !self.is_jaw(*i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let n = self.shape_count();
        if self.skin_weights.len() != v || self.deltas.iter().any(|d| d.len() != v) {
            return Err(Error::InvalidInput("rig tensors disagree on vertex count".into()));
        }
        if self.jaw_rotations.len() != n || self.jaw_translations.len() != n {
            return Err(Error::InvalidInput("one jaw rotation/translation per shape required".into()));
        }
        if self.skin_weights.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidInput("skin weights must lie in [0, 1]".into()));
        }
        if self.jaw_controls.iter().any(|&j| j >= n) {
            return Err(Error::InvalidInput("jaw control index out of range".into()));
        }
        for i in self.non_jaw_controls() {
            if self.jaw_rotations[i] != Vec3::zeros() || self.jaw_translations[i] != Vec3::zeros() {
                return Err(Error::InvalidInput(format!("non-jaw shape {i} carries a jaw transform")));
            }
        }
        Ok(())
    }

    /// Centroid of the neutral mesh; the rigid head pose rotates about it.
    pub fn pivot(&self) -> Vec3 {
        self.neutral.iter().sum::<Vec3>() / self.neutral.len().max(1) as f64
    }

    pub fn state<'a>(&'a self, params: &'a PoseParams) -> RigState<'a> {
        RigState::new(self, params)
    }

    /// Posed vertices `P_rigid(p, y) S(w)`.
    pub fn evaluate(&self, params: &PoseParams) -> Vec<Vec3> {
        let st = self.state(params);
        (0..self.vertex_count()).map(|v| st.vertex(v)).collect()
    }

    /// `∂vertices/∂w` for the listed vertices: a `(3 * |subset|) x n_shapes`
    /// matrix, rows ordered (x, y, z) per vertex.
    pub fn jacobian_w(&self, params: &PoseParams, subset: &[usize]) -> DMatrix<f64> {
        let st = self.state(params);
        let n = self.shape_count();
        let mut jac = DMatrix::zeros(3 * subset.len(), n);
        let mut cols = vec![Vec3::zeros(); n];
        for (r, &v) in subset.iter().enumerate() {
            st.control_jacobian(v, &mut cols);
            for (i, c) in cols.iter().enumerate() {
                jac[(3 * r, i)] = c.x;
                jac[(3 * r + 1, i)] = c.y;
                jac[(3 * r + 2, i)] = c.z;
            }
        }
        jac
    }

    /// `∂vertices/∂(pitch, yaw)` in degrees, `(3 * |subset|) x 2`.
    pub fn jacobian_pose(&self, params: &PoseParams, subset: &[usize]) -> DMatrix<f64> {
        let st = self.state(params);
        let mut jac = DMatrix::zeros(3 * subset.len(), 2);
        for (r, &v) in subset.iter().enumerate() {
            let [dp, dy] = st.pose_jacobian(v);
            for k in 0..3 {
                jac[(3 * r + k, 0)] = dp[k];
                jac[(3 * r + k, 1)] = dy[k];
            }
        }
        jac
    }

    /// The sculpted target `S_i` of one shape (no rigid pose).
    pub fn sculpted_shape(&self, shape: usize) -> Vec<Vec3> {
        forward_shape(
            &self.neutral,
            &self.deltas[shape],
            &self.skin_weights,
            &self.jaw_rotations[shape],
            &self.jaw_translations[shape],
        )
    }
}

/// Pre-computed per-pose quantities for repeated vertex and Jacobian queries.
pub struct RigState<'a> {
    rig: &'a BlendshapeRig,
    params: &'a PoseParams,
    jaw_rot: Matrix3<f64>,
    jaw_trans: Vec3,
    /// `∂R(w)/∂w_i`, zero for non-jaw shapes.
    jaw_rot_partials: Vec<Matrix3<f64>>,
    pose_rot: Matrix3<f64>,
    pose_partials: [Matrix3<f64>; 2],
    pivot: Vec3,
    jaw_active: bool,
    posed: bool,
}

impl<'a> RigState<'a> {
    fn new(rig: &'a BlendshapeRig, params: &'a PoseParams) -> Self {
        let mut euler = Vec3::zeros();
        let mut jaw_trans = Vec3::zeros();
        for &j in &rig.jaw_controls {
            euler += params.w[j] * rig.jaw_rotations[j];
            jaw_trans += params.w[j] * rig.jaw_translations[j];
        }
        let partials = euler_xyz_partials(&euler);
        let jaw_rot_partials = (0..rig.shape_count())
            .map(|i| {
                if rig.is_jaw(i) {
                    let e = rig.jaw_rotations[i];
                    partials[0] * e.x + partials[1] * e.y + partials[2] * e.z
                } else {
                    Matrix3::zeros()
                }
            })
            .collect();
        let (p, y) = (params.pitch.to_radians(), params.yaw.to_radians());
        let k = std::f64::consts::PI / 180.0;
        Self {
            rig,
            params,
            jaw_rot: euler_xyz(&euler),
            jaw_trans,
            jaw_rot_partials,
            pose_rot: head_rotation(params.pitch, params.yaw),
            pose_partials: [rot_y(y) * drot_x(p) * k, drot_y(y) * rot_x(p) * k],
            pivot: rig.pivot(),
            jaw_active: euler != Vec3::zeros() || jaw_trans != Vec3::zeros(),
            posed: params.pitch != 0.0 || params.yaw != 0.0,
        }
    }

    /// `N + Σ w_i D_i` at vertex `v`.
    fn linear(&self, v: usize) -> Vec3 {
        let mut b = self.rig.neutral[v];
        for (wi, d) in self.params.w.iter().zip(&self.rig.deltas) {
            if *wi != 0.0 {
                b += *wi * d[v];
            }
        }
        b
    }

    /// `S(w)` at vertex `v`, before the rigid pose.
    pub fn skinned(&self, v: usize) -> Vec3 {
        let b = self.linear(v);
        let m = self.rig.skin_weights[v];
        if !self.jaw_active || m == 0.0 {
            return b;
        }
        m * (self.jaw_rot * b + self.jaw_trans) + (1.0 - m) * b
    }

    pub fn vertex(&self, v: usize) -> Vec3 {
        if !self.posed {
            return self.skinned(v);
        }
        self.pose_rot * (self.skinned(v) - self.pivot) + self.pivot
    }

    /// Columns `∂vertex/∂w_i` of the posed vertex.
    pub fn control_jacobian(&self, v: usize, out: &mut [Vec3]) {
        let m = self.rig.skin_weights[v];
        let blend = self.jaw_rot * m + Matrix3::identity() * (1.0 - m);
        let b = self.linear(v);
        for (i, col) in out.iter_mut().enumerate() {
            let mut c = blend * self.rig.deltas[i][v];
            if m != 0.0 && self.rig.is_jaw(i) {
                c += m * (self.jaw_rot_partials[i] * b + self.rig.jaw_translations[i]);
            }
            *col = self.pose_rot * c;
        }
    }

    /// `∂vertex/∂pitch`, `∂vertex/∂yaw` (per degree).
    pub fn pose_jacobian(&self, v: usize) -> [Vec3; 2] {
        let s = self.skinned(v) - self.pivot;
        [self.pose_partials[0] * s, self.pose_partials[1] * s]
    }
}

/// `S_i = (M R_i + (1 - M) I)(N + D_i) + M T_i`.
pub fn forward_shape(neutral: &[Vec3], delta: &[Vec3], m: &[f64], euler_deg: &Vec3, t: &Vec3) -> Vec<Vec3> {
    let r = euler_xyz(euler_deg);
    neutral
        .iter()
        .zip(delta)
        .zip(m)
        .map(|((n, d), &mv)| {
            let base = n + d;
            mv * (r * base + t) + (1.0 - mv) * base
        })
        .collect()
}

/// Recover the de-skinned delta `D_i` of a sculpted shape by inverting the
/// per-vertex blend matrix.
pub fn deskin_shape(shape: &[Vec3], neutral: &[Vec3], m: &[f64], euler_deg: &Vec3, t: &Vec3) -> Result<Vec<Vec3>> {
    if shape.len() != neutral.len() || m.len() != neutral.len() {
        return Err(Error::DimensionMismatch {
            expected: neutral.len(),
            got: shape.len(),
        });
    }
    let r = euler_xyz(euler_deg);
    let mut out = Vec::with_capacity(shape.len());
    for (v, ((s, n), &mv)) in shape.iter().zip(neutral).zip(m).enumerate() {
        let blend = r * mv + Matrix3::identity() * (1.0 - mv);
        let sv = blend.singular_values();
        let condition = sv.max() / sv.min();
        if !condition.is_finite() || condition > MAX_BLEND_CONDITION {
            return Err(Error::SingularBlend { vertex: v, condition });
        }
        let inv = blend.try_inverse().ok_or(Error::SingularBlend {
            vertex: v,
            condition: f64::INFINITY,
        })?;
        out.push(inv * (s - mv * t) - n);
    }
    Ok(out)
}
