//! Procedural test head.
//!
//! An ellipsoidal head with a nose bump, 68 surface markers in the usual
//! landmark layout, a 10-control blendshape rig with a skinned jaw, a
//! segmented region texture and a smooth RGB "skin" texture. Everything is a
//! closed-form function of the surface angles, so markers deform exactly like
//! the surface they sit on.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{extract_all, FeatureSet, PartSpec};
use crate::geom::{LandmarkSet, PoseFitConfig, TemplateModel, DEFAULT_RIGID_INDICES};
use crate::render::{rasterize, Camera, Mesh, RenderOptions, RenderSetup, SegTexture, Texture};
use crate::rig::{BlendshapeRig, PoseParams};
use crate::regressor::{GroundTruth, PoseNormalization, TrainSample};
use crate::transfer::{enforce_caps, fit_pca_transfer, sample_params, DomainTransfer, PcaTransfer, RegionCap, SampleConfig};
use crate::{Image, Result, Vec2, Vec3};

const CENTER: Vec3 = Vec3::new(0.0, 0.25, 0.3);
const RADII: Vec3 = Vec3::new(0.8, 1.05, 0.9);
/// Polar angle of the mouth line, eye centers and brows.
const THETA_MOUTH: f64 = FRAC_PI_2 + 0.45;
const THETA_EYE: f64 = FRAC_PI_2 - 0.15;
const THETA_BROW: f64 = FRAC_PI_2 - 0.35;
const PHI_EYE: f64 = 0.3;

pub const CONTROL_NAMES: [&str; 10] = [
    "jaw_open",
    "jaw_side",
    "smile_r",
    "smile_l",
    "brow_raise_r",
    "brow_raise_l",
    "eye_close_r",
    "eye_close_l",
    "lip_pucker",
    "cheek_puff",
];
pub const JAW_CONTROLS: [usize; 2] = [0, 1];
pub const LIP_CONTROLS: [usize; 3] = [2, 3, 8];

/// Region ids of the segmented texture; 0 is the render background.
pub mod region {
    pub const SKIN: u16 = 1;
    pub const FOREHEAD: u16 = 2;
    pub const BROW_R: u16 = 3;
    pub const BROW_L: u16 = 4;
    pub const EYE_R: u16 = 5;
    pub const EYE_L: u16 = 6;
    pub const NOSE: u16 = 7;
    pub const UPPER_LIP: u16 = 8;
    pub const LOWER_LIP: u16 = 9;
    pub const MOUTH: u16 = 10;
    pub const CHEEK_R: u16 = 11;
    pub const CHEEK_L: u16 = 12;
    pub const COUNT: usize = 13;
}

const PALETTE: [[f64; 3]; region::COUNT] = [
    [0.0, 0.0, 0.0],
    [0.55, 0.55, 0.55],
    [0.95, 0.85, 0.25],
    [0.1, 0.2, 0.9],
    [0.1, 0.8, 0.9],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.9, 0.45, 0.1],
    [0.85, 0.1, 0.15],
    [0.5, 0.05, 0.5],
    [0.2, 0.9, 0.2],
    [0.3, 0.35, 0.85],
    [0.75, 0.25, 0.7],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Latitude rows.
    pub n_theta: usize,
    /// Longitude columns (the seam column is duplicated).
    pub n_phi: usize,
    pub texture_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_theta: 48,
            n_phi: 72,
            texture_size: 128,
        }
    }
}

fn gauss(theta: f64, phi: f64, t0: f64, p0: f64, st: f64, sp: f64) -> f64 {
    let a = (theta - t0) / st;
    let b = (phi - p0) / sp;
    (-0.5 * (a * a + b * b)).exp()
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn surface(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let nose = 0.16 * gauss(theta, phi, 0.5 * (THETA_EYE + THETA_MOUTH) + 0.05, 0.0, 0.16, 0.09);
    CENTER + Vec3::new(RADII.x * st * sp, RADII.y * ct, RADII.z * st * cp + nose)
}

fn skin_weight(theta: f64, phi: f64) -> f64 {
    smoothstep((theta - (THETA_MOUTH - 0.02)) / 0.12) * smoothstep((1.5 - phi.abs()) / 0.4)
}

/// Per-control displacement at surface angles.
fn deltas_at(theta: f64, phi: f64, p: &Vec3) -> [Vec3; 10] {
    let zero = Vec3::zeros();
    let smile = |side: f64| gauss(theta, phi, THETA_MOUTH, side * 0.28, 0.12, 0.18) * Vec3::new(side * 0.08, 0.12, 0.0);
    let brow = |side: f64| gauss(theta, phi, THETA_BROW, side * PHI_EYE, 0.12, 0.25) * Vec3::new(0.0, 0.1, 0.0);
    let lid = |side: f64| {
        gauss(theta, phi, THETA_EYE - 0.05, side * PHI_EYE, 0.07, 0.16) * Vec3::new(0.0, -0.1, 0.02)
    };
    let pucker = gauss(theta, phi, THETA_MOUTH, 0.0, 0.12, 0.3) * Vec3::new(-0.6 * (p.x - CENTER.x), 0.0, 0.1);
    let outward = (p - CENTER).normalize();
    let puff = (gauss(theta, phi, THETA_MOUTH - 0.12, 0.55, 0.2, 0.22) + gauss(theta, phi, THETA_MOUTH - 0.12, -0.55, 0.2, 0.22))
        * 0.12
        * outward;
    [
        zero,
        zero,
        smile(-1.0),
        smile(1.0),
        brow(-1.0),
        brow(1.0),
        lid(-1.0),
        lid(1.0),
        pucker,
        puff,
    ]
}

fn inside_ellipse(theta: f64, phi: f64, t0: f64, p0: f64, rt: f64, rp: f64) -> bool {
    let a = (theta - t0) / rt;
    let b = (phi - p0) / rp;
    a * a + b * b <= 1.0
}

/// Region label at surface angles.
pub fn region_at(theta: f64, phi: f64) -> u16 {
    use region::*;
    for (side, eye, brow_id) in [(-1.0, EYE_R, BROW_R), (1.0, EYE_L, BROW_L)] {
        if inside_ellipse(theta, phi, THETA_EYE, side * PHI_EYE, 0.07, 0.14) {
            return eye;
        }
        if (theta - THETA_BROW).abs() < 0.05 && (phi - side * PHI_EYE).abs() < 0.2 {
            return brow_id;
        }
    }
    if inside_ellipse(theta, phi, THETA_MOUTH, 0.0, 0.022, 0.27) {
        return MOUTH;
    }
    if inside_ellipse(theta, phi, THETA_MOUTH - 0.02, 0.0, 0.07, 0.32) && theta < THETA_MOUTH {
        return UPPER_LIP;
    }
    if inside_ellipse(theta, phi, THETA_MOUTH + 0.02, 0.0, 0.08, 0.3) && theta >= THETA_MOUTH {
        return LOWER_LIP;
    }
    if phi.abs() < 0.11 && theta > THETA_EYE && theta < THETA_MOUTH - 0.13 {
        return NOSE;
    }
    for (side, cheek) in [(-1.0, CHEEK_R), (1.0, CHEEK_L)] {
        if inside_ellipse(theta, phi, THETA_MOUTH - 0.2, side * 0.6, 0.17, 0.2) {
            return cheek;
        }
    }
    if theta > 0.45 && theta < THETA_BROW - 0.08 && phi.abs() < 0.85 {
        return FOREHEAD;
    }
    SKIN
}

/// Smooth skin-like albedo at surface angles.
pub fn albedo_at(theta: f64, phi: f64) -> [f64; 3] {
    use region::*;
    let base = [0.78, 0.6, 0.5];
    let shade = 0.04 * (7.0 * phi).sin() * (5.0 * theta).cos();
    let c = match region_at(theta, phi) {
        BROW_R | BROW_L => [0.3, 0.22, 0.16],
        EYE_R | EYE_L => {
            let side = phi.signum();
            if inside_ellipse(theta, phi, THETA_EYE, side * PHI_EYE, 0.045, 0.045) {
                [0.2, 0.3, 0.35]
            } else {
                [0.92, 0.9, 0.88]
            }
        }
        UPPER_LIP | LOWER_LIP => [0.72, 0.36, 0.36],
        MOUTH => [0.3, 0.08, 0.1],
        CHEEK_R | CHEEK_L => [0.82, 0.55, 0.5],
        _ => base,
    };
    c.map(|v| (v + shade).clamp(0.0, 1.0))
}

fn uv_to_angles(u: f64, v: f64) -> (f64, f64) {
    (v * PI, u * 2.0 * PI - PI)
}

/// Marker angles in the 68-point layout (subject's right on the image left).
pub fn marker_angles() -> Vec<(f64, f64)> {
    let mut m = Vec::with_capacity(68);
    for k in 0..17 {
        let phi = -1.2 + 2.4 * k as f64 / 16.0;
        let theta = FRAC_PI_2 + 0.15 + 0.62 * (phi * PI / 2.4).cos();
        m.push((theta, phi));
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let phi = if side < 0.0 {
                -0.5 + 0.4 * k as f64 / 4.0
            } else {
                0.1 + 0.4 * k as f64 / 4.0
            };
            let arch = 0.025 * (1.0 - ((phi - side * PHI_EYE) / 0.2).powi(2));
            m.push((THETA_BROW - arch, phi));
        }
    }
    let nose_top = THETA_EYE;
    let nose_tip = THETA_MOUTH - 0.17;
    for k in 0..4 {
        m.push((nose_top + (nose_tip - nose_top) * k as f64 / 3.0, 0.0));
    }
    for k in 0..5 {
        let phi = -0.12 + 0.06 * k as f64;
        m.push((THETA_MOUTH - 0.14 + 0.01 * (phi / 0.12).powi(2), phi));
    }
    let (rt, rp) = (0.045, 0.11);
    for side in [-1.0, 1.0] {
        let c = side * PHI_EYE;
        // corner facing the image left first, then upper lid, other corner, lower lid
        m.push((THETA_EYE, c - rp));
        m.push((THETA_EYE - rt, c - rp / 3.0));
        m.push((THETA_EYE - rt, c + rp / 3.0));
        m.push((THETA_EYE, c + rp));
        m.push((THETA_EYE + rt, c + rp / 3.0));
        m.push((THETA_EYE + rt, c - rp / 3.0));
    }
    for k in 0..12 {
        let t = 2.0 * PI * k as f64 / 12.0;
        let s = t.sin();
        let theta = if s >= 0.0 { THETA_MOUTH - 0.065 * s } else { THETA_MOUTH - 0.075 * s };
        m.push((theta, -0.28 * t.cos()));
    }
    for k in 0..8 {
        let t = 2.0 * PI * k as f64 / 8.0;
        m.push((THETA_MOUTH - 0.015 * t.sin(), -0.2 * t.cos()));
    }
    m
}

/// The assembled fixture.
#[derive(Debug, Clone)]
pub struct HeadFixture {
    pub mesh: Mesh,
    pub rig: BlendshapeRig,
    /// Rig vertex index of each of the 68 markers.
    pub markers: Vec<usize>,
    pub template: TemplateModel,
    pub segmented: SegTexture,
    pub skin: Image,
    pub regions: Vec<RegionCap>,
}

impl HeadFixture {
    pub fn new(config: &HeadConfig) -> Self {
        let (nt, np) = (config.n_theta, config.n_phi);
        let mut angles = Vec::new();
        let mut uvs = Vec::new();
        for i in 0..=nt {
            for j in 0..=np {
                let (u, v) = (j as f64 / np as f64, i as f64 / nt as f64);
                angles.push(uv_to_angles(u, v));
                uvs.push(Vec2::new(u, v));
            }
        }
        let mut triangles = Vec::with_capacity(2 * nt * np);
        let idx = |i: usize, j: usize| i * (np + 1) + j;
        for i in 0..nt {
            for j in 0..np {
                let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
                if i > 0 {
                    triangles.push([a, c, b]);
                }
                if i + 1 < nt {
                    triangles.push([b, c, d]);
                }
            }
        }
        let first_marker = angles.len();
        for (t, p) in marker_angles() {
            angles.push((t, p));
            uvs.push(Vec2::new((p + PI) / (2.0 * PI), t / PI));
        }
        let markers: Vec<usize> = (first_marker..angles.len()).collect();

        let neutral: Vec<Vec3> = angles.iter().map(|&(t, p)| surface(t, p)).collect();
        let mut deltas = vec![Vec::with_capacity(neutral.len()); CONTROL_NAMES.len()];
        for (&(t, p), x) in angles.iter().zip(&neutral) {
            for (d, v) in deltas.iter_mut().zip(deltas_at(t, p, x)) {
                d.push(v);
            }
        }
        let skin_weights = angles.iter().map(|&(t, p)| skin_weight(t, p)).collect();
        let mut jaw_rotations = vec![Vec3::zeros(); CONTROL_NAMES.len()];
        let mut jaw_translations = vec![Vec3::zeros(); CONTROL_NAMES.len()];
        jaw_rotations[0] = Vec3::new(22.0, 0.0, 0.0);
        jaw_rotations[1] = Vec3::new(0.0, 8.0, 0.0);
        jaw_translations[1] = Vec3::new(0.12, 0.0, 0.0);
        let rig = BlendshapeRig {
            neutral: neutral.clone(),
            deltas,
            skin_weights,
            jaw_rotations,
            jaw_translations,
            jaw_controls: JAW_CONTROLS.to_vec(),
            shape_names: CONTROL_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        let mesh = Mesh {
            vertices: neutral.clone(),
            triangles,
            uvs,
        };
        let template = TemplateModel {
            vertices: neutral,
            marker_indices: DEFAULT_RIGID_INDICES.iter().map(|&k| markers[k]).collect(),
        };

        let ts = config.texture_size;
        let texel_angles = |x: usize, y: usize| uv_to_angles((x as f64 + 0.5) / ts as f64, (y as f64 + 0.5) / ts as f64);
        let segmented = SegTexture {
            width: ts,
            height: ts,
            labels: (0..ts * ts)
                .map(|i| {
                    let (t, p) = texel_angles(i % ts, i / ts);
                    region_at(t, p)
                })
                .collect(),
            colors: PALETTE.to_vec(),
        };
        let skin = Image::from_fn(ts, ts, |x, y| {
            let (t, p) = texel_angles(x, y);
            albedo_at(t, p)
        });
        let regions = vec![RegionCap {
            name: "lips".into(),
            controls: LIP_CONTROLS.to_vec(),
            cap: 5,
        }];
        Self {
            mesh,
            rig,
            markers,
            template,
            segmented,
            skin,
            regions,
        }
    }

    /// Default camera looking at the face from the front.
    pub fn camera(&self, width: usize, height: usize) -> Camera {
        Camera::framing(CENTER - Vec3::new(0.0, 0.2, 0.0), 2.6, width, height)
    }

    pub fn segmented_texture(&self) -> Texture {
        Texture::Segmented(self.segmented.clone())
    }

    pub fn skin_texture(&self) -> Texture {
        Texture::Rgb(self.skin.clone())
    }

    /// Markers of the posed rig, normalized to image coordinates.
    pub fn landmarks(&self, params: &PoseParams, camera: &Camera, source_id: &str) -> Result<LandmarkSet> {
        let st = self.rig.state(params);
        let pts = self
            .markers
            .iter()
            .map(|&v| camera.project_normalized(&st.vertex(v)))
            .collect();
        LandmarkSet::new(source_id, pts)
    }

    /// Expression parts with templates from the frontal neutral markers.
    pub fn part_spec(&self) -> PartSpec {
        let all = TemplateModel {
            vertices: self.template.vertices.clone(),
            marker_indices: self.markers.clone(),
        };
        let frontal = all.frontal_template();
        PartSpec::from_reference(PartSpec::default_groups(), &frontal).expect("fixture markers cover all groups")
    }

    pub fn neutral_params(&self) -> PoseParams {
        PoseParams::neutral(self.rig.shape_count())
    }
}

/// Settings for photo-like renders of the fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoRealConfig {
    pub noise_sigma: f64,
    pub roll_deg: f64,
    pub ambient: f64,
    /// Tint applied multiplicatively to the albedo, per channel.
    pub tint: [f64; 3],
}

impl Default for PseudoRealConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            roll_deg: 4.0,
            ambient: 0.35,
            tint: [1.05, 0.95, 0.9],
        }
    }
}

/// Lit, tinted, noisy render of the skin texture with random light direction
/// and camera roll; the "real" domain for tests. Returns the rolled camera
/// with the image.
pub fn pseudo_real_frame(
    head: &HeadFixture,
    camera: &Camera,
    params: &PoseParams,
    config: &PseudoRealConfig,
    rng: &mut impl Rng,
) -> (Image, Camera) {
    let light = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.2), -1.0);
    let roll = rng.random_range(-config.roll_deg..=config.roll_deg);
    let cam = camera.rolled(roll);
    let tex = head.skin_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera: &cam,
        rig: &head.rig,
        texture: &tex,
        options: RenderOptions::lit(light, config.ambient),
    };
    let mut img = rasterize(&setup, params).image;
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).expect("positive sigma");
    for p in &mut img.pixels {
        for (c, t) in p.iter_mut().zip(config.tint) {
            *c = (*c * t + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img.labels = None;
    (img, cam)
}

/// Segmented, unlit render: the synthetic domain.
pub fn segmented_frame(head: &HeadFixture, camera: &Camera, params: &PoseParams) -> Image {
    let tex = head.segmented_texture();
    let setup = RenderSetup {
        mesh: &head.mesh,
        camera,
        rig: &head.rig,
        texture: &tex,
        options: RenderOptions::default(),
    };
    rasterize(&setup, params).image
}

/// Uniform random controls and pose, reproducible from `seed`.
pub fn random_params(n_controls: usize, pitch: f64, yaw: f64, seed: u64) -> PoseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PoseParams {
        pitch: rng.random_range(-pitch..=pitch),
        yaw: rng.random_range(-yaw..=yaw),
        w: (0..n_controls).map(|_| rng.random::<f64>()).collect(),
    }
}

/// `n` pseudo-real frames at random pose, expression and light with their
/// features, for building retrieval indices. Frames are unrolled so the
/// rendered markers are exact landmarks.
pub fn feature_dataset(head: &HeadFixture, n: usize, size: usize, seed: u64) -> Result<Vec<FeatureSet>> {
    let camera = head.camera(size, size);
    let parts = head.part_spec();
    let pose_config = PoseFitConfig::default();
    let config = PseudoRealConfig {
        roll_deg: 0.0,
        ..PseudoRealConfig::default()
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let frame_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let params = random_params(head.rig.shape_count(), 25.0, 70.0, frame_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed ^ 0x5bd1_e995);
            let (image, _) = pseudo_real_frame(head, &camera, &params, &config, &mut rng);
            let landmarks = head.landmarks(&params, &camera, &format!("img{i:05}"))?;
            extract_all(&image, &landmarks, &head.template, &parts, &pose_config)
        })
        .collect()
}

/// Sizes and noise levels of [`regression_data`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub n_synthetic: usize,
    pub n_real: usize,
    pub sequence_len: usize,
    pub image_size: usize,
    pub thumb_size: usize,
    pub latent_dim: usize,
    /// Gaussian noise on real landmarks, normalized units.
    pub landmark_noise: f64,
    pub pose: PoseNormalization,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            n_synthetic: 200,
            n_real: 100,
            sequence_len: 24,
            image_size: 48,
            thumb_size: 16,
            latent_dim: 32,
            landmark_noise: 0.005,
            pose: PoseNormalization::default(),
        }
    }
}

/// Training material for the regressor: synthetic segmented renders with
/// ground truth, pseudo-real frames with noisy landmarks only, and a held-out
/// pseudo-real yaw sweep with its true parameters.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub transfer: PcaTransfer,
    pub synthetic: Vec<TrainSample>,
    pub real: Vec<TrainSample>,
    pub sequence: Vec<(TrainSample, PoseParams)>,
    /// Frames behind `sequence`, in the same order.
    pub sequence_images: Vec<Image>,
}

fn flat_landmarks(set: &LandmarkSet) -> Vec<f64> {
    set.points.iter().flat_map(|p| [p.x, p.y]).collect()
}

pub fn regression_data(head: &HeadFixture, config: &RegressionConfig, seed: u64) -> Result<RegressionData> {
    let camera = head.camera(config.image_size, config.image_size);
    let n = head.rig.shape_count();
    let sample_config = SampleConfig {
        n_samples: config.n_synthetic,
        regions: head.regions.clone(),
        pitch_range: config.pose.pitch_range,
        yaw_range: config.pose.yaw_range,
        seed,
    };
    let synthetic_params = sample_params(n, &sample_config)?;
    let synthetic: Vec<(Image, Vec<f64>)> = synthetic_params
        .par_iter()
        .map(|p| {
            let marks = head.landmarks(p, &camera, "")?;
            Ok((segmented_frame(head, &camera, p), flat_landmarks(&marks)))
        })
        .collect::<Result<_>>()?;

    let real_config = PseudoRealConfig::default();
    let noise = Normal::new(0.0, config.landmark_noise.max(1e-12)).expect("positive sigma");
    let capture = |p: &PoseParams, frame_seed: u64| -> Result<(Image, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
        let (image, cam) = pseudo_real_frame(head, &camera, p, &real_config, &mut rng);
        let mut marks = flat_landmarks(&head.landmarks(p, &cam, "")?);
        for m in &mut marks {
            *m += noise.sample(&mut rng);
        }
        Ok((image, marks))
    };
    let real_params = sample_params(
        n,
        &SampleConfig {
            n_samples: config.n_real,
            seed: seed ^ 0x7265_616c,
            ..sample_config.clone()
        },
    )?;
    let real: Vec<(Image, Vec<f64>)> = real_params
        .par_iter()
        .enumerate()
        .map(|(i, p)| capture(p, seed.wrapping_mul(31).wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0073_6571);
    let (y0, y1) = config.pose.yaw_range;
    let len = config.sequence_len.max(2);
    let sequence_params: Vec<PoseParams> = (0..len)
        .map(|i| {
            let t = i as f64 / (len - 1) as f64;
            let mut w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            enforce_caps(&mut w, &head.regions);
            PoseParams {
                pitch: rng.random_range(config.pose.pitch_range.0..=config.pose.pitch_range.1) * 0.5,
                yaw: 0.9 * (y0 + t * (y1 - y0)),
                w,
            }
        })
        .collect();
    let sequence: Vec<(Image, Vec<f64>)> = sequence_params
        .par_iter()
        .enumerate()
        .map(|(i, p)| capture(p, seed.wrapping_mul(131).wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let real_images: Vec<Image> = real.iter().map(|r| r.0.clone()).collect();
    let synthetic_images: Vec<Image> = synthetic.iter().map(|s| s.0.clone()).collect();
    let transfer = fit_pca_transfer(&real_images, &synthetic_images, config.latent_dim, config.thumb_size)?;
    let sample = |image: &Image, landmarks: Vec<f64>, truth: Option<&PoseParams>| TrainSample {
        e: transfer.reembed(image),
        truth: truth.map(|p| GroundTruth {
            pitch: p.pitch,
            yaw: p.yaw,
            w: p.w.clone(),
        }),
        landmarks,
    };
    let synthetic = synthetic
        .into_iter()
        .zip(&synthetic_params)
        .map(|((im, m), p)| sample(&im, m, Some(p)))
        .collect();
    let real = real.into_iter().map(|(im, m)| sample(&im, m, None)).collect();
    let mut sequence_images = Vec::with_capacity(sequence.len());
    let sequence = sequence
        .into_iter()
        .zip(sequence_params)
        .map(|((im, m), p)| {
            let s = sample(&im, m, None);
            sequence_images.push(im);
            (s, p)
        })
        .collect();
    Ok(RegressionData {
        transfer,
        synthetic,
        real,
        sequence,
        sequence_images,
    })
}
