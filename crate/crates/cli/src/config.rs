//! Pipeline configuration: input paths, per-module settings and the global
//! seed.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use facecap::fixtures::{HeadConfig, RegressionConfig};
use facecap::geom::PoseFitConfig;
use facecap::index::IndexConfig;
use facecap::regressor::Hyper;
use facecap::render::RenderOptions;
use facecap::solver::{SequenceMode, SolveConfig};
use facecap::texture::{GatherConfig, DEFAULT_FACE_PREFERENCE};
use facecap::transfer::{JitterConfig, SampleConfig, DEFAULT_K_NN, DEFAULT_PRUNE_FRACTION};
use serde::{Deserialize, Serialize};

/// Input files. Relative paths are resolved against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub mesh: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub template: Option<PathBuf>,
    /// Rig vertex index of each of the 68 landmarks.
    pub markers: Option<PathBuf>,
    pub parts: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub segmented_texture: Option<PathBuf>,
    pub skin_texture: Option<PathBuf>,
    /// Directory of in-the-wild frames, one file per landmark record.
    pub images: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    /// Directory of segmented-domain solve targets.
    pub targets: Option<PathBuf>,
    /// Ground-truth parameters of the targets, in file-name order.
    pub truth: Option<PathBuf>,
    pub synthetic_embeddings: Option<PathBuf>,
    pub real_embeddings: Option<PathBuf>,
    pub regression_data: Option<PathBuf>,
    pub transfer: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.mesh,
            &mut self.rig,
            &mut self.template,
            &mut self.markers,
            &mut self.parts,
            &mut self.camera,
            &mut self.segmented_texture,
            &mut self.skin_texture,
            &mut self.images,
            &mut self.landmarks,
            &mut self.targets,
            &mut self.truth,
            &mut self.synthetic_embeddings,
            &mut self.real_embeddings,
            &mut self.regression_data,
            &mut self.transfer,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurntableConfig {
    pub pitch_steps: usize,
    pub yaw_steps: usize,
    pub pitch_range: (f64, f64),
    pub yaw_range: (f64, f64),
    pub size: usize,
}

impl Default for TurntableConfig {
    fn default() -> Self {
        Self {
            pitch_steps: 4,
            yaw_steps: 5,
            pitch_range: (-20.0, 20.0),
            yaw_range: (-80.0, 80.0),
            size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub prune_fraction: f64,
    pub k_nn: usize,
    pub expand_target: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            prune_fraction: DEFAULT_PRUNE_FRACTION,
            k_nn: DEFAULT_K_NN,
            expand_target: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub landmark_hidden: Vec<usize>,
    pub hyper: Hyper,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 3],
            landmark_hidden: vec![64; 2],
            hyper: Hyper::default(),
        }
    }
}

/// Sizes used by `fixtures generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub head: HeadConfig,
    pub wild_frames: usize,
    pub wild_size: usize,
    pub targets: usize,
    pub target_size: usize,
    pub target_pitch: f64,
    pub target_yaw: f64,
    pub regression: RegressionConfig,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            wild_frames: 60,
            wild_size: 96,
            targets: 4,
            target_size: 64,
            target_pitch: 10.0,
            target_yaw: 40.0,
            regression: RegressionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub fixture: FixtureConfig,
    pub index: IndexConfig,
    pub match_counts: Vec<usize>,
    pub pose_fit: PoseFitConfig,
    pub render: RenderOptions,
    pub turntable: TurntableConfig,
    pub gather: GatherConfig,
    pub face_preference: f64,
    pub sample: SampleConfig,
    pub curation: CurationConfig,
    pub jitter: JitterConfig,
    pub solve: SolveConfig,
    pub sequence_mode: SequenceMode,
    /// Controls taken from the second track by `blend`.
    pub blend_mask: Vec<usize>,
    pub regressor: RegressorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            fixture: FixtureConfig::default(),
            index: IndexConfig::default(),
            match_counts: vec![2, 3, 1],
            pose_fit: PoseFitConfig::default(),
            render: RenderOptions::default(),
            turntable: TurntableConfig::default(),
            gather: GatherConfig::default(),
            face_preference: DEFAULT_FACE_PREFERENCE,
            sample: SampleConfig {
                n_samples: 200,
                ..SampleConfig::default()
            },
            curation: CurationConfig::default(),
            jitter: JitterConfig::default(),
            solve: SolveConfig::default(),
            sequence_mode: SequenceMode::Independent,
            blend_mask: facecap::fixtures::LIP_CONTROLS.to_vec(),
            regressor: RegressorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Derive every stage seed from the global one.
    pub fn propagate_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.index.kmeans_seed = seed;
        self.sample.seed = seed.wrapping_add(1);
        self.jitter.seed = seed.wrapping_add(2);
        self.regressor.hyper.seed = seed.wrapping_add(3);
    }
}
