//! Photon-map texturing.
//!
//! Views are splatted into UV space as colored particles; a gather pass then
//! estimates every texel from its k nearest particles with inverse-distance
//! weights and scores it by the radius of the disc it needed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSet;
use crate::geom::{fit_pitch_yaw, rigid_align, LandmarkSet, PoseFitConfig, TemplateModel};
use crate::index::ClusterIndex;
use crate::render::{rasterize_uv, Camera, Mesh, UvRaster};
use crate::rig::{BlendshapeRig, PoseParams};
use crate::{Error, Image, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonSample {
    pub uv: Vec2,
    pub color: [f64; 3],
    /// Index into [`PhotonMap::sources`].
    pub source: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhotonMap {
    pub samples: Vec<PhotonSample>,
    pub sources: Vec<String>,
}

impl PhotonMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn source_index(&mut self, id: &str) -> u32 {
        match self.sources.iter().position(|s| s == id) {
            Some(i) => i as u32,
            None => {
                self.sources.push(id.to_string());
                (self.sources.len() - 1) as u32
            }
        }
    }

    /// Append one particle per valid pixel of `uv_raster`, colored by `image`.
    pub fn splat(&mut self, image: &Image, uv_raster: &UvRaster, source_id: &str) -> Result<usize> {
        if image.width != uv_raster.width || image.height != uv_raster.height {
            return Err(Error::DimensionMismatch {
                expected: uv_raster.width * uv_raster.height,
                got: image.len(),
            });
        }
        let before = self.samples.len();
        if uv_raster.valid_count() == 0 {
            return Ok(0);
        }
        let source = self.source_index(source_id);
        for (i, (&ok, uv)) in uv_raster.valid.iter().zip(&uv_raster.uv).enumerate() {
            if ok {
                self.samples.push(PhotonSample {
                    uv: Vec2::new(uv.x.clamp(0.0, 1.0), uv.y.clamp(0.0, 1.0)),
                    color: image.pixels[i],
                    source,
                });
            }
        }
        Ok(self.samples.len() - before)
    }
}

/// Static 2D kd-tree with exact k-nearest-neighbor queries. Equal distances
/// are ordered by point index.
#[derive(Debug, Clone)]
pub struct KdTree2 {
    points: Vec<Vec2>,
    /// Point indices arranged as an implicit median-split tree.
    order: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree2 {
    pub fn build(points: Vec<Vec2>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        Self::split(&points, &mut order, 0);
        Self { points, order }
    }

    fn split(points: &[Vec2], slice: &mut [u32], axis: usize) {
        if slice.len() <= 1 {
            return;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let (left, right) = slice.split_at_mut(mid);
        Self::split(points, left, 1 - axis);
        Self::split(points, &mut right[1..], 1 - axis);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, distance)` of the `k` nearest points, nearest first.
    pub fn knn(&self, q: &Vec2, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(q, k, 0, self.order.len(), 0, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index as usize, c.dist2.sqrt())).collect()
    }

    fn search(&self, q: &Vec2, k: usize, lo: usize, hi: usize, axis: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.points[idx as usize];
        let cand = Candidate {
            dist2: (p - q).norm_squared(),
            index: idx,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, k, near.0, near.1, 1 - axis, heap);
        if heap.len() < k || diff * diff <= heap.peek().expect("non-empty heap").dist2 {
            self.search(q, k, far.0, far.1, 1 - axis, heap);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatherConfig {
    pub width: usize,
    pub height: usize,
    /// Samples per texel.
    pub k: usize,
    pub epsilon: f64,
    /// Texels whose k-th neighbor lies farther than this (UV units) are invalid.
    pub cutoff: f64,
}

impl Default for GatherConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            k: 8,
            epsilon: 1e-4,
            cutoff: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureMap {
    pub width: usize,
    pub height: usize,
    pub colors: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TextureMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            colors: vec![[0.0; 3]; width * height],
            confidence: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// UV of texel `(i, j)`; row `j` spans `v`.
    pub fn texel_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new((i as f64 + 0.5) / self.width as f64, (j as f64 + 0.5) / self.height as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.colors.clone(),
            labels: None,
        }
    }

    /// Confidence scaled to [0, 1] by the largest value, in all channels.
    pub fn confidence_image(&self) -> Image {
        let max = self.confidence.iter().copied().fold(0.0, f64::max);
        let s = if max > 0.0 { 1.0 / max } else { 0.0 };
        Image {
            width: self.width,
            height: self.height,
            pixels: self.confidence.iter().map(|c| [c * s; 3]).collect(),
            labels: None,
        }
    }
}

/// Inverse-distance-weighted k-NN estimate at every texel center.
pub fn gather(map: &PhotonMap, config: &GatherConfig) -> Result<TextureMap> {
    if config.k == 0 {
        return Err(Error::InvalidInput("gather needs k >= 1".into()));
    }
    let (w, h) = (config.width, config.height);
    let mut out = TextureMap::invalid(w, h);
    if map.samples.len() < config.k {
        return Ok(out);
    }
    let tree = KdTree2::build(map.samples.iter().map(|s| s.uv).collect());
    let texels: Vec<([f64; 3], f64, bool)> = (0..w * h)
        .into_par_iter()
        .map(|t| {
            let c = out.texel_center(t % w, t / w);
            let nn = tree.knn(&c, config.k);
            let r = nn.last().map(|n| n.1).unwrap_or(f64::INFINITY);
            if r > config.cutoff {
                return ([0.0; 3], 0.0, false);
            }
            let mut color = [0.0; 3];
            let mut total = 0.0;
            for &(i, d) in &nn {
                let wt = 1.0 / (config.epsilon + d);
                total += wt;
                for (acc, v) in color.iter_mut().zip(map.samples[i].color) {
                    *acc += wt * v;
                }
            }
            (color.map(|v| v / total), 1.0 / (config.epsilon + r), true)
        })
        .collect();
    for (t, (color, conf, ok)) in texels.into_iter().enumerate() {
        out.colors[t] = color;
        out.confidence[t] = conf;
        out.valid[t] = ok;
    }
    Ok(out)
}

pub const DEFAULT_FACE_PREFERENCE: f64 = 4.0;

/// Confidence-weighted blend with the face confidence scaled by `lambda`.
/// Output confidence is the larger weighted input.
pub fn merge(face: &TextureMap, head: &TextureMap, lambda: f64) -> Result<TextureMap> {
    if face.width != head.width || face.height != head.height {
        return Err(Error::DimensionMismatch {
            expected: face.colors.len(),
            got: head.colors.len(),
        });
    }
    let mut out = TextureMap::invalid(face.width, face.height);
    for t in 0..face.colors.len() {
        let wf = if face.valid[t] { lambda * face.confidence[t] } else { 0.0 };
        let wh = if head.valid[t] { head.confidence[t] } else { 0.0 };
        if !(face.valid[t] || head.valid[t]) {
            continue;
        }
        let total = wf + wh;
        out.colors[t] = if total > 0.0 {
            std::array::from_fn(|c| (wf * face.colors[t][c] + wh * head.colors[t][c]) / total)
        } else if face.valid[t] {
            face.colors[t]
        } else {
            head.colors[t]
        };
        out.confidence[t] = wf.max(wh);
        out.valid[t] = true;
    }
    Ok(out)
}

/// Model and camera used to project a matched photograph onto the texture.
#[derive(Debug, Clone, Copy)]
pub struct HeadPass<'a> {
    pub mesh: &'a Mesh,
    pub rig: &'a BlendshapeRig,
    pub camera: &'a Camera,
    /// Marker indices refer to rig vertices.
    pub template: &'a TemplateModel,
    pub pose_config: &'a PoseFitConfig,
}

/// Splat a real photograph: refit the model pose to its landmarks, render the
/// UV raster, align the rendered markers to the landmarks and pull colors
/// from the photograph through that similarity.
pub fn splat_head(map: &mut PhotonMap, photo: &Image, landmarks: &LandmarkSet, pass: &HeadPass) -> Result<usize> {
    let fit = fit_pitch_yaw(landmarks, pass.template, pass.pose_config)?;
    let params = PoseParams {
        pitch: fit.pitch,
        yaw: fit.yaw,
        w: vec![0.0; pass.rig.shape_count()],
    };
    let raster = rasterize_uv(pass.mesh, pass.camera, &params, pass.rig);
    let posed = pass.rig.evaluate(&params);
    let rigid = &pass.pose_config.rigid_indices;
    let rendered: Vec<Vec2> = pass
        .template
        .marker_indices
        .iter()
        .map(|&v| {
            let s = pass.camera.project(&posed[v]);
            Vec2::new(s.x, s.y)
        })
        .collect();
    let (pw, ph) = (photo.width as f64, photo.height as f64);
    let observed: Vec<Vec2> = landmarks.subset(rigid).iter().map(|p| Vec2::new(p.x * pw, p.y * ph)).collect();
    let to_photo = rigid_align(&rendered, &observed, true)?;

    let mut colors = Image::new(raster.width, raster.height);
    let mut valid = raster.valid.clone();
    for (i, ok) in valid.iter_mut().enumerate() {
        if !*ok {
            continue;
        }
        let p = Vec2::new((i % raster.width) as f64 + 0.5, (i / raster.width) as f64 + 0.5);
        let q = to_photo.apply(&p);
        if q.x < 0.0 || q.y < 0.0 || q.x > pw || q.y > ph {
            *ok = false;
            continue;
        }
        colors.pixels[i] = photo.sample_bilinear(q.x, q.y);
    }
    let raster = UvRaster { valid, ..raster };
    map.splat(&colors, &raster, &landmarks.source_id)
}

/// Regular pitch/yaw sweep, pitch-major.
pub fn turntable_poses(pitch_steps: usize, yaw_steps: usize, pitch_range: (f64, f64), yaw_range: (f64, f64)) -> Vec<(f64, f64)> {
    let lerp = |r: (f64, f64), i: usize, n: usize| {
        if n <= 1 {
            0.5 * (r.0 + r.1)
        } else {
            r.0 + (r.1 - r.0) * i as f64 / (n - 1) as f64
        }
    };
    (0..pitch_steps)
        .flat_map(|i| (0..yaw_steps).map(move |j| (lerp(pitch_range, i, pitch_steps), lerp(yaw_range, j, yaw_steps))))
        .collect()
}

/// Query the in-the-wild index once per turntable render; the de-duplicated
/// union of matches in first-seen order.
pub fn curate_turntable(renders: &[FeatureSet], index: &ClusterIndex, match_counts: &[usize]) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for r in renders {
        for id in index.query(&index.query_features_of(r), match_counts)? {
            if seen.insert(id.clone()) {
                out.push(id);
            }
        }
    }
    Ok(out)
}
