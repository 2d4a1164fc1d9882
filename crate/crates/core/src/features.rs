//! Curation features: pose (pitch, yaw), part-aligned expression landmarks,
//! and a coarse RGB raster of the nose as a lighting probe.

use serde::{Deserialize, Serialize};

use crate::geom::{fit_pitch_yaw, rigid_align, LandmarkSet, PoseFitConfig, TemplateModel, LANDMARK_COUNT};
use crate::image::{box_average, Image};
use crate::{Error, Result, Vec2};

/// Nose bridge and nose base in the 68-point convention.
pub const NOSE_INDICES: std::ops::RangeInclusive<usize> = 27..=35;
pub const LIGHTING_COLS: usize = 4;
pub const LIGHTING_ROWS: usize = 3;
pub const LIGHTING_LEN: usize = LIGHTING_COLS * LIGHTING_ROWS * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Pose,
    Expression,
    Lighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        Self { kind, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        euclidean(&self.values, &other.values)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Landmark groups aligned independently for the expression feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub groups: Vec<Vec<usize>>,
    pub templates: Vec<Vec<Vec2>>,
}

impl PartSpec {
    /// Left eye, right eye, outer + inner mouth.
    pub fn default_groups() -> Vec<Vec<usize>> {
        vec![(42..48).collect(), (36..42).collect(), (48..68).collect()]
    }

    /// Build templates by slicing a reference 68-point layout.
    pub fn from_reference(groups: Vec<Vec<usize>>, reference: &[Vec2]) -> Result<Self> {
        let templates = groups
            .iter()
            .map(|g| g.iter().map(|&i| reference.get(i).copied()).collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidInput("group index outside the reference layout".into()))?;
        let spec = Self { groups, templates };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.len() != self.templates.len() {
            return Err(Error::InvalidInput("part spec needs one template per non-empty group list".into()));
        }
        for (g, t) in self.groups.iter().zip(&self.templates) {
            if g.len() < 2 || g.len() != t.len() {
                return Err(Error::InvalidInput("each part needs >= 2 indices matching its template".into()));
            }
            if g.iter().any(|&i| i >= LANDMARK_COUNT) {
                return Err(Error::InvalidInput("part index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        2 * self.groups.iter().map(Vec::len).sum::<usize>()
    }
}

/// (pitch, yaw) in degrees.
pub fn pose_feature(landmarks: &LandmarkSet, template: &TemplateModel, config: &PoseFitConfig) -> Result<FeatureVector> {
    let fit = fit_pitch_yaw(landmarks, template, config)?;
    Ok(FeatureVector::new(FeatureKind::Pose, vec![fit.pitch, fit.yaw]))
}

/// Each part similarity-aligned to its own template; coordinates concatenated
/// in group order.
pub fn expression_feature(landmarks: &LandmarkSet, parts: &PartSpec) -> Result<FeatureVector> {
    landmarks.validate()?;
    parts.validate()?;
    let mut values = Vec::with_capacity(parts.feature_len());
    for (group, template) in parts.groups.iter().zip(&parts.templates) {
        let pts = landmarks.subset(group);
        let t = rigid_align(&pts, template, true)?;
        for p in t.apply_all(&pts) {
            values.push(p.x);
            values.push(p.y);
        }
    }
    Ok(FeatureVector::new(FeatureKind::Expression, values))
}

/// Pixel-space nose crop: bounding box of the nose landmarks padded by
/// `pad` of its extent on every side, clamped to the image.
pub fn nose_crop(image: &Image, landmarks: &LandmarkSet, pad: f64) -> Result<(f64, f64, f64, f64)> {
    let (w, h) = (image.width as f64, image.height as f64);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in NOSE_INDICES {
        let p = landmarks.points[i];
        x0 = x0.min(p.x * w);
        x1 = x1.max(p.x * w);
        y0 = y0.min(p.y * h);
        y1 = y1.max(p.y * h);
    }
    let (pw, ph) = ((x1 - x0) * pad, (y1 - y0) * pad);
    let (x0, x1) = ((x0 - pw).max(0.0), (x1 + pw).min(w));
    let (y0, y1) = ((y0 - ph).max(0.0), (y1 + ph).min(h));
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::OutOfBounds(format!(
            "nose crop of {} has zero area after clamping",
            landmarks.source_id
        )));
    }
    Ok((x0, y0, x1, y1))
}

/// 4 x 3 (columns x rows) area-averaged RGB raster of the padded nose crop,
/// flattened row-major to 36 values.
pub fn lighting_feature(image: &Image, landmarks: &LandmarkSet) -> Result<FeatureVector> {
    landmarks.validate()?;
    let (x0, y0, x1, y1) = nose_crop(image, landmarks, 0.1)?;
    let (cw, ch) = ((x1 - x0) / LIGHTING_COLS as f64, (y1 - y0) / LIGHTING_ROWS as f64);
    let mut values = Vec::with_capacity(LIGHTING_LEN);
    for r in 0..LIGHTING_ROWS {
        for c in 0..LIGHTING_COLS {
            let cell = box_average(
                image,
                x0 + c as f64 * cw,
                y0 + r as f64 * ch,
                x0 + (c + 1) as f64 * cw,
                y0 + (r + 1) as f64 * ch,
            );
            values.extend_from_slice(&cell);
        }
    }
    Ok(FeatureVector::new(FeatureKind::Lighting, values))
}

/// All three features of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub source_id: String,
    pub pose: Vec<f64>,
    pub lighting: Vec<f64>,
    pub expression: Vec<f64>,
}

impl FeatureSet {
    pub fn get(&self, kind: FeatureKind) -> &[f64] {
        match kind {
            FeatureKind::Pose => &self.pose,
            FeatureKind::Lighting => &self.lighting,
            FeatureKind::Expression => &self.expression,
        }
    }
}

pub fn extract_all(
    image: &Image,
    landmarks: &LandmarkSet,
    template: &TemplateModel,
    parts: &PartSpec,
    pose_config: &PoseFitConfig,
) -> Result<FeatureSet> {
    Ok(FeatureSet {
        source_id: landmarks.source_id.clone(),
        pose: pose_feature(landmarks, template, pose_config)?.values,
        lighting: lighting_feature(image, landmarks)?.values,
        expression: expression_feature(landmarks, parts)?.values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_layout() -> Vec<Vec2> {
        (0..LANDMARK_COUNT)
            .map(|i| {
                let a = i as f64 * 0.37;
                Vec2::new(0.5 + 0.2 * a.cos() + 0.001 * i as f64, 0.5 + 0.25 * (1.3 * a).sin())
            })
            .collect()
    }

    fn parts() -> PartSpec {
        PartSpec::from_reference(PartSpec::default_groups(), &reference_layout()).unwrap()
    }

    #[test]
    fn expression_of_template_is_template() {
        let lm = LandmarkSet::new("a", reference_layout()).unwrap();
        let f = expression_feature(&lm, &parts()).unwrap();
        let expected: Vec<f64> = parts().templates.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
        assert_eq!(f.len(), 64);
        for (a, b) in f.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expression_ignores_scale_and_shift() {
        let reference = reference_layout();
        let moved: Vec<Vec2> = reference.iter().map(|p| 2.0 * p + Vec2::new(0.1, -0.3)).collect();
        let a = expression_feature(&LandmarkSet::new("a", reference).unwrap(), &parts()).unwrap();
        let b = expression_feature(&LandmarkSet::new("b", moved).unwrap(), &parts()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn collapsed_group_is_degenerate() {
        let mut pts = reference_layout();
        for p in pts.iter_mut().take(48).skip(42) {
            *p = Vec2::new(0.5, 0.5);
        }
        let err = expression_feature(&LandmarkSet::new("a", pts).unwrap(), &parts());
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn gray_image_gives_flat_lighting() {
        let img = Image::filled(40, 30, [0.5; 3]);
        let f = lighting_feature(&img, &LandmarkSet::new("a", reference_layout()).unwrap()).unwrap();
        assert_eq!(f.len(), 36);
        assert!(f.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn crop_outside_image_fails() {
        let pts: Vec<Vec2> = reference_layout().iter().map(|p| p + Vec2::new(5.0, 0.0)).collect();
        let img = Image::filled(40, 30, [0.5; 3]);
        let err = lighting_feature(&img, &LandmarkSet::new("a", pts).unwrap());
        assert!(matches!(err, Err(Error::OutOfBounds(_))));
    }
}
