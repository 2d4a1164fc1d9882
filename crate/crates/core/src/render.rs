//! Minimal software rasterizer.
//!
//! Z-buffered barycentric rasterization of the posed rig, with flat Lambert
//! shading (or unlit), RGB or segmented textures, UV rasters, marching-squares
//! region contours, and the pixel L2 image loss with two gradient paths.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::image::{gaussian_blur, Image};
use crate::rig::{BlendshapeRig, PoseParams};
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, Vec2, Vec3};

pub const BACKGROUND_LABEL: u16 = 0;
const NO_TRIANGLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Vec<Vec2>,
}

impl Mesh {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
            uvs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.uvs.len() != self.vertices.len() {
            return Err(Error::InvalidInput("one uv per vertex required".into()));
        }
        if self.triangles.iter().flatten().any(|&i| i >= self.vertices.len()) {
            return Err(Error::InvalidInput("triangle index out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Projection {
    /// Focal length in pixels.
    Pinhole { focal: f64 },
    /// Pixels per world unit.
    Orthographic { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub projection: Projection,
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
}

/// Projected vertex: pixel coordinates plus positive view depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenPoint {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Camera {
    /// Pinhole camera with a 35 mm-equivalent focal length looking down -z at
    /// `center` from `distance`.
    pub fn framing(center: Vec3, distance: f64, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            projection: Projection::Pinhole {
                focal: width as f64 * 35.0 / 36.0,
            },
            eye: center + Vec3::new(0.0, 0.0, distance),
            target: center,
            up: Vec3::new(0.0, 1.0, 0.0),
        }
    }

    /// Same view at another resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let k = width as f64 / self.width as f64;
        let projection = match self.projection {
            Projection::Pinhole { focal } => Projection::Pinhole { focal: focal * k },
            Projection::Orthographic { scale } => Projection::Orthographic { scale: scale * k },
        };
        Self {
            width,
            height,
            projection,
            ..*self
        }
    }

    /// Camera rolled about its viewing axis by `deg`.
    pub fn rolled(&self, deg: f64) -> Self {
        let (_, up, fwd) = self.basis();
        let axis = nalgebra::Unit::new_normalize(fwd);
        let rot = nalgebra::Rotation3::from_axis_angle(&axis, deg.to_radians());
        Self {
            up: rot * up,
            ..*self
        }
    }

    /// Orthonormal (right, up, forward).
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = (self.target - self.eye).normalize();
        let right = fwd.cross(&self.up).normalize();
        let up = right.cross(&fwd);
        (right, up, fwd)
    }

    pub fn project(&self, p: &Vec3) -> ScreenPoint {
        let (r, u, f) = self.basis();
        self.project_with(p, &r, &u, &f)
    }

    fn project_with(&self, p: &Vec3, r: &Vec3, u: &Vec3, f: &Vec3) -> ScreenPoint {
        let d = p - self.eye;
        let (xc, yc, zc) = (d.dot(r), d.dot(u), d.dot(f));
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        match self.projection {
            Projection::Pinhole { focal } => ScreenPoint {
                x: cx + focal * xc / zc,
                y: cy - focal * yc / zc,
                depth: zc,
            },
            Projection::Orthographic { scale } => ScreenPoint {
                x: cx + scale * xc,
                y: cy - scale * yc,
                depth: zc,
            },
        }
    }

    /// Rows `∂(sx, sy)/∂p`.
    fn project_jacobian(&self, p: &Vec3, r: &Vec3, u: &Vec3, f: &Vec3) -> [Vec3; 2] {
        match self.projection {
            Projection::Pinhole { focal } => {
                let d = p - self.eye;
                let (xc, yc, zc) = (d.dot(r), d.dot(u), d.dot(f));
                [
                    focal * (r / zc - f * (xc / (zc * zc))),
                    -focal * (u / zc - f * (yc / (zc * zc))),
                ]
            }
            Projection::Orthographic { scale } => [scale * r, -scale * u],
        }
    }

    /// Normalized image coordinates in [0, 1]².
    pub fn project_normalized(&self, p: &Vec3) -> Vec2 {
        let s = self.project(p);
        Vec2::new(s.x / self.width as f64, s.y / self.height as f64)
    }
}

/// Label texture over UV space with a color per region id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTexture {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
    /// Indexed by label; entry 0 is the background color.
    pub colors: Vec<[f64; 3]>,
}

impl SegTexture {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.width * self.height {
            return Err(Error::InvalidInput("label count must equal width * height".into()));
        }
        if self.labels.iter().any(|&l| l as usize >= self.colors.len()) {
            return Err(Error::InvalidInput("texel label without a region color".into()));
        }
        Ok(())
    }

    pub fn label_at(&self, uv: &Vec2) -> u16 {
        let (x, y) = nearest_texel(uv, self.width, self.height);
        self.labels[y * self.width + x]
    }

    pub fn color_image(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.colors[self.labels[y * self.width + x] as usize])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Texture {
    /// Texture image; row `j` holds `v = (j + 0.5) / height`.
    Rgb(Image),
    Segmented(SegTexture),
    Flat { color: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Direction the light travels (from the light towards the scene).
    pub direction: Vec3,
    pub ambient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub sampling: Sampling,
    /// `None` renders unlit (texture color only), as for segmented renders.
    pub light: Option<Light>,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::Bilinear,
            light: None,
            background: [0.0; 3],
        }
    }
}

impl RenderOptions {
    pub fn lit(direction: Vec3, ambient: f64) -> Self {
        Self {
            light: Some(Light { direction, ambient }),
            ..Default::default()
        }
    }
}

fn nearest_texel(uv: &Vec2, w: usize, h: usize) -> (usize, usize) {
    let x = ((uv.x * w as f64).floor().max(0.0) as usize).min(w - 1);
    let y = ((uv.y * h as f64).floor().max(0.0) as usize).min(h - 1);
    (x, y)
}

/// Bilinear fetch from a texel callback, plus `∂color/∂u`, `∂color/∂v`.
fn bilinear_with_grad(uv: &Vec2, w: usize, h: usize, fetch: impl Fn(usize, usize) -> [f64; 3]) -> ([f64; 3], [[f64; 3]; 2]) {
    let tx = uv.x * w as f64 - 0.5;
    let ty = uv.y * h as f64 - 0.5;
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let (cx, cy) = (tx.clamp(0.0, max_x), ty.clamp(0.0, max_y));
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    let (c00, c10, c01, c11) = (fetch(x0, y0), fetch(x1, y0), fetch(x0, y1), fetch(x1, y1));
    let x_live = tx > 0.0 && tx < max_x;
    let y_live = ty > 0.0 && ty < max_y;
    let mut color = [0.0; 3];
    let mut grad = [[0.0; 3]; 2];
    for ch in 0..3 {
        let top = c00[ch] * (1.0 - fx) + c10[ch] * fx;
        let bot = c01[ch] * (1.0 - fx) + c11[ch] * fx;
        color[ch] = top * (1.0 - fy) + bot * fy;
        if x_live {
            grad[0][ch] = w as f64 * ((1.0 - fy) * (c10[ch] - c00[ch]) + fy * (c11[ch] - c01[ch]));
        }
        if y_live {
            grad[1][ch] = h as f64 * ((1.0 - fx) * (c01[ch] - c00[ch]) + fx * (c11[ch] - c10[ch]));
        }
    }
    (color, grad)
}

impl Texture {
    /// Color and its UV gradient (zero for nearest sampling).
    pub fn sample(&self, uv: &Vec2, sampling: Sampling) -> ([f64; 3], [[f64; 3]; 2]) {
        match self {
            Texture::Flat { color } => (*color, [[0.0; 3]; 2]),
            Texture::Rgb(img) => match sampling {
                Sampling::Nearest => {
                    let (x, y) = nearest_texel(uv, img.width, img.height);
                    (img.get(x, y), [[0.0; 3]; 2])
                }
                Sampling::Bilinear => bilinear_with_grad(uv, img.width, img.height, |x, y| img.get(x, y)),
            },
            Texture::Segmented(seg) => match sampling {
                Sampling::Nearest => (seg.colors[seg.label_at(uv) as usize], [[0.0; 3]; 2]),
                Sampling::Bilinear => bilinear_with_grad(uv, seg.width, seg.height, |x, y| {
                    seg.colors[seg.labels[y * seg.width + x] as usize]
                }),
            },
        }
    }

    /// Texture-space Gaussian prefilter (`sigma` in texels). Segmented
    /// textures become their blurred color image.
    pub fn prefiltered(&self, sigma: f64) -> Texture {
        match self {
            Texture::Flat { .. } => self.clone(),
            Texture::Rgb(img) => Texture::Rgb(gaussian_blur(img, sigma)),
            Texture::Segmented(seg) => {
                if sigma <= 0.0 {
                    self.clone()
                } else {
                    Texture::Rgb(gaussian_blur(&seg.color_image(), sigma))
                }
            }
        }
    }

    fn label(&self, uv: &Vec2) -> Option<u16> {
        match self {
            Texture::Segmented(seg) => Some(seg.label_at(uv)),
            _ => None,
        }
    }
}

/// Per-pixel visibility: front-most triangle and its screen barycentrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub triangle: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn covered(&self, pixel: usize) -> Option<usize> {
        let t = self.triangle[pixel];
        (t != NO_TRIANGLE).then_some(t as usize)
    }
}

#[inline]
fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Barycentrics of pixel point `p` in triangle `(a, b, c)`, or `None` when the
/// point lies outside (edges inclusive) or the triangle is degenerate.
pub fn barycentric(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> Option<[f64; 3]> {
    let area = cross2(b.0 - a.0, b.1 - a.1, c.0 - a.0, c.1 - a.1);
    if area.abs() < 1e-12 {
        return None;
    }
    let la = cross2(b.0 - p.0, b.1 - p.1, c.0 - p.0, c.1 - p.1) / area;
    let lb = cross2(c.0 - p.0, c.1 - p.1, a.0 - p.0, a.1 - p.1) / area;
    let lc = cross2(a.0 - p.0, a.1 - p.1, b.0 - p.0, b.1 - p.1) / area;
    (la >= 0.0 && lb >= 0.0 && lc >= 0.0).then_some([la, lb, lc])
}

/// Z-buffered coverage of projected triangles. Pixel centers sit at
/// `(i + 0.5, j + 0.5)`; the nearer fragment wins, first one on exact ties.
pub fn rasterize_fragments(screen: &[ScreenPoint], triangles: &[[usize; 3]], camera: &Camera) -> Fragments {
    let (w, h) = (camera.width, camera.height);
    let perspective = matches!(camera.projection, Projection::Pinhole { .. });
    let mut frags = Fragments {
        width: w,
        height: h,
        triangle: vec![NO_TRIANGLE; w * h],
        bary: vec![[0.0; 3]; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    for (ti, tri) in triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| screen[i]);
        if perspective && (a.depth <= 1e-9 || b.depth <= 1e-9 || c.depth <= 1e-9) {
            continue;
        }
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let Some(l) = barycentric((a.x, a.y), (b.x, b.y), (c.x, c.y), p) else {
                    continue;
                };
                let depth = if perspective {
                    1.0 / (l[0] / a.depth + l[1] / b.depth + l[2] / c.depth)
                } else {
                    l[0] * a.depth + l[1] * b.depth + l[2] * c.depth
                };
                let idx = py * w + px;
                if depth < frags.depth[idx] {
                    frags.depth[idx] = depth;
                    frags.triangle[idx] = ti as u32;
                    frags.bary[idx] = l;
                }
            }
        }
    }
    frags
}

/// Everything needed to turn pose parameters into an image.
#[derive(Debug, Clone, Copy)]
pub struct RenderSetup<'a> {
    pub mesh: &'a Mesh,
    pub camera: &'a Camera,
    pub rig: &'a BlendshapeRig,
    pub texture: &'a Texture,
    pub options: RenderOptions,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// RGB render; carries a label channel when the texture is segmented.
    pub image: Image,
    pub fragments: Fragments,
    pub screen: Vec<ScreenPoint>,
}

impl RenderOutput {
    pub fn depth(&self) -> &[f64] {
        &self.fragments.depth
    }

    pub fn triangle_ids(&self) -> &[u32] {
        &self.fragments.triangle
    }
}

fn posed_vertices(mesh: &Mesh, rig: &BlendshapeRig, params: &PoseParams) -> Vec<Vec3> {
    if rig.vertex_count() == mesh.vertices.len() {
        rig.evaluate(params)
    } else {
        // no rig for this mesh: render the mesh as given
        mesh.vertices.clone()
    }
}

fn shade_factor(light: &Option<Light>, tri: &[usize; 3], posed: &[Vec3], view_dir: &Vec3) -> f64 {
    let Some(light) = light else {
        return 1.0;
    };
    let [a, b, c] = tri.map(|i| posed[i]);
    let mut n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len == 0.0 {
        return light.ambient;
    }
    n /= len;
    if n.dot(view_dir) > 0.0 {
        n = -n;
    }
    let l = -light.direction.normalize();
    light.ambient + (1.0 - light.ambient) * n.dot(&l).max(0.0)
}

fn interpolate_uv(mesh: &Mesh, tri: &[usize; 3], l: &[f64; 3]) -> Vec2 {
    mesh.uvs[tri[0]] * l[0] + mesh.uvs[tri[1]] * l[1] + mesh.uvs[tri[2]] * l[2]
}

/// Render the posed rig: `F(P_rigid(p, y) S(w); texture)`.
pub fn rasterize(setup: &RenderSetup, params: &PoseParams) -> RenderOutput {
    let RenderSetup {
        mesh,
        camera,
        rig,
        texture,
        options,
    } = *setup;
    let posed = posed_vertices(mesh, rig, params);
    let (r, u, f) = camera.basis();
    let screen: Vec<ScreenPoint> = posed.iter().map(|p| camera.project_with(p, &r, &u, &f)).collect();
    let frags = rasterize_fragments(&screen, &mesh.triangles, camera);
    let mut image = Image::filled(camera.width, camera.height, options.background);
    let segmented = matches!(texture, Texture::Segmented(_));
    let mut labels = segmented.then(|| vec![BACKGROUND_LABEL; camera.width * camera.height]);
    let shade: Vec<f64> = if options.light.is_some() {
        mesh.triangles.iter().map(|t| shade_factor(&options.light, t, &posed, &f)).collect()
    } else {
        Vec::new()
    };
    for idx in 0..image.len() {
        let Some(t) = frags.covered(idx) else {
            continue;
        };
        let tri = &mesh.triangles[t];
        let uv = interpolate_uv(mesh, tri, &frags.bary[idx]);
        let (mut c, _) = texture.sample(&uv, options.sampling);
        if let Some(&s) = shade.get(t) {
            for ch in &mut c {
                *ch *= s;
            }
        }
        image.pixels[idx] = c;
        if let (Some(labels), Some(l)) = (labels.as_mut(), texture.label(&uv)) {
            labels[idx] = l;
        }
    }
    image.labels = labels;
    RenderOutput {
        image,
        fragments: frags,
        screen,
    }
}

/// Per-pixel UV coordinates of the front-most surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvRaster {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<Vec2>,
    pub valid: Vec<bool>,
}

impl UvRaster {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// `U(I)`: barycentric-interpolated UVs of the posed rig.
pub fn rasterize_uv(mesh: &Mesh, camera: &Camera, params: &PoseParams, rig: &BlendshapeRig) -> UvRaster {
    let posed = posed_vertices(mesh, rig, params);
    let screen: Vec<ScreenPoint> = posed.iter().map(|p| camera.project(p)).collect();
    let frags = rasterize_fragments(&screen, &mesh.triangles, camera);
    uv_from_fragments(mesh, &frags)
}

pub fn uv_from_fragments(mesh: &Mesh, frags: &Fragments) -> UvRaster {
    let n = frags.width * frags.height;
    let mut uv = vec![Vec2::zeros(); n];
    let mut valid = vec![false; n];
    for idx in 0..n {
        if let Some(t) = frags.covered(idx) {
            uv[idx] = interpolate_uv(mesh, &mesh.triangles[t], &frags.bary[idx]);
            valid[idx] = true;
        }
    }
    UvRaster {
        width: frags.width,
        height: frags.height,
        uv,
        valid,
    }
}

/// Contour between two regions, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCurve {
    /// Region ids on either side, smaller first.
    pub regions: (u16, u16),
    pub points: Vec<Vec2>,
    pub closed: bool,
}

/// Point where three or more regions meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub point: Vec2,
    pub regions: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionBoundaries {
    pub curves: Vec<BoundaryCurve>,
    pub junctions: Vec<Junction>,
}

fn ordered(a: u16, b: u16) -> (u16, u16) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Marching squares over the label image. Cells are 2x2 blocks of pixel
/// centers; crossings sit midway between differently-labeled neighbors.
/// Points are in doubled integer coordinates while chaining.
pub fn extract_region_boundaries(labels: &[u16], width: usize, height: usize) -> RegionBoundaries {
    type Key = (i64, i64);
    let at = |x: usize, y: usize| labels[y * width + x];
    // segments grouped by region pair
    let mut segments: BTreeMap<(u16, u16), Vec<(Key, Key)>> = BTreeMap::new();
    let mut junctions = Vec::new();
    for cy in 0..height.saturating_sub(1) {
        for cx in 0..width.saturating_sub(1) {
            let tl = at(cx, cy);
            let tr = at(cx + 1, cy);
            let bl = at(cx, cy + 1);
            let br = at(cx + 1, cy + 1);
            if tl == tr && tr == bl && bl == br {
                continue;
            }
            // doubled coordinates of pixel centers: 2x + 1
            let (x0, y0) = (2 * cx as i64 + 1, 2 * cy as i64 + 1);
            // side crossings: (key, pair)
            let mut crossings: Vec<(Key, (u16, u16))> = Vec::with_capacity(4);
            if tl != tr {
                crossings.push(((x0 + 1, y0), ordered(tl, tr)));
            }
            if tr != br {
                crossings.push(((x0 + 2, y0 + 1), ordered(tr, br)));
            }
            if bl != br {
                crossings.push(((x0 + 1, y0 + 2), ordered(bl, br)));
            }
            if tl != bl {
                crossings.push(((x0, y0 + 1), ordered(tl, bl)));
            }
            let mut distinct = vec![tl, tr, bl, br];
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() >= 3 {
                let center = (x0 + 1, y0 + 1);
                junctions.push(Junction {
                    point: Vec2::new(center.0 as f64 / 2.0, center.1 as f64 / 2.0),
                    regions: distinct,
                });
                for (k, pair) in crossings {
                    segments.entry(pair).or_default().push((k, center));
                }
            } else if crossings.len() == 2 {
                let pair = crossings[0].1;
                segments.entry(pair).or_default().push((crossings[0].0, crossings[1].0));
            } else if crossings.len() == 4 {
                // saddle: keep the diagonal of `tl` connected
                let pair = crossings[0].1;
                let e = segments.entry(pair).or_default();
                e.push((crossings[0].0, crossings[3].0));
                e.push((crossings[1].0, crossings[2].0));
            }
        }
    }

    let mut curves = Vec::new();
    for (pair, segs) in segments {
        let mut adj: HashMap<Key, Vec<usize>> = HashMap::new();
        for (i, (a, b)) in segs.iter().enumerate() {
            adj.entry(*a).or_default().push(i);
            adj.entry(*b).or_default().push(i);
        }
        let mut used = vec![false; segs.len()];
        // open chains start at odd-degree endpoints, in segment order
        let mut starts: Vec<Key> = Vec::new();
        for (a, b) in &segs {
            for k in [a, b] {
                if adj[k].len() % 2 == 1 && !starts.contains(k) {
                    starts.push(*k);
                }
            }
        }
        let walk = |start: Key, used: &mut Vec<bool>| -> Vec<Key> {
            let mut chain = vec![start];
            let mut cur = start;
            while let Some(&si) = adj[&cur].iter().find(|&&s| !used[s]) {
                used[si] = true;
                let (a, b) = segs[si];
                cur = if a == cur { b } else { a };
                chain.push(cur);
            }
            chain
        };
        for s in starts {
            if adj[&s].iter().any(|&i| !used[i]) {
                let chain = walk(s, &mut used);
                curves.push(to_curve(pair, &chain, false));
            }
        }
        for i in 0..segs.len() {
            if !used[i] {
                let chain = walk(segs[i].0, &mut used);
                let closed = chain.len() > 2 && chain.first() == chain.last();
                curves.push(to_curve(pair, &chain, closed));
            }
        }
    }
    RegionBoundaries { curves, junctions }
}

fn to_curve(pair: (u16, u16), chain: &[(i64, i64)], closed: bool) -> BoundaryCurve {
    BoundaryCurve {
        regions: pair,
        points: chain.iter().map(|&(x, y)| Vec2::new(x as f64 / 2.0, y as f64 / 2.0)).collect(),
        closed,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GradientMethod {
    /// Central differences with the given step (degrees for pose, raw units
    /// for controls).
    FiniteDifference { step: f64 },
    /// Chain rule through a frozen triangle-id buffer and bilinear texture
    /// sampling. Unlit renders only.
    #[default]
    FixedCorrespondence,
    /// Image-space flow: each pixel's color moves with the screen velocity
    /// of the surface under it, `dI/dθ ≈ −∇I · v`, with `∇I` taken by central
    /// differences of the render. Background pixels next to the silhouette
    /// borrow the velocity of their covered neighbours. Approximate, but it
    /// sees region edges and silhouettes alike.
    ImageFlow,
}


/// Parameter-vector index layout: `0` pitch, `1` yaw, `2 + i` control `i`.
pub const PITCH: usize = 0;
pub const YAW: usize = 1;

/// Mean over pixels of `‖G_σ * (render − target)‖²`; `sigma = 0` is the plain
/// pixel L2 loss.
pub fn image_loss(setup: &RenderSetup, params: &PoseParams, target: &Image, sigma: f64) -> f64 {
    let render = rasterize(setup, params).image;
    blurred_residual_loss(&render, target, sigma).0
}

fn blurred_residual_loss(render: &Image, target: &Image, sigma: f64) -> (f64, Image) {
    let mut residual = render.clone();
    residual.labels = None;
    for (r, t) in residual.pixels.iter_mut().zip(&target.pixels) {
        for ch in 0..3 {
            r[ch] -= t[ch];
        }
    }
    let blurred = gaussian_blur(&residual, sigma);
    let n = blurred.len().max(1) as f64;
    let loss = blurred.pixels.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
    (loss, blurred)
}

/// Loss and its gradient over the parameter indices in `block`.
pub fn image_loss_grad(
    setup: &RenderSetup,
    params: &PoseParams,
    target: &Image,
    block: &[usize],
    method: GradientMethod,
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if !target.same_size(&Image::new(setup.camera.width, setup.camera.height)) {
        return Err(Error::DimensionMismatch {
            expected: setup.camera.width * setup.camera.height,
            got: target.len(),
        });
    }
    let n_params = 2 + params.w.len();
    if block.iter().any(|&i| i >= n_params) {
        return Err(Error::InvalidInput("block index outside the parameter vector".into()));
    }
    match method {
        GradientMethod::FiniteDifference { step } => {
            let loss = image_loss(setup, params, target, sigma);
            let base = params.to_vector();
            let grad = block
                .iter()
                .map(|&i| {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    plus[i] += step;
                    minus[i] -= step;
                    let lp = image_loss(setup, &PoseParams::from_vector(&plus), target, sigma);
                    let lm = image_loss(setup, &PoseParams::from_vector(&minus), target, sigma);
                    (lp - lm) / (2.0 * step)
                })
                .collect();
            Ok((loss, grad))
        }
        GradientMethod::FixedCorrespondence => fixed_correspondence_grad(setup, params, target, block, sigma),
        GradientMethod::ImageFlow => image_flow_grad(setup, params, target, block, sigma),
    }
}

fn fixed_correspondence_grad(
    setup: &RenderSetup,
    params: &PoseParams,
    target: &Image,
    block: &[usize],
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if setup.options.light.is_some() {
        return Err(Error::InvalidInput(
            "fixed-correspondence gradients support unlit renders only".into(),
        ));
    }
    let RenderSetup {
        mesh, rig, texture, ..
    } = *setup;
    if rig.vertex_count() != mesh.vertices.len() {
        return Err(Error::InvalidInput("rig and mesh vertex counts differ".into()));
    }
    let out = rasterize(setup, params);
    let (loss, blurred) = blurred_residual_loss(&out.image, target, sigma);
    // adjoint of the blur: G is symmetric
    let back = gaussian_blur(&blurred, sigma);
    let n_pix = out.image.len() as f64;

    let mut screen_grad: Vec<[f64; 2]> = vec![[0.0; 2]; mesh.vertices.len()];
    let mut touched = vec![false; mesh.vertices.len()];
    for idx in 0..out.image.len() {
        let Some(t) = out.fragments.covered(idx) else {
            continue;
        };
        let dl_dc = back.pixels[idx].map(|v| 2.0 * v / n_pix);
        let tri = mesh.triangles[t];
        let l = out.fragments.bary[idx];
        let uv = interpolate_uv(mesh, &tri, &l);
        let (_, dc) = texture.sample(&uv, setup.options.sampling);
        let g_u: f64 = (0..3).map(|c| dl_dc[c] * dc[0][c]).sum();
        let g_v: f64 = (0..3).map(|c| dl_dc[c] * dc[1][c]).sum();
        if g_u == 0.0 && g_v == 0.0 {
            continue;
        }
        let s = tri.map(|i| out.screen[i]);
        let p = (
            (idx % out.image.width) as f64 + 0.5,
            (idx / out.image.width) as f64 + 0.5,
        );
        let rel: [Vec2; 3] = s.map(|q| Vec2::new(q.x - p.0, q.y - p.1));
        let area = cross2(s[1].x - s[0].x, s[1].y - s[0].y, s[2].x - s[0].x, s[2].y - s[0].y);
        // dN[i][m] = ∂N_i/∂s_m with N_i = cross(s_j − p, s_k − p)
        let mut d_n = [[Vec2::zeros(); 3]; 3];
        for i in 0..3 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            d_n[i][j] = Vec2::new(rel[k].y, -rel[k].x);
            d_n[i][k] = Vec2::new(-rel[j].y, rel[j].x);
        }
        for m in 0..3 {
            let d_area = d_n[0][m] + d_n[1][m] + d_n[2][m];
            // ∂(g · uv)/∂s_m = Σ_i (g · uv_i) ∂λ_i/∂s_m
            let mut acc = Vec2::zeros();
            for i in 0..3 {
                let d_lambda = (d_n[i][m] - d_area * l[i]) / area;
                let uv_i = mesh.uvs[tri[i]];
                acc += d_lambda * (g_u * uv_i.x + g_v * uv_i.y);
            }
            let v = tri[m];
            screen_grad[v][0] += acc.x;
            screen_grad[v][1] += acc.y;
            touched[v] = true;
        }
    }

    Ok((loss, screen_to_params(setup, params, block, &screen_grad, &touched)))
}

/// Pulls per-vertex screen-space gradients back to the parameters in `block`.
fn screen_to_params(
    setup: &RenderSetup,
    params: &PoseParams,
    block: &[usize],
    screen_grad: &[[f64; 2]],
    touched: &[bool],
) -> Vec<f64> {
    let RenderSetup { mesh, camera, rig, .. } = *setup;
    let st = rig.state(params);
    let (r, u, f) = camera.basis();
    let mut grad = vec![0.0; block.len()];
    let mut cols = vec![Vec3::zeros(); rig.shape_count()];
    let wants_controls = block.iter().any(|&i| i >= 2);
    for v in 0..mesh.vertices.len() {
        if !touched[v] {
            continue;
        }
        let x = st.vertex(v);
        let [jx, jy] = camera.project_jacobian(&x, &r, &u, &f);
        let g_world = jx * screen_grad[v][0] + jy * screen_grad[v][1];
        let pose = if block.contains(&PITCH) || block.contains(&YAW) {
            Some(st.pose_jacobian(v))
        } else {
            None
        };
        if wants_controls {
            st.control_jacobian(v, &mut cols);
        }
        for (g, &bi) in grad.iter_mut().zip(block) {
            *g += match bi {
                PITCH => g_world.dot(&pose.unwrap()[0]),
                YAW => g_world.dot(&pose.unwrap()[1]),
                i => g_world.dot(&cols[i - 2]),
            };
        }
    }
    grad
}

fn image_flow_grad(
    setup: &RenderSetup,
    params: &PoseParams,
    target: &Image,
    block: &[usize],
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    let RenderSetup { mesh, rig, .. } = *setup;
    if rig.vertex_count() != mesh.vertices.len() {
        return Err(Error::InvalidInput("rig and mesh vertex counts differ".into()));
    }
    let out = rasterize(setup, params);
    let (loss, blurred) = blurred_residual_loss(&out.image, target, sigma);
    let back = gaussian_blur(&blurred, sigma);
    let n_pix = out.image.len() as f64;
    let (w, h) = (out.image.width, out.image.height);
    let at = |x: usize, y: usize| out.image.pixels[y * w + x];

    let mut screen_grad: Vec<[f64; 2]> = vec![[0.0; 2]; mesh.vertices.len()];
    let mut touched = vec![false; mesh.vertices.len()];
    let mut owners: Vec<usize> = Vec::with_capacity(4);
    for idx in 0..out.image.len() {
        let (x, y) = (idx % w, idx / w);
        owners.clear();
        match out.fragments.covered(idx) {
            Some(_) => owners.push(idx),
            None => {
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                        let nb = ny as usize * w + nx as usize;
                        if out.fragments.covered(nb).is_some() {
                            owners.push(nb);
                        }
                    }
                }
            }
        }
        if owners.is_empty() {
            continue;
        }
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (px0, px1, py0, py1) = (at(x0, y), at(x1, y), at(x, y0), at(x, y1));
        let (sx, sy) = ((x1 - x0).max(1) as f64, (y1 - y0).max(1) as f64);
        let mut g = Vec2::zeros();
        for c in 0..3 {
            let dl = 2.0 * back.pixels[idx][c] / n_pix;
            g.x -= dl * (px1[c] - px0[c]) / sx;
            g.y -= dl * (py1[c] - py0[c]) / sy;
        }
        if g == Vec2::zeros() {
            continue;
        }
        let share = 1.0 / owners.len() as f64;
        for &o in &owners {
            let t = out.fragments.covered(o).unwrap();
            let tri = mesh.triangles[t];
            let l = out.fragments.bary[o];
            for m in 0..3 {
                screen_grad[tri[m]][0] += share * l[m] * g.x;
                screen_grad[tri[m]][1] += share * l[m] * g.y;
                touched[tri[m]] = true;
            }
        }
    }
    Ok((loss, screen_to_params(setup, params, block, &screen_grad, &touched)))
}

/// Blurred residual and its image-flow Jacobian over `block`, both flattened
/// pixel-major with three channels per pixel.
#[derive(Debug, Clone)]
pub struct FlowLinearization {
    pub loss: f64,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl FlowLinearization {
    /// Gradient of the mean squared loss.
    pub fn gradient(&self) -> DVector<f64> {
        self.jacobian.tr_mul(&self.residual) * (2.0 / self.pixel_count())
    }

    /// Gauss-Newton approximation of the loss Hessian.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.jacobian.tr_mul(&self.jacobian) * (2.0 / self.pixel_count())
    }

    fn pixel_count(&self) -> f64 {
        (self.residual.len() / 3).max(1) as f64
    }
}

/// Linearizes the residual with the same flow model as
/// [`GradientMethod::ImageFlow`].
pub fn image_flow_linearization(
    setup: &RenderSetup,
    params: &PoseParams,
    target: &Image,
    block: &[usize],
    sigma: f64,
) -> Result<FlowLinearization> {
    let RenderSetup { mesh, camera, rig, .. } = *setup;
    if rig.vertex_count() != mesh.vertices.len() {
        return Err(Error::InvalidInput("rig and mesh vertex counts differ".into()));
    }
    if target.width != camera.width || target.height != camera.height {
        return Err(Error::DimensionMismatch {
            expected: camera.width * camera.height,
            got: target.len(),
        });
    }
    if block.iter().any(|&i| i >= 2 + params.w.len()) {
        return Err(Error::InvalidInput("block index outside the parameter vector".into()));
    }
    let out = rasterize(setup, params);
    let (loss, blurred) = blurred_residual_loss(&out.image, target, sigma);
    let (w, h) = (out.image.width, out.image.height);
    let at = |x: usize, y: usize| out.image.pixels[y * w + x];

    let st = rig.state(params);
    let (r, u, f) = camera.basis();
    let mut cols = vec![Vec3::zeros(); rig.shape_count()];
    let mut velocity: Vec<Option<Vec<Vec2>>> = vec![None; mesh.vertices.len()];
    let mut vertex_velocity = |v: usize| -> Vec<Vec2> {
        if let Some(vel) = &velocity[v] {
            return vel.clone();
        }
        let [jx, jy] = camera.project_jacobian(&st.vertex(v), &r, &u, &f);
        let pose = st.pose_jacobian(v);
        st.control_jacobian(v, &mut cols);
        let vel: Vec<Vec2> = block
            .iter()
            .map(|&i| {
                let d = match i {
                    PITCH => pose[0],
                    YAW => pose[1],
                    i => cols[i - 2],
                };
                Vec2::new(jx.dot(&d), jy.dot(&d))
            })
            .collect();
        velocity[v] = Some(vel.clone());
        vel
    };

    let mut columns: Vec<Image> = vec![Image::new(w, h); block.len()];
    let mut owners: Vec<usize> = Vec::with_capacity(4);
    let mut v_pix = vec![Vec2::zeros(); block.len()];
    for idx in 0..out.image.len() {
        let (x, y) = (idx % w, idx / w);
        owners.clear();
        match out.fragments.covered(idx) {
            Some(_) => owners.push(idx),
            None => {
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                        let nb = ny as usize * w + nx as usize;
                        if out.fragments.covered(nb).is_some() {
                            owners.push(nb);
                        }
                    }
                }
            }
        }
        if owners.is_empty() {
            continue;
        }
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (sx, sy) = ((x1 - x0).max(1) as f64, (y1 - y0).max(1) as f64);
        let mut grad_i = [Vec2::zeros(); 3];
        for (c, g) in grad_i.iter_mut().enumerate() {
            *g = Vec2::new(
                (at(x1, y)[c] - at(x0, y)[c]) / sx,
                (at(x, y1)[c] - at(x, y0)[c]) / sy,
            );
        }
        if grad_i.iter().all(|g| *g == Vec2::zeros()) {
            continue;
        }
        v_pix.iter_mut().for_each(|v| *v = Vec2::zeros());
        let share = 1.0 / owners.len() as f64;
        for &o in &owners {
            let tri = mesh.triangles[out.fragments.covered(o).unwrap()];
            let l = out.fragments.bary[o];
            for m in 0..3 {
                let vel = vertex_velocity(tri[m]);
                for (acc, v) in v_pix.iter_mut().zip(&vel) {
                    *acc += v * (share * l[m]);
                }
            }
        }
        for (col, v) in columns.iter_mut().zip(&v_pix) {
            for c in 0..3 {
                col.pixels[idx][c] = -grad_i[c].dot(v);
            }
        }
    }

    let n = 3 * out.image.len();
    let residual = DVector::from_iterator(n, blurred.pixels.iter().flat_map(|p| p.iter().copied()));
    let mut jacobian = DMatrix::zeros(n, block.len());
    for (k, col) in columns.iter().enumerate() {
        let col = gaussian_blur(col, sigma);
        for (i, v) in col.pixels.iter().flat_map(|p| p.iter()).enumerate() {
            jacobian[(i, k)] = *v;
        }
    }
    Ok(FlowLinearization {
        loss,
        residual,
        jacobian,
    })
}
