//! Subcommand implementations. Each reads its inputs from the config paths
//! (or explicit flags) and writes versioned JSON plus images to the output
//! directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use facecap::features::{extract_all, FeatureSet, PartSpec};
use facecap::fixtures::{pseudo_real_frame, random_params, regression_data, segmented_frame, HeadFixture, PseudoRealConfig};
use facecap::index::{build_index, ClusterIndex};
use facecap::io::{load_json, read_obj, save_json, write_obj};
use facecap::regressor::{infer, train_stage1, train_stage2, train_stage3, Architecture, RegressorBundle, TrainSample};
use facecap::render::{extract_region_boundaries, rasterize, rasterize_uv, Camera, Mesh, RenderSetup, Texture};
use facecap::solver::{self, blend_parameters, SolveResult};
use facecap::texture::{curate_turntable, gather, merge, splat_head, turntable_poses, HeadPass, PhotonMap, TextureMap};
use facecap::transfer::{contract, expand, real_outliers, sample_params, Embedded, PcaTransfer};
use facecap::{BlendshapeRig, Image, LandmarkSet, PoseParams, TemplateModel};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::imageio;
use crate::TextureChoice;

pub struct Ctx {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub preview: bool,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("config path `paths.{key}` is not set"))
}

fn load<T: serde::de::DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    load_json(path, kind).with_context(|| format!("reading {kind} from {}", path.display()))
}

impl Ctx {
    pub fn echo_config(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(self.out.join("resolved_config.json"), text).context("writing resolved config")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn or_out(&self, p: Option<PathBuf>, name: &str) -> PathBuf {
        p.unwrap_or_else(|| self.path(name))
    }

    fn save<T: Serialize>(&self, name: &str, kind: &str, data: &T) -> Result<PathBuf> {
        let p = self.path(name);
        save_json(&p, kind, data).with_context(|| format!("writing {}", p.display()))?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.path(name);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn mesh(&self) -> Result<Mesh> {
        let p = required(&self.config.paths.mesh, "mesh")?;
        let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        read_obj(file).with_context(|| format!("reading mesh {}", p.display()))
    }

    fn rig(&self) -> Result<BlendshapeRig> {
        let rig: BlendshapeRig = load(required(&self.config.paths.rig, "rig")?, "rig")?;
        rig.validate().context("validating rig")?;
        Ok(rig)
    }

    fn camera(&self) -> Result<Camera> {
        load(required(&self.config.paths.camera, "camera")?, "camera")
    }

    fn template(&self) -> Result<TemplateModel> {
        load(required(&self.config.paths.template, "template")?, "template")
    }

    fn markers(&self) -> Result<Vec<usize>> {
        load(required(&self.config.paths.markers, "markers")?, "markers")
    }

    fn parts(&self) -> Result<PartSpec> {
        load(required(&self.config.paths.parts, "parts")?, "parts")
    }

    fn texture(&self, choice: TextureChoice) -> Result<Texture> {
        match choice {
            TextureChoice::Segmented => load(required(&self.config.paths.segmented_texture, "segmented_texture")?, "texture"),
            TextureChoice::Skin => Ok(Texture::Rgb(imageio::load(required(&self.config.paths.skin_texture, "skin_texture")?)?)),
        }
    }

    fn write_image(&self, image: &Image, dir: &Path, stem: &str) -> Result<()> {
        imageio::save_float(image, &dir.join(format!("{stem}.pfm")))?;
        if self.preview {
            imageio::save_png(image, &dir.join(format!("{stem}.png")))?;
        }
        Ok(())
    }

    fn write_texture(&self, map: &TextureMap, name: &str) -> Result<()> {
        self.save(&format!("{name}.json"), "texture_map", map)?;
        if self.preview {
            imageio::save_png(&map.to_image(), &self.path(&format!("{name}.png")))?;
            imageio::save_png(&map.confidence_image(), &self.path(&format!("{name}_confidence.png")))?;
        }
        Ok(())
    }
}

fn landmarks_from_markers(markers: &[usize], rig: &BlendshapeRig, camera: &Camera, params: &PoseParams, id: &str) -> Result<LandmarkSet> {
    let st = rig.state(params);
    let pts = markers.iter().map(|&v| camera.project_normalized(&st.vertex(v))).collect();
    Ok(LandmarkSet::new(id, pts)?)
}

pub fn features_extract(ctx: &Ctx, images: Option<PathBuf>, landmarks: Option<PathBuf>, output: &str) -> Result<()> {
    let dir = match images {
        Some(d) => d,
        None => required(&ctx.config.paths.images, "images")?.to_path_buf(),
    };
    let lm_path = match landmarks {
        Some(p) => p,
        None => required(&ctx.config.paths.landmarks, "landmarks")?.to_path_buf(),
    };
    let sets: Vec<LandmarkSet> = load(&lm_path, "landmarks")?;
    let template = ctx.template()?;
    let parts = ctx.parts()?;
    let features: Vec<FeatureSet> = sets
        .par_iter()
        .map(|lm| {
            let path = imageio::find_image(&dir, &lm.source_id)?;
            let img = imageio::load(&path)?;
            extract_all(&img, lm, &template, &parts, &ctx.config.pose_fit)
                .with_context(|| format!("features of {}", lm.source_id))
        })
        .collect::<Result<_>>()?;
    ctx.save(output, "features", &features)?;
    println!("{} feature sets", features.len());
    Ok(())
}

pub fn index_build(ctx: &Ctx, features: Option<PathBuf>) -> Result<()> {
    let features: Vec<FeatureSet> = load(&ctx.or_out(features, "features.json"), "features")?;
    let index = build_index(&features, &ctx.config.index)?;
    ctx.save("index.json", "index", &index)?;
    for level in 0..ctx.config.index.branch_factors.len() {
        println!("level {}: {} clusters", level + 1, index.root.count_at_level(level + 1));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Matches {
    queries: Vec<String>,
    matches: Vec<String>,
}

pub fn index_query(
    ctx: &Ctx,
    index: Option<PathBuf>,
    features: Option<PathBuf>,
    source: Option<String>,
    q: Option<Vec<usize>>,
) -> Result<()> {
    let index: ClusterIndex = load(&ctx.or_out(index, "index.json"), "index")?;
    let features: Vec<FeatureSet> = load(&ctx.or_out(features, "features.json"), "features")?;
    let query = match &source {
        Some(id) => features
            .iter()
            .find(|f| &f.source_id == id)
            .ok_or_else(|| anyhow!("no features for {id}"))?,
        None => features.first().ok_or_else(|| anyhow!("features file is empty"))?,
    };
    let q = q.unwrap_or_else(|| ctx.config.match_counts.clone());
    let matches = index.query(&index.query_features_of(query), &q)?;
    for id in &matches {
        println!("{id}");
    }
    ctx.save(
        "matches.json",
        "matches",
        &Matches {
            queries: vec![query.source_id.clone()],
            matches,
        },
    )?;
    Ok(())
}

fn load_params(path: Option<PathBuf>, n: usize) -> Result<PoseParams> {
    let p = match path {
        Some(p) => load::<PoseParams>(&p, "params")?,
        None => PoseParams::neutral(n),
    };
    ensure!(p.w.len() == n, "parameters have {} controls, the rig {}", p.w.len(), n);
    Ok(p)
}

pub fn rig_eval(ctx: &Ctx, params: Option<PathBuf>, output: &str) -> Result<()> {
    let rig = ctx.rig()?;
    let mut mesh = ctx.mesh()?;
    let params = load_params(params, rig.shape_count())?;
    ensure!(mesh.vertices.len() == rig.vertex_count(), "mesh and rig vertex counts differ");
    mesh.vertices = rig.evaluate(&params);
    let path = ctx.path(output);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_obj(&mesh, BufWriter::new(file))?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Turntable {
    camera: Camera,
    views: Vec<TurntableView>,
}

#[derive(Serialize, Deserialize)]
struct TurntableView {
    id: String,
    pitch: f64,
    yaw: f64,
}

pub fn render_turntable(ctx: &Ctx, choice: TextureChoice) -> Result<()> {
    let cfg = &ctx.config.turntable;
    let (mesh, rig, texture) = (ctx.mesh()?, ctx.rig()?, ctx.texture(choice)?);
    let camera = ctx.camera()?.resized(cfg.size, cfg.size);
    let setup = RenderSetup {
        mesh: &mesh,
        camera: &camera,
        rig: &rig,
        texture: &texture,
        options: ctx.config.render,
    };
    let dir = ctx.subdir("turntable")?;
    let views: Vec<TurntableView> = turntable_poses(cfg.pitch_steps, cfg.yaw_steps, cfg.pitch_range, cfg.yaw_range)
        .into_iter()
        .enumerate()
        .map(|(i, (pitch, yaw))| TurntableView {
            id: format!("view_{i:03}"),
            pitch,
            yaw,
        })
        .collect();
    let markers = ctx.markers().ok();
    let landmarks: Vec<Option<LandmarkSet>> = views
        .par_iter()
        .map(|v| {
            let params = PoseParams {
                pitch: v.pitch,
                yaw: v.yaw,
                w: vec![0.0; rig.shape_count()],
            };
            ctx.write_image(&rasterize(&setup, &params).image, &dir, &v.id)?;
            markers
                .as_ref()
                .map(|m| landmarks_from_markers(m, &rig, &camera, &params, &v.id))
                .transpose()
        })
        .collect::<Result<_>>()?;
    if markers.is_some() {
        let sets: Vec<LandmarkSet> = landmarks.into_iter().flatten().collect();
        save_json(dir.join("landmarks.json"), "landmarks", &sets)?;
    }
    save_json(dir.join("turntable.json"), "turntable", &Turntable { camera, views })?;
    println!("{}", dir.display());
    Ok(())
}

pub fn render_frame(ctx: &Ctx, params: Option<PathBuf>, choice: TextureChoice, size: usize) -> Result<()> {
    let (mesh, rig, texture) = (ctx.mesh()?, ctx.rig()?, ctx.texture(choice)?);
    let camera = ctx.camera()?.resized(size, size);
    let params = load_params(params, rig.shape_count())?;
    let setup = RenderSetup {
        mesh: &mesh,
        camera: &camera,
        rig: &rig,
        texture: &texture,
        options: ctx.config.render,
    };
    ctx.write_image(&rasterize(&setup, &params).image, &ctx.out, "frame")
}

pub fn texture_face(ctx: &Ctx, turntable: Option<PathBuf>, views: Option<PathBuf>) -> Result<()> {
    let dir = ctx.or_out(turntable, "turntable");
    let tt: Turntable = load(&dir.join("turntable.json"), "turntable")?;
    let (mesh, rig) = (ctx.mesh()?, ctx.rig()?);
    let source_dir = views.unwrap_or_else(|| dir.clone());
    let splats: Vec<(Image, facecap::render::UvRaster, String)> = tt
        .views
        .par_iter()
        .map(|v| {
            let img = imageio::load(&imageio::find_image(&source_dir, &v.id)?)?;
            let params = PoseParams {
                pitch: v.pitch,
                yaw: v.yaw,
                w: vec![0.0; rig.shape_count()],
            };
            let camera = tt.camera.resized(img.width, img.height);
            Ok((img, rasterize_uv(&mesh, &camera, &params, &rig), v.id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut map = PhotonMap::new();
    for (img, raster, id) in &splats {
        map.splat(img, raster, id)?;
    }
    let tex = gather(&map, &ctx.config.gather)?;
    println!("{} photons, {} valid texels", map.len(), tex.valid_count());
    ctx.write_texture(&tex, "face_texture")
}

pub fn texture_curate(ctx: &Ctx, renders: PathBuf, index: Option<PathBuf>) -> Result<()> {
    let index: ClusterIndex = load(&ctx.or_out(index, "index.json"), "index")?;
    let renders: Vec<FeatureSet> = load(&renders, "features")?;
    let matches = curate_turntable(&renders, &index, &ctx.config.match_counts)?;
    println!("{} matches", matches.len());
    ctx.save(
        "matches.json",
        "matches",
        &Matches {
            queries: renders.iter().map(|r| r.source_id.clone()).collect(),
            matches,
        },
    )?;
    Ok(())
}

pub fn texture_head(ctx: &Ctx, matches: Option<PathBuf>) -> Result<()> {
    let dir = required(&ctx.config.paths.images, "images")?;
    let sets: Vec<LandmarkSet> = load(required(&ctx.config.paths.landmarks, "landmarks")?, "landmarks")?;
    let chosen: Vec<&LandmarkSet> = match matches {
        Some(p) => {
            let m: Matches = load(&p, "matches")?;
            m.matches
                .iter()
                .map(|id| {
                    sets.iter()
                        .find(|s| &s.source_id == id)
                        .ok_or_else(|| anyhow!("no landmarks for matched image {id}"))
                })
                .collect::<Result<_>>()?
        }
        None => sets.iter().collect(),
    };
    let (mesh, rig, camera, template) = (ctx.mesh()?, ctx.rig()?, ctx.camera()?, ctx.template()?);
    let mut map = PhotonMap::new();
    for lm in chosen {
        let photo = imageio::load(&imageio::find_image(dir, &lm.source_id)?)?;
        let cam = camera.resized(photo.width, photo.height);
        let pass = HeadPass {
            mesh: &mesh,
            rig: &rig,
            camera: &cam,
            template: &template,
            pose_config: &ctx.config.pose_fit,
        };
        splat_head(&mut map, &photo, lm, &pass).with_context(|| format!("splatting {}", lm.source_id))?;
    }
    let tex = gather(&map, &ctx.config.gather)?;
    println!("{} photons, {} valid texels", map.len(), tex.valid_count());
    ctx.write_texture(&tex, "head_texture")
}

pub fn texture_merge(ctx: &Ctx, face: Option<PathBuf>, head: Option<PathBuf>) -> Result<()> {
    let face: TextureMap = load(&ctx.or_out(face, "face_texture.json"), "texture_map")?;
    let head: TextureMap = load(&ctx.or_out(head, "head_texture.json"), "texture_map")?;
    let merged = merge(&face, &head, ctx.config.face_preference)?;
    ctx.write_texture(&merged, "merged_texture")?;
    imageio::save_pfm(&merged.to_image(), &ctx.path("merged_texture.pfm"))
}

pub fn dataset_sample(ctx: &Ctx, render: bool, size: usize) -> Result<()> {
    let rig = ctx.rig()?;
    let params = sample_params(rig.shape_count(), &ctx.config.sample)?;
    ctx.save("samples.json", "params_list", &params)?;
    if render {
        let (mesh, texture) = (ctx.mesh()?, ctx.texture(TextureChoice::Segmented)?);
        let camera = ctx.camera()?.resized(size, size);
        let setup = RenderSetup {
            mesh: &mesh,
            camera: &camera,
            rig: &rig,
            texture: &texture,
            options: ctx.config.render,
        };
        let dir = ctx.subdir("samples")?;
        params
            .par_iter()
            .enumerate()
            .try_for_each(|(i, p)| ctx.write_image(&rasterize(&setup, p).image, &dir, &format!("sample_{i:05}")))?;
    }
    println!("{} samples", params.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ContractReport {
    kept: Vec<String>,
    removed: Vec<String>,
    real_gaps: Vec<String>,
}

pub fn dataset_contract(ctx: &Ctx, synthetic: Option<PathBuf>, real: Option<PathBuf>) -> Result<()> {
    let syn_path = match synthetic {
        Some(p) => p,
        None => required(&ctx.config.paths.synthetic_embeddings, "synthetic_embeddings")?.to_path_buf(),
    };
    let real_path = match real {
        Some(p) => p,
        None => required(&ctx.config.paths.real_embeddings, "real_embeddings")?.to_path_buf(),
    };
    let syn: Vec<Embedded> = load(&syn_path, "embeddings")?;
    let real: Vec<Embedded> = load(&real_path, "embeddings")?;
    let c = &ctx.config.curation;
    let part = contract(&syn, &real, c.prune_fraction, c.k_nn)?;
    let gaps = real_outliers(&real, &syn, c.prune_fraction, c.k_nn)?;
    let ids = |set: &[Embedded], idx: &[usize]| idx.iter().map(|&i| set[i].source_id.clone()).collect::<Vec<_>>();
    let report = ContractReport {
        kept: ids(&syn, &part.kept),
        removed: ids(&syn, &part.removed),
        real_gaps: ids(&real, &gaps.removed),
    };
    println!("kept {}, removed {}, real gaps {}", report.kept.len(), report.removed.len(), report.real_gaps.len());
    ctx.save("contract.json", "contract", &report)?;
    Ok(())
}

pub fn dataset_expand(ctx: &Ctx, bootstrap: Option<PathBuf>, target: Option<usize>) -> Result<()> {
    let params: Vec<PoseParams> = load(&ctx.or_out(bootstrap, "sequence_params.json"), "params_list")?;
    let w: Vec<Vec<f64>> = params.into_iter().map(|p| p.w).collect();
    let n = target.unwrap_or(ctx.config.curation.expand_target);
    let out = expand(&w, &ctx.config.jitter, n)?;
    println!("{} samples", out.len());
    ctx.save("expanded.json", "expanded", &out)?;
    Ok(())
}

struct SolveAssets {
    mesh: Mesh,
    rig: BlendshapeRig,
    camera: Camera,
    texture: Texture,
}

impl SolveAssets {
    fn load(ctx: &Ctx) -> Result<Self> {
        Ok(Self {
            mesh: ctx.mesh()?,
            rig: ctx.rig()?,
            camera: ctx.camera()?,
            texture: ctx.texture(TextureChoice::Segmented)?,
        })
    }

    fn setup(&self, ctx: &Ctx) -> RenderSetup<'_> {
        RenderSetup {
            mesh: &self.mesh,
            camera: &self.camera,
            rig: &self.rig,
            texture: &self.texture,
            options: ctx.config.render,
        }
    }
}

fn solve_previews(ctx: &Ctx, setup: &RenderSetup, target: &Image, result: &SolveResult, stem: &str) -> Result<()> {
    if !ctx.preview {
        return Ok(());
    }
    let render = rasterize(setup, &result.params).image;
    imageio::save_png(&render, &ctx.path(&format!("{stem}_render.png")))?;
    if let Some(labels) = &render.labels {
        let b = extract_region_boundaries(labels, render.width, render.height);
        let pts: Vec<(f64, f64)> = b.curves.iter().flat_map(|c| c.points.iter().map(|p| (p.x, p.y))).collect();
        imageio::save_png(&imageio::overlay_points(target, &pts, [1.0, 1.0, 1.0]), &ctx.path(&format!("{stem}_contours.png")))?;
    }
    imageio::save_png(&imageio::plot_trace(&result.loss_trace, 256, 128), &ctx.path(&format!("{stem}_loss.png")))
}

fn first_target(ctx: &Ctx) -> Result<PathBuf> {
    let dir = required(&ctx.config.paths.targets, "targets")?;
    Ok(imageio::list_images(dir)?.remove(0))
}

pub fn solve_frame(ctx: &Ctx, target: Option<PathBuf>, init: Option<PathBuf>) -> Result<()> {
    let target_path = match target {
        Some(p) => p,
        None => first_target(ctx)?,
    };
    let target = imageio::load(&target_path)?;
    let mut assets = SolveAssets::load(ctx)?;
    assets.camera = assets.camera.resized(target.width, target.height);
    let init = load_params(init, assets.rig.shape_count())?;
    let setup = assets.setup(ctx);
    let result = solver::solve_frame(&target, &setup, &init, &ctx.config.solve)?;
    println!(
        "pitch {:.3} yaw {:.3} loss {:.6} ({:?}, {} epochs)",
        result.params.pitch, result.params.yaw, result.loss, result.status, result.epochs
    );
    ctx.save("solve.json", "solve", &result)?;
    ctx.save("params.json", "params", &result.params)?;
    solve_previews(ctx, &setup, &target, &result, "solve")
}

#[derive(Serialize, Deserialize)]
struct FrameOutcome {
    file: String,
    result: Option<SolveResult>,
    error: Option<String>,
}

pub fn solve_sequence(ctx: &Ctx, targets: Option<PathBuf>) -> Result<()> {
    let dir = match targets {
        Some(d) => d,
        None => required(&ctx.config.paths.targets, "targets")?.to_path_buf(),
    };
    let files = imageio::list_images(&dir)?;
    let images: Vec<Image> = files.iter().map(|f| imageio::load(f)).collect::<Result<_>>()?;
    let mut assets = SolveAssets::load(ctx)?;
    assets.camera = assets.camera.resized(images[0].width, images[0].height);
    ensure!(images.iter().all(|i| i.same_size(&images[0])), "sequence frames differ in size");
    let setup = assets.setup(ctx);
    let init = PoseParams::neutral(assets.rig.shape_count());
    let results = solver::solve_sequence(&images, &setup, &init, &ctx.config.solve, ctx.config.sequence_mode);
    let mut params = Vec::new();
    let mut outcomes = Vec::new();
    for ((file, r), img) in files.iter().zip(results).zip(&images) {
        let name = imageio::stem(file);
        match r {
            Ok(res) => {
                println!("{name}: pitch {:.3} yaw {:.3} loss {:.6}", res.params.pitch, res.params.yaw, res.loss);
                solve_previews(ctx, &setup, img, &res, &name)?;
                params.push(res.params.clone());
                outcomes.push(FrameOutcome {
                    file: name,
                    result: Some(res),
                    error: None,
                });
            }
            Err(e) => {
                println!("{name}: failed: {e}");
                outcomes.push(FrameOutcome {
                    file: name,
                    result: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    ctx.save("sequence.json", "sequence", &outcomes)?;
    ctx.save("sequence_params.json", "params_list", &params)?;
    if params.len() < outcomes.len() {
        bail!("{} of {} frames failed", outcomes.len() - params.len(), outcomes.len());
    }
    Ok(())
}

pub fn blend(ctx: &Ctx, a: &Path, b: &Path) -> Result<()> {
    let a: Vec<PoseParams> = load(a, "params_list")?;
    let b: Vec<PoseParams> = load(b, "params_list")?;
    let out = blend_parameters(&a, &b, &ctx.config.blend_mask)?;
    ctx.save("blended.json", "params_list", &out)?;
    println!("{} frames", out.len());
    Ok(())
}

/// Training material as stored by `fixtures generate`.
#[derive(Serialize, Deserialize)]
struct RegressionSet {
    synthetic: Vec<TrainSample>,
    real: Vec<TrainSample>,
}

pub fn regress_train(ctx: &Ctx) -> Result<()> {
    let data: RegressionSet = load(required(&ctx.config.paths.regression_data, "regression_data")?, "regression_data")?;
    let rig = ctx.rig()?;
    let latent = data.synthetic.first().ok_or_else(|| anyhow!("no synthetic samples"))?.e.len();
    let mut arch = Architecture::new(latent, rig.jaw_controls.clone(), rig.non_jaw_controls());
    arch.hidden = ctx.config.regressor.hidden.clone();
    arch.landmark_hidden = ctx.config.regressor.landmark_hidden.clone();
    let hyper = &ctx.config.regressor.hyper;
    let mut bundle = RegressorBundle::new(arch, ctx.config.fixture.regression.pose, hyper.seed)?;
    let logs = vec![
        train_stage1(&mut bundle, &data.synthetic, hyper)?,
        train_stage2(&mut bundle, &data.synthetic, hyper)?,
        train_stage3(&mut bundle, &data.synthetic, &data.real, hyper)?,
    ];
    for log in &logs {
        println!("stage {}: final loss {:.6}", log.stage, log.epoch_loss.last().copied().unwrap_or(f64::NAN));
        if ctx.preview {
            imageio::save_png(&imageio::plot_trace(&log.epoch_loss, 256, 128), &ctx.path(&format!("train_stage{}.png", log.stage)))?;
        }
    }
    ctx.save("bundle.json", "bundle", &bundle)?;
    ctx.save("train_log.json", "train_log", &logs)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Inferred {
    file: String,
    params: PoseParams,
}

pub fn regress_infer(ctx: &Ctx, bundle: Option<PathBuf>, images: &Path) -> Result<()> {
    let bundle: RegressorBundle = load(&ctx.or_out(bundle, "bundle.json"), "bundle")?;
    let transfer: PcaTransfer = load(required(&ctx.config.paths.transfer, "transfer")?, "transfer")?;
    let out: Vec<Inferred> = imageio::list_images(images)?
        .par_iter()
        .map(|f| {
            let img = imageio::load(f)?;
            Ok(Inferred {
                file: imageio::stem(f),
                params: infer(&bundle, &img, &transfer)?,
            })
        })
        .collect::<Result<_>>()?;
    for r in &out {
        println!("{}: pitch {:.3} yaw {:.3}", r.file, r.params.pitch, r.params.yaw);
    }
    ctx.save("inferred.json", "inferred", &out)?;
    Ok(())
}

fn write_images(ctx: &Ctx, dir: &Path, frames: &[(String, Image)]) -> Result<()> {
    frames.par_iter().try_for_each(|(id, img)| ctx.write_image(img, dir, id))
}

pub fn fixtures_generate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config.fixture;
    let seed = ctx.config.seed;
    let head = HeadFixture::new(&cfg.head);
    let out = &ctx.out;

    let file = File::create(out.join("mesh.obj")).context("creating mesh.obj")?;
    write_obj(&head.mesh, BufWriter::new(file))?;
    ctx.save("rig.json", "rig", &head.rig)?;
    ctx.save("template.json", "template", &head.template)?;
    ctx.save("markers.json", "markers", &head.markers)?;
    ctx.save("parts.json", "parts", &head.part_spec())?;
    ctx.save("camera.json", "camera", &head.camera(256, 256))?;
    ctx.save("segmented_texture.json", "texture", &head.segmented_texture())?;
    imageio::save_pfm(&head.skin, &out.join("skin_texture.pfm"))?;

    // in-the-wild frames, rolled camera, exact landmarks
    let n = head.rig.shape_count();
    let camera = head.camera(cfg.wild_size, cfg.wild_size);
    let wild: Vec<(String, Image, LandmarkSet)> = (0..cfg.wild_frames)
        .into_par_iter()
        .map(|i| {
            let frame_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let params = random_params(n, 20.0, 60.0, frame_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed ^ 0x5bd1_e995);
            let (img, cam) = pseudo_real_frame(&head, &camera, &params, &PseudoRealConfig::default(), &mut rng);
            let id = format!("img{i:05}");
            let lm = head.landmarks(&params, &cam, &id)?;
            Ok((id, img, lm))
        })
        .collect::<Result<_>>()?;
    let dir = ctx.subdir("images")?;
    let frames: Vec<(String, Image)> = wild.iter().map(|(id, img, _)| (id.clone(), img.clone())).collect();
    write_images(ctx, &dir, &frames)?;
    let landmarks: Vec<LandmarkSet> = wild.into_iter().map(|(_, _, lm)| lm).collect();
    ctx.save("landmarks.json", "landmarks", &landmarks)?;

    // segmented solve targets
    let camera = head.camera(cfg.target_size, cfg.target_size);
    let truth: Vec<PoseParams> = (0..cfg.targets)
        .map(|i| random_params(n, cfg.target_pitch, cfg.target_yaw, seed.wrapping_add(1000 + i as u64)))
        .collect();
    let frames: Vec<(String, Image)> = truth
        .par_iter()
        .enumerate()
        .map(|(i, p)| (format!("frame_{i:03}"), segmented_frame(&head, &camera, p)))
        .collect();
    write_images(ctx, &ctx.subdir("targets")?, &frames)?;
    ctx.save("truth.json", "params_list", &truth)?;

    // regressor material and latent embeddings
    let data = regression_data(&head, &cfg.regression, seed)?;
    ctx.save("transfer.json", "transfer", &data.transfer)?;
    let embed = |prefix: &str, set: &[TrainSample]| -> Vec<Embedded> {
        set.iter()
            .enumerate()
            .map(|(i, s)| Embedded {
                source_id: format!("{prefix}{i:05}"),
                z: s.e.clone(),
            })
            .collect()
    };
    ctx.save("synthetic_embeddings.json", "embeddings", &embed("syn", &data.synthetic))?;
    ctx.save("real_embeddings.json", "embeddings", &embed("real", &data.real))?;
    let sequence: Vec<(String, Image)> = data
        .sequence_images
        .iter()
        .enumerate()
        .map(|(i, im)| (format!("seq_{i:03}"), im.clone()))
        .collect();
    write_images(ctx, &ctx.subdir("sequence")?, &sequence)?;
    let seq_truth: Vec<PoseParams> = data.sequence.iter().map(|(_, p)| p.clone()).collect();
    ctx.save("sequence_truth.json", "params_list", &seq_truth)?;
    ctx.save(
        "regression_data.json",
        "regression_data",
        &RegressionSet {
            synthetic: data.synthetic,
            real: data.real,
        },
    )?;

    let mut pipeline = ctx.config.clone();
    let p = &mut pipeline.paths;
    let rel = |s: &str| Some(PathBuf::from(s));
    p.mesh = rel("mesh.obj");
    p.rig = rel("rig.json");
    p.template = rel("template.json");
    p.markers = rel("markers.json");
    p.parts = rel("parts.json");
    p.camera = rel("camera.json");
    p.segmented_texture = rel("segmented_texture.json");
    p.skin_texture = rel("skin_texture.pfm");
    p.images = rel("images");
    p.landmarks = rel("landmarks.json");
    p.targets = rel("targets");
    p.truth = rel("truth.json");
    p.synthetic_embeddings = rel("synthetic_embeddings.json");
    p.real_embeddings = rel("real_embeddings.json");
    p.regression_data = rel("regression_data.json");
    p.transfer = rel("transfer.json");
    pipeline.sample.regions = head.regions.clone();
    std::fs::write(out.join("pipeline.json"), serde_json::to_string_pretty(&pipeline)?).context("writing pipeline.json")?;
    println!("{}", out.join("pipeline.json").display());
    Ok(())
}
