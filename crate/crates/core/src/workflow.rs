//! Stage-by-stage operations on a working directory. Each command of the
//! binary maps onto one method here.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::compositor::{CompositeRender, RenderMode};
use crate::config::RunConfig;
use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::fields::{sample_z, LatentW, PartGenerator};
use crate::image::{Image, Mask};
use crate::inversion::{edit, invert, render_latents, EditOp, InversionProblem, LatentsFile};
use crate::io::write_atomic;
use crate::numerics::Checkpoint;
use crate::pipeline::{
    critic_gap, distill_dataset, part_iou, sample_part_latents, train_blend, train_global, train_independent_baseline, train_parts,
    white_fraction, BlendNet, CriticGap, ModelDir,
};
use crate::renderer::{Camera, SeededRng};
use crate::scenes::{generate_records, write_records, ColorSegmenter, Dataset, DatasetManifest, GroundTruthRecord};

/// Azimuth and elevation in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub azimuth: f64,
    pub elevation: f64,
}

impl std::str::FromStr for Pose {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, e) = s.split_once(',').ok_or_else(|| format!("expected AZ,EL, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Pose {
            azimuth: parse(a)?,
            elevation: parse(e)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Decoupled parts plus blend net.
    Parts,
    /// Independently trained per-part generators.
    Baseline,
}

/// Loaded part generators and, when trained, the blend net.
#[derive(Clone, Debug)]
pub struct Model {
    pub parts: Vec<PartGenerator>,
    pub blend: Option<BlendNet>,
}

impl Model {
    pub fn refs(&self) -> Vec<&PartGenerator> {
        self.parts.iter().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name().to_string()).collect()
    }

    pub fn part_index(&self, name: &str) -> Result<usize> {
        if let Some(i) = self.parts.iter().position(|p| p.name() == name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < self.parts.len() => Ok(i),
            _ => Err(Error::InvalidArgument(format!("unknown part {name:?}; have {:?}", self.names()))),
        }
    }

    pub fn blend_for(&self, use_blend: bool) -> Option<&BlendNet> {
        if use_blend {
            self.blend.as_ref()
        } else {
            None
        }
    }

    pub fn render(&self, ws: &[LatentW], cam: &Camera, samples: usize, use_blend: bool, mode: RenderMode) -> Result<CompositeRender> {
        render_latents(&self.refs(), self.blend_for(use_blend), ws, cam, samples, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeskReport {
    pub heldout_iou: f64,
    pub critic_gap: CriticGap,
    pub white_baseline: f64,
    pub white_tied: f64,
    pub mean_d_norm: f64,
    pub mean_w_norm: f64,
}

pub struct Workspace {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub hash: String,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { root: root.into(), cfg, hash })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn models(&self) -> ModelDir {
        ModelDir::new(self.path(&self.cfg.paths.models))
    }

    pub fn baseline(&self) -> ModelDir {
        ModelDir::new(self.path(&self.cfg.paths.baseline))
    }

    fn ensure_dir(dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    pub fn png_bytes(&self, image: &Image) -> Vec<u8> {
        image.to_png_bytes_with_text(&[("config_hash", &self.hash)])
    }

    pub fn write_png(&self, path: &Path, image: &Image) -> Result<()> {
        write_atomic(path, &self.png_bytes(image))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(value).expect("value serializes"))
    }

    pub fn gen_data(&self) -> Result<DatasetManifest> {
        let c = &self.cfg;
        let recs = generate_records(&c.scene, &c.train.cameras, c.data.records, c.data.samples, c.train.seed)?;
        write_records(&self.path(&c.paths.data), &c.scene.names(), &recs, c.train.seed, &c.scene.hash(), Some(self.hash.clone()))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        Dataset::load(&self.path(&self.cfg.paths.data))
    }

    fn save_model_config(&self, dir: &ModelDir) -> Result<()> {
        Self::ensure_dir(&dir.root)?;
        dir.write_config(&self.cfg.train)?;
        write_atomic(&dir.root.join("run.toml"), self.cfg.to_toml().as_bytes())
    }

    pub fn train_global(&self) -> Result<()> {
        let data = self.load_data()?;
        let md = self.models();
        self.save_model_config(&md)?;
        let out = train_global(&data.records, &self.cfg.train, Some(&md.root))?;
        md.save_generator(&md.global(), &out.generator, &self.hash)?;
        md.save_critic(&md.critic(), &out.critic, &self.hash)?;
        md.write_log("global_log.csv", &out.log)
    }

    pub fn load_global(&self) -> Result<PartGenerator> {
        PartGenerator::load(&self.models().global())
    }

    /// Renders records from the global model and labels them with a color
    /// segmenter fitted on the ground-truth data.
    pub fn distill(&self) -> Result<DatasetManifest> {
        let data = self.load_data()?;
        let global = self.load_global()?;
        let names = data.manifest.parts.clone();
        let seg = ColorSegmenter::fit(&names, &data.records)?;
        self.write_json(&self.models().root.join("segmenter.json"), &seg)?;
        let mut rng = SeededRng::seed_from_u64(self.cfg.train.seed ^ 0xD1);
        let n = self.cfg.distill.records + self.cfg.distill.heldout;
        let recs = distill_dataset(&global, &seg, n, &self.cfg.train.cameras, self.cfg.distill.samples, &mut rng)?;
        write_records(&self.path(&self.cfg.paths.distilled), &names, &recs, self.cfg.train.seed, &data.manifest.spec_hash, Some(self.hash.clone()))
    }

    /// Training and held-out distilled records.
    pub fn load_distilled(&self) -> Result<(Vec<GroundTruthRecord>, Vec<GroundTruthRecord>, Vec<String>)> {
        let ds = Dataset::load(&self.path(&self.cfg.paths.distilled))?;
        let mut recs = ds.records;
        let k = self.cfg.distill.records.min(recs.len());
        let held = recs.split_off(k);
        Ok((recs, held, ds.manifest.parts))
    }

    pub fn train_parts(&self) -> Result<()> {
        let (train, _, names) = self.load_distilled()?;
        let global = self.load_global()?;
        let md = self.models();
        let out = train_parts(&global, &names, &train, &self.cfg.train, Some(&md.root))?;
        md.save_parts(&out.parts, &self.hash)?;
        md.write_log("parts_log.csv", &out.log)
    }

    pub fn train_blend(&self) -> Result<()> {
        let md = self.models();
        let parts = md.load_parts()?;
        let data = self.load_data()?;
        let warm = if self.cfg.train.blend.warm_start_critic {
            Some(Critic::load(&md.critic())?)
        } else {
            None
        };
        let out = train_blend(&parts, &data.records, &self.cfg.train, warm.as_ref(), Some(&md.root))?;
        md.save_blend(&out.blend, &self.hash)?;
        md.save_critic(&md.root.join("critic_blend.ckpt"), &out.critic, &self.hash)?;
        md.write_log("blend_log.csv", &out.log)
    }

    pub fn train_baseline(&self) -> Result<()> {
        let data = self.load_data()?;
        let md = self.baseline();
        self.save_model_config(&md)?;
        let out = train_independent_baseline(&data.records, &data.manifest.parts, &self.cfg.train, Some(&md.root))?;
        let gens: Vec<PartGenerator> = out.iter().map(|r| r.generator.clone()).collect();
        md.save_parts(&gens, &self.hash)?;
        for r in &out {
            md.write_log(&format!("{}_log.csv", r.generator.name()), &r.log)?;
        }
        Ok(())
    }

    pub fn load_model(&self, kind: ModelKind) -> Result<Model> {
        match kind {
            ModelKind::Parts => {
                let md = self.models();
                let parts = md.load_parts()?;
                let blend = if md.blend().exists() { Some(md.load_blend()?) } else { None };
                Ok(Model { parts, blend })
            }
            ModelKind::Baseline => Ok(Model {
                parts: self.baseline().load_parts()?,
                blend: None,
            }),
        }
    }

    pub fn camera(&self, pose: Pose) -> Result<Camera> {
        Camera::orbit(pose.azimuth, pose.elevation, &self.cfg.train.cameras.lens)
    }

    pub fn latents_file(&self, model: &Model, ws: &[LatentW], camera: Camera, use_blend: bool, losses: Vec<f64>) -> LatentsFile {
        LatentsFile {
            part_names: model.names(),
            ws: ws.iter().map(|w| w.0.clone()).collect(),
            camera,
            use_blend: use_blend && model.blend.is_some(),
            losses,
            config_hash: self.hash.clone(),
        }
    }

    pub fn sample(&self, model: &Model, tied: bool, seed: u64, pose: Pose, use_blend: bool) -> Result<(LatentsFile, Image)> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let ws = sample_part_latents(&model.refs(), tied, &mut rng)?;
        let cam = self.camera(pose)?;
        let img = model.render(&ws, &cam, self.cfg.render.samples, use_blend, RenderMode::Composite)?.image;
        Ok((self.latents_file(model, &ws, cam, use_blend, vec![]), img))
    }

    pub fn render_file(&self, model: &Model, file: &LatentsFile, camera: Option<&Camera>, mode: RenderMode) -> Result<CompositeRender> {
        self.check_names(model, file)?;
        model.render(&file.latents(), camera.unwrap_or(&file.camera), self.cfg.render.samples, file.use_blend, mode)
    }

    fn check_names(&self, model: &Model, file: &LatentsFile) -> Result<()> {
        if file.part_names != model.names() {
            return Err(Error::InvalidArgument(format!("latents are for parts {:?}, model has {:?}", file.part_names, model.names())));
        }
        Ok(())
    }

    pub fn invert(&self, model: &Model, target: &Image, masks: Option<Vec<Mask>>, camera: Camera, use_blend: bool, seed: u64) -> Result<LatentsFile> {
        let mut cfg = self.cfg.inversion.clone();
        cfg.use_blend = use_blend && model.blend.is_some();
        if masks.is_none() && cfg.weights.parts > 0.0 {
            log::warn!("no masks given; dropping the per-part term");
            cfg.weights.parts = 0.0;
        }
        let problem = InversionProblem {
            target: target.clone(),
            masks,
            camera: camera.clone(),
            init: None,
            hook: None,
        };
        let res = invert(&problem, &model.refs(), model.blend.as_ref(), &cfg, &mut SeededRng::seed_from_u64(seed))?;
        Ok(self.latents_file(model, &res.latents, camera, cfg.use_blend, res.losses))
    }

    /// Replaces one part's latent with `source`'s or with a fresh sample.
    pub fn edit(&self, model: &Model, file: &LatentsFile, part: usize, source: EditSource<'_>) -> Result<(LatentsFile, Image)> {
        self.check_names(model, file)?;
        let replacement = match source {
            EditSource::Latents(other) => {
                self.check_names(model, other)?;
                LatentW(other.ws[part].clone())
            }
            EditSource::Seed(seed) => {
                let p = model.parts.get(part).ok_or_else(|| Error::InvalidArgument(format!("no part {part}")))?;
                p.map_latent(&sample_z(&mut SeededRng::seed_from_u64(seed), p.latent_dim())?)?
            }
        };
        let op = EditOp { part, replacement };
        let (ws, render) = edit(&file.latents(), &op, &model.refs(), model.blend_for(file.use_blend), &file.camera, self.cfg.render.samples)?;
        let mut out = self.latents_file(model, &ws, file.camera.clone(), file.use_blend, vec![]);
        out.use_blend = file.use_blend;
        Ok((out, render.image))
    }

    /// Azimuth sweep over `[-span, span]` around the file's pose.
    pub fn turntable(&self, model: &Model, file: &LatentsFile, frames: usize, span: f64) -> Result<Vec<Image>> {
        if frames == 0 {
            return Err(Error::InvalidArgument("turntable needs at least one frame".into()));
        }
        let lens = &self.cfg.train.cameras.lens;
        (0..frames)
            .map(|f| {
                let t = if frames == 1 { 0.5 } else { f as f64 / (frames - 1) as f64 };
                let cam = Camera::orbit(span * (2.0 * t - 1.0), 0.0, lens)?.with_resolution(file.camera.width, file.camera.height);
                Ok(self.render_file(model, file, Some(&cam), RenderMode::Composite)?.image)
            })
            .collect()
    }

    pub fn eval_part_iou(&self) -> Result<f64> {
        let (_, held, _) = self.load_distilled()?;
        let parts = self.models().load_parts()?;
        let ious = part_iou(&parts, &held, self.cfg.distill.samples)?;
        Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
    }

    pub fn eval_critic_gap(&self) -> Result<CriticGap> {
        let md = self.models();
        let critic = Critic::load(&md.root.join("critic_blend.ckpt"))?;
        let parts = md.load_parts()?;
        critic_gap(&critic, &parts, &md.load_blend()?, self.cfg.eval.critic_samples, &self.cfg.train, self.cfg.train.seed ^ 0xE1)
    }

    /// Mean white fraction of baseline (independent latents) and decoupled
    /// (tied latents, no blending) composites.
    pub fn eval_whiteness(&self) -> Result<(f64, f64)> {
        let base = self.load_model(ModelKind::Baseline)?;
        let tied = self.load_model(ModelKind::Parts)?;
        let n = self.cfg.eval.white_samples;
        let stat = |m: &Model, tie: bool| -> Result<f64> {
            let mut rng = SeededRng::seed_from_u64(self.cfg.train.seed ^ 0xE2);
            let mut total = 0.0;
            for _ in 0..n {
                let ws = sample_part_latents(&m.refs(), tie, &mut rng)?;
                let cam = self.cfg.train.cameras.sample(&mut rng)?.2;
                total += white_fraction(&m.render(&ws, &cam, self.cfg.render.samples, false, RenderMode::Composite)?);
            }
            Ok(total / n.max(1) as f64)
        };
        Ok((stat(&base, false)?, stat(&tied, true)?))
    }

    /// All stages in order, then the evaluation statistics.
    pub fn run_all(&self) -> Result<DeskReport> {
        self.gen_data()?;
        self.train_global()?;
        self.distill()?;
        self.train_parts()?;
        self.train_blend()?;
        self.train_baseline()?;
        self.report()
    }

    pub fn report(&self) -> Result<DeskReport> {
        let gap = self.eval_critic_gap()?;
        let (white_baseline, white_tied) = self.eval_whiteness()?;
        let log = std::fs::read(self.models().root.join("blend_log.csv")).map_err(|e| Error::io(self.models().root.join("blend_log.csv"), e))?;
        let (mean_d_norm, mean_w_norm) = last_norms(&log);
        Ok(DeskReport {
            heldout_iou: self.eval_part_iou()?,
            critic_gap: gap,
            white_baseline,
            white_tied,
            mean_d_norm,
            mean_w_norm,
        })
    }
}

/// Mean offset and latent norms over the last 20 blend steps.
fn last_norms(csv_bytes: &[u8]) -> (f64, f64) {
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    let headers = rdr.headers().cloned().unwrap_or_default();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(d), Some(w)) = (col("mean_d_norm"), col("mean_w_norm")) else {
        return (f64::NAN, f64::NAN);
    };
    let rows: Vec<(f64, f64)> = rdr
        .records()
        .filter_map(|r| r.ok())
        .filter_map(|r| Some((r.get(d)?.parse().ok()?, r.get(w)?.parse().ok()?)))
        .collect();
    let tail = &rows[rows.len().saturating_sub(20)..];
    let n = tail.len().max(1) as f64;
    (tail.iter().map(|r| r.0).sum::<f64>() / n, tail.iter().map(|r| r.1).sum::<f64>() / n)
}

pub enum EditSource<'a> {
    Latents(&'a LatentsFile),
    Seed(u64),
}

/// Reads a checkpoint's stored config hash.
pub fn checkpoint_config_hash(path: &Path) -> Result<Option<String>> {
    Ok(Checkpoint::load(path)?.meta.get("config_hash").cloned())
}

pub fn read_latents(path: &Path) -> Result<LatentsFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
