//! Embedding target images into per-part latents, and part edits on the
//! result.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{composite_on_tape, eval_parts, render_parts, CompositeRender, RenderMode};
use crate::error::{Error, Result};
use crate::fields::{sample_z, LatentW, PartGenerator};
use crate::image::{Image, Mask};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var, PAD};
use crate::pipeline::BlendNet;
use crate::renderer::{Camera, Jitter, RayBatch};

/// Extra differentiable image loss, e.g. a perceptual distance.
pub trait ImageLoss {
    /// `rendered` and `target` are `[H·W, 3]` for a `width`-wide image.
    fn loss(&self, tape: &mut Tape, rendered: Var, target: Var, width: usize) -> Result<Var>;
}

/// Squared distance between fixed random 3×3 convolution features.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    kernel: Tensor,
}

impl RandomConvFeatures {
    pub fn new<R: Rng + ?Sized>(features: usize, rng: &mut R) -> Self {
        Self {
            kernel: Tensor::uniform(&[27, features], (1.0f64 / 27.0).sqrt(), rng),
        }
    }

    fn index(width: usize, height: usize) -> Rc<[usize]> {
        let mut idx = Vec::with_capacity(width * height * 27);
        for y in 0..height as isize {
            for x in 0..width as isize {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < height as isize && xx < width as isize;
                        for c in 0..3 {
                            idx.push(if inside { (yy as usize * width + xx as usize) * 3 + c } else { PAD });
                        }
                    }
                }
            }
        }
        idx.into()
    }
}

impl ImageLoss for RandomConvFeatures {
    fn loss(&self, tape: &mut Tape, rendered: Var, target: Var, width: usize) -> Result<Var> {
        let px = tape.shape(rendered).0;
        if width == 0 || px % width != 0 || tape.shape(target) != (px, 3) {
            return Err(Error::shape("random_conv", "rendered and target must be matching [H·W, 3]"));
        }
        let idx = Self::index(width, px / width);
        let k = tape.constant(&self.kernel)?;
        let diff = tape.sub(rendered, target)?;
        let cols = tape.gather(diff, idx, px, 27)?;
        let feat = tape.matmul(cols, k)?;
        let sq = tape.square(feat)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 1.0 / (px * self.kernel.shape()[1]) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionWeights {
    /// Full composite L1.
    pub image: f64,
    /// Per-part masked L1.
    pub parts: f64,
    /// Pull towards the mean latent.
    pub prior: f64,
    /// Weight of the optional image-loss hook.
    #[serde(default)]
    pub hook: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            parts: 0.0,
            prior: 1e-4,
            hook: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: InversionWeights,
    pub samples_per_ray: usize,
    /// Apply the blend net to the optimized latents.
    pub use_blend: bool,
    /// Draws for the mean latent.
    pub mean_samples: usize,
    /// Consecutive loss increases before the step size is halved.
    pub patience: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.02,
            weights: InversionWeights::default(),
            samples_per_ray: 32,
            use_blend: true,
            mean_samples: 1000,
            patience: 5,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(self.lr > 0.0) || self.samples_per_ray < 2 || self.mean_samples == 0 || self.patience == 0 {
            return Err(Error::Config("inversion needs lr > 0, samples >= 2, mean_samples and patience > 0".into()));
        }
        if [w.image, w.parts, w.prior, w.hook].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("inversion weights must be nonnegative".into()));
        }
        Ok(())
    }
}

pub struct InversionProblem<'a> {
    pub target: Image,
    /// One per part, needed when the per-part term is weighted.
    pub masks: Option<Vec<Mask>>,
    pub camera: Camera,
    /// Starting latents; the mean latents otherwise.
    pub init: Option<Vec<LatentW>>,
    pub hook: Option<&'a dyn ImageLoss>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    /// Lowest-loss latents seen, before blending.
    pub latents: Vec<LatentW>,
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub lr_halvings: usize,
}

/// Empirical mean of `w` over `n` Gaussian draws.
pub fn mean_latent<R: Rng + ?Sized>(part: &PartGenerator, n: usize, rng: &mut R) -> Result<LatentW> {
    if n == 0 {
        return Err(Error::InvalidArgument("mean over zero samples".into()));
    }
    let d = part.latent_dim();
    let mut tape = Tape::new();
    let b = part.bind(&mut tape, false, false)?;
    let mut z = Vec::with_capacity(n * d);
    for _ in 0..n {
        z.extend(sample_z(rng, d)?.0);
    }
    let zv = tape.constant_raw(n, d, z)?;
    let w = part.map_on_tape(&mut tape, &b, zv)?;
    let mut mean = vec![0.0; d];
    for row in tape.value(w).chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    Ok(LatentW(mean.into_iter().map(|v| v / n as f64).collect()))
}

/// Applies `blend` when given.
pub fn effective_latents(blend: Option<&BlendNet>, ws: &[LatentW]) -> Result<Vec<LatentW>> {
    match blend {
        Some(bn) => bn.blend(ws),
        None => Ok(ws.to_vec()),
    }
}

/// Deterministic composite of `parts` at raw latents `ws`.
pub fn render_latents(parts: &[&PartGenerator], blend: Option<&BlendNet>, ws: &[LatentW], cam: &Camera, samples: usize, mode: RenderMode) -> Result<CompositeRender> {
    let eff = effective_latents(blend, ws)?;
    render_parts(parts, &eff, cam, samples, &mut Jitter::Centers, mode)
}

fn l1_mean(tape: &mut Tape, a: Var, b: Var, mask: Option<Var>) -> Result<Var> {
    let px = tape.shape(a).0;
    let d = tape.sub(a, b)?;
    let d = match mask {
        Some(m) => tape.mul_col(d, m)?,
        None => d,
    };
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / (3 * px) as f64)
}

/// Optimizes per-part `w` so the composite matches the target from the given
/// camera. Bin-center sampling keeps the objective deterministic.
pub fn invert<R: Rng + ?Sized>(
    problem: &InversionProblem<'_>,
    parts: &[&PartGenerator],
    blend: Option<&BlendNet>,
    cfg: &InversionConfig,
    rng: &mut R,
) -> Result<InversionResult> {
    cfg.validate()?;
    let cam = &problem.camera;
    let (w, h) = (problem.target.width, problem.target.height);
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no parts to invert into".into()));
    }
    if (cam.width, cam.height) != (w, h) {
        return Err(Error::shape("invert", format!("camera {}x{} vs target {w}x{h}", cam.width, cam.height)));
    }
    if problem.target.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("target pixels must lie in [0, 1]".into()));
    }
    let masks = match (&problem.masks, cfg.weights.parts > 0.0) {
        (Some(m), _) => {
            if m.len() != parts.len() || m.iter().any(|m| (m.width, m.height) != (w, h)) {
                return Err(Error::shape("invert", "need one mask per part at the target resolution"));
            }
            Some(m)
        }
        (None, true) => return Err(Error::InvalidArgument("per-part term needs masks".into())),
        (None, false) => None,
    };
    if cfg.weights.hook > 0.0 && problem.hook.is_none() {
        return Err(Error::InvalidArgument("hook weight set without an image loss".into()));
    }
    let blend = if cfg.use_blend { blend } else { None };
    if let Some(bn) = blend {
        if bn.parts() != parts.len() {
            return Err(Error::shape("invert", "blend net part count differs"));
        }
    }
    let means = parts.iter().map(|p| mean_latent(p, cfg.mean_samples, rng)).collect::<Result<Vec<_>>>()?;
    let mut ws: Vec<Tensor> = match &problem.init {
        Some(init) => {
            if init.len() != parts.len() || init.iter().zip(parts).any(|(l, p)| l.dim() != p.latent_dim()) {
                return Err(Error::shape("invert", "initial latents do not match parts"));
            }
            init.iter().map(|l| Tensor::vector(l.0.clone())).collect()
        }
        None => means.iter().map(|l| Tensor::vector(l.0.clone())).collect(),
    };
    let rays = RayBatch::from_camera(cam, None, cfg.samples_per_ray, &mut Jitter::Centers)?;
    let points = rays.points();
    let px = w * h;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &ws);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best = (f64::INFINITY, ws.clone());
    let mut rising = 0;
    let mut halvings = 0;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let bounds = parts.iter().map(|p| p.bind(&mut tape, false, false)).collect::<Result<Vec<_>>>()?;
        let wv = ws.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
        let eff = match blend {
            Some(bn) => {
                let b = bn.bind(&mut tape, false)?;
                bn.blend_on_tape(&mut tape, &b, &wv)?.0
            }
            None => wv.clone(),
        };
        let pts = tape.constant_raw(rays.num_points(), 3, points.clone())?;
        let evals = eval_parts(&mut tape, parts, &bounds, &eff, pts)?;
        let target = tape.constant_raw(px, 3, problem.target.data.clone())?;
        let comp = composite_on_tape(&mut tape, &evals, &rays, RenderMode::Composite)?;
        let mut total = l1_mean(&mut tape, comp.rgb, target, None)?;
        total = tape.scale(total, cfg.weights.image)?;
        if let Some(masks) = masks {
            let mut terms = Vec::with_capacity(parts.len());
            for (e, m) in evals.iter().zip(masks) {
                let alone = composite_on_tape(&mut tape, std::slice::from_ref(e), &rays, RenderMode::Composite)?;
                let mv = tape.constant_raw(px, 1, m.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect())?;
                terms.push(l1_mean(&mut tape, alone.rgb, target, Some(mv))?);
            }
            let s = tape.sum_canonical(&terms)?;
            let s = tape.scale(s, cfg.weights.parts)?;
            total = tape.add(total, s)?;
        }
        for (v, m) in wv.iter().zip(&means) {
            let mv = tape.constant_raw(1, m.dim(), m.0.clone())?;
            let d = tape.sub(*v, mv)?;
            let sq = tape.square(d)?;
            let s = tape.sum(sq)?;
            let s = tape.scale(s, cfg.weights.prior)?;
            total = tape.add(total, s)?;
        }
        if let (Some(hook), true) = (problem.hook, cfg.weights.hook > 0.0) {
            let l = hook.loss(&mut tape, comp.rgb, target, w)?;
            let l = tape.scale(l, cfg.weights.hook)?;
            total = tape.add(total, l)?;
        }
        let loss = tape.scalar(total);
        if loss < best.0 {
            best = (loss, ws.clone());
        }
        if let Some(prev) = losses.last() {
            if loss > *prev {
                rising += 1;
            } else {
                rising = 0;
            }
        }
        losses.push(loss);
        if step == cfg.steps {
            break;
        }
        if rising >= cfg.patience {
            adam.config.lr *= 0.5;
            halvings += 1;
            rising = 0;
        }
        let g = tape.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = wv.iter().map(|v| g.wrt(*v).map(<[f64]>::to_vec)).collect();
        adam.step(&mut ws, &grads).map_err(|e| match e {
            Error::NonFinite { op } => Error::Divergence {
                step,
                reason: format!("non-finite {op}"),
            },
            other => other,
        })?;
    }
    Ok(InversionResult {
        latents: best.1.into_iter().map(|t| LatentW(t.data().to_vec())).collect(),
        losses,
        best_loss: best.0,
        lr_halvings: halvings,
    })
}

/// Replaces one part's latent.
#[derive(Clone, Debug, PartialEq)]
pub struct EditOp {
    pub part: usize,
    pub replacement: LatentW,
}

/// Applies `op` and re-renders. Other parts keep their raw latents; the blend
/// net, when given, re-blends all of them.
pub fn edit(latents: &[LatentW], op: &EditOp, parts: &[&PartGenerator], blend: Option<&BlendNet>, cam: &Camera, samples: usize) -> Result<(Vec<LatentW>, CompositeRender)> {
    if op.part >= latents.len() || latents.len() != parts.len() {
        return Err(Error::InvalidArgument(format!("edit of part {} among {} parts", op.part, latents.len())));
    }
    if op.replacement.dim() != parts[op.part].latent_dim() {
        return Err(Error::shape("edit", "replacement latent has the wrong width"));
    }
    let mut out = latents.to_vec();
    out[op.part] = op.replacement.clone();
    let render = render_latents(parts, blend, &out, cam, samples, RenderMode::Composite)?;
    Ok((out, render))
}

/// Pixels where part `i` carries most of the weight and the pixel is opaque.
pub fn part_regions(render: &CompositeRender) -> Vec<Vec<bool>> {
    let p = render.part_weights.len();
    let n = render.residual.len();
    (0..p)
        .map(|i| {
            (0..n)
                .map(|px| {
                    render.alpha(px) > 0.5
                        && (0..p).all(|j| j == i || render.part_weights[j][px] < render.part_weights[i][px])
                })
                .collect()
        })
        .collect()
}

/// Mean absolute change inside and outside `region`.
pub fn change_inside_outside(before: &Image, after: &Image, region: &[bool]) -> (f64, f64) {
    let (mut inside, mut ni, mut outside, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (px, r) in region.iter().enumerate() {
        let a = before.pixel(px);
        let b = after.pixel(px);
        let d = (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
        if *r {
            inside += d;
            ni += 1;
        } else {
            outside += d;
            no += 1;
        }
    }
    (inside / ni.max(1) as f64, outside / no.max(1) as f64)
}

/// Serialized inversion or sampled scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentsFile {
    pub part_names: Vec<String>,
    pub ws: Vec<Vec<f64>>,
    pub camera: Camera,
    pub use_blend: bool,
    #[serde(default)]
    pub losses: Vec<f64>,
    pub config_hash: String,
}

impl LatentsFile {
    pub fn latents(&self) -> Vec<LatentW> {
        self.ws.iter().cloned().map(LatentW).collect()
    }
}
