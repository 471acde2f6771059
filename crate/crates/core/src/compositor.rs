//! Merging several part fields into one volume: densities add, colors are
//! interpolated with normalized per-part coefficients `σ_i · T`.

use crate::error::{Error, Result};
use crate::fields::{LatentW, PartGenerator, RadianceField};
use crate::image::Image;
use crate::numerics::{Tape, Var};
use crate::renderer::{integrate_on_tape, render_ray, transmittance_on_tape, Camera, Jitter, RayBatch, RaySamplePack, RenderedRays};

/// Coefficient total below which the fallback color is used.
pub const COMP_EPS: f64 = 1e-8;
pub const FALLBACK_COLOR: [f64; 3] = [0.0, 0.0, 0.0];
const RENDER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Which composite to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Composite,
    /// Every part except this one is drawn white; densities are kept.
    Whiteout(usize),
}

impl RenderMode {
    fn check(self, parts: usize) -> Result<()> {
        match self {
            RenderMode::Whiteout(k) if k >= parts => Err(Error::InvalidArgument(format!("unknown part {k} of {parts}"))),
            _ if parts == 0 => Err(Error::InvalidArgument("no parts to composite".into())),
            _ => Ok(()),
        }
    }
}

/// Order-independent float sum.
pub fn canonical_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// The comp operator at one point.
pub fn comp(sigmas: &[f64], colors: &[[f64; 3]], coeffs: &[f64]) -> Result<CompositeSample> {
    if sigmas.is_empty() || sigmas.len() != colors.len() || sigmas.len() != coeffs.len() {
        return Err(Error::shape("comp", "need one color and coefficient per density"));
    }
    if sigmas.iter().chain(coeffs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "comp" });
    }
    if sigmas.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidArgument("negative density".into()));
    }
    let mut terms: Vec<(f64, [f64; 3])> = coeffs.iter().copied().zip(colors.iter().copied()).collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)));
    let total: f64 = terms.iter().map(|t| t.0).sum();
    let color = if total < COMP_EPS {
        FALLBACK_COLOR
    } else {
        anchored_mix(&terms, total)
    };
    Ok(CompositeSample {
        sigma: canonical_sum(sigmas),
        color,
    })
}

/// `Σ k_i c_i / total` written as `c_ref + Σ (k_i / total)(c_i − c_ref)`, so
/// identical colors come back bit-exact.
pub(crate) fn anchored_mix(terms: &[(f64, [f64; 3])], total: f64) -> [f64; 3] {
    let anchor = terms[terms.len() - 1].1;
    let mut c = anchor;
    for (k, col) in terms {
        let share = k / total;
        for ch in 0..3 {
            c[ch] += share * (col[ch] - anchor[ch]);
        }
    }
    c
}

/// Composites one ray from per-part samples on shared depths. The returned
/// pack carries per-part densities and colors as seen by the composite (white
/// for non-kept parts under white-out).
pub fn composite_ray(
    part_sigmas: &[Vec<f64>],
    part_colors: &[Vec<[f64; 3]>],
    deltas: &[f64],
    mode: RenderMode,
    background: [f64; 3],
) -> Result<([f64; 3], RaySamplePack)> {
    mode.check(part_sigmas.len())?;
    let n = deltas.len();
    if part_sigmas.len() != part_colors.len()
        || part_sigmas.iter().any(|s| s.len() != n)
        || part_colors.iter().any(|c| c.len() != n)
    {
        return Err(Error::shape("composite_ray", "per-part sample counts differ"));
    }
    let colors: Vec<Vec<[f64; 3]>> = match mode {
        RenderMode::Composite => part_colors.to_vec(),
        RenderMode::Whiteout(keep) => part_colors
            .iter()
            .enumerate()
            .map(|(i, c)| if i == keep { c.clone() } else { vec![crate::renderer::WHITE; n] })
            .collect(),
    };
    if part_sigmas.len() == 1 {
        let (rgb, mut pack) = render_ray(&part_sigmas[0], &colors[0], deltas, background)?;
        pack.part_colors = colors;
        return Ok((rgb, pack));
    }
    let mut sig = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(n);
    let mut trans = 1.0;
    let mut s_k = Vec::with_capacity(part_sigmas.len());
    let mut c_k = Vec::with_capacity(part_sigmas.len());
    for k in 0..n {
        s_k.clear();
        c_k.clear();
        for (s, c) in part_sigmas.iter().zip(&colors) {
            s_k.push(s[k]);
            c_k.push(c[k]);
        }
        let coeffs: Vec<f64> = s_k.iter().map(|s| s * trans).collect();
        let cs = comp(&s_k, &c_k, &coeffs)?;
        trans *= (-cs.sigma * deltas[k]).exp();
        sig.push(cs.sigma);
        col.push(cs.color);
    }
    let (rgb, mut pack) = render_ray(&sig, &col, deltas, background)?;
    pack.part_sigmas = part_sigmas.to_vec();
    pack.part_colors = colors;
    Ok((rgb, pack))
}

/// Accumulated weight of each part along a ray: the composite weight split by
/// density share.
pub fn part_weight_sums(pack: &RaySamplePack) -> Vec<f64> {
    let p = pack.part_sigmas.len();
    let mut out = vec![0.0; p];
    for (k, w) in pack.weights.iter().enumerate() {
        let total = canonical_sum(&pack.part_sigmas.iter().map(|s| s[k]).collect::<Vec<_>>());
        if total > 0.0 {
            for i in 0..p {
                out[i] += w * pack.part_sigmas[i][k] / total;
            }
        }
    }
    out
}

/// Scalar composite render of arbitrary fields.
pub fn render_fields(
    parts: &[&dyn RadianceField],
    cam: &Camera,
    samples: usize,
    jitter: &mut Jitter<'_>,
    mode: RenderMode,
) -> Result<(Image, Vec<RaySamplePack>)> {
    mode.check(parts.len())?;
    let batch = RayBatch::from_camera(cam, None, samples, jitter)?;
    let points = batch.raw_points();
    let queried = parts.iter().map(|f| f.query(&points)).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(cam.pixel_count() * 3);
    let mut packs = Vec::with_capacity(cam.pixel_count());
    for r in 0..batch.num_rays() {
        let span = r * samples..(r + 1) * samples;
        let s: Vec<Vec<f64>> = queried.iter().map(|q| q[span.clone()].iter().map(|f| f.sigma).collect()).collect();
        let c: Vec<Vec<[f64; 3]>> = queried.iter().map(|q| q[span.clone()].iter().map(|f| f.color).collect()).collect();
        let (rgb, mut pack) = composite_ray(&s, &c, &batch.deltas[span.clone()], mode, batch.background)?;
        pack.depths = batch.depths[span].to_vec();
        data.extend(rgb);
        packs.push(pack);
    }
    Ok((Image::new(cam.width, cam.height, data)?, packs))
}

/// One part's field evaluated on the shared samples of a batch.
#[derive(Clone, Copy, Debug)]
pub struct PartEval {
    /// `[points, 1]`
    pub sigma: Var,
    /// `[points, 3]`
    pub color: Var,
}

/// Differentiable composite of already evaluated parts.
pub fn composite_on_tape(tape: &mut Tape, parts: &[PartEval], batch: &RayBatch, mode: RenderMode) -> Result<RenderedRays> {
    mode.check(parts.len())?;
    let sigmas: Vec<Var> = parts.iter().map(|p| p.sigma).collect();
    let mut colors: Vec<Var> = parts.iter().map(|p| p.color).collect();
    if let RenderMode::Whiteout(keep) = mode {
        let m = batch.num_points();
        let white = tape.constant_raw(m, 3, vec![1.0; m * 3])?;
        for (i, c) in colors.iter_mut().enumerate() {
            if i != keep {
                *c = white;
            }
        }
    }
    if parts.len() == 1 {
        return integrate_on_tape(tape, sigmas[0], colors[0], batch);
    }
    let total = tape.sum_canonical(&sigmas)?;
    let trans = transmittance_on_tape(tape, total, batch)?;
    let color = tape.comp_color(&sigmas, &colors, trans, COMP_EPS, FALLBACK_COLOR)?;
    integrate_on_tape(tape, total, color, batch)
}

/// Evaluates each generator under its latent at the batch samples.
pub fn eval_parts(
    tape: &mut Tape,
    gens: &[&PartGenerator],
    bound: &[crate::fields::BoundGenerator],
    ws: &[Var],
    points: Var,
) -> Result<Vec<PartEval>> {
    if gens.len() != bound.len() || gens.len() != ws.len() {
        return Err(Error::shape("eval_parts", "need one binding and latent per part"));
    }
    gens.iter()
        .zip(bound)
        .zip(ws)
        .map(|((g, b), w)| {
            let (sigma, color) = g.field_on_tape(tape, b, *w, points)?;
            Ok(PartEval { sigma, color })
        })
        .collect()
}

/// Full-image composite render with per-pixel diagnostics.
#[derive(Clone, Debug)]
pub struct CompositeRender {
    pub image: Image,
    /// Per part, per pixel accumulated weight.
    pub part_weights: Vec<Vec<f64>>,
    /// Per pixel residual transmittance.
    pub residual: Vec<f64>,
}

impl CompositeRender {
    /// Pixel opacity `1 - T_N`.
    pub fn alpha(&self, pixel: usize) -> f64 {
        1.0 - self.residual[pixel]
    }
}

/// Renders generators under latents `ws` without gradients, in chunks.
pub fn render_parts(
    gens: &[&PartGenerator],
    ws: &[LatentW],
    cam: &Camera,
    samples: usize,
    jitter: &mut Jitter<'_>,
    mode: RenderMode,
) -> Result<CompositeRender> {
    mode.check(gens.len())?;
    if gens.len() != ws.len() {
        return Err(Error::shape("render_parts", "need one latent per part"));
    }
    let batch = RayBatch::from_camera(cam, None, samples, jitter)?;
    let p = gens.len();
    let mut data = Vec::with_capacity(cam.pixel_count() * 3);
    let mut part_weights = vec![Vec::with_capacity(cam.pixel_count()); p];
    let mut residual = Vec::with_capacity(cam.pixel_count());
    for start in (0..batch.num_rays()).step_by(RENDER_CHUNK) {
        let chunk = batch.slice(start, (start + RENDER_CHUNK).min(batch.num_rays()));
        let mut tape = Tape::new();
        let bound = gens.iter().map(|g| g.bind(&mut tape, false, false)).collect::<Result<Vec<_>>>()?;
        let wv = ws
            .iter()
            .map(|w| tape.constant_raw(1, w.dim(), w.0.clone()))
            .collect::<Result<Vec<_>>>()?;
        let pts = tape.constant_raw(chunk.num_points(), 3, chunk.points())?;
        let evals = eval_parts(&mut tape, gens, &bound, &wv, pts)?;
        let out = composite_on_tape(&mut tape, &evals, &chunk, mode)?;
        data.extend_from_slice(tape.value(out.rgb));
        residual.extend_from_slice(tape.value(out.residual));
        let weights = tape.value(out.weights);
        let sig: Vec<&[f64]> = evals.iter().map(|e| tape.value(e.sigma)).collect();
        for r in 0..chunk.num_rays() {
            let mut acc = vec![0.0; p];
            for k in 0..samples {
                let j = r * samples + k;
                let total = canonical_sum(&sig.iter().map(|s| s[j]).collect::<Vec<_>>());
                if total > 0.0 {
                    for i in 0..p {
                        acc[i] += weights[j] * sig[i][j] / total;
                    }
                }
            }
            for i in 0..p {
                part_weights[i].push(acc[i]);
            }
        }
    }
    Ok(CompositeRender {
        image: Image::new(cam.width, cam.height, data)?,
        part_weights,
        residual,
    })
}
