//! Pinhole cameras, stratified ray sampling and discretized volume
//! integration, both as plain scalar code and as differentiable tape ops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{clamp_points, PartGenerator, RadianceField};
use crate::geom::{add, cross, mat_vec, normalize, scale, Mat3, Point3};
use crate::image::Image;
use crate::numerics::{Tape, Var};

pub type SeededRng = ChaCha8Rng;

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// Rays evaluated per tape when rendering whole images without gradients.
const RENDER_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Camera-to-world rigid transform, row-major. The camera looks down its
    /// local `-z` axis with `+y` up.
    pub pose: [[f64; 4]; 4],
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(pose: [[f64; 4]; 4], fov_y: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            pose,
            fov_y,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("fov {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(())
    }

    /// Camera on a sphere of `radius` looking at the origin. Azimuth turns
    /// about `+y`, elevation lifts toward `+y`.
    pub fn orbit(azimuth: f64, elevation: f64, lens: &Lens) -> Result<Self> {
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        let back = [sa * ce, se, ca * ce];
        let pos = scale(back, lens.radius);
        let right = normalize(cross([0.0, 1.0, 0.0], back));
        let up = cross(back, right);
        let mut pose = [[0.0; 4]; 4];
        for i in 0..3 {
            pose[i] = [right[i], up[i], back[i], pos[i]];
        }
        pose[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(pose, lens.fov_y, lens.resolution, lens.resolution, lens.near, lens.far)
    }

    pub fn rotation(&self) -> Mat3 {
        let p = &self.pose;
        [[p[0][0], p[0][1], p[0][2]], [p[1][0], p[1][1], p[1][2]], [p[2][0], p[2][1], p[2][2]]]
    }

    pub fn origin(&self) -> Point3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel `index` (row-major).
    pub fn ray(&self, index: usize) -> Ray {
        let (row, col) = (index / self.width, index % self.width);
        let tan_half = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = (2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0) * tan_half * aspect;
        let v = (1.0 - 2.0 * (row as f64 + 0.5) / self.height as f64) * tan_half;
        let dir = normalize(mat_vec(&self.rotation(), [u, v, -1.0]));
        Ray {
            origin: self.origin(),
            dir,
        }
    }
}

/// Intrinsics and orbit radius shared by every camera of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lens {
    pub radius: f64,
    pub fov_y: f64,
    pub near: f64,
    pub far: f64,
    pub resolution: usize,
}

impl Default for Lens {
    fn default() -> Self {
        Self {
            radius: 2.7,
            fov_y: 0.6,
            near: 1.7,
            far: 3.7,
            resolution: 32,
        }
    }
}

/// Training camera distribution: look-at origin, Gaussian azimuth and
/// elevation, fixed radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraDistribution {
    pub azimuth_std: f64,
    pub elevation_std: f64,
    pub lens: Lens,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            azimuth_std: 0.3,
            elevation_std: 0.15,
            lens: Lens::default(),
        }
    }
}

impl CameraDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(f64, f64, Camera)> {
        let az = gaussian(self.azimuth_std, rng)?;
        let el = gaussian(self.elevation_std, rng)?;
        Ok((az, el, Camera::orbit(az, el, &self.lens)?))
    }
}

fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Result<f64> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Point3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        add(self.origin, scale(self.dir, t))
    }
}

pub fn generate_rays(cam: &Camera) -> Vec<Ray> {
    (0..cam.pixel_count()).map(|i| cam.ray(i)).collect()
}

/// Where inside each depth bin a sample lands.
pub enum Jitter<'a> {
    Centers,
    Random(&'a mut SeededRng),
}

/// One sample per equal-width bin of `[near, far]`, strictly increasing.
pub fn stratified_sample(near: f64, far: f64, n: usize, jitter: &mut Jitter<'_>) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(near < far) {
        return Err(Error::InvalidArgument(format!("empty depth range [{near}, {far}]")));
    }
    let bin = (far - near) / n as f64;
    Ok((0..n)
        .map(|k| {
            let u = match jitter {
                Jitter::Centers => 0.5,
                Jitter::Random(rng) => rng.random::<f64>(),
            };
            near + (k as f64 + u) * bin
        })
        .collect())
}

/// Spacing to the next sample; the last sample extends to `far`.
pub fn sample_deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = depths.last() {
        d.push(far - last);
    }
    d
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamplePack {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Per part, per sample.
    pub part_sigmas: Vec<Vec<f64>>,
    pub part_colors: Vec<Vec<[f64; 3]>>,
    /// `T_k`, transmittance before sample `k`.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance past the last sample.
    pub residual: f64,
}

/// Discretized volume integral along one ray:
/// `C = Σ_k T_k (1 - exp(-σ_k δ_k)) c_k + T_N · background`, with
/// `T_{k+1} = T_k exp(-σ_k δ_k)`.
pub fn render_ray(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64], background: [f64; 3]) -> Result<([f64; 3], RaySamplePack)> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(Error::shape("render_ray", "sigma, color and delta lengths differ"));
    }
    if sigmas.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "render_ray" });
    }
    if sigmas.iter().any(|s| *s < 0.0) {
        return Err(Error::InvalidArgument("negative density".into()));
    }
    let n = sigmas.len();
    let mut pack = RaySamplePack {
        deltas: deltas.to_vec(),
        part_sigmas: vec![sigmas.to_vec()],
        part_colors: vec![colors.to_vec()],
        transmittance: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        ..Default::default()
    };
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    for k in 0..n {
        let x = sigmas[k] * deltas[k];
        let w = trans * -(-x).exp_m1();
        pack.transmittance.push(trans);
        pack.weights.push(w);
        for c in 0..3 {
            rgb[c] += w * colors[k][c];
        }
        trans *= (-x).exp();
    }
    pack.residual = trans;
    for c in 0..3 {
        rgb[c] += trans * background[c];
    }
    Ok((rgb, pack))
}

/// Rays with their shared sample depths, ready for batched field queries.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples_per_ray: usize,
    /// `[rays · samples]`
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub background: [f64; 3],
}

impl RayBatch {
    pub fn new(rays: Vec<Ray>, near: f64, far: f64, samples: usize, jitter: &mut Jitter<'_>) -> Result<Self> {
        let mut depths = Vec::with_capacity(rays.len() * samples);
        let mut deltas = Vec::with_capacity(rays.len() * samples);
        for _ in &rays {
            let t = stratified_sample(near, far, samples, jitter)?;
            deltas.extend(sample_deltas(&t, far));
            depths.extend(t);
        }
        Ok(Self {
            rays,
            samples_per_ray: samples,
            depths,
            deltas,
            background: WHITE,
        })
    }

    /// Rays for `pixels` of `cam` (all pixels when `None`).
    pub fn from_camera(cam: &Camera, pixels: Option<&[usize]>, samples: usize, jitter: &mut Jitter<'_>) -> Result<Self> {
        let rays = match pixels {
            Some(p) => p.iter().map(|i| cam.ray(*i)).collect(),
            None => generate_rays(cam),
        };
        Self::new(rays, cam.near, cam.far, samples, jitter)
    }

    pub fn concat(batches: Vec<RayBatch>) -> Result<Self> {
        let mut it = batches.into_iter();
        let mut out = it.next().ok_or_else(|| Error::InvalidArgument("no ray batches".into()))?;
        for b in it {
            if b.samples_per_ray != out.samples_per_ray {
                return Err(Error::shape("ray_batch", "sample counts differ"));
            }
            out.rays.extend(b.rays);
            out.depths.extend(b.depths);
            out.deltas.extend(b.deltas);
        }
        Ok(out)
    }

    pub fn num_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn num_points(&self) -> usize {
        self.depths.len()
    }

    pub fn raw_points(&self) -> Vec<Point3> {
        let n = self.samples_per_ray;
        self.depths
            .iter()
            .enumerate()
            .map(|(i, t)| self.rays[i / n].at(*t))
            .collect()
    }

    /// Sample positions clamped to the scene box, flattened `[points, 3]`.
    pub fn points(&self) -> Vec<f64> {
        clamp_points(&self.raw_points())
    }

    pub fn slice(&self, start: usize, end: usize) -> RayBatch {
        let n = self.samples_per_ray;
        RayBatch {
            rays: self.rays[start..end].to_vec(),
            samples_per_ray: n,
            depths: self.depths[start * n..end * n].to_vec(),
            deltas: self.deltas[start * n..end * n].to_vec(),
            background: self.background,
        }
    }
}

/// Tape outputs of [`integrate_on_tape`].
pub struct RenderedRays {
    /// `[rays, 3]`
    pub rgb: Var,
    /// `[rays, samples]`
    pub weights: Var,
    /// `[rays, 1]`
    pub residual: Var,
}

/// `T_k` as a `[rays · samples, 1]` column for a density column `sigma`.
pub fn transmittance_on_tape(tape: &mut Tape, sigma: Var, batch: &RayBatch) -> Result<Var> {
    let (r, n) = (batch.num_rays(), batch.samples_per_ray);
    let sd = optical_depths(tape, sigma, batch)?;
    let acc = tape.excl_cumsum(sd)?;
    let neg = tape.neg(acc)?;
    let t = tape.exp(neg)?;
    tape.reshape(t, r * n, 1)
}

fn optical_depths(tape: &mut Tape, sigma: Var, batch: &RayBatch) -> Result<Var> {
    let (r, n) = (batch.num_rays(), batch.samples_per_ray);
    if tape.shape(sigma) != (r * n, 1) {
        return Err(Error::shape("integrate", format!("density {:?} for {r}x{n} samples", tape.shape(sigma))));
    }
    let s = tape.reshape(sigma, r, n)?;
    let d = tape.constant_raw(r, n, batch.deltas.clone())?;
    tape.mul(s, d)
}

/// Differentiable counterpart of [`render_ray`] over a whole batch.
pub fn integrate_on_tape(tape: &mut Tape, sigma: Var, color: Var, batch: &RayBatch) -> Result<RenderedRays> {
    let (r, n) = (batch.num_rays(), batch.samples_per_ray);
    if tape.shape(color) != (r * n, 3) {
        return Err(Error::shape("integrate", format!("color {:?} for {r}x{n} samples", tape.shape(color))));
    }
    let sd = optical_depths(tape, sigma, batch)?;
    let acc = tape.excl_cumsum(sd)?;
    let neg = tape.neg(acc)?;
    let trans = tape.exp(neg)?;
    let neg_sd = tape.neg(sd)?;
    let keep = tape.exp(neg_sd)?;
    let one_minus = tape.scale(keep, -1.0)?;
    let alpha = tape.add_scalar(one_minus, 1.0)?;
    let weights = tape.mul(trans, alpha)?;
    let wcol = tape.reshape(weights, r * n, 1)?;
    let weighted = tape.mul_col(color, wcol)?;
    let fg = tape.group_rows_sum(weighted, n)?;
    let total = tape.row_sum(sd)?;
    let neg_total = tape.neg(total)?;
    let residual = tape.exp(neg_total)?;
    let bg = tape.constant_raw(r, 3, batch.background.iter().copied().cycle().take(r * 3).collect())?;
    let bg = tape.mul_col(bg, residual)?;
    let rgb = tape.add(fg, bg)?;
    Ok(RenderedRays { rgb, weights, residual })
}

/// Renders a scalar field with the plain scalar integrator.
pub fn render_field(field: &dyn RadianceField, cam: &Camera, samples: usize, jitter: &mut Jitter<'_>) -> Result<(Image, Vec<RaySamplePack>)> {
    let batch = RayBatch::from_camera(cam, None, samples, jitter)?;
    let queried = field.query(&batch.raw_points())?;
    let mut data = Vec::with_capacity(cam.pixel_count() * 3);
    let mut packs = Vec::with_capacity(cam.pixel_count());
    for r in 0..batch.num_rays() {
        let span = r * samples..(r + 1) * samples;
        let s: Vec<f64> = queried[span.clone()].iter().map(|q| q.sigma).collect();
        let c: Vec<[f64; 3]> = queried[span.clone()].iter().map(|q| q.color).collect();
        let (rgb, mut pack) = render_ray(&s, &c, &batch.deltas[span.clone()], batch.background)?;
        pack.depths = batch.depths[span].to_vec();
        data.extend(rgb);
        packs.push(pack);
    }
    Ok((Image::new(cam.width, cam.height, data)?, packs))
}

/// Renders one generator under latent `w`; differentiable route, evaluated
/// in chunks without gradients.
pub fn render_image(gen: &PartGenerator, w: &crate::fields::LatentW, cam: &Camera, samples: usize, jitter: &mut Jitter<'_>) -> Result<Image> {
    let batch = RayBatch::from_camera(cam, None, samples, jitter)?;
    let mut data = Vec::with_capacity(cam.pixel_count() * 3);
    for start in (0..batch.num_rays()).step_by(RENDER_CHUNK) {
        let chunk = batch.slice(start, (start + RENDER_CHUNK).min(batch.num_rays()));
        let mut tape = Tape::new();
        let bound = gen.bind(&mut tape, false, false)?;
        let wv = tape.constant_raw(1, w.dim(), w.0.clone())?;
        let pts = tape.constant_raw(chunk.num_points(), 3, chunk.points())?;
        let (s, c) = gen.field_on_tape(&mut tape, &bound, wv, pts)?;
        let out = integrate_on_tape(&mut tape, s, c, &chunk)?;
        data.extend_from_slice(tape.value(out.rgb));
    }
    Image::new(cam.width, cam.height, data)
}
