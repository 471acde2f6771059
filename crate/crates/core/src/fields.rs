//! Per-part generator networks: a rectifier mapping network `z -> w` and a
//! sinusoidal backbone whose layers are FiLM-modulated by `w` and fed the
//! query point through a linear embedding.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{clamp_to_box, Point3};
use crate::io::sha256_hex;
use crate::numerics::{Checkpoint, Tape, Tensor, Var};

/// Half-extent of the scene bounding box `[-1, 1]^3`.
pub const SCENE_HALF_EXTENT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorArch {
    /// Dimension of both `z` and `w`.
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub width: usize,
    pub backbone_layers: usize,
    pub omega_first: f64,
    pub omega_hidden: f64,
    /// Initial bias of the density head. Negative values start the field
    /// nearly empty.
    #[serde(default)]
    pub density_bias: f64,
    /// Adds `-k (|x|² - r²)` to the density pre-activation, `[k, r]`. Zero
    /// `k` disables it.
    #[serde(default)]
    pub density_prior: [f64; 2],
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            mapping_layers: 3,
            width: 64,
            backbone_layers: 4,
            omega_first: 30.0,
            omega_hidden: 1.0,
            density_bias: -2.0,
            density_prior: [0.0, 0.6],
        }
    }
}

impl GeneratorArch {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("arch serializes"))
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.mapping_layers == 0 || self.width == 0 || self.backbone_layers == 0 || !self.density_bias.is_finite()
            || self.density_prior.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(format!("degenerate generator architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct LatentW(pub Vec<f64>);

impl LatentZ {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl LatentW {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Scalar field interface shared by generators and analytic primitives.
pub trait RadianceField {
    fn query(&self, points: &[Point3]) -> Result<Vec<FieldSample>>;
}

/// i.i.d. standard-normal latent of dimension `dim`.
pub fn sample_z<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<LatentZ> {
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dimension must be positive".into()));
    }
    Ok(LatentZ((0..dim).map(|_| StandardNormal.sample(rng)).collect()))
}

/// Tape handles for one generator's parameters.
pub struct BoundGenerator {
    pub mapping: Vec<Var>,
    pub backbone: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartGenerator {
    name: String,
    arch: GeneratorArch,
    mapping: Vec<Tensor>,
    backbone: Vec<Tensor>,
    mapping_frozen: bool,
}

const PER_LAYER: usize = 6;

/// Negative slope of the mapping network's rectifiers. A plain ReLU lets a
/// small latent dimension zero every unit and collapse distinct `z`.
const MAPPING_SLOPE: f64 = 0.2;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

impl PartGenerator {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let dz = arch.latent_dim;
        let d = arch.width;
        let mut mapping = Vec::with_capacity(2 * arch.mapping_layers);
        for _ in 0..arch.mapping_layers {
            mapping.push(Tensor::uniform(&[dz, dz], (6.0 / dz as f64).sqrt(), rng));
            mapping.push(Tensor::zeros(&[dz]));
        }
        let mut backbone = Vec::with_capacity(PER_LAYER * arch.backbone_layers + 4);
        for l in 0..arch.backbone_layers {
            let (fan_in, bound) = if l == 0 {
                (3, 1.0 / 3.0)
            } else {
                (d, (6.0 / d as f64).sqrt() / arch.omega_hidden)
            };
            backbone.push(Tensor::uniform(&[fan_in, d], bound, rng));
            backbone.push(Tensor::uniform(&[d], if l == 0 { bound } else { 1.0 / (d as f64).sqrt() }, rng));
            // FiLM heads: gamma = 1 + w Gw + gb, beta = w Bw + bb
            backbone.push(Tensor::uniform(&[dz, d], 0.25 / (dz as f64).sqrt(), rng));
            backbone.push(Tensor::zeros(&[d]));
            backbone.push(Tensor::uniform(&[dz, d], 1.0 / (dz as f64).sqrt(), rng));
            backbone.push(Tensor::zeros(&[d]));
        }
        let head = 0.5 * (6.0 / d as f64).sqrt();
        backbone.push(Tensor::uniform(&[d, 1], head, rng));
        backbone.push(Tensor::vector(vec![arch.density_bias]));
        backbone.push(Tensor::uniform(&[d, 3], head, rng));
        backbone.push(Tensor::zeros(&[3]));
        Ok(Self {
            name: name.into(),
            arch,
            mapping,
            backbone,
            mapping_frozen: false,
        })
    }

    /// Deep copy of a trained global generator as the starting point of a
    /// part. Later updates to the copy never touch `global`.
    pub fn init_from_global(global: &PartGenerator, name: impl Into<String>, arch: &GeneratorArch) -> Result<Self> {
        if &global.arch != arch {
            return Err(Error::Config(format!(
                "architecture mismatch: global {:?} vs part {:?}",
                global.arch, arch
            )));
        }
        let mut part = global.clone();
        part.name = name.into();
        Ok(part)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn mapping_params(&self) -> &[Tensor] {
        &self.mapping
    }

    /// `None` once the mapping network is frozen.
    pub fn mapping_params_mut(&mut self) -> Option<&mut [Tensor]> {
        if self.mapping_frozen {
            None
        } else {
            Some(&mut self.mapping)
        }
    }

    pub fn backbone_params(&self) -> &[Tensor] {
        &self.backbone
    }

    pub fn backbone_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.backbone
    }

    pub fn freeze_mapping(&mut self) {
        self.mapping_frozen = true;
    }

    pub fn is_mapping_frozen(&self) -> bool {
        self.mapping_frozen
    }

    pub fn mapping_hash(&self) -> String {
        hash_tensors(&self.mapping)
    }

    pub fn backbone_hash(&self) -> String {
        hash_tensors(&self.backbone)
    }

    /// Puts parameters on `tape`. A frozen mapping network is always bound as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, train_mapping: bool, train_backbone: bool) -> Result<BoundGenerator> {
        let train_mapping = train_mapping && !self.mapping_frozen;
        Ok(BoundGenerator {
            mapping: self
                .mapping
                .iter()
                .map(|t| tape.leaf(t, train_mapping))
                .collect::<Result<_>>()?,
            backbone: self
                .backbone
                .iter()
                .map(|t| tape.leaf(t, train_backbone))
                .collect::<Result<_>>()?,
        })
    }

    /// `z [g, Dz] -> w [g, Dz]`.
    pub fn map_on_tape(&self, tape: &mut Tape, bound: &BoundGenerator, z: Var) -> Result<Var> {
        if tape.shape(z).1 != self.arch.latent_dim {
            return Err(Error::shape(
                "map_latent",
                format!("z has {} dims, expected {}", tape.shape(z).1, self.arch.latent_dim),
            ));
        }
        let mut h = z;
        let last = self.arch.mapping_layers - 1;
        for l in 0..self.arch.mapping_layers {
            h = tape.linear(h, bound.mapping[2 * l], bound.mapping[2 * l + 1])?;
            if l < last {
                h = tape.leaky_relu(h, MAPPING_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Density `[g·n, 1]` and color `[g·n, 3]` at `points [g·n, 3]`, where
    /// each of the `g` rows of `w` conditions a contiguous block of points.
    pub fn field_on_tape(&self, tape: &mut Tape, bound: &BoundGenerator, w: Var, points: Var) -> Result<(Var, Var)> {
        if tape.shape(w).1 != self.arch.latent_dim || tape.shape(points).1 != 3 {
            return Err(Error::shape(
                "query_field",
                format!("w {:?}, points {:?}", tape.shape(w), tape.shape(points)),
            ));
        }
        let p = &bound.backbone;
        let mut h = points;
        for l in 0..self.arch.backbone_layers {
            let base = PER_LAYER * l;
            let pre = tape.linear(h, p[base], p[base + 1])?;
            let gamma = tape.linear(w, p[base + 2], p[base + 3])?;
            let gamma = tape.add_scalar(gamma, 1.0)?;
            let beta = tape.linear(w, p[base + 4], p[base + 5])?;
            let modulated = tape.film(pre, gamma, beta)?;
            let omega = if l == 0 { self.arch.omega_first } else { self.arch.omega_hidden };
            h = tape.sin(modulated, omega)?;
        }
        let heads = PER_LAYER * self.arch.backbone_layers;
        let mut sigma = tape.linear(h, p[heads], p[heads + 1])?;
        let [k, r] = self.arch.density_prior;
        if k > 0.0 {
            let sq = tape.square(points)?;
            let rad = tape.row_sum(sq)?;
            let prior = tape.scale(rad, -k)?;
            let prior = tape.add_scalar(prior, k * r * r)?;
            sigma = tape.add(sigma, prior)?;
        }
        let sigma = tape.softplus(sigma)?;
        let color = tape.linear(h, p[heads + 2], p[heads + 3])?;
        let color = tape.sigmoid(color)?;
        Ok((sigma, color))
    }

    pub fn map_latent(&self, z: &LatentZ) -> Result<LatentW> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false)?;
        let zv = tape.constant_raw(1, z.dim(), z.0.clone())?;
        let w = self.map_on_tape(&mut tape, &bound, zv)?;
        Ok(LatentW(tape.value(w).to_vec()))
    }

    /// Batched field query. Points outside the scene box are clamped.
    pub fn query_field(&self, w: &LatentW, points: &[Point3]) -> Result<Vec<FieldSample>> {
        if w.dim() != self.arch.latent_dim {
            return Err(Error::shape("query_field", format!("w has {} dims", w.dim())));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false)?;
        let wv = tape.constant_raw(1, w.dim(), w.0.clone())?;
        let pv = tape.constant_raw(points.len(), 3, clamp_points(points))?;
        let (s, c) = self.field_on_tape(&mut tape, &bound, wv, pv)?;
        let (sv, cv) = (tape.value(s), tape.value(c));
        Ok((0..points.len())
            .map(|i| FieldSample {
                sigma: sv[i],
                color: [cv[3 * i], cv[3 * i + 1], cv[3 * i + 2]],
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "part_generator".into());
        ck.meta.insert("name".into(), self.name.clone());
        ck.meta.insert("arch".into(), serde_json::to_string(&self.arch).expect("arch serializes"));
        ck.meta.insert("arch_hash".into(), self.arch.hash());
        ck.meta.insert("mapping_frozen".into(), self.mapping_frozen.to_string());
        for (i, t) in self.mapping.iter().enumerate() {
            ck.push(format!("mapping.{i}"), t.clone());
        }
        for (i, t) in self.backbone.iter().enumerate() {
            ck.push(format!("backbone.{i}"), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::format(origin, format!("missing meta key {k}")))
        };
        if meta("kind")? != "part_generator" {
            return Err(Error::format(origin, "not a generator checkpoint"));
        }
        let arch: GeneratorArch =
            serde_json::from_str(meta("arch")?).map_err(|e| Error::format(origin, e.to_string()))?;
        arch.validate()?;
        let take = |prefix: &str, n: usize| -> Result<Vec<Tensor>> {
            (0..n)
                .map(|i| {
                    ck.get(&format!("{prefix}.{i}"))
                        .cloned()
                        .ok_or_else(|| Error::format(origin, format!("missing tensor {prefix}.{i}")))
                })
                .collect()
        };
        let template = Self::new("", arch.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mapping = take("mapping", template.mapping.len())?;
        let backbone = take("backbone", template.backbone.len())?;
        for (a, b) in mapping.iter().chain(&backbone).zip(template.mapping.iter().chain(&template.backbone)) {
            if a.shape() != b.shape() {
                return Err(Error::format(origin, "tensor shape does not match architecture"));
            }
        }
        Ok(Self {
            name: meta("name")?.clone(),
            arch,
            mapping,
            backbone,
            mapping_frozen: meta("mapping_frozen")? == "true",
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// A generator paired with one latent, usable wherever a scalar field is.
pub struct ConditionedField<'a> {
    pub generator: &'a PartGenerator,
    pub w: &'a LatentW,
}

impl RadianceField for ConditionedField<'_> {
    fn query(&self, points: &[Point3]) -> Result<Vec<FieldSample>> {
        self.generator.query_field(self.w, points)
    }
}

pub(crate) fn clamp_points(points: &[Point3]) -> Vec<f64> {
    let mut clamped_any = false;
    let flat = points
        .iter()
        .flat_map(|p| {
            let (c, clamped) = clamp_to_box(*p, SCENE_HALF_EXTENT);
            clamped_any |= clamped;
            c
        })
        .collect();
    if clamped_any && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("query points outside the scene box were clamped to [-1, 1]^3");
    }
    flat
}

pub fn hash_tensors(tensors: &[Tensor]) -> String {
    let mut bytes = Vec::new();
    for t in tensors {
        for s in t.shape() {
            bytes.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn small_arch() -> GeneratorArch {
        GeneratorArch {
            latent_dim: 6,
            mapping_layers: 3,
            width: 8,
            backbone_layers: 3,
            omega_first: 30.0,
            omega_hidden: 1.0,
            density_bias: -1.0,
            density_prior: [4.0, 0.6],
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sample_z_reproducible_and_rejects_zero_dim() {
        assert_eq!(sample_z(&mut rng(1), 8).unwrap(), sample_z(&mut rng(1), 8).unwrap());
        assert!(sample_z(&mut rng(1), 0).is_err());
    }

    #[test]
    fn sample_z_moments() {
        // 10^4 draws: the standard error of the mean is 0.01 and of the
        // variance about 0.014, so 0.05 is a > 3.5 sigma bound.
        let mut r = rng(9);
        let dim = 4;
        let n = 10_000;
        let draws: Vec<LatentZ> = (0..n).map(|_| sample_z(&mut r, dim).unwrap()).collect();
        for c in 0..dim {
            let mean = draws.iter().map(|z| z.0[c]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|z| (z.0[c] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05, "coord {c}: mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "coord {c}: var {var}");
        }
    }

    #[test]
    fn map_latent_deterministic_and_copies_agree() {
        let g = PartGenerator::new("global", small_arch(), &mut rng(2)).unwrap();
        let z = sample_z(&mut rng(3), 6).unwrap();
        assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
        let a = PartGenerator::init_from_global(&g, "a", &small_arch()).unwrap();
        let b = PartGenerator::init_from_global(&g, "b", &small_arch()).unwrap();
        assert_eq!(a.map_latent(&z).unwrap(), b.map_latent(&z).unwrap());
        assert!(g.map_latent(&LatentZ(vec![0.0; 5])).is_err());
    }

    #[test]
    fn map_latent_does_not_collapse() {
        let g = PartGenerator::new("g", small_arch(), &mut rng(4)).unwrap();
        let mut r = rng(5);
        let ws: Vec<LatentW> = (0..100).map(|_| g.map_latent(&sample_z(&mut r, 6).unwrap()).unwrap()).collect();
        for i in 0..ws.len() {
            for j in 0..i {
                assert_ne!(ws[i], ws[j]);
            }
        }
    }

    #[test]
    fn mapping_gradient_passes_grad_check() {
        let g = PartGenerator::new("g", small_arch(), &mut rng(6)).unwrap();
        let z = sample_z(&mut rng(7), 6).unwrap();
        let params: Vec<Tensor> = g.mapping_params().to_vec();
        let err = grad_check(
            |t, v| {
                let bound = BoundGenerator {
                    mapping: v.to_vec(),
                    backbone: vec![],
                };
                let zv = t.constant_raw(1, 6, z.0.clone())?;
                let w = g.map_on_tape(t, &bound, zv)?;
                let sq = t.square(w)?;
                t.sum(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn untrained_outputs_obey_invariants() {
        let mut r = rng(8);
        let g = PartGenerator::new("g", small_arch(), &mut r).unwrap();
        for _ in 0..5 {
            let w = LatentW((0..6).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect::<Vec<f64>>());
            let pts: Vec<Point3> = (0..50)
                .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
                .collect();
            for s in g.query_field(&w, &pts).unwrap() {
                assert!(s.sigma >= 0.0 && s.sigma.is_finite());
                assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn batched_query_matches_single_queries() {
        let mut r = rng(10);
        let g = PartGenerator::new("g", small_arch(), &mut r).unwrap();
        let w = g.map_latent(&sample_z(&mut r, 6).unwrap()).unwrap();
        let pts: Vec<Point3> = (0..20).map(|i| [0.1 * i as f64 - 1.0, 0.3, -0.2]).collect();
        let batch = g.query_field(&w, &pts).unwrap();
        for (p, b) in pts.iter().zip(&batch) {
            let single = g.query_field(&w, &[*p]).unwrap()[0];
            assert!((single.sigma - b.sigma).abs() < 1e-12);
            for c in 0..3 {
                assert!((single.color[c] - b.color[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_box_points_are_clamped() {
        let g = PartGenerator::new("g", small_arch(), &mut rng(11)).unwrap();
        let w = g.map_latent(&sample_z(&mut rng(12), 6).unwrap()).unwrap();
        let far = g.query_field(&w, &[[3.0, -7.0, 0.5]]).unwrap()[0];
        let edge = g.query_field(&w, &[[1.0, -1.0, 0.5]]).unwrap()[0];
        assert_eq!(far, edge);
    }

    #[test]
    fn density_gradient_wrt_points() {
        let g = PartGenerator::new("g", small_arch(), &mut rng(13)).unwrap();
        let w = g.map_latent(&sample_z(&mut rng(14), 6).unwrap()).unwrap();
        let pts = Tensor::new(vec![3, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6, -0.3, 0.0, 0.2]).unwrap();
        let err = grad_check(
            |t, v| {
                let bound = g.bind(t, false, false)?;
                let wv = t.constant_raw(1, 6, w.0.clone())?;
                let (s, _) = g.field_on_tape(t, &bound, wv, v[0])?;
                t.sum(s)
            },
            &[pts],
            1e-7,
        )
        .unwrap();
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn copies_are_isolated_from_global() {
        let g = PartGenerator::new("g", small_arch(), &mut rng(15)).unwrap();
        let mut part = PartGenerator::init_from_global(&g, "p", &small_arch()).unwrap();
        let mut r = rng(16);
        for _ in 0..100 {
            let w = LatentW((0..6).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>());
            let x = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            assert_eq!(g.query_field(&w, &[x]).unwrap(), part.query_field(&w, &[x]).unwrap());
        }
        let snapshot = g.clone();
        part.backbone_params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(g, snapshot);
        assert_ne!(part.backbone_hash(), g.backbone_hash());

        let other = GeneratorArch {
            width: 4,
            ..small_arch()
        };
        assert!(PartGenerator::init_from_global(&g, "q", &other).is_err());
    }

    #[test]
    fn frozen_mapping_is_bound_as_constants() {
        let mut g = PartGenerator::new("g", small_arch(), &mut rng(17)).unwrap();
        g.freeze_mapping();
        assert!(g.mapping_params_mut().is_none());
        let mut t = Tape::new();
        let bound = g.bind(&mut t, true, true).unwrap();
        let z = t.constant_raw(1, 6, vec![0.5; 6]).unwrap();
        let w = g.map_on_tape(&mut t, &bound, z).unwrap();
        let pts = t.constant_raw(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.4]).unwrap();
        let (s, c) = g.field_on_tape(&mut t, &bound, w, pts).unwrap();
        let a = t.sum(s).unwrap();
        let b = t.sum(c).unwrap();
        let l = t.add(a, b).unwrap();
        let grads = t.backward(l).unwrap();
        assert!(bound.mapping.iter().all(|v| grads.wrt(*v).is_none()));
        assert!(bound.backbone.iter().all(|v| grads.wrt(*v).is_some()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut g = PartGenerator::new("hair", small_arch(), &mut rng(18)).unwrap();
        g.freeze_mapping();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("part_hair.ckpt");
        g.save(&path).unwrap();
        let back = PartGenerator::load(&path).unwrap();
        assert_eq!(back, g);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), g.to_checkpoint().to_bytes());
    }
}
