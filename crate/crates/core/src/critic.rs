//! Image critic, the non-saturating adversarial losses and the R1 penalty.
//!
//! The R1 term needs `∂D/∂x` as a differentiable function of the critic
//! weights. Rather than general double backprop, each critic builds that
//! input gradient explicitly on the tape (transposed convolutions through
//! constant activation-derivative masks).

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tape, Tensor, Var, PAD};

pub const CRITIC_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;

/// `f(u) = -log(1 + exp(-u))`, evaluated without overflow.
pub fn f_nonsat(u: f64) -> f64 {
    -softplus(-u)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    /// Square input side length.
    pub resolution: usize,
    /// Output channels of each stride-2 conv block.
    pub channels: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            channels: vec![16, 32, 64, 64],
        }
    }
}

/// Parameters of a critic placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundCritic {
    pub params: Vec<Var>,
}

/// Forward pass over a batch, keeping what the input gradient needs.
pub struct CriticPass {
    /// `[batch, 1]`
    pub logits: Var,
    batch: usize,
    /// Leaky-ReLU derivative per conv block, as values.
    masks: Vec<Vec<f64>>,
}

pub trait Discriminator {
    /// Flattened `H·W·3` input width.
    fn input_dim(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];

    /// `images [batch, H·W·3]`, values in `[0, 1]`.
    fn forward(&self, tape: &mut Tape, bound: &BoundCritic, images: Var) -> Result<CriticPass>;

    /// `∂(Σ_b D(x_b)) / ∂x` as `[batch, H·W·3]`, differentiable in the weights.
    fn input_gradient(&self, tape: &mut Tape, bound: &BoundCritic, pass: &CriticPass) -> Result<Var>;

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundCritic> {
        Ok(BoundCritic {
            params: self.params().iter().map(|t| tape.leaf(t, trainable)).collect::<Result<_>>()?,
        })
    }

    /// Logits for plain images, no gradients kept.
    fn score(&self, images: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant_raw(images.len(), self.input_dim(), images.concat())?;
        let pass = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(pass.logits).to_vec())
    }
}

/// Strided convolutional critic.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    config: CriticConfig,
    /// `[W_l, b_l]` per block, then the final linear head.
    params: Vec<Tensor>,
    /// im2col gather indices per block.
    geometry: Vec<ConvGeometry>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvGeometry {
    in_side: usize,
    in_ch: usize,
    out_side: usize,
    out_ch: usize,
    /// Per image: `[out_side² , k²·in_ch]` flat indices into one input.
    index: Vec<usize>,
}

impl ConvGeometry {
    fn new(in_side: usize, in_ch: usize, out_ch: usize) -> Self {
        let out_side = in_side.div_ceil(2);
        let mut index = Vec::with_capacity(out_side * out_side * KERNEL * KERNEL * in_ch);
        for oy in 0..out_side {
            for ox in 0..out_side {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < in_side && (ix as usize) < in_side;
                        for c in 0..in_ch {
                            index.push(if inside {
                                (iy as usize * in_side + ix as usize) * in_ch + c
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
        Self {
            in_side,
            in_ch,
            out_side,
            out_ch,
            index,
        }
    }

    fn in_len(&self) -> usize {
        self.in_side * self.in_side * self.in_ch
    }

    fn cols(&self) -> usize {
        KERNEL * KERNEL * self.in_ch
    }

    /// Batch-wide gather index.
    fn batch_index(&self, batch: usize) -> Rc<[usize]> {
        let per = self.in_len();
        (0..batch)
            .flat_map(|b| self.index.iter().map(move |&i| if i == PAD { PAD } else { b * per + i }))
            .collect()
    }
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        if config.resolution == 0 || config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::Config(format!("degenerate critic {config:?}")));
        }
        let mut geometry = Vec::new();
        let mut params = Vec::new();
        let (mut side, mut ch) = (config.resolution, 3);
        for &out in &config.channels {
            let g = ConvGeometry::new(side, ch, out);
            let fan_in = g.cols() as f64;
            params.push(Tensor::uniform(&[g.cols(), out], (6.0 / fan_in).sqrt(), rng));
            params.push(Tensor::zeros(&[out]));
            side = g.out_side;
            ch = out;
            geometry.push(g);
        }
        let feat = side * side * ch;
        params.push(Tensor::uniform(&[feat, 1], 0.1 / (feat as f64).sqrt(), rng));
        params.push(Tensor::zeros(&[1]));
        Ok(Self { config, params, geometry })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "critic".into());
        ck.meta.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        for (i, t) in self.params.iter().enumerate() {
            ck.push(format!("critic.{i}"), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some("critic") {
            return Err(Error::format(origin, "not a critic checkpoint"));
        }
        let config: CriticConfig = serde_json::from_str(ck.meta.get("config").ok_or_else(|| Error::format(origin, "missing critic config"))?)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let mut critic = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (i, slot) in critic.params.iter_mut().enumerate() {
            let t = ck.get(&format!("critic.{i}")).ok_or_else(|| Error::format(origin, format!("missing tensor critic.{i}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(origin, "critic tensor shape does not match config"));
            }
            *slot = t.clone();
        }
        Ok(critic)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

impl Discriminator for Critic {
    fn input_dim(&self) -> usize {
        self.config.resolution * self.config.resolution * 3
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundCritic, images: Var) -> Result<CriticPass> {
        let (batch, dim) = tape.shape(images);
        if dim != self.input_dim() {
            return Err(Error::shape("critic", format!("image width {dim}, expected {}", self.input_dim())));
        }
        let scaled = tape.scale(images, 2.0)?;
        let mut h = tape.add_scalar(scaled, -1.0)?;
        let mut masks = Vec::with_capacity(self.geometry.len());
        for (l, g) in self.geometry.iter().enumerate() {
            let rows = batch * g.out_side * g.out_side;
            let cols = tape.gather(h, g.batch_index(batch), rows, g.cols())?;
            let pre = tape.linear(cols, bound.params[2 * l], bound.params[2 * l + 1])?;
            masks.push(tape.value(pre).iter().map(|v| if *v > 0.0 { 1.0 } else { CRITIC_SLOPE }).collect());
            h = tape.leaky_relu(pre, CRITIC_SLOPE)?;
        }
        let last = self.geometry.last().expect("at least one block");
        let flat = tape.reshape(h, batch, last.out_side * last.out_side * last.out_ch)?;
        let head = 2 * self.geometry.len();
        let logits = tape.linear(flat, bound.params[head], bound.params[head + 1])?;
        Ok(CriticPass { logits, batch, masks })
    }

    fn input_gradient(&self, tape: &mut Tape, bound: &BoundCritic, pass: &CriticPass) -> Result<Var> {
        let batch = pass.batch;
        let head = 2 * self.geometry.len();
        let ones = tape.constant_raw(batch, 1, vec![1.0; batch])?;
        let wt = tape.transpose(bound.params[head])?;
        let mut g = tape.matmul(ones, wt)?;
        for (l, geo) in self.geometry.iter().enumerate().rev() {
            let rows = batch * geo.out_side * geo.out_side;
            let g_h = tape.reshape(g, rows, geo.out_ch)?;
            let mask = tape.constant_raw(rows, geo.out_ch, pass.masks[l].clone())?;
            let g_pre = tape.mul(g_h, mask)?;
            let wt = tape.transpose(bound.params[2 * l])?;
            let g_cols = tape.matmul(g_pre, wt)?;
            g = tape.scatter_add(g_cols, geo.batch_index(batch), batch, geo.in_len())?;
        }
        tape.scale(g, 2.0)
    }
}

/// `D(x) = w · x + b`, for closed-form checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    params: Vec<Tensor>,
}

impl LinearCritic {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        let n = weights.len();
        Self {
            params: vec![Tensor::new(vec![n, 1], weights).expect("column"), Tensor::vector(vec![bias])],
        }
    }

    /// `D(x) = Σ x`.
    pub fn pixel_sum(input_dim: usize) -> Self {
        Self::new(vec![1.0; input_dim], 0.0)
    }
}

impl Discriminator for LinearCritic {
    fn input_dim(&self) -> usize {
        self.params[0].shape()[0]
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundCritic, images: Var) -> Result<CriticPass> {
        let batch = tape.shape(images).0;
        let logits = tape.linear(images, bound.params[0], bound.params[1])?;
        Ok(CriticPass {
            logits,
            batch,
            masks: Vec::new(),
        })
    }

    fn input_gradient(&self, tape: &mut Tape, bound: &BoundCritic, pass: &CriticPass) -> Result<Var> {
        let ones = tape.constant_raw(pass.batch, 1, vec![1.0; pass.batch])?;
        let wt = tape.transpose(bound.params[0])?;
        tape.matmul(ones, wt)
    }
}

/// Mean over the batch of `‖∂D/∂x‖²` at `real`.
pub fn r1_penalty(tape: &mut Tape, critic: &dyn Discriminator, bound: &BoundCritic, pass: &CriticPass) -> Result<Var> {
    let g = critic.input_gradient(tape, bound, pass)?;
    let sq = tape.square(g)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / pass.batch as f64)
}

/// `mean softplus(D(fake)) + mean softplus(-D(real))`, i.e.
/// `-f(-D(fake)) - f(D(real))`, plus `λ · R1`. Zero at a perfect critic.
pub fn discriminator_loss(
    tape: &mut Tape,
    critic: &dyn Discriminator,
    bound: &BoundCritic,
    fake: Var,
    real: Var,
    lambda: f64,
) -> Result<Var> {
    let fake = tape.detach(fake)?;
    let pf = critic.forward(tape, bound, fake)?;
    let pr = critic.forward(tape, bound, real)?;
    let lf = tape.softplus(pf.logits)?;
    let lf = tape.mean(lf)?;
    let nr = tape.neg(pr.logits)?;
    let lr = tape.softplus(nr)?;
    let lr = tape.mean(lr)?;
    let loss = tape.add(lf, lr)?;
    if lambda == 0.0 {
        return Ok(loss);
    }
    let r1 = r1_penalty(tape, critic, bound, &pr)?;
    let r1 = tape.scale(r1, lambda)?;
    tape.add(loss, r1)
}

/// `mean softplus(-D(fake)) = -f(D(fake))`. Bind the critic as constants.
pub fn generator_loss(tape: &mut Tape, critic: &dyn Discriminator, bound: &BoundCritic, fake: Var) -> Result<Var> {
    let p = critic.forward(tape, bound, fake)?;
    let n = tape.neg(p.logits)?;
    let s = tape.softplus(n)?;
    tape.mean(s)
}

pub struct AdvLosses {
    pub loss_g: Var,
    pub loss_d: Var,
    /// Trainable critic binding used by `loss_d`.
    pub critic: BoundCritic,
}

/// Both sides of the adversarial objective on one tape. `loss_d` sees the
/// fakes detached; `loss_g` sees the critic as constants.
pub fn adv_losses(tape: &mut Tape, critic: &dyn Discriminator, fake: Var, real: Var, lambda: f64) -> Result<AdvLosses> {
    let trainable = critic.bind(tape, true)?;
    let frozen = critic.bind(tape, false)?;
    let loss_d = discriminator_loss(tape, critic, &trainable, fake, real, lambda)?;
    let loss_g = generator_loss(tape, critic, &frozen, fake)?;
    Ok(AdvLosses {
        loss_g,
        loss_d,
        critic: trainable,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::grad_check;
    use crate::renderer::SeededRng;

    fn small() -> CriticConfig {
        CriticConfig {
            resolution: 6,
            channels: vec![4, 5],
        }
    }

    fn images(rng: &mut SeededRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn f_values_and_limits() {
        assert_eq!(f_nonsat(0.0), -std::f64::consts::LN_2);
        assert!(f_nonsat(50.0) > -1e-20 && f_nonsat(50.0) <= 0.0);
        assert!((f_nonsat(-50.0) + 50.0).abs() < 1e-12);
        assert!(f_nonsat(-1e300).is_finite());
        let mut prev = f64::NEG_INFINITY;
        for i in -200..200 {
            let v = f_nonsat(i as f64 * 0.25);
            assert!(v >= prev && v <= 0.0);
            prev = v;
        }
    }

    #[test]
    fn untrained_logits_are_small() {
        let mut rng = SeededRng::seed_from_u64(1);
        let c = Critic::new(CriticConfig::default(), &mut rng).unwrap();
        let x = images(&mut rng, 3, c.input_dim());
        for v in c.score(&x).unwrap() {
            assert!(v.is_finite() && v.abs() < 1.0, "{v}");
        }
    }

    #[test]
    fn batched_logits_match_single_calls() {
        let mut rng = SeededRng::seed_from_u64(2);
        let c = Critic::new(small(), &mut rng).unwrap();
        let x = images(&mut rng, 4, c.input_dim());
        let all = c.score(&x).unwrap();
        for (i, img) in x.iter().enumerate() {
            let one = c.score(std::slice::from_ref(img)).unwrap()[0];
            assert!((one - all[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_gradient_passes_grad_check() {
        let mut rng = SeededRng::seed_from_u64(3);
        for seed in 0..10 {
            let c = Critic::new(small(), &mut SeededRng::seed_from_u64(seed)).unwrap();
            let x = Tensor::new(vec![2, c.input_dim()], images(&mut rng, 2, c.input_dim()).concat()).unwrap();
            let err = grad_check(
                |t, v| {
                    let b = c.bind(t, false)?;
                    let p = c.forward(t, &b, v[0])?;
                    t.sum(p.logits)
                },
                &[x],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn explicit_input_gradient_matches_reverse_mode() {
        let mut rng = SeededRng::seed_from_u64(4);
        let c = Critic::new(small(), &mut rng).unwrap();
        let x = images(&mut rng, 3, c.input_dim()).concat();
        let mut tape = Tape::new();
        let b = c.bind(&mut tape, false).unwrap();
        let xv = tape.param(&Tensor::new(vec![3, c.input_dim()], x).unwrap()).unwrap();
        let p = c.forward(&mut tape, &b, xv).unwrap();
        let total = tape.sum(p.logits).unwrap();
        let g = tape.backward(total).unwrap().wrt(xv).unwrap().to_vec();
        let explicit = c.input_gradient(&mut tape, &b, &p).unwrap();
        let e = tape.value(explicit);
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_of_pixel_sum_is_three_hw() {
        for side in [1usize, 4, 16] {
            let dim = side * side * 3;
            let c = LinearCritic::pixel_sum(dim);
            let mut rng = SeededRng::seed_from_u64(5);
            let mut tape = Tape::new();
            let b = c.bind(&mut tape, false).unwrap();
            let x = tape.constant_raw(2, dim, images(&mut rng, 2, dim).concat()).unwrap();
            let p = c.forward(&mut tape, &b, x).unwrap();
            let r1 = r1_penalty(&mut tape, &c, &b, &p).unwrap();
            assert_eq!(tape.scalar(r1), dim as f64);
        }
    }

    #[test]
    fn r1_of_constant_critic_is_zero() {
        let c = LinearCritic::new(vec![0.0; 12], 0.7);
        let mut tape = Tape::new();
        let b = c.bind(&mut tape, false).unwrap();
        let x = tape.constant_raw(1, 12, vec![0.3; 12]).unwrap();
        let p = c.forward(&mut tape, &b, x).unwrap();
        let r1 = r1_penalty(&mut tape, &c, &b, &p).unwrap();
        assert_eq!(tape.scalar(r1), 0.0);
    }

    #[test]
    fn r1_passes_grad_check_in_weights() {
        let mut rng = SeededRng::seed_from_u64(6);
        for seed in 0..10 {
            let c = Critic::new(small(), &mut SeededRng::seed_from_u64(100 + seed)).unwrap();
            let x = images(&mut rng, 2, c.input_dim()).concat();
            let dim = c.input_dim();
            let err = grad_check(
                |t, v| {
                    let b = BoundCritic { params: v.to_vec() };
                    let xv = t.constant_raw(2, dim, x.clone())?;
                    let p = c.forward(t, &b, xv)?;
                    r1_penalty(t, &c, &b, &p)
                },
                c.params(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_critic_gives_log_two_losses() {
        let c = LinearCritic::new(vec![0.0; 12], 0.0);
        let mut tape = Tape::new();
        let fake = tape.constant_raw(3, 12, vec![0.2; 36]).unwrap();
        let real = tape.constant_raw(3, 12, vec![0.9; 36]).unwrap();
        let l = adv_losses(&mut tape, &c, fake, real, 10.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((tape.scalar(l.loss_d) - 2.0 * ln2).abs() < 1e-15);
        assert!((tape.scalar(l.loss_g) - ln2).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_drops_penalty_exactly() {
        let mut rng = SeededRng::seed_from_u64(7);
        let c = Critic::new(small(), &mut rng).unwrap();
        let dim = c.input_dim();
        let (f, r) = (images(&mut rng, 2, dim).concat(), images(&mut rng, 2, dim).concat());
        let mut tape = Tape::new();
        let b = c.bind(&mut tape, true).unwrap();
        let fv = tape.constant_raw(2, dim, f).unwrap();
        let rv = tape.constant_raw(2, dim, r).unwrap();
        let with0 = discriminator_loss(&mut tape, &c, &b, fv, rv, 0.0).unwrap();
        let pf = c.forward(&mut tape, &b, fv).unwrap();
        let pr = c.forward(&mut tape, &b, rv).unwrap();
        let expect = tape.value(pf.logits).iter().map(|u| -f_nonsat(-u)).sum::<f64>() / 2.0
            + tape.value(pr.logits).iter().map(|u| -f_nonsat(*u)).sum::<f64>() / 2.0;
        assert!((tape.scalar(with0) - expect).abs() < 1e-14);
        let with10 = discriminator_loss(&mut tape, &c, &b, fv, rv, 10.0).unwrap();
        let r1 = r1_penalty(&mut tape, &c, &b, &pr).unwrap();
        assert!((tape.scalar(with10) - tape.scalar(with0) - 10.0 * tape.scalar(r1)).abs() < 1e-10);
    }

    #[test]
    fn r1_ignores_fakes() {
        let mut rng = SeededRng::seed_from_u64(8);
        let c = Critic::new(small(), &mut rng).unwrap();
        let dim = c.input_dim();
        let real = images(&mut rng, 2, dim).concat();
        let loss_for = |fake: Vec<f64>| {
            let mut tape = Tape::new();
            let b = c.bind(&mut tape, true).unwrap();
            let fv = tape.constant_raw(2, dim, fake).unwrap();
            let rv = tape.constant_raw(2, dim, real.clone()).unwrap();
            let a = discriminator_loss(&mut tape, &c, &b, fv, rv, 5.0).unwrap();
            let z = discriminator_loss(&mut tape, &c, &b, fv, rv, 0.0).unwrap();
            tape.scalar(a) - tape.scalar(z)
        };
        let a = loss_for(images(&mut rng, 2, dim).concat());
        let b = loss_for(images(&mut rng, 2, dim).concat());
        assert_eq!(a, b);
    }

    #[test]
    fn detach_contract() {
        let mut rng = SeededRng::seed_from_u64(9);
        let c = Critic::new(small(), &mut rng).unwrap();
        let dim = c.input_dim();
        let mut tape = Tape::new();
        // stand-in generator: fake = sigmoid(θ)
        let theta = tape.param(&Tensor::new(vec![2, dim], images(&mut rng, 2, dim).concat()).unwrap()).unwrap();
        let fake = tape.sigmoid(theta).unwrap();
        let real = tape.constant_raw(2, dim, images(&mut rng, 2, dim).concat()).unwrap();
        let l = adv_losses(&mut tape, &c, fake, real, 10.0).unwrap();
        let gd = tape.backward(l.loss_d).unwrap();
        assert!(gd.wrt(theta).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        assert!(l.critic.params.iter().any(|p| gd.wrt(*p).is_some_and(|g| g.iter().any(|v| *v != 0.0))));
        let gg = tape.backward(l.loss_g).unwrap();
        for p in &l.critic.params {
            assert!(gg.wrt(*p).is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        }
        assert!(gg.wrt(theta).is_some_and(|g| g.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Critic::new(small(), &mut SeededRng::seed_from_u64(10)).unwrap();
        let ck = c.to_checkpoint();
        let back = Critic::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }
}
