//! Mix and mask mechanisms.
//!
//! A mix function couples two same-width latents `(x_pi, x_v)` taken from
//! the policy and value paths and returns coupled replacements. A mask
//! function splits one shared latent `x_s` into decoupled policy and value
//! latents. Either may be stochastic, in which case it returns Gaussian
//! latents sampled with the reparameterization trick.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, Init, Linear, Mlp, TokenAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Mix,
    Mask,
    MixAndMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixRepr {
    BaseMlp,
    ChannelMixer,
    Conv,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRepr {
    BaseMlp,
    SelfAttention,
    LatentQueryAttention,
    SharedInvertedAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Cosine,
    InfoRadius,
    JDivergence,
    AgDivergence,
}

impl PenaltyKind {
    pub fn is_statistical(&self) -> bool {
        *self != PenaltyKind::Cosine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stochastic {
    Off,
    Diagonal,
    FullCholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    StateIndependent,
    StateDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    None,
    Residual,
    Dense,
}

impl SkipKind {
    /// Width seen by the layer consuming a skip-joined latent of width `d`.
    pub fn output_width(&self, d: usize) -> usize {
        match self {
            SkipKind::Dense => 2 * d,
            _ => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismConfig {
    pub mix_repr: MixRepr,
    pub mask_repr: MaskRepr,
    pub penalty: PenaltyKind,
    /// Similarity temperature for the mix penalty.
    pub alpha_s: f64,
    /// Divergence temperature for the mask penalty.
    pub alpha_d: f64,
    /// Per-update temperature decay factor.
    pub tau: f64,
    pub stochastic: Stochastic,
    pub cov_mode: CovMode,
    pub skip: SkipKind,
    pub auxiliary: bool,
    pub contrastive: bool,
    pub momentum: f64,
    /// Reparameterized draws per side for sampled divergences.
    pub mc_samples: usize,
    /// Rows of the update batch used for sampled divergences (0 = all rows).
    pub penalty_rows: usize,
    pub mlp_hidden: usize,
    pub mlp_hidden_layers: usize,
    pub mixer_blocks: usize,
    pub mixer_channel_hidden: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub attention_width: usize,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            mix_repr: MixRepr::BaseMlp,
            mask_repr: MaskRepr::BaseMlp,
            penalty: PenaltyKind::Cosine,
            alpha_s: 0.01,
            alpha_d: 0.01,
            tau: 1.0,
            stochastic: Stochastic::Off,
            cov_mode: CovMode::StateIndependent,
            skip: SkipKind::None,
            auxiliary: false,
            contrastive: false,
            momentum: 0.95,
            mc_samples: 256,
            penalty_rows: 16,
            mlp_hidden: 64,
            mlp_hidden_layers: 1,
            mixer_blocks: 2,
            mixer_channel_hidden: 16,
            conv_layers: 2,
            conv_kernel: 3,
            attention_width: 16,
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("mechanism.tau", format!("must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config(
                "mechanism.momentum",
                format!("must lie in (0, 1), got {}", self.momentum),
            ));
        }
        for (field, v) in [("mechanism.alpha_s", self.alpha_s), ("mechanism.alpha_d", self.alpha_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a nonnegative real, got {v}")));
            }
        }
        match (self.stochastic, self.penalty.is_statistical()) {
            (Stochastic::Off, true) => {
                return Err(Error::config(
                    "mechanism.penalty",
                    "statistical measures need a stochastic mechanism",
                ))
            }
            (Stochastic::Diagonal | Stochastic::FullCholesky, false) => {
                return Err(Error::config(
                    "mechanism.penalty",
                    "stochastic mechanisms take info_radius, j_divergence or ag_divergence",
                ))
            }
            _ => {}
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mechanism.mc_samples", "must be positive"));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::config("mechanism.conv_kernel", "must be odd"));
        }
        for (field, v) in [
            ("mechanism.mlp_hidden", self.mlp_hidden),
            ("mechanism.mixer_blocks", self.mixer_blocks),
            ("mechanism.mixer_channel_hidden", self.mixer_channel_hidden),
            ("mechanism.conv_layers", self.conv_layers),
            ("mechanism.attention_width", self.attention_width),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Covariance parameterization of a [`GaussianLatent`].
#[derive(Debug, Clone)]
pub enum Covariance {
    /// `Σ = diag(σ²)`, stored as `log σ`, shape `[B, n]`.
    Diagonal { log_std: Tensor },
    /// `Σ = LᵀL` with `L` from [`cholesky_factor`]; `c: [B, n]`, `l: [B, n, n]`.
    Full { c: Tensor, l: Tensor },
}

#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mean: Tensor,
    pub cov: Covariance,
}

impl GaussianLatent {
    pub fn rows(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }

    /// Reparameterized draw `μ + σ ⊙ ε` or `μ + Lᵀ ε`; `eps` has the shape of `mean`.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        match &self.cov {
            Covariance::Diagonal { log_std } => self.mean.add(&log_std.exp()?.mul(eps)?),
            Covariance::Full { l, .. } => {
                let (b, n) = (self.rows(), self.dim());
                let z = l.transpose()?.matmul(&eps.reshape(&[b, n, 1])?)?;
                self.mean.add(&z.reshape(&[b, n])?)
            }
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<Tensor> {
        let eps = standard_normal(rng, self.mean.shape())?;
        self.sample_with(&eps)
    }

    /// Dense covariance of row `row`, row-major `n x n`.
    pub fn covariance(&self, row: usize) -> Vec<f64> {
        let n = self.dim();
        match &self.cov {
            Covariance::Diagonal { log_std } => {
                let ls = log_std.data();
                let mut s = vec![0.0; n * n];
                for i in 0..n {
                    s[i * n + i] = (2.0 * ls[row * n + i]).exp();
                }
                s
            }
            Covariance::Full { l, .. } => {
                let l = &l.data()[row * n * n..(row + 1) * n * n];
                let mut s = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        s[i * n + j] = (0..n).map(|k| l[k * n + i] * l[k * n + j]).sum();
                    }
                }
                s
            }
        }
    }
}

pub fn standard_normal(rng: &mut dyn RngCore, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(data, shape)
}

/// `L = (c cᵀ) ⊙ StrictLower + I` for `c: [n]` or batched `c: [B, n]`.
///
/// The unit diagonal keeps `L` nonsingular, so `Σ = LᵀL` is positive-definite
/// for every `c`.
pub fn cholesky_factor(c: &Tensor) -> Result<Tensor> {
    let (batch, n) = match c.shape() {
        [n] => (None, *n),
        [b, n] => (Some(*b), *n),
        s => return Err(Error::dim("cholesky_factor", &[s])),
    };
    let mut strict = vec![0.0; n * n];
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
        for j in 0..i {
            strict[i * n + j] = 1.0;
        }
    }
    let strict = Tensor::new(strict, &[n, n])?;
    let eye = Tensor::new(eye, &[n, n])?;
    let outer = match batch {
        None => c.reshape(&[n, 1])?.matmul(&c.reshape(&[1, n])?)?,
        Some(b) => c.reshape(&[b, n, 1])?.matmul(&c.reshape(&[b, 1, n])?)?,
    };
    outer.mul(&strict)?.add(&eye)
}

/// Row-stochastic attention weights with their normalizing constant.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub weights: Vec<f64>,
    pub row_len: usize,
    pub h: f64,
}

impl AttentionMask {
    pub fn new(weights: Vec<f64>, row_len: usize) -> Result<Self> {
        if row_len == 0 || weights.is_empty() || weights.len() % row_len != 0 {
            return Err(Error::dim("attention_mask", &[&[weights.len()], &[row_len]]));
        }
        Ok(Self { weights, row_len, h: 1.0 })
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.row_len)
    }
}

/// `a_v = h (1 - a_π)` with `h = 1 / (n - 1)` so every row of `a_v` sums to 1.
pub fn invert_mask(a_pi: &AttentionMask) -> Result<AttentionMask> {
    let n = a_pi.row_len;
    if n == 1 {
        return Err(Error::DegenerateMask);
    }
    for row in a_pi.rows() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
            return Err(Error::Contract(format!("attention row is not stochastic (sum {s})")));
        }
    }
    let h = 1.0 / (n as f64 - 1.0);
    Ok(AttentionMask {
        weights: a_pi.weights.iter().map(|w| h * (1.0 - w)).collect(),
        row_len: n,
        h,
    })
}

/// Differentiable counterpart of [`invert_mask`] over the last axis.
pub fn invert_mask_tensor(a_pi: &Tensor) -> Result<Tensor> {
    let n = *a_pi.shape().last().unwrap();
    if n == 1 {
        return Err(Error::DegenerateMask);
    }
    a_pi.scale(-1.0)?.add_scalar(1.0)?.scale(1.0 / (n as f64 - 1.0))
}

pub fn apply_skip(kind: SkipKind, original: &Tensor, altered: &Tensor) -> Result<Tensor> {
    match kind {
        SkipKind::None => Ok(altered.clone()),
        SkipKind::Residual => {
            if original.shape() != altered.shape() {
                return Err(Error::dim("residual_skip", &[original.shape(), altered.shape()]));
            }
            original.add(altered)
        }
        SkipKind::Dense => Tensor::concat(&[original, altered], original.shape().len() - 1),
    }
}

/// `momentum ← m · live + (1 − m) · momentum`, elementwise.
pub fn momentum_update(live: &[Tensor], momentum: &[Tensor], m: f64) -> Result<()> {
    if live.len() != momentum.len() {
        return Err(Error::dim("momentum_update", &[&[live.len()], &[momentum.len()]]));
    }
    for (l, k) in live.iter().zip(momentum) {
        if l.shape() != k.shape() {
            return Err(Error::dim("momentum_update", &[l.shape(), k.shape()]));
        }
        let lv = l.data();
        k.update_data(|kd| {
            for (kv, &x) in kd.iter_mut().zip(lv.iter()) {
                *kv = m * x + (1.0 - m) * *kv;
            }
        });
    }
    Ok(())
}

/// Output latent of a mechanism: the value passed downstream plus, for
/// stochastic mechanisms, the distribution it was drawn from.
#[derive(Debug, Clone)]
pub struct Latent {
    pub value: Tensor,
    pub gaussian: Option<GaussianLatent>,
}

impl Latent {
    fn deterministic(value: Tensor) -> Self {
        Self { value, gaussian: None }
    }
}

#[derive(Debug, Clone)]
pub struct LatentPair {
    pub pi: Latent,
    pub v: Latent,
}

/// Covariance head for one output side of a stochastic mechanism.
#[derive(Debug, Clone)]
enum CovHead {
    Independent(Tensor),
    Dependent(Linear),
}

#[derive(Debug, Clone)]
struct StochasticHead {
    mode: Stochastic,
    pi: CovHead,
    v: CovHead,
}

impl StochasticHead {
    fn new(init: &mut Init, mode: Stochastic, cov_mode: CovMode, input: usize, n: usize) -> Result<Option<Self>> {
        if mode == Stochastic::Off {
            return Ok(None);
        }
        let side = |init: &mut Init| -> Result<CovHead> {
            Ok(match cov_mode {
                CovMode::StateIndependent => {
                    let start = if mode == Stochastic::Diagonal { -1.0 } else { 0.0 };
                    CovHead::Independent(init.tensor(vec![start; n], &[n])?)
                }
                CovMode::StateDependent => {
                    let mut l = init.linear(input, n, 0.01)?;
                    if mode == Stochastic::Diagonal {
                        l.bias = init.tensor(vec![-1.0; n], &[n])?;
                    }
                    CovHead::Dependent(l)
                }
            })
        };
        Ok(Some(Self {
            mode,
            pi: side(init)?,
            v: side(init)?,
        }))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, head) in [("pi", &self.pi), ("v", &self.v)] {
            match head {
                CovHead::Independent(t) => out.push((format!("{prefix}.cov_{name}"), t.clone())),
                CovHead::Dependent(l) => l.params(&format!("{prefix}.cov_{name}"), out),
            }
        }
    }
}

/// Builds a [`GaussianLatent`] around `mean` from a covariance head reading `source`.
pub fn stochastic_latent(
    mean: &Tensor,
    mode: Stochastic,
    raw_cov: &Tensor,
) -> Result<GaussianLatent> {
    let cov = match mode {
        Stochastic::Off => return Err(Error::Contract("stochastic head with mode off".into())),
        Stochastic::Diagonal => Covariance::Diagonal { log_std: raw_cov.clone() },
        Stochastic::FullCholesky => Covariance::Full {
            c: raw_cov.clone(),
            l: cholesky_factor(raw_cov)?,
        },
    };
    Ok(GaussianLatent { mean: mean.clone(), cov })
}

fn head_latent(
    head: &StochasticHead,
    side: &CovHead,
    mean: Tensor,
    source: &Tensor,
    noise: Option<&mut dyn RngCore>,
) -> Result<Latent> {
    let rows = mean.shape()[0];
    let raw = match side {
        CovHead::Independent(t) => broadcast_rows(t, rows)?,
        CovHead::Dependent(l) => l.forward(source)?,
    };
    let g = stochastic_latent(&mean, head.mode, &raw)?;
    let value = match noise {
        Some(rng) => g.sample(rng)?,
        None => mean,
    };
    Ok(Latent { value, gaussian: Some(g) })
}

fn finish(
    head: &Option<StochasticHead>,
    pi: Tensor,
    v: Tensor,
    source: &Tensor,
    noise: Option<&mut dyn RngCore>,
) -> Result<LatentPair> {
    match head {
        None => Ok(LatentPair {
            pi: Latent::deterministic(pi),
            v: Latent::deterministic(v),
        }),
        Some(h) => {
            let (lp, lv) = match noise {
                Some(rng) => (
                    head_latent(h, &h.pi, pi, source, Some(&mut *rng))?,
                    head_latent(h, &h.v, v, source, Some(rng))?,
                ),
                None => (
                    head_latent(h, &h.pi, pi, source, None)?,
                    head_latent(h, &h.v, v, source, None)?,
                ),
            };
            Ok(LatentPair { pi: lp, v: lv })
        }
    }
}

#[derive(Debug, Clone)]
struct MixerBlock {
    channel: Mlp,
    token: Linear,
}

#[derive(Debug, Clone)]
enum MixNet {
    BaseMlp { pi: Mlp, v: Mlp },
    ChannelMixer { blocks: Vec<MixerBlock> },
    Conv { layers: Vec<(Tensor, Tensor)> },
    CrossAttention { pi: TokenAttention, v: TokenAttention },
}

/// Mix function coupling `(x_pi, x_v)` of width `d`.
#[derive(Debug, Clone)]
pub struct Mix {
    repr: MixRepr,
    width: usize,
    net: MixNet,
    head: Option<StochasticHead>,
}

impl Mix {
    pub fn new(cfg: &MechanismConfig, width: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Self> {
        let mut init = Init::new(rng, trainable);
        let d = width;
        let net = match cfg.mix_repr {
            MixRepr::BaseMlp => MixNet::BaseMlp {
                pi: Mlp::new(&mut init, 2 * d, cfg.mlp_hidden, cfg.mlp_hidden_layers, d)?,
                v: Mlp::new(&mut init, 2 * d, cfg.mlp_hidden, cfg.mlp_hidden_layers, d)?,
            },
            MixRepr::ChannelMixer => MixNet::ChannelMixer {
                blocks: (0..cfg.mixer_blocks)
                    .map(|_| {
                        Ok(MixerBlock {
                            channel: Mlp::new(&mut init, 2, cfg.mixer_channel_hidden, 1, 2)?,
                            token: init.linear(d, d, 1.0)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            MixRepr::Conv => MixNet::Conv {
                layers: (0..cfg.conv_layers)
                    .map(|_| {
                        let k = cfg.conv_kernel;
                        let fan_in = (2 * k) as f64;
                        let w: Vec<f64> = (0..2 * 2 * k)
                            .map(|_| init.rng.sample::<f64, _>(StandardNormal) / fan_in.sqrt())
                            .collect();
                        Ok((init.tensor(w, &[2, 2, k])?, init.tensor(vec![0.0; 2], &[2])?))
                    })
                    .collect::<Result<_>>()?,
            },
            MixRepr::CrossAttention => MixNet::CrossAttention {
                pi: TokenAttention::new(&mut init, d, cfg.attention_width)?,
                v: TokenAttention::new(&mut init, d, cfg.attention_width)?,
            },
        };
        let head = StochasticHead::new(&mut init, cfg.stochastic, cfg.cov_mode, 2 * d, d)?;
        Ok(Self {
            repr: cfg.mix_repr,
            width,
            net,
            head,
        })
    }

    pub fn repr(&self) -> MixRepr {
        self.repr
    }

    pub fn is_stochastic(&self) -> bool {
        self.head.is_some()
    }

    /// Couples `x_pi` and `x_v`; with `noise`, stochastic outputs are sampled, otherwise the mean is returned.
    pub fn forward(&self, x_pi: &Tensor, x_v: &Tensor, noise: Option<&mut dyn RngCore>) -> Result<LatentPair> {
        if x_pi.shape() != x_v.shape() || x_pi.shape().len() != 2 || x_pi.shape()[1] != self.width {
            return Err(Error::dim("mix", &[x_pi.shape(), x_v.shape()]));
        }
        let b = x_pi.shape()[0];
        let d = self.width;
        let joint = Tensor::concat(&[x_pi, x_v], 1)?;
        let (pi, v) = match &self.net {
            MixNet::BaseMlp { pi, v } => (pi.forward(&joint)?, v.forward(&joint)?),
            MixNet::ChannelMixer { blocks } => {
                // [B, 2, d]
                let mut x = Tensor::stack(&[x_pi, x_v])?;
                for (i, blk) in blocks.iter().enumerate() {
                    x = blk.channel.forward(&x.transpose()?)?.transpose()?;
                    x = blk.token.forward(&x)?;
                    if i + 1 < blocks.len() {
                        x = x.tanh()?;
                    }
                }
                (x.slice(1, 0, 1)?.reshape(&[b, d])?, x.slice(1, 1, 2)?.reshape(&[b, d])?)
            }
            MixNet::Conv { layers } => {
                let mut x = Tensor::stack(&[x_pi, x_v])?;
                for (i, (w, bias)) in layers.iter().enumerate() {
                    x = x.conv1d(w, bias)?;
                    if i + 1 < layers.len() {
                        x = x.tanh()?;
                    }
                }
                (x.slice(1, 0, 1)?.reshape(&[b, d])?, x.slice(1, 1, 2)?.reshape(&[b, d])?)
            }
            MixNet::CrossAttention { pi, v } => (pi.attend(x_v, x_pi)?, v.attend(x_pi, x_v)?),
        };
        finish(&self.head, pi, v, &joint, noise)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.net {
            MixNet::BaseMlp { pi, v } => {
                pi.params(&format!("{prefix}.pi"), &mut out);
                v.params(&format!("{prefix}.v"), &mut out);
            }
            MixNet::ChannelMixer { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    b.channel.params(&format!("{prefix}.block{i}.channel"), &mut out);
                    b.token.params(&format!("{prefix}.block{i}.token"), &mut out);
                }
            }
            MixNet::Conv { layers } => {
                for (i, (w, b)) in layers.iter().enumerate() {
                    out.push((format!("{prefix}.conv{i}.w"), w.clone()));
                    out.push((format!("{prefix}.conv{i}.b"), b.clone()));
                }
            }
            MixNet::CrossAttention { pi, v } => {
                pi.params(&format!("{prefix}.pi"), &mut out);
                v.params(&format!("{prefix}.v"), &mut out);
            }
        }
        if let Some(h) = &self.head {
            h.params(prefix, &mut out);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum MaskNet {
    BaseMlp { pi: Mlp, v: Mlp },
    SelfAttention { pi: TokenAttention, v: TokenAttention },
    LatentQuery { query: Tensor, pi: TokenAttention, v: TokenAttention },
    SharedInverted { att: TokenAttention },
}

/// Mask function splitting a shared latent of width `d` into two latents of width `d`.
#[derive(Debug, Clone)]
pub struct Mask {
    repr: MaskRepr,
    width: usize,
    net: MaskNet,
    head: Option<StochasticHead>,
}

impl Mask {
    pub fn new(cfg: &MechanismConfig, width: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Result<Self> {
        let mut init = Init::new(rng, trainable);
        let d = width;
        let net = match cfg.mask_repr {
            MaskRepr::BaseMlp => MaskNet::BaseMlp {
                pi: Mlp::new(&mut init, d, cfg.mlp_hidden, cfg.mlp_hidden_layers, d)?,
                v: Mlp::new(&mut init, d, cfg.mlp_hidden, cfg.mlp_hidden_layers, d)?,
            },
            MaskRepr::SelfAttention => MaskNet::SelfAttention {
                pi: TokenAttention::new(&mut init, d, cfg.attention_width)?,
                v: TokenAttention::new(&mut init, d, cfg.attention_width)?,
            },
            MaskRepr::LatentQueryAttention => {
                let w = cfg.attention_width;
                let q: Vec<f64> = (0..d * w).map(|_| init.rng.sample::<f64, _>(StandardNormal)).collect();
                MaskNet::LatentQuery {
                    query: init.tensor(q, &[d, w])?,
                    pi: TokenAttention::new(&mut init, d, w)?,
                    v: TokenAttention::new(&mut init, d, w)?,
                }
            }
            MaskRepr::SharedInvertedAttention => MaskNet::SharedInverted {
                att: TokenAttention::new(&mut init, d, cfg.attention_width)?,
            },
        };
        let head = StochasticHead::new(&mut init, cfg.stochastic, cfg.cov_mode, d, d)?;
        Ok(Self {
            repr: cfg.mask_repr,
            width,
            net,
            head,
        })
    }

    pub fn repr(&self) -> MaskRepr {
        self.repr
    }

    pub fn forward(&self, x_s: &Tensor, noise: Option<&mut dyn RngCore>) -> Result<LatentPair> {
        if x_s.shape().len() != 2 || x_s.shape()[1] != self.width {
            return Err(Error::dim("mask", &[x_s.shape()]));
        }
        let b = x_s.shape()[0];
        let (pi, v) = match &self.net {
            MaskNet::BaseMlp { pi, v } => (pi.forward(x_s)?, v.forward(x_s)?),
            MaskNet::SelfAttention { pi, v } => (pi.attend(x_s, x_s)?, v.attend(x_s, x_s)?),
            MaskNet::LatentQuery { query, pi, v } => {
                let q = query.reshape(&[1, self.width, query.shape()[1]])?.repeat_axis(0, b)?;
                let side = |att: &TokenAttention| -> Result<Tensor> {
                    let kv = att.tokens(x_s)?;
                    att.read(&att.weights(&q, &kv)?, &kv)
                };
                (side(pi)?, side(v)?)
            }
            MaskNet::SharedInverted { att } => {
                let kv = att.tokens(x_s)?;
                let a_pi = att.weights(&att.project_query(&kv)?, &kv)?;
                let a_v = invert_mask_tensor(&a_pi)?;
                (att.read(&a_pi, &kv)?, att.read(&a_v, &kv)?)
            }
        };
        finish(&self.head, pi, v, x_s, noise)
    }

    /// Policy attention weights of the shared inverted representation, for inspection.
    pub fn policy_attention(&self, x_s: &Tensor) -> Result<Option<Tensor>> {
        match &self.net {
            MaskNet::SharedInverted { att } => {
                let kv = att.tokens(x_s)?;
                Ok(Some(att.weights(&att.project_query(&kv)?, &kv)?))
            }
            _ => Ok(None),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match &self.net {
            MaskNet::BaseMlp { pi, v } => {
                pi.params(&format!("{prefix}.pi"), &mut out);
                v.params(&format!("{prefix}.v"), &mut out);
            }
            MaskNet::SelfAttention { pi, v } => {
                pi.params(&format!("{prefix}.pi"), &mut out);
                v.params(&format!("{prefix}.v"), &mut out);
            }
            MaskNet::LatentQuery { query, pi, v } => {
                out.push((format!("{prefix}.query"), query.clone()));
                pi.params(&format!("{prefix}.pi"), &mut out);
                v.params(&format!("{prefix}.v"), &mut out);
            }
            MaskNet::SharedInverted { att } => att.params(&format!("{prefix}.att"), &mut out),
        }
        if let Some(h) = &self.head {
            h.params(prefix, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        standard_normal(r, shape).unwrap()
    }

    #[test]
    fn invert_mask_examples() {
        let a = invert_mask(&AttentionMask::new(vec![0.2, 0.8], 2).unwrap()).unwrap();
        assert!((a.weights[0] - 0.8).abs() < 1e-15 && (a.weights[1] - 0.2).abs() < 1e-15);
        assert_eq!(a.h, 1.0);
        let a = invert_mask(&AttentionMask::new(vec![1.0, 0.0, 0.0], 3).unwrap()).unwrap();
        assert_eq!(a.weights, vec![0.0, 0.5, 0.5]);
        let u = invert_mask(&AttentionMask::new(vec![0.25; 4], 4).unwrap()).unwrap();
        assert!(u.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        assert!(matches!(
            invert_mask(&AttentionMask::new(vec![1.0], 1).unwrap()),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky_factor(&Tensor::new(vec![0.0, 0.0], &[2]).unwrap()).unwrap();
        assert_eq!(l.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
        let l = cholesky_factor(&Tensor::new(vec![1.0, 1.0], &[2]).unwrap()).unwrap();
        assert_eq!(l.to_vec(), vec![1.0, 0.0, 1.0, 1.0]);
        let g = GaussianLatent {
            mean: Tensor::zeros(&[1, 2]),
            cov: Covariance::Full {
                c: Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap(),
                l: l.reshape(&[1, 2, 2]).unwrap(),
            },
        };
        assert_eq!(g.covariance(0), vec![2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_log_std_gives_identity() {
        let g = stochastic_latent(&Tensor::zeros(&[1, 3]), Stochastic::Diagonal, &Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(g.covariance(0), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let g = stochastic_latent(&Tensor::zeros(&[1, 2]), Stochastic::FullCholesky, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.covariance(0), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn reparameterized_samples_match_covariance() {
        let mut r = rng(5);
        let n = 3;
        let c = Tensor::new(vec![0.4, -0.7, 0.9], &[1, n]).unwrap();
        let g = stochastic_latent(&Tensor::new(vec![1.0, -2.0, 0.5], &[1, n]).unwrap(), Stochastic::FullCholesky, &c).unwrap();
        let target = g.covariance(0);
        let draws = 100_000;
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            samples.push(g.sample(&mut r).unwrap().to_vec());
        }
        let mean: Vec<f64> = (0..n).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / draws as f64).collect();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            for j in 0..n {
                let cov = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (draws - 1) as f64;
                err += (cov - target[i * n + j]).powi(2);
                norm += target[i * n + j].powi(2);
            }
        }
        assert!((err / norm).sqrt() < 0.05, "frobenius error {}", (err / norm).sqrt());
    }

    #[test]
    fn skip_kinds() {
        let o = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(apply_skip(SkipKind::Residual, &o, &z).unwrap().to_vec(), o.to_vec());
        assert_eq!(apply_skip(SkipKind::Dense, &o, &z).unwrap().shape(), &[1, 4]);
        assert_eq!(apply_skip(SkipKind::None, &o, &z).unwrap().to_vec(), vec![0.0, 0.0]);
        let bad = Tensor::zeros(&[1, 3]);
        assert!(apply_skip(SkipKind::Residual, &o, &bad).is_err());
    }

    #[test]
    fn momentum_boundaries() {
        let live = Tensor::new(vec![2.0], &[1]).unwrap();
        let mom = Tensor::new(vec![0.0], &[1]).unwrap();
        momentum_update(&[live.clone()], &[mom.clone()], 0.5).unwrap();
        assert_eq!(mom.item(), 1.0);
        momentum_update(&[live.clone()], &[mom.clone()], 1.0).unwrap();
        assert_eq!(mom.item(), 2.0);
        let mom2 = Tensor::new(vec![7.0], &[1]).unwrap();
        momentum_update(&[live.clone()], &[mom2.clone()], 0.0).unwrap();
        assert_eq!(mom2.item(), 7.0);
        assert!(momentum_update(&[live], &[Tensor::zeros(&[2])], 0.5).is_err());
    }

    #[test]
    fn momentum_contracts_toward_live() {
        let live = Tensor::new(vec![1.0, -3.0], &[2]).unwrap();
        let mom = Tensor::new(vec![5.0, 5.0], &[2]).unwrap();
        let dist = |a: &Tensor, b: &Tensor| a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let m = 0.3;
        for _ in 0..5 {
            let before = dist(&live, &mom);
            momentum_update(&[live.clone()], &[mom.clone()], m).unwrap();
            assert!((dist(&live, &mom) - (1.0 - m) * before).abs() < 1e-12);
        }
    }

    #[test]
    fn every_mix_repr_preserves_shape() {
        for repr in [MixRepr::BaseMlp, MixRepr::ChannelMixer, MixRepr::Conv, MixRepr::CrossAttention] {
            let cfg = MechanismConfig { mix_repr: repr, ..Default::default() };
            let mix = Mix::new(&cfg, 8, &mut rng(1), true).unwrap();
            let mut r = rng(2);
            let (xp, xv) = (randn(&mut r, &[3, 8]), randn(&mut r, &[3, 8]));
            let out = mix.forward(&xp, &xv, None).unwrap();
            assert_eq!(out.pi.value.shape(), &[3, 8], "{repr:?}");
            assert_eq!(out.v.value.shape(), &[3, 8], "{repr:?}");
            assert!(mix.forward(&xp, &randn(&mut r, &[3, 7]), None).is_err());
        }
    }

    #[test]
    fn every_mask_repr_preserves_shape() {
        for repr in [
            MaskRepr::BaseMlp,
            MaskRepr::SelfAttention,
            MaskRepr::LatentQueryAttention,
            MaskRepr::SharedInvertedAttention,
        ] {
            let cfg = MechanismConfig { mask_repr: repr, ..Default::default() };
            let mask = Mask::new(&cfg, 6, &mut rng(1), true).unwrap();
            let x = randn(&mut rng(2), &[4, 6]);
            let out = mask.forward(&x, None).unwrap();
            assert_eq!(out.pi.value.shape(), &[4, 6], "{repr:?}");
            assert_eq!(out.v.value.shape(), &[4, 6], "{repr:?}");
            assert!(mask.forward(&randn(&mut rng(2), &[4, 5]), None).is_err());
        }
    }

    #[test]
    fn base_mix_identity_construction() {
        let cfg = MechanismConfig { mlp_hidden_layers: 0, ..Default::default() };
        let d = 3;
        let mix = Mix::new(&cfg, d, &mut rng(0), true).unwrap();
        let params = mix.params("mix");
        // pi.0.w: [2d, d] = [I; 0], v.0.w = [0; I]
        for (name, t) in &params {
            if name.ends_with(".w") {
                let take_second = name.starts_with("mix.v");
                let mut w = vec![0.0; 2 * d * d];
                for i in 0..d {
                    let row = if take_second { d + i } else { i };
                    w[row * d + i] = 1.0;
                }
                t.set_data(&w).unwrap();
            }
        }
        let xp = Tensor::new(vec![0.1, -0.2, 0.3], &[1, 3]).unwrap();
        let xv = Tensor::new(vec![1.0, 2.0, -3.0], &[1, 3]).unwrap();
        let out = mix.forward(&xp, &xv, None).unwrap();
        assert_eq!(out.pi.value.to_vec(), xp.to_vec());
        assert_eq!(out.v.value.to_vec(), xv.to_vec());
    }

    #[test]
    fn zeroed_base_mask_outputs_zero() {
        let mask = Mask::new(&MechanismConfig::default(), 5, &mut rng(0), true).unwrap();
        let params = mask.params("mask");
        for (name, t) in &params {
            if name.contains(".1.") {
                t.set_data(&vec![0.0; t.numel()]).unwrap();
            }
        }
        let out = mask.forward(&randn(&mut rng(1), &[2, 5]), None).unwrap();
        assert!(out.pi.value.to_vec().iter().chain(out.v.value.to_vec().iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn shared_inverted_uniform_point() {
        let cfg = MechanismConfig {
            mask_repr: MaskRepr::SharedInvertedAttention,
            ..Default::default()
        };
        let mask = Mask::new(&cfg, 4, &mut rng(0), true).unwrap();
        // zero keys make every score equal, so a_pi is uniform
        for (name, t) in mask.params("mask") {
            if name.contains(".key.") {
                t.set_data(&vec![0.0; t.numel()]).unwrap();
            }
        }
        let x = randn(&mut rng(1), &[2, 4]);
        let a = mask.policy_attention(&x).unwrap().unwrap();
        assert!(a.to_vec().iter().all(|w| (w - 0.25).abs() < 1e-12));
        let inv = invert_mask_tensor(&a).unwrap();
        assert!(inv.to_vec().iter().all(|w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn stochastic_mix_returns_gaussians() {
        for (mode, cov) in [
            (Stochastic::Diagonal, CovMode::StateIndependent),
            (Stochastic::Diagonal, CovMode::StateDependent),
            (Stochastic::FullCholesky, CovMode::StateIndependent),
            (Stochastic::FullCholesky, CovMode::StateDependent),
        ] {
            let cfg = MechanismConfig {
                stochastic: mode,
                cov_mode: cov,
                penalty: PenaltyKind::JDivergence,
                ..Default::default()
            };
            cfg.validate().unwrap();
            let mix = Mix::new(&cfg, 4, &mut rng(0), true).unwrap();
            let mut r = rng(3);
            let (xp, xv) = (randn(&mut r, &[2, 4]), randn(&mut r, &[2, 4]));
            let det = mix.forward(&xp, &xv, None).unwrap();
            let g = det.pi.gaussian.as_ref().unwrap();
            assert_eq!(det.pi.value.to_vec(), g.mean.to_vec());
            let sampled = mix.forward(&xp, &xv, Some(&mut r)).unwrap();
            assert_ne!(sampled.pi.value.to_vec(), g.mean.to_vec());
        }
    }

    #[test]
    fn config_validation() {
        assert!(MechanismConfig::default().validate().is_ok());
        let bad = MechanismConfig { tau: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MechanismConfig { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MechanismConfig { penalty: PenaltyKind::InfoRadius, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MechanismConfig { stochastic: Stochastic::Diagonal, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
