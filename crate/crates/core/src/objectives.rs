//! A2C losses, return and advantage estimators, penalty measures and the contrastive loss.

use std::f64::consts::LN_2;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::mechanisms::{standard_normal, Covariance, GaussianLatent, Latent, LatentPair, MechanismConfig, PenaltyKind};
use crate::networks::{ActorCritic, ForwardOutput, MechanismLatents};

/// Discounted reward-to-go: `G_t = r_t + γ G_{t+1}`, with the tail equal to the last reward.
pub fn mc_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    pub returns: Vec<f64>,
    pub deltas: Vec<f64>,
    pub advantages: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

/// Generalized advantage estimation. `values` carries `T + 1` entries, the last
/// being the bootstrap value (0 after a terminal step).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<AdvantageEstimate> {
    let t_len = rewards.len();
    if t_len == 0 {
        return Err(Error::Input("empty trajectory".into()));
    }
    if values.len() != t_len + 1 {
        return Err(Error::Input(format!(
            "gae needs {} values for {} rewards, got {}",
            t_len + 1,
            t_len,
            values.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("gamma {gamma} and lambda {lambda} must lie in [0, 1]")));
    }
    let deltas: Vec<f64> = (0..t_len)
        .map(|t| rewards[t] + gamma * values[t + 1] - values[t])
        .collect();
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    let mut a = 0.0;
    let mut g = values[t_len];
    for t in (0..t_len).rev() {
        a = deltas[t] + gamma * lambda * a;
        g = rewards[t] + gamma * g;
        advantages[t] = a;
        returns[t] = g;
    }
    Ok(AdvantageEstimate {
        returns,
        deltas,
        advantages,
        gamma,
        lambda,
    })
}

/// Zero-mean, unit-variance copy; constant inputs map to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return vec![0.0; xs.len()];
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

#[derive(Debug, Clone)]
pub struct A2cLoss {
    pub policy: Tensor,
    pub value: Tensor,
    pub entropy: Tensor,
}

/// `J_π = −mean(A · log π(a|s)) − β H`, `J_v = mean((G − V)²)`, `H = mean(−Σ π log π)`.
///
/// `log_probs: [T, A]`, `values: [T]`; advantages and returns are constants.
pub fn a2c_loss(
    log_probs: &Tensor,
    values: &Tensor,
    actions: &[usize],
    advantages: &[f64],
    returns: &[f64],
    beta: f64,
) -> Result<A2cLoss> {
    let (t_len, n_actions) = match log_probs.shape() {
        [t, a] => (*t, *a),
        s => return Err(Error::dim("a2c_loss", &[s])),
    };
    if values.shape() != [t_len] || actions.len() != t_len || advantages.len() != t_len || returns.len() != t_len {
        return Err(Error::dim(
            "a2c_loss",
            &[log_probs.shape(), values.shape(), &[actions.len()], &[advantages.len()], &[returns.len()]],
        ));
    }
    let mut weights = vec![0.0; t_len * n_actions];
    for (t, &a) in actions.iter().enumerate() {
        if a >= n_actions {
            return Err(Error::Input(format!("action {a} out of range")));
        }
        weights[t * n_actions + a] = advantages[t];
    }
    let weights = Tensor::new(weights, &[t_len, n_actions])?;
    let probs = log_probs.exp()?;
    let entropy = probs.mul(log_probs)?.sum_last()?.mean()?.scale(-1.0)?;
    let policy = log_probs
        .mul(&weights)?
        .sum()?
        .scale(-1.0 / t_len as f64)?
        .sub(&entropy.scale(beta)?)?;
    let value = Tensor::new(returns.to_vec(), &[t_len])?.sub(values)?.square()?.mean()?;
    Ok(A2cLoss { policy, value, entropy })
}

static COSINE_FLOOR_WARNED: AtomicBool = AtomicBool::new(false);
const NORM_FLOOR_SQ: f64 = 1e-24;

/// Mean over rows of `a·b / (‖a‖‖b‖)`, norms floored at 1e-12.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dim("cosine_similarity", &[a.shape(), b.shape()]));
    }
    let sa = a.square()?.sum_last()?;
    let sb = b.square()?.sum_last()?;
    if sa.data().iter().chain(sb.data().iter()).any(|&s| s < NORM_FLOOR_SQ)
        && !COSINE_FLOOR_WARNED.swap(true, Ordering::Relaxed)
    {
        log::warn!("zero-norm latent in cosine similarity; norm floored at 1e-12");
    }
    let denom = sa.clamp_min(NORM_FLOOR_SQ)?.sqrt()?.mul(&sb.clamp_min(NORM_FLOOR_SQ)?.sqrt()?)?;
    a.mul(b)?.sum_last()?.div(&denom)?.mean()
}

/// Per-row cosine similarity as plain numbers.
pub fn cosine_rows(a: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    a.chunks(width)
        .zip(b.chunks(width))
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().max(NORM_FLOOR_SQ).sqrt();
            let ny = y.iter().map(|p| p * p).sum::<f64>().max(NORM_FLOOR_SQ).sqrt();
            dot / (nx * ny)
        })
        .collect()
}

/// Rows `start..start+len` of a Gaussian latent.
pub fn gaussian_rows(g: &GaussianLatent, start: usize, len: usize) -> Result<GaussianLatent> {
    let end = start + len;
    let cov = match &g.cov {
        Covariance::Diagonal { log_std } => Covariance::Diagonal {
            log_std: log_std.slice(0, start, end)?,
        },
        Covariance::Full { c, l } => Covariance::Full {
            c: c.slice(0, start, end)?,
            l: l.slice(0, start, end)?,
        },
    };
    Ok(GaussianLatent {
        mean: g.mean.slice(0, start, end)?,
        cov,
    })
}

fn check_pair(p: &GaussianLatent, q: &GaussianLatent) -> Result<()> {
    let same_kind = matches!(
        (&p.cov, &q.cov),
        (Covariance::Diagonal { .. }, Covariance::Diagonal { .. }) | (Covariance::Full { .. }, Covariance::Full { .. })
    );
    if p.mean.shape() != q.mean.shape() || !same_kind {
        return Err(Error::dim("divergence", &[p.mean.shape(), q.mean.shape()]));
    }
    Ok(())
}

/// Closed-form `KL(P‖Q)` per row, `[B]`.
pub fn kl_gaussian(p: &GaussianLatent, q: &GaussianLatent) -> Result<Tensor> {
    check_pair(p, q)?;
    let (b, n) = (p.rows(), p.dim());
    let diff = q.mean.sub(&p.mean)?;
    let (trace, quad, logdet) = match (&p.cov, &q.cov) {
        (Covariance::Diagonal { log_std: lp }, Covariance::Diagonal { log_std: lq }) => {
            let trace = lp.sub(lq)?.scale(2.0)?.exp()?.sum_last()?;
            let quad = diff.square()?.mul(&lq.scale(-2.0)?.exp()?)?.sum_last()?;
            let logdet = lq.sub(lp)?.sum_last()?.scale(2.0)?;
            (trace, quad, Some(logdet))
        }
        (Covariance::Full { l: l_p, .. }, Covariance::Full { l: l_q, .. }) => {
            // Σ = LᵀL with unit-diagonal L, so both log-determinants vanish
            let trace = l_q.tri_solve(&l_p.transpose()?, true)?.square()?.sum_last()?.sum_last()?;
            let quad = l_q
                .tri_solve(&diff.reshape(&[b, n, 1])?, true)?
                .reshape(&[b, n])?
                .square()?
                .sum_last()?;
            (trace, quad, None)
        }
        _ => unreachable!(),
    };
    let mut k = trace.add(&quad)?.add_scalar(-(n as f64))?;
    if let Some(ld) = logdet {
        k = k.add(&ld)?;
    }
    k.scale(0.5)
}

/// `½(KL(P‖Q) + KL(Q‖P))`, averaged over rows.
pub fn j_divergence(p: &GaussianLatent, q: &GaussianLatent) -> Result<Tensor> {
    kl_gaussian(p, q)?.add(&kl_gaussian(q, p)?)?.scale(0.5)?.mean()
}

/// `S` reparameterized draws per row, `[B, S, n]`.
fn draw(g: &GaussianLatent, samples: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    let (b, n) = (g.rows(), g.dim());
    let eps = standard_normal(rng, &[b, samples, n])?;
    let mean = g.mean.reshape(&[b, 1, n])?.repeat_axis(1, samples)?;
    let z = match &g.cov {
        Covariance::Diagonal { log_std } => eps.mul(&log_std.exp()?.reshape(&[b, 1, n])?.repeat_axis(1, samples)?)?,
        // rows of ε L are (Lᵀ ε)ᵀ
        Covariance::Full { l, .. } => eps.matmul(l)?,
    };
    mean.add(&z)
}

/// Log-density of `z: [B, S, n]` under row-wise Gaussians, up to the shared `−n/2 ln 2π`, `[B, S]`.
fn log_density(g: &GaussianLatent, z: &Tensor) -> Result<Tensor> {
    let (b, n) = (g.rows(), g.dim());
    let s = z.shape()[1];
    let diff = z.sub(&g.mean.reshape(&[b, 1, n])?.repeat_axis(1, s)?)?;
    match &g.cov {
        Covariance::Diagonal { log_std } => {
            let ls = log_std.reshape(&[b, 1, n])?.repeat_axis(1, s)?;
            let quad = diff.mul(&ls.scale(-1.0)?.exp()?)?.square()?.sum_last()?;
            let logdet = log_std.sum_last()?.reshape(&[b, 1])?.repeat_axis(1, s)?;
            quad.scale(-0.5)?.sub(&logdet)
        }
        Covariance::Full { l, .. } => {
            let y = l.tri_solve(&diff.transpose()?, true)?;
            y.square()?.transpose()?.sum_last()?.scale(-0.5)
        }
    }
}

/// `log ½(e^a + e^b)` elementwise with a detached max shift.
fn log_mean_exp(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shift: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x.max(*y)).collect();
    let shift = Tensor::new(shift, a.shape())?;
    a.sub(&shift)?
        .exp()?
        .add(&b.sub(&shift)?.exp()?)?
        .ln()?
        .add(&shift)?
        .add_scalar(-LN_2)
}

/// `e^u − 1 − u ≥ 0`; its expectation under the right measure is a KL term.
fn bregman(u: &Tensor) -> Result<Tensor> {
    u.exp()?.add_scalar(-1.0)?.sub(u)
}

/// `r ln r − r + 1 ≥ 0` for `r = e^u`.
fn entropy_bregman(u: &Tensor) -> Result<Tensor> {
    let r = u.exp()?;
    r.mul(u)?.sub(&r)?.add_scalar(1.0)
}

struct MixtureDraws {
    /// Log-densities `(log p, log q, log m)` at draws from P.
    at_p: (Tensor, Tensor, Tensor),
    at_q: (Tensor, Tensor, Tensor),
}

fn mixture_draws(p: &GaussianLatent, q: &GaussianLatent, samples: usize, rng: &mut dyn RngCore) -> Result<MixtureDraws> {
    check_pair(p, q)?;
    if samples == 0 {
        return Err(Error::Input("mc_samples must be positive".into()));
    }
    let zp = draw(p, samples, rng)?;
    let zq = draw(q, samples, rng)?;
    let eval = |z: &Tensor| -> Result<(Tensor, Tensor, Tensor)> {
        let lp = log_density(p, z)?;
        let lq = log_density(q, z)?;
        let lm = log_mean_exp(&lp, &lq)?;
        Ok((lp, lq, lm))
    };
    Ok(MixtureDraws {
        at_p: eval(&zp)?,
        at_q: eval(&zq)?,
    })
}

/// Information radius `½(K(P‖M) + K(Q‖M))`, `M = ½(P + Q)`, by Monte Carlo.
///
/// Both terms are taken under `M` with the density ratio `p/m ≤ 2`, which keeps
/// every per-sample term bounded and nonnegative.
pub fn info_radius(p: &GaussianLatent, q: &GaussianLatent, samples: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    let d = mixture_draws(p, q, samples, rng)?;
    let mut total = Tensor::scalar(0.0);
    for (lp, lq, lm) in [&d.at_p, &d.at_q] {
        let f_p = entropy_bregman(&lp.sub(lm)?)?.mean()?;
        let f_q = entropy_bregman(&lq.sub(lm)?)?.mean()?;
        total = total.add(&f_p.add(&f_q)?)?;
    }
    total.scale(0.25)
}

/// Arithmetic-geometric divergence `½(K(M‖P) + K(M‖Q))` by Monte Carlo; draws
/// from `M` are the union of equal-sized draws from `P` and `Q`.
pub fn ag_divergence(p: &GaussianLatent, q: &GaussianLatent, samples: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    let d = mixture_draws(p, q, samples, rng)?;
    let mut total = Tensor::scalar(0.0);
    for (lp, lq, lm) in [&d.at_p, &d.at_q] {
        let g_p = bregman(&lp.sub(lm)?)?.mean()?;
        let g_q = bregman(&lq.sub(lm)?)?.mean()?;
        total = total.add(&g_p.add(&g_q)?)?;
    }
    total.scale(0.25)
}

/// The configured measure between two latents: cosine similarity or a divergence.
pub fn penalty(kind: PenaltyKind, a: &Latent, b: &Latent, mc_samples: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    if kind == PenaltyKind::Cosine {
        return cosine_similarity(&a.value, &b.value);
    }
    let (p, q) = match (&a.gaussian, &b.gaussian) {
        (Some(p), Some(q)) => (p, q),
        _ => {
            return Err(Error::Contract(format!(
                "{kind:?} needs stochastic latents on both sides"
            )))
        }
    };
    match kind {
        PenaltyKind::JDivergence => j_divergence(p, q),
        PenaltyKind::InfoRadius => info_radius(p, q, mc_samples, rng),
        PenaltyKind::AgDivergence => ag_divergence(p, q, mc_samples, rng),
        PenaltyKind::Cosine => unreachable!(),
    }
}

/// Nonnegative dissimilarity derived from a measure value: `1 − cos` or the divergence itself.
pub fn dissimilarity(kind: PenaltyKind, measure: &Tensor) -> Result<Tensor> {
    match kind {
        PenaltyKind::Cosine => measure.scale(-1.0)?.add_scalar(1.0),
        _ => Ok(measure.clone()),
    }
}

/// Cross-entropy with the positive as the true class over logits `(qWk₊, qWk₋)`, averaged over rows.
pub fn contrastive_loss(q: &Tensor, k_plus: &Tensor, k_minus: &Tensor, w: &Tensor) -> Result<Tensor> {
    let s = q.shape();
    if s.len() != 2 || k_plus.shape() != s || k_minus.shape() != s || w.shape() != [s[1], s[1]] {
        return Err(Error::dim("contrastive_loss", &[s, k_plus.shape(), k_minus.shape(), w.shape()]));
    }
    let b = s[0];
    let qw = q.matmul(w)?;
    let pos = qw.mul(k_plus)?.sum_last()?.reshape(&[b, 1])?;
    let neg = qw.mul(k_minus)?.sum_last()?.reshape(&[b, 1])?;
    Tensor::concat(&[&pos, &neg], 1)?
        .log_softmax()?
        .slice(1, 0, 1)?
        .mean()?
        .scale(-1.0)
}

/// Penalty temperatures with geometric decay `α_t = α₀ τᵗ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub alpha_s0: f64,
    pub alpha_d0: f64,
    pub tau: f64,
    pub step: u32,
}

impl Temperatures {
    pub fn new(cfg: &MechanismConfig) -> Self {
        Self {
            alpha_s0: cfg.alpha_s,
            alpha_d0: cfg.alpha_d,
            tau: cfg.tau,
            step: 0,
        }
    }

    pub fn alpha_s(&self) -> f64 {
        self.alpha_s0 * self.tau.powi(self.step as i32)
    }

    pub fn alpha_d(&self) -> f64 {
        self.alpha_d0 * self.tau.powi(self.step as i32)
    }

    pub fn decay(&mut self) {
        self.step += 1;
    }
}

/// Loss components of one update. `penalty` is already weighted and signed.
#[derive(Debug, Clone)]
pub struct Objective {
    pub policy: Tensor,
    pub value: Tensor,
    pub entropy: f64,
    pub penalty: Option<Tensor>,
    /// Raw measure values (cosine similarity, divergence or contrastive loss).
    pub mix_measure: Option<f64>,
    pub mask_measure: Option<f64>,
}

impl Objective {
    /// `J_π + c_v J_v + penalty`.
    pub fn total(&self, value_coef: f64) -> Result<Tensor> {
        let t = self.policy.add(&self.value.scale(value_coef)?)?;
        match &self.penalty {
            Some(p) => t.add(p),
            None => Ok(t),
        }
    }
}

fn window(pair: &LatentPair, rows: usize, rng: &mut dyn RngCore) -> Result<LatentPair> {
    let b = pair.pi.value.shape()[0];
    if rows == 0 || rows >= b {
        return Ok(pair.clone());
    }
    let start = rng.random_range(0..=b - rows);
    let cut = |l: &Latent| -> Result<Latent> {
        Ok(Latent {
            value: l.value.slice(0, start, start + rows)?,
            gaussian: match &l.gaussian {
                Some(g) => Some(gaussian_rows(g, start, rows)?),
                None => None,
            },
        })
    };
    Ok(LatentPair {
        pi: cut(&pair.pi)?,
        v: cut(&pair.v)?,
    })
}

/// Contrastive loss for both anchors; `opposing` picks the opposite side's momentum output as positive.
fn contrastive_pair(lat: &MechanismLatents, w: &Tensor, opposing: bool) -> Result<Tensor> {
    let t = lat
        .targets
        .as_ref()
        .ok_or_else(|| Error::Contract("contrastive loss without momentum targets".into()))?;
    let (q_pi, q_v) = (&lat.live.pi.value, &lat.live.v.value);
    let (k_pi, k_v) = (&t.pi.value, &t.v.value);
    let (pos_pi, neg_pi, pos_v, neg_v) = if opposing {
        (k_v, k_pi, k_pi, k_v)
    } else {
        (k_pi, k_v, k_v, k_pi)
    };
    contrastive_loss(q_pi, pos_pi, neg_pi, w)?
        .add(&contrastive_loss(q_v, pos_v, neg_v, w)?)?
        .scale(0.5)
}

/// Measure value and the signed loss term for one mechanism.
fn mechanism_term(
    cfg: &MechanismConfig,
    lat: &MechanismLatents,
    bilinear: Option<&Tensor>,
    alpha: f64,
    similarity: bool,
    rng: &mut dyn RngCore,
) -> Result<(f64, Option<Tensor>)> {
    if cfg.contrastive {
        let w = bilinear.ok_or_else(|| Error::Contract("contrastive mode without bilinear map".into()))?;
        let c = contrastive_pair(lat, w, similarity)?;
        let v = c.item();
        return Ok((v, (alpha != 0.0).then(|| c.scale(alpha)).transpose()?));
    }
    let pair = if cfg.penalty.is_statistical() {
        window(&lat.live, cfg.penalty_rows, rng)?
    } else {
        lat.live.clone()
    };
    if alpha == 0.0 {
        let m = no_grad(|| penalty(cfg.penalty, &pair.pi, &pair.v, cfg.mc_samples, rng))?;
        return Ok((m.item(), None));
    }
    let m = penalty(cfg.penalty, &pair.pi, &pair.v, cfg.mc_samples, rng)?;
    let d = dissimilarity(cfg.penalty, &m)?;
    // similarity is maximized by shrinking d, dissimilarity by growing it
    let signed = if similarity { d.scale(alpha)? } else { d.scale(-alpha)? };
    Ok((m.item(), Some(signed)))
}

/// Routed A2C objective plus mechanism penalties. The forward pass must have
/// been run with `mechanism_latents` so the penalty inputs carry the routing.
pub fn total_objective(
    net: &ActorCritic,
    out: &ForwardOutput,
    a2c: &A2cLoss,
    temps: &Temperatures,
    rng: &mut dyn RngCore,
) -> Result<Objective> {
    let cfg = net.mechanism();
    let mut penalty_sum: Option<Tensor> = None;
    let mut add = |t: Option<Tensor>| -> Result<()> {
        if let Some(t) = t {
            penalty_sum = Some(match penalty_sum.take() {
                Some(s) => s.add(&t)?,
                None => t,
            });
        }
        Ok(())
    };
    let mut mix_measure = None;
    let mut mask_measure = None;
    if net.mix().is_some() {
        let lat = out
            .mix
            .as_ref()
            .ok_or_else(|| Error::Contract("forward ran without mechanism latents".into()))?;
        let (m, t) = mechanism_term(cfg, lat, net.mix_bilinear(), temps.alpha_s(), true, rng)?;
        mix_measure = Some(m);
        add(t)?;
    }
    if net.mask().is_some() {
        let lat = out
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract("forward ran without mechanism latents".into()))?;
        let (m, t) = mechanism_term(cfg, lat, net.mask_bilinear(), temps.alpha_d(), false, rng)?;
        mask_measure = Some(m);
        add(t)?;
    }
    Ok(Objective {
        policy: a2c.policy.clone(),
        value: a2c.value.clone(),
        entropy: a2c.entropy.item(),
        penalty: penalty_sum,
        mix_measure,
        mask_measure,
    })
}
