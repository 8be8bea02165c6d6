//! Actor-critic architectures: separated, shared backbone, mix, mask and mix-and-mask.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Group, ParameterRegistry, Tensor};
use crate::envs::{N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::mechanisms::{apply_skip, LatentPair, Mask, MechanismConfig, MechanismKind, Mix};
use crate::nn::{Init, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Separated,
    SharedBackbone,
    MixAc,
    MaskAc,
    MixmaskAc,
}

impl Arch {
    pub fn mechanism_kind(&self) -> Option<MechanismKind> {
        match self {
            Arch::Separated | Arch::SharedBackbone => None,
            Arch::MixAc => Some(MechanismKind::Mix),
            Arch::MaskAc => Some(MechanismKind::Mask),
            Arch::MixmaskAc => Some(MechanismKind::MixAndMask),
        }
    }

    pub fn has_backbone(&self) -> bool {
        matches!(self, Arch::SharedBackbone | Arch::MaskAc | Arch::MixmaskAc)
    }

    pub fn has_mix(&self) -> bool {
        matches!(self, Arch::MixAc | Arch::MixmaskAc)
    }

    pub fn has_mask(&self) -> bool {
        matches!(self, Arch::MaskAc | Arch::MixmaskAc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub arch: Arch,
    pub obs_dim: usize,
    pub n_actions: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Hidden layers per path for architectures without a backbone.
    pub trunk_layers: usize,
    pub backbone_layers: usize,
    /// Hidden layers per head after the backbone.
    pub head_layers: usize,
    /// 1-based index of the path layer whose activations feed the mix function.
    pub extraction_point: usize,
    pub hidden_gain: f64,
    pub policy_gain: f64,
    pub value_gain: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Separated,
            obs_dim: OBS_DIM,
            n_actions: N_ACTIONS,
            hidden: 64,
            trunk_layers: 2,
            backbone_layers: 1,
            head_layers: 1,
            extraction_point: 1,
            hidden_gain: std::f64::consts::SQRT_2,
            policy_gain: 0.01,
            value_gain: 1.0,
        }
    }
}

impl ArchitectureConfig {
    pub fn with_arch(arch: Arch) -> Self {
        Self { arch, ..Self::default() }
    }

    /// Hidden layers on each path (backbone layers count for both).
    pub fn depth(&self) -> usize {
        if self.arch.has_backbone() {
            self.backbone_layers + self.head_layers
        } else {
            self.trunk_layers
        }
    }

    fn path_layers(&self) -> usize {
        if self.arch.has_backbone() {
            self.head_layers
        } else {
            self.trunk_layers
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.n_actions < 2 || self.hidden == 0 {
            return Err(Error::config("architecture", "obs_dim, hidden must be positive and n_actions >= 2"));
        }
        if self.arch.has_backbone() && self.backbone_layers == 0 {
            return Err(Error::config("architecture.backbone_layers", "backbone architectures need >= 1 layer"));
        }
        if self.path_layers() == 0 && self.arch.has_mix() {
            return Err(Error::config("architecture", "mix needs at least one path layer"));
        }
        if self.arch.has_mix() && !(1..=self.path_layers()).contains(&self.extraction_point) {
            return Err(Error::config(
                "architecture.extraction_point",
                format!("must lie in 1..={} for this depth", self.path_layers()),
            ));
        }
        Ok(())
    }
}

/// Per-layer activations of both paths plus mechanism inputs and outputs.
#[derive(Debug, Clone, Default)]
pub struct LatentTrace {
    pub policy: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub mechanisms: Vec<MechanismTrace>,
}

#[derive(Debug, Clone)]
pub struct MechanismTrace {
    pub kind: MechanismKind,
    /// `[x_pi, x_v]` for mix, `[x_s]` for mask.
    pub inputs: Vec<Tensor>,
    pub outputs: (Tensor, Tensor),
}

/// Latents a penalty or contrastive loss reads, already routed for gradient flow.
#[derive(Debug, Clone)]
pub struct MechanismLatents {
    pub live: LatentPair,
    /// Momentum-copy outputs on the same inputs (contrastive only).
    pub targets: Option<LatentPair>,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub log_probs: Tensor,
    pub probs: Tensor,
    /// `[B]`
    pub value: Tensor,
    pub trace: LatentTrace,
    pub mix: Option<MechanismLatents>,
    pub mask: Option<MechanismLatents>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Also compute the latents the penalty terms consume.
    pub mechanism_latents: bool,
    /// Sampling source for stochastic mechanisms; `None` uses their means.
    pub noise: Option<&'a mut dyn RngCore>,
}

fn reborrow<'a>(noise: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match noise {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

struct MechanismSlot<M> {
    live: M,
    momentum: Option<M>,
    bilinear: Option<Tensor>,
}

pub struct ActorCritic {
    arch: ArchitectureConfig,
    mech: MechanismConfig,
    registry: ParameterRegistry,
    backbone: Vec<Linear>,
    policy_layers: Vec<Linear>,
    value_layers: Vec<Linear>,
    policy_out: Linear,
    value_out: Linear,
    mix: Option<MechanismSlot<Mix>>,
    mask: Option<MechanismSlot<Mask>>,
}

impl ActorCritic {
    pub fn new(arch: &ArchitectureConfig, mech: &MechanismConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        if arch.arch.mechanism_kind().is_some() {
            mech.validate()?;
        }
        let h = arch.hidden;
        let mut registry = ParameterRegistry::new();
        let mut init = Init::new(rng, true);

        let mut backbone = Vec::new();
        let mut width = arch.obs_dim;
        if arch.arch.has_backbone() {
            for i in 0..arch.backbone_layers {
                let l = init.linear(width, h, arch.hidden_gain)?;
                register_linear(&mut registry, &format!("backbone.h{i}"), Group::Shared, &l)?;
                backbone.push(l);
                width = h;
            }
        }

        let mask = if arch.arch.has_mask() {
            let slot = build_slot(&mut registry, "mask", init.rng, mech, h, |rng, trainable| {
                Mask::new(mech, h, rng, trainable)
            }, |m, p| m.params(p))?;
            width = mech.skip.output_width(h);
            if mech.auxiliary {
                width = h;
            }
            Some(slot)
        } else {
            None
        };

        let mut policy_layers = Vec::new();
        let mut value_layers = Vec::new();
        let mut mix = None;
        let mut init = Init::new(rng, true);
        let (mut pw, mut vw) = (width, width);
        for i in 0..arch.path_layers() {
            let lp = init.linear(pw, h, arch.hidden_gain)?;
            let lv = init.linear(vw, h, arch.hidden_gain)?;
            register_linear(&mut registry, &format!("policy.h{i}"), Group::Policy, &lp)?;
            register_linear(&mut registry, &format!("value.h{i}"), Group::Value, &lv)?;
            policy_layers.push(lp);
            value_layers.push(lv);
            pw = h;
            vw = h;
            if arch.arch.has_mix() && i + 1 == arch.extraction_point {
                mix = Some(build_slot(&mut registry, "mix", init.rng, mech, h, |rng, trainable| {
                    Mix::new(mech, h, rng, trainable)
                }, |m, p| m.params(p))?);
                if !mech.auxiliary {
                    pw = mech.skip.output_width(h);
                    vw = pw;
                }
            }
        }
        let policy_out = init.linear(pw, arch.n_actions, arch.policy_gain)?;
        let value_out = init.linear(vw, 1, arch.value_gain)?;
        register_linear(&mut registry, "policy.out", Group::Policy, &policy_out)?;
        register_linear(&mut registry, "value.out", Group::Value, &value_out)?;

        Ok(Self {
            arch: arch.clone(),
            mech: mech.clone(),
            registry,
            backbone,
            policy_layers,
            value_layers,
            policy_out,
            value_out,
            mix,
            mask,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn mechanism(&self) -> &MechanismConfig {
        &self.mech
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn mix(&self) -> Option<&Mix> {
        self.mix.as_ref().map(|s| &s.live)
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref().map(|s| &s.live)
    }

    pub fn mix_bilinear(&self) -> Option<&Tensor> {
        self.mix.as_ref().and_then(|s| s.bilinear.as_ref())
    }

    pub fn mask_bilinear(&self) -> Option<&Tensor> {
        self.mask.as_ref().and_then(|s| s.bilinear.as_ref())
    }

    /// Groups whose parameters produce features consumed by both objectives.
    pub fn shared_groups(&self) -> Vec<Group> {
        let mut g = Vec::new();
        if self.arch.arch.has_backbone() {
            g.push(Group::Shared);
        }
        if self.arch.arch.mechanism_kind().is_some() && !self.mech.auxiliary {
            g.push(Group::Mechanism);
        }
        g
    }

    /// Blends momentum copies toward the live mechanisms.
    pub fn momentum_update(&self) -> Result<()> {
        let m = self.mech.momentum;
        for (name, has) in [("mix", self.mix.as_ref().map(|s| s.momentum.is_some())), ("mask", self.mask.as_ref().map(|s| s.momentum.is_some()))] {
            if has != Some(true) {
                continue;
            }
            let live: Vec<Tensor> = self
                .registry
                .iter()
                .filter(|p| p.group == Group::Mechanism && p.name.starts_with(&format!("{name}.")))
                .map(|p| p.tensor.clone())
                .collect();
            let momentum: Vec<Tensor> = self
                .registry
                .iter()
                .filter(|p| p.group == Group::Momentum && p.name.starts_with(&format!("{name}_momentum.")))
                .map(|p| p.tensor.clone())
                .collect();
            crate::mechanisms::momentum_update(&live, &momentum, m)?;
        }
        Ok(())
    }

    pub fn forward(&self, states: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let s = states.shape();
        if s.len() != 2 || s[1] != self.arch.obs_dim {
            return Err(Error::dim("forward", &[s]));
        }
        if states.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite state".into()));
        }
        let b = s[0];
        let mut noise = opts.noise;
        let want = opts.mechanism_latents;
        let aux = self.mech.auxiliary;
        let skip = self.mech.skip;
        let mut trace = LatentTrace::default();
        let mut mix_latents = None;
        let mut mask_latents = None;

        let mut hp = states.clone();
        let mut hv = states.clone();
        if !self.backbone.is_empty() {
            let mut h = states.clone();
            for l in &self.backbone {
                h = l.forward(&h)?.tanh()?;
                trace.policy.push(h.clone());
                trace.value.push(h.clone());
            }
            hp = h.clone();
            hv = h.clone();
            if let Some(slot) = &self.mask {
                let out = slot.live.forward(&h, reborrow(&mut noise))?;
                trace.mechanisms.push(MechanismTrace {
                    kind: MechanismKind::Mask,
                    inputs: vec![h.clone()],
                    outputs: (out.pi.value.clone(), out.v.value.clone()),
                });
                if !aux {
                    hp = apply_skip(skip, &h, &out.pi.value)?;
                    hv = apply_skip(skip, &h, &out.v.value)?;
                }
                if want {
                    let (live, input) = if aux {
                        (out, h.clone())
                    } else {
                        let d = h.detach();
                        (slot.live.forward(&d, reborrow(&mut noise))?, d)
                    };
                    let targets = match &slot.momentum {
                        Some(m) => Some(no_grad(|| m.forward(&input.detach(), None))?),
                        None => None,
                    };
                    mask_latents = Some(MechanismLatents { live, targets });
                }
            }
        }

        for i in 0..self.policy_layers.len() {
            hp = self.policy_layers[i].forward(&hp)?.tanh()?;
            hv = self.value_layers[i].forward(&hv)?.tanh()?;
            trace.policy.push(hp.clone());
            trace.value.push(hv.clone());
            if let (Some(slot), true) = (&self.mix, i + 1 == self.arch.extraction_point) {
                let out = slot.live.forward(&hp, &hv, reborrow(&mut noise))?;
                trace.mechanisms.push(MechanismTrace {
                    kind: MechanismKind::Mix,
                    inputs: vec![hp.clone(), hv.clone()],
                    outputs: (out.pi.value.clone(), out.v.value.clone()),
                });
                let (xp, xv) = (hp.clone(), hv.clone());
                if !aux {
                    hp = apply_skip(skip, &xp, &out.pi.value)?;
                    hv = apply_skip(skip, &xv, &out.v.value)?;
                }
                if want {
                    let (live, ip, iv) = if aux {
                        (out, xp, xv)
                    } else {
                        let (dp, dv) = (xp.detach(), xv.detach());
                        (slot.live.forward(&dp, &dv, reborrow(&mut noise))?, dp, dv)
                    };
                    let targets = match &slot.momentum {
                        Some(m) => Some(no_grad(|| m.forward(&ip.detach(), &iv.detach(), None))?),
                        None => None,
                    };
                    mix_latents = Some(MechanismLatents { live, targets });
                }
            }
        }

        let logits = self.policy_out.forward(&hp)?;
        let value = self.value_out.forward(&hv)?.reshape(&[b])?;
        let log_probs = logits.log_softmax()?;
        let probs = logits.softmax()?;
        Ok(ForwardOutput {
            logits,
            log_probs,
            probs,
            value,
            trace,
            mix: mix_latents,
            mask: mask_latents,
        })
    }

    /// Action probabilities and values for a batch of observations, without recording a graph.
    pub fn act(&self, observations: &[[f64; OBS_DIM]], noise: Option<&mut dyn RngCore>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let flat: Vec<f64> = observations.iter().flatten().copied().collect();
        let states = Tensor::new(flat, &[observations.len(), OBS_DIM])?;
        let out = no_grad(|| {
            self.forward(
                &states,
                ForwardOptions {
                    mechanism_latents: false,
                    noise,
                },
            )
        })?;
        let n = self.arch.n_actions;
        let probs = out.probs.data().chunks(n).map(|c| c.to_vec()).collect();
        Ok((probs, out.value.to_vec()))
    }
}

fn register_linear(reg: &mut ParameterRegistry, name: &str, group: Group, l: &Linear) -> Result<()> {
    reg.register(format!("{name}.w"), group, l.weight.clone())?;
    reg.register(format!("{name}.b"), group, l.bias.clone())
}

fn build_slot<M>(
    registry: &mut ParameterRegistry,
    name: &str,
    rng: &mut ChaCha8Rng,
    mech: &MechanismConfig,
    width: usize,
    build: impl Fn(&mut ChaCha8Rng, bool) -> Result<M>,
    params: impl Fn(&M, &str) -> Vec<(String, Tensor)>,
) -> Result<MechanismSlot<M>> {
    let mut twin = rng.clone();
    let live = build(rng, true)?;
    for (n, t) in params(&live, name) {
        registry.register(n, Group::Mechanism, t)?;
    }
    if !mech.contrastive {
        return Ok(MechanismSlot { live, momentum: None, bilinear: None });
    }
    let momentum = build(&mut twin, false)?;
    for (n, t) in params(&momentum, &format!("{name}_momentum")) {
        registry.register(n, Group::Momentum, t)?;
    }
    let w = Init::new(rng, true).orthogonal(width, width, 1.0);
    let w = Tensor::param(w, &[width, width])?;
    registry.register(format!("{name}_bilinear.w"), Group::Bilinear, w.clone())?;
    Ok(MechanismSlot {
        live,
        momentum: Some(momentum),
        bilinear: Some(w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{MaskRepr, MixRepr};
    use rand::SeedableRng;

    const ALL: [Arch; 5] = [Arch::Separated, Arch::SharedBackbone, Arch::MixAc, Arch::MaskAc, Arch::MixmaskAc];

    fn states(b: usize) -> Tensor {
        Tensor::new((0..b * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.02).collect(), &[b, 4]).unwrap()
    }

    fn build(arch: Arch, mech: &MechanismConfig, seed: u64) -> ActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActorCritic::new(&ArchitectureConfig::with_arch(arch), mech, &mut rng).unwrap()
    }

    fn copy_matching(from: &ActorCritic, to: &ActorCritic) {
        for p in to.registry().iter() {
            if let Ok(q) = from.registry().get(&p.name) {
                p.tensor.set_data(&q.tensor.to_vec()).unwrap();
            }
        }
    }

    #[test]
    fn probabilities_form_a_simplex() {
        for arch in ALL {
            let net = build(arch, &MechanismConfig::default(), 0);
            let out = net.forward(&states(3), ForwardOptions::default()).unwrap();
            assert_eq!(out.value.shape(), &[3]);
            for row in out.probs.to_vec().chunks(2) {
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{arch:?}");
            }
        }
    }

    #[test]
    fn trace_covers_every_layer() {
        for arch in ALL {
            let net = build(arch, &MechanismConfig::default(), 1);
            let out = net.forward(&states(2), ForwardOptions::default()).unwrap();
            let depth = net.arch().depth();
            assert_eq!(out.trace.policy.len(), depth);
            assert_eq!(out.trace.value.len(), depth);
            let expected = match arch {
                Arch::MixmaskAc => 2,
                Arch::MixAc | Arch::MaskAc => 1,
                _ => 0,
            };
            assert_eq!(out.trace.mechanisms.len(), expected);
        }
    }

    #[test]
    fn identity_mask_matches_shared_backbone() {
        let mech = MechanismConfig {
            mask_repr: MaskRepr::BaseMlp,
            mlp_hidden_layers: 0,
            ..MechanismConfig::default()
        };
        let shared = build(Arch::SharedBackbone, &mech, 2);
        let masked = build(Arch::MaskAc, &mech, 3);
        copy_matching(&shared, &masked);
        for side in ["pi", "v"] {
            let w = masked.registry().get(&format!("mask.{side}.0.w")).unwrap();
            let d = 64;
            w.tensor.set_data(&(0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect::<Vec<_>>()).unwrap();
            masked.registry().get(&format!("mask.{side}.0.b")).unwrap().tensor.set_data(&vec![0.0; d]).unwrap();
        }
        let a = shared.forward(&states(4), ForwardOptions::default()).unwrap();
        let b = masked.forward(&states(4), ForwardOptions::default()).unwrap();
        for (x, y) in a.logits.to_vec().iter().zip(b.logits.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.value.to_vec().iter().zip(b.value.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn auxiliary_mix_matches_separated() {
        let mech = MechanismConfig {
            auxiliary: true,
            ..MechanismConfig::default()
        };
        let sep = build(Arch::Separated, &mech, 4);
        let mix = build(Arch::MixAc, &mech, 5);
        copy_matching(&sep, &mix);
        let a = sep.forward(&states(3), ForwardOptions::default()).unwrap();
        let b = mix.forward(&states(3), ForwardOptions::default()).unwrap();
        assert_eq!(a.logits.to_vec(), b.logits.to_vec());
        assert_eq!(a.value.to_vec(), b.value.to_vec());
    }

    fn value_param_grad_of_logits(net: &ActorCritic) -> f64 {
        net.registry().zero_grad();
        let out = net.forward(&states(3), ForwardOptions::default()).unwrap();
        out.log_probs.sum().unwrap().backward().unwrap();
        net.registry().grad_vector(Group::Value).iter().map(|g| g.abs()).sum()
    }

    #[test]
    fn separated_paths_do_not_interact() {
        let net = build(Arch::Separated, &MechanismConfig::default(), 6);
        assert_eq!(value_param_grad_of_logits(&net), 0.0);
        net.registry().zero_grad();
        let out = net.forward(&states(3), ForwardOptions::default()).unwrap();
        out.value.sum().unwrap().backward().unwrap();
        assert!(net.registry().grad_vector(Group::Policy).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mixing_couples_the_paths() {
        for repr in [MixRepr::BaseMlp, MixRepr::ChannelMixer, MixRepr::Conv, MixRepr::CrossAttention] {
            let mech = MechanismConfig {
                mix_repr: repr,
                ..MechanismConfig::default()
            };
            let net = build(Arch::MixAc, &mech, 7);
            net.registry().zero_grad();
            let out = net.forward(&states(3), ForwardOptions::default()).unwrap();
            out.logits.slice(1, 0, 1).unwrap().sum().unwrap().backward().unwrap();
            let g: f64 = net.registry().grad_vector(Group::Value).iter().map(|g| g.abs()).sum();
            assert!(g > 0.0, "{repr:?}");
        }
    }

    #[test]
    fn mix_jacobian_cross_blocks_are_nonzero() {
        let h = 1e-6;
        for repr in [MixRepr::BaseMlp, MixRepr::ChannelMixer, MixRepr::Conv, MixRepr::CrossAttention] {
            let cfg = MechanismConfig {
                mix_repr: repr,
                ..MechanismConfig::default()
            };
            let d = 8;
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mix = Mix::new(&cfg, d, &mut rng, false).unwrap();
            let xp: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.3).collect();
            let xv: Vec<f64> = (0..d).map(|i| 0.3 - 0.05 * i as f64).collect();
            let eval = |p: &[f64], v: &[f64]| {
                let out = mix
                    .forward(&Tensor::new(p.to_vec(), &[1, d]).unwrap(), &Tensor::new(v.to_vec(), &[1, d]).unwrap(), None)
                    .unwrap();
                (out.pi.value.to_vec(), out.v.value.to_vec())
            };
            let (base_pi, base_v) = eval(&xp, &xv);
            let mut pi_wrt_v = 0.0f64;
            let mut v_wrt_pi = 0.0f64;
            for j in 0..d {
                let mut v2 = xv.clone();
                v2[j] += h;
                let (pi2, _) = eval(&xp, &v2);
                pi_wrt_v = pi_wrt_v.max(pi2.iter().zip(&base_pi).map(|(a, b)| ((a - b) / h).abs()).fold(0.0, f64::max));
                let mut p2 = xp.clone();
                p2[j] += h;
                let (_, v2o) = eval(&p2, &xv);
                v_wrt_pi = v_wrt_pi.max(v2o.iter().zip(&base_v).map(|(a, b)| ((a - b) / h).abs()).fold(0.0, f64::max));
            }
            assert!(pi_wrt_v > 1e-8 && v_wrt_pi > 1e-8, "{repr:?}: {pi_wrt_v} {v_wrt_pi}");
        }
    }

    #[test]
    fn standard_penalty_latents_reach_only_the_mechanism() {
        let net = build(Arch::MixAc, &MechanismConfig::default(), 9);
        net.registry().zero_grad();
        let out = net
            .forward(&states(3), ForwardOptions { mechanism_latents: true, noise: None })
            .unwrap();
        let lat = out.mix.unwrap();
        lat.live.pi.value.sum().unwrap().add(&lat.live.v.value.sum().unwrap()).unwrap().backward().unwrap();
        assert!(net.registry().grad_vector(Group::Policy).iter().all(|g| *g == 0.0));
        assert!(net.registry().grad_vector(Group::Value).iter().all(|g| *g == 0.0));
        assert!(net.registry().grad_vector(Group::Mechanism).iter().any(|g| *g != 0.0));
    }

    #[test]
    fn contrastive_builds_identical_momentum_copies() {
        let mech = MechanismConfig {
            contrastive: true,
            ..MechanismConfig::default()
        };
        let net = build(Arch::MixmaskAc, &mech, 10);
        for p in net.registry().group(Group::Momentum) {
            let live = p.name.replacen("_momentum", "", 1);
            assert_eq!(net.registry().get(&live).unwrap().tensor.to_vec(), p.tensor.to_vec());
            assert!(!p.tensor.requires_grad());
        }
        assert!(net.mix_bilinear().is_some() && net.mask_bilinear().is_some());
        let out = net
            .forward(&states(2), ForwardOptions { mechanism_latents: true, noise: None })
            .unwrap();
        assert!(out.mix.unwrap().targets.is_some());
        net.momentum_update().unwrap();
    }

    #[test]
    fn shared_groups_follow_architecture() {
        let m = MechanismConfig::default();
        assert!(build(Arch::Separated, &m, 0).shared_groups().is_empty());
        assert_eq!(build(Arch::SharedBackbone, &m, 0).shared_groups(), vec![Group::Shared]);
        assert_eq!(build(Arch::MixAc, &m, 0).shared_groups(), vec![Group::Mechanism]);
    }

    #[test]
    fn rejects_bad_extraction_point() {
        let cfg = ArchitectureConfig {
            extraction_point: 3,
            ..ArchitectureConfig::with_arch(Arch::MixAc)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ActorCritic::new(&cfg, &MechanismConfig::default(), &mut rng),
            Err(Error::Config { .. })
        ));
    }
}
