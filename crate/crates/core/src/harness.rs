//! Rollouts, ε-greedy exploration, the training loop, evaluation, and the
//! hidden-representation similarity-delta experiment.

use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{clip_grad_norm, no_grad, Adam, Tensor};
use crate::envs::{self, EnvMode, EnvState, NcpRanges, N_ACTIONS, OBS_DIM, SOLVED_THRESHOLD};
use crate::error::{Error, Result};
use crate::mechanisms::MechanismConfig;
use crate::multiobj::{self, ScalarizerParams};
use crate::networks::{ActorCritic, ArchitectureConfig, ForwardOptions};
use crate::objectives::{self, cosine_rows, Temperatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiObjMode {
    None,
    Scalarize,
    Pcgrad,
    Both,
}

impl MultiObjMode {
    pub fn scalarizes(&self) -> bool {
        matches!(self, MultiObjMode::Scalarize | MultiObjMode::Both)
    }

    pub fn projects(&self) -> bool {
        matches!(self, MultiObjMode::Pcgrad | MultiObjMode::Both)
    }
}

/// Whether nCP is used only for evaluation (training on CP) or also for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NcpMode {
    EvalOnly,
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    /// Most probable action.
    Greedy,
    /// Actions drawn from π with ε = 0.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Entropy coefficient β.
    pub beta: f64,
    pub lr: f64,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub eval_interval: usize,
    pub eval_trials: usize,
    pub eval_policy: EvalPolicy,
    pub env: EnvMode,
    pub ncp_mode: NcpMode,
    pub ncp_ranges: NcpRanges,
    pub multiobj: MultiObjMode,
    pub normalize_advantages: bool,
    pub value_coef: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Anchor z-score for scalarization.
    pub z: f64,
    pub calibration_episodes: usize,
    /// Refit the scalarizer from the most recent costs every this many updates; 0 keeps it stationary.
    pub recalibrate_every: usize,
    pub stop_when_solved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            beta: 0.01,
            lr: 3e-3,
            epsilon0: 0.1,
            epsilon_decay: 0.995,
            episodes: 100,
            eval_interval: 5,
            eval_trials: 100,
            eval_policy: EvalPolicy::Greedy,
            env: EnvMode::Cp,
            ncp_mode: NcpMode::EvalOnly,
            ncp_ranges: NcpRanges::default(),
            multiobj: MultiObjMode::None,
            normalize_advantages: true,
            value_coef: 0.5,
            grad_clip: 1.0,
            z: 3.0,
            calibration_episodes: 100,
            recalibrate_every: 0,
            stop_when_solved: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in [0, 1], got {v}")))
            }
        };
        unit("train.gamma", self.gamma)?;
        unit("train.lambda", self.lambda)?;
        unit("train.epsilon0", self.epsilon0)?;
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::config("train.epsilon_decay", "must lie in (0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.value_coef >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::config("train", "beta, value_coef and grad_clip must be nonnegative"));
        }
        if self.eval_interval == 0 || self.eval_trials == 0 {
            return Err(Error::config("train.eval_interval", "eval_interval and eval_trials must be positive"));
        }
        if self.multiobj.scalarizes() && self.calibration_episodes < 2 {
            return Err(Error::config("train.calibration_episodes", "scalarization needs at least 2"));
        }
        if self.recalibrate_every == 1 {
            return Err(Error::config("train.recalibrate_every", "needs at least 2 costs per refit"));
        }
        self.ncp_ranges.validate()
    }

    pub fn train_env(&self) -> EnvMode {
        match (self.env, self.ncp_mode) {
            (EnvMode::Ncp, NcpMode::Train) => EnvMode::Ncp,
            _ => EnvMode::Cp,
        }
    }

    pub fn eval_env(&self) -> EnvMode {
        self.env
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub mechanism: MechanismConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.architecture.arch.mechanism_kind().is_some() {
            self.mechanism.validate()?;
        }
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `ε_t = ε₀ dᵗ`, advanced once per environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub epsilon0: f64,
    pub decay: f64,
    pub step: u64,
}

impl ExplorationSchedule {
    pub fn new(epsilon0: f64, decay: f64) -> Self {
        Self { epsilon0, decay, step: 0 }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon0 * self.decay.powf(self.step as f64)
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: [f64; OBS_DIM],
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
}

/// One complete episode; only the last transition is terminal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.transitions.iter().map(|t| t.action).collect()
    }

    pub fn states(&self) -> Result<Tensor> {
        let flat = self.transitions.iter().flat_map(|t| t.state).collect();
        Tensor::new(flat, &[self.len(), OBS_DIM])
    }
}

fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Collects one episode. With probability `ε_t` the action is uniform, otherwise drawn from π.
pub fn run_episode(
    net: &ActorCritic,
    mode: EnvMode,
    ranges: &NcpRanges,
    schedule: &mut ExplorationSchedule,
    env_rng: &mut ChaCha8Rng,
    act_rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let (mut state, params) = envs::reset(mode, ranges, env_rng);
    let mut traj = Trajectory::default();
    loop {
        let obs = state.observation();
        let (probs, values) = net.act(&[obs], Some(&mut *act_rng))?;
        let probs = &probs[0];
        let action = if act_rng.random::<f64>() < schedule.epsilon() {
            act_rng.random_range(0..N_ACTIONS)
        } else {
            sample_categorical(probs, act_rng)
        };
        schedule.advance();
        let (next, reward, done) = envs::step(&state, &params, action)?;
        traj.transitions.push(Transition {
            state: obs,
            action,
            reward,
            done,
            log_prob: probs[action].max(f64::MIN_POSITIVE).ln(),
            value: values[0],
        });
        if done {
            return Ok(traj);
        }
        state = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_return: f64,
    pub solved: bool,
    pub returns: Vec<f64>,
}

/// Mean return over `n_trials` fresh episodes, run in lockstep. Never touches
/// parameters or any exploration state.
pub fn evaluate(
    net: &ActorCritic,
    mode: EnvMode,
    ranges: &NcpRanges,
    n_trials: usize,
    policy: EvalPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    if n_trials == 0 {
        return Err(Error::Input("n_trials must be at least 1".into()));
    }
    let mut envs: Vec<(EnvState, envs::PhysicsParams)> = (0..n_trials).map(|_| envs::reset(mode, ranges, rng)).collect();
    let mut returns = vec![0.0; n_trials];
    let mut live: Vec<usize> = (0..n_trials).collect();
    while !live.is_empty() {
        let obs: Vec<[f64; OBS_DIM]> = live.iter().map(|&i| envs[i].0.observation()).collect();
        let (probs, _) = net.act(&obs, None)?;
        let mut still = Vec::with_capacity(live.len());
        for (k, &i) in live.iter().enumerate() {
            let action = match policy {
                EvalPolicy::Greedy => argmax(&probs[k]),
                EvalPolicy::Sample => sample_categorical(&probs[k], rng),
            };
            let (next, r, done) = envs::step(&envs[i].0, &envs[i].1, action)?;
            returns[i] += r;
            envs[i].0 = next;
            if !done {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(summarize(returns))
}

/// `solved` requires at least 100 trials with mean return ≥ 495.
pub fn summarize(returns: Vec<f64>) -> Evaluation {
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    Evaluation {
        mean_return,
        solved: returns.len() >= 100 && mean_return >= SOLVED_THRESHOLD,
        returns,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based training episode index.
    pub episode: usize,
    pub train_return: f64,
    pub steps: usize,
    pub eval_return: Option<f64>,
    pub j_pi: f64,
    pub j_v: f64,
    pub entropy: f64,
    pub mix_penalty: Option<f64>,
    pub mask_penalty: Option<f64>,
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub epsilon: f64,
    pub solved: bool,
}

/// Elapsed time; excluded from equality so stats compare bit-for-bit across runs.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct WallClock(pub Duration);

impl PartialEq for WallClock {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<EpisodeRecord>,
    pub solved_at: Option<usize>,
    pub final_eval: Option<f64>,
    pub scalarizer: Option<ScalarizerParams>,
    pub aborted: Option<String>,
    pub wall_clock: WallClock,
}

impl TrainingStats {
    pub fn solved(&self) -> bool {
        self.solved_at.is_some()
    }

    /// Latest evaluation return at or before `episode`.
    pub fn eval_at(&self, episode: usize) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.episode <= episode)
            .filter_map(|r| r.eval_return)
            .next_back()
    }

    /// Evaluation return at the budget, counting a solved run as holding its solving score.
    pub fn final_eval_return(&self) -> Option<f64> {
        self.final_eval
    }
}

/// Named sub-streams of one seed, so adding draws in one place never shifts another.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const ENV: u64 = 1;
    pub const ACT: u64 = 2;
    pub const PENALTY: u64 = 3;
    pub const CALIBRATION: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    /// Evaluation after episode `e` uses stream `EVAL_BASE + e`.
    pub const EVAL_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// A network, its optimizer and the per-run training state.
pub struct Agent {
    pub net: ActorCritic,
    pub optimizer: Adam,
    pub temperatures: Temperatures,
    pub scalarizer: Option<ScalarizerParams>,
    recent_costs: (Vec<f64>, Vec<f64>),
}

pub struct UpdateStats {
    pub j_pi: f64,
    pub j_v: f64,
    pub entropy: f64,
    pub mix_penalty: Option<f64>,
    pub mask_penalty: Option<f64>,
}

impl Agent {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = ActorCritic::new(&cfg.architecture, &cfg.mechanism, &mut stream(seed, streams::INIT))?;
        Ok(Self {
            net,
            optimizer: Adam::new(cfg.train.lr),
            temperatures: Temperatures::new(&cfg.mechanism),
            scalarizer: None,
            recent_costs: (Vec::new(), Vec::new()),
        })
    }

    /// Unweighted A2C costs of one episode under the current parameters.
    pub fn episode_costs(&self, traj: &Trajectory, train: &TrainConfig) -> Result<(f64, f64)> {
        no_grad(|| {
            let out = self.net.forward(&traj.states()?, ForwardOptions::default())?;
            let (adv, returns) = advantages(traj, &out.value.to_vec(), train)?;
            let l = objectives::a2c_loss(&out.log_probs, &out.value, &traj.actions(), &adv, &returns, train.beta)?;
            Ok((l.policy.item(), l.value.item()))
        })
    }

    /// Fits the scalarizer from rollouts of the current (untrained) functions.
    pub fn calibrate(&mut self, train: &TrainConfig, seed: u64) -> Result<()> {
        let mut env_rng = stream(seed, streams::CALIBRATION);
        let mut act_rng = env_rng.clone();
        act_rng.set_stream(streams::CALIBRATION + (1 << 16));
        let mut schedule = ExplorationSchedule::new(train.epsilon0, 1.0);
        let mut pi = Vec::with_capacity(train.calibration_episodes);
        let mut v = Vec::with_capacity(train.calibration_episodes);
        for _ in 0..train.calibration_episodes {
            let traj = run_episode(&self.net, train.train_env(), &train.ncp_ranges, &mut schedule, &mut env_rng, &mut act_rng)?;
            let (a, b) = self.episode_costs(&traj, train)?;
            pi.push(a);
            v.push(b);
        }
        self.scalarizer = Some(multiobj::calibrate(&pi, &v, train.z)?);
        Ok(())
    }

    /// One gradient update from a complete episode.
    pub fn update(&mut self, traj: &Trajectory, train: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<UpdateStats> {
        let net = &self.net;
        let out = net.forward(
            &traj.states()?,
            ForwardOptions {
                mechanism_latents: net.arch().arch.mechanism_kind().is_some(),
                noise: Some(&mut *rng),
            },
        )?;
        let (adv, returns) = advantages(traj, &out.value.to_vec(), train)?;
        let a2c = objectives::a2c_loss(&out.log_probs, &out.value, &traj.actions(), &adv, &returns, train.beta)?;
        let obj = objectives::total_objective(net, &out, &a2c, &self.temperatures, rng)?;
        let stats = UpdateStats {
            j_pi: obj.policy.item(),
            j_v: obj.value.item(),
            entropy: obj.entropy,
            mix_penalty: obj.mix_measure,
            mask_penalty: obj.mask_measure,
        };
        let penalty_value = obj.penalty.as_ref().map(|p| p.item()).unwrap_or(0.0);
        if !(stats.j_pi.is_finite() && stats.j_v.is_finite() && penalty_value.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("loss (J_pi {}, J_v {}, penalty {})", stats.j_pi, stats.j_v, penalty_value),
                episode: 0,
            });
        }

        let (policy_term, value_term) = match (&self.scalarizer, train.multiobj.scalarizes()) {
            (Some(s), true) => (
                obj.policy.add_scalar(-s.policy.mean)?.scale(1.0 / s.policy.sigma)?,
                obj.value.add_scalar(-s.value.mean)?.scale(1.0 / s.value.sigma)?,
            ),
            _ => (obj.policy.clone(), obj.value.scale(train.value_coef)?),
        };
        let reg = net.registry();
        let mut grads = if train.multiobj.projects() {
            let grad_of = |t: &Tensor| -> Result<Vec<f64>> {
                reg.zero_grad();
                t.backward()?;
                Ok(reg.flat_grads())
            };
            let g_pi = grad_of(&policy_term)?;
            let g_v = grad_of(&value_term)?;
            let g_pen = match &obj.penalty {
                Some(p) => Some(grad_of(p)?),
                None => None,
            };
            let ranges = reg.flat_ranges(&net.shared_groups());
            let (a, b) = multiobj::pcgrad_on(&g_pi, &g_v, &ranges)?;
            let mut g: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            if let Some(p) = g_pen {
                g.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
            }
            g
        } else {
            reg.zero_grad();
            let mut total = policy_term.add(&value_term)?;
            if let Some(p) = &obj.penalty {
                total = total.add(p)?;
            }
            total.backward()?;
            reg.flat_grads()
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                episode: 0,
            });
        }
        if train.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, train.grad_clip);
        }
        reg.set_flat_grads(&grads)?;
        self.optimizer.step(reg);
        if self.net.mechanism().contrastive && net.arch().arch.mechanism_kind().is_some() {
            self.net.momentum_update()?;
        }
        self.temperatures.decay();

        if train.recalibrate_every > 0 && train.multiobj.scalarizes() {
            self.recent_costs.0.push(stats.j_pi);
            self.recent_costs.1.push(stats.j_v);
            if self.recent_costs.0.len() >= train.recalibrate_every {
                let mut s = multiobj::calibrate(&self.recent_costs.0, &self.recent_costs.1, train.z)?;
                s.stationary = false;
                self.scalarizer = Some(s);
                self.recent_costs.0.clear();
                self.recent_costs.1.clear();
            }
        }
        Ok(stats)
    }
}

/// Advantages (normalized when configured) and Monte Carlo returns of a finished episode.
fn advantages(traj: &Trajectory, values: &[f64], train: &TrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = values.to_vec();
    v.push(0.0);
    let est = objectives::gae(&traj.rewards(), &v, train.gamma, train.lambda)?;
    let adv = if train.normalize_advantages {
        objectives::normalize(&est.advantages)
    } else {
        est.advantages
    };
    Ok((adv, est.returns))
}

/// Full training run. Deterministic in `(cfg, seed)`.
pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainingStats> {
    train_agent(cfg, seed).map(|(stats, _)| stats)
}

/// Like [`train`], also returning the trained agent.
pub fn train_agent(cfg: &RunConfig, seed: u64) -> Result<(TrainingStats, Agent)> {
    let started = Instant::now();
    let mut agent = Agent::new(cfg, seed)?;
    let t = &cfg.train;
    let mut stats = TrainingStats {
        seed,
        config_hash: cfg.hash(),
        records: Vec::new(),
        solved_at: None,
        final_eval: None,
        scalarizer: None,
        aborted: None,
        wall_clock: WallClock::default(),
    };
    if t.episodes == 0 {
        return Ok((stats, agent));
    }
    if t.multiobj.scalarizes() {
        agent.calibrate(t, seed)?;
        stats.scalarizer = agent.scalarizer;
    }
    let mut env_rng = stream(seed, streams::ENV);
    let mut act_rng = stream(seed, streams::ACT);
    let mut pen_rng = stream(seed, streams::PENALTY);
    let mut schedule = ExplorationSchedule::new(t.epsilon0, t.epsilon_decay);

    for episode in 1..=t.episodes {
        let epsilon = schedule.epsilon();
        let traj = run_episode(&agent.net, t.train_env(), &t.ncp_ranges, &mut schedule, &mut env_rng, &mut act_rng)?;
        let (alpha_s, alpha_d) = (agent.temperatures.alpha_s(), agent.temperatures.alpha_d());
        let upd = match agent.update(&traj, t, &mut pen_rng) {
            Ok(u) => u,
            Err(Error::NonFinite { what, .. }) => {
                let reason = format!("non-finite {what} at episode {episode}");
                log::error!("seed {seed}: {reason}");
                stats.aborted = Some(reason);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut record = EpisodeRecord {
            episode,
            train_return: traj.total_return(),
            steps: traj.len(),
            eval_return: None,
            j_pi: upd.j_pi,
            j_v: upd.j_v,
            entropy: upd.entropy,
            mix_penalty: upd.mix_penalty,
            mask_penalty: upd.mask_penalty,
            alpha_s,
            alpha_d,
            epsilon,
            solved: false,
        };
        if episode % t.eval_interval == 0 || episode == t.episodes {
            let mut rng = stream(seed, streams::EVAL_BASE + episode as u64);
            let ev = evaluate(&agent.net, t.eval_env(), &t.ncp_ranges, t.eval_trials, t.eval_policy, &mut rng)?;
            record.eval_return = Some(ev.mean_return);
            record.solved = ev.solved;
            stats.final_eval = Some(ev.mean_return);
            if ev.solved && stats.solved_at.is_none() {
                stats.solved_at = Some(episode);
            }
        }
        let solved = record.solved;
        stats.records.push(record);
        if solved && t.stop_when_solved {
            break;
        }
    }
    stats.wall_clock = WallClock(started.elapsed());
    Ok((stats, agent))
}

/// Per-layer expected change in policy/value cosine similarity from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    /// 1-based hidden layer index.
    pub layer: usize,
    pub label: String,
    pub mean_delta: f64,
    pub per_model: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDeltas {
    pub layers: Vec<LayerDelta>,
    pub n_models: usize,
    pub n_rollouts: usize,
}

fn layer_labels(arch: &ArchitectureConfig) -> Vec<String> {
    let depth = arch.depth();
    (1..=depth)
        .map(|l| {
            if arch.arch.has_backbone() && l <= arch.backbone_layers {
                format!("backbone_{l}")
            } else if arch.arch.has_backbone() {
                format!("head_{}", l - arch.backbone_layers)
            } else {
                format!("hidden_{l}")
            }
        })
        .collect()
}

/// Mean over states of the per-layer cosine similarity between the policy and value activations.
pub fn layer_similarity(net: &ActorCritic, states: &Tensor) -> Result<Vec<f64>> {
    let out = no_grad(|| net.forward(states, ForwardOptions::default()))?;
    Ok(out
        .trace
        .policy
        .iter()
        .zip(&out.trace.value)
        .map(|(p, v)| {
            let width = *p.shape().last().unwrap();
            let rows = cosine_rows(&p.data(), &v.data(), width);
            rows.iter().sum::<f64>() / rows.len() as f64
        })
        .collect())
}

/// States visited by `n_rollouts` on-policy episodes (ε = 0).
pub fn collect_states(net: &ActorCritic, mode: EnvMode, ranges: &NcpRanges, n_rollouts: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut act_rng = rng.clone();
    act_rng.set_stream(streams::ROLLOUT + (1 << 16));
    let mut schedule = ExplorationSchedule::new(0.0, 1.0);
    let mut flat = Vec::new();
    for _ in 0..n_rollouts {
        let traj = run_episode(net, mode, ranges, &mut schedule, rng, &mut act_rng)?;
        flat.extend(traj.transitions.iter().flat_map(|t| t.state));
    }
    let n = flat.len() / OBS_DIM;
    Tensor::new(flat, &[n, OBS_DIM])
}

/// For each of `n_models` seeds: train a model, rebuild its untrained twin from
/// the same seed, roll out the trained agent, and compare per-layer similarity.
pub fn similarity_delta_experiment(cfg: &RunConfig, n_models: usize, n_rollouts: usize, base_seed: u64) -> Result<SimilarityDeltas> {
    if n_models == 0 || n_rollouts == 0 {
        return Err(Error::Input("n_models and n_rollouts must be positive".into()));
    }
    let labels = layer_labels(&cfg.architecture);
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for m in 0..n_models as u64 {
        let seed = base_seed + m;
        let (stats, trained) = train_agent(cfg, seed)?;
        if let Some(reason) = &stats.aborted {
            return Err(Error::NonFinite {
                what: format!("similarity model {seed}: {reason}"),
                episode: stats.records.len(),
            });
        }
        let untrained = Agent::new(cfg, seed)?;
        let mut rng = stream(seed, streams::ROLLOUT);
        let states = collect_states(&trained.net, cfg.train.eval_env(), &cfg.train.ncp_ranges, n_rollouts, &mut rng)?;
        let after = layer_similarity(&trained.net, &states)?;
        let before = layer_similarity(&untrained.net, &states)?;
        for (l, (a, b)) in after.iter().zip(&before).enumerate() {
            per_layer[l].push(a - b);
        }
    }
    Ok(SimilarityDeltas {
        layers: labels
            .into_iter()
            .zip(per_layer)
            .enumerate()
            .map(|(i, (label, per_model))| LayerDelta {
                layer: i + 1,
                label,
                mean_delta: per_model.iter().sum::<f64>() / per_model.len() as f64,
                per_model,
            })
            .collect(),
        n_models,
        n_rollouts,
    })
}
