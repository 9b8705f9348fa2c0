//! Agents: two independent Q-heads (interaction and rewiring) trained with
//! Double DQN over prioritized replay, or fixed behaviors in their place.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{InteractionAction, Observation, RewiringAction};
use crate::error::NetError;
use crate::nn::{apply_update, Activations, AdamConfig, MlpParams, OptimizerState, QNetworkPair, OUTPUT};
use crate::replay::{beta_schedule, PerConfig, PrioritizedReplay, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    /// `None` means 5% of the run's environment steps.
    pub epsilon_decay_steps: Option<u64>,
    pub batch_size: usize,
    /// Learner steps between target-network syncs.
    pub target_sync_period: u64,
    /// Environment steps per learner step, once the buffer is warm.
    pub learn_every: u32,
    pub per: PerConfig,
    pub optimizer: AdamConfig,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_steps: None,
            batch_size: 64,
            target_sync_period: 1_000,
            learn_every: 1,
            per: PerConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err("gamma must lie in [0, 1)".into());
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.target_sync_period == 0 {
            return Err("target_sync_period must be >= 1".into());
        }
        if self.learn_every == 0 {
            return Err("learn_every must be >= 1".into());
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err("learning_rate must be >= 0".into());
        }
        self.per.validate().map_err(|e| e.to_string())
    }

    /// Exploration rate after `env_step` environment steps.
    pub fn epsilon_at(&self, env_step: u64, total_env_steps: u64) -> f64 {
        let decay = self
            .epsilon_decay_steps
            .unwrap_or_else(|| ((total_env_steps as f64) * 0.05).round() as u64);
        if decay == 0 || env_step >= decay {
            return self.epsilon_end;
        }
        let frac = env_step as f64 / decay as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Greedy choice with ties broken toward index 0.
pub fn greedy(q: [f64; OUTPUT]) -> usize {
    if q[1] > q[0] {
        1
    } else {
        0
    }
}

/// Epsilon-greedy over the online network.
pub fn select_action<R: Rng + ?Sized>(
    online: &MlpParams,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..OUTPUT)
    } else {
        greedy(online.forward(obs.as_slice()))
    }
}

/// `reward + discount * Q_target(next)[argmax_a Q_online(next, a)]`.
pub fn double_dqn_target(pair: &QNetworkPair, reward: f64, discount: f64, next_obs: &Observation) -> f64 {
    if discount == 0.0 {
        return reward;
    }
    let a = greedy(pair.online.forward(next_obs.as_slice()));
    reward + discount * pair.target.forward(next_obs.as_slice())[a]
}

/// Summary of one learner step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdStats {
    pub mean_abs_td: f64,
    pub max_abs_td: f64,
    pub weighted_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LearnOutcome {
    Trained(TdStats),
    Disabled,
    InsufficientData,
}

/// One Q-head: networks, replay buffer and optimizer.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub networks: QNetworkPair,
    pub buffer: PrioritizedReplay,
    pub optimizer: OptimizerState,
    pub learning_enabled: bool,
    pub steps_done: u64,
    batch_size: usize,
    target_sync_period: u64,
    beta_horizon: u64,
}

/// Per-observation forward cache for one learner step, keyed by observation code.
struct ForwardCache {
    slot: [u8; 256],
    online: Vec<(Observation, Activations)>,
    target: Vec<Option<[f64; OUTPUT]>>,
}

impl ForwardCache {
    const EMPTY: u8 = u8::MAX;

    fn new() -> Self {
        ForwardCache { slot: [Self::EMPTY; 256], online: Vec::with_capacity(40), target: Vec::with_capacity(40) }
    }

    fn index(&mut self, net: &MlpParams, obs: &Observation) -> usize {
        let code = obs.code() as usize;
        if self.slot[code] == Self::EMPTY {
            self.slot[code] = self.online.len() as u8;
            self.online.push((*obs, net.forward_full(obs.as_slice())));
            self.target.push(None);
        }
        self.slot[code] as usize
    }

    fn target_q(&mut self, pair: &QNetworkPair, obs: &Observation) -> ([f64; OUTPUT], [f64; OUTPUT]) {
        let i = self.index(&pair.online, obs);
        let t = *self.target[i].get_or_insert_with(|| pair.target.forward(obs.as_slice()));
        (self.online[i].1.q, t)
    }
}

impl PolicyHead {
    /// `beta_horizon` is the learner-step count over which the IS exponent anneals.
    pub fn new<R: Rng + ?Sized>(hp: &Hyperparameters, beta_horizon: u64, learning_enabled: bool, rng: &mut R) -> Self {
        PolicyHead {
            networks: QNetworkPair::init(rng),
            buffer: PrioritizedReplay::new(hp.per.clone()).expect("validated replay config"),
            optimizer: OptimizerState::new(hp.optimizer.clone()),
            learning_enabled,
            steps_done: 0,
            batch_size: hp.batch_size,
            target_sync_period: hp.target_sync_period,
            beta_horizon,
        }
    }

    pub fn select_action<R: Rng + ?Sized>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> usize {
        select_action(&self.networks.online, obs, epsilon, rng)
    }

    pub fn q_values(&self, obs: &Observation) -> [f64; OUTPUT] {
        self.networks.online.forward(obs.as_slice())
    }

    /// Store a transition at maximum priority. Ignored for disabled heads.
    pub fn remember(&mut self, t: Transition) {
        if self.learning_enabled {
            self.buffer.push(t);
        }
    }

    /// Sample a batch, take one importance-weighted gradient step toward the
    /// Double-DQN targets, refresh the sampled priorities, and sync the
    /// target network every `target_sync_period` learner steps.
    pub fn learn_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<LearnOutcome, NetError> {
        if !self.learning_enabled {
            return Ok(LearnOutcome::Disabled);
        }
        if !self.buffer.can_sample() {
            return Ok(LearnOutcome::InsufficientData);
        }
        let beta = beta_schedule(self.buffer.config(), self.steps_done, self.beta_horizon);
        let batch = self
            .buffer
            .sample(self.batch_size, beta, rng)
            .expect("buffer checked for sampling");

        let mut cache = ForwardCache::new();
        let mut out_grads: Vec<[f64; OUTPUT]> = Vec::with_capacity(40);
        let mut td_abs = Vec::with_capacity(batch.transitions.len());
        let scale = 1.0 / batch.transitions.len() as f64;
        let mut loss = 0.0;

        for (t, &w) in batch.transitions.iter().zip(&batch.is_weights) {
            let target = if t.discount == 0.0 {
                t.reward
            } else {
                let (q_online, q_target) = cache.target_q(&self.networks, &t.next_obs);
                t.reward + t.discount * q_target[greedy(q_online)]
            };
            let i = cache.index(&self.networks.online, &t.obs);
            if out_grads.len() <= i {
                out_grads.resize(i + 1, [0.0; OUTPUT]);
            }
            let td = cache.online[i].1.q[t.action] - target;
            out_grads[i][t.action] += w * td * scale;
            loss += 0.5 * w * td * td * scale;
            td_abs.push(td.abs());
        }

        let mut grad = MlpParams::zeros();
        for (i, g) in out_grads.iter().enumerate() {
            if g[0] != 0.0 || g[1] != 0.0 {
                let (obs, act) = &cache.online[i];
                self.networks.online.accumulate_gradient(obs.as_slice(), act, *g, &mut grad);
            }
        }
        apply_update(&mut self.networks.online, &mut self.optimizer, &grad);
        self.networks.online.check_finite()?;

        self.buffer.update_priorities(&batch.indices, &td_abs);
        self.steps_done += 1;
        if self.steps_done % self.target_sync_period == 0 {
            self.networks.sync_target();
        }

        let n = td_abs.len() as f64;
        Ok(LearnOutcome::Trained(TdStats {
            mean_abs_td: td_abs.iter().sum::<f64>() / n,
            max_abs_td: td_abs.iter().cloned().fold(0.0, f64::max),
            weighted_loss: loss,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionBias {
    Learned,
    /// Always cooperate.
    Allc,
    /// Cooperate first, then copy the other's previous interaction.
    Tft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewiringBias {
    Learned,
    /// Connect after the other cooperated (or at the start), disconnect after it defected.
    Ostracism,
    /// Connect with probability 1/2.
    UniformRandom,
    /// Epsilon-greedy over a randomly initialized network that never trains.
    FrozenRandomNet,
}

/// Fixed interaction behaviors. `Learned` is not a fixed behavior.
pub fn fixed_interaction(bias: InteractionBias, obs: &Observation) -> InteractionAction {
    match bias {
        InteractionBias::Allc => InteractionAction::Cooperate,
        InteractionBias::Tft => match obs.other_prev() {
            Some(InteractionAction::Defect) => InteractionAction::Defect,
            _ => InteractionAction::Cooperate,
        },
        InteractionBias::Learned => panic!("learned interaction has no fixed rule"),
    }
}

/// Fixed rewiring behaviors. Only `Ostracism` and `UniformRandom` are rules.
pub fn fixed_rewiring<R: Rng + ?Sized>(bias: RewiringBias, obs: &Observation, rng: &mut R) -> RewiringAction {
    match bias {
        RewiringBias::Ostracism => match obs.other_prev() {
            Some(InteractionAction::Defect) => RewiringAction::Disconnect,
            _ => RewiringAction::Connect,
        },
        RewiringBias::UniformRandom => {
            if rng.gen_bool(0.5) {
                RewiringAction::Connect
            } else {
                RewiringAction::Disconnect
            }
        }
        other => panic!("{other:?} rewiring has no fixed rule"),
    }
}

/// One agent's record of a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentStep {
    pub obs: Observation,
    pub opportunity: bool,
    /// Chosen only when an opportunity exists.
    pub rewire: Option<RewiringAction>,
    pub interaction: InteractionAction,
    pub reward: f64,
}

/// One agent's view of a finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrajectory {
    pub steps: Vec<AgentStep>,
    /// Observation after the last step.
    pub final_obs: Observation,
}

/// Plain one-step transitions for the interaction head; the last one is terminal.
pub fn interaction_transitions(traj: &AgentTrajectory, gamma: f64) -> Vec<Transition> {
    let n = traj.steps.len();
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let last = t + 1 == n;
            Transition {
                obs: s.obs,
                action: s.interaction.index(),
                reward: s.reward,
                discount: if last { 0.0 } else { gamma },
                next_obs: if last { traj.final_obs } else { traj.steps[t + 1].obs },
            }
        })
        .collect()
}

/// Rewiring-head transitions spanning the gap between consecutive opportunities.
///
/// For an opportunity at step `t` followed by the next one `n` steps later, the
/// reward is `sum_k gamma^k r_{t+k}` over `k < n` and the discount is `gamma^n`.
/// The last opportunity accumulates rewards to the end of the episode and is
/// terminal (discount 0).
pub fn rewiring_transitions(traj: &AgentTrajectory, gamma: f64) -> Vec<Transition> {
    let opps: Vec<usize> = traj
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.opportunity && s.rewire.is_some())
        .map(|(i, _)| i)
        .collect();
    opps.iter()
        .enumerate()
        .map(|(k, &t)| {
            let next = opps.get(k + 1).copied();
            let end = next.unwrap_or(traj.steps.len());
            let mut reward = 0.0;
            let mut factor = 1.0;
            for s in &traj.steps[t..end] {
                reward += factor * s.reward;
                factor *= gamma;
            }
            let s = &traj.steps[t];
            Transition {
                obs: s.obs,
                action: s.rewire.expect("opportunity step has a rewiring action").index(),
                reward,
                discount: if next.is_some() { factor } else { 0.0 },
                next_obs: next.map_or(traj.final_obs, |n| traj.steps[n].obs),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub interaction_bias: InteractionBias,
    pub rewiring_bias: RewiringBias,
    pub hyperparams: Hyperparameters,
}

#[derive(Clone, Debug)]
pub enum InteractionController {
    Learned(PolicyHead),
    Fixed(InteractionBias),
}

#[derive(Clone, Debug)]
pub enum RewiringController {
    Learned(PolicyHead),
    /// Frozen network; never trains.
    Frozen(PolicyHead),
    Fixed(RewiringBias),
}

/// An agent with one interaction and one rewiring controller.
#[derive(Clone, Debug)]
pub struct Agent {
    pub interaction: InteractionController,
    pub rewiring: RewiringController,
    gamma: f64,
}

impl Agent {
    /// Learned heads are initialized in order: interaction, then rewiring.
    pub fn new<R: Rng + ?Sized>(spec: &AgentSpec, beta_horizon: u64, rng: &mut R) -> Self {
        let hp = &spec.hyperparams;
        let interaction = match spec.interaction_bias {
            InteractionBias::Learned => InteractionController::Learned(PolicyHead::new(hp, beta_horizon, true, rng)),
            bias => InteractionController::Fixed(bias),
        };
        let rewiring = match spec.rewiring_bias {
            RewiringBias::Learned => RewiringController::Learned(PolicyHead::new(hp, beta_horizon, true, rng)),
            RewiringBias::FrozenRandomNet => RewiringController::Frozen(PolicyHead::new(hp, beta_horizon, false, rng)),
            bias => RewiringController::Fixed(bias),
        };
        Agent { interaction, rewiring, gamma: hp.gamma }
    }

    pub fn choose_rewiring<R: Rng + ?Sized>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> RewiringAction {
        match &self.rewiring {
            RewiringController::Learned(h) | RewiringController::Frozen(h) => {
                RewiringAction::from_index(h.select_action(obs, epsilon, rng))
            }
            RewiringController::Fixed(bias) => fixed_rewiring(*bias, obs, rng),
        }
    }

    pub fn choose_interaction<R: Rng + ?Sized>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> InteractionAction {
        match &self.interaction {
            InteractionController::Learned(h) => InteractionAction::from_index(h.select_action(obs, epsilon, rng)),
            InteractionController::Fixed(bias) => fixed_interaction(*bias, obs),
        }
    }

    /// Feed a finished episode into the learned heads' buffers.
    pub fn record_episode(&mut self, traj: &AgentTrajectory) {
        if let InteractionController::Learned(h) = &mut self.interaction {
            for t in interaction_transitions(traj, self.gamma) {
                h.remember(t);
            }
        }
        if let RewiringController::Learned(h) = &mut self.rewiring {
            for t in rewiring_transitions(traj, self.gamma) {
                h.remember(t);
            }
        }
    }

    /// One learner step on each trainable head (interaction first).
    pub fn learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<[LearnOutcome; 2], NetError> {
        let i = match &mut self.interaction {
            InteractionController::Learned(h) => h.learn_step(rng)?,
            InteractionController::Fixed(_) => LearnOutcome::Disabled,
        };
        let r = match &mut self.rewiring {
            RewiringController::Learned(h) => h.learn_step(rng)?,
            _ => LearnOutcome::Disabled,
        };
        Ok([i, r])
    }

    pub fn interaction_head(&self) -> Option<&PolicyHead> {
        match &self.interaction {
            InteractionController::Learned(h) => Some(h),
            InteractionController::Fixed(_) => None,
        }
    }

    pub fn rewiring_head(&self) -> Option<&PolicyHead> {
        match &self.rewiring {
            RewiringController::Learned(h) | RewiringController::Frozen(h) => Some(h),
            RewiringController::Fixed(_) => None,
        }
    }

    pub fn rewiring_head_mut(&mut self) -> Option<&mut PolicyHead> {
        match &mut self.rewiring {
            RewiringController::Learned(h) | RewiringController::Frozen(h) => Some(h),
            RewiringController::Fixed(_) => None,
        }
    }

    /// Interaction and rewiring heads, where present.
    pub fn heads_mut(&mut self) -> [Option<&mut PolicyHead>; 2] {
        let i = match &mut self.interaction {
            InteractionController::Learned(h) => Some(h),
            InteractionController::Fixed(_) => None,
        };
        let r = match &mut self.rewiring {
            RewiringController::Learned(h) | RewiringController::Frozen(h) => Some(h),
            RewiringController::Fixed(_) => None,
        };
        [i, r]
    }

    pub fn interaction_head_mut(&mut self) -> Option<&mut PolicyHead> {
        match &mut self.interaction {
            InteractionController::Learned(h) => Some(h),
            InteractionController::Fixed(_) => None,
        }
    }
}
