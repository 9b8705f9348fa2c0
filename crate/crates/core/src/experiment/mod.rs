//! Training runs over the treatment grid and the measurements taken from them.
//!
//! Agent 0 carries the treatment bias; agent 1 always learns both heads.
//! Every stochastic draw in a run comes from one ChaCha8 stream seeded with
//! the run seed, consumed in a fixed order:
//!
//! 1. network initialization (agent 0 then agent 1; interaction head before rewiring head),
//! 2. per timestep: rewiring choices (agent 0, agent 1) when an opportunity
//!    exists, then interaction choices (agent 0, agent 1),
//! 3. after each episode: learner steps, each sampling its replay buffer
//!    (agent 0 interaction, agent 0 rewiring, agent 1 interaction, agent 1 rewiring).
//!
//! Transitions are added to the buffers when the episode ends, and the
//! learner then runs one step per `learn_every` environment steps of that
//! episode.

mod analyze;
mod checkpoint;
mod grid;
mod metrics;
mod output;

pub use analyze::{analyze, mean_se, AnalysisReport, ExcludedRun};
pub use checkpoint::{Checkpoint, HeadSnapshot, RngState};
pub use grid::{default_conditions, run_grid, run_single_entry, Condition, Manifest, ManifestEntry, RunStatus};
pub use metrics::{
    mutual_cooperation_rate, rewiring_response, AgentResponse, BinAccumulator, EpisodeStats, MetricsRow, ResponseCell,
    ResponseTally, RewiringResponse,
};
pub use output::{run_to_dir, CsvSink, MetricsSink, RunFiles};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentSpec, AgentStep, AgentTrajectory, Hyperparameters, InteractionBias, RewiringBias};
use crate::env::{self, InteractionAction, PayoffMatrix, RewiringAction, RewiringSchedule};
use crate::error::SimError;

/// Which fixed policy agent 0 carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bias {
    #[serde(rename = "none")]
    NoBias,
    #[serde(rename = "allc")]
    AllcBias,
    #[serde(rename = "tft")]
    TftBias,
    #[serde(rename = "ostracism")]
    OstracismBias,
}

impl Bias {
    pub const ALL: [Bias; 4] = [Bias::NoBias, Bias::AllcBias, Bias::TftBias, Bias::OstracismBias];

    pub fn as_str(self) -> &'static str {
        match self {
            Bias::NoBias => "none",
            Bias::AllcBias => "allc",
            Bias::TftBias => "tft",
            Bias::OstracismBias => "ostracism",
        }
    }
}

impl std::str::FromStr for Bias {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Bias::NoBias),
            "allc" => Ok(Bias::AllcBias),
            "tft" => Ok(Bias::TftBias),
            "ostracism" => Ok(Bias::OstracismBias),
            other => Err(format!("unknown bias `{other}` (expected none|allc|tft|ostracism)")),
        }
    }
}

/// Rewiring behavior used when rewiring learning is disabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenRewiring {
    #[default]
    UniformRandom,
    RandomNetwork,
}

fn default_true() -> bool {
    true
}
fn default_episodes() -> u64 {
    200_000
}
fn default_episode_length() -> u32 {
    env::DEFAULT_EPISODE_LENGTH
}
fn default_bin() -> u64 {
    100
}
fn default_window() -> f64 {
    0.1
}

/// One treatment cell plus seed and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: RewiringSchedule,
    pub bias: Bias,
    #[serde(default = "default_true")]
    pub rewiring_learning: bool,
    #[serde(default)]
    pub frozen_rewiring: FrozenRewiring,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default = "default_episode_length")]
    pub episode_length: u32,
    pub seed: u64,
    #[serde(default)]
    pub hyperparams: Hyperparameters,
    #[serde(default = "default_bin")]
    pub metrics_bin: u64,
    /// Fraction of final episodes over which rewiring responses are tallied.
    #[serde(default = "default_window")]
    pub response_window: f64,
    #[serde(default)]
    pub payoffs: PayoffMatrix,
}

impl RunConfig {
    pub fn new(schedule: RewiringSchedule, bias: Bias, episodes: u64, seed: u64) -> Self {
        RunConfig {
            schedule,
            bias,
            rewiring_learning: true,
            frozen_rewiring: FrozenRewiring::default(),
            episodes,
            episode_length: env::DEFAULT_EPISODE_LENGTH,
            seed,
            hyperparams: Hyperparameters::default(),
            metrics_bin: default_bin(),
            response_window: default_window(),
            payoffs: PayoffMatrix::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        if self.episode_length == 0 {
            return bad("episode_length must be >= 1".into());
        }
        if self.metrics_bin == 0 {
            return bad("metrics_bin must be >= 1".into());
        }
        if !(self.response_window > 0.0 && self.response_window <= 1.0) {
            return bad("response_window must lie in (0, 1]".into());
        }
        if !self.rewiring_learning
            && self.frozen_rewiring == FrozenRewiring::RandomNetwork
            && self.schedule == RewiringSchedule::NoRewiring
        {
            return bad("a frozen random rewiring network has no effect without rewiring opportunities".into());
        }
        self.hyperparams.validate().map_err(SimError::Config)
    }

    /// Stable identifier, e.g. `full-tft-s3` or `full-tft-frozen-s3`.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.condition_label('-'), self.seed)
    }

    /// Condition without the seed, e.g. `full:tft` or `full:tft:frozen`.
    pub fn condition_label(&self, sep: char) -> String {
        let mut s = format!("{}{sep}{}", self.schedule.as_str(), self.bias.as_str());
        if !self.rewiring_learning {
            s.push(sep);
            s.push_str(match self.frozen_rewiring {
                FrozenRewiring::UniformRandom => "frozen",
                FrozenRewiring::RandomNetwork => "frozennet",
            });
        }
        s
    }

    pub fn total_env_steps(&self) -> u64 {
        self.episodes * self.episode_length as u64
    }

    /// Agent 0 carries the bias; agent 1 is the unbiased learner.
    pub fn agent_specs(&self) -> [AgentSpec; 2] {
        let learned_rewiring = if self.rewiring_learning {
            RewiringBias::Learned
        } else {
            match self.frozen_rewiring {
                FrozenRewiring::UniformRandom => RewiringBias::UniformRandom,
                FrozenRewiring::RandomNetwork => RewiringBias::FrozenRandomNet,
            }
        };
        let (i0, r0) = match self.bias {
            Bias::NoBias => (InteractionBias::Learned, learned_rewiring),
            Bias::AllcBias => (InteractionBias::Allc, learned_rewiring),
            Bias::TftBias => (InteractionBias::Tft, learned_rewiring),
            Bias::OstracismBias => (InteractionBias::Learned, RewiringBias::Ostracism),
        };
        let spec = |interaction_bias, rewiring_bias| AgentSpec {
            interaction_bias,
            rewiring_bias,
            hyperparams: self.hyperparams.clone(),
        };
        [spec(i0, r0), spec(InteractionBias::Learned, learned_rewiring)]
    }
}

/// Everything observable about one timestep of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub timestep: u32,
    pub opportunity: bool,
    pub rewire: Option<[RewiringAction; 2]>,
    pub interaction: [InteractionAction; 2],
    pub connected: bool,
    pub payoffs: [f64; 2],
    /// What each agent saw of the other's previous interaction.
    pub other_prev: [Option<InteractionAction>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub episode_length: u32,
    pub steps: Vec<StepRecord>,
}

/// A run in progress.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: RunConfig,
    pub agents: [Agent; 2],
    rng: ChaCha8Rng,
    episodes_done: u64,
    env_steps: u64,
    learn_credit: u64,
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self, SimError> {
        let specs = config.agent_specs();
        Self::with_specs(config, specs)
    }

    pub fn with_specs(config: RunConfig, specs: [AgentSpec; 2]) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let horizon = config.total_env_steps() / config.hyperparams.learn_every as u64;
        let a0 = Agent::new(&specs[0], horizon, &mut rng);
        let a1 = Agent::new(&specs[1], horizon, &mut rng);
        Ok(Simulation { config, agents: [a0, a1], rng, episodes_done: 0, env_steps: 0, learn_credit: 0 })
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn epsilon(&self) -> f64 {
        self.config.hyperparams.epsilon_at(self.env_steps, self.config.total_env_steps())
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Play one episode, store its transitions, then run the learner.
    pub fn run_episode(&mut self) -> Result<EpisodeTrace, SimError> {
        let cfg = &self.config;
        let (mut state, mut obs) = env::reset_with(cfg.schedule, cfg.episode_length, cfg.payoffs);
        let mut steps = Vec::with_capacity(cfg.episode_length as usize);
        let mut trajs: [Vec<AgentStep>; 2] = Default::default();

        while !state.is_done() {
            let eps = cfg.hyperparams.epsilon_at(self.env_steps, cfg.total_env_steps());
            let opportunity = state.opportunity_now();
            let rewire = if opportunity {
                let r0 = self.agents[0].choose_rewiring(&obs[0], eps, &mut self.rng);
                let r1 = self.agents[1].choose_rewiring(&obs[1], eps, &mut self.rng);
                Some([r0, r1])
            } else {
                None
            };
            let interaction = [
                self.agents[0].choose_interaction(&obs[0], eps, &mut self.rng),
                self.agents[1].choose_interaction(&obs[1], eps, &mut self.rng),
            ];
            let timestep = state.timestep;
            let out = env::step(&mut state, rewire.unwrap_or([RewiringAction::Connect; 2]), interaction)?;
            let payoffs = [out.payoffs.0, out.payoffs.1];
            for k in 0..2 {
                trajs[k].push(AgentStep {
                    obs: obs[k],
                    opportunity,
                    rewire: rewire.map(|r| r[k]),
                    interaction: interaction[k],
                    reward: payoffs[k],
                });
            }
            steps.push(StepRecord {
                timestep,
                opportunity,
                rewire,
                interaction,
                connected: out.connected_after,
                payoffs,
                other_prev: [obs[0].other_prev(), obs[1].other_prev()],
            });
            obs = out.observations_next;
            self.env_steps += 1;
        }

        let [t0, t1] = trajs;
        let trajectories = [
            AgentTrajectory { steps: t0, final_obs: obs[0] },
            AgentTrajectory { steps: t1, final_obs: obs[1] },
        ];
        for (agent, traj) in self.agents.iter_mut().zip(&trajectories) {
            agent.record_episode(traj);
        }

        self.learn_credit += cfg.episode_length as u64;
        let every = cfg.hyperparams.learn_every as u64;
        while self.learn_credit >= every {
            self.learn_credit -= every;
            for agent in self.agents.iter_mut() {
                agent.learn(&mut self.rng)?;
            }
        }

        self.episodes_done += 1;
        Ok(EpisodeTrace { episode_length: cfg.episode_length, steps })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }
}

/// What a finished run reports besides its metrics rows.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub bins_written: u64,
    pub final_row: Option<MetricsRow>,
    pub response: RewiringResponse,
    pub checkpoint: Checkpoint,
}

/// Execute the full training loop, streaming one [`MetricsRow`] per bin to `sink`.
pub fn run_single(config: &RunConfig, sink: &mut dyn MetricsSink) -> Result<RunSummary, SimError> {
    run_single_with(Simulation::new(config.clone())?, sink, &mut |_| {})
}

/// As [`run_single`], on a prepared simulation and with a per-bin progress hook.
pub fn run_single_with(
    mut sim: Simulation,
    sink: &mut dyn MetricsSink,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<RunSummary, SimError> {
    let config = sim.config.clone();
    let run_id = config.run_id();
    let window = ((config.episodes as f64) * config.response_window).ceil() as u64;
    let window_start = config.episodes - window.clamp(1, config.episodes);
    let mut bins = BinAccumulator::new(&config);
    let mut tally = ResponseTally::default();
    let mut bins_written = 0;
    let mut final_row = None;

    for episode in 0..config.episodes {
        let trace = sim.run_episode()?;
        if episode >= window_start {
            tally.add(&trace);
        }
        if let Some(row) = bins.push(EpisodeStats::of(&trace), sim.epsilon()) {
            sink.write_row(&row).map_err(|source| SimError::Sink { bins_written, source })?;
            bins_written += 1;
            progress(&row);
            final_row = Some(row);
        }
    }
    if let Some(row) = bins.flush(sim.epsilon()) {
        sink.write_row(&row).map_err(|source| SimError::Sink { bins_written, source })?;
        bins_written += 1;
        progress(&row);
        final_row = Some(row);
    }
    sink.finish().map_err(|source| SimError::Sink { bins_written, source })?;

    Ok(RunSummary {
        run_id,
        bins_written,
        final_row,
        response: tally.finish(),
        checkpoint: sim.checkpoint(),
    })
}
