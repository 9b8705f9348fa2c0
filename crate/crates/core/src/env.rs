//! The two-agent iterated prisoner's dilemma with network rewiring.
//!
//! Each timestep runs in two phases. If the schedule grants a rewiring
//! opportunity, both agents submit a [`RewiringAction`] and the edge survives
//! only when both chose [`RewiringAction::Connect`] (bilateral tie-making,
//! unilateral tie-breaking). Without an opportunity the edge carries over.
//! Then the interaction actions are resolved against the [`PayoffMatrix`]
//! when connected, or pay zero to both agents when not.
//!
//! Agents always choose an interaction action, even while disconnected. That
//! choice earns nothing but is still shown to both agents on the next step.

use serde::{Deserialize, Serialize};

use crate::error::EnvError;

/// Default number of timesteps per episode.
pub const DEFAULT_EPISODE_LENGTH: u32 = 10;

/// Length of the flattened observation vector.
pub const OBS_DIM: usize = 8;

/// Cooperate or defect in the stage game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionAction {
    Cooperate,
    Defect,
}

impl InteractionAction {
    pub const ALL: [InteractionAction; 2] = [InteractionAction::Cooperate, InteractionAction::Defect];

    /// Q-head output index. Cooperate is 0.
    pub fn index(self) -> usize {
        match self {
            InteractionAction::Cooperate => 0,
            InteractionAction::Defect => 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        match index {
            0 => InteractionAction::Cooperate,
            1 => InteractionAction::Defect,
            _ => panic!("interaction action index out of range: {index}"),
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            InteractionAction::Cooperate => [1.0, 0.0],
            InteractionAction::Defect => [0.0, 1.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionAction::Cooperate => "cooperate",
            InteractionAction::Defect => "defect",
        }
    }
}

/// Keep (or form) the edge, or cut it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewiringAction {
    Connect,
    Disconnect,
}

impl RewiringAction {
    pub const ALL: [RewiringAction; 2] = [RewiringAction::Connect, RewiringAction::Disconnect];

    /// Q-head output index. Connect is 0.
    pub fn index(self) -> usize {
        match self {
            RewiringAction::Connect => 0,
            RewiringAction::Disconnect => 1,
        }
    }

    pub fn from_index(index: usize) -> Self {
        match index {
            0 => RewiringAction::Connect,
            1 => RewiringAction::Disconnect,
            _ => panic!("rewiring action index out of range: {index}"),
        }
    }
}

/// Stage-game payoffs as `(own, other)` pairs, keyed by `(own action, other action)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub cc: (f64, f64),
    pub cd: (f64, f64),
    pub dc: (f64, f64),
    pub dd: (f64, f64),
    pub disconnected_payoff: f64,
}

impl Default for PayoffMatrix {
    fn default() -> Self {
        PayoffMatrix {
            cc: (1.0, 1.0),
            cd: (-1.0, 2.0),
            dc: (2.0, -1.0),
            dd: (0.0, 0.0),
            disconnected_payoff: 0.0,
        }
    }
}

impl PayoffMatrix {
    /// True when temptation > reward > punishment > sucker.
    pub fn is_prisoners_dilemma(&self) -> bool {
        self.dc.0 > self.cc.0 && self.cc.0 > self.dd.0 && self.dd.0 > self.cd.0
    }

    fn cell(&self, a1: InteractionAction, a2: InteractionAction) -> (f64, f64) {
        use InteractionAction::*;
        match (a1, a2) {
            (Cooperate, Cooperate) => self.cc,
            (Cooperate, Defect) => self.cd,
            (Defect, Cooperate) => self.dc,
            (Defect, Defect) => self.dd,
        }
    }
}

/// When the agents are allowed to rewire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewiringSchedule {
    /// Never; the edge stays up for the whole episode.
    #[serde(rename = "none")]
    NoRewiring,
    /// Even timesteps only (2, 4, ...).
    #[serde(rename = "half")]
    HalfRewiring,
    /// Every timestep, including the first.
    #[serde(rename = "full")]
    FullRewiring,
}

impl RewiringSchedule {
    pub const ALL: [RewiringSchedule; 3] = [
        RewiringSchedule::NoRewiring,
        RewiringSchedule::HalfRewiring,
        RewiringSchedule::FullRewiring,
    ];

    /// Opportunity predicate for a 1-based timestep, without range checking.
    pub fn grants(self, timestep: u32) -> bool {
        match self {
            RewiringSchedule::NoRewiring => false,
            RewiringSchedule::HalfRewiring => timestep % 2 == 0,
            RewiringSchedule::FullRewiring => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewiringSchedule::NoRewiring => "none",
            RewiringSchedule::HalfRewiring => "half",
            RewiringSchedule::FullRewiring => "full",
        }
    }
}

impl std::str::FromStr for RewiringSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(RewiringSchedule::NoRewiring),
            "half" => Ok(RewiringSchedule::HalfRewiring),
            "full" => Ok(RewiringSchedule::FullRewiring),
            other => Err(format!("unknown schedule `{other}` (expected none|half|full)")),
        }
    }
}

/// Whether `timestep` (1-based) carries a rewiring opportunity.
pub fn rewiring_opportunity(
    schedule: RewiringSchedule,
    timestep: u32,
    episode_length: u32,
) -> Result<bool, EnvError> {
    if timestep == 0 || timestep > episode_length {
        return Err(EnvError::TimestepOutOfRange { timestep, episode_length });
    }
    Ok(schedule.grants(timestep))
}

/// Edge state after the rewiring phase.
pub fn connection_update(
    prev_connected: bool,
    opportunity: bool,
    a1: RewiringAction,
    a2: RewiringAction,
) -> bool {
    if !opportunity {
        return prev_connected;
    }
    a1 == RewiringAction::Connect && a2 == RewiringAction::Connect
}

/// Payoffs to agent 1 and agent 2.
pub fn payoff(
    a1: InteractionAction,
    a2: InteractionAction,
    connected: bool,
    matrix: &PayoffMatrix,
) -> (f64, f64) {
    if connected {
        matrix.cell(a1, a2)
    } else {
        (matrix.disconnected_payoff, matrix.disconnected_payoff)
    }
}

/// One agent's view of the previous timestep, as four one-hot pairs:
/// own interaction, other's interaction, edge presence, rewiring opportunity.
///
/// An absent interaction (first timestep) encodes as `[0, 0]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64; OBS_DIM] {
        &self.0
    }

    /// Bit `i` set iff component `i` is 1. Distinct observations map to distinct codes.
    pub fn code(&self) -> u8 {
        self.0
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &v)| if v != 0.0 { acc | (1 << i) } else { acc })
    }

    fn decode_pair(pair: [f64; 2]) -> Option<InteractionAction> {
        match pair {
            [1.0, 0.0] => Some(InteractionAction::Cooperate),
            [0.0, 1.0] => Some(InteractionAction::Defect),
            _ => None,
        }
    }

    pub fn own_prev(&self) -> Option<InteractionAction> {
        Self::decode_pair([self.0[0], self.0[1]])
    }

    pub fn other_prev(&self) -> Option<InteractionAction> {
        Self::decode_pair([self.0[2], self.0[3]])
    }

    pub fn edge_prev(&self) -> bool {
        self.0[4] == 1.0
    }

    pub fn opportunity_prev(&self) -> bool {
        self.0[6] == 1.0
    }
}

fn flag(b: bool) -> [f64; 2] {
    if b {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Encode one agent's observation.
pub fn encode_observation(
    own_prev: Option<InteractionAction>,
    other_prev: Option<InteractionAction>,
    edge_prev: bool,
    opportunity_prev: bool,
) -> Observation {
    let own = own_prev.map_or([0.0, 0.0], InteractionAction::one_hot);
    let other = other_prev.map_or([0.0, 0.0], InteractionAction::one_hot);
    let edge = flag(edge_prev);
    let opp = flag(opportunity_prev);
    Observation([
        own[0], own[1], other[0], other[1], edge[0], edge[1], opp[0], opp[1],
    ])
}

/// Both agents' observations. Agent 2's view swaps the interaction slots.
pub fn observe_pair(
    last_interaction: Option<[InteractionAction; 2]>,
    edge_prev: bool,
    opportunity_prev: bool,
) -> [Observation; 2] {
    let (a1, a2) = match last_interaction {
        Some([a1, a2]) => (Some(a1), Some(a2)),
        None => (None, None),
    };
    [
        encode_observation(a1, a2, edge_prev, opportunity_prev),
        encode_observation(a2, a1, edge_prev, opportunity_prev),
    ]
}

/// Mutable episode state. Create with [`reset`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    /// Next timestep to be played, 1-based. Equals `episode_length + 1` once finished.
    pub timestep: u32,
    pub connected: bool,
    pub last_interaction: Option<[InteractionAction; 2]>,
    pub last_rewire_opportunity: bool,
    pub schedule: RewiringSchedule,
    pub episode_length: u32,
    pub payoffs: PayoffMatrix,
}

impl EnvState {
    pub fn is_done(&self) -> bool {
        self.timestep > self.episode_length
    }

    /// Observations for the upcoming timestep.
    pub fn observations(&self) -> [Observation; 2] {
        observe_pair(self.last_interaction, self.connected, self.last_rewire_opportunity)
    }

    /// Opportunity at the upcoming timestep.
    pub fn opportunity_now(&self) -> bool {
        self.schedule.grants(self.timestep)
    }
}

/// Result of one [`step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub payoffs: (f64, f64),
    pub connected_after: bool,
    pub interacted: bool,
    pub opportunity: bool,
    pub observations_next: [Observation; 2],
}

/// Start an episode with the default episode length and payoffs.
pub fn reset(schedule: RewiringSchedule) -> (EnvState, [Observation; 2]) {
    reset_with(schedule, DEFAULT_EPISODE_LENGTH, PayoffMatrix::default())
}

pub fn reset_with(
    schedule: RewiringSchedule,
    episode_length: u32,
    payoffs: PayoffMatrix,
) -> (EnvState, [Observation; 2]) {
    let state = EnvState {
        timestep: 1,
        connected: true,
        last_interaction: None,
        last_rewire_opportunity: false,
        schedule,
        episode_length,
        payoffs,
    };
    let obs = state.observations();
    (state, obs)
}

/// Advance one timestep in place.
///
/// `rewire_actions` are ignored when the schedule grants no opportunity.
pub fn step(
    state: &mut EnvState,
    rewire_actions: [RewiringAction; 2],
    interaction_actions: [InteractionAction; 2],
) -> Result<StepOutcome, EnvError> {
    if state.is_done() {
        return Err(EnvError::EpisodeFinished { episode_length: state.episode_length });
    }
    let opportunity = rewiring_opportunity(state.schedule, state.timestep, state.episode_length)?;
    let connected = connection_update(
        state.connected,
        opportunity,
        rewire_actions[0],
        rewire_actions[1],
    );
    let payoffs = payoff(
        interaction_actions[0],
        interaction_actions[1],
        connected,
        &state.payoffs,
    );

    state.connected = connected;
    state.last_interaction = Some(interaction_actions);
    state.last_rewire_opportunity = opportunity;
    state.timestep += 1;

    Ok(StepOutcome {
        payoffs,
        connected_after: connected,
        interacted: connected,
        opportunity,
        observations_next: state.observations(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use InteractionAction::*;
    use RewiringAction::*;

    #[test]
    fn opportunity_schedules() {
        assert!(rewiring_opportunity(RewiringSchedule::FullRewiring, 3, 10).unwrap());
        assert!(!rewiring_opportunity(RewiringSchedule::HalfRewiring, 3, 10).unwrap());
        assert!(rewiring_opportunity(RewiringSchedule::HalfRewiring, 4, 10).unwrap());
        assert!(!rewiring_opportunity(RewiringSchedule::HalfRewiring, 1, 10).unwrap());
        assert!(rewiring_opportunity(RewiringSchedule::FullRewiring, 1, 10).unwrap());
        for t in 1..=10 {
            assert!(!rewiring_opportunity(RewiringSchedule::NoRewiring, t, 10).unwrap());
        }
    }

    #[test]
    fn opportunity_timestep_multisets() {
        let collect = |s: RewiringSchedule| -> Vec<u32> {
            (1..=10).filter(|&t| rewiring_opportunity(s, t, 10).unwrap()).collect()
        };
        assert_eq!(collect(RewiringSchedule::FullRewiring), (1..=10).collect::<Vec<_>>());
        assert_eq!(collect(RewiringSchedule::HalfRewiring), vec![2, 4, 6, 8, 10]);
        assert!(collect(RewiringSchedule::NoRewiring).is_empty());
    }

    #[test]
    fn opportunity_rejects_out_of_range() {
        assert!(rewiring_opportunity(RewiringSchedule::FullRewiring, 0, 10).is_err());
        assert!(rewiring_opportunity(RewiringSchedule::FullRewiring, 11, 10).is_err());
    }

    #[test]
    fn connection_examples() {
        assert!(connection_update(true, true, Connect, Connect));
        assert!(!connection_update(true, true, Connect, Disconnect));
        assert!(!connection_update(false, false, Connect, Connect));
        assert!(connection_update(true, false, Disconnect, Disconnect));
    }

    #[test]
    fn payoff_examples() {
        let m = PayoffMatrix::default();
        assert!(m.is_prisoners_dilemma());
        assert_eq!(payoff(Cooperate, Cooperate, true, &m), (1.0, 1.0));
        assert_eq!(payoff(Defect, Cooperate, true, &m), (2.0, -1.0));
        assert_eq!(payoff(Cooperate, Defect, true, &m), (-1.0, 2.0));
        assert_eq!(payoff(Defect, Defect, false, &m), (0.0, 0.0));
    }

    #[test]
    fn reset_observation_defaults() {
        for schedule in RewiringSchedule::ALL {
            let (state, obs) = reset(schedule);
            assert!(state.connected);
            assert_eq!(state.timestep, 1);
            for o in obs {
                assert_eq!(o.0, [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn encode_examples() {
        let o = encode_observation(Some(Cooperate), Some(Defect), true, true);
        assert_eq!(o.0, [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let o = encode_observation(None, None, true, false);
        assert_eq!(o.0, [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let [a, b] = observe_pair(Some([Cooperate, Defect]), false, true);
        assert_eq!(a.own_prev(), Some(Cooperate));
        assert_eq!(a.other_prev(), Some(Defect));
        assert_eq!(b.own_prev(), Some(Defect));
        assert_eq!(b.other_prev(), Some(Cooperate));
        assert_eq!(a.0[4..], b.0[4..]);
    }

    #[test]
    fn step_connected_cooperation() {
        let (mut s, _) = reset(RewiringSchedule::FullRewiring);
        let out = step(&mut s, [Connect, Connect], [Cooperate, Cooperate]).unwrap();
        assert!(out.connected_after && out.interacted);
        assert_eq!(out.payoffs, (1.0, 1.0));
        assert_eq!(s.timestep, 2);
    }

    #[test]
    fn step_unilateral_break_pays_zero() {
        for a in InteractionAction::ALL {
            for b in InteractionAction::ALL {
                let (mut s, _) = reset(RewiringSchedule::FullRewiring);
                let out = step(&mut s, [Disconnect, Connect], [a, b]).unwrap();
                assert!(!out.connected_after);
                assert_eq!(out.payoffs, (0.0, 0.0));
                // the choice is still recorded
                assert_eq!(out.observations_next[0].own_prev(), Some(a));
                assert_eq!(out.observations_next[0].other_prev(), Some(b));
                assert!(!out.observations_next[0].edge_prev());
            }
        }
    }

    #[test]
    fn step_without_opportunity_keeps_edge() {
        let (mut s, _) = reset(RewiringSchedule::NoRewiring);
        for _ in 0..10 {
            let out = step(&mut s, [Disconnect, Disconnect], [Defect, Defect]).unwrap();
            assert!(out.connected_after);
            assert!(!out.opportunity);
        }
        assert!(s.is_done());
        assert!(step(&mut s, [Connect, Connect], [Cooperate, Cooperate]).is_err());
    }

    #[test]
    fn half_schedule_edge_persists_across_odd_steps() {
        let (mut s, _) = reset(RewiringSchedule::HalfRewiring);
        step(&mut s, [Disconnect, Disconnect], [Cooperate, Cooperate]).unwrap();
        assert!(s.connected);
        let out = step(&mut s, [Disconnect, Connect], [Cooperate, Cooperate]).unwrap();
        assert!(!out.connected_after);
        assert!(out.observations_next[0].opportunity_prev());
        let out = step(&mut s, [Connect, Connect], [Cooperate, Cooperate]).unwrap();
        assert!(!out.connected_after);
        assert!(!out.observations_next[1].opportunity_prev());
    }

    #[test]
    fn observation_codes_are_distinct() {
        let mut codes = std::collections::HashSet::new();
        let opts = [None, Some(Cooperate), Some(Defect)];
        for own in opts {
            for other in opts {
                for edge in [false, true] {
                    for opp in [false, true] {
                        codes.insert(encode_observation(own, other, edge, opp).code());
                    }
                }
            }
        }
        assert_eq!(codes.len(), 36);
    }
}
