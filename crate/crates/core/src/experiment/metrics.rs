use serde::{Deserialize, Serialize};

use super::{EpisodeTrace, RunConfig};
use crate::env::{InteractionAction, RewiringAction};

/// Fraction of timesteps in which the pair was connected and both cooperated.
pub fn mutual_cooperation_rate(trace: &EpisodeTrace) -> f64 {
    let n = trace
        .steps
        .iter()
        .filter(|s| s.connected && s.interaction == [InteractionAction::Cooperate; 2])
        .count();
    n as f64 / trace.episode_length as f64
}

/// Per-episode measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub mutual_coop_rate: f64,
    pub connection_rate: f64,
    /// Fraction of timesteps each agent chose to cooperate, connected or not.
    pub coop_rate: [f64; 2],
    /// Episode return per agent.
    pub reward: [f64; 2],
}

impl EpisodeStats {
    pub fn of(trace: &EpisodeTrace) -> Self {
        let len = trace.episode_length as f64;
        let connected = trace.steps.iter().filter(|s| s.connected).count() as f64;
        let coop = |k: usize| {
            trace.steps.iter().filter(|s| s.interaction[k] == InteractionAction::Cooperate).count() as f64 / len
        };
        let reward = |k: usize| trace.steps.iter().map(|s| s.payoffs[k]).sum::<f64>();
        EpisodeStats {
            mutual_coop_rate: mutual_cooperation_rate(trace),
            connection_rate: connected / len,
            coop_rate: [coop(0), coop(1)],
            reward: [reward(0), reward(1)],
        }
    }
}

/// One line of the metrics CSV: means over a bin of consecutive episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub schedule: String,
    pub bias: String,
    pub seed: u64,
    pub bin: u64,
    pub episodes: u64,
    pub mutual_coop_rate: f64,
    pub connection_rate: f64,
    pub coop_rate_a0: f64,
    pub coop_rate_a1: f64,
    pub reward_a0: f64,
    pub reward_a1: f64,
    pub epsilon: f64,
}

/// Groups episodes into fixed-size bins.
#[derive(Clone, Debug)]
pub struct BinAccumulator {
    run_id: String,
    schedule: String,
    bias: String,
    seed: u64,
    bin_size: u64,
    next_bin: u64,
    count: u64,
    sum: EpisodeStats,
}

impl BinAccumulator {
    pub fn new(config: &RunConfig) -> Self {
        BinAccumulator {
            run_id: config.run_id(),
            schedule: config.schedule.as_str().to_string(),
            bias: config.bias.as_str().to_string(),
            seed: config.seed,
            bin_size: config.metrics_bin,
            next_bin: 0,
            count: 0,
            sum: EpisodeStats::default(),
        }
    }

    /// Add an episode; returns a row when the bin fills.
    pub fn push(&mut self, stats: EpisodeStats, epsilon: f64) -> Option<MetricsRow> {
        self.sum.mutual_coop_rate += stats.mutual_coop_rate;
        self.sum.connection_rate += stats.connection_rate;
        for k in 0..2 {
            self.sum.coop_rate[k] += stats.coop_rate[k];
            self.sum.reward[k] += stats.reward[k];
        }
        self.count += 1;
        if self.count == self.bin_size {
            self.flush(epsilon)
        } else {
            None
        }
    }

    /// Emit the partially filled bin, if any.
    pub fn flush(&mut self, epsilon: f64) -> Option<MetricsRow> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let s = std::mem::take(&mut self.sum);
        let row = MetricsRow {
            run_id: self.run_id.clone(),
            schedule: self.schedule.clone(),
            bias: self.bias.clone(),
            seed: self.seed,
            bin: self.next_bin,
            episodes: self.count,
            mutual_coop_rate: s.mutual_coop_rate / n,
            connection_rate: s.connection_rate / n,
            coop_rate_a0: s.coop_rate[0] / n,
            coop_rate_a1: s.coop_rate[1] / n,
            reward_a0: s.reward[0] / n,
            reward_a1: s.reward[1] / n,
            epsilon,
        };
        self.next_bin += 1;
        self.count = 0;
        Some(row)
    }
}

/// Connect choices out of all rewiring choices in one conditioning cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseCell {
    pub connects: u64,
    pub samples: u64,
}

impl ResponseCell {
    /// `None` when the cell never occurred.
    pub fn fraction(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.connects as f64 / self.samples as f64)
    }

    fn add(&mut self, action: RewiringAction) {
        self.samples += 1;
        if action == RewiringAction::Connect {
            self.connects += 1;
        }
    }
}

/// One agent's rewiring choices, conditioned on the other's previous interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub after_cooperate: ResponseCell,
    pub after_defect: ResponseCell,
    /// Opportunities with no previous interaction (first timestep). Not part of the fractions.
    pub no_history: ResponseCell,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewiringResponse {
    pub agents: [AgentResponse; 2],
}

/// Running tally over rewiring-opportunity timesteps.
#[derive(Clone, Debug, Default)]
pub struct ResponseTally {
    response: RewiringResponse,
}

impl ResponseTally {
    pub fn add(&mut self, trace: &EpisodeTrace) {
        for step in &trace.steps {
            let Some(rewire) = step.rewire.filter(|_| step.opportunity) else {
                continue;
            };
            for k in 0..2 {
                let agent = &mut self.response.agents[k];
                let cell = match step.other_prev[k] {
                    Some(InteractionAction::Cooperate) => &mut agent.after_cooperate,
                    Some(InteractionAction::Defect) => &mut agent.after_defect,
                    None => &mut agent.no_history,
                };
                cell.add(rewire[k]);
            }
        }
    }

    pub fn finish(self) -> RewiringResponse {
        self.response
    }
}

/// Tally the final `window` fraction of `traces` (at least one episode).
pub fn rewiring_response(traces: &[EpisodeTrace], window: f64) -> RewiringResponse {
    assert!(window > 0.0 && window <= 1.0, "window must lie in (0, 1]");
    let take = ((traces.len() as f64) * window).ceil() as usize;
    let mut tally = ResponseTally::default();
    for trace in &traces[traces.len() - take.min(traces.len())..] {
        tally.add(trace);
    }
    tally.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::StepRecord;
    use InteractionAction::*;
    use RewiringAction::*;

    fn rec(connected: bool, a: [InteractionAction; 2], rewire: Option<[RewiringAction; 2]>, other_prev: [Option<InteractionAction>; 2]) -> StepRecord {
        StepRecord {
            timestep: 1,
            opportunity: rewire.is_some(),
            rewire,
            interaction: a,
            connected,
            payoffs: [0.0; 2],
            other_prev,
        }
    }

    fn trace(steps: Vec<StepRecord>) -> EpisodeTrace {
        EpisodeTrace { episode_length: steps.len() as u32, steps }
    }

    #[test]
    fn half_mutual_cooperation() {
        let steps = (0..10)
            .map(|i| rec(true, if i < 5 { [Cooperate, Cooperate] } else { [Cooperate, Defect] }, None, [None; 2]))
            .collect();
        assert_eq!(mutual_cooperation_rate(&trace(steps)), 0.5);
    }

    #[test]
    fn disconnected_cooperation_does_not_count() {
        let steps = (0..10).map(|_| rec(false, [Cooperate, Cooperate], None, [None; 2])).collect();
        assert_eq!(mutual_cooperation_rate(&trace(steps)), 0.0);
        let steps = (0..10).map(|_| rec(true, [Cooperate, Cooperate], None, [None; 2])).collect();
        assert_eq!(mutual_cooperation_rate(&trace(steps)), 1.0);
    }

    #[test]
    fn constant_connect_response() {
        let steps = vec![
            rec(true, [Defect, Cooperate], Some([Connect, Connect]), [Some(Cooperate), Some(Defect)]),
            rec(true, [Cooperate, Defect], Some([Connect, Connect]), [Some(Cooperate), Some(Defect)]),
            rec(true, [Cooperate, Defect], Some([Connect, Connect]), [Some(Defect), Some(Cooperate)]),
        ];
        let r = rewiring_response(&[trace(steps)], 1.0);
        for a in r.agents {
            assert_eq!(a.after_cooperate.fraction(), Some(1.0));
            assert_eq!(a.after_defect.fraction(), Some(1.0));
        }
    }

    #[test]
    fn hand_counted_synthetic_log() {
        // agent 0: after C -> C, C, C, D (3 of 4); after D -> D, C (1 of 2); first step -> C
        let steps = vec![
            rec(true, [Cooperate; 2], Some([Connect, Connect]), [None, None]),
            rec(true, [Cooperate; 2], Some([Connect, Connect]), [Some(Cooperate), Some(Cooperate)]),
            rec(true, [Cooperate; 2], Some([Connect, Disconnect]), [Some(Cooperate), Some(Cooperate)]),
            rec(true, [Cooperate; 2], Some([Connect, Disconnect]), [Some(Cooperate), Some(Cooperate)]),
            rec(true, [Cooperate; 2], Some([Disconnect, Connect]), [Some(Cooperate), Some(Defect)]),
            rec(true, [Cooperate; 2], Some([Disconnect, Connect]), [Some(Defect), Some(Defect)]),
            rec(true, [Cooperate; 2], Some([Connect, Connect]), [Some(Defect), Some(Cooperate)]),
            rec(true, [Cooperate; 2], None, [Some(Defect), Some(Cooperate)]),
        ];
        let r = rewiring_response(&[trace(steps)], 1.0);
        let a0 = r.agents[0];
        assert_eq!(a0.after_cooperate, ResponseCell { connects: 3, samples: 4 });
        assert_eq!(a0.after_cooperate.fraction(), Some(0.75));
        assert_eq!(a0.after_defect.fraction(), Some(0.5));
        assert_eq!(a0.no_history, ResponseCell { connects: 1, samples: 1 });
        let a1 = r.agents[1];
        assert_eq!(a1.after_cooperate, ResponseCell { connects: 2, samples: 4 });
        assert_eq!(a1.after_defect, ResponseCell { connects: 2, samples: 2 });
    }

    #[test]
    fn empty_cell_is_absent() {
        let steps = vec![rec(true, [Cooperate; 2], Some([Connect, Connect]), [Some(Cooperate), Some(Cooperate)])];
        let r = rewiring_response(&[trace(steps)], 1.0);
        assert_eq!(r.agents[0].after_defect.fraction(), None);
    }

    #[test]
    fn window_keeps_final_episodes() {
        let ep = |action| trace(vec![rec(true, [Cooperate; 2], Some([action, action]), [Some(Cooperate); 2])]);
        let traces: Vec<_> = (0..10).map(|i| ep(if i < 9 { Disconnect } else { Connect })).collect();
        let r = rewiring_response(&traces, 0.1);
        assert_eq!(r.agents[0].after_cooperate, ResponseCell { connects: 1, samples: 1 });
        let r = rewiring_response(&traces, 0.2);
        assert_eq!(r.agents[0].after_cooperate.fraction(), Some(0.5));
    }

    #[test]
    fn bins_and_partial_flush() {
        let mut c = RunConfig::new(crate::env::RewiringSchedule::FullRewiring, super::super::Bias::NoBias, 5, 2);
        c.metrics_bin = 2;
        let mut acc = BinAccumulator::new(&c);
        let s = |m| EpisodeStats { mutual_coop_rate: m, connection_rate: 1.0, coop_rate: [m, m], reward: [2.0, 0.0] };
        assert!(acc.push(s(0.2), 0.5).is_none());
        let row = acc.push(s(0.4), 0.4).unwrap();
        assert_eq!(row.bin, 0);
        assert!((row.mutual_coop_rate - 0.3).abs() < 1e-15);
        assert_eq!(row.episodes, 2);
        assert_eq!(row.epsilon, 0.4);
        acc.push(s(1.0), 0.1);
        acc.push(s(1.0), 0.1);
        let last = acc.push(s(0.0), 0.1);
        assert!(last.is_none());
        let tail = acc.flush(0.05).unwrap();
        assert_eq!((tail.bin, tail.episodes, tail.mutual_coop_rate), (2, 1, 0.0));
        assert!(acc.flush(0.05).is_none());
    }
}
