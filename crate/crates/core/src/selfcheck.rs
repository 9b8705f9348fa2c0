//! Property suites shipped with the binary (`ipd-rewire selfcheck`).
//!
//! Each suite compares the library against an oracle written separately
//! from the code under test: literal truth tables, central finite
//! differences, a flat re-summation of the priority tree, a chi-squared
//! goodness-of-fit test, and a plain re-implementation of the bootstrap target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::agent::{double_dqn_target, AgentSpec, Hyperparameters, InteractionBias, RewiringBias};
use crate::env::{
    self, connection_update, payoff, rewiring_opportunity, InteractionAction, Observation, PayoffMatrix,
    RewiringAction, RewiringSchedule,
};
use crate::experiment::{Bias, RunConfig, Simulation};
use crate::nn::{MlpParams, QNetworkPair, B1, B2, B3, HIDDEN, INPUT, OUTPUT, PARAM_COUNT, W1, W2, W3};
use crate::replay::{PerConfig, PrioritizedReplay, Transition};

/// Failures kept verbatim per suite; the rest are only counted.
const MAX_LISTED: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfcheckOptions {
    pub seed: u64,
    pub gradient_cases: usize,
    pub gradient_step: f64,
    /// Relative tolerance: `|analytic - numeric| <= tol * max(1, |numeric|)`.
    pub gradient_tolerance: f64,
    pub fuzz_ops: usize,
    pub per_draws: usize,
    pub per_min_p: f64,
    pub ddqn_cases: usize,
    pub baseline_episodes: u64,
    pub baseline_tolerance: f64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            seed: 0,
            gradient_cases: 128,
            gradient_step: 1e-5,
            gradient_tolerance: 1e-4,
            fuzz_ops: 10_000,
            per_draws: 100_000,
            per_min_p: 0.01,
            ddqn_cases: 1_000,
            baseline_episodes: 10_000,
            baseline_tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Names of failing properties (at most a handful are listed).
    pub failures: Vec<String>,
    /// Measured quantities worth printing, e.g. p-values.
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport { name, passed: 0, total: 0, failures: Vec::new(), detail: String::new() }
    }

    fn check(&mut self, ok: bool, name: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.failures.len() < MAX_LISTED {
            self.failures.push(name());
        }
    }

    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

pub fn run_all(opts: &SelfcheckOptions) -> Vec<SuiteReport> {
    vec![
        environment_tables(),
        gradient_checks(opts),
        sum_tree_fuzz(opts),
        per_distribution(opts),
        double_dqn_targets(opts),
        random_rewiring_baseline(opts),
    ]
}

// ---------------------------------------------------------------- environment

const C: InteractionAction = InteractionAction::Cooperate;
const D: InteractionAction = InteractionAction::Defect;
const CONNECT: RewiringAction = RewiringAction::Connect;
const CUT: RewiringAction = RewiringAction::Disconnect;

/// (edge before, opportunity, agent 1 rewire, agent 2 rewire) -> edge after.
const CONNECTION_TABLE: [(bool, bool, RewiringAction, RewiringAction, bool); 16] = [
    (true, false, CONNECT, CONNECT, true),
    (true, false, CONNECT, CUT, true),
    (true, false, CUT, CONNECT, true),
    (true, false, CUT, CUT, true),
    (false, false, CONNECT, CONNECT, false),
    (false, false, CONNECT, CUT, false),
    (false, false, CUT, CONNECT, false),
    (false, false, CUT, CUT, false),
    (true, true, CONNECT, CONNECT, true),
    (true, true, CONNECT, CUT, false),
    (true, true, CUT, CONNECT, false),
    (true, true, CUT, CUT, false),
    (false, true, CONNECT, CONNECT, true),
    (false, true, CONNECT, CUT, false),
    (false, true, CUT, CONNECT, false),
    (false, true, CUT, CUT, false),
];

/// (agent 1, agent 2, connected) -> payoffs.
const PAYOFF_TABLE: [(InteractionAction, InteractionAction, bool, (f64, f64)); 8] = [
    (C, C, true, (1.0, 1.0)),
    (C, D, true, (-1.0, 2.0)),
    (D, C, true, (2.0, -1.0)),
    (D, D, true, (0.0, 0.0)),
    (C, C, false, (0.0, 0.0)),
    (C, D, false, (0.0, 0.0)),
    (D, C, false, (0.0, 0.0)),
    (D, D, false, (0.0, 0.0)),
];

/// Timesteps 1..=10 with an opportunity, per schedule.
const OPPORTUNITY_TABLE: [(RewiringSchedule, [bool; 10]); 3] = [
    (RewiringSchedule::NoRewiring, [false; 10]),
    (RewiringSchedule::HalfRewiring, [false, true, false, true, false, true, false, true, false, true]),
    (RewiringSchedule::FullRewiring, [true; 10]),
];

fn lookup_connection(before: bool, opp: bool, r1: RewiringAction, r2: RewiringAction) -> bool {
    CONNECTION_TABLE.iter().find(|row| (row.0, row.1, row.2, row.3) == (before, opp, r1, r2)).unwrap().4
}

fn lookup_payoff(a1: InteractionAction, a2: InteractionAction, connected: bool) -> (f64, f64) {
    PAYOFF_TABLE.iter().find(|row| (row.0, row.1, row.2) == (a1, a2, connected)).unwrap().3
}

fn literal_obs(own: Option<InteractionAction>, other: Option<InteractionAction>, edge: bool, opp: bool) -> [f64; 8] {
    let act = |a: Option<InteractionAction>| match a {
        None => [0.0, 0.0],
        Some(InteractionAction::Cooperate) => [1.0, 0.0],
        Some(InteractionAction::Defect) => [0.0, 1.0],
    };
    let bit = |b: bool| if b { [1.0, 0.0] } else { [0.0, 1.0] };
    let (o, t, e, p) = (act(own), act(other), bit(edge), bit(opp));
    [o[0], o[1], t[0], t[1], e[0], e[1], p[0], p[1]]
}

/// Exhaustive comparison of the state machine against literal tables.
pub fn environment_tables() -> SuiteReport {
    let mut r = SuiteReport::new("environment");
    let m = PayoffMatrix::default();

    for &(before, opp, r1, r2, after) in &CONNECTION_TABLE {
        r.check(connection_update(before, opp, r1, r2) == after, || {
            format!("connection(before={before}, opp={opp}, {r1:?}, {r2:?})")
        });
    }
    for &(a1, a2, connected, expected) in &PAYOFF_TABLE {
        r.check(payoff(a1, a2, connected, &m) == expected, || format!("payoff({a1:?}, {a2:?}, connected={connected})"));
    }
    for (schedule, row) in OPPORTUNITY_TABLE {
        for (i, &expected) in row.iter().enumerate() {
            let t = i as u32 + 1;
            r.check(rewiring_opportunity(schedule, t, 10) == Ok(expected), || format!("opportunity({schedule:?}, t={t})"));
        }
        r.check(rewiring_opportunity(schedule, 0, 10).is_err(), || format!("opportunity({schedule:?}, t=0) rejected"));
        r.check(rewiring_opportunity(schedule, 11, 10).is_err(), || format!("opportunity({schedule:?}, t=11) rejected"));
    }

    let (_, first) = env::reset(RewiringSchedule::FullRewiring);
    for (k, o) in first.iter().enumerate() {
        r.check(o.0 == [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], || format!("first observation agent {k}"));
    }

    // Every reachable (timestep, edge, last interaction) state, every joint action.
    let histories = [None, Some([C, C]), Some([C, D]), Some([D, C]), Some([D, D])];
    let rewires = [[CONNECT, CONNECT], [CONNECT, CUT], [CUT, CONNECT], [CUT, CUT]];
    let plays = [[C, C], [C, D], [D, C], [D, D]];
    for (schedule, opp_row) in OPPORTUNITY_TABLE {
        for t in 1..=10u32 {
            for connected in [true, false] {
                for last in histories {
                    for rw in rewires {
                        for play in plays {
                            let mut s = env::reset(schedule).0;
                            s.timestep = t;
                            s.connected = connected;
                            s.last_interaction = last;
                            let out = env::step(&mut s, rw, play).unwrap();
                            let opp = opp_row[t as usize - 1];
                            let after = lookup_connection(connected, opp, rw[0], rw[1]);
                            let pay = lookup_payoff(play[0], play[1], after);
                            let ok = out.opportunity == opp
                                && out.connected_after == after
                                && out.interacted == after
                                && out.payoffs == pay
                                && out.observations_next[0].0 == literal_obs(Some(play[0]), Some(play[1]), after, opp)
                                && out.observations_next[1].0 == literal_obs(Some(play[1]), Some(play[0]), after, opp)
                                && s.timestep == t + 1;
                            r.check(ok, || {
                                format!("step({schedule:?}, t={t}, edge={connected}, last={last:?}, {rw:?}, {play:?})")
                            });
                        }
                    }
                }
            }
        }
    }
    r
}

// ------------------------------------------------------------------- gradient

fn loss(p: &MlpParams, x: &[f64; INPUT], action: usize, target: f64, w: f64) -> f64 {
    let td = p.forward(x)[action] - target;
    0.5 * w * td * td
}

fn random_input<R: Rng>(rng: &mut R) -> [f64; INPUT] {
    if rng.gen_bool(0.5) {
        let act = [None, Some(C), Some(D)];
        literal_obs(act[rng.gen_range(0..3)], act[rng.gen_range(0..3)], rng.gen(), rng.gen())
    } else {
        std::array::from_fn(|_| rng.gen_range(-2.0..2.0))
    }
}

fn random_params<R: Rng>(rng: &mut R, spread: f64) -> MlpParams {
    let mut p = MlpParams::init(rng);
    p.as_mut_slice().iter_mut().for_each(|v| *v += rng.gen_range(-spread..spread));
    p
}

/// Analytic gradient of the weighted squared TD loss against central differences,
/// over every parameter of each random case.
pub fn gradient_checks(opts: &SelfcheckOptions) -> SuiteReport {
    let mut r = SuiteReport::new("gradient");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let h = opts.gradient_step;
    let tol = opts.gradient_tolerance;
    let mut worst: f64 = 0.0;
    for case in 0..opts.gradient_cases {
        let p = random_params(&mut rng, 0.5);
        let x = random_input(&mut rng);
        let action = rng.gen_range(0..OUTPUT);
        let target = rng.gen_range(-3.0..3.0);
        let w = rng.gen_range(0.05..1.0);
        let td = p.forward(&x)[action] - target;
        let analytic = p.backward(&x, action, td, w);

        let mut bad = None;
        for k in 0..PARAM_COUNT {
            let mut plus = p.clone();
            plus.0[k] += h;
            let mut minus = p.clone();
            minus.0[k] -= h;
            let numeric = (loss(&plus, &x, action, target, w) - loss(&minus, &x, action, target, w)) / (2.0 * h);
            let err = (analytic.0[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            if !(err <= tol) && bad.is_none() {
                bad = Some((k, analytic.0[k], numeric));
            }
        }
        r.check(bad.is_none(), || {
            let (k, a, n) = bad.unwrap();
            format!("gradient case {case}: parameter {k} analytic {a:e} numeric {n:e}")
        });
    }
    r.detail = format!("max relative error {worst:.2e}, tolerance {tol:e}");
    r
}

// ------------------------------------------------------------------- sum tree

fn flat_internal(leaves: &[f64]) -> Vec<f64> {
    let cap = leaves.len();
    let mut nodes = vec![0.0; 2 * cap];
    nodes[cap..].copy_from_slice(leaves);
    for k in (1..cap).rev() {
        nodes[k] = nodes[2 * k] + nodes[2 * k + 1];
    }
    nodes[1..cap].to_vec()
}

fn tagged(tag: usize) -> Transition {
    let obs = Observation(literal_obs(None, None, true, false));
    Transition { obs, action: tag % 2, reward: tag as f64, discount: 0.0, next_obs: obs }
}

/// Random inserts, samples and priority updates; after every operation each
/// internal node must equal the sum rebuilt from the leaves, bit for bit.
pub fn sum_tree_fuzz(opts: &SelfcheckOptions) -> SuiteReport {
    let mut r = SuiteReport::new("sum-tree");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7472_6565);
    let cfg = PerConfig { capacity: 100, min_size_to_sample: 1, ..PerConfig::default() };
    let mut buf = PrioritizedReplay::new(cfg).expect("valid config");
    for op in 0..opts.fuzz_ops {
        let kind = if buf.is_empty() { 0 } else { rng.gen_range(0..3) };
        match kind {
            0 => {
                buf.insert(tagged(op), rng.gen_range(0.0..10.0));
            }
            1 => {
                buf.push(tagged(op));
            }
            _ => {
                let n = rng.gen_range(1..8);
                let batch = buf.sample(n, rng.gen(), &mut rng).expect("non-empty");
                let errs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                buf.update_priorities(&batch.indices, &errs);
            }
        }
        let tree = buf.tree();
        let same = tree
            .internal()
            .iter()
            .zip(flat_internal(tree.leaves()))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        r.check(same, || format!("sum-tree op {op}: internal sums differ from flat re-summation"));
    }
    r
}

// ------------------------------------------------------------- distributions

/// Chi-squared p-value of `counts` against expected probabilities.
pub fn chi_squared_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("df >= 1");
    1.0 - dist.cdf(stat)
}

/// Sampling frequencies against `p_i = (|delta_i| + eps)^alpha / sum`.
pub fn per_distribution(opts: &SelfcheckOptions) -> SuiteReport {
    let mut r = SuiteReport::new("per-sampling");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7065_7221);
    let mut details = Vec::new();

    for alpha in [0.6, 0.0, 1.0] {
        let cfg = PerConfig { alpha, capacity: 64, min_size_to_sample: 1, ..PerConfig::default() };
        let eps = cfg.priority_epsilon;
        let mut buf = PrioritizedReplay::new(cfg).expect("valid config");
        let deltas: Vec<f64> = (0..40).map(|i| 0.05 + 0.1 * i as f64).collect();
        for (i, &d) in deltas.iter().enumerate() {
            buf.insert(tagged(i), d);
        }
        // Move a few entries through the update path as well.
        let batch = buf.sample(5, 0.4, &mut rng).expect("non-empty");
        let new: Vec<f64> = batch.indices.iter().map(|ix| -deltas[ix.slot] * 0.5).collect();
        buf.update_priorities(&batch.indices, &new);
        let mut raw = deltas.clone();
        for ix in &batch.indices {
            raw[ix.slot] = deltas[ix.slot] * 0.5;
        }

        let weights: Vec<f64> = raw.iter().map(|d| (d.abs() + eps).powf(alpha)).collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut counts = vec![0u64; raw.len()];
        for _ in 0..opts.per_draws {
            let b = buf.sample(1, 1.0, &mut rng).expect("non-empty");
            counts[b.indices[0].slot] += 1;
        }
        let p = chi_squared_p(&counts, &probs);
        details.push(format!("alpha {alpha}: p={p:.3}"));
        r.check(p > opts.per_min_p, || format!("chi-squared alpha={alpha}: p={p:.4} <= {}", opts.per_min_p));

        let b = buf.sample(16, 0.7, &mut rng).expect("non-empty");
        let max = b.is_weights.iter().cloned().fold(0.0, f64::max);
        r.check(max == 1.0 && b.is_weights.iter().all(|&w| w > 0.0 && w <= 1.0), || {
            format!("importance weights alpha={alpha} outside (0, 1] or max != 1")
        });
    }
    r.detail = details.join(", ");
    r
}

// ---------------------------------------------------------------- Double DQN

/// Dense forward pass written independently of the library's.
fn plain_forward(p: &MlpParams, x: &[f64; INPUT]) -> [f64; OUTPUT] {
    let p = &p.0;
    let layer = |input: &[f64], w: usize, b: usize, n_out: usize, squash: bool| -> Vec<f64> {
        (0..n_out)
            .map(|j| {
                let mut z = p[b + j];
                for (i, &v) in input.iter().enumerate() {
                    if v != 0.0 {
                        z += v * p[w + i * n_out + j];
                    }
                }
                if squash {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    };
    let h1 = layer(x, W1, B1, HIDDEN, true);
    let h2 = layer(&h1, W2, B2, HIDDEN, true);
    let q = layer(&h2, W3, B3, OUTPUT, false);
    [q[0], q[1]]
}

/// Bootstrap targets against a decoupled select-with-online, evaluate-with-target oracle.
pub fn double_dqn_targets(opts: &SelfcheckOptions) -> SuiteReport {
    let mut r = SuiteReport::new("double-dqn");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6464_716e);
    let mut disagree_with_max = 0;
    for case in 0..opts.ddqn_cases {
        let online = random_params(&mut rng, 0.3);
        let target = random_params(&mut rng, 0.3);
        let pair = QNetworkPair { online: online.clone(), target: target.clone() };
        let next = Observation(random_input(&mut rng));
        let reward = rng.gen_range(-1.0..2.0);
        let discount = match rng.gen_range(0..3) {
            0 => 0.0,
            1 => 0.99,
            _ => 0.99f64.powi(rng.gen_range(1..10)),
        };

        let qo = plain_forward(&online, &next.0);
        let qt = plain_forward(&target, &next.0);
        let a = if qo[1] > qo[0] { 1 } else { 0 };
        let expected = if discount == 0.0 { reward } else { reward + discount * qt[a] };
        if discount != 0.0 && qt[a] != qt[0].max(qt[1]) {
            disagree_with_max += 1;
        }
        let got = double_dqn_target(&pair, reward, discount, &next);
        r.check(got.to_bits() == expected.to_bits(), || {
            format!("double-dqn case {case}: got {got:e}, oracle {expected:e}")
        });
    }
    // The oracle must actually exercise the online/target split.
    r.check(disagree_with_max > 0, || "no case separated Double DQN from max-target DQN".into());
    r.detail = format!("{disagree_with_max} cases differ from a max-over-target bootstrap");
    r
}

// ------------------------------------------------------------------ baseline

/// Fraction of rewiring opportunities at which both agents connect, with both
/// agents choosing uniformly at random. Returns the measured rate.
pub fn uniform_rewiring_rate(schedule: RewiringSchedule, episodes: u64, seed: u64) -> f64 {
    let config = RunConfig::new(schedule, Bias::NoBias, episodes, seed);
    let spec = AgentSpec {
        interaction_bias: InteractionBias::Allc,
        rewiring_bias: RewiringBias::UniformRandom,
        hyperparams: Hyperparameters::default(),
    };
    let mut sim = Simulation::with_specs(config, [spec.clone(), spec]).expect("valid config");
    let (mut both, mut opportunities) = (0u64, 0u64);
    for _ in 0..episodes {
        let trace = sim.run_episode().expect("fixed policies cannot fail");
        for s in trace.steps.iter().filter(|s| s.opportunity) {
            opportunities += 1;
            if s.rewire == Some([CONNECT, CONNECT]) {
                both += 1;
            }
        }
    }
    both as f64 / opportunities as f64
}

pub fn random_rewiring_baseline(opts: &SelfcheckOptions) -> SuiteReport {
    let mut r = SuiteReport::new("rewire-base");
    let mut details = Vec::new();
    for schedule in [RewiringSchedule::FullRewiring, RewiringSchedule::HalfRewiring] {
        let rate = uniform_rewiring_rate(schedule, opts.baseline_episodes, opts.seed);
        details.push(format!("{}: {rate:.4}", schedule.as_str()));
        r.check((rate - 0.25).abs() <= opts.baseline_tolerance, || {
            format!("uniform rewiring ({}) both-connect rate {rate:.4} not within 0.25 +- {}", schedule.as_str(), opts.baseline_tolerance)
        });
    }
    r.detail = details.join(", ");
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SelfcheckOptions {
        SelfcheckOptions { gradient_cases: 8, fuzz_ops: 500, per_draws: 20_000, ddqn_cases: 100, baseline_episodes: 2_000, baseline_tolerance: 0.02, ..SelfcheckOptions::default() }
    }

    #[test]
    fn all_suites_pass_quickly() {
        for r in run_all(&quick()) {
            assert!(r.ok(), "{}: {:?}", r.name, r.failures);
        }
    }

    #[test]
    fn corrupted_tolerance_fails() {
        let opts = SelfcheckOptions { gradient_tolerance: -1.0, ..quick() };
        let r = gradient_checks(&opts);
        assert!(!r.ok());
        assert_eq!(r.passed, 0);
        assert!(r.failures[0].starts_with("gradient case 0"));
    }

    #[test]
    fn chi_squared_reference() {
        // scipy.stats.chisquare([18, 22, 30, 30], [25, 25, 25, 25])
        let p = chi_squared_p(&[18, 22, 30, 30], &[0.25; 4]);
        assert!((p - 0.22891886433610517).abs() < 1e-9, "{p}");
    }
}
