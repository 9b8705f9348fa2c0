use std::fs;
use std::path::Path;

use ipd_rewire::agent::greedy;
use ipd_rewire::env::{self, RewiringSchedule};
use ipd_rewire::experiment::{
    analyze, run_grid, run_to_dir, Bias, Checkpoint, Manifest, ManifestEntry, RunConfig, RunFiles, RunStatus,
    Simulation,
};

fn small(schedule: RewiringSchedule, bias: Bias, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(schedule, bias, 160, seed);
    c.metrics_bin = 40;
    c
}

fn files(dir: &Path) -> Vec<Vec<u8>> {
    let f = RunFiles::new(dir);
    [f.metrics(), f.response(), f.checkpoint(), f.config()].iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn identical_config_and_seed_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = small(RewiringSchedule::HalfRewiring, Bias::NoBias, 11);
    run_to_dir(&c, a.path(), &mut |_| {}).unwrap();
    run_to_dir(&c, b.path(), &mut |_| {}).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let other = tempfile::tempdir().unwrap();
    run_to_dir(&small(RewiringSchedule::HalfRewiring, Bias::NoBias, 12), other.path(), &mut |_| {}).unwrap();
    assert_ne!(files(a.path())[0], files(other.path())[0]);
}

#[test]
fn checkpoint_file_restores_final_policies() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(RewiringSchedule::FullRewiring, Bias::NoBias, 5);
    let summary = run_to_dir(&c, dir.path(), &mut |_| {}).unwrap();
    let bytes = fs::read(RunFiles::new(dir.path()).checkpoint()).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck, summary.checkpoint);
    assert_eq!(ck.episodes_done, 160);
    assert_eq!(ck.env_steps, 1600);

    let mut fresh = Simulation::new(c).unwrap();
    fresh.restore(&ck).unwrap();
    assert_eq!(fresh.checkpoint(), ck);
    let obs = env::reset(RewiringSchedule::FullRewiring).1;
    for (k, agent) in fresh.agents.iter().enumerate() {
        let head = agent.interaction_head().unwrap();
        let saved = ck.heads[2 * k].as_ref().unwrap();
        assert_eq!(greedy(head.q_values(&obs[k])), greedy(saved.online.forward(obs[k].as_slice())));
    }
}

#[test]
fn agents_share_no_parameters() {
    let mut sim = Simulation::new(small(RewiringSchedule::FullRewiring, Bias::NoBias, 3)).unwrap();
    let before = sim.agents[1].interaction_head().unwrap().networks.online.fingerprint();
    sim.agents[0].interaction_head_mut().unwrap().networks.online.as_mut_slice()[0] += 1.0;
    assert_eq!(sim.agents[1].interaction_head().unwrap().networks.online.fingerprint(), before);
    for _ in 0..150 {
        sim.run_episode().unwrap();
    }
    let fp = |k: usize| sim.agents[k].interaction_head().unwrap().networks.online.fingerprint();
    assert_ne!(fp(0), fp(1));
}

#[test]
fn fixed_interaction_agent_still_learns_rewiring() {
    let mut sim = Simulation::new(small(RewiringSchedule::FullRewiring, Bias::TftBias, 8)).unwrap();
    let start = sim.agents[0].rewiring_head().unwrap().networks.online.fingerprint();
    for _ in 0..150 {
        sim.run_episode().unwrap();
    }
    assert!(sim.agents[0].interaction_head().is_none());
    let head = sim.agents[0].rewiring_head().unwrap();
    assert_eq!(head.buffer.len(), 1500);
    assert!(head.steps_done > 0);
    assert_ne!(head.networks.online.fingerprint(), start);
}

#[test]
fn frozen_rewiring_never_trains() {
    let mut c = small(RewiringSchedule::FullRewiring, Bias::TftBias, 8);
    c.rewiring_learning = false;
    c.frozen_rewiring = ipd_rewire::experiment::FrozenRewiring::RandomNetwork;
    let mut sim = Simulation::new(c).unwrap();
    let start = sim.agents[1].rewiring_head().unwrap().networks.online.fingerprint();
    for _ in 0..150 {
        sim.run_episode().unwrap();
    }
    let head = sim.agents[1].rewiring_head().unwrap();
    assert_eq!(head.networks.online.fingerprint(), start);
    assert!(head.buffer.is_empty());
}

#[test]
fn empty_grid_writes_only_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_grid(&[], dir.path(), 2, &|_| {}).unwrap();
    assert!(m.runs.is_empty());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("manifest.json")]);
}

#[test]
fn failing_run_is_recorded_and_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let good = small(RewiringSchedule::NoRewiring, Bias::AllcBias, 1);
    let mut bad = small(RewiringSchedule::NoRewiring, Bias::AllcBias, 2);
    bad.episodes = 0;
    let m = run_grid(&[bad, good], dir.path(), 1, &|_| {}).unwrap();
    assert_eq!(m.runs[0].status, RunStatus::Failed);
    assert!(m.runs[0].error.as_deref().unwrap().contains("episodes"));
    assert_eq!(m.runs[1].status, RunStatus::Ok);
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
}

#[test]
fn analyze_excludes_corrupt_runs() {
    let dir = tempfile::tempdir().unwrap();
    let configs: Vec<_> = (1..=3).map(|s| small(RewiringSchedule::FullRewiring, Bias::TftBias, s)).collect();
    let m = run_grid(&configs, dir.path(), 1, &|_| {}).unwrap();
    fs::write(dir.path().join(&m.runs[1].metrics), "garbage,\n\"unterminated").unwrap();
    fs::remove_file(dir.path().join(&m.runs[2].response)).unwrap();
    let report = analyze(dir.path(), &dir.path().join("agg")).unwrap();
    assert_eq!(report.runs_used, 1);
    assert_eq!(report.excluded.len(), 2);
    assert!(report.aggregate.iter().all(|r| r.n_seeds == 1 && r.mutual_coop_se == 0.0));
}

const HEADER: &str = "run_id,schedule,bias,seed,bin,episodes,mutual_coop_rate,connection_rate,coop_rate_a0,coop_rate_a1,reward_a0,reward_a1,epsilon";

fn fixture_entry(dir: &Path, seed: u64, mutual: [f64; 2], connect_after_c: f64) -> ManifestEntry {
    let id = format!("full-none-s{seed}");
    let run = dir.join(&id);
    fs::create_dir_all(&run).unwrap();
    let mut metrics = format!("{HEADER}\n");
    for (bin, m) in mutual.iter().enumerate() {
        metrics.push_str(&format!("{id},full,none,{seed},{bin},10,{m},1.0,0.5,0.5,0.0,0.0,0.01\n"));
    }
    fs::write(run.join("metrics.csv"), metrics).unwrap();
    fs::write(
        run.join("response.csv"),
        format!(
            "run_id,agent,other_prev_action,connect_fraction,n_samples\n\
             {id},0,cooperate,,0\n{id},0,defect,,0\n{id},1,cooperate,{connect_after_c},4\n{id},1,defect,,0\n"
        ),
    )
    .unwrap();
    ManifestEntry {
        run_id: id.clone(),
        condition: "full:none".into(),
        schedule: RewiringSchedule::FullRewiring,
        bias: Bias::NoBias,
        rewiring_learning: true,
        seed,
        episodes: 20,
        status: RunStatus::Ok,
        error: None,
        metrics: format!("{id}/metrics.csv"),
        response: format!("{id}/response.csv"),
        checkpoint: format!("{id}/checkpoint.bin"),
        config: format!("{id}/config.json"),
        wall_time_s: 0.0,
    }
}

#[test]
fn aggregate_matches_reference_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let runs = vec![
        fixture_entry(dir.path(), 1, [0.1, 0.8], 0.5),
        fixture_entry(dir.path(), 2, [0.3, 0.9], 0.75),
        fixture_entry(dir.path(), 3, [0.2, 0.4], 1.0),
    ];
    Manifest::new(runs).write(dir.path()).unwrap();
    let report = analyze(dir.path(), dir.path()).unwrap();

    // Python: statistics.mean(v), statistics.stdev(v) / sqrt(len(v))
    let expected = [(0.2, 0.057735026918962574), (0.7000000000000001, 0.1527525231651947)];
    assert_eq!(report.aggregate.len(), 2);
    for (row, (mean, se)) in report.aggregate.iter().zip(expected) {
        assert_eq!(row.n_seeds, 3);
        assert!((row.mutual_coop_mean - mean).abs() < 1e-12, "{row:?}");
        assert!((row.mutual_coop_se - se).abs() < 1e-12, "{row:?}");
        assert_eq!(row.connection_rate_se, 0.0);
    }
    let cell = report
        .responses
        .iter()
        .find(|r| r.agent == 1 && r.other_prev_action == "cooperate")
        .unwrap();
    assert!((cell.connect_fraction_mean.unwrap() - 0.75).abs() < 1e-12);
    assert!((cell.connect_fraction_se.unwrap() - 0.14433756729740646).abs() < 1e-12);
    assert_eq!((cell.n_seeds, cell.n_samples), (3, 12));
    let empty = report.responses.iter().find(|r| r.agent == 0).unwrap();
    assert_eq!((empty.connect_fraction_mean, empty.n_seeds), (None, 0));
    assert!(dir.path().join("aggregate.csv").is_file());
    assert!(dir.path().join("analysis.json").is_file());
}
