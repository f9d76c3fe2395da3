use gtring::perf_model::{
    effective_bandwidth, fit_linear, message_counts, predict_elapsed, ring_shape, run_sweep,
    sweep_config, SweepWorld,
};
use gtring::ring_engine::DirectionPolicy;
use gtring::{run_experiment_with, ExperimentConfig, RunOptions, TransportKind};

fn base(n: usize, world: usize, m: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(n, world, 1, 1, m);
    cfg.transport = TransportKind::Sim;
    cfg
}

#[test]
fn four_rank_envelopes_match_counts() {
    let mut cfg = base(4, 4, 1);
    cfg.subring_size = 4;
    let options = RunOptions {
        sim_log: true,
        ..RunOptions::default()
    };
    let report = run_experiment_with(&cfg, &options).unwrap();
    let ring: Vec<_> = report.sim_log.iter().filter(|r| r.tag >= 0).collect();
    let c = message_counts(4);
    assert_eq!(ring.len() as u64, c.total);
    for r in 0..4 {
        assert_eq!(ring.iter().filter(|m| m.src == r).count() as u64, c.per_rank_send);
        assert_eq!(ring.iter().filter(|m| m.dst == r).count() as u64, c.per_rank_recv);
        let link = ring.iter().filter(|m| m.src == r && m.dst == (r + 1) % 4).count();
        assert_eq!(link as u64, c.per_link);
    }
    assert_eq!((c.per_rank_send, c.per_rank_recv, c.total, c.per_link), (3, 3, 12, 3));
}

#[test]
fn nic_bound_sweep_is_linear() {
    let mut cfg = base(12, 12, 20);
    cfg.link.ranks_per_node = 1;
    cfg.link.charged_message_bytes = Some(1_000_000);
    let out = run_sweep(&cfg, &[2, 4, 6, 8, 12], SweepWorld::SingleSubring).unwrap();
    assert_eq!(out.points.len(), 5);
    assert!(out.fit.unwrap().r_squared >= 0.99);
}

#[test]
fn single_node_slope_is_step_time() {
    let mut cfg = base(12, 12, 10);
    cfg.link.ranks_per_node = 12;
    cfg.link.charged_message_bytes = Some(500_000);
    let out = run_sweep(&cfg, &[2, 3, 4, 6, 12], SweepWorld::Configured).unwrap();
    let fit = out.fit.unwrap();
    let expected = (500_000.0 / 25e9 + 5e-6) * 10.0;
    assert!((fit.slope - expected).abs() / expected < 0.01, "{fit:?}");
}

#[test]
fn rows_that_do_not_divide_the_world_are_rejected() {
    let cfg = base(12, 6, 1);
    let out = run_sweep(&cfg, &[2, 4, 6], SweepWorld::Configured).unwrap();
    assert_eq!(out.points.iter().map(|p| p.subring_size).collect::<Vec<_>>(), vec![2, 6]);
    assert_eq!(out.rejected.len(), 1);
    assert_eq!(out.rejected[0].subring_size, 4);
    assert!(out.rejected[0].reason.contains("subring_size"));
}

#[test]
fn prediction_tracks_simulation() {
    for direction in [DirectionPolicy::Forward, DirectionPolicy::Alternate] {
        let mut cfg = base(24, 24, 5);
        cfg.lanes = 2;
        cfg.direction = direction;
        cfg.link.charged_message_bytes = Some(2_000_000);
        cfg.link.nic_utilization = 0.5;
        let out = run_sweep(&cfg, &[2, 6, 12, 24], SweepWorld::Configured).unwrap();
        for p in &out.points {
            let rel = (p.predicted_s - p.elapsed_s).abs() / p.elapsed_s;
            assert!(rel < 0.05, "{direction:?} S={} predicted {} simulated {}", p.subring_size, p.predicted_s, p.elapsed_s);
        }
    }
}

#[test]
fn prediction_is_monotone_in_its_inputs() {
    let cfg = sweep_config(&base(12, 12, 3), 12, SweepWorld::Configured).unwrap();
    let shape = ring_shape(&cfg).unwrap();
    let t = predict_elapsed(&shape, &cfg.link).unwrap();
    let mut bigger = shape;
    bigger.msg_bytes *= 2;
    assert!(predict_elapsed(&bigger, &cfg.link).unwrap() >= t);
    let mut slow = cfg.link.clone();
    slow.latency_s *= 2.0;
    assert!(predict_elapsed(&shape, &slow).unwrap() >= t);
    slow.nic_bandwidth_bps /= 2.0;
    slow.intra_bandwidth_bps /= 2.0;
    assert!(predict_elapsed(&shape, &slow).unwrap() >= t);
}

#[test]
fn effective_bandwidth_is_homogeneous() {
    let a = effective_bandwidth(1.7e6, 12, 100, 3.0).unwrap();
    let b = effective_bandwidth(3.4e6, 12, 100, 6.0).unwrap();
    assert!((a - b).abs() <= 1e-6 * a);
}

#[test]
fn fit_needs_distinct_sizes() {
    let cfg = base(6, 6, 1);
    let out = run_sweep(&cfg, &[3, 3], SweepWorld::Configured).unwrap();
    assert!(out.fit.is_none());
    assert!(fit_linear(&out.points).is_err());
}
