use elsa_core::clustering::Exclusion;
use elsa_core::config::ExperimentConfig;
use elsa_core::model::TrainableParams;
use elsa_core::protocol::{
    check_convergence, compute_alpha, edge_consolidate, local_split_round, normalize_alphas, run_elsa_with,
    run_fedavg_with, Simulation,
};

fn small(mode: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 21;
    c.codec.mode = mode.into();
    c.data.train_samples = 360;
    c.data.test_samples = 60;
    c.topology.n_clients = 6;
    c.topology.n_edges = 2;
    c.fingerprint.warmup_steps = 5;
    c.fingerprint.probes = 16;
    c.training.max_rounds = 3;
    c.training.local_rounds = 2;
    c
}

fn max_abs_diff(a: &TrainableParams, b: &TrainableParams) -> f64 {
    a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn direct_split_round_equals_monolithic_sgd_step() {
    let cfg = small("direct");
    let sim = Simulation::new(&cfg).unwrap();
    let fp = sim.fingerprints().unwrap();
    let asg = sim.cluster(&fp).unwrap();
    let links = sim.links(&fp).unwrap();
    let client = asg.assigned().next().unwrap();
    let edge = asg.edge_of[client].unwrap();
    // start away from the B = 0 initialization so every path carries signal
    let mut start = sim.warmup(client).unwrap();
    start.head.bias.add_scalar_mut(0.1);
    let batch = sim.batch(client, &[99]);
    let lr = 0.3;

    let mut split = start.clone();
    let mut theta2 = start.theta2.clone();
    local_split_round(&sim.model, &asg, client, edge, &links[client], &mut split, &mut theta2, &batch, lr, 1).unwrap();
    split.theta2 = theta2;

    let mut mono = start.clone();
    let (_, g) = sim.model.batch_loss_and_grad(&mono, &batch).unwrap();
    mono.axpy(-lr, &g);
    assert!(max_abs_diff(&split, &mono) < 1e-9);

    let other_edge = (edge + 1) % cfg.topology.n_edges;
    let mut t2 = start.theta2.clone();
    let err = local_split_round(&sim.model, &asg, client, other_edge, &links[client], &mut start.clone(), &mut t2, &batch, lr, 1);
    assert!(err.is_err());
}

#[test]
fn runs_are_deterministic_and_leave_the_backbone_alone() {
    let cfg = small("sketch-only");
    let sim = Simulation::new(&cfg).unwrap();
    let before = sim.model.backbone().to_bytes();
    let fp = sim.fingerprints().unwrap();
    let asg = sim.cluster(&fp).unwrap();
    let links = sim.links(&fp).unwrap();
    let a = run_elsa_with(&sim, &asg, &links).unwrap();
    let b = run_elsa_with(&sim, &asg, &links).unwrap();
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.records, b.records);
    assert_eq!(sim.model.backbone().to_bytes(), before);
    let again = Simulation::new(&cfg).unwrap();
    assert_eq!(again.shards, sim.shards);
    assert_eq!(run_fedavg_with(&sim, true).unwrap().records, run_fedavg_with(&again, true).unwrap().records);
}

#[test]
fn unreachable_clients_send_nothing() {
    let mut cfg = small("direct");
    cfg.topology.unreachable = vec![2];
    let sim = Simulation::new(&cfg).unwrap();
    let fp = sim.fingerprints().unwrap();
    let asg = sim.cluster(&fp).unwrap();
    assert_eq!(asg.exclusion(2), Some(Exclusion::OutOfRange));
    let links = sim.links(&fp).unwrap();
    let log = run_elsa_with(&sim, &asg, &links).unwrap();
    let per_client = links[0].activation_bytes(cfg.model.seq_len);
    let batches: usize = asg.assigned().map(|n| cfg.training.batch_size.min(sim.shards[n].len())).sum();
    for r in &log.records {
        assert_eq!(r.participants, 5);
        assert_eq!(r.activation_bytes, 2 * per_client * batches * cfg.training.local_rounds);
    }
}

#[test]
fn huge_tolerance_stops_after_two_rounds() {
    let mut cfg = small("direct");
    cfg.training.xi = 1e12;
    cfg.training.max_rounds = 10;
    let sim = Simulation::new(&cfg).unwrap();
    let log = run_fedavg_with(&sim, false).unwrap();
    assert_eq!(log.rounds(), 2);
    assert!(log.converged);
    assert!(!check_convergence(&sim.theta0, None, 1e12));
}

#[test]
fn edge_consolidation_and_alpha_examples() {
    let cfg = small("direct");
    let sim = Simulation::new(&cfg).unwrap();
    let mut a = sim.theta0.clone();
    let mut b = sim.theta0.clone();
    a.head.bias.fill(1.0);
    b.head.bias.fill(4.0);
    let theta2 = sim.theta0.theta2.clone();
    let merged = edge_consolidate(&[(&a, 1), (&b, 2)], &theta2).unwrap();
    assert!(merged.head.bias.iter().all(|v| (v - 3.0).abs() < 1e-12));
    assert_eq!(merged.theta2, theta2);
    assert!((compute_alpha(1.0, 0.5).unwrap() - 0.25).abs() < 1e-12);
    let w = normalize_alphas(&[1.0, 3.0]).unwrap();
    assert_eq!(w, vec![0.25, 0.75]);
    assert!(normalize_alphas(&[0.0, 0.0]).is_err());
}

#[test]
fn fedavg_learns_the_iid_task() {
    let mut cfg = small("direct");
    cfg.partition.alpha = 1000.0;
    cfg.training.lr = 0.2;
    cfg.training.max_rounds = 15;
    let sim = Simulation::new(&cfg).unwrap();
    let log = run_fedavg_with(&sim, false).unwrap();
    let first = log.records[0].train_loss;
    assert!(log.final_loss() < first, "{first} -> {}", log.final_loss());
    // chance is 1 / n_classes = 0.25
    assert!(log.final_accuracy() > 0.55, "accuracy {}", log.final_accuracy());
}
