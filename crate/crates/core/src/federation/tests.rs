use super::*;
use crate::masked::Mask;
use crate::numcore::{AdamConfig, Layout, Matrix};
use rand::Rng;
use std::sync::Arc;

fn cfg() -> MiwaeConfig {
    MiwaeConfig { latent_dim: 2, hidden_units: 6, k_train: 3, l_test: 10, ..Default::default() }
}

fn client_data(n: usize, p: usize, seed: u64) -> MaskedMatrix<f64> {
    let mut rng = stream(seed, &[]);
    let v = Matrix::from_fn(n, p, |_, _| rng.gen_range(-1.5..1.5));
    let mut mask = Mask::all_observed(n, p);
    for i in 0..n {
        let j = rng.gen_range(0..p);
        if rng.gen_bool(0.5) {
            mask.set(i, j, false);
        }
    }
    MaskedMatrix::new(v, mask).unwrap()
}

fn plan(aggregator: AggregatorKind, rounds: usize, epochs: usize) -> RoundPlan {
    RoundPlan { rounds, local_epochs: epochs, batch_size: 4, aggregator, seed: 17, adam: AdamConfig::default() }
}

fn pv(vals: Vec<f64>) -> ParamVector<f64> {
    let n = vals.len();
    ParamVector::from_values(Arc::new(Layout::from_shapes([("w", 1, n)])), vals).unwrap()
}

#[test]
fn aggregate_examples() {
    let a = pv(vec![0.0; 5]);
    let b = pv(vec![4.0; 5]);
    assert_eq!(aggregate(&[(a.clone(), 7)], AggregatorKind::FedAvg).unwrap(), a);
    let m = aggregate(&[(a, 1), (b, 3)], AggregatorKind::FedAvg).unwrap();
    assert!(m.as_slice().iter().all(|&x| x == 3.0));
}

#[test]
fn equal_weights_give_plain_mean() {
    let mut rng = stream(4, &[]);
    let ups: Vec<_> = (0..5).map(|_| (pv((0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()), 10)).collect();
    let agg = aggregate(&ups, AggregatorKind::FedAvg).unwrap();
    for k in 0..6 {
        let brute = ups.iter().map(|(u, _)| u.as_slice()[k]).sum::<f64>() / 5.0;
        assert!((agg.as_slice()[k] - brute).abs() < 1e-14);
    }
}

#[test]
fn aggregate_rejects_layout_mismatch() {
    let a = pv(vec![0.0; 3]);
    let b = pv(vec![0.0; 4]);
    assert!(matches!(aggregate(&[(a, 1), (b, 1)], AggregatorKind::FedAvg), Err(Error::Protocol(_))));
    assert!(matches!(aggregate::<f64>(&[], AggregatorKind::FedAvg), Err(Error::Protocol(_))));
}

#[test]
fn zero_learning_rate_is_a_fixpoint() {
    let data = client_data(8, 3, 1);
    let mut p = plan(AggregatorKind::FedAvg, 1, 1);
    p.batch_size = 8;
    p.adam.lr = 0.0;
    let c = cfg().with_features(3);
    let global = MiwaeModel::<f64>::init(c.clone(), &mut stream(0, &[])).unwrap().into_params();
    let mut client = ClientState::new(0, data).unwrap();
    let u = client.local_update(&global, &p, &c, 0, None).unwrap();
    assert_eq!(u.params, global);
}

#[test]
fn empty_client_fails_at_setup() {
    let empty = MaskedMatrix::<f64>::complete(Matrix::zeros(0, 3));
    assert!(matches!(ClientState::new(0, empty), Err(Error::Config(_))));
    assert!(plan(AggregatorKind::FedAvg, 1, 0).validate().is_err());
}

#[test]
fn fedprox_zero_equals_fedavg() {
    let clients = vec![client_data(9, 3, 2), client_data(6, 3, 3)];
    let (ma, ta) = run_training(clients.clone(), &plan(AggregatorKind::FedAvg, 3, 2), &cfg()).unwrap();
    let (mb, tb) = run_training(clients, &plan(AggregatorKind::FedProx { mu: 0.0 }, 3, 2), &cfg()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ta, tb);
}

#[test]
fn strong_proximal_term_limits_drift() {
    let c = cfg().with_features(3);
    let data = client_data(12, 3, 5);
    let global = MiwaeModel::<f64>::init(c.clone(), &mut stream(1, &[])).unwrap().into_params();
    let drift = |mu: f64| {
        let mut client = ClientState::new(0, data.clone()).unwrap();
        let mut p = plan(AggregatorKind::FedProx { mu }, 1, 1);
        p.adam.lr = 0.05;
        let u = client.local_update(&global, &p, &c, 0, None).unwrap();
        u.params.sub(&global).unwrap().norm()
    };
    assert!(drift(1e6) < drift(0.0));
}

#[test]
fn single_client_federation_is_local_training() {
    let data = client_data(10, 4, 6);
    let p = plan(AggregatorKind::FedProx { mu: 0.1 }, 3, 2);
    let (fed, _) = run_training(vec![data.clone()], &p, &cfg()).unwrap();
    // Local training: the same client object carried through rounds with no server.
    let c = cfg().with_features(4);
    let mut params = initial_model::<f64>(&c, &p).unwrap().into_params();
    let mut client = ClientState::new(0, data).unwrap();
    for r in 0..p.rounds {
        params = client.local_update(&params, &p, &c, r, None).unwrap().params;
    }
    assert_eq!(fed.params(), &params);
}

#[test]
fn centralized_is_single_client_with_scaled_rounds() {
    let a = client_data(7, 3, 7);
    let b = client_data(5, 3, 8);
    let pooled = MaskedMatrix::vstack(&[&a, &b]).unwrap();
    let p = plan(AggregatorKind::FedAvg, 2, 3);
    let (m1, t1) = run_centralized(pooled.clone(), &p, &cfg(), 2).unwrap();
    let p4 = RoundPlan { rounds: 4, ..p.clone() };
    let (m2, _) = run_training(vec![pooled.clone()], &p4, &cfg()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(t1.total_epochs(), 2 * 3 * 2);
    let (m3, _) = run_centralized(pooled, &p, &cfg(), 2).unwrap();
    assert_eq!(m1, m3);
}

#[test]
fn transcript_counts_and_protocol_shape() {
    let clients = vec![client_data(6, 3, 9), client_data(6, 3, 10), client_data(5, 3, 11)];
    let mut t = Transcript::new();
    let (_, std) = federated_standardize(&clients, &mut t).unwrap();
    let mut states: Vec<_> = std.into_iter().enumerate().map(|(i, d)| ClientState::new(i, d).unwrap()).collect();
    run_training_with(&mut states, &plan(AggregatorKind::FedAvg, 4, 1), &cfg(), &mut t).unwrap();
    assert_eq!(t.aggregations(), 4);
    assert_eq!(t.client_updates(), 12);
    let uploads = t.events().iter().filter(|e| matches!(e, Event::MomentUpload { .. })).count();
    let broadcasts = t.events().iter().filter(|e| matches!(e, Event::ScalerBroadcast { .. })).count();
    assert_eq!((uploads, broadcasts), (3, 3));
    let first_stage2 = t.events().iter().position(|e| matches!(e, Event::Broadcast { .. })).unwrap();
    assert!(t.events()[..first_stage2].iter().all(|e| matches!(e, Event::MomentUpload { .. } | Event::ScalerBroadcast { .. })));
    assert!(t.push(Event::MomentUpload { client: 0, summary: MomentSummary { count: vec![], sum: vec![], sum_sq: vec![] } }).is_err());
    assert_eq!(t.round_metrics().len(), 12);
    let mut buf = Vec::new();
    t.write_jsonl("demo", &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), t.events().len());
    assert!(text.lines().all(|l| l.starts_with("{\"run\":\"demo\",\"event\":")));
}

#[test]
fn scaffold_server_control_tracks_weighted_client_average() {
    let clients = vec![client_data(8, 3, 12), client_data(4, 3, 13)];
    let (_, t) = run_training(clients, &plan(AggregatorKind::Scaffold, 3, 1), &cfg()).unwrap();
    let mut pending: Vec<(f64, usize)> = Vec::new();
    for e in t.events() {
        match e {
            Event::ClientUpdate { n, control: Some(c), .. } => pending.push((c.sum, *n)),
            Event::Aggregation { server_control: Some(s), .. } => {
                let total: usize = pending.iter().map(|(_, n)| n).sum();
                let avg: f64 = pending.iter().map(|(s, n)| s * *n as f64 / total as f64).sum();
                assert!((s.sum - avg).abs() <= 1e-9 * (1.0 + avg.abs()), "{} vs {avg}", s.sum);
                pending.clear();
            }
            Event::ClientUpdate { control: None, .. } | Event::Aggregation { server_control: None, .. } => {
                panic!("Scaffold events must carry control payloads")
            }
            _ => {}
        }
    }
}

#[test]
fn training_is_deterministic_and_decreases_loss() {
    let clients = vec![client_data(16, 4, 14), client_data(12, 4, 15)];
    let mut p = plan(AggregatorKind::FedProx { mu: 0.01 }, 8, 3);
    p.adam.lr = 0.01;
    let (a, ta) = run_training(clients.clone(), &p, &cfg()).unwrap();
    let (b, tb) = run_training(clients, &p, &cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let m = ta.round_metrics();
    let first: f64 = m.iter().filter(|r| r.round == 0).map(|r| r.mean_loss).sum();
    let last: f64 = m.iter().filter(|r| r.round == 7).map(|r| r.mean_loss).sum();
    assert!(last < first, "{last} !< {first}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn aggregation_is_convex(vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..6),
                                 ns in prop::collection::vec(1usize..50, 6)) {
            let ups: Vec<_> = vals.iter().zip(&ns).map(|(v, &n)| (pv(v.clone()), n)).collect();
            let agg = aggregate(&ups, AggregatorKind::FedAvg).unwrap();
            for k in 0..4 {
                let lo = vals.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                let hi = vals.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(agg.as_slice()[k] >= lo && agg.as_slice()[k] <= hi);
            }
        }
    }
}
