use fedalign::data::{
    generate_synthetic_domains, leave_one_domain_out, DataConfig, Dataset, SplitPlan,
};
use fedalign::federation::transport::{ClientMessage, Direction, ServerMessage, Transport};
use fedalign::federation::{
    aggregate, local_train, run_federation, upload_count, Algorithm, ClientState, DataView,
    FederationConfig, RunSettings, Update,
};
use fedalign::losses::LossConfig;
use fedalign::mixstyle::{MixConfig, StyleBank, StyleStats};
use fedalign::model::{ArchConfig, ModelParams};
use fedalign::numerics::Tensor;
use fedalign::rng::{stream, stream_rng};
use proptest::prelude::*;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        in_channels: 1,
        conv1_channels: 1,
        conv2_channels: 1,
        d_z: 1,
        num_classes: 1,
    }
}

fn filled(v: f64) -> ModelParams {
    let arch = tiny_arch();
    let t = arch
        .layout()
        .iter()
        .map(|(_, s)| Tensor::full(s, v))
        .collect();
    ModelParams::from_tensors(arch, t).unwrap()
}

fn small_data(per_domain: usize, strength: f64) -> Dataset {
    let cfg = DataConfig {
        per_domain,
        style_strength: strength,
        ..DataConfig::default()
    };
    generate_synthetic_domains(&cfg, 3).unwrap()
}

fn settings(algorithm: Algorithm, rounds: usize, epochs: usize, clients: usize) -> RunSettings {
    RunSettings {
        algorithm,
        federation: FederationConfig {
            rounds,
            local_epochs: epochs,
            clients,
            batch_size: 16,
            ..FederationConfig::default()
        },
        loss: LossConfig::default(),
        mix: MixConfig::default(),
        arch: ArchConfig::with_classes(5),
    }
}

#[test]
fn weighted_mean_example_is_exact() {
    let g = aggregate(&[
        Update {
            client: 0,
            samples: 1,
            params: filled(0.0),
        },
        Update {
            client: 1,
            samples: 3,
            params: filled(4.0),
        },
    ])
    .unwrap();
    assert!(g.flatten().iter().all(|&v| v == 3.0));
}

#[test]
fn identical_updates_are_a_fixed_point() {
    let mut rng = stream_rng(4, &[]);
    let p = ModelParams::init(ArchConfig::default(), &mut rng).unwrap();
    let updates: Vec<Update> = (0..5)
        .map(|k| Update {
            client: k,
            samples: 7 + 13 * k as usize,
            params: p.clone(),
        })
        .collect();
    assert_eq!(aggregate(&updates).unwrap(), p);
}

#[test]
fn aggregate_rejects_bad_input() {
    assert!(aggregate(&[]).is_err());
    let bad = Update {
        client: 0,
        samples: 0,
        params: filled(1.0),
    };
    assert!(aggregate(&[bad]).is_err());
}

/// One client, one round: the federated run must reproduce plain local
/// training from the same initialization bit for bit.
#[test]
fn single_client_single_round_equals_centralized() {
    let ds = small_data(40, 1.0);
    for algorithm in [Algorithm::FedAvg, Algorithm::FedAlign] {
        let s = settings(algorithm, 1, 2, 1);
        let split = leave_one_domain_out(&ds, 0, 1).unwrap();
        let seed = 9;
        let fed = run_federation(&ds, &split, &s, seed).unwrap();

        let init = ModelParams::init(s.arch, &mut stream_rng(seed, &[stream::INIT])).unwrap();
        let mut client = ClientState::new(0, split.clients[0].clone(), &s, seed);
        let view = DataView::new(&ds);
        let local = local_train(
            &view,
            &mut client,
            &init,
            &StyleBank::default(),
            1,
            &s,
            seed,
        )
        .unwrap();
        assert_eq!(fed.params.flatten(), local.params.flatten(), "{algorithm}");
    }
}

#[test]
fn zero_epochs_or_zero_rate_leave_parameters() {
    let ds = small_data(20, 1.0);
    let view = DataView::new(&ds);
    let ids: Vec<u32> = ds.samples.iter().map(|s| s.id).collect();
    let init = ModelParams::init(ArchConfig::with_classes(5), &mut stream_rng(1, &[])).unwrap();
    let mut s = settings(Algorithm::FedAlign, 2, 0, 1);
    let mut client = ClientState::new(0, ids.clone(), &s, 0);
    let out = local_train(&view, &mut client, &init, &StyleBank::default(), 1, &s, 0).unwrap();
    assert_eq!(out.params, init);
    s.federation.local_epochs = 2;
    s.federation.lr = 0.0;
    let out = local_train(&view, &mut client, &init, &StyleBank::default(), 1, &s, 0).unwrap();
    assert_eq!(out.params, init);
    assert!(out.steps > 0);
}

#[test]
fn empty_client_is_degenerate() {
    let ds = small_data(10, 1.0);
    let view = DataView::new(&ds);
    let s = settings(Algorithm::FedAvg, 1, 1, 1);
    let init = ModelParams::init(s.arch, &mut stream_rng(1, &[])).unwrap();
    let mut client = ClientState::new(0, Vec::new(), &s, 0);
    let err = local_train(&view, &mut client, &init, &StyleBank::default(), 1, &s, 0).unwrap_err();
    assert!(matches!(err, fedalign::Error::Degenerate(_)));
}

/// With one client and one epoch per round, per-round losses are per-epoch
/// losses. On style-free data the classifier loss falls by epoch 3.
#[test]
fn classification_loss_falls_over_epochs() {
    let ds = small_data(60, 0.0);
    for seed in 0..5 {
        let s = settings(Algorithm::FedAvg, 3, 1, 1);
        let split = leave_one_domain_out(&ds, 0, 1).unwrap();
        let out = run_federation(&ds, &split, &s, seed).unwrap();
        let first = out.reports[0].loss.l_cls;
        let third = out.reports[2].loss.l_cls;
        assert!(third < first, "seed {seed}: {first} -> {third}");
    }
}

fn audit_run(
    algorithm: Algorithm,
) -> (
    fedalign::federation::FederationOutcome,
    SplitPlan,
    RunSettings,
) {
    let ds = small_data(30, 1.0);
    let mut s = settings(algorithm, 3, 1, 3);
    s.federation.upload_ratio = 0.15;
    let split = leave_one_domain_out(&ds, 1, 3).unwrap();
    let out = run_federation(&ds, &split, &s, 5).unwrap();
    (out, split, s)
}

#[test]
fn uploads_are_only_checkpoints_and_statistics() {
    let (out, ..) = audit_run(Algorithm::FedAlign);
    let ups: Vec<_> = out
        .audit
        .iter()
        .filter(|e| e.direction == Direction::Up)
        .collect();
    assert!(!ups.is_empty());
    assert!(ups
        .iter()
        .all(|e| e.kind == "checkpoint" || e.kind == "stats"));
    assert!(ups.iter().any(|e| e.kind == "stats"));
    let (avg, ..) = audit_run(Algorithm::FedAvg);
    assert!(avg
        .audit
        .iter()
        .filter(|e| e.direction == Direction::Up)
        .all(|e| e.kind == "checkpoint"));
}

#[test]
fn byte_meter_matches_closed_form() {
    for algorithm in [Algorithm::FedAlign, Algorithm::FedAvg] {
        let (out, split, s) = audit_run(algorithm);
        let ckpt = ModelParams::checkpoint_size(&s.arch) as u64;
        let record = StyleStats::wire_size(s.arch.conv1_channels) as u64;
        let per_round: u64 = split
            .clients
            .iter()
            .map(|ids| {
                let stats = if algorithm.aligns() {
                    record * upload_count(ids.len(), s.federation.upload_ratio) as u64
                } else {
                    0
                };
                ckpt + stats
            })
            .sum();
        for (t, r) in out.reports.iter().enumerate() {
            assert_eq!(
                r.bytes.up,
                per_round * (t as u64 + 1),
                "{algorithm} round {}",
                r.round
            );
        }
        let stats_total: u64 = out
            .audit
            .iter()
            .filter(|e| e.kind == "stats")
            .map(|e| e.body_bytes as u64)
            .sum();
        assert_eq!(out.reports.last().unwrap().bytes.stats_up, stats_total);
    }
}

#[test]
fn server_frames_cannot_be_uploaded() {
    let mut t = Transport::new();
    let down = t.send_down(1, 0, &ServerMessage::Broadcast(vec![1, 2, 3]));
    assert!(Transport::receive_up(&down).is_err());
    let up = t.send_up(1, 0, &ClientMessage::Stats(vec![]));
    assert!(Transport::receive_down(&up).is_err());
    assert_eq!(t.meter().down, 3);
}

fn params_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec((1usize..50, -10.0..10.0f64), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_arrival_order(items in params_strategy(), rot in 0usize..6) {
        let updates: Vec<Update> = items
            .iter()
            .enumerate()
            .map(|(k, &(n, v))| Update { client: k as u32, samples: n, params: filled(v) })
            .collect();
        let mut rotated = updates.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&rotated).unwrap());
    }

    #[test]
    fn aggregate_stays_within_client_range(items in params_strategy()) {
        let updates: Vec<Update> = items
            .iter()
            .enumerate()
            .map(|(k, &(n, v))| Update { client: k as u32, samples: n, params: filled(v) })
            .collect();
        let lo = items.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = items.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let g = aggregate(&updates).unwrap();
        for v in g.flatten() {
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }
}
