//! End-to-end checks on synthetic data: generator effects seen through the
//! full evaluation pipeline.

use touchpit::dataset::{self, DeviceSpec};
use touchpit::experiments::{self, ExperimentSpec, Variant};
use touchpit::metrics;
use touchpit::preprocess::Direction;
use touchpit::protocol::{self, FeatureStore, ProtocolConfig, SplitStrategy};
use touchpit::synthgen::{generate, SynthConfig, SynthDevice};

fn baseline_mean(cfg: &SynthConfig) -> f64 {
    let d = generate(cfg).unwrap();
    let store = FeatureStore::build(&d, Direction::Left);
    let users = store.eligible(10);
    let ev = protocol::evaluate(&store, &users, &ProtocolConfig::default()).unwrap();
    protocol::summarize(&ev, 1).unwrap().mean_eer
}

#[test]
fn separable_users_give_low_eer() {
    let eer = baseline_mean(&SynthConfig {
        n_users: 20,
        between: 3.0,
        within: 0.3,
        ..Default::default()
    });
    assert!(eer < 0.05, "{eer}");
}

#[test]
fn identical_users_give_chance_eer() {
    let eer = baseline_mean(&SynthConfig {
        n_users: 20,
        between: 0.0,
        ..Default::default()
    });
    assert!((eer - 0.5).abs() <= 0.05, "{eer}");
}

#[test]
fn generation_is_byte_identical() {
    let cfg = SynthConfig {
        n_users: 5,
        session_drift: 0.4,
        devices: SynthConfig::same_screen_devices(0.7),
        seed: 11,
        ..Default::default()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    dataset::write_csv(&generate(&cfg).unwrap(), &mut a).unwrap();
    dataset::write_csv(&generate(&cfg).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
}

fn split_gap(drift: f64, seed: u64) -> f64 {
    let d = generate(&SynthConfig {
        n_users: 30,
        sessions_per_user: 4,
        strokes_per_session: 25,
        session_drift: drift,
        seed,
        ..Default::default()
    })
    .unwrap();
    let store = FeatureStore::build(&d, Direction::Left);
    let users = store.eligible(10);
    let mean = |split| {
        let cfg = ProtocolConfig {
            split,
            seed,
            ..Default::default()
        };
        protocol::summarize(&protocol::evaluate(&store, &users, &cfg).unwrap(), 1).unwrap().mean_eer
    };
    mean(SplitStrategy::DedicatedContig) - mean(SplitStrategy::Random)
}

#[test]
fn session_drift_widens_the_split_gap() {
    let seeds = 0..20u64;
    let low: Vec<f64> = seeds.clone().map(|s| split_gap(0.0, s)).collect();
    let high: Vec<f64> = seeds.map(|s| split_gap(0.8, s)).collect();
    let (ml, mh) = (metrics::mean(&low), metrics::mean(&high));
    assert!(mh > ml, "gap without drift {ml}, with drift {mh}");
    let p = metrics::welch_t(&high, &low).unwrap();
    assert!(p < 0.01, "p = {p}");
}

#[test]
fn cumulative_unrealistic_arm_is_optimistic() {
    let d = generate(&SynthConfig {
        n_users: 45,
        session_drift: 0.6,
        devices: SynthConfig::same_screen_devices(1.0),
        ..Default::default()
    })
    .unwrap();
    let spec = ExperimentSpec {
        reps: 3,
        cumulative_n: 15,
        ..ExperimentSpec::new(Variant::Cumulative, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0].group, "unrealistic");
    assert_eq!(recs[1].group, "realistic");
    assert!(recs[0].rep_mean_eer() < recs[1].rep_mean_eer());
    assert!(recs[2].payload["mean_difference"].as_f64().unwrap() > 0.0);
}

#[test]
fn device_identification_without_device_effect_is_chance() {
    let devices: Vec<SynthDevice> = (1..=9)
        .map(|i| SynthDevice {
            spec: DeviceSpec::new(&format!("Model {i}"), 750, 1334, 4.7, 326.0),
            offset_scale: 0.0,
        })
        .collect();
    let d = generate(&SynthConfig {
        n_users: 450,
        sessions_per_user: 1,
        strokes_per_session: 5,
        session_length_spread: 0.0,
        between: 0.5,
        within: 1.0,
        devices,
        ..Default::default()
    })
    .unwrap();
    let spec = ExperimentSpec {
        identify_cap: 150,
        ..ExperimentSpec::new(
            Variant::P2DeviceIdentify,
            ProtocolConfig {
                min_strokes: 2,
                ..Default::default()
            },
        )
    };
    let r = &experiments::run(&spec, &d).unwrap()[0];
    let acc = r.payload["accuracy"].as_f64().unwrap();
    let sigma = r.payload["binomial_sigma"].as_f64().unwrap();
    assert_eq!(r.payload["confusion"].as_array().unwrap().len(), 9);
    assert!((acc - 1.0 / 9.0).abs() <= 3.0 * sigma, "accuracy {acc}, sigma {sigma}");
}

#[test]
fn results_do_not_depend_on_pool_size() {
    let d = generate(&SynthConfig {
        n_users: 12,
        sessions_per_user: 3,
        strokes_per_session: 15,
        session_drift: 0.5,
        ..Default::default()
    })
    .unwrap();
    let spec = ExperimentSpec {
        reps: 2,
        n_grid: vec![8, 12],
        ..ExperimentSpec::new(Variant::P4Attacker, ProtocolConfig::default())
    };
    let on = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| experiments::run(&spec, &d).unwrap())
    };
    let a = on(1);
    let b = on(4);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    // paired design: the difference record is the per-rep gap of the two arms
    for chunk in a.chunks(3) {
        let diff: Vec<f64> = serde_json::from_value(chunk[2].payload["rep_difference"].clone()).unwrap();
        for (i, d) in diff.iter().enumerate() {
            assert_eq!(*d, chunk[1].reps[i].mean_eer - chunk[0].reps[i].mean_eer);
        }
    }
}

#[test]
fn threshold_transfer_point_dominates_test_eer() {
    let d = generate(&SynthConfig {
        n_users: 10,
        session_drift: 0.5,
        ..Default::default()
    })
    .unwrap();
    let store = FeatureStore::build(&d, Direction::Left);
    let users = store.eligible(10);
    let evals = protocol::evaluate(&store, &users, &ProtocolConfig::default()).unwrap();
    for w in [1, 3] {
        for e in &evals {
            let t = experiments::transfer_threshold(e, w).unwrap();
            assert!(t.far.max(t.frr) >= t.test_eer - 1e-12, "{t:?}");
        }
    }
}

#[test]
fn every_variant_runs_and_round_trips() {
    let d = generate(&SynthConfig {
        n_users: 24,
        sessions_per_user: 4,
        strokes_per_session: 20,
        session_drift: 0.5,
        devices: SynthConfig::same_screen_devices(1.0),
        ..Default::default()
    })
    .unwrap();
    for v in Variant::ALL {
        let spec = ExperimentSpec {
            reps: 2,
            n_grid: vec![8, 12],
            reference_n: 8,
            w_grid: vec![1, 2, 5],
            cumulative_n: 8,
            partial_window: 4,
            identify_cap: 100,
            ..ExperimentSpec::new(v, ProtocolConfig::default())
        };
        let recs = experiments::run(&spec, &d).unwrap_or_else(|e| panic!("{v}: {e}"));
        assert!(!recs.is_empty(), "{v}");
        for r in &recs {
            assert_eq!(r.variant, v);
            let back: experiments::ResultRecord = serde_json::from_str(&serde_json::to_string(r).unwrap()).unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(r).unwrap());
        }
        match v {
            Variant::P1Sessions => {
                for g in ["early", "late", "early_vs_late", "session_count", "swipes_scatter"] {
                    assert!(recs.iter().any(|r| r.group == g), "{g}");
                }
            }
            Variant::P2DeviceMixing => assert_eq!(recs.len(), 6),
            Variant::P3Splits => assert_eq!(recs.len(), 5),
            Variant::P4Attacker => assert_eq!(recs.len(), 6),
            Variant::P5Aggregation => assert_eq!(recs.len(), 3),
            Variant::PartialWindow => assert_eq!(recs.len(), 5),
            Variant::Cumulative => assert_eq!(recs.len(), 3),
            _ => {}
        }
    }
}
