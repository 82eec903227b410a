//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criterion 10 runs only when `TOUCHPIT_REAL_DATA` names an
//! ingested dataset CSV.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use touchpit::classify::{knn, mlp, svm};
use touchpit::experiments::{self, ExperimentSpec, ResultRecord, Variant};
use touchpit::metrics;
use touchpit::protocol::{ProtocolConfig, SplitStrategy};
use touchpit::synthgen::{generate, SynthConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

/// Exhaustive sweep: every candidate threshold, rates by direct counting,
/// linear interpolation at the first point where FRR reaches FAR.
fn brute_force_eer(g: &[f64], i: &[f64]) -> f64 {
    let mut ts: Vec<f64> = g.iter().chain(i).copied().collect();
    let lo = ts.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    ts.push(lo);
    ts.push(hi);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let rates = |t: f64| {
        let far = i.iter().filter(|&&s| s >= t).count() as f64 / i.len() as f64;
        let frr = g.iter().filter(|&&s| s < t).count() as f64 / g.len() as f64;
        (far, frr)
    };
    let mut prev = rates(ts[0]);
    for &t in &ts[1..] {
        let cur = rates(t);
        if cur.1 >= cur.0 {
            let da = prev.0 - prev.1;
            let db = cur.0 - cur.1;
            let lambda = da / (da - db);
            return prev.0 + lambda * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("the upper sentinel always has FRR = 1 >= FAR = 0")
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let ng = rng.random_range(1..=50);
        let ni = rng.random_range(1..=50);
        // every third case draws from a coarse grid to force ties
        let draw = |rng: &mut ChaCha8Rng| {
            if case % 3 == 0 {
                rng.random_range(0..8) as f64 / 8.0
            } else {
                rng.random::<f64>()
            }
        };
        let shift = rng.random_range(-0.3..0.3);
        let g: Vec<f64> = (0..ng).map(|_| draw(&mut rng) + shift).collect();
        let i: Vec<f64> = (0..ni).map(|_| draw(&mut rng)).collect();
        let got = metrics::eer(&g, &i).expect("non-empty").eer;
        worst = worst.max((got - brute_force_eer(&g, &i)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 10.0,
        format!("1000 pairs, max |eer - oracle| = {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(&mut rng, 10, 4);
    let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    let p = mlp::MlpParams {
        hidden: vec![5, 4, 3],
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    let model = mlp::fit(x.view(), &y, &p, &mut rng);
    let mut worst: f64 = 0.0;
    for mode in [mlp::BnMode::Batch, mlp::BnMode::Running] {
        let (_, grads) = model.loss_and_grad(x.view(), &y, mode);
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let base = model.flat_params();
        let mut probe = model.clone();
        let eps = 1e-5;
        for k in 0..base.len() {
            let mut q = base.clone();
            q[k] += eps;
            probe.set_flat_params(&q);
            let up = probe.loss_and_grad(x.view(), &y, mode).0;
            q[k] -= 2.0 * eps;
            probe.set_flat_params(&q);
            let down = probe.loss_and_grad(x.view(), &y, mode).0;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(analytic[k].abs()).max(1e-8);
            worst = worst.max((numeric - analytic[k]).abs() / denom);
        }
    }
    worst
}

fn knn_oracle(train: &Array2<f64>, genuine: &[bool], k: usize, q: ndarray::ArrayView1<f64>) -> f64 {
    let mut d: Vec<(f64, usize)> = train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, r)| (r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.clamp(1, train.nrows());
    d[..k].iter().filter(|(_, j)| genuine[*j]).count() as f64 / k as f64
}

fn criterion_2() -> Outcome {
    let grad = (0..5).map(mlp_gradient_error).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut kkt: f64 = 0.0;
    let mut unconverged = 0;
    for case in 0..100 {
        let n = rng.random_range(20..80);
        let d = rng.random_range(2..6);
        let sep = if case % 2 == 0 { 3.0 } else { 0.3 };
        let mut x = random_matrix(&mut rng, n, d);
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for (mut row, &l) in x.rows_mut().into_iter().zip(&y) {
            row[0] += l * sep;
        }
        let c = [0.5, 1.0, 10.0][case % 3];
        let params = svm::SvmParams {
            c,
            ..Default::default()
        };
        let fit = svm::fit(x.view(), &y, &params, false);
        if !fit.converged {
            unconverged += 1;
        }
        kkt = kkt.max(svm::kkt_violation(&fit, x.view(), &y, c));
    }

    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(1..60);
        let d = rng.random_range(1..5);
        let mut x = random_matrix(&mut rng, n, d);
        if case % 4 == 0 && n > 2 {
            let first = x.row(0).to_owned();
            x.row_mut(n - 1).assign(&first);
        }
        let genuine: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let k = rng.random_range(1..25);
        let model = knn::fit(x.clone(), genuine.clone(), &knn::KnnParams { k });
        let queries = random_matrix(&mut rng, 10, d);
        for q in queries.rows().into_iter().chain(x.rows()) {
            if model.score(q) != knn_oracle(&x, &genuine, k, q) {
                mismatches += 1;
            }
        }
    }
    outcome(
        grad <= 1e-4 && kkt <= 1e-3 && unconverged == 0 && mismatches == 0,
        format!(
            "MLP gradient rel err {grad:.2e}; SMO max KKT violation {kkt:.2e} ({unconverged} unconverged); kNN mismatches {mismatches}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut random_wins = 0;
    let mut full_order = 0;
    let mut gaps = Vec::new();
    for seed in 0..20u64 {
        let d = generate(&SynthConfig {
            n_users: 60,
            session_drift: 0.5,
            seed,
            ..Default::default()
        })
        .expect("valid config");
        let spec = ExperimentSpec::new(
            Variant::P3Splits,
            ProtocolConfig {
                seed,
                ..Default::default()
            },
        );
        let recs = experiments::run(&spec, &d).expect("p3 runs");
        let m = |s: SplitStrategy| recs.iter().find(|r| r.group == s.as_str()).expect("strategy").rep_mean_eer();
        let (intra, random, contiguous, dedicated) = (
            m(SplitStrategy::IntraSession),
            m(SplitStrategy::Random),
            m(SplitStrategy::Contiguous),
            m(SplitStrategy::DedicatedContig),
        );
        if random < dedicated {
            random_wins += 1;
        }
        if intra <= random && random < contiguous && contiguous < dedicated {
            full_order += 1;
        }
        gaps.push(dedicated - random);
    }
    let gap = metrics::mean(&gaps);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        random_wins >= 16 && gap > 0.01 && secs < 600.0,
        format!(
            "RANDOM < DEDICATED in {random_wins}/20 seeds, mean gap {:.2} pp; full ordering in {full_order}/20; {secs:.0}s",
            gap * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let d = generate(&SynthConfig {
        n_users: 100,
        session_drift: 0.5,
        ..Default::default()
    })
    .expect("valid config");
    let spec = ExperimentSpec {
        n_grid: vec![11, 21, 41, 81],
        reps: 10,
        ..ExperimentSpec::new(Variant::P4Attacker, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).expect("p4 runs");
    let mut counts = Vec::new();
    let mut gaps = Vec::new();
    for r in recs.iter().filter(|r| r.group == "difference") {
        let diffs: Vec<f64> = serde_json::from_value(r.payload["rep_difference"].clone()).expect("diffs");
        counts.push(diffs.iter().filter(|d| **d < 0.0).count());
        gaps.push(-r.payload["mean_difference"].as_f64().expect("mean"));
    }
    let pass = counts.len() == 4 && counts.iter().all(|&c| c >= 8) && gaps[0] > gaps[3];
    outcome(
        pass,
        format!(
            "INCLUDE < EXCLUDE in {counts:?}/10 reps at n = 11, 21, 41, 81; EXCLUDE - INCLUDE = {}",
            gaps.iter().map(|g| format!("{:.2} pp", g * 100.0)).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let d = generate(&SynthConfig {
        n_users: 60,
        sessions_per_user: 8,
        strokes_per_session: 40,
        session_drift: 0.5,
        ..Default::default()
    })
    .expect("valid config");
    let ws = [1usize, 2, 4, 8, 16];
    let spec = ExperimentSpec {
        w_grid: ws.to_vec(),
        reps: 10,
        ..ExperimentSpec::new(Variant::P5Aggregation, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).expect("p5 runs");
    let curve: Vec<f64> = recs.iter().map(ResultRecord::rep_mean_eer).collect();
    let monotone = curve.windows(2).all(|p| p[1] <= p[0]);
    let rho = metrics::spearman(&ws.map(|w| w as f64), &curve);
    outcome(
        monotone && rho <= -0.9,
        format!(
            "mean EER at w = 1, 2, 4, 8, 16: {}; Spearman rho {rho:.3}",
            curve.iter().map(|e| format!("{:.4}", e)).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn identify_z(offset: f64) -> (f64, f64, f64) {
    let d = generate(&SynthConfig {
        n_users: 600,
        sessions_per_user: 1,
        strokes_per_session: 5,
        session_length_spread: 0.0,
        between: 0.5,
        within: 1.0,
        devices: SynthConfig::same_screen_devices(offset),
        ..Default::default()
    })
    .expect("valid config");
    let spec = ExperimentSpec::new(
        Variant::P2DeviceIdentify,
        ProtocolConfig {
            min_strokes: 2,
            ..Default::default()
        },
    );
    let r = &experiments::run(&spec, &d).expect("identification runs")[0];
    let acc = r.payload["accuracy"].as_f64().expect("accuracy");
    let chance = r.payload["chance"].as_f64().expect("chance");
    let sigma = r.payload["binomial_sigma"].as_f64().expect("sigma");
    (acc, chance, (acc - chance) / sigma)
}

fn criterion_6() -> Outcome {
    let d = generate(&SynthConfig {
        n_users: 60,
        session_drift: 0.5,
        devices: SynthConfig::same_screen_devices(1.0),
        ..Default::default()
    })
    .expect("valid config");
    let spec = ExperimentSpec {
        reps: 10,
        ..ExperimentSpec::new(Variant::P2DeviceMixing, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).expect("p2 runs");
    let per_rep = |prefix: &str| -> Vec<f64> {
        let arms: Vec<&ResultRecord> = recs.iter().filter(|r| r.group.starts_with(prefix)).collect();
        (0..10)
            .map(|i| metrics::mean(&arms.iter().map(|r| r.reps[i].mean_eer).collect::<Vec<_>>()))
            .collect()
    };
    let (dev, comb) = (per_rep("device:"), per_rep("combined:"));
    let wins = dev.iter().zip(&comb).filter(|(a, b)| a > b).count();
    let (acc1, chance, z1) = identify_z(1.0);
    let (acc0, _, z0) = identify_z(0.0);
    outcome(
        wins >= 8 && z1 >= 3.0 && z0.abs() <= 3.0,
        format!(
            "per-device > COMBINED in {wins}/10 reps (means {:.4} vs {:.4}); identification {acc1:.3} (z = {z1:.1}) with device effect, {acc0:.3} (z = {z0:.2}) without, chance {chance:.3}",
            metrics::mean(&dev),
            metrics::mean(&comb)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let d = generate(&SynthConfig {
        n_users: 100,
        sessions_per_user: 3,
        strokes_per_session: 20,
        session_drift: 0.5,
        ..Default::default()
    })
    .expect("valid config");
    let spec = ExperimentSpec {
        n_grid: vec![10, 20, 40, 80],
        reps: 50,
        reference_n: 40,
        ..ExperimentSpec::new(Variant::P1SampleSize, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).expect("p1 runs");
    let ratios: Vec<f64> = recs
        .iter()
        .map(|r| r.payload["std_ratio"].as_f64().expect("ratio"))
        .collect();
    let decreasing = ratios.windows(2).all(|p| p[1] < p[0]);
    outcome(
        decreasing,
        format!(
            "empirical / extrapolated std at n = 10, 20, 40, 80: {}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let d = generate(&SynthConfig {
        n_users: 30,
        session_drift: 0.5,
        ..Default::default()
    })
    .expect("valid config");
    let spec = ExperimentSpec {
        reps: 100,
        partial_window: 10,
        ..ExperimentSpec::new(Variant::PartialWindow, ProtocolConfig::default())
    };
    let recs = experiments::run(&spec, &d).expect("partial window runs");
    let far: Vec<f64> = recs.iter().map(|r| r.payload["acceptance"].as_f64().expect("acceptance")).collect();
    let monotone = far.len() == 11 && far.windows(2).all(|p| p[1] <= p[0]);
    outcome(
        monotone,
        format!(
            "acceptance at n = 0..10: {}",
            far.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn hash_outputs(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            n.ends_with(".jsonl") || n.ends_with(".csv")
        })
        .map(|p| {
            let h = Sha256::digest(std::fs::read(&p).expect("read"));
            let hex: String = h.iter().map(|b| format!("{b:02x}")).collect();
            (p.file_name().unwrap().to_string_lossy().into_owned(), hex)
        })
        .collect();
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = tmp.path().join("data.csv");
    let bin = env!("CARGO_BIN_EXE_touchpit");
    let st = Command::new(bin)
        .args(["synth", "--users", "24", "--sessions", "4", "--strokes", "20", "--drift", "0.5"])
        .args(["--devices", "iPhone 6s,iPhone 7,iPhone 8", "--device-offset", "1", "--seed", "3", "-o"])
        .arg(&data)
        .status()
        .expect("spawn");
    if !st.success() {
        return outcome(false, "synth failed");
    }
    let sets = [
        "reps=2",
        "n_grid=8,12",
        "reference_n=8",
        "w_grid=1,2,5",
        "cumulative_n=8",
        "partial_window=4",
        "identify_cap=100",
    ];
    let mut bad = Vec::new();
    let mut files = 0;
    for v in Variant::ALL {
        let mut hashes = Vec::new();
        for jobs in ["1", "4"] {
            let out: PathBuf = tmp.path().join(format!("{v}-{jobs}"));
            let mut cmd = Command::new(bin);
            cmd.args(["run", v.as_str(), "--seed", "7", "--jobs", jobs, "--data"])
                .arg(&data)
                .arg("--out")
                .arg(&out);
            for s in sets {
                cmd.args(["--set", s]);
            }
            let o = cmd.output().expect("spawn");
            if !o.status.success() {
                bad.push(format!("{v} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
                break;
            }
            hashes.push(hash_outputs(&out));
        }
        if hashes.len() == 2 {
            files += hashes[0].len();
            if hashes[0] != hashes[1] || hashes[0].is_empty() {
                bad.push(format!("{v} differs between --jobs 1 and --jobs 4"));
            }
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("11 variants, {files} result files hash-identical across --jobs 1 and 4")
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Option<Outcome> {
    let path = std::env::var_os("TOUCHPIT_REAL_DATA")?;
    let cat = touchpit::dataset::builtin_catalog();
    let d = match touchpit::dataset::ingest(Path::new(&path), &cat) {
        Ok(d) => d,
        Err(e) => return Some(outcome(false, format!("ingest failed: {e}"))),
    };
    let spec = ExperimentSpec::new(Variant::Baseline, ProtocolConfig::default());
    Some(match experiments::run(&spec, &d) {
        Ok(recs) => {
            let m = recs[0].rep_mean_eer();
            outcome((m - 0.084).abs() <= 0.015, format!("baseline mean EER {:.2}% (target 8.4 +/- 1.5)", m * 100.0))
        }
        Err(e) => outcome(false, e.to_string()),
    })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric oracle equivalence", criterion_1),
        ("classifier correctness", criterion_2),
        ("P3 split ordering", criterion_3),
        ("P4 attacker inclusion", criterion_4),
        ("P5 aggregation monotonicity", criterion_5),
        ("P2 device effects", criterion_6),
        ("P1 sample-size spread", criterion_7),
        ("partial-window acceptance", criterion_8),
        ("determinism across --jobs", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = format!("C{}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|x| x.eq_ignore_ascii_case(&id)) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        total += t.elapsed();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    match criterion_10() {
        Some(o) => {
            println!("C10 {} real-data baseline (informational): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        }
        None => println!("C10 SKIP real-data baseline: set TOUCHPIT_REAL_DATA to an ingested dataset CSV"),
    }
    println!("acceptance: {failed} failed, {:.0}s", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
