//! Named, seeded experiment variants producing result records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::classify::{self, ClassifierKind};
use crate::dataset::Dataset;
use crate::features;
use crate::metrics::{self, EerSummary, MeanRoc, MetricsError};
use crate::protocol::{self, AttackerMode, FeatureStore, ProtocolConfig, ProtocolError, SplitError, SplitStrategy, UserEval};
use crate::rng;

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("precondition failed for {variant}: {reason}")]
    VariantPreconditionFailed { variant: Variant, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "p1")]
    P1SampleSize,
    #[serde(rename = "p1-sessions")]
    P1Sessions,
    #[serde(rename = "p2")]
    P2DeviceMixing,
    #[serde(rename = "p2-identify")]
    P2DeviceIdentify,
    #[serde(rename = "p3")]
    P3Splits,
    #[serde(rename = "p4")]
    P4Attacker,
    #[serde(rename = "p5")]
    P5Aggregation,
    #[serde(rename = "cumulative")]
    Cumulative,
    #[serde(rename = "threshold-transfer")]
    ThresholdTransfer,
    #[serde(rename = "partial-window")]
    PartialWindow,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Self::Baseline,
        Self::P1SampleSize,
        Self::P1Sessions,
        Self::P2DeviceMixing,
        Self::P2DeviceIdentify,
        Self::P3Splits,
        Self::P4Attacker,
        Self::P5Aggregation,
        Self::Cumulative,
        Self::ThresholdTransfer,
        Self::PartialWindow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::P1SampleSize => "p1",
            Self::P1Sessions => "p1-sessions",
            Self::P2DeviceMixing => "p2",
            Self::P2DeviceIdentify => "p2-identify",
            Self::P3Splits => "p3",
            Self::P4Attacker => "p4",
            Self::P5Aggregation => "p5",
            Self::Cumulative => "cumulative",
            Self::ThresholdTransfer => "threshold-transfer",
            Self::PartialWindow => "partial-window",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|v| v.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
            format!("unknown variant '{s}' (one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub variant: Variant,
    pub protocol: ProtocolConfig,
    pub reps: usize,
    /// User sample sizes (P1, P4).
    pub n_grid: Vec<usize>,
    /// Aggregation windows (P5).
    pub w_grid: Vec<usize>,
    /// Session counts (P1 sessions); empty derives `1..=full/2`.
    pub s_grid: Vec<usize>,
    /// Sample size whose statistics are extrapolated (P1).
    pub reference_n: usize,
    /// Session count a user needs for the session analyses; `None` uses
    /// the largest count present.
    pub full_sessions: Option<usize>,
    /// Users per arm (cumulative).
    pub cumulative_n: usize,
    /// Training samples per class (device identification).
    pub identify_cap: usize,
    /// Test users per device (device identification).
    pub identify_test_fraction: f64,
    /// Window size (partial window).
    pub partial_window: usize,
    /// Classifiers compared by the cumulative variant.
    pub classifiers: Vec<ClassifierKind>,
}

impl ExperimentSpec {
    pub fn new(variant: Variant, protocol: ProtocolConfig) -> Self {
        let reps = match variant {
            Variant::P1SampleSize => 50,
            Variant::P2DeviceMixing | Variant::P4Attacker | Variant::P5Aggregation | Variant::Cumulative => 10,
            _ => 1,
        };
        let n_grid = match variant {
            Variant::P4Attacker => vec![11, 21, 41, 81],
            _ => vec![10, 20, 40, 80],
        };
        let classifiers = vec![protocol.classifier];
        Self {
            variant,
            protocol,
            reps,
            n_grid,
            w_grid: (1..=20).collect(),
            s_grid: Vec::new(),
            reference_n: 40,
            full_sessions: None,
            cumulative_n: 40,
            identify_cap: 300,
            identify_test_fraction: 0.2,
            partial_window: 10,
            classifiers,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.protocol.validate()?;
        let bad = |m: &str| Err(ExperimentError::InvalidSpec(m.into()));
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.n_grid.is_empty() || self.w_grid.is_empty() {
            return bad("grids must be non-empty");
        }
        if self.w_grid.contains(&0) || self.partial_window == 0 {
            return bad("windows must be at least 1");
        }
        if !(self.identify_test_fraction > 0.0 && self.identify_test_fraction < 1.0) {
            return bad("identify_test_fraction must be in (0, 1)");
        }
        if self.classifiers.is_empty() {
            return bad("at least one classifier is required");
        }
        Ok(())
    }
}

/// Per-repetition statistics of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepStat {
    #[serde(with = "metrics::nullable")]
    pub mean_eer: f64,
    #[serde(with = "metrics::nullable")]
    pub std: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub variant: Variant,
    pub group: String,
    pub params: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<EerSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub reps: Vec<RepStat>,
    #[serde(skip_serializing_if = "Value::is_null", default)]
    pub payload: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<MeanRoc>,
    pub seed: u64,
}

impl ResultRecord {
    fn new(variant: Variant, group: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            variant,
            group: group.into(),
            params: BTreeMap::new(),
            summary: None,
            reps: Vec::new(),
            payload: Value::Null,
            roc: None,
            seed,
        }
    }

    fn param(mut self, k: &str, v: impl Into<Value>) -> Self {
        self.params.insert(k.into(), v.into());
        self
    }

    /// Mean over repetitions of the per-rep mean EER.
    pub fn rep_mean_eer(&self) -> f64 {
        metrics::mean(&self.reps.iter().map(|r| r.mean_eer).collect::<Vec<_>>())
    }

    /// Mean over repetitions of the per-rep spread of per-user EERs.
    pub fn rep_mean_std(&self) -> f64 {
        metrics::mean(&self.reps.iter().map(|r| r.std).collect::<Vec<_>>())
    }
}

/// Per-user EERs at window `w`; users without a genuine or impostor window
/// are left out.
pub fn per_user_eers(evals: &[UserEval], w: usize) -> Vec<f64> {
    evals
        .iter()
        .filter_map(|e| {
            let (g, i) = e.windowed(w);
            metrics::eer(&g, &i).ok().map(|r| r.eer)
        })
        .collect()
}

fn rep_stat(eers: &[f64]) -> RepStat {
    RepStat {
        mean_eer: metrics::mean(eers),
        std: metrics::sample_std(eers),
        n_users: eers.len(),
    }
}

fn roc_of(evals: &[&UserEval], w: usize) -> Option<MeanRoc> {
    let grid = metrics::default_fpr_grid();
    let curves: Vec<_> = evals
        .iter()
        .filter_map(|e| {
            let (g, i) = e.windowed(w);
            metrics::roc(&g, &i, &grid).ok()
        })
        .collect();
    (!curves.is_empty()).then(|| metrics::mean_roc(&curves))
}

/// Record over several repetitions of the same evaluation.
fn eer_record(variant: Variant, group: &str, seed: u64, runs: &[Vec<UserEval>], w: usize, with_roc: bool) -> ResultRecord {
    let mut pooled = Vec::new();
    let mut reps = Vec::new();
    for ev in runs {
        let e = per_user_eers(ev, w);
        reps.push(rep_stat(&e));
        pooled.extend(e);
    }
    let mut r = ResultRecord::new(variant, group, seed);
    r.summary = Some(EerSummary::from_per_user(pooled));
    r.reps = reps;
    if with_roc {
        let all: Vec<&UserEval> = runs.iter().flatten().collect();
        r.roc = roc_of(&all, w);
    }
    r
}

fn rep_seed(spec: &ExperimentSpec, rep: usize) -> u64 {
    rng::child_seed(spec.protocol.seed, rep as u64)
}

fn rep_config(spec: &ExperimentSpec, rep: usize) -> ProtocolConfig {
    ProtocolConfig {
        seed: rep_seed(spec, rep),
        ..spec.protocol.clone()
    }
}

const PURPOSE_SUBSAMPLE: u64 = 101;
const PURPOSE_IDENTIFY: u64 = 102;

fn subsample<R: Rng + ?Sized>(users: &[String], n: usize, rng: &mut R) -> Vec<String> {
    let mut idx = index::sample(rng, users.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| users[i].clone()).collect()
}

fn precondition(variant: Variant, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::VariantPreconditionFailed {
        variant,
        reason: reason.into(),
    }
}

fn need_users(variant: Variant, have: usize, need: usize, what: &str) -> Result<(), ExperimentError> {
    if have < need {
        return Err(precondition(
            variant,
            format!("{what}: needs {need} users with enough strokes, dataset has {have}"),
        ));
    }
    Ok(())
}

fn min_users(mode: AttackerMode) -> usize {
    match mode {
        AttackerMode::Exclude => 3,
        AttackerMode::Include => 4,
    }
}

/// Runs an experiment on a dataset. Records come out in a fixed order and
/// do not depend on the size of the rayon pool.
pub fn run(spec: &ExperimentSpec, data: &Dataset) -> Result<Vec<ResultRecord>, ExperimentError> {
    spec.validate()?;
    let store = FeatureStore::build(data, spec.protocol.direction);
    run_on_store(spec, &store)
}

pub fn run_on_store(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    spec.validate()?;
    match spec.variant {
        Variant::Baseline => baseline(spec, store),
        Variant::P1SampleSize => p1_sample_size(spec, store),
        Variant::P1Sessions => p1_sessions(spec, store),
        Variant::P2DeviceMixing => p2_mixing(spec, store),
        Variant::P2DeviceIdentify => p2_identify(spec, store),
        Variant::P3Splits => p3_splits(spec, store),
        Variant::P4Attacker => p4_attacker(spec, store),
        Variant::P5Aggregation => p5_aggregation(spec, store),
        Variant::Cumulative => cumulative(spec, store),
        Variant::ThresholdTransfer => threshold_transfer(spec, store),
        Variant::PartialWindow => partial_window(spec, store),
    }
}

fn eval_reps(
    spec: &ExperimentSpec,
    store: &FeatureStore,
    users: &[String],
    cfg_for: impl Fn(usize) -> ProtocolConfig + Sync,
) -> Result<Vec<Vec<UserEval>>, ExperimentError> {
    (0..spec.reps)
        .into_par_iter()
        .map(|rep| Ok(protocol::evaluate(store, users, &cfg_for(rep))?))
        .collect()
}

fn baseline(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    need_users(spec.variant, users.len(), min_users(spec.protocol.attacker_mode), "baseline")?;
    let runs = eval_reps(spec, store, &users, |rep| rep_config(spec, rep))?;
    let w = spec.protocol.window;
    Ok(vec![eer_record(spec.variant, "baseline", spec.protocol.seed, &runs, w, true).param("w", w)])
}

fn p1_sample_size(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    let max_n = *spec.n_grid.iter().max().expect("non-empty grid");
    need_users(spec.variant, users.len(), max_n.max(min_users(spec.protocol.attacker_mode)), "largest sample size")?;
    if !spec.n_grid.contains(&spec.reference_n) {
        return Err(ExperimentError::InvalidSpec(format!(
            "reference_n {} is not in the n grid",
            spec.reference_n
        )));
    }
    let w = spec.protocol.window;
    let mut records = Vec::new();
    for &n in &spec.n_grid {
        let runs: Vec<Vec<UserEval>> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let cfg = rep_config(spec, rep);
                let chosen = subsample(&users, n, &mut rng::stream(cfg.seed, PURPOSE_SUBSAMPLE + n as u64));
                Ok(protocol::evaluate(store, &chosen, &cfg)?)
            })
            .collect::<Result<_, ExperimentError>>()?;
        records.push(eer_record(spec.variant, "subsample", spec.protocol.seed, &runs, w, false).param("n", n));
    }
    let reference = records
        .iter()
        .find(|r| r.params["n"] == json!(spec.reference_n))
        .expect("reference in grid");
    let (mu_ref, sigma_ref) = (reference.rep_mean_eer(), reference.rep_mean_std());
    for r in &mut records {
        let (mu, sigma) = (r.rep_mean_eer(), r.rep_mean_std());
        let extrapolated = metrics::extrapolate_std(mu, mu_ref, sigma_ref).ok();
        r.payload = json!({
            "mean_eer": mu,
            "std": sigma,
            "reference_n": spec.reference_n,
            "std_extrapolated": extrapolated,
            "std_ratio": extrapolated.map(|e| sigma / e),
        });
    }
    Ok(records)
}

fn full_session_users(spec: &ExperimentSpec, store: &FeatureStore) -> (usize, Vec<String>) {
    let max_sessions = store.users.values().map(|u| u.session_count()).max().unwrap_or(0);
    let full = spec.full_sessions.unwrap_or(max_sessions);
    let users = store
        .users
        .values()
        .filter(|u| u.len() >= spec.protocol.min_strokes.max(2) && u.session_count() >= full)
        .map(|u| u.user_id.clone())
        .collect();
    (full, users)
}

fn p1_sessions(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let (full, users) = full_session_users(spec, store);
    need_users(
        spec.variant,
        users.len(),
        min_users(spec.protocol.attacker_mode),
        &format!("users with {full} sessions"),
    )?;
    let s_grid = if spec.s_grid.is_empty() {
        (1..=full / 2).collect()
    } else {
        spec.s_grid.clone()
    };
    if s_grid.is_empty() || s_grid.iter().any(|&s| s == 0 || s > full) {
        return Err(precondition(spec.variant, format!("session grid must lie in 1..={full}")));
    }
    let sub_store = store.filter_sessions(|s| s < full).restrict(&users);
    let w = spec.protocol.window;
    let seed = spec.protocol.seed;
    let mut records = Vec::new();
    let eval_on = |st: &FeatureStore| -> Result<Vec<Vec<UserEval>>, ExperimentError> {
        let ids: Vec<String> = users.iter().filter(|u| st.users.get(*u).is_some_and(|f| f.len() >= 2)).cloned().collect();
        need_users(spec.variant, ids.len(), min_users(spec.protocol.attacker_mode), "users with strokes in the subset")?;
        eval_reps(spec, st, &ids, |rep| rep_config(spec, rep))
    };
    for &s in &s_grid {
        let early = eval_on(&sub_store.filter_sessions(|o| o < s))?;
        let late = eval_on(&sub_store.filter_sessions(|o| o >= full - s))?;
        let e_rec = eer_record(spec.variant, "early", seed, &early, w, false).param("s", s);
        let l_rec = eer_record(spec.variant, "late", seed, &late, w, false).param("s", s);
        let a = &e_rec.summary.as_ref().expect("summary").per_user_eer;
        let b = &l_rec.summary.as_ref().expect("summary").per_user_eer;
        let p = metrics::welch_t(a, b).ok();
        let mut cmp = ResultRecord::new(spec.variant, "early_vs_late", seed).param("s", s);
        cmp.payload = json!({
            "early_mean_eer": metrics::mean(a),
            "late_mean_eer": metrics::mean(b),
            "difference": metrics::mean(a) - metrics::mean(b),
            "p_value": p,
        });
        records.extend([e_rec, l_rec, cmp]);
    }
    for k in 1..=full {
        let runs = eval_on(&sub_store.filter_sessions(|o| o < k))?;
        records.push(eer_record(spec.variant, "session_count", seed, &runs, w, false).param("sessions", k));
    }
    let all = store.eligible(spec.protocol.min_strokes);
    need_users(spec.variant, all.len(), min_users(spec.protocol.attacker_mode), "swipe scatter")?;
    let cfg = rep_config(spec, 0);
    let evals = protocol::evaluate(store, &all, &cfg)?;
    for e in &evals {
        let Ok(r) = e.eer(w) else { continue };
        let mut rec = ResultRecord::new(spec.variant, "swipes_scatter", seed).param("user", e.user_id.clone());
        rec.payload = json!({ "swipes": store.users[&e.user_id].len(), "eer": r.eer });
        records.push(rec);
    }
    Ok(records)
}

fn users_by_device(store: &FeatureStore, users: &[String]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for u in users {
        out.entry(store.users[u].device.clone()).or_default().push(u.clone());
    }
    out
}

fn p2_mixing(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    let need = min_users(spec.protocol.attacker_mode);
    let devices: BTreeMap<String, Vec<String>> = users_by_device(store, &users)
        .into_iter()
        .filter(|(_, u)| u.len() >= need)
        .collect();
    if devices.len() < 2 {
        return Err(precondition(
            spec.variant,
            format!("needs at least 2 phone models with {need} or more users each"),
        ));
    }
    let w = spec.protocol.window;
    let seed = spec.protocol.seed;
    let mut records = Vec::new();
    for (k, (device, ids)) in devices.iter().enumerate() {
        let n = ids.len();
        let pairs: Vec<(Vec<UserEval>, Vec<UserEval>)> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let cfg = rep_config(spec, rep);
                let own = protocol::evaluate(store, ids, &cfg)?;
                let mut r = rng::stream(cfg.seed, PURPOSE_SUBSAMPLE + k as u64);
                let mixed = subsample(&users, n, &mut r);
                let combined = protocol::evaluate(store, &mixed, &cfg)?;
                Ok((own, combined))
            })
            .collect::<Result<_, ExperimentError>>()?;
        let (own, combined): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut rec = eer_record(spec.variant, &format!("device:{device}"), seed, &own, w, false).param("n", n);
        let comb = eer_record(spec.variant, &format!("combined:{device}"), seed, &combined, w, false).param("n", n);
        let a = &rec.summary.as_ref().expect("summary").per_user_eer;
        let b = &comb.summary.as_ref().expect("summary").per_user_eer;
        rec.payload = json!({
            "device_mean_eer": rec.rep_mean_eer(),
            "combined_mean_eer": comb.rep_mean_eer(),
            "combined_rep_mean_eer": comb.reps.iter().map(|r| r.mean_eer).collect::<Vec<_>>(),
            "p_value": metrics::welch_t(a, b).ok(),
        });
        records.push(rec);
        records.push(comb);
    }
    Ok(records)
}

/// Device-identification result of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOutcome {
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub n_test: usize,
    pub confusion: Vec<Vec<u64>>,
}

/// Trains a phone-model classifier on some users' strokes and tests it on
/// strokes of other users.
pub fn identify_devices(
    store: &FeatureStore,
    users: &[String],
    test_fraction: f64,
    cap: usize,
    hp: &classify::SvmParams,
    seed: u64,
) -> Result<IdentifyOutcome, String> {
    let devices: BTreeMap<String, Vec<String>> = users_by_device(store, users)
        .into_iter()
        .filter(|(_, u)| u.len() >= 2)
        .collect();
    if devices.len() < 2 {
        return Err("needs at least 2 phone models with 2 or more users each".into());
    }
    let mut r = rng::stream(seed, PURPOSE_IDENTIFY);
    let mut train_rows: Vec<Vec<(String, usize)>> = Vec::new();
    let mut test_rows: Vec<Vec<(String, usize)>> = Vec::new();
    for ids in devices.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut r);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
        let rows = |set: &[String]| -> Vec<(String, usize)> {
            set.iter().flat_map(|u| (0..store.users[u].len()).map(move |i| (u.clone(), i))).collect()
        };
        test_rows.push(rows(&ids[..n_test]));
        train_rows.push(rows(&ids[n_test..]));
    }
    let per_train = train_rows.iter().map(Vec::len).min().unwrap_or(0).min(cap);
    let per_test = test_rows.iter().map(Vec::len).min().unwrap_or(0);
    if per_train == 0 || per_test == 0 {
        return Err("a phone model has no strokes on one side of the user split".into());
    }
    let mut draw = |lists: &[Vec<(String, usize)>], per: usize| -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((per * lists.len(), features::FEATURE_COUNT));
        let mut y = Vec::with_capacity(per * lists.len());
        let mut at = 0;
        for (c, list) in lists.iter().enumerate() {
            let mut pick = index::sample(&mut r, list.len(), per).into_vec();
            pick.sort_unstable();
            for i in pick {
                let (u, row) = &list[i];
                x.row_mut(at).assign(&store.users[u].x.row(*row));
                y.push(c);
                at += 1;
            }
        }
        (x, y)
    };
    let (xtr, ytr) = draw(&train_rows, per_train);
    let (xte, yte) = draw(&test_rows, per_test);
    let scaler = features::fit_scaler(xtr.view()).map_err(|e| e.to_string())?;
    let xtr = features::apply_scaler(&scaler, xtr.view()).map_err(|e| e.to_string())?;
    let xte = features::apply_scaler(&scaler, xte.view()).map_err(|e| e.to_string())?;
    let model = classify::train_multiclass(xtr.view(), &ytr, hp).map_err(|e| e.to_string())?;
    let pred = classify::predict_class(&model, xte.view()).map_err(|e| e.to_string())?;
    let k = devices.len();
    let correct = pred.iter().zip(&yte).filter(|(p, t)| p == t).count();
    Ok(IdentifyOutcome {
        classes: devices.keys().cloned().collect(),
        accuracy: correct as f64 / yte.len() as f64,
        n_test: yte.len(),
        confusion: classify::confusion_matrix(&yte, &pred, k),
    })
}

fn p2_identify(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    let outcomes: Vec<IdentifyOutcome> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            identify_devices(
                store,
                &users,
                spec.identify_test_fraction,
                spec.identify_cap,
                &spec.protocol.hp.svm,
                rep_seed(spec, rep),
            )
            .map_err(|e| precondition(spec.variant, e))
        })
        .collect::<Result<_, _>>()?;
    let k = outcomes[0].classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for o in &outcomes {
        for (row, orow) in confusion.iter_mut().zip(&o.confusion) {
            for (c, oc) in row.iter_mut().zip(orow) {
                *c += oc;
            }
        }
    }
    let accs: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let n_test: usize = outcomes.iter().map(|o| o.n_test).sum();
    let acc = metrics::mean(&accs);
    let chance = 1.0 / k as f64;
    let mut rec = ResultRecord::new(spec.variant, "identify", spec.protocol.seed).param("classes", k);
    rec.payload = json!({
        "classes": outcomes[0].classes,
        "accuracy": acc,
        "rep_accuracy": accs,
        "chance": chance,
        "n_test": n_test,
        "binomial_sigma": (chance * (1.0 - chance) / n_test as f64).sqrt(),
        "confusion": confusion,
    });
    Ok(vec![rec])
}

fn p3_splits(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users: Vec<String> = store
        .eligible(spec.protocol.min_strokes)
        .into_iter()
        .filter(|u| store.users[u].session_count() >= 2)
        .collect();
    let need = min_users(spec.protocol.attacker_mode);
    if users.len() < need {
        return Err(precondition(
            spec.variant,
            format!(
                "TooFewSessions: {} (needs {need} users with two or more sessions, dataset has {})",
                SplitError::TooFewSessions(1),
                users.len()
            ),
        ));
    }
    let w = spec.protocol.window;
    let order = [
        SplitStrategy::IntraSession,
        SplitStrategy::Random,
        SplitStrategy::Contiguous,
        SplitStrategy::DedicatedContig,
        SplitStrategy::DedicatedRandom,
    ];
    let mut records = Vec::new();
    for s in order {
        let runs = eval_reps(spec, store, &users, |rep| ProtocolConfig {
            split: s,
            ..rep_config(spec, rep)
        })?;
        records.push(eer_record(spec.variant, s.as_str(), spec.protocol.seed, &runs, w, true).param("split", s.as_str()));
    }
    Ok(records)
}

fn p4_attacker(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    let max_n = *spec.n_grid.iter().max().expect("non-empty grid");
    need_users(spec.variant, users.len(), max_n, "largest sample size")?;
    if spec.n_grid.iter().any(|&n| n < 4) {
        return Err(ExperimentError::InvalidSpec("attacker comparison needs n >= 4".into()));
    }
    let w = spec.protocol.window;
    let seed = spec.protocol.seed;
    let mut records = Vec::new();
    for &n in &spec.n_grid {
        let pairs: Vec<(Vec<UserEval>, Vec<UserEval>)> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let cfg = rep_config(spec, rep);
                let chosen = subsample(&users, n, &mut rng::stream(cfg.seed, PURPOSE_SUBSAMPLE + n as u64));
                let ex = protocol::evaluate(
                    store,
                    &chosen,
                    &ProtocolConfig {
                        attacker_mode: AttackerMode::Exclude,
                        ..cfg.clone()
                    },
                )?;
                let inc = protocol::evaluate(
                    store,
                    &chosen,
                    &ProtocolConfig {
                        attacker_mode: AttackerMode::Include,
                        ..cfg
                    },
                )?;
                Ok((ex, inc))
            })
            .collect::<Result<_, ExperimentError>>()?;
        let (ex, inc): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let ex_rec = eer_record(spec.variant, "exclude", seed, &ex, w, true).param("n", n);
        let inc_rec = eer_record(spec.variant, "include", seed, &inc, w, true).param("n", n);
        let diffs: Vec<f64> = inc_rec.reps.iter().zip(&ex_rec.reps).map(|(i, e)| i.mean_eer - e.mean_eer).collect();
        let mut d = ResultRecord::new(spec.variant, "difference", seed).param("n", n);
        d.payload = json!({
            "mean_difference": metrics::mean(&diffs),
            "rep_difference": diffs,
        });
        records.extend([ex_rec, inc_rec, d]);
    }
    Ok(records)
}

fn p5_aggregation(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    need_users(spec.variant, users.len(), min_users(spec.protocol.attacker_mode), "aggregation")?;
    let runs = eval_reps(spec, store, &users, |rep| rep_config(spec, rep))?;
    Ok(spec
        .w_grid
        .iter()
        .map(|&w| eer_record(spec.variant, "aggregation", spec.protocol.seed, &runs, w, true).param("w", w))
        .collect())
}

fn cumulative(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    let n_unreal = spec.cumulative_n.min(users.len());
    need_users(spec.variant, n_unreal, 4, "unrealistic arm")?;
    let multi: Vec<String> = users.iter().filter(|u| store.users[*u].session_count() >= 2).cloned().collect();
    let by_device = users_by_device(store, &multi);
    let (device, dev_users) = by_device
        .iter()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
        .ok_or_else(|| precondition(spec.variant, "no user has two or more sessions"))?;
    let n_real = spec.cumulative_n.min(dev_users.len());
    need_users(spec.variant, n_real, 3, "realistic arm (single phone model, two or more sessions)")?;
    let seed = spec.protocol.seed;
    let w = spec.protocol.window;
    let mut records = Vec::new();
    for &kind in &spec.classifiers {
        let pairs: Vec<(Vec<UserEval>, Vec<UserEval>)> = (0..spec.reps)
            .into_par_iter()
            .map(|rep| {
                let base = ProtocolConfig {
                    classifier: kind,
                    ..rep_config(spec, rep)
                };
                let mut r = rng::stream(base.seed, PURPOSE_SUBSAMPLE);
                let u_sel = subsample(&users, n_unreal, &mut r);
                let r_sel = subsample(dev_users, n_real, &mut r);
                let unreal = protocol::evaluate(
                    store,
                    &u_sel,
                    &ProtocolConfig {
                        attacker_mode: AttackerMode::Include,
                        split: SplitStrategy::Random,
                        ..base.clone()
                    },
                )?;
                let real = protocol::evaluate(
                    store,
                    &r_sel,
                    &ProtocolConfig {
                        attacker_mode: AttackerMode::Exclude,
                        split: SplitStrategy::DedicatedContig,
                        ..base
                    },
                )?;
                Ok((unreal, real))
            })
            .collect::<Result<_, ExperimentError>>()?;
        let (unreal, real): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let u_rec = eer_record(spec.variant, "unrealistic", seed, &unreal, w, true)
            .param("classifier", kind.as_str())
            .param("n", n_unreal);
        let r_rec = eer_record(spec.variant, "realistic", seed, &real, w, true)
            .param("classifier", kind.as_str())
            .param("n", n_real)
            .param("device", device.clone());
        let diffs: Vec<f64> = r_rec.reps.iter().zip(&u_rec.reps).map(|(r, u)| r.mean_eer - u.mean_eer).collect();
        let mut d = ResultRecord::new(spec.variant, "difference", seed).param("classifier", kind.as_str());
        d.payload = json!({
            "unrealistic_mean_eer": u_rec.rep_mean_eer(),
            "realistic_mean_eer": r_rec.rep_mean_eer(),
            "mean_difference": metrics::mean(&diffs),
            "rep_difference": diffs,
        });
        records.extend([u_rec, r_rec, d]);
    }
    Ok(records)
}

/// Operating point of one user when the threshold is chosen on training
/// scores and applied to test scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub half_total_error: f64,
    pub test_eer: f64,
}

pub fn transfer_threshold(e: &UserEval, w: usize) -> Result<TransferPoint, MetricsError> {
    let (tg, ti) = e.train_windowed(w);
    let t = metrics::eer(&tg, &ti)?.threshold;
    let (g, i) = e.windowed(w);
    let (far, frr) = metrics::far_frr_at(&g, &i, t)?;
    Ok(TransferPoint {
        threshold: t,
        far,
        frr,
        half_total_error: (far + frr) / 2.0,
        test_eer: metrics::eer(&g, &i)?.eer,
    })
}

fn threshold_transfer(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    need_users(spec.variant, users.len(), min_users(spec.protocol.attacker_mode), "threshold transfer")?;
    let w = spec.protocol.window;
    let runs = eval_reps(spec, store, &users, |rep| rep_config(spec, rep))?;
    let points: Vec<TransferPoint> = runs.iter().flatten().filter_map(|e| transfer_threshold(e, w).ok()).collect();
    let violations = points
        .iter()
        .filter(|p| p.far.max(p.frr) < p.test_eer - 1e-12)
        .count();
    let mut rec = ResultRecord::new(spec.variant, "transfer", spec.protocol.seed).param("w", w);
    rec.summary = Some(EerSummary::from_per_user(points.iter().map(|p| p.half_total_error).collect()));
    let pick = |f: fn(&TransferPoint) -> f64| points.iter().map(f).collect::<Vec<_>>();
    rec.payload = json!({
        "test_eer_mean": metrics::mean(&pick(|p| p.test_eer)),
        "test_eer_std": metrics::sample_std(&pick(|p| p.test_eer)),
        "half_total_error_mean": metrics::mean(&pick(|p| p.half_total_error)),
        "half_total_error_std": metrics::sample_std(&pick(|p| p.half_total_error)),
        "far_mean": metrics::mean(&pick(|p| p.far)),
        "frr_mean": metrics::mean(&pick(|p| p.frr)),
        "operating_point_below_eer": violations,
        "n_users": points.len(),
    });
    Ok(vec![rec])
}

/// Share of mixed windows accepted at `threshold`. Window `j` covers
/// positions `j*w..(j+1)*w` of both the genuine stream and one attacker's
/// stream; the attacker supplies the last `n_attack` positions. `None` when
/// no window can be built.
pub fn mixed_window_acceptance(e: &UserEval, w: usize, n_attack: usize, threshold: f64) -> Option<f64> {
    let split = w - n_attack;
    let mut accepted = 0usize;
    let mut total = 0usize;
    for a in &e.impostors {
        let m = e.genuine.len().min(a.scores.len()) / w;
        for j in 0..m {
            let at = j * w;
            let sum = e.genuine[at..at + split].iter().sum::<f64>() + a.scores[at + split..at + w].iter().sum::<f64>();
            total += 1;
            if sum / w as f64 >= threshold {
                accepted += 1;
            }
        }
    }
    (total > 0).then(|| accepted as f64 / total as f64)
}

fn partial_window(spec: &ExperimentSpec, store: &FeatureStore) -> Result<Vec<ResultRecord>, ExperimentError> {
    let users = store.eligible(spec.protocol.min_strokes);
    need_users(spec.variant, users.len(), min_users(spec.protocol.attacker_mode), "partial window")?;
    let w = spec.partial_window;
    let cfg_w1 = |rep| ProtocolConfig {
        window: 1,
        ..rep_config(spec, rep)
    };
    let runs = eval_reps(spec, store, &users, cfg_w1)?;
    // per rep, per n: mean acceptance over users
    let per_rep: Vec<Vec<Option<f64>>> = runs
        .par_iter()
        .map(|evals| {
            let thresholds: Vec<Option<f64>> = evals
                .iter()
                .map(|e| {
                    let (tg, ti) = e.train_windowed(w);
                    metrics::eer(&tg, &ti).ok().map(|r| r.threshold)
                })
                .collect();
            (0..=w)
                .map(|n| {
                    let vals: Vec<f64> = evals
                        .iter()
                        .zip(&thresholds)
                        .filter_map(|(e, t)| t.and_then(|t| mixed_window_acceptance(e, w, n, t)))
                        .collect();
                    (!vals.is_empty()).then(|| metrics::mean(&vals))
                })
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    for n in 0..=w {
        let vals: Vec<f64> = per_rep.iter().filter_map(|r| r[n]).collect();
        let mut rec = ResultRecord::new(spec.variant, "partial_window", spec.protocol.seed)
            .param("w", w)
            .param("malicious", n);
        rec.payload = json!({
            "acceptance": metrics::mean(&vals),
            "rep_acceptance": vals,
        });
        records.push(rec);
    }
    Ok(records)
}

/// Per-user EER summaries of the same protocol on two datasets, with a
/// Welch test between them.
pub fn compare_datasets(
    cfg: &ProtocolConfig,
    a: &Dataset,
    b: &Dataset,
) -> Result<Vec<ResultRecord>, ExperimentError> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut per_user = Vec::new();
    for (name, d) in [("a", a), ("b", b)] {
        let store = FeatureStore::build(d, cfg.direction);
        let users = store.eligible(cfg.min_strokes);
        need_users(Variant::Baseline, users.len(), min_users(cfg.attacker_mode), &format!("dataset {name}"))?;
        let evals = protocol::evaluate(&store, &users, cfg)?;
        let eers = per_user_eers(&evals, cfg.window);
        let mut r = ResultRecord::new(Variant::Baseline, format!("dataset:{name}"), cfg.seed);
        r.summary = Some(EerSummary::from_per_user(eers.clone()));
        per_user.push(eers);
        records.push(r);
    }
    let mut r = ResultRecord::new(Variant::Baseline, "comparison", cfg.seed);
    r.payload = json!({
        "difference": metrics::mean(&per_user[0]) - metrics::mean(&per_user[1]),
        "p_value": metrics::welch_t(&per_user[0], &per_user[1]).ok(),
    });
    records.push(r);
    Ok(records)
}

/// Summary CSV rows `(variant, group, parameter, metric, value)`.
pub fn summary_rows(r: &ResultRecord) -> Vec<[String; 5]> {
    let param = r
        .params
        .iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect::<Vec<_>>()
        .join(";");
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: String| {
        rows.push([r.variant.to_string(), r.group.clone(), param.clone(), metric.to_string(), value]);
    };
    if let Some(s) = &r.summary {
        push("mean_eer", s.mean_eer.to_string());
        push("std", s.std.to_string());
        push("ci95", s.ci95.to_string());
        push("n_users", s.n_users.to_string());
    }
    if let Value::Object(map) = &r.payload {
        for (k, v) in map {
            match v {
                Value::Number(n) => push(k, n.to_string()),
                Value::Null => push(k, String::new()),
                _ => {}
            }
        }
    }
    rows
}
