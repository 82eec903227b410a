//! Training-data selection, attacker modelling, training-set assembly and
//! score aggregation for per-user verification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{self, ClassifierKind, ClassifyError, Hyperparameters, TrainSet};
use crate::dataset::Dataset;
use crate::features::{self, FeatureError, FEATURE_COUNT};
use crate::metrics::{self, Eer, EerSummary, MetricsError};
use crate::preprocess::{self, Direction};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("needs at least 2 sessions, has {0}")]
    TooFewSessions(usize),
    #[error("needs at least 2 strokes, has {0}")]
    TooFewStrokes(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("user {user}: {source}")]
    Split { user: String, source: SplitError },
    #[error("needs at least {needed} users, got {available}")]
    TooFewUsers { needed: usize, available: usize },
    #[error("user {user}: negative pool offers {available} strokes, {needed} needed")]
    InsufficientNegativePool { user: String, needed: usize, available: usize },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("invalid protocol config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Random,
    Contiguous,
    DedicatedContig,
    DedicatedRandom,
    IntraSession,
}

impl SplitStrategy {
    pub const ALL: [SplitStrategy; 5] = [
        Self::Random,
        Self::Contiguous,
        Self::DedicatedContig,
        Self::DedicatedRandom,
        Self::IntraSession,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Contiguous => "contiguous",
            Self::DedicatedContig => "dedicated_contig",
            Self::DedicatedRandom => "dedicated_random",
            Self::IntraSession => "intra_session",
        }
    }

    pub fn needs_two_sessions(self) -> bool {
        matches!(self, Self::DedicatedContig | Self::DedicatedRandom)
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown split strategy '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerMode {
    Exclude,
    Include,
}

impl AttackerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exclude => "exclude",
            Self::Include => "include",
        }
    }
}

impl fmt::Display for AttackerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "exclude" => Ok(Self::Exclude),
            "include" => Ok(Self::Include),
            _ => Err(format!("unknown attacker mode '{s}' (exclude, include)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub split: SplitStrategy,
    pub attacker_mode: AttackerMode,
    pub f_train: f64,
    pub window: usize,
    pub direction: Direction,
    pub classifier: ClassifierKind,
    pub hp: Hyperparameters,
    /// Users with fewer in-scope strokes are left out of an experiment.
    pub min_strokes: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            split: SplitStrategy::Contiguous,
            attacker_mode: AttackerMode::Exclude,
            f_train: 0.8,
            window: 1,
            direction: Direction::Left,
            classifier: ClassifierKind::SvmRbf,
            hp: Hyperparameters::default(),
            min_strokes: 10,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.f_train > 0.0 && self.f_train < 1.0) {
            return Err(ProtocolError::InvalidConfig(format!("f_train {} outside (0, 1)", self.f_train)));
        }
        if self.window == 0 {
            return Err(ProtocolError::InvalidConfig("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-user feature rows for one swipe direction, in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFeatures {
    pub user_id: String,
    pub device: String,
    pub x: Array2<f64>,
    /// Session ordinal of each row.
    pub session: Vec<usize>,
}

impl UserFeatures {
    pub fn len(&self) -> usize {
        self.session.len()
    }

    pub fn is_empty(&self) -> bool {
        self.session.is_empty()
    }

    pub fn session_count(&self) -> usize {
        let mut s = self.session.clone();
        s.dedup();
        s.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub direction: Direction,
    pub users: BTreeMap<String, UserFeatures>,
}

impl FeatureStore {
    /// Segments, filters and extracts every user's strokes, keeping those
    /// going in `direction`. Users left without strokes are omitted.
    pub fn build(dataset: &Dataset, direction: Direction) -> Self {
        let users = dataset
            .users
            .par_iter()
            .filter_map(|(uid, sessions)| {
                let strokes = preprocess::user_strokes(dataset, uid);
                let feats = features::extract_sequence(&strokes);
                let rows: Vec<_> = feats
                    .into_iter()
                    .filter(|(i, _)| strokes[*i].direction == direction)
                    .collect();
                if rows.is_empty() {
                    return None;
                }
                let vecs: Vec<_> = rows.iter().map(|(_, f)| *f).collect();
                let session = rows.iter().map(|(i, _)| strokes[*i].session_ordinal).collect();
                let device = sessions.first().map(|s| s.device.model_name.clone()).unwrap_or_default();
                Some((
                    uid.clone(),
                    UserFeatures {
                        user_id: uid.clone(),
                        device,
                        x: features::to_matrix(&vecs),
                        session,
                    },
                ))
            })
            .collect();
        Self { direction, users }
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.users.keys().cloned().collect()
    }

    /// Users with at least `min_strokes` rows.
    pub fn eligible(&self, min_strokes: usize) -> Vec<String> {
        self.users
            .values()
            .filter(|u| u.len() >= min_strokes.max(2))
            .map(|u| u.user_id.clone())
            .collect()
    }

    /// Keeps only the listed users.
    pub fn restrict(&self, ids: &[String]) -> Self {
        Self {
            direction: self.direction,
            users: ids
                .iter()
                .filter_map(|id| self.users.get(id).map(|u| (id.clone(), u.clone())))
                .collect(),
        }
    }

    /// Keeps rows whose session ordinal satisfies `keep`; users left empty
    /// are dropped.
    pub fn filter_sessions(&self, keep: impl Fn(usize) -> bool) -> Self {
        let users = self
            .users
            .iter()
            .filter_map(|(id, u)| {
                let rows: Vec<usize> = (0..u.len()).filter(|&i| keep(u.session[i])).collect();
                if rows.is_empty() {
                    return None;
                }
                Some((
                    id.clone(),
                    UserFeatures {
                        user_id: u.user_id.clone(),
                        device: u.device.clone(),
                        x: u.x.select(Axis(0), &rows),
                        session: rows.iter().map(|&i| u.session[i]).collect(),
                    },
                ))
            })
            .collect();
        Self {
            direction: self.direction,
            users,
        }
    }
}

/// Row indices of one user's strokes used for training and for testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_count(n: usize, f_train: f64) -> usize {
    ((n as f64 * f_train + 1e-9).floor() as usize).clamp(1, n - 1)
}

/// Splits a chronologically ordered stroke sequence, given the session
/// ordinal of every stroke.
pub fn split<R: Rng + ?Sized>(
    sessions: &[usize],
    strategy: SplitStrategy,
    f_train: f64,
    rng: &mut R,
) -> Result<Split, SplitError> {
    let n = sessions.len();
    if n < 2 {
        return Err(SplitError::TooFewStrokes(n));
    }
    let mut ordinals = sessions.to_vec();
    ordinals.sort_unstable();
    ordinals.dedup();
    match strategy {
        SplitStrategy::Contiguous => {
            let k = train_count(n, f_train);
            Ok(Split {
                train: (0..k).collect(),
                test: (k..n).collect(),
            })
        }
        SplitStrategy::Random => {
            let k = train_count(n, f_train);
            let mut train = index::sample(rng, n, k).into_vec();
            train.sort_unstable();
            let test = complement(n, &train);
            Ok(Split { train, test })
        }
        SplitStrategy::DedicatedContig | SplitStrategy::DedicatedRandom => {
            if ordinals.len() < 2 {
                return Err(SplitError::TooFewSessions(ordinals.len()));
            }
            let mut order = ordinals.clone();
            if strategy == SplitStrategy::DedicatedRandom {
                order.shuffle(rng);
            }
            let target = n as f64 * f_train;
            let mut chosen = Vec::new();
            let mut count = 0;
            // at least one session always stays for testing
            for &s in &order[..order.len() - 1] {
                chosen.push(s);
                count += sessions.iter().filter(|&&x| x == s).count();
                if count as f64 >= target - 1e-9 {
                    break;
                }
            }
            let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| chosen.contains(&sessions[i]));
            Ok(Split { train, test })
        }
        SplitStrategy::IntraSession => {
            // longest session, earliest on ties
            let mut best = (0, ordinals[0]);
            for &s in &ordinals {
                let c = sessions.iter().filter(|&&x| x == s).count();
                if c > best.0 {
                    best = (c, s);
                }
            }
            let rows: Vec<usize> = (0..n).filter(|&i| sessions[i] == best.1).collect();
            if rows.len() < 2 {
                return Err(SplitError::TooFewStrokes(rows.len()));
            }
            let half = rows.len() / 2;
            Ok(Split {
                train: rows[..half].to_vec(),
                test: rows[half..].to_vec(),
            })
        }
    }
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut j = 0;
    for i in 0..n {
        if j < sorted.len() && sorted[j] == i {
            j += 1;
        } else {
            out.push(i);
        }
    }
    out
}

/// Who supplies a target's negative training examples and who attacks it
/// at test time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerPlan {
    pub pool: Vec<String>,
    pub attackers: Vec<String>,
}

/// Plans for every user in `users`. With `Exclude` the other users are
/// divided per target into a negative pool and a disjoint attacker set
/// (the pool takes the odd one out). With `Include` the population is
/// halved once and each target's co-half members play both roles.
pub fn plan_attackers<R: Rng + ?Sized>(
    users: &[String],
    mode: AttackerMode,
    rng: &mut R,
) -> Result<BTreeMap<String, AttackerPlan>, ProtocolError> {
    let needed = match mode {
        AttackerMode::Exclude => 3,
        AttackerMode::Include => 4,
    };
    if users.len() < needed {
        return Err(ProtocolError::TooFewUsers {
            needed,
            available: users.len(),
        });
    }
    let mut sorted = users.to_vec();
    sorted.sort();
    let mut plans = BTreeMap::new();
    match mode {
        AttackerMode::Exclude => {
            for target in &sorted {
                let mut others: Vec<String> = sorted.iter().filter(|u| *u != target).cloned().collect();
                others.shuffle(rng);
                let k = others.len().div_ceil(2);
                let attackers = others.split_off(k);
                plans.insert(target.clone(), AttackerPlan { pool: others, attackers });
            }
        }
        AttackerMode::Include => {
            let mut all = sorted.clone();
            all.shuffle(rng);
            let k = all.len().div_ceil(2);
            let halves = [all[..k].to_vec(), all[k..].to_vec()];
            for half in &halves {
                for target in half {
                    let co: Vec<String> = half.iter().filter(|u| *u != target).cloned().collect();
                    plans.insert(
                        target.clone(),
                        AttackerPlan {
                            pool: co.clone(),
                            attackers: co,
                        },
                    );
                }
            }
        }
    }
    Ok(plans)
}

/// Chooses how many negatives each pool member gives and which of its
/// available rows. `available[j]` lists member `j`'s usable rows. Each
/// member owes `n_pos / pool` rows, the remainder going one each to random
/// distinct members; a member short of rows has its deficit moved to
/// members with spare rows.
pub fn draw_negatives<R: Rng + ?Sized>(
    n_pos: usize,
    available: &[&[usize]],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, (usize, usize)> {
    let k = available.len();
    let total: usize = available.iter().map(|a| a.len()).sum();
    if k == 0 || total < n_pos {
        return Err((n_pos, total));
    }
    let mut quota = vec![n_pos / k; k];
    for j in index::sample(rng, k, n_pos % k) {
        quota[j] += 1;
    }
    let mut deficit = 0;
    for (q, a) in quota.iter_mut().zip(available) {
        if *q > a.len() {
            deficit += *q - a.len();
            *q = a.len();
        }
    }
    if deficit > 0 {
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        while deficit > 0 {
            for &j in &order {
                if deficit > 0 && quota[j] < available[j].len() {
                    quota[j] += 1;
                    deficit -= 1;
                }
            }
        }
    }
    Ok(available
        .iter()
        .zip(&quota)
        .map(|(a, &q)| {
            let mut pick: Vec<usize> = index::sample(rng, a.len(), q).into_iter().map(|i| a[i]).collect();
            pick.sort_unstable();
            pick
        })
        .collect())
}

/// Means of consecutive non-overlapping windows of `w` scores; a trailing
/// partial window is dropped.
pub fn aggregate(scores: &[f64], w: usize) -> Vec<f64> {
    assert!(w >= 1, "window must be at least 1");
    scores
        .chunks_exact(w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScores {
    pub user_id: String,
    pub scores: Vec<f64>,
}

/// Raw per-stroke scores for one target, in stroke order per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user_id: String,
    pub device: String,
    pub genuine: Vec<f64>,
    pub impostors: Vec<SourceScores>,
    /// Scores of the model's own training rows.
    pub train_genuine: Vec<f64>,
    pub train_impostors: Vec<SourceScores>,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl UserEval {
    /// Genuine and impostor window scores, each source aggregated on its
    /// own.
    pub fn windowed(&self, w: usize) -> (Vec<f64>, Vec<f64>) {
        let g = aggregate(&self.genuine, w);
        let i = self.impostors.iter().flat_map(|s| aggregate(&s.scores, w)).collect();
        (g, i)
    }

    pub fn eer(&self, w: usize) -> Result<Eer, MetricsError> {
        let (g, i) = self.windowed(w);
        metrics::eer(&g, &i)
    }

    pub fn train_windowed(&self, w: usize) -> (Vec<f64>, Vec<f64>) {
        let g = aggregate(&self.train_genuine, w);
        let i = self.train_impostors.iter().flat_map(|s| aggregate(&s.scores, w)).collect();
        (g, i)
    }
}

/// Mean/std summary of per-user EERs at window `w`.
pub fn summarize(evals: &[UserEval], w: usize) -> Result<EerSummary, MetricsError> {
    let per_user = evals.iter().map(|e| e.eer(w).map(|r| r.eer)).collect::<Result<Vec<_>, _>>()?;
    Ok(EerSummary::from_per_user(per_user))
}

const PURPOSE_SPLIT: u64 = 11;
const PURPOSE_PLAN: u64 = 12;
const PURPOSE_NEGATIVES: u64 = 13;
const PURPOSE_TRAIN: u64 = 14;

/// Everything a run fixes before any model is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub splits: BTreeMap<String, Split>,
    pub plans: BTreeMap<String, AttackerPlan>,
}

pub fn prepare(store: &FeatureStore, users: &[String], cfg: &ProtocolConfig) -> Result<RunPlan, ProtocolError> {
    cfg.validate()?;
    let mut splits = BTreeMap::new();
    for u in users {
        let f = store.users.get(u).ok_or_else(|| ProtocolError::UnknownUser(u.clone()))?;
        let mut r = rng::keyed(cfg.seed, u, PURPOSE_SPLIT);
        let s = split(&f.session, cfg.split, cfg.f_train, &mut r).map_err(|source| ProtocolError::Split {
            user: u.clone(),
            source,
        })?;
        splits.insert(u.clone(), s);
    }
    let plans = plan_attackers(users, cfg.attacker_mode, &mut rng::stream(cfg.seed, PURPOSE_PLAN))?;
    Ok(RunPlan { splits, plans })
}

/// Trains and scores one target under a prepared plan.
pub fn evaluate_user(
    target: &str,
    store: &FeatureStore,
    run: &RunPlan,
    cfg: &ProtocolConfig,
) -> Result<UserEval, ProtocolError> {
    let me = store.users.get(target).ok_or_else(|| ProtocolError::UnknownUser(target.into()))?;
    let plan = &run.plans[target];
    debug_assert!(!plan.attackers.iter().any(|a| a == target));
    let my_split = &run.splits[target];
    let pos = me.x.select(Axis(0), &my_split.train);

    let pool: Vec<&UserFeatures> = plan.pool.iter().map(|u| &store.users[u]).collect();
    let avail: Vec<&[usize]> = plan.pool.iter().map(|u| run.splits[u].train.as_slice()).collect();
    let mut r = rng::keyed(cfg.seed, target, PURPOSE_NEGATIVES);
    let picks = draw_negatives(pos.nrows(), &avail, &mut r).map_err(|(needed, available)| {
        ProtocolError::InsufficientNegativePool {
            user: target.into(),
            needed,
            available,
        }
    })?;
    let neg_blocks: Vec<Array2<f64>> = pool.iter().zip(&picks).map(|(u, rows)| u.x.select(Axis(0), rows)).collect();
    let n_neg: usize = neg_blocks.iter().map(|b| b.nrows()).sum();

    let mut x = Array2::zeros((pos.nrows() + n_neg, FEATURE_COUNT));
    x.slice_mut(ndarray::s![..pos.nrows(), ..]).assign(&pos);
    let mut at = pos.nrows();
    for b in &neg_blocks {
        x.slice_mut(ndarray::s![at..at + b.nrows(), ..]).assign(b);
        at += b.nrows();
    }
    let mut y = vec![1.0; pos.nrows()];
    y.extend(std::iter::repeat_n(-1.0, n_neg));

    let scaler = features::fit_scaler(x.view())?;
    let xs = features::apply_scaler(&scaler, x.view())?;
    let ts = TrainSet::new(xs, y)?;
    let mut tr = rng::keyed(cfg.seed, target, PURPOSE_TRAIN);
    let model = classify::train(cfg.classifier, &ts, &cfg.hp, &mut tr)?;
    let score_rows = |u: &UserFeatures, rows: &[usize]| -> Result<Vec<f64>, ProtocolError> {
        let m = features::apply_scaler(&scaler, u.x.select(Axis(0), rows).view())?;
        Ok(classify::score(&model, m.view())?)
    };

    let genuine = score_rows(me, &my_split.test)?;
    let impostors = plan
        .attackers
        .iter()
        .map(|a| {
            let u = &store.users[a];
            Ok(SourceScores {
                user_id: a.clone(),
                scores: score_rows(u, &run.splits[a].test)?,
            })
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let train_scores = classify::score(&model, ts.x.view())?;
    let train_genuine = train_scores[..pos.nrows()].to_vec();
    let mut train_impostors = Vec::with_capacity(pool.len());
    let mut at = pos.nrows();
    for (u, b) in pool.iter().zip(&neg_blocks) {
        train_impostors.push(SourceScores {
            user_id: u.user_id.clone(),
            scores: train_scores[at..at + b.nrows()].to_vec(),
        });
        at += b.nrows();
    }
    Ok(UserEval {
        user_id: target.into(),
        device: me.device.clone(),
        genuine,
        impostors,
        train_genuine,
        train_impostors,
        n_positive: pos.nrows(),
        n_negative: n_neg,
    })
}

/// Evaluates every user in `users` (in parallel on the current rayon pool).
/// Results come back sorted by user id.
pub fn evaluate(store: &FeatureStore, users: &[String], cfg: &ProtocolConfig) -> Result<Vec<UserEval>, ProtocolError> {
    let run = prepare(store, users, cfg)?;
    let targets: Vec<&String> = run.plans.keys().collect();
    targets
        .par_iter()
        .map(|t| evaluate_user(t, store, &run, cfg))
        .collect()
}
