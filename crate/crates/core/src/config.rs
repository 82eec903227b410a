//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated; optional values accept `auto`. [`render`] writes every key, so
//! its output is a complete record of a run's settings.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::classify::ClassifierKind;
use crate::experiments::ExperimentSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

/// Every recognised key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "split",
    "attacker_mode",
    "f_train",
    "window",
    "direction",
    "classifier",
    "min_strokes",
    "svm.c",
    "svm.gamma",
    "svm.tol",
    "svm.max_iter",
    "rf.n_trees",
    "rf.max_features",
    "rf.max_depth",
    "rf.bootstrap",
    "mlp.hidden",
    "mlp.dropout",
    "mlp.learning_rate",
    "mlp.beta1",
    "mlp.beta2",
    "mlp.adam_epsilon",
    "mlp.epochs",
    "mlp.batch_size",
    "mlp.bn_momentum",
    "mlp.bn_epsilon",
    "knn.k",
    "reps",
    "n_grid",
    "w_grid",
    "s_grid",
    "reference_n",
    "full_sessions",
    "cumulative_n",
    "identify_cap",
    "identify_test_fraction",
    "partial_window",
    "classifiers",
];

/// Parses a config file into ordered `(key, value)` pairs.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        reason: e.to_string(),
    })
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if v.eq_ignore_ascii_case("auto") || v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        one(key, v).map(Some)
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| one(key, p.trim())).collect()
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

fn show_list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Sets one key on `spec`.
pub fn apply(spec: &mut ExperimentSpec, key: &str, v: &str) -> Result<(), ConfigError> {
    let p = &mut spec.protocol;
    match key {
        "seed" => p.seed = one(key, v)?,
        "split" => p.split = one(key, v)?,
        "attacker_mode" => p.attacker_mode = one(key, v)?,
        "f_train" => p.f_train = one(key, v)?,
        "window" => p.window = one(key, v)?,
        "direction" => p.direction = one(key, v)?,
        "classifier" => p.classifier = one(key, v)?,
        "min_strokes" => p.min_strokes = one(key, v)?,
        "svm.c" => p.hp.svm.c = one(key, v)?,
        "svm.gamma" => p.hp.svm.gamma = opt(key, v)?,
        "svm.tol" => p.hp.svm.tol = one(key, v)?,
        "svm.max_iter" => p.hp.svm.max_iter = one(key, v)?,
        "rf.n_trees" => p.hp.forest.n_trees = one(key, v)?,
        "rf.max_features" => p.hp.forest.max_features = opt(key, v)?,
        "rf.max_depth" => p.hp.forest.max_depth = opt(key, v)?,
        "rf.bootstrap" => p.hp.forest.bootstrap = one(key, v)?,
        "mlp.hidden" => p.hp.mlp.hidden = list(key, v)?,
        "mlp.dropout" => p.hp.mlp.dropout = one(key, v)?,
        "mlp.learning_rate" => p.hp.mlp.learning_rate = one(key, v)?,
        "mlp.beta1" => p.hp.mlp.beta1 = one(key, v)?,
        "mlp.beta2" => p.hp.mlp.beta2 = one(key, v)?,
        "mlp.adam_epsilon" => p.hp.mlp.adam_epsilon = one(key, v)?,
        "mlp.epochs" => p.hp.mlp.epochs = one(key, v)?,
        "mlp.batch_size" => p.hp.mlp.batch_size = one(key, v)?,
        "mlp.bn_momentum" => p.hp.mlp.bn_momentum = one(key, v)?,
        "mlp.bn_epsilon" => p.hp.mlp.bn_epsilon = one(key, v)?,
        "knn.k" => p.hp.knn.k = one(key, v)?,
        "reps" => spec.reps = one(key, v)?,
        "n_grid" => spec.n_grid = list(key, v)?,
        "w_grid" => spec.w_grid = list(key, v)?,
        "s_grid" => spec.s_grid = list(key, v)?,
        "reference_n" => spec.reference_n = one(key, v)?,
        "full_sessions" => spec.full_sessions = opt(key, v)?,
        "cumulative_n" => spec.cumulative_n = one(key, v)?,
        "identify_cap" => spec.identify_cap = one(key, v)?,
        "identify_test_fraction" => spec.identify_test_fraction = one(key, v)?,
        "partial_window" => spec.partial_window = one(key, v)?,
        "classifiers" => spec.classifiers = list::<ClassifierKind>(key, v)?,
        _ => return Err(ConfigError::UnknownKey(key.into())),
    }
    Ok(())
}

/// Applies every pair of a parsed file, in order.
pub fn apply_all(spec: &mut ExperimentSpec, pairs: &[(String, String)]) -> Result<(), ConfigError> {
    pairs.iter().try_for_each(|(k, v)| apply(spec, k, v))
}

fn value_of(spec: &ExperimentSpec, key: &str) -> String {
    let p = &spec.protocol;
    match key {
        "seed" => p.seed.to_string(),
        "split" => p.split.to_string(),
        "attacker_mode" => p.attacker_mode.to_string(),
        "f_train" => p.f_train.to_string(),
        "window" => p.window.to_string(),
        "direction" => p.direction.to_string(),
        "classifier" => p.classifier.to_string(),
        "min_strokes" => p.min_strokes.to_string(),
        "svm.c" => p.hp.svm.c.to_string(),
        "svm.gamma" => show_opt(&p.hp.svm.gamma),
        "svm.tol" => p.hp.svm.tol.to_string(),
        "svm.max_iter" => p.hp.svm.max_iter.to_string(),
        "rf.n_trees" => p.hp.forest.n_trees.to_string(),
        "rf.max_features" => show_opt(&p.hp.forest.max_features),
        "rf.max_depth" => show_opt(&p.hp.forest.max_depth),
        "rf.bootstrap" => p.hp.forest.bootstrap.to_string(),
        "mlp.hidden" => show_list(&p.hp.mlp.hidden),
        "mlp.dropout" => p.hp.mlp.dropout.to_string(),
        "mlp.learning_rate" => p.hp.mlp.learning_rate.to_string(),
        "mlp.beta1" => p.hp.mlp.beta1.to_string(),
        "mlp.beta2" => p.hp.mlp.beta2.to_string(),
        "mlp.adam_epsilon" => p.hp.mlp.adam_epsilon.to_string(),
        "mlp.epochs" => p.hp.mlp.epochs.to_string(),
        "mlp.batch_size" => p.hp.mlp.batch_size.to_string(),
        "mlp.bn_momentum" => p.hp.mlp.bn_momentum.to_string(),
        "mlp.bn_epsilon" => p.hp.mlp.bn_epsilon.to_string(),
        "knn.k" => p.hp.knn.k.to_string(),
        "reps" => spec.reps.to_string(),
        "n_grid" => show_list(&spec.n_grid),
        "w_grid" => show_list(&spec.w_grid),
        "s_grid" => show_list(&spec.s_grid),
        "reference_n" => spec.reference_n.to_string(),
        "full_sessions" => show_opt(&spec.full_sessions),
        "cumulative_n" => spec.cumulative_n.to_string(),
        "identify_cap" => spec.identify_cap.to_string(),
        "identify_test_fraction" => spec.identify_test_fraction.to_string(),
        "partial_window" => spec.partial_window.to_string(),
        "classifiers" => show_list(&spec.classifiers),
        _ => unreachable!("unlisted key {key}"),
    }
}

/// Writes every key of `spec`.
pub fn render(spec: &ExperimentSpec) -> String {
    let mut s = format!("# variant: {}\n", spec.variant);
    for k in KEYS {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&value_of(spec, k));
        s.push('\n');
    }
    s
}
