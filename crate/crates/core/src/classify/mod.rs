//! Per-user binary verifiers and a one-vs-rest multi-class wrapper.
//!
//! Every verifier returns a genuineness score where larger means more likely
//! genuine.

pub mod forest;
pub mod knn;
pub mod mlp;
pub mod svm;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{ForestModel, ForestParams};
pub use knn::{KnnModel, KnnParams};
pub use mlp::{MlpModel, MlpParams};
pub use svm::{SvmModel, SvmParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("training set needs at least one sample of each class")]
    SingleClassTraining,
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label count {labels} does not match row count {rows}")]
    LabelCount { rows: usize, labels: usize },
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error("model decode: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassifierKind {
    #[serde(rename = "svm")]
    SvmRbf,
    #[serde(rename = "rf")]
    RandomForest,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "knn")]
    Knn,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [Self::SvmRbf, Self::RandomForest, Self::Mlp, Self::Knn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SvmRbf => "svm",
            Self::RandomForest => "rf",
            Self::Mlp => "mlp",
            Self::Knn => "knn",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "svm" | "svm_rbf" => Ok(Self::SvmRbf),
            "rf" | "random_forest" => Ok(Self::RandomForest),
            "mlp" => Ok(Self::Mlp),
            "knn" => Ok(Self::Knn),
            other => Err(format!("unknown classifier '{other}' (svm, rf, mlp, knn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub svm: SvmParams,
    pub forest: ForestParams,
    pub mlp: MlpParams,
    pub knn: KnnParams,
}

/// Scaled feature rows with labels `+1` (genuine) and `-1` (impostor).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl TrainSet {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self, ClassifyError> {
        let ts = Self { x, y };
        ts.validate()?;
        Ok(ts)
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.y.len() - self.positives()
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.x.nrows() != self.y.len() {
            return Err(ClassifyError::LabelCount {
                rows: self.x.nrows(),
                labels: self.y.len(),
            });
        }
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(ClassifyError::SingleClassTraining);
        }
        check_finite(self.x.view())
    }

    fn genuine(&self) -> Vec<bool> {
        self.y.iter().map(|&v| v > 0.0).collect()
    }
}

fn check_finite(x: ArrayView2<f64>) -> Result<(), ClassifyError> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(ClassifyError::NonFiniteFeature { row, col });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Svm(SvmModel),
    Forest(ForestModel),
    Mlp(MlpModel),
    Knn(KnnModel),
}

impl Model {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Model::Svm(_) => ClassifierKind::SvmRbf,
            Model::Forest(_) => ClassifierKind::RandomForest,
            Model::Mlp(_) => ClassifierKind::Mlp,
            Model::Knn(_) => ClassifierKind::Knn,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Svm(m) => m.dim(),
            Model::Forest(m) => m.dim,
            Model::Mlp(m) => m.input_dim(),
            Model::Knn(m) => m.x.ncols(),
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Blob<'a> {
            format_version: u32,
            model: &'a Model,
        }
        serde_json::to_string(&Blob {
            format_version: MODEL_FORMAT_VERSION,
            model: self,
        })
        .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ClassifyError> {
        #[derive(Deserialize)]
        struct Blob {
            format_version: u32,
            model: Model,
        }
        let blob: Blob = serde_json::from_str(s).map_err(|e| ClassifyError::Decode(e.to_string()))?;
        if blob.format_version != MODEL_FORMAT_VERSION {
            return Err(ClassifyError::FormatVersion(blob.format_version));
        }
        Ok(blob.model)
    }
}

pub fn train<R: Rng + ?Sized>(
    kind: ClassifierKind,
    ts: &TrainSet,
    hp: &Hyperparameters,
    rng: &mut R,
) -> Result<Model, ClassifyError> {
    ts.validate()?;
    let x = ts.x.view();
    Ok(match kind {
        ClassifierKind::SvmRbf => Model::Svm(svm::fit(x, &ts.y, &hp.svm, false).model),
        ClassifierKind::RandomForest => Model::Forest(forest::fit(x, &ts.genuine(), &hp.forest, rng.next_u64())),
        ClassifierKind::Mlp => {
            let y01: Vec<f64> = ts.y.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            Model::Mlp(mlp::fit(x, &y01, &hp.mlp, rng))
        }
        ClassifierKind::Knn => Model::Knn(knn::fit(ts.x.clone(), ts.genuine(), &hp.knn)),
    })
}

pub fn score(m: &Model, x: ArrayView2<f64>) -> Result<Vec<f64>, ClassifyError> {
    if x.ncols() != m.dim() {
        return Err(ClassifyError::DimensionMismatch {
            expected: m.dim(),
            got: x.ncols(),
        });
    }
    Ok(match m {
        Model::Svm(s) => s.decisions(x),
        Model::Forest(f) => x.rows().into_iter().map(|r| f.score(r)).collect(),
        Model::Mlp(n) => n.predict(x),
        Model::Knn(k) => x.rows().into_iter().map(|r| k.score(r)).collect(),
    })
}

/// One-vs-rest RBF-SVM ensemble over classes `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassModel {
    pub machines: Vec<SvmModel>,
}

pub fn train_multiclass(x: ArrayView2<f64>, labels: &[usize], hp: &SvmParams) -> Result<MulticlassModel, ClassifyError> {
    if x.nrows() != labels.len() {
        return Err(ClassifyError::LabelCount {
            rows: x.nrows(),
            labels: labels.len(),
        });
    }
    check_finite(x)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 || (0..k).any(|c| !labels.contains(&c)) {
        return Err(ClassifyError::SingleClassTraining);
    }
    let params = SvmParams {
        gamma: Some(hp.gamma.unwrap_or_else(|| svm::scale_gamma(x))),
        ..*hp
    };
    let machines = (0..k)
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            svm::fit(x, &y, &params, false).model
        })
        .collect();
    Ok(MulticlassModel { machines })
}

pub fn predict_class(m: &MulticlassModel, x: ArrayView2<f64>) -> Result<Vec<usize>, ClassifyError> {
    let dim = m.machines.first().map_or(0, |s| s.dim());
    if x.ncols() != dim {
        return Err(ClassifyError::DimensionMismatch {
            expected: dim,
            got: x.ncols(),
        });
    }
    Ok(x
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = (0, f64::NEG_INFINITY);
            for (c, s) in m.machines.iter().enumerate() {
                let d = s.decision(r);
                if d > best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect())
}

/// `K x K` counts, rows indexed by true class, columns by prediction.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}
