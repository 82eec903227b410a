//! Error rates, ROC curves, per-user summaries and significance tests.
//!
//! A score is accepted when `score >= threshold`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("score list is empty")]
    EmptyScoreList,
    #[error("score list contains a non-finite value")]
    NonFiniteScore,
    #[error("sample needs at least two values and some variance")]
    DegenerateSample,
    #[error("reference mean must be positive")]
    ZeroReferenceMean,
}

fn check(scores: &[f64]) -> Result<(), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScoreList);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// One operating point of the threshold sweep, as integer counts.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepPoint {
    threshold: f64,
    false_accepts: usize,
    false_rejects: usize,
}

/// Operating points at every distinct score plus one sentinel below and one
/// above all scores, in increasing threshold order.
fn sweep(genuine: &[f64], impostor: &[f64]) -> Vec<SweepPoint> {
    let g = sorted(genuine);
    let im = sorted(impostor);
    let mut all: Vec<f64> = g.iter().chain(&im).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let lo = all[0] - 1.0;
    let hi = all[all.len() - 1] + 1.0;
    let mut out = Vec::with_capacity(all.len() + 2);
    let (mut gi, mut ii) = (0, 0);
    for t in std::iter::once(lo).chain(all.iter().copied()).chain(std::iter::once(hi)) {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < im.len() && im[ii] < t {
            ii += 1;
        }
        let p = SweepPoint {
            threshold: t,
            false_accepts: im.len() - ii,
            false_rejects: gi,
        };
        debug_assert!(out.last().is_none_or(|q: &SweepPoint| {
            q.false_accepts >= p.false_accepts && q.false_rejects <= p.false_rejects
        }));
        out.push(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate, linearly interpolated where the FAR and FRR curves
/// cross.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer, MetricsError> {
    check(genuine)?;
    check(impostor)?;
    let ng = genuine.len() as i64;
    let ni = impostor.len() as i64;
    let pts = sweep(genuine, impostor);
    // first point where FRR >= FAR, compared exactly on counts
    let k = pts
        .iter()
        .position(|p| p.false_rejects as i64 * ni >= p.false_accepts as i64 * ng)
        .expect("the upper sentinel always has FRR = 1 >= FAR = 0");
    let b = pts[k];
    let (b1, b2) = (b.false_accepts as i64, b.false_rejects as i64);
    if b2 * ni == b1 * ng || k == 0 {
        return Ok(Eer {
            eer: b1 as f64 / ni as f64,
            threshold: b.threshold,
        });
    }
    let a = pts[k - 1];
    let (a1, a2) = (a.false_accepts as i64, a.false_rejects as i64);
    // crossing of the two rate segments, kept in integer counts until the
    // final division
    let denom = (a1 - b1) * ng + (b2 - a2) * ni;
    let lambda = (a1 * ng - a2 * ni) as f64 / denom as f64;
    Ok(Eer {
        eer: (a1 * b2 - a2 * b1) as f64 / denom as f64,
        threshold: a.threshold + lambda * (b.threshold - a.threshold),
    })
}

/// False accept and false reject rates at a fixed threshold.
pub fn far_frr_at(genuine: &[f64], impostor: &[f64], t: f64) -> Result<(f64, f64), MetricsError> {
    check(genuine)?;
    check(impostor)?;
    let fa = impostor.iter().filter(|&&s| s >= t).count();
    let fr = genuine.iter().filter(|&&s| s < t).count();
    Ok((fa as f64 / impostor.len() as f64, fr as f64 / genuine.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Default false-positive grid: 0 followed by 512 log-spaced values on
/// `[1e-3, 1]`.
pub fn default_fpr_grid() -> Vec<f64> {
    let n = 512;
    let mut g = vec![0.0];
    for i in 0..n {
        let e = -3.0 + 3.0 * i as f64 / (n - 1) as f64;
        g.push(10f64.powf(e));
    }
    *g.last_mut().unwrap() = 1.0;
    g
}

/// ROC curve sampled on `fpr_grid` (which must be sorted within `[0, 1]`).
/// Where several operating points share a grid FPR the highest TPR is
/// taken; between points the curve is linear.
pub fn roc(genuine: &[f64], impostor: &[f64], fpr_grid: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    check(genuine)?;
    check(impostor)?;
    let ng = genuine.len() as f64;
    let ni = impostor.len() as f64;
    // descending threshold: fpr and tpr both non-decreasing
    let pts: Vec<RocPoint> = sweep(genuine, impostor)
        .into_iter()
        .rev()
        .map(|p| RocPoint {
            threshold: p.threshold,
            fpr: p.false_accepts as f64 / ni,
            tpr: 1.0 - p.false_rejects as f64 / ng,
        })
        .collect();
    let mut out = Vec::with_capacity(fpr_grid.len());
    let mut j = 0;
    for &f in fpr_grid {
        while j + 1 < pts.len() && pts[j + 1].fpr <= f {
            j += 1;
        }
        let p = pts[j];
        if p.fpr == f || j + 1 == pts.len() {
            out.push(RocPoint { fpr: f, ..p });
        } else {
            let q = pts[j + 1];
            let lambda = (f - p.fpr) / (q.fpr - p.fpr);
            out.push(RocPoint {
                threshold: p.threshold + lambda * (q.threshold - p.threshold),
                fpr: f,
                tpr: p.tpr + lambda * (q.tpr - p.tpr),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRoc {
    pub fpr: Vec<f64>,
    pub tpr_mean: Vec<f64>,
    pub tpr_ci_low: Vec<f64>,
    pub tpr_ci_high: Vec<f64>,
    pub n_curves: usize,
    /// Set when a single curve was averaged and the band is zero by
    /// convention.
    pub single_curve: bool,
}

/// Vertical average of ROC curves sampled on a common grid, with a 95%
/// normal band clipped to `[0, 1]`.
pub fn mean_roc(curves: &[Vec<RocPoint>]) -> MeanRoc {
    let n = curves.len();
    let m = curves.first().map_or(0, Vec::len);
    let mut r = MeanRoc {
        fpr: Vec::with_capacity(m),
        tpr_mean: Vec::with_capacity(m),
        tpr_ci_low: Vec::with_capacity(m),
        tpr_ci_high: Vec::with_capacity(m),
        n_curves: n,
        single_curve: n == 1,
    };
    for i in 0..m {
        let vals: Vec<f64> = curves.iter().map(|c| c[i].tpr).collect();
        let mu = mean(&vals);
        let half = if n > 1 { 1.96 * sample_std(&vals) / (n as f64).sqrt() } else { 0.0 };
        r.fpr.push(curves[0][i].fpr);
        r.tpr_mean.push(mu);
        r.tpr_ci_low.push((mu - half).clamp(0.0, 1.0));
        r.tpr_ci_high.push((mu + half).clamp(0.0, 1.0));
    }
    r
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation with `n - 1` in the denominator; 0 for fewer than two
/// values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Serde adapter writing NaN as `null` and reading `null` back as NaN.
pub mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerSummary {
    pub per_user_eer: Vec<f64>,
    #[serde(with = "nullable")]
    pub mean_eer: f64,
    #[serde(with = "nullable")]
    pub std: f64,
    #[serde(with = "nullable")]
    pub ci95: f64,
    pub n_users: usize,
}

impl EerSummary {
    pub fn from_per_user(per_user_eer: Vec<f64>) -> Self {
        let n = per_user_eer.len();
        let mean_eer = mean(&per_user_eer);
        let std = sample_std(&per_user_eer);
        let ci95 = if n > 0 { 1.96 * std / (n as f64).sqrt() } else { f64::NAN };
        Self {
            per_user_eer,
            mean_eer,
            std,
            ci95,
            n_users: n,
        }
    }
}

/// Two-sided p-value of Welch's unequal-variance t-test.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::DegenerateSample);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sample_std(a).powi(2) / na;
    let vb = sample_std(b).powi(2) / nb;
    if va + vb == 0.0 {
        return Err(MetricsError::DegenerateSample);
    }
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(student_t_two_sided(t, df))
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Rescales a reference spread to another mean: `mu_m / mu_ref * sigma_ref`.
pub fn extrapolate_std(mu_m: f64, mu_ref: f64, sigma_ref: f64) -> Result<f64, MetricsError> {
    if mu_ref <= 0.0 || !mu_ref.is_finite() {
        return Err(MetricsError::ZeroReferenceMean);
    }
    Ok(mu_m / mu_ref * sigma_ref)
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let (ma, mb) = (mean(&ra), mean(&rb));
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}
