//! C-SVM with an RBF kernel, trained by sequential minimal optimization.
//!
//! The solver works on the dual
//!
//! ```text
//! min f(a) = 1/2 a'Qa - e'a   s.t.  0 <= a_i <= C,  y'a = 0,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! picking the working pair with maximal violation for `i` and second-order
//! gain for `j`, and stops when the maximal KKT violation drops below `tol`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Minimum curvature used when the pair's kernel submatrix is not positive.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// Kernel width; `None` selects `1 / (d * mean column variance)`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub support: Array2<f64>,
    /// `alpha_i * y_i` for each support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
}

impl SvmModel {
    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for (sv, c) in self.support.rows().into_iter().zip(&self.coef) {
            acc += c * rbf(self.gamma, sv, x);
        }
        acc - self.rho
    }

    pub fn decisions(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.decision(r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }
}

/// Solver output: the model plus the full dual vector for diagnostics.
#[derive(Debug, Clone)]
pub struct SvmFit {
    pub model: SvmModel,
    /// Dual variables in training-row order, in the caller's label
    /// orientation.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Value of the minimized dual objective after every iteration, when
    /// tracing was requested.
    pub objective_trace: Vec<f64>,
}

pub fn rbf(gamma: f64, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        d2 += d * d;
    }
    (-gamma * d2).exp()
}

/// `1 / (d * v)` with `v` the mean per-column population variance.
pub fn scale_gamma(x: ArrayView2<f64>) -> f64 {
    let d = x.ncols().max(1) as f64;
    let n = x.nrows();
    if n == 0 {
        return 1.0 / d;
    }
    let mut total = 0.0;
    for col in x.columns() {
        let mean = col.sum() / n as f64;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    }
    let v = total / d;
    if v > 0.0 && v.is_finite() {
        1.0 / (d * v)
    } else {
        1.0 / d
    }
}

enum KernelRows<'a> {
    Full(Array2<f64>),
    OnDemand { x: ArrayView2<'a, f64>, gamma: f64 },
}

impl KernelRows<'_> {
    fn row(&self, i: usize) -> std::borrow::Cow<'_, [f64]> {
        match self {
            KernelRows::Full(k) => std::borrow::Cow::Borrowed(
                k.row(i).to_slice().expect("kernel matrix is contiguous"),
            ),
            KernelRows::OnDemand { x, gamma } => {
                let xi = x.row(i);
                std::borrow::Cow::Owned(x.rows().into_iter().map(|r| rbf(*gamma, xi, r)).collect())
            }
        }
    }
}

const FULL_KERNEL_LIMIT: usize = 16_000_000;

/// Trains on labels in {+1, -1}. The problem is solved in a canonical
/// orientation where the first label is +1; negating every label therefore
/// yields exactly negated decision values.
pub fn fit(x: ArrayView2<f64>, y: &[f64], params: &SvmParams, trace: bool) -> SvmFit {
    let flip = y.first().is_some_and(|&v| v < 0.0);
    let y_canon: Vec<f64> = if flip { y.iter().map(|v| -v).collect() } else { y.to_vec() };
    let mut fit = solve(x, &y_canon, params, trace);
    if flip {
        for c in &mut fit.model.coef {
            *c = -*c;
        }
        fit.model.rho = -fit.model.rho;
    }
    fit
}

fn solve(x: ArrayView2<f64>, y: &[f64], params: &SvmParams, trace: bool) -> SvmFit {
    let n = x.nrows();
    let c = params.c;
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(x));

    let kernel = if n * n <= FULL_KERNEL_LIMIT {
        let mut k = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = rbf(gamma, x.row(i), x.row(j));
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        KernelRows::Full(k)
    } else {
        KernelRows::OnDemand { x, gamma }
    };
    let diag: Vec<f64> = (0..n).map(|i| rbf(gamma, x.row(i), x.row(i))).collect();

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut objective_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    while iterations < params.max_iter {
        // i: maximal violating index in I_up
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > g_max {
                    g_max = v;
                    i_sel = t;
                }
            }
        }
        if i_sel == usize::MAX {
            converged = true;
            break;
        }
        let ki = kernel.row(i_sel);

        // j: second-order gain among I_low
        let mut g_min = f64::INFINITY;
        let mut best_obj = f64::INFINITY;
        let mut j_sel = usize::MAX;
        for t in 0..n {
            if in_low(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v < g_min {
                    g_min = v;
                }
                let b = g_max - v;
                if b > 0.0 {
                    let mut a = diag[i_sel] + diag[t] - 2.0 * ki[t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -(b * b) / a;
                    if obj < best_obj {
                        best_obj = obj;
                        j_sel = t;
                    }
                }
            }
        }
        if g_max - g_min < params.tol || j_sel == usize::MAX {
            converged = true;
            break;
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let kj = kernel.row(j);
        let old_ai = alpha[i];
        let old_aj = alpha[j];
        let kij = ki[j];

        if y[i] != y[j] {
            let mut quad = diag[i] + diag[j] - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = diag[i] + diag[j] - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        for t in 0..n {
            // Q_ti = y_t y_i K_ti
            grad[t] += y[t] * (y[i] * ki[t] * dai + y[j] * kj[t] * daj);
        }
        if trace {
            let f: f64 = alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>() * 0.5;
            objective_trace.push(f);
        }
    }
    if !converged {
        log::warn!("SMO stopped after {iterations} iterations without reaching tol {}", params.tol);
    }

    let rho = compute_rho(&alpha, &grad, y, c);
    let mut sv_rows = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            sv_rows.push(t);
            coef.push(alpha[t] * y[t]);
        }
    }
    let support = x.select(ndarray::Axis(0), &sv_rows);
    SvmFit {
        model: SvmModel {
            gamma,
            support,
            coef,
            rho,
        },
        alpha,
        iterations,
        converged,
        objective_trace,
    }
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Largest KKT violation of a solution, measured on `y_i f(x_i)` against the
/// margin: `alpha = 0` needs `y f >= 1`, free needs `y f = 1`, `alpha = C`
/// needs `y f <= 1`.
pub fn kkt_violation(fit: &SvmFit, x: ArrayView2<f64>, y: &[f64], c: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, row) in x.rows().into_iter().enumerate() {
        let m = y[t] * fit.model.decision(row);
        let a = fit.alpha[t];
        let v = if a <= 0.0 {
            (1.0 - m).max(0.0)
        } else if a >= c {
            (m - 1.0).max(0.0)
        } else {
            (m - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}
