//! Feed-forward network: dense -> ReLU -> batch norm -> dropout per hidden
//! layer, one sigmoid output unit, binary cross-entropy, Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: vec![30, 30, 15],
            dropout: 0.3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            epochs: 50,
            batch_size: 32,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

/// Which statistics batch normalization uses in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running averages accumulated during training (inference).
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BnStats {
    mean: Array1<f64>,
    var: Array1<f64>,
}

/// Trainable tensors are kept in one list so the optimizer and the gradient
/// check can treat them uniformly. Hidden layer `l` owns entries
/// `4l..4l+4` (weights, bias, gamma, beta); the output layer owns the last
/// two (weights, bias). Vectors are stored as `1 x n` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub params: Vec<Array2<f64>>,
    running: Vec<BnStats>,
    dropout: f64,
    bn_epsilon: f64,
    bn_momentum: f64,
}

struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mask: Option<Array2<f64>>,
}

struct Forward {
    logits: Array1<f64>,
    layers: Vec<LayerCache>,
    batch_stats: Vec<BnStats>,
    last_hidden: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, p: &MlpParams, rng: &mut R) -> Self {
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut fan_in = input_dim;
        let glorot = |rows: usize, cols: usize, rng: &mut R| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
        };
        for &width in &p.hidden {
            params.push(glorot(fan_in, width, rng));
            params.push(Array2::zeros((1, width)));
            params.push(Array2::ones((1, width)));
            params.push(Array2::zeros((1, width)));
            running.push(BnStats {
                mean: Array1::zeros(width),
                var: Array1::ones(width),
            });
            fan_in = width;
        }
        params.push(glorot(fan_in, 1, rng));
        params.push(Array2::zeros((1, 1)));
        Self {
            params,
            running,
            dropout: p.dropout,
            bn_epsilon: p.bn_epsilon,
            bn_momentum: p.bn_momentum,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].nrows()
    }

    fn hidden_count(&self) -> usize {
        self.running.len()
    }

    fn forward<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, mode: BnMode, mut dropout_rng: Option<&mut R>) -> Forward {
        let mut a = x.to_owned();
        let mut layers = Vec::with_capacity(self.hidden_count());
        let mut batch_stats = Vec::new();
        for l in 0..self.hidden_count() {
            let w = &self.params[4 * l];
            let b = self.params[4 * l + 1].row(0);
            let gamma = self.params[4 * l + 2].row(0);
            let beta = self.params[4 * l + 3].row(0);
            let pre = a.dot(w) + &b;
            let act = pre.mapv(|v| v.max(0.0));
            let (mean, var) = match mode {
                BnMode::Batch => {
                    let mean = act.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = act.var_axis(Axis(0), 0.0);
                    batch_stats.push(BnStats {
                        mean: mean.clone(),
                        var: var.clone(),
                    });
                    (mean, var)
                }
                BnMode::Running => (self.running[l].mean.clone(), self.running[l].var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + self.bn_epsilon).sqrt());
            let xhat = (&act - &mean) * &inv_std;
            let mut out = &xhat * &gamma + &beta;
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let m = Array2::from_shape_simple_fn(out.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    out *= &m;
                    Some(m)
                }
                _ => None,
            };
            layers.push(LayerCache {
                input: a,
                pre,
                xhat,
                inv_std,
                mask,
            });
            a = out;
        }
        let k = 4 * self.hidden_count();
        let logits = a.dot(&self.params[k]).column(0).to_owned() + self.params[k + 1][[0, 0]];
        Forward {
            logits,
            layers,
            batch_stats,
            last_hidden: a,
        }
    }

    /// Mean binary cross-entropy and its gradient with respect to every
    /// tensor in `params`. Dropout is not applied.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: &[f64], mode: BnMode) -> (f64, Vec<Array2<f64>>) {
        let fwd = self.forward::<rand::rngs::ThreadRng>(x, mode, None);
        self.backward(&fwd, y, mode)
    }

    fn backward(&self, fwd: &Forward, y: &[f64], mode: BnMode) -> (f64, Vec<Array2<f64>>) {
        let n = y.len() as f64;
        let loss = fwd
            .logits
            .iter()
            .zip(y)
            .map(|(&z, &t)| bce_with_logit(z, t))
            .sum::<f64>()
            / n;
        let dlogit: Array1<f64> = fwd
            .logits
            .iter()
            .zip(y)
            .map(|(&z, &t)| (sigmoid(z) - t) / n)
            .collect();
        let dlogit = dlogit.insert_axis(Axis(1));

        let mut grads: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let k = 4 * self.hidden_count();
        grads[k] = fwd.last_hidden.t().dot(&dlogit);
        grads[k + 1] = dlogit.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut da = dlogit.dot(&self.params[k].t());

        for l in (0..self.hidden_count()).rev() {
            let c = &fwd.layers[l];
            let dy = match &c.mask {
                Some(m) => &da * m,
                None => da,
            };
            let gamma = self.params[4 * l + 2].row(0);
            grads[4 * l + 2] = (&dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            grads[4 * l + 3] = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dxhat = &dy * &gamma;
            let dact = match mode {
                BnMode::Batch => {
                    let b = dxhat.nrows() as f64;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
                    ((&dxhat * b) - &sum_dxhat - &(&c.xhat * &sum_dxhat_xhat)) * &c.inv_std / b
                }
                BnMode::Running => &dxhat * &c.inv_std,
            };
            let dpre = &dact * &c.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            grads[4 * l] = c.input.t().dot(&dpre);
            grads[4 * l + 1] = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
            da = dpre.dot(&self.params[4 * l].t());
        }
        (loss, grads)
    }

    /// Sigmoid outputs with batch norm in inference mode.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        if x.nrows() == 0 {
            return Vec::new();
        }
        self.forward::<rand::rngs::ThreadRng>(x, BnMode::Running, None)
            .logits
            .iter()
            .map(|&z| sigmoid(z))
            .collect()
    }

    fn update_running(&mut self, stats: &[BnStats]) {
        let m = self.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.mean = &r.mean * m + &s.mean * (1.0 - m);
            r.var = &r.var * m + &s.var * (1.0 - m);
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for p in &mut self.params {
            for v in p.iter_mut() {
                *v = *it.next().expect("parameter vector too short");
            }
        }
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], p: &MlpParams) {
        self.t += 1;
        let c1 = 1.0 - p.beta1.powi(self.t);
        let c2 = 1.0 - p.beta2.powi(self.t);
        for ((w, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            m.zip_mut_with(g, |m, &g| *m = p.beta1 * *m + (1.0 - p.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = p.beta2 * *v + (1.0 - p.beta2) * g * g);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= p.learning_rate * (m / c1) / ((v / c2).sqrt() + p.adam_epsilon);
            });
        }
    }
}

/// Trains on labels in {0, 1} (1 = genuine).
pub fn fit<R: Rng + ?Sized>(x: ArrayView2<f64>, y: &[f64], p: &MlpParams, rng: &mut R) -> MlpModel {
    let mut model = MlpModel::new(x.ncols(), p, rng);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let batch = p.batch_size.max(1);
    for _ in 0..p.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let fwd = model.forward(xb.view(), BnMode::Batch, Some(&mut *rng));
            let (_, grads) = model.backward(&fwd, &yb, BnMode::Batch);
            adam.step(&mut model.params, &grads, p);
            model.update_running(&fwd.batch_stats);
        }
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((12, 5), || rng.random_range(-1.5..1.5));
        let y = (0..12).map(|i| (i % 2) as f64).collect();
        (x, y)
    }

    fn max_rel_error(model: &MlpModel, x: ArrayView2<f64>, y: &[f64], mode: BnMode) -> f64 {
        let (_, grads) = model.loss_and_grad(x, y, mode);
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let base = model.flat_params();
        let eps = 1e-5;
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            probe.set_flat_params(&p);
            let up = probe.loss_and_grad(x, y, mode).0;
            p[i] -= 2.0 * eps;
            probe.set_flat_params(&p);
            let down = probe.loss_and_grad(x, y, mode).0;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, y) = toy(4);
        let p = MlpParams {
            hidden: vec![6, 5, 4],
            epochs: 3,
            ..Default::default()
        };
        // a few real steps so running statistics and weights are non-trivial
        let model = fit(x.view(), &y, &p, &mut ChaCha8Rng::seed_from_u64(8));
        let err = max_rel_error(&model, x.view(), &y, BnMode::Running);
        assert!(err <= 1e-4, "inference-mode relative error {err}");
        let err = max_rel_error(&model, x.view(), &y, BnMode::Batch);
        assert!(err <= 1e-4, "batch-mode relative error {err}");
    }

    #[test]
    fn learns_separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let c = if i < n / 2 { -2.5 } else { 2.5 };
            c + 0.1 * rng.random_range(-1.0..1.0)
        });
        let y: Vec<f64> = (0..n).map(|i| if i < n / 2 { 0.0 } else { 1.0 }).collect();
        let model = fit(x.view(), &y, &MlpParams::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let pred = model.predict(x.view());
        for (p, t) in pred.iter().zip(&y) {
            assert_eq!((*p > 0.5) as u8 as f64, *t);
            assert!((0.0..=1.0).contains(p));
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (x, y) = toy(9);
        let p = MlpParams {
            epochs: 4,
            ..Default::default()
        };
        let a = fit(x.view(), &y, &p, &mut ChaCha8Rng::seed_from_u64(3));
        let b = fit(x.view(), &y, &p, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
