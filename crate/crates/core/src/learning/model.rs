//! Desk-scale classifiers on flattened parameter vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression.
    SoftmaxLinear,
    /// One tanh hidden layer followed by softmax.
    Mlp1Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w: Vec<f64>,
    pub shape: ModelShape,
}

impl ModelShape {
    pub fn softmax(features: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            features,
            classes,
            hidden: 0,
        }
    }

    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1Hidden,
            features,
            classes,
            hidden,
        }
    }

    /// Model size `s`.
    pub fn num_params(&self) -> usize {
        let (d, c, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            ModelKind::SoftmaxLinear => c * (d + 1),
            ModelKind::Mlp1Hidden => h * (d + 1) + c * (h + 1),
        }
    }

    pub fn zeros(&self) -> ModelParams {
        ModelParams {
            w: vec![0.0; self.num_params()],
            shape: *self,
        }
    }

    /// Gaussian weights with standard deviation `scale / √fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> ModelParams {
        let mut p = self.zeros();
        let (d, c, h) = (self.features, self.classes, self.hidden);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut R| {
            let sd = scale / (fan_in as f64).sqrt();
            for v in &mut p.w[range] {
                let z: f64 = StandardNormal.sample(rng);
                *v = sd * z;
            }
        };
        match self.kind {
            ModelKind::SoftmaxLinear => fill(0..c * d, d, rng),
            ModelKind::Mlp1Hidden => {
                fill(0..h * d, d, rng);
                let w2 = h * (d + 1);
                fill(w2..w2 + c * h, h, rng);
            }
        }
        p
    }

    fn logits(&self, w: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (d, c, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            ModelKind::SoftmaxLinear => {
                let bias = &w[c * d..];
                for j in 0..c {
                    out[j] = bias[j] + dot(&w[j * d..(j + 1) * d], x);
                }
            }
            ModelKind::Mlp1Hidden => {
                let b1 = &w[h * d..h * (d + 1)];
                for u in 0..h {
                    hidden[u] = (b1[u] + dot(&w[u * d..(u + 1) * d], x)).tanh();
                }
                let w2 = &w[h * (d + 1)..];
                let b2 = &w2[c * h..];
                for j in 0..c {
                    out[j] = b2[j] + dot(&w2[j * h..(j + 1) * h], hidden);
                }
            }
        }
    }

    /// Mean cross-entropy over `rows` and its gradient.
    pub fn loss_and_grad(&self, w: &[f64], data: &Dataset, rows: &[usize]) -> (f64, Vec<f64>) {
        let (d, c, h) = (self.features, self.classes, self.hidden);
        let mut grad = vec![0.0; w.len()];
        let mut hidden = vec![0.0; h];
        let mut probs = vec![0.0; c];
        let mut back = vec![0.0; h];
        let mut loss = 0.0;
        for &r in rows {
            let (x, y) = data.sample(r);
            self.logits(w, x, &mut hidden, &mut probs);
            loss += softmax_in_place(&mut probs, y);
            probs[y] -= 1.0;
            match self.kind {
                ModelKind::SoftmaxLinear => {
                    for j in 0..c {
                        let g = probs[j];
                        for (gi, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gi += g * xi;
                        }
                        grad[c * d + j] += g;
                    }
                }
                ModelKind::Mlp1Hidden => {
                    let off2 = h * (d + 1);
                    back.iter_mut().for_each(|b| *b = 0.0);
                    for j in 0..c {
                        let g = probs[j];
                        for u in 0..h {
                            grad[off2 + j * h + u] += g * hidden[u];
                            back[u] += g * w[off2 + j * h + u];
                        }
                        grad[off2 + c * h + j] += g;
                    }
                    for u in 0..h {
                        let gu = back[u] * (1.0 - hidden[u] * hidden[u]);
                        for (gi, xi) in grad[u * d..(u + 1) * d].iter_mut().zip(x) {
                            *gi += gu * xi;
                        }
                        grad[h * d + u] += gu;
                    }
                }
            }
        }
        let n = rows.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    /// Mean loss and top-1 accuracy over the whole dataset.
    pub fn loss_and_accuracy(&self, w: &[f64], data: &Dataset) -> (f64, f64) {
        let mut hidden = vec![0.0; self.hidden];
        let mut probs = vec![0.0; self.classes];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            self.logits(w, x, &mut hidden, &mut probs);
            let pred = argmax(&probs);
            loss += softmax_in_place(&mut probs, y);
            correct += usize::from(pred == y);
        }
        let n = data.len().max(1) as f64;
        (loss / n, correct as f64 / n)
    }
}

/// Test loss and accuracy of `w`.
pub fn evaluate(w: &ModelParams, test: &Dataset) -> (f64, f64) {
    w.shape.loss_and_accuracy(&w.w, test)
}

/// Global loss as the size-weighted mean of per-shard losses, and accuracy
/// over the union.
pub fn evaluate_sharded(w: &ModelParams, shards: &[Dataset]) -> (f64, f64) {
    let total: usize = shards.iter().map(Dataset::len).sum();
    let (mut loss, mut acc) = (0.0, 0.0);
    for shard in shards {
        let (l, a) = w.shape.loss_and_accuracy(&w.w, shard);
        let weight = shard.len() as f64 / total.max(1) as f64;
        loss += weight * l;
        acc += weight * a;
    }
    (loss, acc)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Turns logits into probabilities and returns `−ln p[y]`.
fn softmax_in_place(z: &mut [f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    -(z[y].max(f64::MIN_POSITIVE)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{generate_blobs, BlobSpec};
    use crate::seed::SimRng;
    use rand::SeedableRng;

    fn central_diff(shape: &ModelShape, w: &[f64], data: &Dataset, rows: &[usize]) -> Vec<f64> {
        let eps = 1e-6;
        (0..w.len())
            .map(|i| {
                let mut wp = w.to_vec();
                let mut wm = w.to_vec();
                wp[i] += eps;
                wm[i] -= eps;
                (shape.loss_and_grad(&wp, data, rows).0 - shape.loss_and_grad(&wm, data, rows).0) / (2.0 * eps)
            })
            .collect()
    }

    fn check_gradient(shape: ModelShape) {
        let mut rng = SimRng::seed_from_u64(4);
        let spec = BlobSpec {
            classes: shape.classes,
            features: shape.features,
            train_samples: 40,
            test_samples: 1,
            ..Default::default()
        };
        let (data, _) = generate_blobs(&spec, &mut rng).unwrap();
        let w = shape.init(&mut rng, 1.0);
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, g) = shape.loss_and_grad(&w.w, &data, &rows);
        let fd = central_diff(&shape, &w.w, &data, &rows);
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den < 1e-4, "relative gradient error {}", num / den);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        check_gradient(ModelShape::softmax(5, 3));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        check_gradient(ModelShape::mlp(4, 6, 3));
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let mut rng = SimRng::seed_from_u64(1);
        let spec = BlobSpec {
            classes: 4,
            ..Default::default()
        };
        let (_, test) = generate_blobs(&spec, &mut rng).unwrap();
        let shape = ModelShape::softmax(spec.features, 4);
        let (loss, _) = evaluate(&shape.zeros(), &test);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelShape::softmax(15, 3).num_params(), 48);
        assert_eq!(ModelShape::mlp(4, 6, 3).num_params(), 6 * 5 + 3 * 7);
    }
}
