//! Federated averaging over a two-layer dense classifier.
//!
//! The model is `softmax(W2 * relu(W1 * x + b1) + b2)` trained with
//! cross-entropy. Parameters are kept flat, in the order `W1` (row-major,
//! `hidden x input`), `b1`, `W2` (`output x hidden`), `b2`, which is also
//! the order in which they are encrypted.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::sampling::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelLayout {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ModelLayout {
    /// 20 features, 18 hidden units, 6 classes: 492 parameters.
    pub const DEFAULT: ModelLayout = ModelLayout {
        input: 20,
        hidden: 18,
        output: 6,
    };

    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.input;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.output * self.hidden;
        (w1, b1, w2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub values: Vec<f64>,
    pub layout: ModelLayout,
}

impl ModelWeights {
    pub fn new(values: Vec<f64>, layout: ModelLayout) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::LengthMismatch {
                expected: layout.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("model weights must be finite".into()));
        }
        Ok(Self { values, layout })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layout: ModelLayout, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = alloc::vec![0.0; layout.param_count()];
        let (w1_end, b1_end, w2_end) = layout.offsets();
        let lim1 = libm::sqrt(6.0 / (layout.input + layout.hidden) as f64);
        let lim2 = libm::sqrt(6.0 / (layout.hidden + layout.output) as f64);
        for v in &mut values[..w1_end] {
            *v = rng.gen_range(-lim1..lim1);
        }
        for v in &mut values[b1_end..w2_end] {
            *v = rng.gen_range(-lim2..lim2);
        }
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            local_epochs: 20,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "learning rate must be non-negative".into(),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidConfig(
                "at least one local epoch is required".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major features with integer labels. Rows from `global_start` on are
/// the shared global set appended to every device.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub features: Vec<f64>,
    pub labels: Vec<u16>,
    pub dim: usize,
    pub global_start: usize,
}

impl LocalDataset {
    pub fn new(features: Vec<f64>, labels: Vec<u16>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::InvalidConfig(
                "feature matrix does not match labels".into(),
            ));
        }
        let global_start = labels.len();
        Ok(Self {
            features,
            labels,
            dim,
            global_start,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = alloc::vec![0; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_devices: usize,
    pub samples_per_device: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// 0 gives every device the same label mix, 1 restricts each device to two classes.
    pub skew: f64,
    /// Size of the shared global set relative to `samples_per_device`.
    pub global_fraction: f64,
    pub test_samples: usize,
    /// Standard deviation of the class centroids; noise around them is unit.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_devices: 10,
            samples_per_device: 400,
            num_classes: ModelLayout::DEFAULT.output,
            feature_dim: ModelLayout::DEFAULT.input,
            skew: 0.8,
            global_fraction: 0.05,
            test_samples: 2000,
            separation: 0.75,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub devices: Vec<LocalDataset>,
    pub test: LocalDataset,
}

/// Splits `total` in proportion to `weights` (largest remainder).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| libm::floor(x) as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn draw_samples(
    centroids: &[Vec<f64>],
    counts: &[usize],
    rng: &mut ChaCha20Rng,
) -> (Vec<f64>, Vec<u16>) {
    let mut labels: Vec<u16> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| core::iter::repeat(c as u16).take(k))
        .collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(labels.len() * centroids[0].len());
    for &l in &labels {
        for &mu in &centroids[l as usize] {
            features.push(mu + standard_normal(rng));
        }
    }
    (features, labels)
}

/// Gaussian-mixture classification data split across devices, with a
/// shared global set appended to each device and a separate test set.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.num_devices == 0
        || cfg.samples_per_device == 0
        || cfg.num_classes < 2
        || cfg.feature_dim == 0
        || cfg.test_samples == 0
    {
        return Err(Error::InvalidConfig(
            "dataset sizes must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.skew) || !(0.0..1.0).contains(&cfg.global_fraction) {
        return Err(Error::InvalidConfig(
            "skew and global fraction must lie in [0, 1]".into(),
        ));
    }
    let classes = cfg.num_classes;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| cfg.separation * standard_normal(&mut rng))
                .collect()
        })
        .collect();
    let uniform = alloc::vec![1.0; classes];

    let global_len = libm::round(cfg.global_fraction * cfg.samples_per_device as f64) as usize;
    let (global_x, global_y) = draw_samples(&centroids, &apportion(global_len, &uniform), &mut rng);

    let mut devices = Vec::with_capacity(cfg.num_devices);
    for d in 0..cfg.num_devices {
        let dominant = [(2 * d) % classes, (2 * d + 1) % classes];
        let weights: Vec<f64> = (0..classes)
            .map(|c| {
                let boost = if dominant.contains(&c) {
                    cfg.skew / 2.0
                } else {
                    0.0
                };
                (1.0 - cfg.skew) / classes as f64 + boost
            })
            .collect();
        let counts = apportion(cfg.samples_per_device, &weights);
        let (mut x, mut y) = draw_samples(&centroids, &counts, &mut rng);
        let global_start = y.len();
        x.extend_from_slice(&global_x);
        y.extend_from_slice(&global_y);
        devices.push(LocalDataset {
            features: x,
            labels: y,
            dim: cfg.feature_dim,
            global_start,
        });
    }
    let (tx, ty) = draw_samples(&centroids, &apportion(cfg.test_samples, &uniform), &mut rng);
    Ok(SynthData {
        devices,
        test: LocalDataset::new(tx, ty, cfg.feature_dim)?,
    })
}

struct Activations {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(w: &ModelWeights, x: &[f64]) -> Activations {
    let l = w.layout;
    let (w1_end, b1_end, w2_end) = l.offsets();
    let p = &w.values;
    let mut hidden_pre = alloc::vec![0.0; l.hidden];
    for (j, h) in hidden_pre.iter_mut().enumerate() {
        let row = &p[j * l.input..(j + 1) * l.input];
        *h = p[w1_end + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|&h| h.max(0.0)).collect();
    let mut logits = alloc::vec![0.0; l.output];
    for (k, z) in logits.iter_mut().enumerate() {
        let row = &p[b1_end + k * l.hidden..b1_end + (k + 1) * l.hidden];
        *z = p[w2_end + k] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Activations {
        hidden_pre,
        hidden,
        probs,
    }
}

fn check_shape(w: &ModelWeights, data: &LocalDataset) -> Result<()> {
    if w.values.len() != w.layout.param_count() {
        return Err(Error::LengthMismatch {
            expected: w.layout.param_count(),
            actual: w.values.len(),
        });
    }
    if data.dim != w.layout.input {
        return Err(Error::LengthMismatch {
            expected: w.layout.input,
            actual: data.dim,
        });
    }
    if data.labels.iter().any(|&y| y as usize >= w.layout.output) {
        return Err(Error::InvalidConfig(
            "label outside the model's classes".into(),
        ));
    }
    Ok(())
}

/// Mean cross-entropy over the selected rows and its gradient.
pub fn loss_and_gradient(w: &ModelWeights, data: &LocalDataset, rows: &[usize]) -> (f64, Vec<f64>) {
    let l = w.layout;
    let (w1_end, b1_end, w2_end) = l.offsets();
    let p = &w.values;
    let mut grad = alloc::vec![0.0; p.len()];
    let mut loss = 0.0;
    for &i in rows {
        let x = data.row(i);
        let y = data.labels[i] as usize;
        let act = forward(w, x);
        loss -= libm::log(act.probs[y].max(f64::MIN_POSITIVE));
        let mut dz = act.probs;
        dz[y] -= 1.0;
        let mut dh = alloc::vec![0.0; l.hidden];
        for (k, &g) in dz.iter().enumerate() {
            grad[w2_end + k] += g;
            let base = b1_end + k * l.hidden;
            for j in 0..l.hidden {
                grad[base + j] += g * act.hidden[j];
                dh[j] += g * p[base + j];
            }
        }
        for j in 0..l.hidden {
            if act.hidden_pre[j] <= 0.0 {
                continue;
            }
            grad[w1_end + j] += dh[j];
            let base = j * l.input;
            for (t, &xt) in x.iter().enumerate() {
                grad[base + t] += dh[j] * xt;
            }
        }
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Mean cross-entropy over the whole dataset.
pub fn loss(w: &ModelWeights, data: &LocalDataset) -> f64 {
    let total: f64 = (0..data.len())
        .map(|i| {
            -libm::log(
                forward(w, data.row(i)).probs[data.labels[i] as usize].max(f64::MIN_POSITIVE),
            )
        })
        .sum();
    total / data.len().max(1) as f64
}

/// `local_epochs` passes of shuffled minibatch updates starting from `w`.
pub fn local_update(
    w: &ModelWeights,
    data: &LocalDataset,
    cfg: &TrainingConfig,
) -> Result<ModelWeights> {
    cfg.validate()?;
    check_shape(w, data)?;
    if data.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = w.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = alloc::vec![0.0; model.len()];
    let mut v = alloc::vec![0.0; model.len()];
    let mut step = 0i32;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (batch_loss, grad) = loss_and_gradient(&model, data, batch);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence);
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in model.values.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                Optimizer::Adam => {
                    step += 1;
                    let c1 = 1.0 - libm::pow(beta1, step as f64);
                    let c2 = 1.0 - libm::pow(beta2, step as f64);
                    for i in 0..grad.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        model.values[i] -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                }
            }
        }
    }
    if model.values.iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDivergence);
    }
    Ok(model)
}

/// Elementwise mean of equally shaped models.
pub fn average(ws: &[ModelWeights]) -> Result<ModelWeights> {
    let first = ws.first().ok_or(Error::Empty("no models to average"))?;
    for w in ws {
        if w.layout != first.layout || w.values.len() != first.values.len() {
            return Err(Error::LengthMismatch {
                expected: first.values.len(),
                actual: w.values.len(),
            });
        }
    }
    let inv = 1.0 / ws.len() as f64;
    let values = (0..first.values.len())
        .map(|i| ws.iter().map(|w| w.values[i]).sum::<f64>() * inv)
        .collect();
    Ok(ModelWeights {
        values,
        layout: first.layout,
    })
}

pub fn predict(w: &ModelWeights, x: &[f64]) -> usize {
    let probs = forward(w, x).probs;
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn evaluate(w: &ModelWeights, test: &LocalDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    check_shape(w, test)?;
    let correct = (0..test.len())
        .filter(|&i| predict(w, test.row(i)) == test.labels[i] as usize)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> (SynthData, ModelLayout) {
        let cfg = SynthConfig {
            num_devices: 2,
            samples_per_device: 200,
            num_classes: 3,
            feature_dim: 4,
            skew: 0.0,
            test_samples: 300,
            separation: 3.0,
            ..SynthConfig::default()
        };
        (
            synth_dataset(&cfg).unwrap(),
            ModelLayout {
                input: 4,
                hidden: 5,
                output: 3,
            },
        )
    }

    #[test]
    fn default_layout_has_492_parameters() {
        assert_eq!(ModelLayout::DEFAULT.param_count(), 492);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (data, layout) = tiny_data();
        let w = ModelWeights::init(layout, 1);
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let cfg = TrainingConfig {
                learning_rate: 0.0,
                local_epochs: 2,
                optimizer,
                ..TrainingConfig::default()
            };
            assert_eq!(local_update(&w, &data.devices[0], &cfg).unwrap(), w);
        }
    }

    #[test]
    fn average_basics() {
        let layout = ModelLayout {
            input: 1,
            hidden: 1,
            output: 2,
        };
        let w = ModelWeights::new(alloc::vec![1.0, -2.0, 0.5, 3.0, 4.0, 5.0], layout).unwrap();
        assert_eq!(average(&[w.clone()]).unwrap(), w);
        let neg = ModelWeights::new(w.values.iter().map(|x| -x).collect(), layout).unwrap();
        assert!(average(&[w.clone(), neg])
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
        assert!(average(&[]).is_err());
        let other = ModelWeights::init(ModelLayout::DEFAULT, 0);
        assert!(average(&[w, other]).is_err());
    }

    #[test]
    fn training_errors() {
        let (data, layout) = tiny_data();
        let w = ModelWeights::init(layout, 1);
        let bad = TrainingConfig {
            local_epochs: 0,
            ..TrainingConfig::default()
        };
        assert!(local_update(&w, &data.devices[0], &bad).is_err());
        let wrong = ModelWeights::init(ModelLayout::DEFAULT, 1);
        assert!(local_update(&wrong, &data.devices[0], &TrainingConfig::default()).is_err());
        let huge = TrainingConfig {
            learning_rate: 1e300,
            local_epochs: 3,
            ..TrainingConfig::default()
        };
        assert_eq!(
            local_update(&w, &data.devices[0], &huge),
            Err(Error::TrainingDivergence)
        );
        let empty = LocalDataset::new(Vec::new(), Vec::new(), 4).unwrap();
        assert!(evaluate(&w, &empty).is_err());
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 10);
        assert_eq!(apportion(6, &[1.0, 1.0, 1.0]), [2, 2, 2]);
        assert_eq!(apportion(5, &[0.0, 1.0]), [0, 5]);
    }
}
