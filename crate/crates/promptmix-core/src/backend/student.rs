//! The downstream student: a deterministic one-vs-rest logistic classifier
//! over whole canonical-label strings, on normalized bag-of-words features,
//! trained with plain SGD and early stopping on dev loss. One-vs-rest keeps
//! the loss informative even when training data collapses to a single label.
//! Small enough to memorize desk-scale fixtures, which is exactly what the
//! pipeline tests need from a student stand-in.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

use super::StudentTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Dev evaluations without improvement before stopping. Ignored when
    /// the dev set is empty.
    pub patience: usize,
    pub seed: u64,
}

impl Default for StudentConfig {
    // Learning rate and epoch budget match the real-model defaults; the
    // mock classifier usually wants a much larger rate via config.
    fn default() -> Self {
        StudentConfig { learning_rate: 3e-5, max_epochs: 14, patience: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockStudent {
    classes: Vec<String>,
    vocab: BTreeMap<String, usize>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// Mean training loss per epoch, in epoch order.
    pub train_curve: Vec<f64>,
    /// Mean dev loss per epoch; empty when no dev set was given.
    pub dev_curve: Vec<f64>,
}

impl MockStudent {
    fn features(&self, input: &str) -> Array1<f64> {
        features_for(&self.vocab, input)
    }

    fn logits(&self, x: &Array1<f64>) -> Array1<f64> {
        let c = self.classes.len();
        let v = self.vocab.len();
        let w = ndarray::ArrayView2::from_shape((c, v), &self.weights).expect("stored row-major");
        let b = ndarray::ArrayView1::from_shape(c, &self.bias).expect("stored densely");
        w.dot(x) + b
    }

    /// The highest-scoring class string; ties go to the lexicographically
    /// first class (classes are stored sorted).
    pub fn predict(&self, input: &str) -> String {
        let logits = self.logits(&self.features(input));
        let mut best = 0;
        for i in 1..self.classes.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        self.classes[best].clone()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Corrupt(format!("student encode: {e}")))
    }

    pub fn from_json(raw: &str) -> Result<MockStudent> {
        serde_json::from_str(raw).map_err(|e| Error::Corrupt(format!("student decode: {e}")))
    }
}

fn features_for(vocab: &BTreeMap<String, usize>, input: &str) -> Array1<f64> {
    let mut x = Array1::zeros(vocab.len());
    let tokens = tokenize(input);
    if tokens.is_empty() {
        return x;
    }
    let scale = 1.0 / tokens.len() as f64;
    for tok in tokens {
        if let Some(&j) = vocab.get(&tok) {
            x[j] += scale;
        }
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy over classes plus the per-class logit
/// gradients. `label` is None for examples whose class was never seen in
/// training, which one-vs-rest treats as all-negative.
fn ovr_loss_and_grad(logits: &Array1<f64>, label: Option<usize>) -> (f64, Array1<f64>) {
    let c = logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array1::zeros(logits.len());
    for (i, &z) in logits.iter().enumerate() {
        let t = if label == Some(i) { 1.0 } else { 0.0 };
        let p = sigmoid(z);
        // The naive form is deliberate: p saturating against the target
        // produces an infinite loss, which is the divergence signal.
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        dlogits[i] = (p - t) / c;
    }
    (loss / c, dlogits)
}

/// Trains the classifier on (input, target) pairs. Classes are the distinct
/// target strings, the vocabulary is built from the training inputs, and
/// the dev set drives early stopping (best parameters are restored).
pub fn train_student(
    train: &[StudentTask],
    dev: &[StudentTask],
    cfg: &StudentConfig,
) -> Result<MockStudent> {
    if train.is_empty() {
        return Err(Error::Argument("student training set is empty".into()));
    }
    if cfg.learning_rate <= 0.0 || !cfg.learning_rate.is_finite() {
        return Err(Error::Training(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    let mut classes: Vec<String> = train.iter().map(|t| t.target.clone()).collect();
    classes.sort();
    classes.dedup();
    let class_of: BTreeMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut vocab = BTreeMap::new();
    for task in train {
        for tok in tokenize(&task.input) {
            let next = vocab.len();
            vocab.entry(tok).or_insert(next);
        }
    }

    let c = classes.len();
    let v = vocab.len();
    let mut w: Array2<f64> = Array2::zeros((c, v));
    let mut b: Array1<f64> = Array1::zeros(c);

    let examples: Vec<(Array1<f64>, usize)> = train
        .iter()
        .map(|t| (features_for(&vocab, &t.input), class_of[t.target.as_str()]))
        .collect();
    let dev_examples: Vec<(Array1<f64>, Option<usize>)> = dev
        .iter()
        .map(|t| (features_for(&vocab, &t.input), class_of.get(t.target.as_str()).copied()))
        .collect();

    let mut train_curve = Vec::new();
    let mut dev_curve = Vec::new();
    let mut best: Option<(f64, Array2<f64>, Array1<f64>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::text::mix_seed(&[cfg.seed, epoch as u64]));
        // Fisher-Yates with the epoch-derived stream keeps runs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (x, y) = &examples[i];
            let logits = w.dot(x) + &b;
            let (loss, dlogits) = ovr_loss_and_grad(&logits, Some(*y));
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "student loss diverged at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            for (ci, g) in dlogits.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                let mut row = w.row_mut(ci);
                row.scaled_add(-cfg.learning_rate * g, x);
                b[ci] -= cfg.learning_rate * g;
            }
        }
        train_curve.push(epoch_loss / examples.len() as f64);

        if !dev_examples.is_empty() {
            let mut dev_loss = 0.0;
            for (x, y) in &dev_examples {
                let logits = w.dot(x) + &b;
                dev_loss += ovr_loss_and_grad(&logits, *y).0;
            }
            dev_loss /= dev_examples.len() as f64;
            dev_curve.push(dev_loss);
            let improved = best.as_ref().map(|(bl, _, _)| dev_loss < *bl).unwrap_or(true);
            if improved {
                best = Some((dev_loss, w.clone(), b.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, bw, bb)) = best {
        w = bw;
        b = bb;
    }
    Ok(MockStudent {
        classes,
        vocab,
        weights: w.iter().copied().collect(),
        bias: b.iter().copied().collect(),
        train_curve,
        dev_curve,
    })
}
