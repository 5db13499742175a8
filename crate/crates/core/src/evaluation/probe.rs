use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::argmax;
use crate::error::{Error, Result};

/// Multinomial logistic regression on standardised features, fitted by
/// full-batch gradient descent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticProbe {
    classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[K][D + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

const ITERATIONS: usize = 500;
const STEP: f64 = 0.5;
const L2: f64 = 1e-3;

impl LogisticProbe {
    pub fn fit(x: &[Vec<f32>], labels: &[usize]) -> Result<Self> {
        if x.len() != labels.len() || x.is_empty() {
            return Err(Error::Shape(format!("{} samples, {} labels", x.len(), labels.len())));
        }
        let classes: Vec<usize> = {
            let mut c = labels.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        if classes.len() < 2 {
            return Err(Error::Invalid("a probe needs at least two classes".into()));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged embeddings".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in x {
            for j in 0..d {
                scale[j] += (r[j] as f64 - mean[j]).powi(2) / n;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let mut probe = Self {
            weights: vec![vec![0.0; d + 1]; classes.len()],
            classes,
            mean,
            scale,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let y: Vec<usize> = labels
            .iter()
            .map(|l| probe.classes.binary_search(l).expect("label from the class list"))
            .collect();
        let k = probe.classes.len();
        for _ in 0..ITERATIONS {
            let mut grad = vec![vec![0.0; d + 1]; k];
            for (zi, &yi) in z.iter().zip(&y) {
                let p = probe.softmax(zi);
                for c in 0..k {
                    let err = p[c] - if c == yi { 1.0 } else { 0.0 };
                    for j in 0..d {
                        grad[c][j] += err * zi[j] / n;
                    }
                    grad[c][d] += err / n;
                }
            }
            for c in 0..k {
                for j in 0..=d {
                    let reg = if j < d { L2 * probe.weights[c][j] } else { 0.0 };
                    probe.weights[c][j] -= STEP * (grad[c][j] + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f32]) -> Vec<f64> {
        r.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (v as f64 - m) * s)
            .collect()
    }

    fn softmax(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[d] + w[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, r: &[f32]) -> usize {
        let p = self.softmax(&self.standardize(r));
        self.classes[argmax(&p)]
    }

    pub fn accuracy(&self, x: &[Vec<f32>], labels: &[usize]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / x.len().max(1) as f64
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub chance: f64,
}

/// Fewest samples per class a probe accepts.
pub const MIN_PER_CLASS: usize = 10;

/// Held-out accuracy of a logistic probe on a stratified 80/20 split drawn
/// from `split_seed`.
pub fn linear_probe(x: &[Vec<f32>], labels: &[usize], split_seed: u64) -> Result<ProbeResult> {
    if x.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples, {} labels", x.len(), labels.len())));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Invalid("a probe needs at least two classes".into()));
    }
    if let Some((c, idx)) = by_class.iter().find(|(_, v)| v.len() < MIN_PER_CLASS) {
        return Err(Error::Invalid(format!(
            "class {c} has {} samples, a probe needs at least {MIN_PER_CLASS}",
            idx.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (idx.len() * 4).div_ceil(5).min(idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    let pick = |ids: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
        (ids.iter().map(|&i| x[i].clone()).collect(), ids.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let probe = LogisticProbe::fit(&xtr, &ytr)?;
    Ok(ProbeResult {
        accuracy: probe.accuracy(&xte, &yte),
        train_accuracy: probe.accuracy(&xtr, &ytr),
        n_train: train.len(),
        n_test: test.len(),
        n_classes: by_class.len(),
        chance: 1.0 / by_class.len() as f64,
    })
}
