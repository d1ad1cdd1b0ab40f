//! Linear-probe separability of safe vs unsafe documents in activation
//! space.
//!
//! A probe is a logistic-regression classifier over a single internal
//! activation vector per document. Features are standardized from train
//! statistics and the fit minimizes mean log-loss plus an L2 penalty of
//! `(1/2)·||w||²` (strength 1.0, bias unpenalized); penalizing the mean
//! rather than the sum makes the fit invariant to duplicating dataset rows.
//! Separability is reported as rank-based test AUC with ties counted half.

use crate::chart::{LineChart, Series};
use crate::corpus::{label_unsafe, Document, Vocab};
use crate::model::{ActivationRequest, LayerSelect, Model, ModelError};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Convergence threshold on the gradient norm of the logistic objective.
pub const GRAD_TOL: f64 = 1e-6;
/// Iteration cap for the logistic fit.
pub const MAX_ITERS: usize = 10_000;
/// L2 regularization strength applied to the mean log-loss.
pub const L2_STRENGTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ProbeError {
    /// Every feature dimension has zero variance; nothing to fit.
    #[error("degenerate features: all dimensions have zero variance")]
    DegenerateFeatures,
    /// AUC needs both classes present in the test split.
    #[error("test split contains a single class")]
    SingleClassTest,
    #[error("invalid probe dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which side of the experiment a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset's features came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    /// Layer label ("first", "middle", "final", or "layerN").
    pub layer: String,
    /// Explicit token position, or `None` for the last position.
    pub position: Option<usize>,
}

/// Feature matrix plus binary labels (1 = unsafe).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeDataset {
    /// Row-major `n × dim` matrix.
    pub features: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub split: Split,
    pub provenance: Provenance,
}

impl ProbeDataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// (safe, unsafe) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.n - pos, pos)
    }

    /// New dataset holding `rows` (in the given order) tagged with `split`.
    pub fn subset(&self, rows: &[usize], split: Split) -> ProbeDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        ProbeDataset {
            features,
            n: rows.len(),
            dim: self.dim,
            labels,
            split,
            provenance: self.provenance.clone(),
        }
    }

    fn validate(&self) -> Result<(), ProbeError> {
        if self.n == 0 || self.dim == 0 {
            return Err(ProbeError::InvalidDataset("empty dataset".into()));
        }
        if self.features.len() != self.n * self.dim || self.labels.len() != self.n {
            return Err(ProbeError::InvalidDataset("shape mismatch".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(ProbeError::InvalidDataset(format!("label {l} outside {{0,1}}")));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(ProbeError::InvalidDataset("non-finite feature".into()));
        }
        Ok(())
    }
}

/// Fitted logistic probe. Standardization statistics are baked in, so
/// [`Probe::score`] applies directly to raw feature rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Newton iterations taken by the fit.
    pub iterations: usize,
    /// Gradient norm at termination.
    pub grad_norm: f64,
}

impl Probe {
    /// Decision-function value (logit scale); monotone in P(unsafe).
    pub fn score(&self, row: &[f64]) -> f64 {
        let mut z = self.bias;
        for (j, w) in self.weights.iter().enumerate() {
            z += w * (row[j] - self.feature_mean[j]) / self.feature_std[j];
        }
        z
    }
}

/// Per-(checkpoint, layer) separability summary over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub checkpoint_id: String,
    pub curriculum_fraction: f64,
    pub layer: String,
    /// Test AUC per seed, in seed order.
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator).
    pub std: f64,
    /// `std / sqrt(n_seeds)`.
    pub stderr: f64,
}

/// One activation vector per document: the residual stream after `layer` at
/// `position` (`None` = last token), on the document's raw text. Labels come
/// from `label_unsafe` at `threshold`.
///
/// Text longer than the model context is truncated to the first
/// `context_len` tokens.
pub fn collect_features(
    model: &Model<f32>,
    documents: &[&Document],
    layer: LayerSelect,
    position: Option<usize>,
    threshold: f64,
) -> Result<ProbeDataset, ProbeError> {
    layer.resolve(&model.config)?;
    let vocab = Vocab::new();
    let dim = model.config.d_model;
    let rows: Vec<(Vec<f32>, u8)> = documents
        .par_iter()
        .map(|doc| {
            let mut ids = vocab.encode(&doc.text);
            ids.truncate(model.config.context_len);
            let act = model.activation(&ids, ActivationRequest { layer, position })?;
            Ok((act, u8::from(label_unsafe(doc, threshold))))
        })
        .collect::<Result<_, ProbeError>>()?;

    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (act, label) in rows {
        features.extend(act.into_iter().map(f64::from));
        labels.push(label);
    }
    Ok(ProbeDataset {
        n: labels.len(),
        dim,
        features,
        labels,
        split: Split::Train,
        provenance: Provenance {
            checkpoint_id: String::new(),
            layer: layer.label(),
            position,
        },
    })
}

/// Fit a logistic-regression probe on a balanced train split.
///
/// Damped Newton iterations on the strictly convex objective
/// `mean log-loss + (L2/2)·||w||²`, run until the gradient norm drops below
/// [`GRAD_TOL`] or [`MAX_ITERS`] is reached. Weights are initialized from a
/// seeded substream; the optimum is unique, so any seed converges to the
/// same probe.
pub fn train_probe(dataset: &ProbeDataset, seed: u64) -> Result<Probe, ProbeError> {
    dataset.validate()?;
    let (neg, pos) = dataset.class_counts();
    if neg != pos {
        return Err(ProbeError::InvalidDataset(format!(
            "train split must be balanced (got {neg} safe vs {pos} unsafe)"
        )));
    }
    if neg == 0 {
        return Err(ProbeError::InvalidDataset("train split has a single class".into()));
    }
    let (n, d) = (dataset.n, dataset.dim);

    // Standardization from train statistics; constant dimensions keep
    // std = 1 and contribute nothing after centering.
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(dataset.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let c = dataset.row(i)[j] - mean[j];
            var[j] += c * c;
        }
    }
    if var.iter().all(|&v| v == 0.0) {
        return Err(ProbeError::DegenerateFeatures);
    }
    let std: Vec<f64> =
        var.iter().map(|&v| if v == 0.0 { 1.0 } else { (v / n as f64).sqrt() }).collect();

    let mut x = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = dataset.row(i);
        for j in 0..d {
            x.push((row[j] - mean[j]) / std[j]);
        }
    }
    let y: Vec<f64> = dataset.labels.iter().map(|&l| f64::from(l)).collect();

    let mut rng = rng::substream(seed, "probe-init");
    let init = Normal::new(0.0, 1e-3).expect("valid normal");
    // Augmented parameter vector [w; b].
    let mut w: Vec<f64> = (0..=d)
        .map(|j| if j < d { init.sample(&mut rng) } else { 0.0 })
        .collect();

    let objective = |w: &[f64]| -> f64 {
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z: f64 = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            // Stable log(1 + exp(t)) with t = -y_signed * z.
            let t = if y[i] > 0.5 { -z } else { z };
            loss += t.max(0.0) + (-t.abs()).exp().ln_1p();
        }
        loss / n as f64 + 0.5 * L2_STRENGTH * w[..d].iter().map(|v| v * v).sum::<f64>()
    };

    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_ITERS {
        // Gradient and Hessian of the objective in augmented coordinates.
        let mut grad = vec![0.0f64; d + 1];
        let mut hess = vec![0.0f64; (d + 1) * (d + 1)];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z: f64 = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let p = 1.0 / (1.0 + (-z).exp());
            let r = (p - y[i]) / n as f64;
            let s = (p * (1.0 - p) / n as f64).max(1e-12);
            for j in 0..d {
                grad[j] += r * row[j];
            }
            grad[d] += r;
            for a in 0..d {
                let sa = s * row[a];
                for b in a..d {
                    hess[a * (d + 1) + b] += sa * row[b];
                }
                hess[a * (d + 1) + d] += sa;
            }
            hess[d * (d + 1) + d] += s;
        }
        for j in 0..d {
            grad[j] += L2_STRENGTH * w[j];
            hess[j * (d + 1) + j] += L2_STRENGTH;
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        // Mirror the upper triangle and solve H·step = grad.
        for a in 0..=d {
            for b in 0..a {
                hess[a * (d + 1) + b] = hess[b * (d + 1) + a];
            }
        }
        let step = cholesky_solve(&mut hess, &grad, d + 1)
            .ok_or(ProbeError::DegenerateFeatures)?;
        // Damping: halve the step until the objective decreases.
        let f0 = objective(&w);
        let mut scale = 1.0;
        let mut accepted = w.clone();
        for _ in 0..40 {
            let cand: Vec<f64> =
                w.iter().zip(&step).map(|(wi, si)| wi - scale * si).collect();
            if objective(&cand) <= f0 {
                accepted = cand;
                break;
            }
            scale *= 0.5;
        }
        w = accepted;
        iterations += 1;
    }

    Ok(Probe {
        weights: w[..d].to_vec(),
        bias: w[d],
        feature_mean: mean,
        feature_std: std,
        iterations,
        grad_norm,
    })
}

/// Solve `A·x = b` for symmetric positive-definite `A` (destroyed in place).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    // In-place lower-triangular factorization.
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    // Forward then back substitution.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Some(x)
}

/// Rank-based AUC of the probe's scores on a test split; tied scores count
/// half. Exact, and invariant to strictly monotone transforms of the score.
pub fn eval_auc(probe: &Probe, test: &ProbeDataset) -> Result<f64, ProbeError> {
    test.validate()?;
    let (neg, pos) = test.class_counts();
    if neg == 0 || pos == 0 {
        return Err(ProbeError::SingleClassTest);
    }
    let scores: Vec<f64> = (0..test.n).map(|i| probe.score(test.row(i))).collect();
    Ok(rank_auc(&scores, &test.labels, pos, neg))
}

fn rank_auc(scores: &[f64], labels: &[u8], pos: usize, neg: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    // Average ranks across tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j + 1) as f64) / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = pos as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * neg as f64)
}

/// One model entry in a separability comparison.
pub struct CheckpointEntry<'a> {
    pub id: String,
    pub curriculum_fraction: f64,
    pub model: &'a Model<f32>,
}

#[derive(Debug, Clone)]
pub struct SeparabilityOptions {
    pub layers: Vec<LayerSelect>,
    pub n_seeds: usize,
    /// Per-class train subset size (the paper-style 500/500 at full scale).
    pub train_per_class: usize,
    /// Safety-score threshold for labeling.
    pub threshold: f64,
    /// Probe position (`None` = last token).
    pub position: Option<usize>,
    pub base_seed: u64,
}

impl Default for SeparabilityOptions {
    fn default() -> Self {
        SeparabilityOptions {
            layers: vec![LayerSelect::First, LayerSelect::Middle, LayerSelect::Final],
            n_seeds: 5,
            train_per_class: 500,
            threshold: 0.5,
            position: None,
            base_seed: 0,
        }
    }
}

/// Per (checkpoint, layer): collect features once, then for each seed
/// resample a balanced train subset, fit a probe, and evaluate AUC on the
/// held-out documents (balanced by downsampling the majority class with the
/// same seed).
pub fn separability_experiment(
    checkpoints: &[CheckpointEntry],
    documents: &[&Document],
    opts: &SeparabilityOptions,
) -> Result<Vec<ProbeResult>, ProbeError> {
    if checkpoints.len() < 2 {
        return Err(ProbeError::InvalidDataset(
            "separability needs at least two checkpoints to compare".into(),
        ));
    }
    if opts.n_seeds == 0 || opts.train_per_class == 0 {
        return Err(ProbeError::InvalidDataset("n_seeds and train_per_class must be >= 1".into()));
    }
    let mut results = Vec::new();
    for entry in checkpoints {
        for &layer in &opts.layers {
            let mut dataset =
                collect_features(entry.model, documents, layer, opts.position, opts.threshold)?;
            dataset.provenance.checkpoint_id = entry.id.clone();
            let aucs = per_seed_aucs(&dataset, entry, layer, opts)?;
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            let std = if aucs.len() > 1 {
                (aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                    / (aucs.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            results.push(ProbeResult {
                checkpoint_id: entry.id.clone(),
                curriculum_fraction: entry.curriculum_fraction,
                layer: layer.label(),
                stderr: std / (aucs.len() as f64).sqrt(),
                mean,
                std,
                aucs,
            });
        }
    }
    Ok(results)
}

fn per_seed_aucs(
    dataset: &ProbeDataset,
    entry: &CheckpointEntry,
    layer: LayerSelect,
    opts: &SeparabilityOptions,
) -> Result<Vec<f64>, ProbeError> {
    let safe_rows: Vec<usize> = (0..dataset.n).filter(|&i| dataset.labels[i] == 0).collect();
    let unsafe_rows: Vec<usize> = (0..dataset.n).filter(|&i| dataset.labels[i] == 1).collect();
    let need = opts.train_per_class;
    if safe_rows.len() <= need || unsafe_rows.len() <= need {
        return Err(ProbeError::InvalidDataset(format!(
            "need more than {need} documents per class for a held-out test \
             (got {} safe, {} unsafe)",
            safe_rows.len(),
            unsafe_rows.len()
        )));
    }
    (0..opts.n_seeds)
        .map(|seed_idx| {
            let name =
                format!("probe:{}:{}:{seed_idx}", entry.id, layer.label());
            let mut rng = rng::substream(opts.base_seed, &name);
            let mut train_rows = Vec::with_capacity(2 * need);
            let mut test_pools: Vec<Vec<usize>> = Vec::with_capacity(2);
            for class_rows in [&safe_rows, &unsafe_rows] {
                let mut shuffled = class_rows.clone();
                shuffled.shuffle(&mut rng);
                train_rows.extend_from_slice(&shuffled[..need]);
                test_pools.push(shuffled[need..].to_vec());
            }
            // Balance the held-out pool by downsampling the majority class.
            let keep = test_pools.iter().map(Vec::len).min().expect("two pools");
            let mut test_rows = Vec::with_capacity(2 * keep);
            for pool in &mut test_pools {
                pool.shuffle(&mut rng);
                test_rows.extend_from_slice(&pool[..keep]);
            }
            let train = dataset.subset(&train_rows, Split::Train);
            let test = dataset.subset(&test_rows, Split::Test);
            let probe = train_probe(&train, rng.gen::<u64>())?;
            eval_auc(&probe, &test)
        })
        .collect()
}

/// CSV emission: one row per (checkpoint, layer, seed).
pub fn write_probe_csv(results: &[ProbeResult], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("checkpoint_id,curriculum_fraction,layer,seed,auc\n");
    for r in results {
        for (seed, auc) in r.aucs.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{},{seed},{auc:.6}\n",
                r.checkpoint_id, r.curriculum_fraction, r.layer
            ));
        }
    }
    std::fs::write(path, out)
}

/// SVG emission: mean AUC ± std vs intervention start (% of token budget),
/// one line per layer.
pub fn write_probe_svg(results: &[ProbeResult], path: &Path) -> std::io::Result<()> {
    let mut layers: Vec<String> = results.iter().map(|r| r.layer.clone()).collect();
    layers.dedup();
    layers.sort();
    layers.dedup();
    let series = layers
        .iter()
        .map(|layer| {
            let mut rows: Vec<&ProbeResult> =
                results.iter().filter(|r| &r.layer == layer).collect();
            rows.sort_by(|a, b| {
                a.curriculum_fraction
                    .partial_cmp(&b.curriculum_fraction)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            Series {
                name: layer.clone(),
                points: rows.iter().map(|r| (r.curriculum_fraction * 100.0, r.mean)).collect(),
                err: Some(rows.iter().map(|r| r.std).collect()),
            }
        })
        .collect();
    let mut percents: Vec<f64> =
        results.iter().map(|r| r.curriculum_fraction * 100.0).collect();
    percents.sort_by(f64::total_cmp);
    percents.dedup();
    let chart = LineChart {
        title: "Probe separability by intervention timing".into(),
        x_label: "intervention start (% of token budget)".into(),
        y_label: "test AUC".into(),
        series,
        y_range: Some((0.0, 1.0)),
        x_ticks: Some(percents),
    };
    let mut file = std::fs::File::create(path)?;
    file.write_all(chart.to_svg().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, Variant};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_probe(dim: usize) -> Probe {
        Probe {
            weights: vec![1.0; dim],
            bias: 0.0,
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
            iterations: 0,
            grad_norm: 0.0,
        }
    }

    fn dataset_1d(scores: &[f64], labels: &[u8], split: Split) -> ProbeDataset {
        ProbeDataset {
            features: scores.to_vec(),
            n: scores.len(),
            dim: 1,
            labels: labels.to_vec(),
            split,
            provenance: Provenance {
                checkpoint_id: "test".into(),
                layer: "final".into(),
                position: None,
            },
        }
    }

    #[test]
    fn auc_hand_example_is_three_quarters() {
        let ds = dataset_1d(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], Split::Test);
        let auc = eval_auc(&identity_probe(1), &ds).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_extremes_and_ties() {
        let perfect = dataset_1d(&[0.0, 0.2, 0.8, 1.0], &[0, 0, 1, 1], Split::Test);
        assert_eq!(eval_auc(&identity_probe(1), &perfect).unwrap(), 1.0);
        let inverted = dataset_1d(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1], Split::Test);
        assert_eq!(eval_auc(&identity_probe(1), &inverted).unwrap(), 0.0);
        let tied = dataset_1d(&[0.5, 0.5, 0.5, 0.5], &[0, 0, 1, 1], Split::Test);
        assert_eq!(eval_auc(&identity_probe(1), &tied).unwrap(), 0.5);
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms() {
        let scores = [0.3, -1.2, 0.7, 2.5, 0.7, -0.4];
        let labels = [0, 0, 1, 1, 0, 1];
        let base = dataset_1d(&scores, &labels, Split::Test);
        let scaled: Vec<f64> = scores.iter().map(|s| 3.0 * s + 10.0).collect();
        let moved = dataset_1d(&scaled, &labels, Split::Test);
        assert_eq!(
            eval_auc(&identity_probe(1), &base).unwrap(),
            eval_auc(&identity_probe(1), &moved).unwrap()
        );
    }

    #[test]
    fn single_class_test_is_rejected() {
        let ds = dataset_1d(&[0.1, 0.2], &[1, 1], Split::Test);
        assert!(matches!(eval_auc(&identity_probe(1), &ds), Err(ProbeError::SingleClassTest)));
    }

    #[test]
    fn separable_1d_fit_puts_the_boundary_near_zero() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            scores.push(-1.0 + 0.01 * i as f64);
            labels.push(0);
            scores.push(1.0 - 0.01 * i as f64);
            labels.push(1);
        }
        let train = dataset_1d(&scores, &labels, Split::Train);
        let probe = train_probe(&train, 7).unwrap();
        // Train accuracy 1.0 under the sign rule.
        for (i, &l) in labels.iter().enumerate() {
            let z = probe.score(train.row(i));
            assert_eq!(u8::from(z > 0.0), l, "row {i} misclassified (z = {z})");
        }
        // Decision boundary near 0 in raw feature space.
        assert!(probe.score(&[0.0]).abs() < 0.5);
        assert_eq!(eval_auc(&probe, &train).unwrap(), 1.0);
    }

    #[test]
    fn fit_converges_below_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (n_per, d) = (40, 6);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let label = u8::from(i % 2 == 1);
            for j in 0..d {
                let shift = if j == 0 && label == 1 { 1.5 } else { 0.0 };
                features.push(normal.sample(&mut rng) + shift);
            }
            labels.push(label);
        }
        let ds = ProbeDataset {
            features,
            n: 2 * n_per,
            dim: d,
            labels,
            split: Split::Train,
            provenance: Provenance {
                checkpoint_id: "c".into(),
                layer: "final".into(),
                position: None,
            },
        };
        let probe = train_probe(&ds, 0).unwrap();
        assert!(probe.grad_norm < GRAD_TOL, "grad_norm = {}", probe.grad_norm);
        assert!(probe.iterations < 50, "Newton should converge fast");
        // Any seed reaches the same unique optimum.
        let other = train_probe(&ds, 999).unwrap();
        for (a, b) in probe.weights.iter().zip(&other.weights) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permuted_labels_score_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (n_train, n_test, d) = (150, 100, 8);
        let make = |rng: &mut ChaCha8Rng, n: usize| -> ProbeDataset {
            let features: Vec<f64> = (0..n * d).map(|_| normal.sample(rng)).collect();
            let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 1)).collect();
            ProbeDataset {
                features,
                n,
                dim: d,
                labels,
                split: Split::Train,
                provenance: Provenance {
                    checkpoint_id: "c".into(),
                    layer: "final".into(),
                    position: None,
                },
            }
        };
        let mut aucs = Vec::new();
        for seed in 0..5 {
            let train = make(&mut rng, 2 * n_train);
            let mut test = make(&mut rng, 2 * n_test);
            test.split = Split::Test;
            let probe = train_probe(&train, seed).unwrap();
            aucs.push(eval_auc(&probe, &test).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean AUC {mean} strays from chance");
    }

    #[test]
    fn duplicated_rows_leave_the_decision_function_unchanged() {
        let scores = [-1.1, -0.6, -0.2, 0.3, 0.7, 1.2];
        let labels = [0, 0, 0, 1, 1, 1];
        let once = dataset_1d(&scores, &labels, Split::Train);
        let twice = dataset_1d(
            &[scores.as_slice(), scores.as_slice()].concat(),
            &[labels.as_slice(), labels.as_slice()].concat(),
            Split::Train,
        );
        let p1 = train_probe(&once, 3).unwrap();
        let p2 = train_probe(&twice, 3).unwrap();
        for probe_point in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            assert!(
                (p1.score(&[probe_point]) - p2.score(&[probe_point])).abs() < 1e-5,
                "scores diverge at {probe_point}"
            );
        }
    }

    #[test]
    fn degenerate_and_unbalanced_datasets_are_rejected() {
        let constant = dataset_1d(&[2.0, 2.0, 2.0, 2.0], &[0, 0, 1, 1], Split::Train);
        assert!(matches!(train_probe(&constant, 0), Err(ProbeError::DegenerateFeatures)));
        let unbalanced = dataset_1d(&[0.0, 1.0, 2.0], &[0, 1, 1], Split::Train);
        assert!(matches!(train_probe(&unbalanced, 0), Err(ProbeError::InvalidDataset(_))));
    }

    fn doc(id: &str, text: &str, score: f64) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            safety_score: score,
            source: Source::Web,
            variant: Variant::Raw,
            response: None,
        }
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        Model::init(ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 24,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn collect_features_shapes_and_determinism() {
        let model = tiny_model(5);
        let docs = [
            doc("a", "safe words", 0.1),
            doc("b", "more safe words", 0.2),
            doc("c", "bad words", 0.9),
        ];
        let refs: Vec<&Document> = docs.iter().collect();
        let ds1 = collect_features(&model, &refs, LayerSelect::Final, None, 0.5).unwrap();
        let ds2 = collect_features(&model, &refs, LayerSelect::Final, None, 0.5).unwrap();
        assert_eq!(ds1, ds2);
        assert_eq!(ds1.n, 3);
        assert_eq!(ds1.dim, 16);
        assert_eq!(ds1.labels, vec![0, 0, 1]);
        assert_eq!(ds1.provenance.layer, "final");
        // Long documents truncate rather than error.
        let long = [doc("d", &"x".repeat(500), 0.1)];
        let refs: Vec<&Document> = long.iter().collect();
        assert!(collect_features(&model, &refs, LayerSelect::Middle, None, 0.5).is_ok());
    }

    #[test]
    fn experiment_emits_stats_and_stable_reports() {
        let m0 = tiny_model(1);
        let m1 = tiny_model(2);
        let mut docs = Vec::new();
        for i in 0..16 {
            docs.push(doc(&format!("s{i}"), &format!("gentle text {i}"), 0.1));
            docs.push(doc(&format!("u{i}"), &format!("nasty text {i}"), 0.9));
        }
        let refs: Vec<&Document> = docs.iter().collect();
        let checkpoints = [
            CheckpointEntry { id: "frac0.0".into(), curriculum_fraction: 0.0, model: &m0 },
            CheckpointEntry { id: "frac1.0".into(), curriculum_fraction: 1.0, model: &m1 },
        ];
        let opts = SeparabilityOptions {
            layers: vec![LayerSelect::First, LayerSelect::Final],
            n_seeds: 2,
            train_per_class: 8,
            threshold: 0.5,
            position: None,
            base_seed: 42,
        };
        let results = separability_experiment(&checkpoints, &refs, &opts).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert_eq!(r.aucs.len(), 2);
            assert!(r.aucs.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!((r.stderr - r.std / (2.0f64).sqrt()).abs() < 1e-12);
        }
        // Deterministic end to end.
        let again = separability_experiment(&checkpoints, &refs, &opts).unwrap();
        assert_eq!(
            serde_json::to_vec(&results).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("probe.csv");
        let svg_path = dir.path().join("probe.svg");
        write_probe_csv(&results, &csv_path).unwrap();
        write_probe_svg(&results, &svg_path).unwrap();
        let csv1 = std::fs::read(&csv_path).unwrap();
        let svg1 = std::fs::read(&svg_path).unwrap();
        write_probe_csv(&results, &csv_path).unwrap();
        write_probe_svg(&results, &svg_path).unwrap();
        assert_eq!(csv1, std::fs::read(&csv_path).unwrap());
        assert_eq!(svg1, std::fs::read(&svg_path).unwrap());
        let text = String::from_utf8(csv1).unwrap();
        assert!(text.starts_with("checkpoint_id,curriculum_fraction,layer,seed,auc\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn experiment_requires_two_checkpoints_and_spare_documents() {
        let m = tiny_model(3);
        let docs = [doc("a", "t", 0.1), doc("b", "u", 0.9)];
        let refs: Vec<&Document> = docs.iter().collect();
        let one = [CheckpointEntry { id: "only".into(), curriculum_fraction: 0.0, model: &m }];
        assert!(separability_experiment(&one, &refs, &SeparabilityOptions::default()).is_err());
        let two = [
            CheckpointEntry { id: "a".into(), curriculum_fraction: 0.0, model: &m },
            CheckpointEntry { id: "b".into(), curriculum_fraction: 1.0, model: &m },
        ];
        // 1 document per class cannot give both a train subset and a test set.
        let opts = SeparabilityOptions { train_per_class: 1, ..SeparabilityOptions::default() };
        assert!(separability_experiment(&two, &refs, &opts).is_err());
    }
}
