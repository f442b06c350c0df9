//! Evaluation tooling: multi-label metrics, ablation sweeps, 2-D feature
//! projections for inspection, and modality-to-label attribution.
//!
//! Metrics aggregate integer counts first and divide once, so an independent
//! reimplementation over the same counts reproduces them bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Corpus, Modality, Split};
use crate::error::{Error, Result};
use crate::nn::{context_rng, standard_normal};
use crate::trainer::{Model, ModelVariant, OptimizerMode, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub zeta: usize,
    /// Mean per-sample Jaccard overlap; an all-negative sample predicted
    /// all-negative counts as 1.
    pub acc_jaccard: f64,
    /// Exact-match rate.
    pub acc_subset: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_label: Vec<LabelStats>,
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn compute_metrics(pred: &Array2<u8>, gold: &Array2<u8>) -> Result<MetricsReport> {
    if pred.dim() != gold.dim() {
        return Err(Error::data(format!(
            "prediction shape {:?} does not match gold shape {:?}",
            pred.dim(),
            gold.dim()
        )));
    }
    let (n, zeta) = pred.dim();
    if n == 0 || zeta == 0 {
        return Err(Error::data("metrics need at least one sample and one label"));
    }
    if pred.iter().chain(gold.iter()).any(|&v| v > 1) {
        return Err(Error::data("label matrices must be binary"));
    }

    let mut label_tp = vec![0u64; zeta];
    let mut label_fp = vec![0u64; zeta];
    let mut label_fn = vec![0u64; zeta];
    let mut jaccard_sum = 0.0;
    let mut exact = 0u64;
    for i in 0..n {
        let mut inter = 0u64;
        let mut union = 0u64;
        let mut all_match = true;
        for j in 0..zeta {
            match (pred[(i, j)], gold[(i, j)]) {
                (1, 1) => {
                    label_tp[j] += 1;
                    inter += 1;
                    union += 1;
                }
                (1, 0) => {
                    label_fp[j] += 1;
                    union += 1;
                    all_match = false;
                }
                (0, 1) => {
                    label_fn[j] += 1;
                    union += 1;
                    all_match = false;
                }
                _ => {}
            }
        }
        jaccard_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        if all_match {
            exact += 1;
        }
    }

    let tp: u64 = label_tp.iter().sum();
    let fp: u64 = label_fp.iter().sum();
    let fn_: u64 = label_fn.iter().sum();
    let per_label: Vec<LabelStats> = (0..zeta)
        .map(|j| LabelStats {
            tp: label_tp[j],
            fp: label_fp[j],
            fn_: label_fn[j],
            support: label_tp[j] + label_fn[j],
            f1: f1_from_counts(label_tp[j], label_fp[j], label_fn[j]),
        })
        .collect();
    let macro_f1 = per_label.iter().map(|l| l.f1).sum::<f64>() / zeta as f64;
    let support_total: u64 = per_label.iter().map(|l| l.support).sum();
    let weighted_f1 = if support_total == 0 {
        0.0
    } else {
        per_label
            .iter()
            .map(|l| l.support as f64 * l.f1)
            .sum::<f64>()
            / support_total as f64
    };
    Ok(MetricsReport {
        n_samples: n,
        zeta,
        acc_jaccard: jaccard_sum / n as f64,
        acc_subset: exact as f64 / n as f64,
        micro_precision: if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        },
        micro_recall: if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        },
        micro_f1: f1_from_counts(tp, fp, fn_),
        macro_f1,
        weighted_f1,
        per_label,
    })
}

fn split_batches(corpus: &Corpus, split: Split, batch_size: usize) -> Vec<Batch> {
    corpus
        .split_indices(split)
        .chunks(batch_size.max(1))
        .map(|chunk| Batch {
            samples: chunk.iter().map(|&i| corpus.samples[i].clone()).collect(),
            dims: corpus.dims.clone(),
            seq_lens: corpus.seq_lens.clone(),
            zeta: corpus.zeta,
        })
        .collect()
}

/// Binary predictions and gold labels over a split, in split order.
pub fn collect_predictions(
    model: &Model,
    corpus: &Corpus,
    split: Split,
) -> Result<(Array2<u8>, Array2<u8>, Vec<String>)> {
    let indices = corpus.split_indices(split);
    if indices.is_empty() {
        return Err(Error::data(format!("split {split:?} is empty")));
    }
    let zeta = corpus.zeta;
    let mut pred = Array2::zeros((indices.len(), zeta));
    let mut gold = Array2::zeros((indices.len(), zeta));
    let mut ids = Vec::with_capacity(indices.len());
    let mut row = 0usize;
    for batch in split_batches(corpus, split, model.cfg.batch_size) {
        let out = model.predict(&batch)?;
        for (b, sample) in batch.samples.iter().enumerate() {
            for j in 0..zeta {
                pred[(row, j)] = out.binary[(b, j)];
                gold[(row, j)] = sample.labels[j];
            }
            ids.push(sample.id.clone());
            row += 1;
        }
    }
    Ok((pred, gold, ids))
}

pub fn evaluate_model(model: &Model, corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    let (pred, gold, _) = collect_predictions(model, corpus, split)?;
    compute_metrics(&pred, &gold)
}

/// Named structural variants accepted by the ablation runner.
pub const VARIANT_NAMES: [&str; 11] = [
    "full",
    "no_Lsc",
    "no_C",
    "no_S",
    "no_Lscl",
    "no_enc_dec",
    "no_Xbeta",
    "no_Xgamma",
    "no_Xbeta_Xgamma",
    "fusion_order_A",
    "fusion_order_B",
];

pub fn parse_variant(name: &str) -> Result<ModelVariant> {
    let mut v = ModelVariant::default();
    match name {
        "full" => {}
        "no_Lsc" => v.no_lsc = true,
        "no_C" => v.no_c = true,
        "no_S" => v.no_s = true,
        "no_Lscl" => v.no_lscl = true,
        "no_enc_dec" => v.no_enc_dec = true,
        "no_Xbeta" => v.no_xbeta = true,
        "no_Xgamma" => v.no_xgamma = true,
        "no_Xbeta_Xgamma" => {
            v.no_xbeta = true;
            v.no_xgamma = true;
        }
        "fusion_order_A" => {
            v.fusion = crate::corpus::FusionOrder([
                Modality::Textual,
                Modality::Acoustic,
                Modality::Visual,
            ])
        }
        "fusion_order_B" => {
            v.fusion = crate::corpus::FusionOrder([
                Modality::Acoustic,
                Modality::Visual,
                Modality::Textual,
            ])
        }
        other => {
            return Err(Error::config(format!(
                "unknown ablation variant {other:?}; valid names: {}",
                VARIANT_NAMES.join(", ")
            )))
        }
    }
    v.validate()?;
    Ok(v)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationEntry {
    pub variant: String,
    pub runs: Vec<MetricsReport>,
    pub mean_micro_f1: f64,
    pub std_micro_f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: usize,
    pub entries: Vec<AblationEntry>,
}

/// Retrain each named variant from scratch over `seeds` seeds (master seed
/// offset by the seed index) and evaluate on the test split. An empty name
/// list runs the full model alone.
pub fn run_ablation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    names: &[String],
    seeds: usize,
) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let effective: Vec<String> = if names.is_empty() {
        vec!["full".to_string()]
    } else {
        names.to_vec()
    };
    let mut entries = Vec::new();
    for name in &effective {
        let variant = parse_variant(name)?;
        let mut runs = Vec::new();
        for s in 0..seeds {
            let run_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(s as u64),
                ..cfg.clone()
            };
            let run = Trainer::fit_variant(corpus, &run_cfg, &variant, OptimizerMode::Single)?;
            runs.push(evaluate_model(&run.trainer.model, corpus, Split::Test)?);
        }
        let scores: Vec<f64> = runs.iter().map(|r| r.micro_f1).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std = if scores.len() < 2 {
            0.0
        } else {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64)
                .sqrt()
        };
        entries.push(AblationEntry {
            variant: name.clone(),
            runs,
            mean_micro_f1: mean,
            std_micro_f1: std,
        });
    }
    Ok(AblationReport {
        seeds,
        entries,
    })
}

/// Which side of the shared/private split to inspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepresentationFamily {
    Commonality,
    Specificity,
}

/// Accuracy of the three-way modality discriminator on one representation
/// family over a split. Near chance (1/3) on commonality and high on
/// specificity is the trained-adversary signature.
pub fn discriminator_accuracy(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    family: RepresentationFamily,
) -> Result<f64> {
    use crate::autodiff::Tape;
    use crate::embedding::Phase;

    let mut correct = 0u64;
    let mut total = 0u64;
    for batch in split_batches(corpus, split, model.cfg.batch_size) {
        let tape = Tape::new();
        let feats = model.forward_features(&tape, &batch, Phase::Eval, 0)?;
        for m in Modality::CONTENT {
            let rep = match family {
                RepresentationFamily::Commonality => feats.commonality[&m],
                RepresentationFamily::Specificity => feats.specificity[&m],
            };
            let logits = model
                .adversary
                .discriminator_logits(&model.store, &tape, rep)
                .value();
            let target = m.content_index().expect("content modality");
            for r in 0..logits.nrows() {
                let mut best = 0usize;
                for k in 1..logits.ncols() {
                    if logits[(r, k)] > logits[(r, best)] {
                        best = k;
                    }
                }
                if best == target {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::data(format!("split {split:?} is empty")));
    }
    Ok(correct as f64 / total as f64)
}

/// Which feature family a projection plots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Commonality vs specificity vectors per modality.
    SpecCommon,
    /// The reconstruction chain: pooled, decoded, and both generations.
    Recon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPoint {
    pub id: String,
    pub modality: Modality,
    pub component: String,
    /// Gold labels as a compact bit string, most significant label first.
    pub labels: String,
    pub x: f64,
    pub y: f64,
}

/// Beyond this the exact pairwise embedding becomes unreasonable.
pub const PROJECTION_POINT_CAP: usize = 8000;

fn label_signature(labels: &[u8]) -> String {
    labels.iter().map(|&l| char::from(b'0' + l)).collect()
}

/// First two principal components of the row set. Eigenvector signs follow a
/// fixed convention (largest-magnitude entry positive) so repeated calls are
/// bit-identical.
pub fn pca_2d(x: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::data("cannot project an empty matrix"));
    }
    let mut centered = x.clone();
    for j in 0..d {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|v| v - mean);
    }
    if n == 1 {
        return Ok(Array2::zeros((1, 2)));
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centered[(i, a)] * centered[(i, b)];
            }
            acc /= (n - 1) as f64;
            cov[(a, b)] = acc;
            cov[(b, a)] = acc;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("symmetric eigenvalues are finite")
            .then(a.cmp(&b))
    });
    let mut out = Array2::zeros((n, 2));
    for (axis, &idx) in order.iter().take(2).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let lead = (0..d)
            .max_by(|&a, &b| {
                col[a]
                    .abs()
                    .partial_cmp(&col[b].abs())
                    .expect("finite")
                    .then(b.cmp(&a))
            })
            .expect("d > 0");
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[(i, j)] * col[j] * sign;
            }
            out[(i, axis)] = acc;
        }
    }
    Ok(out)
}

/// Exact pairwise t-SNE to two dimensions. Deterministic for a fixed seed;
/// refuses inputs past [`PROJECTION_POINT_CAP`].
pub fn tsne_2d(x: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::data("cannot project an empty matrix"));
    }
    if n > PROJECTION_POINT_CAP {
        return Err(Error::data(format!(
            "{n} points exceed the exact-embedding cap of {PROJECTION_POINT_CAP}; \
             rerun with --pca"
        )));
    }
    if n == 1 {
        return Ok(Array2::zeros((1, 2)));
    }

    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = x[(i, k)] - x[(j, k)];
                acc += diff * diff;
            }
            d2[(i, j)] = acc;
            d2[(j, i)] = acc;
        }
    }

    // Per-row bandwidths found by bisection on the conditional entropy.
    let perplexity = 30.0_f64.min(((n - 1) as f64 / 3.0).max(1.0));
    let target_h = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0_f64, f64::INFINITY, 1.0_f64);
        for _ in 0..60 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[(i, j)]).exp();
                sum += w;
                weighted += w * d2[(i, j)];
            }
            // H = ln(sum) + beta * E[d2]
            let h = if sum > 0.0 {
                sum.ln() + beta * weighted / sum
            } else {
                0.0
            };
            if (h - target_h).abs() < 1e-5 {
                break;
            }
            if h > target_h {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[(i, j)] = (-beta * d2[(i, j)]).exp();
                sum += p[(i, j)];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }
    // Symmetrize.
    let mut pij = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            pij[(i, j)] = ((p[(i, j)] + p[(j, i)]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = context_rng(seed, "tsne-init");
    let mut y = Array2::from_shape_fn((n, 2), |_| 1e-4 * standard_normal(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let lr = 100.0;
    for iter in 0..300 {
        let exaggeration = if iter < 100 { 12.0 } else { 1.0 };
        let momentum = if iter < 80 { 0.5 } else { 0.8 };
        let mut q = Array2::zeros((n, n));
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[(i, 0)] - y[(j, 0)];
                let dy = y[(i, 1)] - y[(j, 1)];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[(i, j)] = w;
                q[(j, i)] = w;
                qsum += 2.0 * w;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[(i, j)];
                let coeff = 4.0 * (exaggeration * pij[(i, j)] - w / qsum) * w;
                grad[(i, 0)] += coeff * (y[(i, 0)] - y[(j, 0)]);
                grad[(i, 1)] += coeff * (y[(i, 1)] - y[(j, 1)]);
            }
        }
        for i in 0..n {
            for a in 0..2 {
                velocity[(i, a)] = momentum * velocity[(i, a)] - lr * grad[(i, a)];
                y[(i, a)] += velocity[(i, a)];
            }
        }
        for a in 0..2 {
            let mean = y.column(a).sum() / n as f64;
            y.column_mut(a).mapv_inplace(|v| v - mean);
        }
    }
    Ok(y)
}

/// Gather the requested feature family over a split and embed it in 2-D.
pub fn project_features(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    kind: ProjectionKind,
    method: ProjectionMethod,
    seed: u64,
) -> Result<Vec<ProjectionPoint>> {
    use crate::autodiff::Tape;
    use crate::embedding::Phase;

    let mut meta: Vec<(String, Modality, String, String)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for batch in split_batches(corpus, split, model.cfg.batch_size) {
        let tape = Tape::new();
        let feats = model.forward_features(&tape, &batch, Phase::Eval, 0)?;
        let families: Vec<(&str, &BTreeMap<Modality, crate::autodiff::Var<'_>>)> = match kind {
            ProjectionKind::SpecCommon => vec![
                ("common", &feats.commonality),
                ("specific", &feats.specificity),
            ],
            ProjectionKind::Recon => vec![
                ("alpha", &feats.alpha),
                ("decoded", &feats.decoded),
                ("beta", &feats.beta),
                ("gamma", &feats.gamma),
            ],
        };
        for (component, family) in families {
            for m in Modality::CONTENT {
                let value = family[&m].value();
                for (b, sample) in batch.samples.iter().enumerate() {
                    meta.push((
                        sample.id.clone(),
                        m,
                        component.to_string(),
                        label_signature(&sample.labels),
                    ));
                    rows.push(value.row(b).to_vec());
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::data(format!("split {split:?} is empty")));
    }
    if rows.len() > PROJECTION_POINT_CAP && method == ProjectionMethod::Tsne {
        return Err(Error::data(format!(
            "{} points exceed the exact-embedding cap of {PROJECTION_POINT_CAP}; \
             rerun with --pca",
            rows.len()
        )));
    }
    let width = rows[0].len();
    let matrix = Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]);
    let embedded = match method {
        ProjectionMethod::Pca => pca_2d(&matrix)?,
        ProjectionMethod::Tsne => tsne_2d(&matrix, seed)?,
    };
    Ok(meta
        .into_iter()
        .enumerate()
        .map(|(i, (id, modality, component, labels))| ProjectionPoint {
            id,
            modality,
            component,
            labels,
            x: embedded[(i, 0)],
            y: embedded[(i, 1)],
        })
        .collect())
}

pub fn write_projection_csv(points: &[ProjectionPoint], path: &Path) -> Result<()> {
    let mut out = String::from("id,modality,component,labels,x,y\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.id, p.modality, p.component, p.labels, p.x, p.y
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean pairwise distance between per-modality centroids of one component.
/// Separated modality clusters push this up; collapsed ones pull it to 0.
pub fn centroid_spread(points: &[ProjectionPoint], component: &str) -> f64 {
    let mut centroids = Vec::new();
    for m in Modality::CONTENT {
        let members: Vec<&ProjectionPoint> = points
            .iter()
            .filter(|p| p.modality == m && p.component == component)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        centroids.push((
            members.iter().map(|p| p.x).sum::<f64>() / n,
            members.iter().map(|p| p.y).sum::<f64>() / n,
        ));
    }
    if centroids.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            total += ((centroids[i].0 - centroids[j].0).powi(2)
                + (centroids[i].1 - centroids[j].1).powi(2))
            .sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Additive smoothing applied before row normalization. Keeps rows whose
/// drops are measurement noise close to uniform while leaving the argmax of
/// any real dependency untouched; a row of exact zeros lands on 1/3 each.
const CORRELATION_SMOOTHING: f64 = 0.1;

/// How much each content modality carries each label: entry (j, m) is the
/// drop in label-j F1 when modality m is hidden from the whole split at
/// inference, clamped at zero, smoothed, and row-normalized to a
/// distribution.
pub fn modality_label_correlation(
    model: &Model,
    corpus: &Corpus,
    split: Split,
) -> Result<Array2<f64>> {
    let base = evaluate_model(model, corpus, split)?;
    let zeta = corpus.zeta;
    let mut drops = Array2::zeros((zeta, Modality::CONTENT.len()));
    for (col, &m) in Modality::CONTENT.iter().enumerate() {
        let mut masked = corpus.clone();
        for sample in &mut masked.samples {
            let keys: Vec<_> = sample
                .features
                .keys()
                .filter(|k| k.modality == m)
                .copied()
                .collect();
            for key in keys {
                sample.features.remove(&key);
                sample.presence.insert(key, false);
            }
        }
        let hidden = evaluate_model(model, &masked, split)?;
        for j in 0..zeta {
            let drop = base.per_label[j].f1 - hidden.per_label[j].f1;
            drops[(j, col)] = drop.max(0.0);
        }
    }
    let cols = Modality::CONTENT.len();
    for j in 0..zeta {
        let total: f64 = (0..cols).map(|c| drops[(j, c)]).sum();
        let denom = total + CORRELATION_SMOOTHING * cols as f64;
        for c in 0..cols {
            drops[(j, c)] = (drops[(j, c)] + CORRELATION_SMOOTHING) / denom;
        }
    }
    Ok(drops)
}

pub fn write_correlation_csv(corr: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for m in Modality::CONTENT {
        out.push(',');
        out.push_str(m.as_str());
    }
    out.push('\n');
    for j in 0..corr.nrows() {
        out.push_str(&j.to_string());
        for c in 0..corr.ncols() {
            out.push(',');
            out.push_str(&corr[(j, c)].to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen::{generate_synthetic, GenConfig};
    use crate::trainer::Geometry;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn hand_counted_metrics() {
        let gold = array![[1u8, 1, 0], [0, 0, 1]];
        let pred = array![[1u8, 1, 1], [0, 0, 0]];
        let r = compute_metrics(&pred, &gold).unwrap();
        assert_eq!(r.n_samples, 2);
        assert_eq!(r.zeta, 3);
        // tp=2 fp=1 fn=1; micro P = R = F1 = 2/3.
        assert!((r.micro_precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.micro_recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        // Jaccard: 2/3 and 0; subset matches: none.
        assert!((r.acc_jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.acc_subset, 0.0);
        // Per-label F1: 1, 1, 0.
        assert_eq!(r.per_label[0].f1, 1.0);
        assert_eq!(r.per_label[1].f1, 1.0);
        assert_eq!(r.per_label[2].f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.weighted_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_label[2].tp, 0);
        assert_eq!(r.per_label[2].fp, 1);
        assert_eq!(r.per_label[2].fn_, 1);
        assert_eq!(r.per_label[2].support, 1);
    }

    #[test]
    fn empty_rows_count_as_perfect_matches() {
        let gold = array![[0u8, 0], [0, 0]];
        let pred = array![[0u8, 0], [0, 0]];
        let r = compute_metrics(&pred, &gold).unwrap();
        assert_eq!(r.acc_jaccard, 1.0);
        assert_eq!(r.acc_subset, 1.0);
        assert_eq!(r.micro_precision, 0.0);
        assert_eq!(r.micro_recall, 0.0);
        assert_eq!(r.micro_f1, 0.0);
        assert_eq!(r.weighted_f1, 0.0);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let a = array![[0u8, 1]];
        let b = array![[0u8, 1], [1, 0]];
        assert!(matches!(compute_metrics(&a, &b), Err(Error::Data(_))));
        let c = array![[2u8, 0]];
        let d = array![[1u8, 0]];
        assert!(matches!(compute_metrics(&c, &d), Err(Error::Data(_))));
    }

    /// Straight-line reimplementation: per-label loops, no shared code paths
    /// with the production metrics beyond the formulas themselves.
    fn oracle(pred: &Array2<u8>, gold: &Array2<u8>) -> MetricsReport {
        let (n, zeta) = pred.dim();
        let mut per_label = Vec::new();
        for j in 0..zeta {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for i in 0..n {
                if pred[(i, j)] == 1 && gold[(i, j)] == 1 {
                    tp += 1;
                }
                if pred[(i, j)] == 1 && gold[(i, j)] == 0 {
                    fp += 1;
                }
                if pred[(i, j)] == 0 && gold[(i, j)] == 1 {
                    fn_ += 1;
                }
            }
            let f1 = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            per_label.push(LabelStats {
                tp,
                fp,
                fn_,
                support: tp + fn_,
                f1,
            });
        }
        let tp: u64 = per_label.iter().map(|l| l.tp).sum();
        let fp: u64 = per_label.iter().map(|l| l.fp).sum();
        let fn_: u64 = per_label.iter().map(|l| l.fn_).sum();
        let mut jac = 0.0;
        let mut exact = 0u64;
        for i in 0..n {
            let inter = (0..zeta)
                .filter(|&j| pred[(i, j)] == 1 && gold[(i, j)] == 1)
                .count() as u64;
            let union = (0..zeta)
                .filter(|&j| pred[(i, j)] == 1 || gold[(i, j)] == 1)
                .count() as u64;
            jac += if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            if (0..zeta).all(|j| pred[(i, j)] == gold[(i, j)]) {
                exact += 1;
            }
        }
        let support: u64 = per_label.iter().map(|l| l.support).sum();
        MetricsReport {
            n_samples: n,
            zeta,
            acc_jaccard: jac / n as f64,
            acc_subset: exact as f64 / n as f64,
            micro_precision: if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            },
            micro_recall: if tp + fn_ == 0 {
                0.0
            } else {
                tp as f64 / (tp + fn_) as f64
            },
            micro_f1: if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            },
            macro_f1: per_label.iter().map(|l| l.f1).sum::<f64>() / zeta as f64,
            weighted_f1: if support == 0 {
                0.0
            } else {
                per_label.iter().map(|l| l.support as f64 * l.f1).sum::<f64>() / support as f64
            },
            per_label,
        }
    }

    #[test]
    fn metrics_match_oracle_exactly_on_random_matrices() {
        let mut rng = context_rng(5, "metrics-oracle");
        for _ in 0..300 {
            let n = rng.random_range(1..7);
            let zeta = rng.random_range(1..6);
            let pred = Array2::from_shape_fn((n, zeta), |_| rng.random_range(0..2u8));
            let gold = Array2::from_shape_fn((n, zeta), |_| rng.random_range(0..2u8));
            let got = compute_metrics(&pred, &gold).unwrap();
            let want = oracle(&pred, &gold);
            assert_eq!(got, want);
        }
    }

    fn quick_model(corpus: &Corpus, epochs: usize) -> Model {
        let cfg = TrainConfig {
            epochs,
            batch_size: 8,
            ..Default::default()
        };
        let run = Trainer::fit(corpus, &cfg).unwrap();
        run.trainer.model
    }

    #[test]
    fn discriminator_accuracy_is_a_deterministic_rate() {
        let corpus = generate_synthetic(&GenConfig::desk_default(24, 22)).unwrap();
        let model = quick_model(&corpus, 0);
        for family in [
            RepresentationFamily::Commonality,
            RepresentationFamily::Specificity,
        ] {
            let acc = discriminator_accuracy(&model, &corpus, Split::Test, family).unwrap();
            assert!((0.0..=1.0).contains(&acc), "{family:?} accuracy {acc}");
            let again = discriminator_accuracy(&model, &corpus, Split::Test, family).unwrap();
            assert_eq!(acc, again);
        }

        let mut empty = corpus.clone();
        empty.split_tags.retain(|_, s| *s != Split::Val);
        let err = discriminator_accuracy(
            &model,
            &empty,
            Split::Val,
            RepresentationFamily::Commonality,
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn predictions_line_up_with_split_order() {
        let corpus = generate_synthetic(&GenConfig::desk_default(30, 21)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let geometry = Geometry::of_corpus(&corpus).unwrap();
        let model = Model::new(&cfg, &ModelVariant::default(), &geometry).unwrap();
        let (pred, gold, ids) = collect_predictions(&model, &corpus, Split::Test).unwrap();
        let indices = corpus.split_indices(Split::Test);
        assert_eq!(pred.nrows(), indices.len());
        assert_eq!(gold.nrows(), indices.len());
        for (row, &i) in indices.iter().enumerate() {
            assert_eq!(ids[row], corpus.samples[i].id);
            for j in 0..corpus.zeta {
                assert_eq!(gold[(row, j)], corpus.samples[i].labels[j]);
            }
        }
    }

    #[test]
    fn variant_names_parse_and_unknowns_fail() {
        for name in VARIANT_NAMES {
            parse_variant(name).unwrap();
        }
        let v = parse_variant("no_Xbeta_Xgamma").unwrap();
        assert!(v.no_xbeta && v.no_xgamma);
        let a = parse_variant("fusion_order_A").unwrap();
        assert_eq!(
            a.fusion.0,
            [Modality::Textual, Modality::Acoustic, Modality::Visual]
        );
        match parse_variant("no_everything") {
            Err(Error::Config(msg)) => assert!(msg.contains("no_everything")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn ablation_runs_each_variant_per_seed() {
        let corpus = generate_synthetic(&GenConfig::desk_default(24, 22)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let names = vec!["full".to_string(), "no_C".to_string()];
        let report = run_ablation(&corpus, &cfg, &names, 2).unwrap();
        assert_eq!(report.entries.len(), 2);
        for entry in &report.entries {
            assert_eq!(entry.runs.len(), 2);
            assert!(entry.mean_micro_f1.is_finite());
            assert!(entry.std_micro_f1 >= 0.0);
        }
        // Empty list means the full model alone.
        let solo = run_ablation(&corpus, &cfg, &[], 1).unwrap();
        assert_eq!(solo.entries.len(), 1);
        assert_eq!(solo.entries[0].variant, "full");
    }

    #[test]
    fn pca_finds_the_dominant_axis() {
        // Points spread along (1, 1, 0) with slight noise off-axis.
        let mut rng = context_rng(7, "pca-test");
        let n = 40;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| {
            let t = (i as f64 / n as f64 - 0.5) * 10.0;
            match j {
                0 | 1 => t + 0.01 * rng.random_range(-1.0..1.0),
                _ => 0.01 * rng.random_range(-1.0..1.0),
            }
        });
        let proj = pca_2d(&x).unwrap();
        // First axis variance dominates the second by orders of magnitude.
        let var = |col: usize| {
            let mean = proj.column(col).sum() / n as f64;
            proj.column(col).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        };
        assert!(var(0) > 100.0 * var(1), "{} vs {}", var(0), var(1));
        // Bit-identical on repetition.
        assert_eq!(proj, pca_2d(&x).unwrap());
    }

    #[test]
    fn pca_sign_convention_is_stable_under_row_duplication() {
        let x = array![[1.0, 0.0], [2.0, 0.1], [3.0, -0.1], [4.0, 0.0]];
        let a = pca_2d(&x).unwrap();
        // Same data twice: same axes, so the first half projects identically.
        let doubled = ndarray::concatenate![ndarray::Axis(0), x, x];
        let b = pca_2d(&doubled).unwrap();
        for i in 0..x.nrows() {
            assert!((a[(i, 0)] - b[(i, 0)]).abs() < 1e-9);
        }
    }

    #[test]
    fn tsne_is_deterministic_and_separates_blobs() {
        let mut rng = context_rng(9, "tsne-test");
        let n = 30;
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            let center = if i < n / 2 { -8.0 } else { 8.0 };
            if j == 0 {
                center + 0.3 * standard_normal(&mut rng)
            } else {
                0.3 * standard_normal(&mut rng)
            }
        });
        let a = tsne_2d(&x, 3).unwrap();
        let b = tsne_2d(&x, 3).unwrap();
        assert_eq!(a, b);
        let dist = |i: usize, j: usize| {
            ((a[(i, 0)] - a[(j, 0)]).powi(2) + (a[(i, 1)] - a[(j, 1)]).powi(2)).sqrt()
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..n {
            for j in (i + 1)..n {
                let same = (i < n / 2) == (j < n / 2);
                if same {
                    intra = (intra.0 + dist(i, j), intra.1 + 1);
                } else {
                    inter = (inter.0 + dist(i, j), inter.1 + 1);
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let inter_mean = inter.0 / inter.1 as f64;
        assert!(
            inter_mean > 2.0 * intra_mean,
            "blobs not separated: intra {intra_mean}, inter {inter_mean}"
        );
    }

    #[test]
    fn tsne_rejects_oversized_inputs() {
        let x = Array2::zeros((PROJECTION_POINT_CAP + 1, 2));
        match tsne_2d(&x, 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("--pca"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn projection_points_cover_split_and_write_csv() {
        let corpus = generate_synthetic(&GenConfig::desk_default(20, 23)).unwrap();
        let model = quick_model(&corpus, 0);
        let points = project_features(
            &model,
            &corpus,
            Split::Test,
            ProjectionKind::SpecCommon,
            ProjectionMethod::Pca,
            0,
        )
        .unwrap();
        let n_test = corpus.split_indices(Split::Test).len();
        assert_eq!(points.len(), n_test * 3 * 2);
        for component in ["common", "specific"] {
            assert!(points.iter().any(|p| p.component == component));
        }
        let recon = project_features(
            &model,
            &corpus,
            Split::Test,
            ProjectionKind::Recon,
            ProjectionMethod::Pca,
            0,
        )
        .unwrap();
        assert_eq!(recon.len(), n_test * 3 * 4);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.csv");
        write_projection_csv(&points, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,modality,component,labels,x,y"));
        assert_eq!(lines.count(), points.len());
        assert!(text.contains(",visual,"));
        assert!(centroid_spread(&points, "specific") >= 0.0);
    }

    #[test]
    fn correlation_rows_are_distributions() {
        let corpus = generate_synthetic(&GenConfig::desk_default(260, 24)).unwrap();
        let model = quick_model(&corpus, 0);
        let corr = modality_label_correlation(&model, &corpus, Split::Test).unwrap();
        assert_eq!(corr.dim(), (corpus.zeta, 3));
        for j in 0..corpus.zeta {
            let row: f64 = (0..3).map(|c| corr[(j, c)]).sum();
            assert!((row - 1.0).abs() < 1e-12, "row {j} sums to {row}");
            for c in 0..3 {
                assert!(corr[(j, c)] >= 0.0);
            }
        }
        // An untrained model has no modality preference: every entry sits
        // close to the uniform 1/3.
        for j in 0..corpus.zeta {
            for c in 0..3 {
                let dev = (corr[(j, c)] - 1.0 / 3.0).abs();
                assert!(dev < 0.2, "untrained row {j} column {c} deviates {dev:.3}");
            }
        }

        // Identical on repetition.
        let again = modality_label_correlation(&model, &corpus, Split::Test).unwrap();
        assert_eq!(corr, again);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.csv");
        write_correlation_csv(&corr, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("label,visual,textual,acoustic\n"));
        assert_eq!(text.lines().count(), 1 + corpus.zeta);
    }
}
