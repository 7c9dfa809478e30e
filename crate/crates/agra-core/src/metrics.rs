//! Evaluation, metrics rows, the proxy domain-divergence measure, and the
//! 2-D principal-component embedding export.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::ClassDistributionBank;
use crate::error::{AgraError, Result};
use crate::graph::Domain;
use crate::model::{
    classify_batch, discriminate_batch, forward_batch, ModelParams, NodeInit,
};
use crate::synth::PackedDomain;

/// Fixed evaluation chunk so repeated evaluations are bitwise identical.
pub const EVAL_CHUNK: usize = 256;

/// Column set of the per-epoch metrics CSV. Versioned by this constant: any
/// change to the set bumps [`METRICS_SCHEMA_VERSION`].
pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch", "stage", "cls_loss", "dom_loss", "src_acc", "tgt_acc", "d_acc", "lr_fg", "lr_d",
];
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: u8,
    pub cls_loss: f64,
    pub dom_loss: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
    pub d_acc: f64,
    pub lr_fg: f64,
    pub lr_d: f64,
}

/// Serialize history rows as CSV with the versioned header row.
pub fn history_to_csv(rows: &[EpochRow]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.stage,
            row.cls_loss,
            row.dom_loss,
            row.src_acc,
            row.tgt_acc,
            row.d_acc,
            row.lr_fg,
            row.lr_d
        ));
    }
    out
}

/// Aggregate quality of a parameter snapshot on a dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub src_acc: f64,
    pub tgt_acc: f64,
    /// Domain-classification accuracy of the discriminator.
    pub d_acc: f64,
    pub cls_loss: f64,
    pub dom_loss: f64,
    pub per_class_tgt_acc: Vec<f64>,
    pub proxy_a_distance: f64,
}

/// The empirical domain-divergence proxy `2 (1 - 2 eps)` for a held-out
/// domain-classification error `eps`; errors above chance count as chance.
pub fn proxy_a_distance(error_rate: f64) -> f64 {
    2.0 * (1.0 - 2.0 * error_rate.min(0.5))
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

struct DomainEval {
    features: Array2<f64>,
    correct: usize,
    labeled: usize,
    per_class_correct: Vec<usize>,
    per_class_total: Vec<usize>,
    cls_loss_sum: f64,
}

fn eval_domain(
    params: &ModelParams,
    packed: &PackedDomain,
    bank: Option<&ClassDistributionBank>,
) -> Result<DomainEval> {
    let n = packed.len();
    let classes = params.config.classes;
    let mut features = Array2::zeros((n, params.config.feature_dim()));
    let mut correct = 0usize;
    let mut labeled = 0usize;
    let mut per_class_correct = vec![0usize; classes];
    let mut per_class_total = vec![0usize; classes];
    let mut cls_loss_sum = 0.0;

    let labels = packed.labels_for_eval();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let blocks = packed.gather(&indices);
        let init = match bank {
            Some(b) => NodeInit::Bank(b),
            None => NodeInit::Mirror,
        };
        let cache = forward_batch(params, &blocks, packed.domain, init)?;
        features
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&cache.feature);

        if let Some(labels) = labels {
            let scored = classify_batch(&params.classifier, &cache.feature)?;
            for (row, &label) in scored.probs.rows().into_iter().zip(&labels[start..end]) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                per_class_total[label] += 1;
                labeled += 1;
                if pred == label {
                    correct += 1;
                    per_class_correct[label] += 1;
                }
                cls_loss_sum -= row[label].max(1e-12).ln();
            }
        }
        start = end;
    }

    Ok(DomainEval {
        features,
        correct,
        labeled,
        per_class_correct,
        per_class_total,
        cls_loss_sum,
    })
}

/// Evaluate a parameter snapshot: classification accuracy per domain,
/// discriminator accuracy and loss, and the proxy divergence derived from
/// the discriminator's error on this data.
pub fn evaluate(
    params: &ModelParams,
    bank: Option<&ClassDistributionBank>,
    source: &PackedDomain,
    target: &PackedDomain,
) -> Result<EvalSummary> {
    let src = eval_domain(params, source, bank)?;
    let tgt = eval_domain(params, target, bank)?;

    let disc_src = discriminate_batch(&params.discriminator, &src.features)?;
    let disc_tgt = discriminate_batch(&params.discriminator, &tgt.features)?;
    let n_total = (source.len() + target.len()) as f64;
    let mut dom_loss = 0.0;
    let mut d_correct = 0usize;
    for &z in disc_src.score.iter() {
        dom_loss += softplus(-z);
    }
    for &out in disc_src.out.iter() {
        if out > 0.5 {
            d_correct += 1;
        }
    }
    for &z in disc_tgt.score.iter() {
        dom_loss += softplus(z);
    }
    for &out in disc_tgt.out.iter() {
        if out <= 0.5 {
            d_correct += 1;
        }
    }
    dom_loss /= n_total;
    let d_acc = d_correct as f64 / n_total;

    let per_class_tgt_acc = tgt
        .per_class_correct
        .iter()
        .zip(&tgt.per_class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();

    Ok(EvalSummary {
        src_acc: if src.labeled == 0 { 0.0 } else { src.correct as f64 / src.labeled as f64 },
        tgt_acc: if tgt.labeled == 0 { 0.0 } else { tgt.correct as f64 / tgt.labeled as f64 },
        d_acc,
        cls_loss: if src.labeled == 0 { 0.0 } else { src.cls_loss_sum / src.labeled as f64 },
        dom_loss,
        per_class_tgt_acc,
        proxy_a_distance: proxy_a_distance(1.0 - d_acc),
    })
}

/// Model features for every sample of a domain, one row each.
pub fn features_for_domain(
    params: &ModelParams,
    packed: &PackedDomain,
    bank: Option<&ClassDistributionBank>,
) -> Result<Array2<f64>> {
    Ok(eval_domain(params, packed, bank)?.features)
}

// ---------------------------------------------------------------------------
// Principal-component projection
// ---------------------------------------------------------------------------

/// Top-2 principal components of a feature matrix.
#[derive(Debug, Clone)]
pub struct Pca2 {
    /// Unit-norm component directions, one per row (2 x dim).
    pub components: Array2<f64>,
    pub eigenvalues: [f64; 2],
    /// Mean-centered features projected onto the components (n x 2).
    pub projected: Array2<f64>,
}

fn power_iteration(cov: &Array2<f64>, seed: u64) -> (Array1<f64>, f64) {
    let dim = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let mut norm = v.dot(&v).sqrt();
    v /= norm;
    let mut value = 0.0;
    for _ in 0..2000 {
        let next = cov.dot(&v);
        norm = next.dot(&next).sqrt();
        if norm < 1e-300 {
            return (v, 0.0);
        }
        let next = next / norm;
        let delta = (&next - &v).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v = next;
        value = v.dot(&cov.dot(&v));
        if delta < 1e-13 {
            break;
        }
    }
    (v, value)
}

fn orient(mut v: Array1<f64>) -> Array1<f64> {
    let lead = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[lead] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

/// Project mean-centered features onto their top-2 covariance eigenvectors
/// (power iteration with deflation; deterministic).
pub fn pca_top2(features: &Array2<f64>) -> Result<Pca2> {
    let n = features.nrows();
    if n < 2 {
        return Err(AgraError::Argument("pca needs at least two samples".into()));
    }
    let mean = features.mean_axis(Axis(0)).unwrap();
    let mut centered = features.clone();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let (v1, l1) = power_iteration(&cov, 0x9c_a001);
    let v1 = orient(v1);
    // Deflate and repeat for the second component.
    let outer = v1
        .view()
        .insert_axis(Axis(1))
        .to_owned()
        .dot(&v1.view().insert_axis(Axis(0)).to_owned());
    cov -= &(outer * l1);
    let (v2, l2) = power_iteration(&cov, 0x9c_a002);
    let v2 = orient(v2);

    let mut components = Array2::zeros((2, features.ncols()));
    components.row_mut(0).assign(&v1);
    components.row_mut(1).assign(&v2);
    let projected = centered.dot(&components.t());
    Ok(Pca2 {
        components,
        eigenvalues: [l1, l2],
        projected,
    })
}

/// Assemble the embedding export: `id,domain,label,pc1,pc2`, one row per
/// sample. Labels fall back to the evaluation-only ones; unlabeled samples
/// leave the column empty.
pub fn embeddings_csv(
    ids: &[&str],
    domains: &[Domain],
    labels: &[Option<usize>],
    projected: &Array2<f64>,
) -> String {
    let mut out = String::from("id,domain,label,pc1,pc2\n");
    for i in 0..ids.len() {
        let label = labels[i].map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            ids[i],
            domains[i].tag(),
            label,
            projected[[i, 0]],
            projected[[i, 1]]
        ));
    }
    out
}
