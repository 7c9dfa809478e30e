//! A source-only multinomial logistic probe on raw concatenated region
//! vectors. Used to calibrate the synthetic benchmark's transfer gap and as
//! an independent baseline in tests; it shares no code with the model path.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{AgraError, Result};
use crate::graph::REGION_COUNT;
use crate::synth::PackedDomain;

/// Concatenate the raw region blocks into one design matrix.
pub fn concat_raw(packed: &PackedDomain) -> Array2<f64> {
    let n = packed.len();
    let dim = packed.regions[0].ncols();
    let mut out = Array2::zeros((n, REGION_COUNT * dim));
    for (k, block) in packed.regions.iter().enumerate() {
        out.slice_mut(s![.., k * dim..(k + 1) * dim]).assign(block);
    }
    out
}

fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            pred == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn softmax_inplace(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Accuracy of a source-trained linear classifier on both domains.
///
/// Full-batch gradient descent on standardized inputs; deterministic (zero
/// initialization, fixed iteration count). Returns `(source_acc, target_acc)`.
pub fn source_probe_accuracy(
    source: &PackedDomain,
    target: &PackedDomain,
    classes: usize,
    iterations: usize,
    learning_rate: f64,
) -> Result<(f64, f64)> {
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| AgraError::Argument("probe needs labeled source data".into()))?;
    let target_labels = target
        .labels_for_eval()
        .ok_or_else(|| AgraError::Argument("probe needs target evaluation labels".into()))?;

    let x_src = concat_raw(source);
    let x_tgt = concat_raw(target);

    // Standardize with source statistics only.
    let mean = x_src.mean_axis(Axis(0)).unwrap();
    let mut std = x_src.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
    std.mapv_inplace(|v| if v < 1e-9 { 1.0 } else { v });
    let normalize = |x: &Array2<f64>| {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            row -= &mean;
            row /= &std;
        }
        out
    };
    let x_src = normalize(&x_src);
    let x_tgt = normalize(&x_tgt);

    let n = x_src.nrows() as f64;
    let dim = x_src.ncols();
    let mut weight = Array2::<f64>::zeros((dim, classes));
    let mut bias = Array1::<f64>::zeros(classes);

    let mut onehot = Array2::<f64>::zeros((x_src.nrows(), classes));
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(AgraError::Argument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        onehot[[i, label]] = 1.0;
    }

    for _ in 0..iterations {
        let mut probs = x_src.dot(&weight) + &bias;
        softmax_inplace(&mut probs);
        let diff = &probs - &onehot;
        let grad_w = x_src.t().dot(&diff) / n;
        let grad_b = diff.sum_axis(Axis(0)) / n;
        weight -= &(grad_w * learning_rate);
        bias -= &(grad_b * learning_rate);
    }

    let mut src_probs = x_src.dot(&weight) + &bias;
    softmax_inplace(&mut src_probs);
    let mut tgt_probs = x_tgt.dot(&weight) + &bias;
    softmax_inplace(&mut tgt_probs);
    Ok((accuracy(&src_probs, labels), accuracy(&tgt_probs, target_labels)))
}
