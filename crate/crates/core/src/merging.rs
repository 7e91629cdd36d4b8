//! Weight-average merging of task adapters and interference measurements.

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, DenseMatrix};

/// `t ≥ 2` effective updates `ΔW_i = (α_i/r_i) B_i A_i` and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub deltas: Vec<DenseMatrix>,
    pub weights: Vec<f64>,
}

impl MergeSpec {
    /// `weights = None` means `w_i = 1/t`.
    pub fn new(deltas: Vec<DenseMatrix>, weights: Option<Vec<f64>>) -> Result<Self> {
        let t = deltas.len();
        if t < 2 {
            return Err(Error::param("adapters", format!("merging needs t ≥ 2 adapters, got {t}")));
        }
        let shape = deltas[0].shape();
        if let Some((i, d)) = deltas.iter().enumerate().find(|(_, d)| d.shape() != shape) {
            return Err(Error::dim(
                "merge",
                format!("{shape:?} for every adapter"),
                format!("{:?} for adapter {i}", d.shape()),
            ));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / t as f64; t]);
        if weights.len() != t {
            return Err(Error::dim("merge weights", t, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("merge weights".into()));
        }
        Ok(Self { deltas, weights })
    }

    pub fn from_adapters(adapters: &[Adapter], weights: Option<Vec<f64>>) -> Result<Self> {
        let deltas = adapters.iter().map(Adapter::delta_weight).collect::<Result<Vec<_>>>()?;
        Self::new(deltas, weights)
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// `Σ_i w_i ΔW_i`; adding `W₀` is left to the caller.
pub fn merge_weight_average(spec: &MergeSpec) -> DenseMatrix {
    let (m, n) = spec.deltas[0].shape();
    let mut out = DenseMatrix::zeros(m, n);
    for (d, &w) in spec.deltas.iter().zip(&spec.weights) {
        out.add_scaled(w, d).expect("shapes checked by MergeSpec");
    }
    out
}

/// `(W₀ + ΔW) x`.
pub fn merged_predict(base: &DenseMatrix, merged: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = base.matvec(x)?;
    merged.matvec_acc(x, &mut y);
    Ok(y)
}

/// `⟨ΔW_i, ΔW_j⟩_F / (‖ΔW_i‖_F ‖ΔW_j‖_F)`.
pub fn pairwise_task_orthogonality(di: &DenseMatrix, dj: &DenseMatrix) -> Result<f64> {
    let ip = frobenius_inner(di, dj)?;
    let (ni, nj) = (di.frobenius_norm(), dj.frobenius_norm());
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::Degenerate("normalized inner product of a zero update".into()));
    }
    Ok((ip / (ni * nj)).clamp(-1.0, 1.0))
}

/// Normalized inner products for every pair; the diagonal is 1.
pub fn inner_product_matrix(deltas: &[DenseMatrix]) -> Result<Vec<Vec<f64>>> {
    let t = deltas.len();
    let mut out = vec![vec![1.0; t]; t];
    for i in 0..t {
        for j in i + 1..t {
            let v = pairwise_task_orthogonality(&deltas[i], &deltas[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormDecomposition {
    /// `‖Σ w_i ΔW_i‖²_F`.
    pub merged_sq: f64,
    /// `Σ w_i² ‖ΔW_i‖²_F`.
    pub diagonal_sq: f64,
    /// `Σ_{i≠j} w_i w_j ⟨ΔW_i, ΔW_j⟩_F`.
    pub cross: f64,
    /// `|cross| / diagonal_sq`.
    pub cross_term_fraction: f64,
}

pub fn merged_norm_decomposition(spec: &MergeSpec) -> NormDecomposition {
    let merged = merge_weight_average(spec);
    let t = spec.len();
    let (mut diag, mut cross) = (0.0, 0.0);
    for i in 0..t {
        for j in 0..t {
            let ip = frobenius_inner(&spec.deltas[i], &spec.deltas[j]).expect("shapes checked");
            let ww = spec.weights[i] * spec.weights[j];
            if i == j {
                diag += ww * ip;
            } else {
                cross += ww * ip;
            }
        }
    }
    let mn = merged.frobenius_norm();
    NormDecomposition {
        merged_sq: mn * mn,
        diagonal_sq: diag,
        cross,
        cross_term_fraction: if diag > 0.0 { cross.abs() / diag } else { 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMergeMetric {
    pub task: String,
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// Relative degradation in percent: positive means the merge hurt.
    pub delta_pct: f64,
}

impl TaskMergeMetric {
    /// `higher_is_better` selects the sign convention (accuracy vs loss).
    pub fn new(task: impl Into<String>, metric: impl Into<String>, before: f64, after: f64, higher_is_better: bool) -> Self {
        let delta = if before == 0.0 {
            0.0
        } else if higher_is_better {
            100.0 * (before - after) / before.abs()
        } else {
            100.0 * (after - before) / before.abs()
        };
        Self {
            task: task.into(),
            metric: metric.into(),
            before,
            after,
            delta_pct: delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub weights: Vec<f64>,
    pub inner_products: Vec<Vec<f64>>,
    pub norms: NormDecomposition,
    pub tasks: Vec<TaskMergeMetric>,
}

impl InterferenceReport {
    pub fn build(spec: &MergeSpec, tasks: Vec<TaskMergeMetric>) -> Result<Self> {
        Ok(Self {
            weights: spec.weights.clone(),
            inner_products: inner_product_matrix(&spec.deltas)?,
            norms: merged_norm_decomposition(spec),
            tasks,
        })
    }

    pub fn mean_delta_pct(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(|t| t.delta_pct).sum::<f64>() / self.tasks.len() as f64
    }

    /// Mean `|normalized inner product|` over distinct pairs.
    pub fn mean_abs_inner_product(&self) -> f64 {
        let t = self.inner_products.len();
        let mut s = 0.0;
        for i in 0..t {
            for j in i + 1..t {
                s += self.inner_products[i][j].abs();
            }
        }
        let pairs = t * (t.saturating_sub(1)) / 2;
        if pairs == 0 {
            0.0
        } else {
            s / pairs as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn center_columns(x: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|i| x.get(i, j)).sum::<f64>() / rows as f64;
        for i in 0..rows {
            out.add_at(i, j, -mean);
        }
    }
    out
}

/// Linear CKA between two activation matrices with one row per sample:
/// `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` after column centering.
pub fn linear_cka(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::dim("linear_cka sample count", x.rows(), y.rows()));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let (xt, yt) = (xc.transpose(), yc.transpose());
    let yx = yt.matmul(&xc)?.frobenius_norm();
    let xx = xt.matmul(&xc)?.frobenius_norm();
    let yy = yt.matmul(&yc)?.frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("linear CKA of zero-variance features".into()));
    }
    Ok((yx * yx / (xx * yy)).clamp(0.0, 1.0))
}
