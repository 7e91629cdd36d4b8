//! SGD training on toy losses, finite-difference gradient checks, and the
//! gradient covariance / correlation diagnostics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, DenseMatrix, SeededStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `½‖f − y‖²`.
    SquaredError,
    /// `−log softmax(f)_label` with a one-hot target.
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Per-sample loss and its gradient with respect to the output.
    pub fn value_and_grad(self, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Loss::SquaredError => {
                let g: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
                (0.5 * g.iter().map(|v| v * v).sum::<f64>(), g)
            }
            Loss::SoftmaxCrossEntropy => {
                let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = out.iter().map(|o| (o - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let mut loss = 0.0;
                let g = ex
                    .iter()
                    .zip(target)
                    .zip(out)
                    .map(|((e, t), o)| {
                        if *t != 0.0 {
                            loss -= t * (o - mx - z.ln());
                        }
                        e / z - t
                    })
                    .collect();
                (loss, g)
            }
        }
    }
}

/// Inputs (`samples × n`) and targets (`samples × m`). Classification
/// targets are one-hot and `labels` holds the class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> (&[f64], &[f64]) {
        (self.inputs.row(i), self.targets.row(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub loss: Loss,
    pub teacher: DenseMatrix,
    pub train: Dataset,
    pub test: Dataset,
}

/// Mean loss and task metric over a dataset. The metric is the per-element
/// mean squared error for regression and accuracy for classification.
pub fn evaluate(adapter: &Adapter, data: &Dataset, loss: Loss) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut metric = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let out = adapter.predict(x)?;
        total += loss.value_and_grad(&out, y).0;
        match (&data.labels, loss) {
            (Some(labels), Loss::SoftmaxCrossEntropy) => {
                let arg = argmax(&out);
                if arg == labels[i] {
                    metric += 1.0;
                }
            }
            _ => metric += out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / y.len() as f64,
        }
    }
    let n = data.len().max(1) as f64;
    Ok((total / n, metric / n))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One row of a training trace. Epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_metric: f64,
    /// Per-rank (or per-expert) selections during this epoch.
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("trace has an initial record")
    }

    /// `epoch,train_loss,eval_loss,eval_metric,histogram` with the histogram
    /// as `;`-separated counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_loss,eval_metric,histogram\n");
        for r in &self.records {
            let hist: Vec<String> = r.histogram.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{}",
                r.epoch,
                r.train_loss,
                r.eval_loss,
                r.eval_metric,
                hist.join(";")
            );
        }
        out
    }
}

/// Minibatch SGD. Each epoch visits the training set in the order of a
/// permutation drawn from stream `(seed, epoch)`; each minibatch is one
/// optimizer step followed by one balance-bias update.
pub fn train_adapter(adapter: &mut Adapter, task: &ToyTask, opts: &TrainOptions) -> Result<TrainingTrace> {
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::param("lr", format!("must be finite and ≥ 0, got {}", opts.lr)));
    }
    if opts.batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    if task.train.is_empty() {
        return Err(Error::param("task", "empty training set"));
    }
    let cfg = adapter.config();
    if (cfg.m, cfg.n) != (task.m, task.n) {
        return Err(Error::dim(
            "train_adapter",
            format!("task {}×{}", task.m, task.n),
            format!("adapter {}×{}", cfg.m, cfg.n),
        ));
    }

    let snapshot = |a: &Adapter| a.assignment_totals().map(<[u64]>::to_vec).unwrap_or_default();
    let mut records = Vec::with_capacity(opts.epochs + 1);
    let record = |a: &Adapter, epoch: usize, histogram: Vec<u64>| -> Result<EpochRecord> {
        let (train_loss, _) = evaluate(a, &task.train, task.loss)?;
        let (eval_loss, eval_metric) = evaluate(a, &task.test, task.loss)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            eval_loss,
            eval_metric,
            histogram,
        })
    };
    let first = record(adapter, 0, vec![0; snapshot(adapter).len()])?;
    records.push(first);

    let seed = derive_seed(opts.seed, 0x7EA1);
    for epoch in 1..=opts.epochs {
        let before = snapshot(adapter);
        let order = SeededStream::new(seed, epoch as u64).permutation(task.train.len());
        for batch in order.chunks(opts.batch_size) {
            for &i in batch {
                let (x, y) = task.train.sample(i);
                let pass = adapter.forward(x)?;
                let (_, up) = task.loss.value_and_grad(&pass.output, y);
                adapter.accumulate(x, &pass, &up)?;
            }
            adapter.step(opts.lr, batch.len());
        }
        let after = snapshot(adapter);
        let hist = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        let rec = record(adapter, epoch, hist)?;
        let bad = !rec.train_loss.is_finite() || !rec.eval_loss.is_finite();
        let loss = rec.train_loss;
        records.push(rec);
        if bad {
            return Err(Error::Diverged {
                epoch,
                loss,
                trace: records,
            });
        }
        log::debug!("epoch {epoch}: train {loss:.6e}");
    }
    Ok(TrainingTrace { records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Compares the analytic `∂L/∂B` with central differences of
/// `L = ½‖f(x) − target‖²`, holding the routing decision of the unperturbed
/// forward fixed. Relative error is `|analytic − fd| / (|analytic| + 1e-8)`.
pub fn finite_diff_check(adapter: &Adapter, x: &[f64], target: &[f64], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param("step", format!("must be positive, got {step}")));
    }
    let pass = adapter.forward(x)?;
    if target.len() != pass.output.len() {
        return Err(Error::dim("finite_diff_check target", pass.output.len(), target.len()));
    }
    let (_, up) = Loss::SquaredError.value_and_grad(&pass.output, target);
    let analytic = adapter.b_gradient(x, &pass, &up)?;

    // No variant's routing reads B, so perturbing B keeps the decision fixed.
    let mut probe = adapter.clone();
    let mut output_at = |j: usize, i: usize, v: f64| -> Result<Vec<f64>> {
        probe.b_mut().set(j, i, v);
        probe.predict(x)
    };

    let (m, r) = adapter.b().shape();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for j in 0..m {
        for i in 0..r {
            let orig = adapter.b().get(j, i);
            let op = output_at(j, i, orig + step)?;
            let om = output_at(j, i, orig - step)?;
            output_at(j, i, orig)?;
            // (L⁺ − L⁻) for L = ½‖o − t‖², factored so the two large losses
            // never cancel.
            let dl: f64 = op
                .iter()
                .zip(&om)
                .zip(target)
                .map(|((p, q), t)| (p - q) * (0.5 * (p + q) - t))
                .sum();
            let fd = dl / (2.0 * step);
            let g = analytic.get(j, i);
            let abs = (g - fd).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / (g.abs() + 1e-8));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        entries: m * r,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovMode {
    Dense,
    TopkMasked,
}

/// Synthetic gradient model: column `i` of a sample's gradient is
/// `√c · z + w_i` with shared `z` and independent `w_i`, all `N(0, I_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCovConfig {
    pub r: usize,
    pub k: usize,
    pub samples: usize,
    pub dim: usize,
    pub shared: f64,
    pub seed: u64,
}

impl GradCovConfig {
    pub fn new(r: usize, k: usize, samples: usize, seed: u64) -> Self {
        Self {
            r,
            k,
            samples,
            dim: 16,
            shared: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.r == 0 || self.k == 0 || self.k > self.r {
            return Err(Error::param("k", format!("need 1 ≤ k ≤ r = {}, got {}", self.r, self.k)));
        }
        if self.samples < 10_000 {
            return Err(Error::param("samples", format!("need ≥ 10⁴, got {}", self.samples)));
        }
        if self.dim == 0 || !(self.shared >= 0.0 && self.shared.is_finite()) {
            return Err(Error::param("dim/shared", "need dim > 0 and finite shared ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCovEstimate {
    pub mode: CovMode,
    pub r: usize,
    pub k: usize,
    pub samples: usize,
    pub sigma: DenseMatrix,
    pub mean_offdiag: f64,
    pub mean_abs_offdiag: f64,
    pub mean_abs_diag: f64,
    pub offdiag_to_diag: f64,
}

impl GradCovEstimate {
    fn from_sigma(mode: CovMode, cfg: &GradCovConfig, sigma: DenseMatrix) -> Self {
        let r = cfg.r;
        let (mut off, mut off_abs, mut diag) = (0.0, 0.0, 0.0);
        for i in 0..r {
            for j in 0..r {
                let v = sigma.get(i, j);
                if i == j {
                    diag += v.abs();
                } else {
                    off += v;
                    off_abs += v.abs();
                }
            }
        }
        let pairs = (r * (r - 1)).max(1) as f64;
        let mean_abs_diag = diag / r as f64;
        let mean_abs_offdiag = off_abs / pairs;
        Self {
            mode,
            r,
            k: cfg.k,
            samples: cfg.samples,
            mean_offdiag: off / pairs,
            offdiag_to_diag: if mean_abs_diag > 0.0 { mean_abs_offdiag / mean_abs_diag } else { 0.0 },
            mean_abs_offdiag,
            mean_abs_diag,
            sigma,
        }
    }
}

const COV_CHUNK: usize = 2048;

/// Dense and masked covariance estimates from the same gradient draws. The
/// model is zero-mean, so `Σ_ij = E[g_iᵀ g_j]` is estimated without centering.
/// Sample `s` takes its gradients from stream `s` and its mask from a
/// separate stream `s`; chunks are reduced in fixed order.
fn paired_covariance(cfg: &GradCovConfig) -> Result<(GradCovEstimate, GradCovEstimate)> {
    cfg.validate()?;
    let (r, dim, k) = (cfg.r, cfg.dim, cfg.k);
    let gseed = derive_seed(cfg.seed, 0x6C0F);
    let mseed = derive_seed(cfg.seed, 0x3A5C);
    let sc = cfg.shared.sqrt();
    let chunks = cfg.samples.div_ceil(COV_CHUNK);

    struct Acc {
        dense: Vec<f64>,
        masked: Vec<f64>,
    }
    let parts: Vec<Acc> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc {
                dense: vec![0.0; r * r],
                masked: vec![0.0; r * r],
            };
            let mut g = vec![0.0; r * dim];
            let mut scratch = Vec::with_capacity(r);
            let mut lam = vec![false; r];
            let end = ((c + 1) * COV_CHUNK).min(cfg.samples);
            for s in c * COV_CHUNK..end {
                let mut st = SeededStream::new(gseed, s as u64);
                let z = st.normal_vec(dim);
                for i in 0..r {
                    for t in 0..dim {
                        g[i * dim + t] = sc * z[t] + st.normal();
                    }
                }
                let mut ms = SeededStream::new(mseed, s as u64);
                lam.iter_mut().for_each(|l| *l = false);
                for i in ms.sample_distinct(r, k, &mut scratch) {
                    lam[i] = true;
                }
                for i in 0..r {
                    let gi = &g[i * dim..(i + 1) * dim];
                    for j in i..r {
                        let v = crate::linalg::dot(gi, &g[j * dim..(j + 1) * dim]);
                        acc.dense[i * r + j] += v;
                        if lam[i] && lam[j] {
                            acc.masked[i * r + j] += v;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut dense = vec![0.0; r * r];
    let mut masked = vec![0.0; r * r];
    for p in &parts {
        for (a, b) in dense.iter_mut().zip(&p.dense) {
            *a += b;
        }
        for (a, b) in masked.iter_mut().zip(&p.masked) {
            *a += b;
        }
    }
    let n = cfg.samples as f64;
    let finish = |raw: &[f64]| -> DenseMatrix {
        let mut out = DenseMatrix::zeros(r, r);
        for i in 0..r {
            for j in i..r {
                let v = raw[i * r + j] / n;
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    };
    Ok((
        GradCovEstimate::from_sigma(CovMode::Dense, cfg, finish(&dense)),
        GradCovEstimate::from_sigma(CovMode::TopkMasked, cfg, finish(&masked)),
    ))
}

/// Covariance of per-column gradient inner products under the synthetic
/// gradient model, with or without uniform random k-of-r masking.
pub fn estimate_grad_covariance(r: usize, k: usize, samples: usize, mode: CovMode, seed: u64) -> Result<GradCovEstimate> {
    let (dense, masked) = paired_covariance(&GradCovConfig::new(r, k, samples, seed))?;
    Ok(match mode {
        CovMode::Dense => dense,
        CovMode::TopkMasked => masked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationReport {
    pub r: usize,
    pub k: usize,
    pub samples: usize,
    pub dense_offdiag: f64,
    pub masked_offdiag: f64,
    /// Masked over dense mean off-diagonal covariance.
    pub ratio: f64,
    /// Exact co-activation probability `k(k−1) / (r(r−1))`.
    pub expected: f64,
    /// Large-`r` approximation `k² / r²`.
    pub approx: f64,
}

impl AttenuationReport {
    pub fn relative_error(&self) -> f64 {
        if self.expected == 0.0 {
            self.ratio.abs()
        } else {
            (self.ratio - self.expected).abs() / self.expected
        }
    }
}

pub fn co_activation_probability(r: usize, k: usize) -> f64 {
    if r < 2 {
        return 1.0;
    }
    (k * k.saturating_sub(1)) as f64 / (r * (r - 1)) as f64
}

pub fn covariance_attenuation(cfg: &GradCovConfig) -> Result<AttenuationReport> {
    let (dense, masked) = paired_covariance(cfg)?;
    let ratio = masked.mean_offdiag / dense.mean_offdiag;
    Ok(AttenuationReport {
        r: cfg.r,
        k: cfg.k,
        samples: cfg.samples,
        dense_offdiag: dense.mean_offdiag,
        masked_offdiag: masked.mean_offdiag,
        ratio,
        expected: co_activation_probability(cfg.r, cfg.k),
        approx: (cfg.k * cfg.k) as f64 / (cfg.r * cfg.r) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub columns: Vec<usize>,
    pub matrix: DenseMatrix,
    /// Columns whose gradient vector had zero variance over the batch.
    pub zero_variance: Vec<bool>,
    pub mean_abs_offdiag: f64,
}

/// Pearson correlations between per-column `∂L/∂B` vectors. Column `c`'s
/// vector stacks `∂L/∂B[:, c]` over every sample of the batch.
pub fn gradient_correlation_matrix(
    adapter: &Adapter,
    batch: &Dataset,
    loss: Loss,
    columns: &[usize],
) -> Result<CorrelationReport> {
    let r = adapter.config().r;
    if columns.is_empty() || columns.len() > r || columns.iter().any(|&c| c >= r) {
        return Err(Error::param("columns", format!("need 1..={r} distinct columns below {r}")));
    }
    let m = adapter.config().m;
    let q = columns.len();
    let len = m * batch.len();
    let mut vecs = vec![vec![0.0; len]; q];
    for s in 0..batch.len() {
        let (x, y) = batch.sample(s);
        let pass = adapter.forward(x)?;
        let (_, up) = loss.value_and_grad(&pass.output, y);
        let g = adapter.b_gradient(x, &pass, &up)?;
        for (ci, &c) in columns.iter().enumerate() {
            for j in 0..m {
                vecs[ci][s * m + j] = g.get(j, c);
            }
        }
    }
    Ok(correlation_from_vectors(columns.to_vec(), &vecs))
}

/// Pearson correlation matrix of equal-length vectors. Zero-variance
/// vectors correlate 0 with everything, including themselves, and are
/// flagged.
pub fn correlation_from_vectors(columns: Vec<usize>, vecs: &[Vec<f64>]) -> CorrelationReport {
    let q = vecs.len();
    let centered: Vec<(Vec<f64>, f64)> = vecs
        .iter()
        .map(|v| {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
            let norm = crate::linalg::norm2(&c);
            (c, norm)
        })
        .collect();
    let zero_variance: Vec<bool> = centered.iter().map(|(_, n)| *n == 0.0).collect();
    let mut matrix = DenseMatrix::zeros(q, q);
    let (mut sum, mut pairs) = (0.0, 0usize);
    for a in 0..q {
        for b in 0..q {
            if zero_variance[a] || zero_variance[b] {
                continue;
            }
            let v = if a == b {
                1.0
            } else {
                (crate::linalg::dot(&centered[a].0, &centered[b].0) / (centered[a].1 * centered[b].1)).clamp(-1.0, 1.0)
            };
            matrix.set(a, b, v);
            if a != b {
                sum += v.abs();
                pairs += 1;
            }
        }
    }
    CorrelationReport {
        columns,
        matrix,
        zero_variance,
        mean_abs_offdiag: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
    }
}
