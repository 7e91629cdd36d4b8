//! Synthetic tasks and the single-task, merging and granularity experiments.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{activated_params_for, Adapter, AdapterConfig, Variant};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, dot, DenseMatrix, SeededStream};
use crate::merging::{merge_weight_average, merged_predict, InterferenceReport, MergeSpec, TaskMergeMetric};
use crate::routing::SelectionMode;
use crate::training::{
    argmax, gradient_correlation_matrix, train_adapter, Dataset, Loss, ToyTask, TrainOptions, TrainingTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    LinearTeacher,
    GaussianCluster,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-teacher" => Ok(Self::LinearTeacher),
            "gaussian-cluster" => Ok(Self::GaussianCluster),
            o => Err(Error::param("kind", format!("unknown task kind `{o}` (linear-teacher|gaussian-cluster)"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LinearTeacher => "linear-teacher",
            Self::GaussianCluster => "gaussian-cluster",
        })
    }
}

/// How inputs are drawn.
///
/// With `shared_dims = specific_dims = 0` inputs are isotropic `N(0, I_n)`.
/// Otherwise `x = s·V z + Vᵢ zᵢ + jitter·ε`, where `V` (`shared_dims`
/// orthonormal columns) comes from `family_seed` and is common to every task
/// of the family, and `Vᵢ` (`specific_dims` columns) is private to the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputModel {
    pub shared_dims: usize,
    pub specific_dims: usize,
    pub shared_scale: f64,
    pub jitter: f64,
    pub family_seed: u64,
}

impl Default for InputModel {
    fn default() -> Self {
        Self {
            shared_dims: 0,
            specific_dims: 0,
            shared_scale: 1.0,
            jitter: 0.0,
            family_seed: 0,
        }
    }
}

impl InputModel {
    pub fn is_isotropic(&self) -> bool {
        self.shared_dims == 0 && self.specific_dims == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    /// Target noise (linear teacher) or within-class spread (clusters).
    pub noise: f64,
    pub seed: u64,
    pub input: InputModel,
    /// Cluster-centre scale.
    pub separation: f64,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, n: usize, m: usize, samples: usize, noise: f64, seed: u64) -> Self {
        Self {
            name: name.into(),
            kind,
            n,
            m,
            samples,
            noise,
            seed,
            input: InputModel::default(),
            separation: 1.0,
        }
    }

    pub fn with_input(mut self, input: InputModel) -> Self {
        self.input = input;
        self
    }

    /// The same task family re-drawn for one experiment seed.
    pub fn realize(&self, exp_seed: u64) -> Self {
        let mut t = self.clone();
        t.seed = derive_seed(self.seed, exp_seed);
        t.input.family_seed = derive_seed(self.input.family_seed, exp_seed);
        t
    }
}

/// `q` orthonormal columns in `Rⁿ` by Gram-Schmidt on Gaussian vectors,
/// returned as rows.
fn orthonormal_basis(n: usize, q: usize, stream: &mut SeededStream) -> Result<Vec<Vec<f64>>> {
    if q > n {
        return Err(Error::param("input", format!("subspace dimension {q} exceeds n = {n}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
    while basis.len() < q {
        let mut v = stream.normal_vec(n);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                crate::linalg::axpy(-c, b, &mut v);
            }
        }
        let norm = crate::linalg::norm2(&v);
        if norm > 1e-8 {
            v.iter_mut().for_each(|e| *e /= norm);
            basis.push(v);
        }
    }
    Ok(basis)
}

struct InputSampler {
    n: usize,
    shared: Vec<Vec<f64>>,
    specific: Vec<Vec<f64>>,
    scale: f64,
    jitter: f64,
}

impl InputSampler {
    fn new(spec: &TaskSpec, task_stream: &mut SeededStream) -> Result<Self> {
        let im = &spec.input;
        let mut fam = SeededStream::new(im.family_seed, 0xFA);
        Ok(Self {
            n: spec.n,
            shared: orthonormal_basis(spec.n, im.shared_dims, &mut fam)?,
            specific: orthonormal_basis(spec.n, im.specific_dims, task_stream)?,
            scale: im.shared_scale,
            jitter: im.jitter,
        })
    }

    fn draw(&self, s: &mut SeededStream) -> Vec<f64> {
        if self.shared.is_empty() && self.specific.is_empty() {
            return s.normal_vec(self.n);
        }
        let mut x = vec![0.0; self.n];
        for v in &self.shared {
            crate::linalg::axpy(self.scale * s.normal(), v, &mut x);
        }
        for v in &self.specific {
            crate::linalg::axpy(s.normal(), v, &mut x);
        }
        if self.jitter > 0.0 {
            for e in x.iter_mut() {
                *e += self.jitter * s.normal();
            }
        }
        x
    }
}

/// Isotropic-input task with the first 80% of samples for training.
pub fn make_synthetic_task(kind: TaskKind, n: usize, m: usize, samples: usize, noise: f64, seed: u64) -> Result<ToyTask> {
    make_task(&TaskSpec::new(format!("{kind}-{seed}"), kind, n, m, samples, noise, seed))
}

pub fn make_task(spec: &TaskSpec) -> Result<ToyTask> {
    if spec.n == 0 || spec.m == 0 {
        return Err(Error::param("n/m", "task dimensions must be positive"));
    }
    if spec.samples < 64 {
        return Err(Error::param("samples", format!("need ≥ 64, got {}", spec.samples)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::param("noise", "must be finite and ≥ 0"));
    }
    let (n, m) = (spec.n, spec.m);
    let mut ts = SeededStream::new(spec.seed, 0);
    let sampler = InputSampler::new(spec, &mut ts)?;
    let mut data = SeededStream::new(spec.seed, 1);

    let mut inputs = Vec::with_capacity(spec.samples * n);
    let mut targets = Vec::with_capacity(spec.samples * m);
    let (teacher, labels, loss) = match spec.kind {
        TaskKind::LinearTeacher => {
            let std = 1.0 / (n as f64).sqrt();
            let t = DenseMatrix::from_vec(m, n, (0..m * n).map(|_| std * ts.normal()).collect())?;
            for _ in 0..spec.samples {
                let x = sampler.draw(&mut data);
                let mut y = t.matvec(&x)?;
                if spec.noise > 0.0 {
                    y.iter_mut().for_each(|v| *v += spec.noise * data.normal());
                }
                inputs.extend_from_slice(&x);
                targets.extend_from_slice(&y);
            }
            (t, None, Loss::SquaredError)
        }
        TaskKind::GaussianCluster => {
            let mut centres = Vec::with_capacity(m * n);
            for _ in 0..m {
                centres.extend(sampler.draw(&mut ts).into_iter().map(|v| spec.separation * v));
            }
            let centres = DenseMatrix::from_vec(m, n, centres)?;
            let mut labels = Vec::with_capacity(spec.samples);
            for _ in 0..spec.samples {
                let c = data.below(m);
                let spread = sampler.draw(&mut data);
                inputs.extend(centres.row(c).iter().zip(&spread).map(|(a, b)| a + spec.noise * b));
                targets.extend((0..m).map(|j| if j == c { 1.0 } else { 0.0 }));
                labels.push(c);
            }
            (centres, Some(labels), Loss::SoftmaxCrossEntropy)
        }
    };
    let n_train = spec.samples * 4 / 5;
    let split = |lo: usize, hi: usize| -> Result<Dataset> {
        Ok(Dataset {
            inputs: DenseMatrix::from_vec(hi - lo, n, inputs[lo * n..hi * n].to_vec())?,
            targets: DenseMatrix::from_vec(hi - lo, m, targets[lo * m..hi * m].to_vec())?,
            labels: labels.as_ref().map(|l| l[lo..hi].to_vec()),
        })
    };
    Ok(ToyTask {
        name: spec.name.clone(),
        n,
        m,
        seed: spec.seed,
        loss,
        teacher,
        train: split(0, n_train)?,
        test: split(n_train, spec.samples)?,
    })
}

/// One adapter column of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub label: String,
    pub variant: Variant,
    pub r: usize,
    pub k: usize,
    pub experts: usize,
    pub rho: f64,
    pub alpha: Option<f64>,
    pub selection: SelectionMode,
    pub balancing: bool,
    pub balance_rate: f64,
}

impl VariantSpec {
    pub fn new(label: impl Into<String>, variant: Variant, r: usize, k: usize) -> Self {
        Self {
            label: label.into(),
            variant,
            r,
            k,
            experts: 1,
            rho: 0.25,
            alpha: None,
            selection: SelectionMode::Signed,
            balancing: true,
            balance_rate: crate::routing::DEFAULT_BALANCE_RATE,
        }
    }

    /// Split-LoRA with `experts` experts of rank `r / experts`, `k` active.
    pub fn split(label: impl Into<String>, r: usize, experts: usize, k: usize) -> Self {
        Self {
            experts,
            ..Self::new(label, Variant::SplitLora, r, k)
        }
    }

    pub fn adapter_config(&self, m: usize, n: usize) -> AdapterConfig {
        let mut c = match self.variant {
            Variant::SplitLora => AdapterConfig::split(m, n, self.experts, self.r / self.experts.max(1), self.k),
            v => AdapterConfig::new(v, m, n, self.r, self.k),
        };
        c.rho = self.rho;
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        c.selection = self.selection;
        c.balancing = self.balancing;
        c.balance_rate = self.balance_rate;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskSpec>,
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    pub train: TrainOptions,
    /// Sampled `B` columns for the gradient-correlation diagnostic (0 = off).
    pub corr_columns: usize,
    /// Samples of the test split used for the correlation diagnostic.
    pub corr_samples: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "need at least one seed"));
        }
        if self.tasks.is_empty() {
            return Err(Error::param("tasks", "need at least one task"));
        }
        if self.variants.is_empty() {
            return Err(Error::param("variants", "need at least one variant"));
        }
        for t in &self.tasks {
            for v in &self.variants {
                v.adapter_config(t.m, t.n).validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    BeforeMerge,
    AfterMerge,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::BeforeMerge => "before-merge",
            Phase::AfterMerge => "after-merge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub task: String,
    pub seed: u64,
    pub metric: String,
    pub phase: Phase,
    pub value: f64,
}

impl ResultRow {
    fn new(variant: &str, task: &str, seed: u64, metric: &str, phase: Phase, value: f64) -> Self {
        Self {
            variant: variant.into(),
            task: task.into(),
            seed,
            metric: metric.into(),
            phase,
            value,
        }
    }
}

pub const METRICS: [&str; 7] = [
    "mse",
    "accuracy",
    "param-count",
    "energy-q25",
    "offdiag-corr",
    "cross-term-fraction",
    "delta-pct",
];

/// Cumulative share of mean `|(Ax)_i|` over ranks sorted by decreasing
/// mean magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub curve: Vec<f64>,
    pub degenerate: bool,
}

impl EnergyProfile {
    /// Share held by the top quarter of ranks.
    pub fn q25(&self) -> f64 {
        let r = self.curve.len();
        self.curve[(r.div_ceil(4)).max(1) - 1]
    }
}

pub fn activation_energy_profile(adapter: &Adapter, data: &DenseMatrix) -> Result<EnergyProfile> {
    let r = adapter.config().r;
    let mut mean = vec![0.0; r];
    for i in 0..data.rows() {
        for (m, h) in mean.iter_mut().zip(adapter.projection(data.row(i))?) {
            *m += h.abs();
        }
    }
    Ok(energy_curve(mean))
}

pub fn energy_curve(mut magnitudes: Vec<f64>) -> EnergyProfile {
    let r = magnitudes.len();
    magnitudes.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = magnitudes.iter().sum();
    if total == 0.0 {
        return EnergyProfile {
            curve: vec![0.0; r],
            degenerate: true,
        };
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = magnitudes
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    EnergyProfile { curve, degenerate: false }
}

/// One trained grid cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub variant: String,
    pub task: String,
    pub seed: u64,
    pub adapter: Adapter,
    pub trace: TrainingTrace,
    pub realized: ToyTask,
}

fn task_metric_name(loss: Loss) -> &'static str {
    match loss {
        Loss::SquaredError => "mse",
        Loss::SoftmaxCrossEntropy => "accuracy",
    }
}

/// Seeds for one cell. The adapter seed depends on the task index and the
/// experiment seed but not on the variant, so variants sharing a
/// projection construction see the same `A`.
fn cell_seeds(exp_seed: u64, task_idx: usize) -> (u64, u64) {
    (
        derive_seed(exp_seed, 0xA000 + task_idx as u64),
        derive_seed(exp_seed, 0x5EED),
    )
}

fn train_cell(cfg: &ExperimentConfig, v: &VariantSpec, ti: usize, task: &ToyTask, seed: u64) -> Result<CellOutcome> {
    let (adapter_seed, train_seed) = cell_seeds(seed, ti);
    let ac = v.adapter_config(task.m, task.n);
    let mut adapter = Adapter::build(ac, DenseMatrix::zeros(task.m, task.n), adapter_seed)?;
    let opts = TrainOptions {
        seed: train_seed,
        ..cfg.train.clone()
    };
    let trace = train_adapter(&mut adapter, task, &opts).map_err(|e| match e {
        Error::Diverged { epoch, loss, trace } => {
            log::warn!("{} on {} (seed {seed}) diverged at epoch {epoch}", v.label, task.name);
            Error::Diverged { epoch, loss, trace }
        }
        other => other,
    })?;
    Ok(CellOutcome {
        variant: v.label.clone(),
        task: task.name.clone(),
        seed,
        adapter,
        trace,
        realized: task.clone(),
    })
}

fn cell_rows(cfg: &ExperimentConfig, cell: &CellOutcome) -> Result<Vec<ResultRow>> {
    let task = &cell.realized;
    let ph = Phase::BeforeMerge;
    let (v, t, s) = (cell.variant.as_str(), cell.task.as_str(), cell.seed);
    let last = cell.trace.last();
    let mut rows = vec![ResultRow::new(v, t, s, task_metric_name(task.loss), ph, last.eval_metric)];
    let ac = cell.adapter.config();
    if ac.variant != Variant::FlyLoraTrainableA {
        rows.push(ResultRow::new(v, t, s, "param-count", ph, activated_params_for(ac, task.n as u64)? as f64));
    }
    let energy = activation_energy_profile(&cell.adapter, &task.test.inputs)?;
    rows.push(ResultRow::new(v, t, s, "energy-q25", ph, energy.q25()));
    if cfg.corr_columns > 0 {
        let q = cfg.corr_columns.min(ac.r);
        let mut st = SeededStream::new(derive_seed(cell.seed, 0xC011), 0);
        let columns = st.sample_distinct(ac.r, q, &mut Vec::new());
        let count = cfg.corr_samples.clamp(1, task.test.len());
        let batch = head(&task.test, count)?;
        let corr = gradient_correlation_matrix(&cell.adapter, &batch, task.loss, &columns)?;
        rows.push(ResultRow::new(v, t, s, "offdiag-corr", ph, corr.mean_abs_offdiag));
    }
    Ok(rows)
}

fn head(d: &Dataset, count: usize) -> Result<Dataset> {
    let (n, m) = (d.inputs.cols(), d.targets.cols());
    Ok(Dataset {
        inputs: DenseMatrix::from_vec(count, n, d.inputs.as_slice()[..count * n].to_vec())?,
        targets: DenseMatrix::from_vec(count, m, d.targets.as_slice()[..count * m].to_vec())?,
        labels: d.labels.as_ref().map(|l| l[..count].to_vec()),
    })
}

/// Trains every (seed, task, variant) cell. Cells run in parallel and are
/// returned in grid order.
pub fn train_grid(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let realized: Vec<Vec<ToyTask>> = cfg
        .seeds
        .iter()
        .map(|&s| cfg.tasks.iter().map(|t| make_task(&t.realize(s))).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        for ti in 0..cfg.tasks.len() {
            for vi in 0..cfg.variants.len() {
                cells.push((si, seed, ti, vi));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(si, seed, ti, vi)| train_cell(cfg, &cfg.variants[vi], ti, &realized[si][ti], seed))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SingleTaskResults {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellOutcome>,
}

pub fn run_single_task(cfg: &ExperimentConfig) -> Result<SingleTaskResults> {
    let cells = train_grid(cfg)?;
    let mut rows = Vec::new();
    for c in &cells {
        rows.extend(cell_rows(cfg, c)?);
    }
    Ok(SingleTaskResults { rows, cells })
}

/// Split-LoRA grid at fixed total and activated rank: `E` experts of rank
/// `r/E` with `k_active / (r/E)` experts on, finest last.
pub fn granularity_sweep(total_rank: usize, active_rank: usize) -> Vec<VariantSpec> {
    let mut out = Vec::new();
    let mut rank = active_rank;
    while rank >= 1 {
        let experts = total_rank / rank;
        if experts * rank == total_rank && active_rank % rank == 0 {
            out.push(VariantSpec::split(format!("split-{experts}x{rank}"), total_rank, experts, active_rank / rank));
        }
        rank /= 2;
    }
    out
}

#[derive(Debug, Clone)]
pub struct MergeGroup {
    pub variant: String,
    pub seed: u64,
    pub report: InterferenceReport,
}

#[derive(Debug, Clone)]
pub struct MergeResults {
    pub rows: Vec<ResultRow>,
    pub groups: Vec<MergeGroup>,
}

/// Test-split metric of `W₀ + merged` on a task.
pub fn evaluate_merged(task: &ToyTask, merged: &DenseMatrix, base: &DenseMatrix) -> Result<f64> {
    let d = &task.test;
    let mut metric = 0.0;
    for i in 0..d.len() {
        let (x, y) = d.sample(i);
        let out = merged_predict(base, merged, x)?;
        metric += match (&d.labels, task.loss) {
            (Some(l), Loss::SoftmaxCrossEntropy) => f64::from(u8::from(argmax(&out) == l[i])),
            _ => out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / y.len() as f64,
        };
    }
    Ok(metric / d.len().max(1) as f64)
}

/// Trains one adapter per task, merges their updates with `w_i = 1/t`, and
/// re-evaluates every task on `W₀ + ΔW_merged`.
pub fn run_merge_experiment(cfg: &ExperimentConfig) -> Result<MergeResults> {
    if cfg.tasks.len() < 2 {
        return Err(Error::param("tasks", format!("merging needs ≥ 2 tasks, got {}", cfg.tasks.len())));
    }
    let cells = train_grid(cfg)?;
    let nv = cfg.variants.len();
    let nt = cfg.tasks.len();
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        for (vi, v) in cfg.variants.iter().enumerate() {
            let group: Vec<&CellOutcome> = (0..nt).map(|ti| &cells[(si * nt + ti) * nv + vi]).collect();
            let adapters: Vec<Adapter> = group.iter().map(|c| c.adapter.clone()).collect();
            let spec = MergeSpec::from_adapters(&adapters, None)?;
            let merged = merge_weight_average(&spec);
            let mut metrics = Vec::with_capacity(nt);
            for c in &group {
                rows.extend(cell_rows(cfg, c)?);
                let task = &c.realized;
                let name = task_metric_name(task.loss);
                let after = evaluate_merged(task, &merged, c.adapter.base())?;
                let before = c.trace.last().eval_metric;
                let tm = TaskMergeMetric::new(&c.task, name, before, after, task.loss == Loss::SoftmaxCrossEntropy);
                rows.push(ResultRow::new(&v.label, &c.task, seed, name, Phase::AfterMerge, after));
                rows.push(ResultRow::new(&v.label, &c.task, seed, "delta-pct", Phase::AfterMerge, tm.delta_pct));
                metrics.push(tm);
            }
            let report = InterferenceReport::build(&spec, metrics)?;
            rows.push(ResultRow::new(
                &v.label,
                "all",
                seed,
                "cross-term-fraction",
                Phase::AfterMerge,
                report.norms.cross_term_fraction,
            ));
            groups.push(MergeGroup {
                variant: v.label.clone(),
                seed,
                report,
            });
        }
    }
    Ok(MergeResults { rows, groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            o => Err(Error::param("format", format!("unknown report format `{o}` (csv|json)"))),
        }
    }
}

pub const CSV_HEADER: &str = "variant,task,seed,metric,phase,value";

/// `variant,task,seed,metric,phase,value`, rows in the given order. Values
/// use the shortest representation that reads back to the same `f64`.
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.task,
            r.seed,
            r.metric,
            r.phase.name(),
            r.value
        );
    }
    out
}

pub fn rows_to_json(rows: &[ResultRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)? + "\n")
}

pub fn rows_from_json(text: &str) -> Result<Vec<ResultRow>> {
    Ok(serde_json::from_str(text)?)
}

pub fn emit_report(rows: &[ResultRow], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => rows_to_csv(rows),
        ReportFormat::Json => rows_to_json(rows)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Count of paired seeds where `a < b`, and the number of pairs.
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize) {
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    (wins, a.len().min(b.len()))
}

/// Two linear-teacher tasks on shared manifold inputs, `n = 256`, `m = 32`.
fn manifold_family(count: usize, samples: usize, input: InputModel) -> Vec<TaskSpec> {
    (0..count)
        .map(|i| {
            TaskSpec::new(format!("task{i}"), TaskKind::LinearTeacher, 256, 32, samples, 0.0, 100 + i as u64)
                .with_input(input.clone())
        })
        .collect()
}

/// Frozen versus trainable sparse `A` on two tasks that share a 4-dim input
/// subspace, merged with equal weights.
pub fn merge_ablation_config(seeds: Vec<u64>) -> ExperimentConfig {
    let input = InputModel {
        shared_dims: 4,
        specific_dims: 0,
        shared_scale: 2.0,
        jitter: 0.0,
        family_seed: 7,
    };
    ExperimentConfig {
        tasks: manifold_family(2, 2560, input),
        variants: vec![
            VariantSpec::new("flylora", Variant::FlyLora, 16, 4),
            VariantSpec::new("flylora-trn", Variant::FlyLoraTrainableA, 16, 4),
        ],
        seeds,
        train: TrainOptions {
            epochs: 80,
            lr: 0.2,
            batch_size: 32,
            seed: 0,
        },
        corr_columns: 0,
        corr_samples: 0,
    }
}

/// FlyLoRA at `k = r/4` against LoRA-FA with the same frozen `A`, with the
/// gradient-correlation diagnostic over all 16 columns.
pub fn decorrelation_config(seeds: Vec<u64>) -> ExperimentConfig {
    let input = InputModel {
        shared_dims: 8,
        specific_dims: 2,
        shared_scale: 1.0,
        jitter: 0.1,
        family_seed: 7,
    };
    ExperimentConfig {
        tasks: manifold_family(1, 4096, input),
        variants: vec![
            VariantSpec::new("flylora", Variant::FlyLora, 16, 4),
            VariantSpec::new("lora-fa", Variant::LoraFa, 16, 16),
        ],
        seeds,
        train: TrainOptions {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        },
        corr_columns: 16,
        corr_samples: 256,
    }
}

/// Split-LoRA granularity grid at total rank 32 and 8 activated ranks on a
/// 32-class cluster task.
pub fn granularity_config(seeds: Vec<u64>, epochs: usize) -> ExperimentConfig {
    let mut task = TaskSpec::new("clusters", TaskKind::GaussianCluster, 256, 32, 2048, 1.0, 11);
    task.separation = 0.3;
    ExperimentConfig {
        tasks: vec![task],
        variants: granularity_sweep(32, 8),
        seeds,
        train: TrainOptions {
            epochs,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        },
        corr_columns: 0,
        corr_samples: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merging::pairwise_task_orthogonality;

    #[test]
    fn tasks_are_deterministic_and_split() {
        let a = make_synthetic_task(TaskKind::LinearTeacher, 32, 4, 100, 0.1, 5).unwrap();
        let b = make_synthetic_task(TaskKind::LinearTeacher, 32, 4, 100, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (80, 20));
        assert!(make_synthetic_task(TaskKind::LinearTeacher, 32, 4, 63, 0.1, 5).is_err());
        assert!(make_synthetic_task(TaskKind::LinearTeacher, 0, 4, 100, 0.1, 5).is_err());
    }

    #[test]
    fn noiseless_teacher_is_realizable() {
        let t = make_synthetic_task(TaskKind::LinearTeacher, 32, 4, 100, 0.0, 6).unwrap();
        for i in 0..t.test.len() {
            let (x, y) = t.test.sample(i);
            assert_eq!(t.teacher.matvec(x).unwrap(), y.to_vec());
        }
    }

    #[test]
    fn independent_teachers_barely_overlap() {
        let a = make_synthetic_task(TaskKind::LinearTeacher, 256, 32, 64, 0.0, 1).unwrap();
        let b = make_synthetic_task(TaskKind::LinearTeacher, 256, 32, 64, 0.0, 2).unwrap();
        assert!(pairwise_task_orthogonality(&a.teacher, &b.teacher).unwrap().abs() < 0.1);
    }

    #[test]
    fn cluster_float_labels_match_one_hot() {
        let t = make_synthetic_task(TaskKind::GaussianCluster, 16, 4, 200, 0.5, 3).unwrap();
        let labels = t.train.labels.as_ref().unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(t.train.targets.get(i, l), 1.0);
            assert_eq!(t.train.targets.row(i).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(t.loss, Loss::SoftmaxCrossEntropy);
    }

    #[test]
    fn manifold_inputs_live_in_the_subspace() {
        let spec = TaskSpec::new("m", TaskKind::LinearTeacher, 64, 4, 100, 0.0, 1).with_input(InputModel {
            shared_dims: 3,
            specific_dims: 2,
            shared_scale: 2.0,
            jitter: 0.0,
            family_seed: 9,
        });
        let t = make_task(&spec).unwrap();
        let mut fs = SeededStream::new(9, 0xFA);
        let v = orthonormal_basis(64, 3, &mut fs).unwrap();
        let mut ts = SeededStream::new(1, 0);
        let vi = orthonormal_basis(64, 2, &mut ts).unwrap();
        let x = t.train.inputs.row(0);
        let mut joint: Vec<Vec<f64>> = Vec::new();
        for b in v.iter().chain(&vi) {
            let mut u = b.clone();
            for q in &joint {
                crate::linalg::axpy(-dot(&u, q), q, &mut u);
            }
            let nu = crate::linalg::norm2(&u);
            joint.push(u.into_iter().map(|e| e / nu).collect());
        }
        let mut proj = vec![0.0; 64];
        for b in &joint {
            crate::linalg::axpy(dot(x, b), b, &mut proj);
        }
        let resid: f64 = x.iter().zip(&proj).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(resid < 1e-18 * dot(x, x), "residual {resid}");
    }

    #[test]
    fn energy_curve_cases() {
        let flat = energy_curve(vec![1.0; 8]);
        for (i, c) in flat.curve.iter().enumerate() {
            assert!((c - (i + 1) as f64 / 8.0).abs() < 1e-12);
        }
        let spike = energy_curve(vec![0.0, 1e9, 1e-3, 0.0]);
        assert!(spike.curve[0] > 0.999_999);
        let zero = energy_curve(vec![0.0; 4]);
        assert!(zero.degenerate);
    }

    #[test]
    fn granularity_grid_matches_budget() {
        let g = granularity_sweep(32, 8);
        let labels: Vec<&str> = g.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["split-4x8", "split-8x4", "split-16x2", "split-32x1"]);
        for v in &g {
            assert_eq!((v.r / v.experts) * v.k, 8);
        }
    }

    #[test]
    fn csv_layout_and_json_round_trip() {
        assert_eq!(rows_to_csv(&[]), "variant,task,seed,metric,phase,value\n");
        let rows = vec![
            ResultRow::new("flylora", "t0", 3, "mse", Phase::BeforeMerge, 0.125),
            ResultRow::new("flylora", "all", 3, "cross-term-fraction", Phase::AfterMerge, 1.0 / 3.0),
        ];
        let csv = rows_to_csv(&rows);
        assert!(csv.contains("flylora,t0,3,mse,before-merge,0.125\n"));
        assert_eq!(rows_from_json(&rows_to_json(&rows).unwrap()).unwrap(), rows);
    }

    #[test]
    fn sign_test_counts_strict_wins() {
        assert_eq!(sign_test(&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]), (2, 3));
    }
}
