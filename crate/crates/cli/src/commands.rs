use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flylora::adapters::{load_checkpoint, save_checkpoint};
use flylora::experiments::{
    emit_report, granularity_sweep, rows_from_json, run_merge_experiment, run_single_task, ReportFormat, ResultRow,
    VariantSpec,
};
use flylora::linalg::{flymat, SeededStream};
use flylora::merging::{merge_weight_average, InterferenceReport, MergeSpec};
use flylora::projection::{make_sparse_projection, verify_distance_preservation, verify_orthogonality};
use flylora::training::{covariance_attenuation, finite_diff_check, GradCovConfig};
use flylora::{Adapter, DenseMatrix, FlyMat, ProjectionSpec};

use crate::config::{ConfigError, KvConfig};
use crate::{Cli, Command, Format, Check, VerifyArgs};

pub const SEED_ENV: &str = "FLYLORA_SEED";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Violated(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) | Failure::Violated(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) | Failure::Violated(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<flylora::Error> for Failure {
    fn from(e: flylora::Error) -> Self {
        match e {
            flylora::Error::InvalidParameter { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Outcome {
    if let Some(dir) = path.parent() {
        io(dir, std::fs::create_dir_all(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    io(path, std::fs::write(path, text + "\n"))
}

/// `--seed`, else the file's `seeds`, else `FLYLORA_SEED`, else 0.
fn resolve_seeds(cli: &Cli, cfg: &KvConfig) -> Result<Vec<u64>, Failure> {
    if let Some(s) = cli.seed {
        return Ok(vec![s]);
    }
    if cfg.is_set("seeds") {
        return Ok(cfg.seeds()?);
    }
    Ok(vec![env_seed()?.unwrap_or(0)])
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn single_seed(cli: &Cli) -> Result<u64, Failure> {
    Ok(cli.seed.or(env_seed()?).unwrap_or(0))
}

fn load_config(path: Option<&PathBuf>) -> Result<KvConfig, Failure> {
    match path {
        Some(p) => Ok(KvConfig::load(p)?),
        None => Ok(KvConfig::default()),
    }
}

fn report_format(cfg: &KvConfig) -> Result<ReportFormat, Failure> {
    Ok(cfg.get("format")?)
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenProj { n, r, p } => gen_proj(cli, *n, *r, p.unwrap_or(n / 4)),
        Command::Verify { which, args } => verify(cli, *which, args),
        Command::Gradcheck { config } => gradcheck(cli, &load_config(config.as_ref())?),
        Command::Train { config } => train(cli, &load_config(Some(config))?),
        Command::Merge { config } => merge(cli, &load_config(Some(config))?),
        Command::Sweep { config } => sweep(cli, &load_config(config.as_ref())?),
        Command::Report { input, format } => report(cli, input, *format),
    }
}

fn gen_proj(cli: &Cli, n: usize, r: usize, p: usize) -> Outcome {
    let seed = single_seed(cli)?;
    let spec = ProjectionSpec::new(n, r, p, seed)?;
    let a = make_sparse_projection(&spec)?;
    let path = cli.out.join("projection.flymat");
    io(&cli.out, std::fs::create_dir_all(&cli.out))?;
    flymat::save(&path, &FlyMat::Sparse(a.clone()))?;
    println!(
        "wrote {} ({r}x{n}, {p} nonzeros per row, seed {seed}, checksum {:016x})",
        path.display(),
        a.checksum()
    );
    Ok(())
}

fn verify(cli: &Cli, which: Check, args: &VerifyArgs) -> Outcome {
    let seed = single_seed(cli)?;
    let dir = cli.out.join("verify");
    let run = |t: Check| -> Result<bool, Failure> {
        match t {
            Check::Thm1 => verify_thm1(&dir, args, seed),
            Check::Thm2 => verify_thm2(&dir, args, seed),
            Check::Thm3 => verify_thm3(&dir, args, seed),
            Check::All => unreachable!(),
        }
    };
    let list = match which {
        Check::All => vec![Check::Thm1, Check::Thm2, Check::Thm3],
        t => vec![t],
    };
    let mut failed = Vec::new();
    for t in list {
        if !run(t)? {
            failed.push(format!("{t:?}").to_lowercase());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violated(format!("violated: {}", failed.join(", "))))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn verify_thm1(dir: &Path, a: &VerifyArgs, seed: u64) -> Result<bool, Failure> {
    let (n, r, p) = (a.n.unwrap_or(1024), a.r.unwrap_or(64), a.p.unwrap_or(256));
    let (eps, trials) = (a.eps.unwrap_or(0.5), a.trials.unwrap_or(10_000));
    let spec = ProjectionSpec::new(n, r, p, seed)?;
    let rep = verify_distance_preservation(&spec, eps, trials, seed)?;
    let mut summary = rep.clone();
    summary.ratios.clear();
    write_json(&dir.join("thm1.json"), &summary)?;
    let ok = rep.bound_holds();
    println!(
        "thm1 {}: n={n} r={r} p={p} eps={eps} trials={trials} success rate {:.4} >= bound {:.4}",
        verdict(ok),
        rep.success_rate,
        rep.theoretical_bound
    );
    Ok(ok)
}

fn verify_thm2(dir: &Path, a: &VerifyArgs, seed: u64) -> Result<bool, Failure> {
    let (r, k, samples) = (a.r.unwrap_or(32), a.k.unwrap_or(8), a.samples.unwrap_or(100_000));
    let rep = covariance_attenuation(&GradCovConfig::new(r, k, samples, seed))?;
    write_json(&dir.join("thm2.json"), &rep)?;
    let ok = if rep.expected == 0.0 {
        rep.ratio.abs() <= 0.005
    } else {
        rep.relative_error() <= 0.2
    };
    println!(
        "thm2 {}: r={r} k={k} samples={samples} ratio {:.5} vs k(k-1)/(r(r-1)) = {:.5} ({:.1}% off, tolerance 20%)",
        verdict(ok),
        rep.ratio,
        rep.expected,
        100.0 * rep.relative_error()
    );
    Ok(ok)
}

fn verify_thm3(dir: &Path, a: &VerifyArgs, seed: u64) -> Result<bool, Failure> {
    let (n, r, p) = (a.n.unwrap_or(4096), a.r.unwrap_or(32), a.p.unwrap_or(1024));
    let (eps, pairs) = (a.eps.unwrap_or(1.0), a.pairs.unwrap_or(200));
    let spec = ProjectionSpec::new(n, r, p, seed)?;
    let rep = verify_orthogonality(&spec, eps, pairs, seed)?;
    write_json(&dir.join("thm3.json"), &rep)?;
    let ok = rep.variance_relative_error() <= 0.1 && rep.tail_holds();
    println!(
        "thm3 {}: n={n} r={r} p={p} pairs={pairs} entry variance {:.4e} vs {:.4e} ({:.1}% off, tolerance 10%); tail {:.4} vs bound {:.4}{}",
        verdict(ok),
        rep.entry_variance,
        rep.theoretical_entry_variance,
        100.0 * rep.variance_relative_error(),
        rep.tail_estimate,
        rep.chebyshev_bound,
        if rep.bound_informative { "" } else { " (uninformative)" }
    );
    Ok(ok)
}

const GRADCHECK_TOLERANCE: f64 = 1e-6;

fn gradcheck(cli: &Cli, cfg: &KvConfig) -> Outcome {
    let seed = single_seed(cli)?;
    let variants = if cfg.is_set("variants") {
        cfg.variants()?
    } else {
        let c = KvConfig::parse(
            "variants = flylora:16:4, lora:16:16, lora-fa:16:16, flylora-trn:16:4, split-lora:16:4:8",
        )?;
        c.variants()?
    };
    let (n, m): (usize, usize) = (cfg.get("n")?, cfg.get("m")?);
    let step: f64 = cfg.get("step")?;
    let instances: usize = cfg.get("instances")?;
    if instances == 0 {
        return Err(Failure::Usage("config key `instances`: need at least one".into()));
    }
    let mut results = BTreeMap::new();
    let mut worst: f64 = 0.0;
    for (vi, v) in variants.iter().enumerate() {
        let ac = v.adapter_config(m, n);
        let mut errs = Vec::with_capacity(instances);
        for i in 0..instances as u64 {
            let mut s = SeededStream::new(seed, 1000 * vi as u64 + i);
            let base = DenseMatrix::from_vec(m, n, s.normal_vec(m * n))?.scaled(0.1);
            let mut ad = Adapter::build(ac.clone(), base, seed.wrapping_add(i))?;
            *ad.b_mut() = DenseMatrix::from_vec(m, ac.r, s.normal_vec(m * ac.r))?;
            let x = s.normal_vec(n);
            let target = s.normal_vec(m);
            errs.push(finite_diff_check(&ad, &x, &target, step)?.max_rel_error);
        }
        let max = errs.iter().cloned().fold(0.0, f64::max);
        println!("{}: max relative error {max:.3e} over {instances} instances", v.label);
        worst = worst.max(max);
        results.insert(v.label.clone(), errs);
    }
    write_json(&cli.out.join("gradcheck.json"), &results)?;
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Violated(format!("gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:e}")))
    }
}

fn report_path(out: &Path, stem: &str, format: ReportFormat) -> PathBuf {
    out.join(match format {
        ReportFormat::Csv => format!("{stem}.csv"),
        ReportFormat::Json => format!("{stem}.json"),
    })
}

fn train(cli: &Cli, cfg: &KvConfig) -> Outcome {
    let seeds = resolve_seeds(cli, cfg)?;
    let exp = cfg.experiment(cfg.variants()?, seeds)?;
    let format = report_format(cfg)?;
    let save: bool = cfg.get("checkpoints")?;
    let res = run_single_task(&exp)?;
    for c in &res.cells {
        let stem = format!("{}_{}_s{}", file_label(&c.variant), file_label(&c.task), c.seed);
        let trace = cli.out.join("traces").join(format!("{stem}.csv"));
        io(&cli.out.join("traces"), std::fs::create_dir_all(cli.out.join("traces")))?;
        io(&trace, std::fs::write(&trace, c.trace.to_csv()))?;
        if save {
            save_checkpoint(cli.out.join("checkpoints").join(&stem), &c.adapter, c.seed)?;
        }
        let last = c.trace.last();
        println!(
            "{} {} seed {}: eval loss {:.6}, metric {:.6}",
            c.variant, c.task, c.seed, last.eval_loss, last.eval_metric
        );
    }
    let path = report_path(&cli.out, "report", format);
    emit_report(&res.rows, &path, format)?;
    println!("wrote {} ({} rows)", path.display(), res.rows.len());
    Ok(())
}

fn merge(cli: &Cli, cfg: &KvConfig) -> Outcome {
    if cfg.is_set("adapters") {
        return merge_checkpoints(cli, cfg);
    }
    let tasks: usize = cfg.get("tasks")?;
    if tasks < 2 {
        return Err(Failure::Usage(format!("config key `tasks`: merging needs at least 2 tasks, got {tasks}")));
    }
    let seeds = resolve_seeds(cli, cfg)?;
    let exp = cfg.experiment(cfg.variants()?, seeds)?;
    let format = report_format(cfg)?;
    let res = run_merge_experiment(&exp)?;
    for g in &res.groups {
        let name = format!("interference_{}_s{}.json", file_label(&g.variant), g.seed);
        write_json(&cli.out.join(name), &g.report)?;
        println!(
            "{} seed {}: mean delta {:.3}%, cross-term fraction {:.5}, mean |cos| {:.5}",
            g.variant,
            g.seed,
            g.report.mean_delta_pct(),
            g.report.norms.cross_term_fraction,
            g.report.mean_abs_inner_product()
        );
    }
    let path = report_path(&cli.out, "merge", format);
    emit_report(&res.rows, &path, format)?;
    println!("wrote {} ({} rows)", path.display(), res.rows.len());
    Ok(())
}

fn merge_checkpoints(cli: &Cli, cfg: &KvConfig) -> Outcome {
    let dirs = cfg.list("adapters");
    if dirs.len() < 2 {
        return Err(Failure::Usage(format!(
            "config key `adapters`: merging needs at least 2 adapters, got {}",
            dirs.len()
        )));
    }
    let base_dir = cfg
        .source
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let adapters = dirs
        .iter()
        .map(|d| load_checkpoint(base_dir.join(d)).map(|(a, _)| a))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = MergeSpec::from_adapters(&adapters, None)?;
    let merged = merge_weight_average(&spec);
    let report = InterferenceReport::build(&spec, Vec::new())?;
    io(&cli.out, std::fs::create_dir_all(&cli.out))?;
    flymat::save(cli.out.join("merged_delta.flymat"), &FlyMat::Dense(merged))?;
    write_json(&cli.out.join("interference.json"), &report)?;
    println!(
        "merged {} adapters: cross-term fraction {:.5}, mean |cos| {:.5}",
        dirs.len(),
        report.norms.cross_term_fraction,
        report.mean_abs_inner_product()
    );
    Ok(())
}

fn sweep(cli: &Cli, cfg: &KvConfig) -> Outcome {
    if cfg.is_set("variants") {
        return Err(Failure::Usage(
            "config key `variants`: sweep builds its grid from total_rank and active_rank".into(),
        ));
    }
    let (total, active): (usize, usize) = (cfg.get("total_rank")?, cfg.get("active_rank")?);
    let mut grid: Vec<VariantSpec> = granularity_sweep(total, active);
    if grid.is_empty() {
        return Err(Failure::Usage(format!(
            "config key `active_rank`: no expert size divides both {total} and {active}"
        )));
    }
    for v in &mut grid {
        v.rho = cfg.get("rho")?;
    }
    let seeds = resolve_seeds(cli, cfg)?;
    let exp = cfg.experiment(grid, seeds)?;
    let format = report_format(cfg)?;
    let res = run_single_task(&exp)?;
    for c in &res.cells {
        let last = c.trace.last();
        println!("{} {} seed {}: eval loss {:.6}, metric {:.6}", c.variant, c.task, c.seed, last.eval_loss, last.eval_metric);
    }
    let path = report_path(&cli.out, "sweep", format);
    emit_report(&res.rows, &path, format)?;
    println!("wrote {} ({} rows)", path.display(), res.rows.len());
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<ResultRow>, Failure> {
    let text = io(path, std::fs::read_to_string(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        return rows_from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn report(cli: &Cli, input: &Path, format: Format) -> Outcome {
    let rows = read_rows(input)?;
    let format = match format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    let path = report_path(&cli.out, "report", format);
    emit_report(&rows, &path, format)?;
    let mut groups: BTreeMap<(String, String, &str), (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = groups.entry((r.variant.clone(), r.metric.clone(), r.phase.name())).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    println!("variant,metric,phase,mean,count");
    for ((v, m, p), (sum, n)) in groups {
        println!("{v},{m},{p},{},{n}", sum / n as f64);
    }
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}
