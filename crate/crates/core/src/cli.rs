//! The `linearizer` command line: `gradcheck`, `distill`, `bench` and `ablate`.
//!
//! Every subcommand resolves its settings, writes `manifest.json` under its
//! output directory before doing any work, and accepts `--from-manifest` to
//! replay a previous run with exactly the recorded settings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchPoint, ScalingFit, SpeedupRow, DEFAULT_LENGTHS, MIN_FIT_POINTS, MIN_REPS};
use crate::checks::{self, CheckResult, DEFAULT_TOLERANCE};
use crate::distill::data::DataSource;
use crate::distill::train::{default_out_root, default_source, distill_with_teacher, prepare_teacher, write_json};
use crate::distill::{distill_run, MaskStrategy, MatchingScope, RunConfig};
use crate::error::{Error, Result};
use crate::model::MixerKind;
use crate::tensor::gradcheck::DEFAULT_EPS;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "linearizer", version, about = "Distill an attention teacher into a recurrent student")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Distill a teacher into a student and log alignment.
    Distill(DistillArgs),
    /// Time attention against the scan over sequence lengths.
    Bench(BenchArgs),
    /// Run one ablation grid at toy scale.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Replay the settings recorded in a manifest; other flags except --out are ignored.
    #[arg(long, value_name = "MANIFEST")]
    pub from_manifest: Option<PathBuf>,
    /// Output directory (default: $LINEARIZER_OUT/<command>, or runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// A check passes when its worst relative error is strictly below this.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[command(flatten)]
    pub replay: ReplayArgs,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Flat TOML config file; missing keys keep the toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of PPM/PGM images (default: synthetic shapes).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub replay: ReplayArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Comma-separated ascending sequence lengths (at least 4).
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS.to_vec())]
    pub lengths: Vec<usize>,
    /// Timed repetitions per point (at least 11).
    #[arg(long, default_value_t = MIN_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the records as JSON lines.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub replay: ReplayArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    MaskStrategy,
    MatchingScope,
    Components,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Option<Axis>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Comma-separated seeds; one row per cell and seed.
    #[arg(long, alias = "seed", value_delimiter = ',', default_values_t = vec![0u64])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub replay: ReplayArgs,
}

/// Settings and artifacts of one invocation, written before any compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub settings: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new<S: Serialize>(command: &str, seed: u64, settings: &S, artifacts: &[&str]) -> Result<Self> {
        Ok(RunManifest {
            tool: "linearizer".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            settings: serde_json::to_value(settings)
                .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    fn settings_for<S: DeserializeOwned>(&self, command: &str, path: &Path) -> Result<S> {
        if self.command != command {
            return Err(Error::Config(format!(
                "{} records a `{}` run, not `{command}`",
                path.display(),
                self.command
            )));
        }
        serde_json::from_value(self.settings.clone()).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn replayed<S: DeserializeOwned>(replay: &ReplayArgs, command: &str) -> Result<Option<S>> {
    match &replay.from_manifest {
        Some(path) => RunManifest::load(path)?.settings_for(command, path).map(Some),
        None => Ok(None),
    }
}

fn out_dir(replay: &ReplayArgs, command: &str) -> PathBuf {
    replay.out.clone().unwrap_or_else(|| default_out_root().join(command))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(create_file(path)?);
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain records serialize")
}

/// Parses arguments and runs the selected subcommand.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Distill(a) => cmd_distill(&a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => cmd_bench(&a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ExitCode::SUCCESS),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub seed: u64,
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
}

pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Worst relative error per check over `seeds` consecutive seeds, in first-seen order.
pub fn gradcheck_table(s: &GradcheckSettings) -> Result<Vec<CheckResult>> {
    if !(s.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", s.eps)));
    }
    let mut worst: Vec<CheckResult> = Vec::new();
    for seed in s.seed..s.seed + s.seeds.max(1) {
        for r in checks::run_all(seed, s.eps)? {
            match worst.iter_mut().find(|w| w.name == r.name) {
                Some(w) => w.max_rel_err = w.max_rel_err.max(r.max_rel_err),
                None => worst.push(r),
            }
        }
    }
    Ok(worst)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let s = match replayed(&a.replay, "gradcheck")? {
        Some(s) => s,
        None => GradcheckSettings {
            seed: a.seed,
            seeds: a.seeds,
            eps: a.eps,
            tolerance: a.tolerance,
        },
    };
    let dir = a.replay.out.clone();
    if let Some(dir) = &dir {
        RunManifest::new("gradcheck", s.seed, &s, &[MANIFEST_FILE, GRADCHECK_FILE])?.write(dir)?;
    }
    let table = gradcheck_table(&s)?;
    let failed: Vec<&str> = table
        .iter()
        .filter(|r| !(r.max_rel_err < s.tolerance))
        .map(|r| r.name.as_str())
        .collect();
    println!("{:<24} {:>14}  status", "check", "max_rel_err");
    for r in &table {
        let status = if r.max_rel_err < s.tolerance { "ok" } else { "FAIL" };
        println!("{:<24} {:>14.3e}  {status}", r.name, r.max_rel_err);
    }
    if let Some(dir) = &dir {
        let rows = table.iter().map(|r| {
            format!("{},{},{}", r.name, r.max_rel_err, r.max_rel_err < s.tolerance)
        });
        write_lines(
            &dir.join(GRADCHECK_FILE),
            std::iter::once("check,max_rel_err,pass".to_string()).chain(rows),
        )?;
    }
    if failed.is_empty() {
        println!("all {} checks below {:e}", table.len(), s.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub config: RunConfig,
    pub data: Option<PathBuf>,
}

fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::toy(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn data_source(cfg: &RunConfig, data: Option<&Path>) -> Result<DataSource> {
    match data {
        Some(dir) if !dir.is_dir() => Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        )),
        Some(dir) => Ok(DataSource::Directory(dir.to_path_buf())),
        None => Ok(default_source(cfg)),
    }
}

pub fn cmd_distill(a: &DistillArgs) -> Result<PathBuf> {
    let s = match replayed(&a.replay, "distill")? {
        Some(s) => s,
        None => {
            let mut config = resolve_config(a.config.as_deref(), &a.overrides)?;
            if let Some(steps) = a.steps {
                config.steps = steps;
            }
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            DistillSettings {
                config,
                data: a.data.clone(),
            }
        }
    };
    s.config.validate()?;
    let source = data_source(&s.config, s.data.as_deref())?;
    let dir = out_dir(&a.replay, "distill");
    RunManifest::new(
        "distill",
        s.config.seed,
        &s,
        &[MANIFEST_FILE, "metrics.csv", "student.json", "teacher.json", "summary.json"],
    )?
    .write(&dir)?;
    let summary = distill_run(&s.config, &source, Some(&dir))?;
    println!(
        "distilled {} steps: alignment {:.4} -> {:.4}, final loss {}",
        summary.steps,
        summary.initial_alignment,
        summary.final_alignment,
        summary.final_loss().map_or("n/a".to_string(), |l| format!("{l:.4}")),
    );
    println!("outputs in {}", dir.display());
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub d: usize,
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub json: bool,
}

pub const BENCH_POINTS_FILE: &str = "bench_points.csv";
pub const BENCH_RATIOS_FILE: &str = "bench_ratios.csv";
pub const BENCH_POINTS_JSONL: &str = "bench_points.jsonl";
pub const BENCH_RATIOS_JSONL: &str = "bench_ratios.jsonl";
pub const BENCH_FITS_FILE: &str = "bench_fits.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub attention: Vec<BenchPoint>,
    pub scan: Vec<BenchPoint>,
    pub ratios: Vec<SpeedupRow>,
    pub attention_fit: ScalingFit,
    pub scan_fit: ScalingFit,
}

pub fn check_bench_settings(s: &BenchSettings) -> Result<()> {
    if s.lengths.len() < MIN_FIT_POINTS {
        return Err(Error::InvalidArgument(format!(
            "--lengths needs at least {MIN_FIT_POINTS} values for the scaling fit, got {}",
            s.lengths.len()
        )));
    }
    if s.reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "--reps must be at least {MIN_REPS}, got {}",
            s.reps
        )));
    }
    if s.d == 0 {
        return Err(Error::InvalidArgument("--d must be positive".into()));
    }
    Ok(())
}

pub fn bench_report(s: &BenchSettings) -> Result<BenchReport> {
    check_bench_settings(s)?;
    let attention = bench::run_sweep(MixerKind::Attention, s.d, &s.lengths, s.reps, s.seed)?;
    let scan = bench::run_sweep(MixerKind::Mamba2, s.d, &s.lengths, s.reps, s.seed)?;
    let ratios = bench::speedup_report(&attention, &scan)?;
    Ok(BenchReport {
        attention_fit: bench::fit_exponent(&attention)?,
        scan_fit: bench::fit_exponent(&scan)?,
        attention,
        scan,
        ratios,
    })
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(PathBuf, BenchReport)> {
    let s = match replayed(&a.replay, "bench")? {
        Some(s) => s,
        None => BenchSettings {
            d: a.d,
            lengths: a.lengths.clone(),
            reps: a.reps,
            seed: a.seed,
            json: a.json,
        },
    };
    check_bench_settings(&s)?;
    let dir = out_dir(&a.replay, "bench");
    let mut artifacts = vec![MANIFEST_FILE, BENCH_POINTS_FILE, BENCH_RATIOS_FILE, BENCH_FITS_FILE];
    if s.json {
        artifacts.extend([BENCH_POINTS_JSONL, BENCH_RATIOS_JSONL]);
    }
    RunManifest::new("bench", s.seed, &s, &artifacts)?.write(&dir)?;
    let report = bench_report(&s)?;
    let points: Vec<&BenchPoint> = report.attention.iter().chain(&report.scan).collect();
    write_lines(
        &dir.join(BENCH_POINTS_FILE),
        std::iter::once(bench::POINTS_HEADER.to_string()).chain(points.iter().map(|p| p.csv())),
    )?;
    write_lines(
        &dir.join(BENCH_RATIOS_FILE),
        std::iter::once(bench::RATIOS_HEADER.to_string())
            .chain(report.ratios.iter().map(|r| format!("{},{}", r.l, r.ratio))),
    )?;
    if s.json {
        write_lines(&dir.join(BENCH_POINTS_JSONL), points.iter().map(json_line))?;
        write_lines(&dir.join(BENCH_RATIOS_JSONL), report.ratios.iter().map(json_line))?;
    }
    write_json(
        &dir.join(BENCH_FITS_FILE),
        &serde_json::json!({ "attention": report.attention_fit, "mamba2": report.scan_fit }),
    )?;
    println!("{:>6} {:>12} {:>12} {:>8}", "L", "attention_s", "mamba2_s", "ratio");
    for ((a, sc), r) in report.attention.iter().zip(&report.scan).zip(&report.ratios) {
        println!("{:>6} {:>12.6} {:>12.6} {:>8.2}", a.l, a.median_s, sc.median_s, r.ratio);
    }
    for (name, fit) in [("attention", report.attention_fit), ("mamba2", report.scan_fit)] {
        println!("{name} exponent {:.3} (r² {:.4})", fit.exponent, fit.r2);
    }
    println!("outputs in {}", dir.display());
    Ok((dir, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateSettings {
    pub axis: Axis,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub cell: String,
    pub seed: u64,
    pub initial_alignment: f64,
    pub final_alignment: f64,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "axis,cell,seed,initial_alignment,final_alignment,final_loss";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            axis_name(self.axis),
            self.cell,
            self.seed,
            self.initial_alignment,
            self.final_alignment,
            self.final_loss
        )
    }
}

pub fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::MaskStrategy => "mask_strategy",
        Axis::MatchingScope => "matching_scope",
        Axis::Components => "components",
    }
}

/// Cell names and the config each one runs.
pub fn ablation_cells(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::MaskStrategy => [MaskStrategy::BlockWise, MaskStrategy::TokenWise]
            .into_iter()
            .map(|m| (m.to_string(), with(&|c| c.mask_strategy = m)))
            .collect(),
        Axis::MatchingScope => [MatchingScope::ClassOnly, MatchingScope::VisibleOnly, MatchingScope::All]
            .into_iter()
            .map(|m| (m.to_string(), with(&|c| c.matching_scope = m)))
            .collect(),
        Axis::Components => vec![
            ("mask_only".into(), with(&|c| {
                c.act_loss = false;
                c.mask_loss = true;
            })),
            ("act_only".into(), with(&|c| {
                c.act_loss = true;
                c.mask_loss = false;
            })),
            ("both".into(), with(&|c| {
                c.act_loss = true;
                c.mask_loss = true;
            })),
        ],
    }
}

/// Runs every cell of `axis` for every seed. The teacher is built once per
/// seed and shared by all cells.
pub fn run_ablation(s: &AblateSettings) -> Result<Vec<AblationRow>> {
    if s.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for &seed in &s.seeds {
        let mut base = s.config.clone();
        base.seed = seed;
        let cells = ablation_cells(s.axis, &base);
        for (_, cfg) in &cells {
            cfg.validate()?;
        }
        let teacher = prepare_teacher(&base)?;
        for (cell, cfg) in cells {
            let summary = distill_with_teacher(&cfg, teacher.clone(), &default_source(&cfg), None)?;
            rows.push(AblationRow {
                axis: s.axis,
                cell,
                seed,
                initial_alignment: summary.initial_alignment,
                final_alignment: summary.final_alignment,
                final_loss: summary.final_loss().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_file(axis: Axis) -> String {
    format!("ablation_{}.csv", axis_name(axis))
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<(PathBuf, Vec<AblationRow>)> {
    let s = match replayed(&a.replay, "ablate")? {
        Some(s) => s,
        None => {
            let axis = a.axis.ok_or_else(|| {
                Error::InvalidArgument(
                    "--axis is required (mask_strategy, matching_scope or components)".into(),
                )
            })?;
            let mut config = resolve_config(a.config.as_deref(), &a.overrides)?;
            if let Some(steps) = a.steps {
                config.steps = steps;
            }
            AblateSettings {
                axis,
                preset: a.preset,
                seeds: a.seeds.clone(),
                config,
            }
        }
    };
    let dir = out_dir(&a.replay, "ablate");
    let file = ablation_file(s.axis);
    let seed = s.seeds.first().copied().unwrap_or(0);
    RunManifest::new("ablate", seed, &s, &[MANIFEST_FILE, &file])?.write(&dir)?;
    let rows = run_ablation(&s)?;
    write_lines(
        &dir.join(&file),
        std::iter::once(ABLATION_HEADER.to_string()).chain(rows.iter().map(AblationRow::csv)),
    )?;
    println!("{:<14} {:>5} {:>10} {:>10}", "cell", "seed", "alignment", "loss");
    for r in &rows {
        println!("{:<14} {:>5} {:>10.4} {:>10.4}", r.cell, r.seed, r.final_alignment, r.final_loss);
    }
    println!("outputs in {}", dir.display());
    Ok((dir, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::train::tiny_config;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("linearizer").chain(args.iter().copied()))
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn bench_flag_parsing() {
        let Command::Bench(b) = parse(&["bench"]).unwrap().command else { panic!() };
        assert_eq!(b.lengths, DEFAULT_LENGTHS.to_vec());
        assert_eq!((b.d, b.reps), (64, 11));
        let Command::Bench(b) = parse(&["bench", "--lengths", "8,16,32"]).unwrap().command else { panic!() };
        assert!(cmd_bench(&b).unwrap_err().to_string().contains("at least 4"));
        let Command::Bench(b) = parse(&["bench", "--reps", "1"]).unwrap().command else { panic!() };
        assert!(cmd_bench(&b).unwrap_err().to_string().contains("at least 11"));
    }

    #[test]
    fn unknown_axis_is_rejected() {
        assert!(parse(&["ablate", "--axis", "heads"]).is_err());
        let Command::Ablate(a) = parse(&["ablate", "--axis", "matching_scope"]).unwrap().command else { panic!() };
        assert_eq!(a.axis, Some(Axis::MatchingScope));
    }

    #[test]
    fn grids_have_the_expected_cells() {
        let base = RunConfig::toy();
        let names = |axis| ablation_cells(axis, &base).into_iter().map(|c| c.0).collect::<Vec<_>>();
        assert_eq!(names(Axis::Components), ["mask_only", "act_only", "both"]);
        assert_eq!(names(Axis::MatchingScope), ["class_only", "visible_only", "all"]);
        assert_eq!(names(Axis::MaskStrategy), ["block_wise", "token_wise"]);
    }

    #[test]
    fn zero_tolerance_fails_gradcheck() {
        let s = GradcheckSettings { seed: 0, seeds: 1, eps: DEFAULT_EPS, tolerance: 0.0 };
        let table = gradcheck_table(&s).unwrap();
        assert!(table.iter().any(|r| !(r.max_rel_err < 0.0)));
        let Command::Gradcheck(a) = parse(&["gradcheck", "--seeds", "1", "--tolerance", "0"]).unwrap().command else {
            panic!()
        };
        assert_eq!(cmd_gradcheck(&a).unwrap(), ExitCode::from(1));
    }

    #[test]
    fn distill_replays_from_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("tiny.toml");
        fs::write(&cfg_path, tiny_config().to_toml_string()).unwrap();
        let first = tmp.path().join("a");
        let args = [
            "distill", "--config", cfg_path.to_str().unwrap(), "--steps", "3", "--seed", "5",
            "--out", first.to_str().unwrap(),
        ];
        let Command::Distill(d) = parse(&args).unwrap().command else { panic!() };
        cmd_distill(&d).unwrap();
        let manifest = RunManifest::load(&first.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.seed, 5);
        assert_eq!(manifest.settings["config"]["steps"], 3);

        let second = tmp.path().join("b");
        let manifest_path = first.join(MANIFEST_FILE);
        let replay = [
            "distill", "--from-manifest", manifest_path.to_str().unwrap(),
            "--out", second.to_str().unwrap(), "--steps", "99",
        ];
        let Command::Distill(d) = parse(&replay).unwrap().command else { panic!() };
        cmd_distill(&d).unwrap();
        let read = |dir: &Path| fs::read(dir.join("metrics.csv")).unwrap();
        assert_eq!(read(&first), read(&second));
        assert_eq!(fs::read(first.join("student.json")).unwrap(), fs::read(second.join("student.json")).unwrap());
    }

    #[test]
    fn distill_reports_bad_keys_and_missing_data() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("o");
        let Command::Distill(d) = parse(&["distill", "--set", "lamda=2", "--set", "stepz=1", "--out", out.to_str().unwrap()])
            .unwrap()
            .command
        else {
            panic!()
        };
        let msg = cmd_distill(&d).unwrap_err().to_string();
        assert!(msg.contains("lamda") && msg.contains("stepz"), "{msg}");
        let missing = tmp.path().join("no_such_dir");
        let Command::Distill(d) = parse(&["distill", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .unwrap()
            .command
        else {
            panic!()
        };
        assert!(cmd_distill(&d).unwrap_err().to_string().contains("no_such_dir"));
    }

    #[test]
    fn manifest_for_another_command_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let m = RunManifest::new("bench", 0, &serde_json::json!({}), &[]).unwrap();
        m.write(tmp.path()).unwrap();
        let path = tmp.path().join(MANIFEST_FILE);
        let Command::Distill(d) = parse(&["distill", "--from-manifest", path.to_str().unwrap()]).unwrap().command else {
            panic!()
        };
        assert!(cmd_distill(&d).unwrap_err().to_string().contains("bench"));
    }

    #[test]
    fn tiny_ablation_has_one_row_per_cell() {
        let mut cfg = tiny_config();
        cfg.steps = 2;
        cfg.student_dim = cfg.teacher_dim;
        for (axis, n) in [(Axis::Components, 3), (Axis::MatchingScope, 3), (Axis::MaskStrategy, 2)] {
            let s = AblateSettings { axis, preset: Preset::Toy, seeds: vec![1], config: cfg.clone() };
            let rows = run_ablation(&s).unwrap();
            assert_eq!(rows.len(), n);
            assert!(rows.iter().all(|r| r.final_alignment.is_finite() && r.final_loss.is_finite()));
        }
    }
}
