use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use augdyn::augmentation::augment_dataset;
use augdyn::baselines::{baseline_report, LinearKind};
use augdyn::diagnostics::check_ginit;
use augdyn::distribution::{dataset_stats, generate_dataset, Dataset};
use augdyn::harness::{self, RunRecord, ScenarioName, ScenarioSpec, SweepAxis};
use augdyn::io::{self, SampleFormat};
use augdyn::network::init_weights;

/// Multi-view data, feature-permutation augmentation and gradient-descent
/// dynamics of a patch-wise convolutional network.
#[derive(Parser, Debug)]
#[command(name = "augdyn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file with scenario fields; defaults to the command's preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Maximum concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Trajectory stride; envelope monitoring needs 1.
    #[arg(long, global = true)]
    record_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    Gen {
        #[arg(long)]
        augment: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
    /// Check the initialization conditions on a fresh dataset.
    CheckInit {
        #[arg(long)]
        augment: bool,
    },
    /// Train once and write the trajectory, model and diagnostics.
    Train {
        /// Dataset directory written by `gen`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        augment: bool,
    },
    /// Run a named scenario over its seeds.
    Scenario { name: String },
    /// Sweep one axis of a scenario.
    Sweep {
        #[arg(long, default_value = "scaling")]
        scenario: String,
        /// One of n, sigma_xi, sigma_0, rho_2, p, K.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Fit the linear baselines and score them per view.
    Baseline {
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Rebuild a report from the run records under the given directories.
    Report { inputs: Vec<PathBuf> },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Mean,
    MaxmarginClosed,
    MaxmarginOracle,
}

impl From<KindArg> for LinearKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mean => LinearKind::Mean,
            KindArg::MaxmarginClosed => LinearKind::MaxmarginClosed,
            KindArg::MaxmarginOracle => LinearKind::MaxmarginOracle,
        }
    }
}

impl Command {
    fn tag(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::CheckInit { .. } => "check-init",
            Command::Train { .. } => "train",
            Command::Scenario { .. } => "scenario",
            Command::Sweep { .. } => "sweep",
            Command::Baseline { .. } => "baseline",
            Command::Report { .. } => "report",
        }
    }
}

fn load_spec(common: &Common, default: ScenarioName) -> Result<ScenarioSpec> {
    let mut spec = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<ScenarioSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ScenarioSpec::preset(default),
    };
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    if let Some(r) = common.record_every {
        spec.train.record_every = r;
        if r != 1 && spec.monitor.take().is_some() {
            eprintln!("note: envelope monitoring needs every step recorded; disabled for --record-every {r}");
        }
    }
    Ok(spec)
}

fn first_seed(spec: &ScenarioSpec) -> Result<u64> {
    spec.seeds.first().copied().ok_or_else(|| anyhow!("the seed list is empty"))
}

fn make_run_dir(out: &Path, tag: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for k in 0.. {
        let name = if k == 0 { format!("{stamp}-{tag}") } else { format!("{stamp}-{tag}-{k}") };
        let dir = out.join(name);
        if fs::create_dir(&dir).is_ok() {
            return Ok(dir);
        }
    }
    unreachable!()
}

fn list_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            list_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'a str,
    started: String,
    spec: Option<&'a ScenarioSpec>,
}

fn print_assertions(records: &[RunRecord]) {
    for r in records {
        for a in &r.assertions {
            let verdict = if a.pass { "pass" } else { "FAIL" };
            println!("[{verdict}] {} seed {} {}: {}", r.scenario.as_str(), r.seed, a.name, a.detail);
        }
    }
}

fn dataset_for(spec: &ScenarioSpec, seed: u64, augment: bool) -> Result<Dataset> {
    let d = generate_dataset(&spec.dist, spec.n, spec.mode, harness::dataset_seed(seed))?;
    Ok(if augment { augment_dataset(&d)? } else { d })
}

/// Returns whether every check passed.
fn execute(cli: &Cli, run_dir: &Path) -> Result<bool> {
    let common = &cli.common;
    let started = chrono::Utc::now().to_rfc3339();
    let mut spec_used: Option<ScenarioSpec> = None;
    let pass = match &cli.command {
        Command::Gen { augment, format } => {
            let spec = load_spec(common, ScenarioName::Thm1)?;
            let seed = first_seed(&spec)?;
            let ds = dataset_for(&spec, seed, *augment)?;
            let fmt = match format {
                FormatArg::Csv => SampleFormat::Csv,
                FormatArg::Bin => SampleFormat::Bin,
            };
            io::write_dataset(&run_dir.join("dataset"), &ds, fmt)?;
            io::write_json(&run_dir.join("dataset_stats.json"), &dataset_stats(&ds))?;
            println!("wrote {} samples", ds.len());
            spec_used = Some(spec);
            true
        }
        Command::CheckInit { augment } => {
            let spec = load_spec(common, ScenarioName::Thm1)?;
            let seed = first_seed(&spec)?;
            let ds = dataset_for(&spec, seed, *augment)?;
            let m = init_weights(spec.model.channels, spec.dist.d, spec.model.q, spec.train.sigma_0, harness::init_seed(seed));
            let report = check_ginit(&m, &ds, spec.train.sigma_0, spec.ginit);
            io::write_json(&run_dir.join("ginit_report.json"), &report)?;
            for c in &report.conditions {
                println!("[{}] {}", if c.pass { "pass" } else { "FAIL" }, c.name);
            }
            spec_used = Some(spec);
            report.pass
        }
        Command::Train { data, augment } => {
            let spec = load_spec(common, ScenarioName::Thm1)?;
            let seed = first_seed(&spec)?;
            let ds = match data {
                Some(dir) => {
                    let ds = io::read_dataset(dir)?;
                    if *augment { augment_dataset(&ds)? } else { ds }
                }
                None => dataset_for(&spec, seed, *augment)?,
            };
            let arm = harness::train_on(&spec, seed, &ds, "train")?;
            let mut files = Vec::new();
            harness::write_arm(run_dir, &arm, &mut files)?;
            io::write_json(&run_dir.join("arm.json"), &arm)?;
            println!("stop_time = {:?}, final min margin = {:.4}", arm.stop_time, arm.final_min_margin);
            if let Some(t) = &arm.test {
                println!("test error = {:.4}", t.error());
            }
            spec_used = Some(spec);
            arm.stop_time.is_some()
        }
        Command::Scenario { name } => {
            let wanted = ScenarioName::parse(name).ok_or_else(|| anyhow!("unknown scenario {name:?}"))?;
            let spec = load_spec(common, wanted)?;
            if spec.name != wanted {
                bail!("config describes scenario {:?}, not {name:?}", spec.name.as_str());
            }
            let records = harness::run_scenario(&spec, common.jobs)?;
            harness::emit_report(&records, run_dir)?;
            print_assertions(&records);
            spec_used = Some(spec);
            records.iter().all(RunRecord::passed)
        }
        Command::Sweep { scenario, axis, grid } => {
            let wanted = ScenarioName::parse(scenario).ok_or_else(|| anyhow!("unknown scenario {scenario:?}"))?;
            let axis = SweepAxis::parse(axis).ok_or_else(|| anyhow!("unknown axis {axis:?}"))?;
            let spec = load_spec(common, wanted)?;
            let result = harness::sweep(&spec, axis, grid, common.jobs)?;
            harness::emit_report(&result.records, run_dir)?;
            io::write_json(&run_dir.join("sweep_failures.json"), &result.failures)?;
            if spec.name == ScenarioName::Cutoff {
                let t = harness::cutoff_transition(&result.records)?;
                io::write_json(&run_dir.join("cutoff_transition.json"), &t)?;
                println!("cutoff midpoint {:?} vs rho_cut {:.4e}", t.midpoint, t.rho_cut);
            } else {
                match harness::fit_scaling(&result.records, axis) {
                    Ok(fit) => {
                        println!("slope {:.3}, R^2 {:.3}", fit.slope, fit.r_squared);
                        io::write_json(&run_dir.join("scaling_fit.json"), &fit)?;
                    }
                    Err(e) => eprintln!("no scaling fit: {e}"),
                }
            }
            for f in &result.failures {
                eprintln!("run at {} = {} seed {} failed: {}", axis.as_str(), f.value, f.seed, f.error);
            }
            spec_used = Some(spec);
            result.failures.is_empty() && result.records.iter().all(RunRecord::passed)
        }
        Command::Baseline { kind } => {
            let spec = load_spec(common, ScenarioName::Cutoff)?;
            let seed = first_seed(&spec)?;
            let ds = dataset_for(&spec, seed, false)?;
            let kinds: Vec<LinearKind> = match kind {
                Some(k) => vec![(*k).into()],
                None => vec![LinearKind::Mean, LinearKind::MaxmarginClosed, LinearKind::MaxmarginOracle],
            };
            let reports = kinds
                .into_iter()
                .map(|k| baseline_report(&ds, k, spec.model.q, spec.n_test, harness::test_seed(seed)))
                .collect::<augdyn::Result<Vec<_>>>()?;
            for r in &reports {
                println!("{:?}: per-view accuracy {:?}", r.kind, r.per_view_accuracy);
            }
            io::write_json(&run_dir.join("baseline_report.json"), &reports)?;
            spec_used = Some(spec);
            true
        }
        Command::Report { inputs } => {
            if inputs.is_empty() {
                bail!("report needs at least one input directory");
            }
            let mut found = Vec::new();
            for dir in inputs {
                list_files(dir, &mut found)?;
            }
            found.retain(|p| p.file_name().is_some_and(|n| n == "record.json"));
            found.sort();
            let records =
                found.iter().map(|p| io::read_json::<RunRecord>(p)).collect::<augdyn::Result<Vec<_>>>()?;
            harness::emit_report(&records, run_dir)?;
            println!("collected {} records", records.len());
            records.iter().all(RunRecord::passed)
        }
    };
    let info = RunInfo {
        command: cli.command.tag(),
        args: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        started,
        spec: spec_used.as_ref(),
    };
    io::write_json(&run_dir.join("run.json"), &info)?;
    let mut files = Vec::new();
    list_files(run_dir, &mut files)?;
    let manifest = io::build_manifest(run_dir, &files)?;
    io::write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = make_run_dir(&cli.common.out, cli.command.tag()).and_then(|dir| {
        println!("run directory: {}", dir.display());
        execute(&cli, &dir)
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
