// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: extraction, calibration, evaluation, queries,
//! benchmarks and synthetic data.
//!
//! Exit codes: 0 success (or ID verdict), 1 error, 2 OOD verdict from `query`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use napmon::bench::{bench_judge, bench_latency, BenchRow, CSV_HEADER};
use napmon::eval::{layer_table, run_odtest, Evaluation};
use napmon::extraction::extract_layer;
use napmon::monitor::LayerActivations;
use napmon::synth::SyntheticTriplet;
use napmon::{
    calibrate, evaluate, fit_thresholds, load_monitor, read_dump, save_monitor, save_store, synth_generate, Criterion,
    MonitorBundle, OdTestConfig, PatternStore, PoolType, SearchSpace, SyntheticSpec, ThresholdMode, Verdict,
    VoteScheme,
};

#[derive(Parser)]
#[command(
    name = "napmon",
    version,
    about = "OOD detection from binary neuron activation patterns"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Seed {
    /// RNG seed for every randomized step.
    #[arg(long)]
    seed: Option<u64>,
}

impl Seed {
    fn get(self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Max,
    Avg,
}

impl From<Pool> for PoolType {
    fn from(p: Pool) -> Self {
        match p {
            Pool::Max => PoolType::Max,
            Pool::Avg => PoolType::Avg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerPattern,
    PerPosition,
}

impl From<Mode> for ThresholdMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerPattern => ThresholdMode::PerPattern,
            Mode::PerPosition => ThresholdMode::PerPosition,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Accuracy,
    Threshold,
    Hybrid,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Accuracy => Criterion::Accuracy,
            CriterionArg::Threshold => Criterion::Threshold,
            CriterionArg::Hybrid => Criterion::Hybrid,
        }
    }
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Table,
}

fn scheme(n: u8) -> VoteScheme {
    if n == 2 {
        VoteScheme::Scheme2
    } else {
        VoteScheme::Scheme1
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// 1 = summed scaled margins, 2 = majority vote.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    scheme: u8,
    #[arg(long, value_enum, default_value = "hybrid")]
    criterion: CriterionArg,
    #[arg(long, value_enum, default_value = "per-pattern")]
    mode: Mode,
    /// Comma-separated percentile grid; defaults to the built-in grid.
    #[arg(long, value_delimiter = ',')]
    p_grid: Option<Vec<f64>>,
}

impl SearchArgs {
    fn space(&self) -> SearchSpace {
        let mut space = SearchSpace {
            mode: self.mode.into(),
            criterion: self.criterion.into(),
            ..SearchSpace::default()
        };
        if let Some(grid) = &self.p_grid {
            space.p_grid.clone_from(grid);
        }
        space
    }
}

#[derive(Subcommand)]
enum Command {
    /// Binarize one layer of a dump and write its pattern store.
    Extract {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        p: f64,
        #[arg(long, value_enum, default_value = "max")]
        pool: Pool,
        #[arg(long, value_enum, default_value = "per-pattern")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: Seed,
    },
    /// Fit a monitor on ID training data against a validation OOD set.
    Calibrate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: Seed,
    },
    /// Score a saved monitor on held-out ID data versus a test OOD set.
    Evaluate {
        #[arg(long)]
        monitor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        id_eval: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        seed: Seed,
    },
    /// Judge samples; prints one JSON verdict per line.
    Query {
        #[arg(long)]
        monitor: PathBuf,
        /// A dump directory, or a JSON object mapping layer names to values.
        #[arg(long)]
        sample: PathBuf,
        /// Sample row within a dump directory; all rows when omitted.
        #[arg(long)]
        index: Option<usize>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Measure query latency on random stores; writes CSV.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        /// Also time the multi-index search.
        #[arg(long)]
        indexed: bool,
        /// Time full judge calls over this many layers instead.
        #[arg(long)]
        judge_layers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Generate synthetic train/validation/test dumps.
    Synth {
        /// JSON spec; the built-in reference spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[command(flatten)]
        seed: Seed,
    },
    /// Full three-dataset protocol: split D_s, calibrate on D_v, test on D_t.
    Odtest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        seed: Seed,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit(report: Option<&Path>, text: &str) -> Result<()> {
    match report {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn evaluation_table(e: &Evaluation) -> String {
    let mut s = format!(
        "test_accuracy  {:.4}\ntest_auroc     {}\ntest samples   {} ID / {} OOD\nlatency        {:.6} s/sample\n\n",
        e.accuracy,
        e.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
        e.n_id,
        e.n_ood,
        e.latency_s
    );
    s.push_str(&layer_table(&e.per_layer));
    s
}

fn extract(dump: &Path, layer: &str, p: f64, pool: Pool, mode: Mode, out: &Path) -> Result<()> {
    let dump = read_dump(dump).with_context(|| format!("reading dump {}", dump.display()))?;
    let data = dump.layer(layer)?;
    let cfg = fit_thresholds(data, p, pool.into(), mode.into())?;
    let patterns = extract_layer(data, &cfg)?;
    let store = PatternStore::build(&patterns, layer)?;
    save_store(out, &store).with_context(|| format!("writing {}", out.display()))?;
    let summary = serde_json::json!({
        "layer": layer,
        "bit_len": store.bit_len(),
        "patterns": store.total_count(),
        "unique": store.len(),
        "binarization": cfg,
    });
    println!("{summary}");
    Ok(())
}

fn calibrate_cmd(train: &Path, valid: &Path, search: &SearchArgs, out: &Path) -> Result<()> {
    let train = read_dump(train).with_context(|| format!("reading dump {}", train.display()))?;
    let valid = read_dump(valid).with_context(|| format!("reading dump {}", valid.display()))?;
    let cal = calibrate(&train, &valid, &search.space(), search.k, scheme(search.scheme))?;
    let bundle = MonitorBundle {
        monitor: cal.monitor,
        validation_accuracy: Some(cal.val_accuracy),
    };
    save_monitor(out, &bundle).with_context(|| format!("writing monitor {}", out.display()))?;
    let layers: Vec<_> = bundle.monitor.config().layers().iter().collect();
    println!(
        "{}",
        serde_json::json!({ "validation_accuracy": cal.val_accuracy, "layers": layers })
    );
    Ok(())
}

#[derive(Serialize)]
struct QueryLine<'a> {
    sample: usize,
    #[serde(flatten)]
    verdict: &'a Verdict,
}

/// Returns whether any judged sample was OOD.
fn query(monitor: &Path, sample: &Path, index: Option<usize>) -> Result<bool> {
    let bundle = load_monitor(monitor).with_context(|| format!("loading monitor {}", monitor.display()))?;
    let monitor = &bundle.monitor;
    let mut out = std::io::stdout().lock();
    let mut any_ood = false;
    let mut report = |i: usize, v: Verdict| -> Result<()> {
        any_ood |= v.is_ood;
        serde_json::to_writer(&mut out, &QueryLine { sample: i, verdict: &v })?;
        writeln!(out)?;
        Ok(())
    };
    if sample.is_dir() {
        let dump = read_dump(sample).with_context(|| format!("reading dump {}", sample.display()))?;
        let rows: Vec<usize> = match index {
            Some(i) if i >= dump.sample_count() => {
                bail!("sample index {i} out of range for {} samples", dump.sample_count())
            }
            Some(i) => vec![i],
            None => (0..dump.sample_count()).collect(),
        };
        for i in rows {
            report(i, monitor.judge(&dump.sample(i))?)?;
        }
    } else {
        let text = fs::read_to_string(sample).with_context(|| format!("reading {}", sample.display()))?;
        let values: BTreeMap<String, Vec<f32>> =
            serde_json::from_str(&text).context("sample file must map layer names to arrays")?;
        if index.is_some_and(|i| i != 0) {
            bail!("a sample file holds exactly one sample");
        }
        report(0, monitor.judge(&values as &dyn LayerActivations)?)?;
    }
    Ok(any_ood)
}

fn bench(
    sizes: &[usize],
    bits: &[usize],
    queries: usize,
    indexed: bool,
    judge: Option<usize>,
    out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let rows: Vec<BenchRow> = match judge {
        Some(layers) => {
            let mut rows = Vec::new();
            for &b in bits {
                for &s in sizes {
                    rows.push(bench_judge(layers, s, b, queries, seed)?);
                }
            }
            rows
        }
        None => bench_latency(sizes, bits, queries, indexed, seed)?,
    };
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    emit(out, &csv)
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::reference(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let triplet: SyntheticTriplet = synth_generate(&spec)?;
    triplet
        .write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    write_json(&out.join("spec.json"), &spec)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Extract {
            dump,
            layer,
            p,
            pool,
            mode,
            out,
            ..
        } => extract(&dump, &layer, p, pool, mode, &out)?,
        Command::Calibrate {
            train,
            valid,
            search,
            out,
            ..
        } => calibrate_cmd(&train, &valid, &search, &out)?,
        Command::Evaluate {
            monitor,
            test,
            id_eval,
            report,
            format,
            seed,
        } => {
            let bundle = load_monitor(&monitor).with_context(|| format!("loading monitor {}", monitor.display()))?;
            let test = read_dump(&test).with_context(|| format!("reading dump {}", test.display()))?;
            let id_eval = read_dump(&id_eval).with_context(|| format!("reading dump {}", id_eval.display()))?;
            let e = evaluate(&bundle.monitor, &id_eval, &test, seed.get())?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&e)? + "\n",
                Format::Table => evaluation_table(&e),
            };
            emit(report.as_deref(), &text)?;
        }
        Command::Query {
            monitor, sample, index, ..
        } => {
            if query(&monitor, &sample, index)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench {
            sizes,
            bits,
            queries,
            indexed,
            judge_layers,
            out,
            seed,
        } => bench(
            &sizes,
            &bits,
            queries,
            indexed,
            judge_layers,
            out.as_deref(),
            seed.get(),
        )?,
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed.seed)?,
        Command::Odtest {
            train,
            valid,
            test,
            search,
            train_fraction,
            report,
            format,
            seed,
        } => {
            let ds = read_dump(&train).with_context(|| format!("reading dump {}", train.display()))?;
            let dv = read_dump(&valid).with_context(|| format!("reading dump {}", valid.display()))?;
            let dt = read_dump(&test).with_context(|| format!("reading dump {}", test.display()))?;
            let cfg = OdTestConfig {
                search: search.space(),
                k: search.k,
                scheme: scheme(search.scheme),
                seed: seed.get(),
                train_fraction,
            };
            let r = run_odtest(&ds, &dv, &dt, &cfg)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&r)? + "\n",
                Format::Table => r.to_table(),
            };
            emit(report.as_deref(), &text)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Exit code 2 is reserved for OOD verdicts, so usage errors map to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
