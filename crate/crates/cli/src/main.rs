//! `binclamp` command-line driver: train, extract, eval, curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use binclamp::codes::PackedCodeMatrix;
use binclamp::config::ExperimentConfig;
use binclamp::data::Dataset;
use binclamp::evaluation::{
    mean_average_precision, write_report, EvalRecord, JudgeMode, MapOptions,
};
use binclamp::trainer::{
    extract_codes, load_datasets, train_with_progress, MetricsLog, SavedModel,
};
use binclamp::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "binclamp",
    version,
    about = "Train binary hash codes and evaluate Hamming retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML experiment file.
    Train(TrainArgs),
    /// Encode a dataset with a trained model into a BNC1 code file.
    Extract(ExtractArgs),
    /// Compute mAP and precision@500 of query codes against database codes.
    Eval(EvalArgs),
    /// Merge metrics files into one epoch-indexed table.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Overrides `seed` (the first seed of a sweep).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// abc, scaled-tanh or dsh-reg-only.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    bits: Option<usize>,
    /// Train this many consecutive seeds, each into `<out>/seed-<n>`.
    #[arg(long)]
    seeds: Option<u64>,
    /// Worker threads for seed sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct ExtractArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Experiment file whose data source supplies the examples.
    #[arg(
        long,
        conflicts_with = "features",
        required_unless_present = "features"
    )]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// BNF1 feature file, used as stored.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// single-label (equal labels) or multi-label (shared label).
    #[arg(long, default_value = "single-label")]
    mode: String,
    /// Query i is database item i; leave it out of its own ranking.
    #[arg(long)]
    exclude_self: bool,
    /// Score only the first N results.
    #[arg(long)]
    topn: Option<usize>,
    /// Method name written to the report row.
    #[arg(long, default_value = "codes")]
    method: String,
    /// Report CSV path; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Column {
    R,
    Alpha,
    Lr,
    Loss,
    Map,
}

#[derive(Args)]
struct CurvesArgs {
    /// A run is named after its file stem, or its directory for `metrics.csv`.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "map")]
    column: Column,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Validation(_) | Error::Config(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Io(_) | Error::Format { .. } | Error::Parse { .. } | Error::Integrity(_) => 4,
            _ => 1,
        };
        let message = match e {
            Error::Validation(errs) => format!("invalid configuration:\n  {}", errs.join("\n  ")),
            other => other.to_string(),
        };
        Failure { code, message }
    }
}

fn context(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Curves(a) => cmd_curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| context(dir)(Error::Io(e)))?;
    }
    fs::write(path, bytes).map_err(|e| context(path)(Error::Io(e)))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(&a.config).map_err(context(&a.config))?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(m) = &a.method {
        config.method = m.parse()?;
    }
    if let Some(b) = a.bits {
        config.bits = b;
    }
    if let Some(dir) = a.out {
        config.output.dir = dir;
    }
    config.validate()?;
    let Some(count) = a.seeds else {
        return train_one(&config, &config.output.dir, !a.quiet).map(|_| ());
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
    let seeds: Vec<u64> = (0..count).map(|i| config.seed + i).collect();
    let results: Vec<Result<Option<f64>, Failure>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let mut c = config.clone();
                c.seed = s;
                train_one(&c, &config.output.dir.join(format!("seed-{s}")), false)
            })
            .collect()
    });
    let mut first_err = None;
    for (s, r) in seeds.iter().zip(results) {
        match r {
            Ok(Some(m)) => println!("seed {s}: final map {m:.6}"),
            Ok(None) => println!("seed {s}: done"),
            Err(f) => {
                eprintln!("seed {s}: {}", f.message);
                first_err.get_or_insert(f);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn train_one(config: &ExperimentConfig, out: &Path, verbose: bool) -> Result<Option<f64>, Failure> {
    let (train_set, test_set) = load_datasets(config)?;
    let outcome = train_with_progress(config, &train_set, &test_set, |r| {
        if verbose {
            let map = r.map.map_or(String::new(), |m| format!(" map {m:.4}"));
            eprintln!(
                "epoch {} iter {} loss {:.6}{map}",
                r.epoch, r.iteration, r.loss
            );
        }
    })?;
    let mut effective = outcome.config.clone();
    effective.output.dir = out.to_path_buf();
    write(&out.join("config.toml"), effective.to_toml()?)?;
    write(&out.join("metrics.csv"), outcome.log.to_csv())?;
    let model = SavedModel {
        method: config.method,
        bits: config.bits,
        network: outcome.network,
    };
    write(&out.join("model.json"), model.to_json()?)?;
    let final_map = outcome.log.final_map();
    if verbose {
        match final_map {
            Some(m) => println!("final map {m:.6}"),
            None => println!(
                "training finished ({} epochs, no evaluation)",
                outcome.log.len()
            ),
        }
    }
    Ok(final_map)
}

fn cmd_extract(a: ExtractArgs) -> Result<(), Failure> {
    let model = SavedModel::load(&a.model).map_err(context(&a.model))?;
    let data: Dataset = match (&a.config, &a.features) {
        (Some(path), _) => {
            let config = ExperimentConfig::load(path).map_err(context(path))?;
            if config.method != model.method || config.bits != model.bits {
                return Err(Failure {
                    code: 2,
                    message: format!(
                        "model is {} with {} bits but {} asks for {} with {} bits",
                        model.method,
                        model.bits,
                        path.display(),
                        config.method,
                        config.bits
                    ),
                });
            }
            let (train, test) = load_datasets(&config)?;
            match a.split {
                Split::Train => train,
                Split::Test => test,
            }
        }
        (None, Some(path)) => Dataset::load(path).map_err(context(path))?,
        (None, None) => unreachable!("clap requires one data source"),
    };
    if data.shape() != model.network.input_shape() {
        return Err(Failure::from(Error::Dimension(format!(
            "model expects examples of shape {:?}, data has {:?}",
            model.network.input_shape(),
            data.shape()
        ))));
    }
    let codes = extract_codes(&model.network, model.method, &data)?;
    write(&a.out, codes.to_bytes())?;
    println!(
        "wrote {} codes of {} bits to {}",
        codes.len(),
        codes.bits(),
        a.out.display()
    );
    Ok(())
}

fn read_codes(path: &Path) -> Result<PackedCodeMatrix, Failure> {
    let bytes = fs::read(path).map_err(|e| context(path)(Error::Io(e)))?;
    PackedCodeMatrix::from_bytes(&bytes).map_err(context(path))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let mode: JudgeMode = a.mode.parse()?;
    let db = read_codes(&a.db)?;
    let queries = read_codes(&a.queries)?;
    let result = mean_average_precision(
        &db,
        &queries,
        mode,
        MapOptions {
            exclude_self: a.exclude_self,
            topn: a.topn,
        },
    )?;
    let row = EvalRecord {
        bits: db.bits(),
        method: a.method,
        map: result.map,
        precision_at_500: result.precision_at_500,
    };
    let mut report = Vec::new();
    write_report(&mut report, &[row])?;
    print!("{}", String::from_utf8_lossy(&report));
    if let Some(out) = &a.out {
        write(out, &report)?;
    }
    Ok(())
}

/// Column label for a metrics file: its stem, or the parent directory's name
/// when the stem is the default `metrics`.
fn run_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "metrics" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn cmd_curves(a: CurvesArgs) -> Result<(), Failure> {
    let mut names: Vec<String> = Vec::new();
    let mut table: BTreeMap<u64, BTreeMap<usize, String>> = BTreeMap::new();
    for (col, path) in a.metrics.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| context(path)(Error::Io(e)))?;
        let log = MetricsLog::parse_csv(&text).map_err(context(path))?;
        let base = run_name(path);
        let taken: BTreeSet<&String> = names.iter().collect();
        let name = if taken.contains(&base) {
            format!("{base}_{}", col + 1)
        } else {
            base
        };
        names.push(name);
        for r in log.records() {
            let v = match a.column {
                Column::R => Some(r.r),
                Column::Alpha => Some(r.alpha),
                Column::Lr => Some(r.lr),
                Column::Loss => Some(r.loss),
                Column::Map => r.map,
            };
            let cell = table.entry(r.epoch).or_default();
            if let Some(v) = v {
                cell.insert(col, v.to_string());
            }
        }
    }
    let mut out = format!("epoch,{}\n", names.join(","));
    for (epoch, cells) in &table {
        out.push_str(&epoch.to_string());
        for col in 0..names.len() {
            out.push(',');
            if let Some(v) = cells.get(&col) {
                out.push_str(v);
            }
        }
        out.push('\n');
    }
    match &a.out {
        Some(path) => write(path, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}
