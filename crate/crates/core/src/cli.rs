//! `comil generate | run | report`.
//!
//! Exit codes: 0 success, 2 usage / config / format error, 3 numeric divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{self, SyntheticSpec};
use crate::engine::{Method, RunRecord, Scenario, TaskSchedule};
use crate::error::Error;
use crate::memory::ValueOptions;
use crate::training::TrainConfig;

const SCHEMA_HELP: &str = "\
Run configuration (key=value per line, `#` starts a comment):
  dataset=<path to .milds>        required; relative paths resolve against the config file
  output=<directory>              required; created if missing
  method=comil|finetune|rehearse_full_bags|attention_topk|upper_bound   (default comil)
  schedule=0,1;2,3;4,5;6,7        class groups per task (default: consecutive pairs)
  K=2000                          exemplar memory capacity in instances
  epochs=20
  lr=0.01
  seeds=1,2,3,4,5
  shuffle_seed=0
  value_normalize=false

Outputs of `run` (in <output>):
  report_<method>_seed<seed>.txt  key=value header, `acc,t,j,value` rows, `summary,avg_acc,avg_forget`
  summary.csv                     columns method,seed,avg_acc,avg_forget; the last row is
                                  `<method>,mean±std,<acc mean>±<acc std>,<forget mean>±<forget std>`
                                  (sample standard deviation; NA when forgetting is undefined)

Outputs of `report`:
  comparison.csv                  columns method,runs,avg_acc_mean,avg_acc_std,avg_forget_mean,avg_forget_std

Environment:
  COMIL_THREADS                   worker threads for seeds in `run` (0 or unset: sequential)

Exit codes: 0 success, 2 usage/config/format error, 3 numeric divergence.";

#[derive(Debug, Parser)]
#[command(name = "comil", version, about = "Continual attention-MIL benchmark", after_help = SCHEMA_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bag dataset with a stratified train/test split.
    Generate(GenerateArgs),
    /// Run a class-incremental scenario for every seed of a config file.
    Run {
        /// key=value configuration file
        config: PathBuf,
    },
    /// Compare the summary.csv files of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the comparison table as CSV.
        #[arg(short, long, default_value = "comparison.csv")]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub bags_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub instances_per_bag: usize,
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    #[arg(long, default_value_t = 0.1)]
    pub hallmark_fraction: f64,
    #[arg(long, default_value_t = 3.0)]
    pub class_separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated per-class bag counts (overrides --bags-per-class).
    #[arg(long, value_delimiter = ',')]
    pub class_bag_counts: Option<Vec<usize>>,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Divergence { .. }) {
            3
        } else {
            2
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate(args) => cmd_generate(&args).map(|line| println!("{line}")),
        Command::Run { config } => {
            let summary = cmd_run(&config)?;
            print!("{summary}");
            Ok(())
        }
        Command::Report { runs, output } => {
            let table = cmd_report(&runs, &output)?;
            print!("{table}");
            Ok(())
        }
    }
}

/// Writes the dataset and returns the summary line.
pub fn cmd_generate(args: &GenerateArgs) -> Result<String, Failure> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        bags_per_class: args.bags_per_class,
        class_bag_counts: args.class_bag_counts.clone(),
        instances_per_bag: args.instances_per_bag,
        d_in: args.d_in,
        hallmark_fraction: args.hallmark_fraction,
        class_separation: args.class_separation,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let ds = data::split(&data::generate(&spec)?, args.train_fraction, args.seed)?;
    data::write_dataset(&ds, &args.output)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", args.output.display())))?;
    Ok(format!(
        "generated classes={} bags={} instances={}",
        ds.num_classes(),
        ds.bags.len(),
        ds.total_instances()
    ))
}

/// Parsed `run` configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub schedule: Option<TaskSchedule>,
    pub method: Method,
    pub capacity: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub shuffle_seed: u64,
    pub value_normalize: bool,
}

impl RunConfig {
    /// Parses the key=value format; paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::usage(format!(
                    "config line {}: expected key=value, got {line:?}",
                    i + 1
                ))
            })?;
            let k = k.trim().to_owned();
            if kv.insert(k.clone(), (i + 1, v.trim().to_owned())).is_some() {
                return Err(Failure::usage(format!("config key `{k}` given twice")));
            }
        }
        const KNOWN: [&str; 10] = [
            "dataset",
            "schedule",
            "method",
            "K",
            "epochs",
            "lr",
            "seeds",
            "output",
            "shuffle_seed",
            "value_normalize",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Failure::usage(format!("unknown config key `{k}`")));
        }
        fn field<T: std::str::FromStr>(
            kv: &BTreeMap<String, (usize, String)>,
            key: &str,
            default: Option<T>,
        ) -> Result<T, Failure>
        where
            T::Err: std::fmt::Display,
        {
            match kv.get(key) {
                Some((line, v)) => v
                    .parse::<T>()
                    .map_err(|e| Failure::usage(format!("config key `{key}` (line {line}): {e}"))),
                None => {
                    default.ok_or_else(|| Failure::usage(format!("config key `{key}` is required")))
                }
            }
        }
        let path = |key: &str| -> Result<PathBuf, Failure> {
            let p: PathBuf = field(&kv, key, None)?;
            Ok(if p.is_relative() { base.join(p) } else { p })
        };
        let seeds: Vec<u64> = match kv.get("seeds") {
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Failure::usage(format!("config key `seeds` (line {line}): {e}")))?,
            None => vec![1, 2, 3, 4, 5],
        };
        if seeds.is_empty() {
            return Err(Failure::usage(
                "config key `seeds` must list at least one seed",
            ));
        }
        let schedule = match kv.get("schedule") {
            Some((line, v)) => Some(v.parse::<TaskSchedule>().map_err(|e| {
                Failure::usage(format!("config key `schedule` (line {line}): {e}"))
            })?),
            None => None,
        };
        let cfg = Self {
            dataset: path("dataset")?,
            output: path("output")?,
            schedule,
            method: field(&kv, "method", Some(Method::Comil))?,
            capacity: field(&kv, "K", Some(2000))?,
            epochs: field(&kv, "epochs", Some(20))?,
            lr: field(&kv, "lr", Some(0.01))?,
            seeds,
            shuffle_seed: field(&kv, "shuffle_seed", Some(0))?,
            value_normalize: field(&kv, "value_normalize", Some(false))?,
        };
        if cfg.epochs == 0 {
            return Err(Failure::usage("config key `epochs` must be at least 1"));
        }
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(Failure::usage("config key `lr` must be a positive number"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn threads_from_env() -> usize {
    std::env::var("COMIL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Runs every seed, writes per-seed reports and `summary.csv`, and returns
/// the summary text.
pub fn cmd_run(config_path: &Path) -> Result<String, Failure> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = data::read_dataset(&cfg.dataset)
        .map_err(|e| Failure::usage(format!("dataset {}: {e}", cfg.dataset.display())))?;
    let schedule = match &cfg.schedule {
        Some(s) => s.clone(),
        None => TaskSchedule::consecutive(dataset.num_classes(), 2)
            .or_else(|_| TaskSchedule::consecutive(dataset.num_classes(), 1))?,
    };
    std::fs::create_dir_all(&cfg.output)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", cfg.output.display())))?;

    let train = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        shuffle_seed: cfg.shuffle_seed,
        distill_enabled: true,
    };
    let run_seed = |seed: u64| -> Result<RunRecord, Failure> {
        let mut scenario =
            Scenario::new(&dataset, &schedule, cfg.method, train, cfg.capacity, seed);
        scenario.values = ValueOptions {
            normalize_distances: cfg.value_normalize,
        };
        scenario.run().map_err(|e| {
            let f = Failure::from(e);
            Failure {
                message: format!("seed {seed}: {}", f.message),
                ..f
            }
        })
    };
    let threads = threads_from_env();
    let records: Vec<Result<RunRecord, Failure>> = if threads == 0 {
        cfg.seeds.iter().map(|&s| run_seed(s)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
        pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(s)).collect())
    };
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;

    for rec in &records {
        let path = cfg
            .output
            .join(format!("report_{}_seed{}.txt", rec.method, rec.seed));
        std::fs::write(&path, rec.to_report())
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    }
    let summary = summary_csv(&records);
    let path = cfg.output.join("summary.csv");
    std::fs::write(&path, &summary)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(summary)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summary_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("method,seed,avg_acc,avg_forget\n");
    let mut accs = Vec::new();
    let mut forgets = Vec::new();
    for rec in records {
        let acc = rec.average_accuracy().unwrap_or(f64::NAN);
        let forget = rec.average_forgetting();
        accs.push(acc);
        forgets.extend(forget);
        let forget = forget.map_or_else(|| "NA".to_string(), |f| format!("{f:.6}"));
        writeln!(out, "{},{},{acc:.6},{forget}", rec.method, rec.seed).unwrap();
    }
    let (am, asd) = mean_std(&accs);
    let forget = if forgets.len() == accs.len() && !forgets.is_empty() {
        let (fm, fsd) = mean_std(&forgets);
        format!("{fm:.6}±{fsd:.6}")
    } else {
        "NA".to_string()
    };
    let method = records.first().map_or("-", |r| r.method.as_str());
    writeln!(out, "{method},mean±std,{am:.6}±{asd:.6},{forget}").unwrap();
    out
}

/// One seed row of a summary.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    pub avg_acc: f64,
    pub avg_forget: Option<f64>,
}

pub fn parse_summary(text: &str, origin: &Path) -> Result<Vec<SummaryRow>, Failure> {
    let bad = |line: usize, why: &str| {
        Failure::usage(format!("{}: line {line}: {why}", origin.display()))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "method,seed,avg_acc,avg_forget")) => {}
        _ => return Err(bad(1, "missing summary header")),
    }
    let mut rows = Vec::new();
    let mut aggregate = false;
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        let [method, seed, acc, forget] = f.as_slice() else {
            return Err(bad(i + 1, "expected 4 columns"));
        };
        if *seed == "mean±std" {
            aggregate = true;
            continue;
        }
        let seed = seed.parse().map_err(|_| bad(i + 1, "bad seed"))?;
        let avg_acc: f64 = acc.parse().map_err(|_| bad(i + 1, "bad avg_acc"))?;
        let avg_forget = match *forget {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad(i + 1, "bad avg_forget"))?),
        };
        if !avg_acc.is_finite() {
            return Err(bad(i + 1, "bad avg_acc"));
        }
        rows.push(SummaryRow {
            method: method.to_string(),
            seed,
            avg_acc,
            avg_forget,
        });
    }
    if rows.is_empty() || !aggregate {
        return Err(bad(
            text.lines().count(),
            "summary has no seed rows or no aggregate row",
        ));
    }
    Ok(rows)
}

/// Aggregates run directories into an aligned table and `output` CSV.
pub fn cmd_report(runs: &[PathBuf], output: &Path) -> Result<String, Failure> {
    let mut by_method: Vec<(String, Vec<SummaryRow>)> = Vec::new();
    for dir in runs {
        let path = dir.join("summary.csv");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::usage(format!("missing summary in {}: {e}", dir.display())))?;
        for row in parse_summary(&text, &path)? {
            match by_method.iter_mut().find(|(m, _)| *m == row.method) {
                Some((_, rows)) => rows.push(row),
                None => by_method.push((row.method.clone(), vec![row])),
            }
        }
    }

    let mut csv =
        String::from("method,runs,avg_acc_mean,avg_acc_std,avg_forget_mean,avg_forget_std\n");
    let mut table = format!(
        "{:<20} {:>5} {:>16} {:>16}\n",
        "method", "runs", "avg_acc (%)", "avg_forget (%)"
    );
    for (method, rows) in &by_method {
        let accs: Vec<f64> = rows.iter().map(|r| r.avg_acc).collect();
        let forgets: Vec<f64> = rows.iter().filter_map(|r| r.avg_forget).collect();
        let (am, asd) = mean_std(&accs);
        let forget = (forgets.len() == rows.len()).then(|| mean_std(&forgets));
        let (fm, fsd) = forget.map_or(("NA".to_string(), "NA".to_string()), |(m, s)| {
            (format!("{m:.6}"), format!("{s:.6}"))
        });
        writeln!(csv, "{method},{},{am:.6},{asd:.6},{fm},{fsd}", rows.len()).unwrap();
        let forget_cell = forget.map_or("NA".to_string(), |(m, s)| {
            format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
        });
        writeln!(
            table,
            "{method:<20} {:>5} {:>16} {:>16}",
            rows.len(),
            format!("{:.1} ± {:.1}", 100.0 * am, 100.0 * asd),
            forget_cell
        )
        .unwrap();
    }
    std::fs::write(output, csv)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", output.display())))?;
    Ok(table)
}
