//! Command-line driver: `gen | corrupt | train | eval | pipeline`, each run
//! leaving a manifest sufficient to reproduce it.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{load_config, DataSource, ExperimentConfig, Scale};
use crate::data::{gen_blobs, read_cifar10_bin, read_csv, write_csv, Dataset};
use crate::error::{Error, Result};
use crate::eval::{ap_result, export_distribution_histogram, FilterRecord};
use crate::model::save_checkpoint;
use crate::noise::{inject, read_flip_log, write_flip_log};
use crate::pipeline::{train, write_verdicts_csv, TrainMethod, TrainRunConfig};

#[derive(Parser)]
#[command(name = "jnpl", version, about = "Noisy-label learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a dataset and write it to the run directory.
    Gen(CommonArgs),
    /// Corrupt the generated dataset per the configured noise spec.
    Corrupt(CommonArgs),
    /// Train the configured method on the corrupted dataset.
    Train(CommonArgs),
    /// Score filtering quality and export histograms.
    Eval(CommonArgs),
    /// Chain gen, corrupt, train, and eval; optionally fan out over seeds.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Experiment config file (key = value).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory (overrides the config's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Method override.
    #[arg(long, value_parser = ["jnpl", "nlnl", "pl"])]
    pub method: Option<String>,
    /// Schedule scale override.
    #[arg(long, value_parser = ["desk", "paper"])]
    pub scale: Option<String>,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated seed list; each seed runs in its own subdirectory.
    #[arg(long)]
    pub seeds: Option<String>,
}

/// Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric
/// failure, 5 undefined metric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidInput(_) => 2,
        Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        Error::UndefinedMetric(_) => 5,
        Error::Io(_) => 1,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => with_config(a, cmd_gen),
        Command::Corrupt(a) => with_config(a, cmd_corrupt),
        Command::Train(a) => with_config(a, cmd_train),
        Command::Eval(a) => with_config(a, cmd_eval),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

fn with_config(args: &CommonArgs, f: fn(&Run) -> Result<()>) -> Result<()> {
    let run = prepare_run(args)?;
    f(&run)
}

fn prepare_run(args: &CommonArgs) -> Result<Run> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .ok_or_else(|| Error::Config("missing required key \"out\" (or pass --out)".into()))?;
    std::fs::create_dir_all(&out)?;
    Ok(Run { cfg, out, force: args.force })
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &CommonArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.pseudo.seed = seed.wrapping_add(1);
    }
    if let Some(method) = &args.method {
        cfg.train.method = match method.as_str() {
            "jnpl" => TrainMethod::Jnpl,
            "nlnl" => TrainMethod::Nlnl,
            _ => TrainMethod::PlBaseline,
        };
    }
    if let Some(scale) = &args.scale {
        let target = if scale == "paper" { Scale::Paper } else { Scale::Desk };
        if target != cfg.scale {
            let template = match target {
                Scale::Desk => TrainRunConfig::desk(cfg.train.method, cfg.seed),
                Scale::Paper => TrainRunConfig::paper_scale(cfg.train.method, cfg.seed),
            };
            cfg.train.epochs = template.epochs;
            cfg.train.nlnl_stages = template.nlnl_stages;
            cfg.train.schedule = template.schedule;
            cfg.scale = target;
        }
    }
    Ok(())
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_GEN: u64 = 100;
const STREAM_GEN_TEST: u64 = 101;
const STREAM_NOISE: u64 = 102;

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(run: &Run, command: &str, extra: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("command = {command}\n"));
    text.push_str(&format!("seed = {}\n", run.cfg.seed));
    text.push_str(&format!("method = {}\n", run.cfg.train.method.name()));
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("--- config ---\n");
    text.push_str(&run.cfg.raw);
    std::fs::write(run.out.join(format!("manifest-{command}.txt")), text)?;
    Ok(())
}

fn refuse_existing(run: &Run, name: &str) -> Result<()> {
    let path = run.out.join(name);
    if path.exists() && !run.force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_dataset(run: &Run, name: &str) -> Result<Dataset> {
    let path = run.out.join(name);
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run the earlier stages first",
            path.display()
        )));
    }
    Ok(read_csv(&path)?.with_num_classes(run.cfg.effective_classes()))
}

impl ExperimentConfig {
    pub fn effective_classes(&self) -> usize {
        match self.source {
            DataSource::Cifar10 => 10,
            _ => self.classes,
        }
    }
}

fn cmd_gen(run: &Run) -> Result<()> {
    refuse_existing(run, "dataset.csv")?;
    let cfg = &run.cfg;
    let (dataset, test) = match cfg.source {
        DataSource::Blobs => {
            let mut rng = stream_rng(cfg.seed, STREAM_GEN);
            let d = gen_blobs(cfg.classes, cfg.samples, cfg.dim, cfg.separation, &mut rng)?;
            let t = if cfg.test_samples > 0 {
                let mut trng = stream_rng(cfg.seed, STREAM_GEN_TEST);
                Some(gen_blobs(cfg.classes, cfg.test_samples, cfg.dim, cfg.separation, &mut trng)?)
            } else {
                None
            };
            (d, t)
        }
        DataSource::Cifar10 => (read_cifar10_bin(&cfg.cifar_paths)?, None),
        DataSource::Csv => {
            let p = cfg
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.csv_path is required".into()))?;
            (read_csv(Path::new(p))?, None)
        }
    };
    write_csv(&dataset, &run.out.join("dataset.csv"))?;
    if let Some(t) = &test {
        write_csv(t, &run.out.join("test.csv"))?;
    }
    let hash = sha256_file(&run.out.join("dataset.csv"))?;
    write_manifest(
        run,
        "gen",
        &[
            ("samples".into(), dataset.len().to_string()),
            ("classes".into(), dataset.num_classes.to_string()),
            ("dim".into(), dataset.dim.to_string()),
            ("dataset_sha256".into(), hash),
        ],
    )
}

fn cmd_corrupt(run: &Run) -> Result<()> {
    refuse_existing(run, "noisy.csv")?;
    let dataset = load_dataset(run, "dataset.csv")?;
    let mut rng = stream_rng(run.cfg.seed, STREAM_NOISE);
    let noisy = inject(&dataset, &run.cfg.noise, &mut rng)?;
    write_csv(&noisy.dataset, &run.out.join("noisy.csv"))?;
    write_flip_log(&noisy.flips, &run.out.join("fliplog.csv"))?;
    let summary = serde_json::json!({
        "kind": run.cfg.noise.kind,
        "rate": run.cfg.noise.rate,
        "realized_rate": noisy.realized_rate(),
        "n_flipped": noisy.flips.len(),
        "n_samples": noisy.dataset.len(),
    });
    std::fs::write(
        run.out.join("noise_summary.json"),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    let hash = sha256_file(&run.out.join("noisy.csv"))?;
    write_manifest(
        run,
        "corrupt",
        &[
            ("realized_rate".into(), format!("{}", noisy.realized_rate())),
            ("noisy_sha256".into(), hash),
        ],
    )
}

fn cmd_train(run: &Run) -> Result<()> {
    refuse_existing(run, "metrics.ndjson")?;
    let noisy_data = load_dataset(run, "noisy.csv")?;
    let noisy = crate::noise::NoisyDataset::uncorrupted(noisy_data);
    // `uncorrupted` recomputes clean_mask from given == true, which holds for
    // the corrupted CSV as well since both labels are stored per row.
    let test_path = run.out.join("test.csv");
    let test = if test_path.exists() {
        Some(read_csv(&test_path)?.with_num_classes(run.cfg.effective_classes()))
    } else {
        None
    };
    let metrics_path = run.out.join("metrics.ndjson");
    let ckpt_path = run.out.join("checkpoint.bin");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut hook = |params: &crate::model::MlpParams,
                    m: &crate::pipeline::EpochMetrics|
     -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Numeric(e.to_string()))?;
        writeln!(metrics_file, "{line}")?;
        metrics_file.flush()?;
        // Last-good checkpoint: survives a later numeric abort.
        save_checkpoint(params, &ckpt_path)
    };
    let outcome = train(&noisy, test.as_ref(), &run.cfg.train, Some(&mut hook))?;
    drop(hook);
    save_checkpoint(&outcome.params, &ckpt_path)?;
    write_verdicts_csv(&noisy, &outcome.verdicts, &run.out.join("verdicts.csv"))?;
    write_manifest(
        run,
        "train",
        &[
            ("epoch_lines".into(), outcome.metrics.len().to_string()),
            ("metrics_sha256".into(), sha256_file(&metrics_path)?),
        ],
    )
}

/// Verdict rows joined with the flip log: clean iff the id never flipped.
fn records_from_artifacts(run: &Run) -> Result<Vec<FilterRecord>> {
    let verdicts_path = run.out.join("verdicts.csv");
    let flips_path = run.out.join("fliplog.csv");
    for p in [&verdicts_path, &flips_path] {
        if !p.exists() {
            return Err(Error::Config(format!(
                "{} not found; run the earlier stages first",
                p.display()
            )));
        }
    }
    let flipped: HashSet<u64> = read_flip_log(&flips_path)?
        .into_iter()
        .map(|f| f.sample_id)
        .collect();
    let mut r = csv::Reader::from_path(&verdicts_path)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 7 {
            return Err(Error::Format("verdict row width".into()));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::Format("bad verdict id".into()))?;
        let p_given: f64 = rec[3]
            .parse()
            .map_err(|_| Error::Format("bad clean_score".into()))?;
        let p_comp_max: f64 = rec[4]
            .parse()
            .map_err(|_| Error::Format("bad p_comp_max".into()))?;
        records.push(FilterRecord {
            sample_id: id,
            p_given,
            p_comp_max,
            is_actually_clean: !flipped.contains(&id),
        });
    }
    Ok(records)
}

fn cmd_eval(run: &Run) -> Result<()> {
    let records = records_from_artifacts(run)?;
    let ap = ap_result(&records)?;
    std::fs::write(
        run.out.join("ap.json"),
        serde_json::to_string_pretty(&ap).expect("json") + "\n",
    )?;
    let hist = export_distribution_histogram(&records, 20)?;
    hist.write_csv(&run.out.join("histogram.csv"))?;
    write_manifest(
        run,
        "eval",
        &[
            ("ap_clean_positive".into(), format!("{}", ap.ap_clean_positive)),
            ("ap_noisy_positive".into(), format!("{}", ap.ap_noisy_positive)),
        ],
    )
}

fn run_all_stages(args: &CommonArgs) -> Result<()> {
    let run = prepare_run(args)?;
    cmd_gen(&run)?;
    cmd_corrupt(&run)?;
    cmd_train(&run)?;
    cmd_eval(&run)
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let seeds: Vec<u64> = match &args.seeds {
        None => return run_all_stages(&args.common),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {s:?}")))
            })
            .collect::<Result<Vec<u64>>>()?,
    };
    let base_out = args
        .common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--seeds requires --out".into()))?;
    let max_workers: usize = std::env::var("NLL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n| *n > 0)
        .unwrap_or(seeds.len().max(1));
    for chunk in seeds.chunks(max_workers) {
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for &seed in chunk {
                let mut sub = args.common.clone();
                sub.seed = Some(seed);
                sub.out = Some(base_out.join(format!("seed-{seed}")));
                handles.push(scope.spawn(move || run_all_stages(&sub)));
            }
            for h in handles {
                h.join().map_err(|_| Error::Numeric("worker panicked".into()))??;
            }
            Ok(())
        })?;
    }
    Ok(())
}
