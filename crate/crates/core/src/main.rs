use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dpm_cmfd::forgegen::{generate_corpus, generate_synthetic_corpus, list_images, Manifest};
use dpm_cmfd::harness::pipeline::{file_stem, sweep_tsv};
use dpm_cmfd::harness::{evaluate_dirs, load_corpus, robustness_sweep, run_selftest, write_sweep, Detector, RunConfig};
use dpm_cmfd::rawio::write_atomic;
use dpm_cmfd::Error;

/// Copy-move forgery localization with cross-scale PatchMatch.
#[derive(Parser)]
#[command(name = "cmfd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set patchmatch.iterations=12`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random component.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Localize copy-move regions in images or directories of images.
    Detect {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predicted masks against truth masks paired by file stem.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic forgery corpus with three-class truth masks.
    Generate {
        /// Source images; synthetic scenes are used when absent.
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Side of the synthetic scenes.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detection quality of a corpus under each attack level.
    Sweep {
        /// Directory holding `forged/` and `truth/`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attack spec such as `jpeg:80`; repeatable, replaces `sweep.attacks`.
        #[arg(long = "attack")]
        attacks: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the built-in consistency checks.
    Selftest {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        Error::Io { .. } | Error::Image(_) | Error::Format(_) => 2,
        Error::Invariant(_) => 3,
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    cfg.echo(out)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Returns the worst per-image exit code, 0 when every image succeeded.
fn detect(inputs: &[PathBuf], out: &Path, cfg: &RunConfig) -> Result<u8, Error> {
    let files = expand_inputs(inputs)?;
    prepare_out(out, cfg)?;
    let detector = Detector::new(cfg)?;
    let results: Vec<_> = files.par_iter().map(|f| (f, detector.detect_file(f, out))).collect();
    let mut jsonl = String::new();
    let mut worst = 0;
    for (path, r) in results {
        let stem = file_stem(path);
        let record = match r {
            Ok(det) => {
                let m = &det.mask;
                serde_json::json!({
                    "image": stem,
                    "input": path.display().to_string(),
                    "status": "ok",
                    "height": m.height(),
                    "width": m.width(),
                    "flagged_px": m.count(),
                    "flagged_frac": m.fraction(),
                    "mask": format!("masks/{stem}.png"),
                })
            }
            Err(e) => {
                eprintln!("cmfd: {}: {e}", path.display());
                worst = worst.max(exit_code(&e));
                serde_json::json!({
                    "image": stem,
                    "input": path.display().to_string(),
                    "status": "error",
                    "error": e.to_string(),
                })
            }
        };
        jsonl.push_str(&record.to_string());
        jsonl.push('\n');
    }
    write_atomic(&out.join("detections.jsonl"), jsonl.as_bytes())?;
    Ok(worst)
}

fn report_manifest(m: &Manifest, out: &Path) {
    println!("wrote {} forgeries to {}", m.records.len(), out.display());
    for e in &m.errors {
        eprintln!("cmfd: skipped {e}");
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Detect { inputs, out, cfg } => detect(&inputs, &out, &cfg.resolve()?),
        Command::Evaluate { pred, truth, out, cfg } => {
            let cfg = cfg.resolve()?;
            prepare_out(&out, &cfg)?;
            let report = evaluate_dirs(&pred, &truth, cfg.eval.aggregation)?;
            report.write(&out)?;
            print!("{}", report.to_table());
            for m in &report.missing {
                eprintln!("cmfd: no counterpart for {m}; excluded");
            }
            Ok(0)
        }
        Command::Generate { src, n, size, out, cfg } => {
            let cfg = cfg.resolve()?;
            prepare_out(&out, &cfg)?;
            let manifest = match src {
                Some(dir) => generate_corpus(&dir, n, &cfg.generator, &out)?,
                None => generate_synthetic_corpus(n, size, &cfg.generator, &out)?,
            };
            report_manifest(&manifest, &out);
            Ok(if manifest.errors.is_empty() { 0 } else { 2 })
        }
        Command::Sweep { corpus, out, attacks, cfg } => {
            let mut cfg = cfg.resolve()?;
            if !attacks.is_empty() {
                cfg.sweep.attacks = attacks;
                cfg.validate()?;
            }
            prepare_out(&out, &cfg)?;
            let items = load_corpus(&corpus)?;
            let detector = Detector::new(&cfg)?;
            let rows = robustness_sweep(&detector, &items, &cfg.sweep.parsed_attacks()?)?;
            write_sweep(&rows, &out)?;
            print!("{}", sweep_tsv(&rows));
            Ok(0)
        }
        Command::Selftest { cfg } => {
            let checks = run_selftest(&cfg.resolve()?)?;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("cmfd: {e}");
            exit_code(&e)
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code)
}
