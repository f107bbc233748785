//! `superpr` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::compare::compare_with;
use super::config::{load_config, parse_json, ExperimentConfig, SEED_ENV};
use super::data::{self, Samples, Task};
use super::train::{evaluate, run_experiment};
use super::verify;
use crate::analysis::count_macs;
use crate::blocks::{checkpoint, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{io, Shape};

#[derive(Parser, Debug)]
#[command(name = "superpr", version, about = "SUPER decoder experiments and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a generated dataset as tensor files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes a checkpoint, metrics.json and timing.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a config's dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reconstruction, gradient, norm and MAC self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check three stage-bound models instead of ten.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer MAC and parameter table as CSV.
    Macs {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train SUPER and baseline decoders over paired seeds.
    Compare {
        #[arg(long)]
        task: Option<Task>,
        /// Base config; defaults to the reference setup of `--task`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds, starting at `SUPER_SEED` or 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl clap::ValueEnum for Task {
    fn value_variants<'a>() -> &'a [Self] {
        &[Task::ThinLines, Task::Denoise]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
        Error::Json(_) | Error::Format(_) | Error::Csv(_) => "format",
        _ => "runtime",
    }
}

/// Exit status for an error: 2 for malformed configuration, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// The machine-readable line printed to stderr on failure.
pub fn error_line(e: &Error) -> String {
    let path = match e {
        Error::Config { path, .. } => Some(path.as_str()),
        _ => None,
    };
    let line = ErrorLine {
        error: error_kind(e),
        message: e.to_string(),
        path,
    };
    serde_json::to_string(&line).expect("error line serializes")
}

/// Parses `argv` and runs the command, writing results to `stdout`.
/// Returns the process exit code.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let line = ErrorLine {
                error: "usage",
                message: e.to_string().lines().next().unwrap_or_default().to_string(),
                path: None,
            };
            let _ = writeln!(stderr, "{}", serde_json::to_string(&line).expect("error line serializes"));
            return 2;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(&e));
            exit_code(&e)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_split(dir: &Path, samples: &Samples) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv"))?;
    match samples {
        Samples::ThinLines(items) => {
            labels.write_record(["index", "image", "mask", "width"])?;
            for (i, s) in items.iter().enumerate() {
                let (img, mask) = (format!("{i:04}_image.supt"), format!("{i:04}_mask.supt"));
                io::save(dir.join(&img), &s.image)?;
                io::save(dir.join(&mask), &s.mask)?;
                labels.write_record([i.to_string(), img, mask, s.width.to_string()])?;
            }
        }
        Samples::Denoise(items) => {
            labels.write_record(["index", "noisy", "clean"])?;
            for (i, p) in items.iter().enumerate() {
                let (noisy, clean) = (format!("{i:04}_noisy.supt"), format!("{i:04}_clean.supt"));
                io::save(dir.join(&noisy), &p.noisy)?;
                io::save(dir.join(&clean), &p.clean)?;
                labels.write_record([i.to_string(), noisy, clean])?;
            }
        }
    }
    labels.flush()?;
    Ok(())
}

fn seed_base() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg = load_config(&config)?;
            let d = data::generate(&cfg.dataset)?;
            write_split(&out.join("train"), &d.train)?;
            write_split(&out.join("test"), &d.test)?;
            write_json(&out.join("dataset.json"), &cfg.dataset)?;
            writeln!(stdout, "wrote {} train and {} test items to {}", d.train.len(), d.test.len(), out.display())?;
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let e = run_experiment(&cfg)?;
            fs::create_dir_all(&out)?;
            checkpoint::save(&e.model, out.join("checkpoint"))?;
            write_json(&out.join("metrics.json"), &e.report)?;
            write_json(&out.join("timing.json"), &e.timing)?;
            writeln!(stdout, "{}", serde_json::to_string(&e.report.final_metrics)?)?;
        }
        Command::Eval { config, checkpoint: dir, out } => {
            let cfg = load_config(&config)?;
            let model = checkpoint::load::<f32>(&dir)?;
            let d = data::generate(&cfg.dataset)?;
            let m = evaluate(&model, &d.test)?;
            let mut text = serde_json::to_string_pretty(&m)?;
            text.push('\n');
            emit(&text, out.as_deref(), stdout)?;
        }
        Command::Verify { seed, quick, out } => {
            let r = verify::run_all(seed, quick)?;
            for s in &r.suites {
                writeln!(
                    stderr,
                    "{} {}: worst {:.3e} (tol {:.0e}) {}",
                    if s.pass { "PASS" } else { "FAIL" },
                    s.name,
                    s.worst,
                    s.tolerance,
                    s.detail
                )?;
            }
            let mut text = serde_json::to_string_pretty(&r)?;
            text.push('\n');
            emit(&text, out.as_deref(), stdout)?;
            return Ok(if r.pass { 0 } else { 1 });
        }
        Command::Macs { spec, size, batch, out } => {
            let spec: ModelSpec = parse_json(&fs::read_to_string(&spec)?)?;
            spec.validate()?;
            let report = count_macs(&spec, Shape::new(batch, spec.in_channels, size, size))?;
            emit(&report.to_csv_string()?, out.as_deref(), stdout)?;
        }
        Command::Compare {
            task,
            config,
            seeds,
            epochs,
            out,
        } => {
            let mut base = match (config, task) {
                (Some(p), _) => load_config(p)?,
                (None, Some(t)) => ExperimentConfig::reference(t),
                (None, None) => return Err(Error::config("--task", "either --task or --config is required")),
            };
            if let Some(t) = task {
                if t != base.dataset.task {
                    return Err(Error::config("dataset.task", format!("config task differs from --task {}", t.name())));
                }
            }
            if let Some(n) = epochs {
                base.train.epochs = n;
            }
            let first = seed_base()?;
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            let c = compare_with(&base, &seed_list, |seed, decoder, e| {
                writeln!(
                    stderr,
                    "seed {seed} {}: {} = {:.4} ({:.1} s)",
                    decoder.name(),
                    if base.dataset.task == Task::ThinLines { "iou_0_2" } else { "psnr" },
                    e.report.final_metrics.headline(),
                    e.timing.wall_clock_seconds
                )?;
                if let Some(dir) = &out {
                    let stem = format!("seed{seed}_{}", decoder.name());
                    write_json(&dir.join(format!("{stem}.json")), &e.report)?;
                    write_json(&dir.join(format!("{stem}_timing.json")), &e.timing)?;
                }
                Ok(())
            })?;
            let csv = c.to_csv_string()?;
            if let Some(dir) = &out {
                fs::write(dir.join("compare.csv"), &csv)?;
                write_json(&dir.join("summary.json"), &c.summary)?;
            }
            stdout.write_all(csv.as_bytes())?;
            writeln!(stderr, "{}", serde_json::to_string(&c.summary)?)?;
        }
    }
    Ok(0)
}
