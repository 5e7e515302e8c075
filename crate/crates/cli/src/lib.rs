//! Command implementations behind the `pbitt` binary.
//!
//! Every command writes its human-readable output to the supplied writer and
//! returns a process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure |
//! | 2 | I/O or file format error |
//! | 3 | invalid configuration or usage |
//! | 4 | training diverged |

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pbitt::checkpoint::Checkpoint;
use pbitt::config::{data_root_from_env, parse_keys, parse_override, ConfigValue, PassiveSource, RunConfig};
use pbitt::experiments::{g_sweep, gap_study, passive_ablation, AblationReport, Axis};
use pbitt::metrics::evaluate;
use pbitt::scheduler::{train_prepared, Injection, TrainHistory};
use pbitt::verify::{gradcheck_suite, SuiteSize, GRADCHECK_TOLERANCE};
use pbitt::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_ECHO_FILE: &str = "resolved.toml";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Format { .. } => EXIT_IO,
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::NonDeterministic { .. } => EXIT_VERIFY,
        Error::Config(_) | Error::Dimension { .. } | Error::Index { .. } | Error::Usage(_) => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "pbitt", version, about = "Passive batch injection training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint, history and config echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the active test split.
    Eval(EvalArgs),
    /// Run a multi-seed ablation and write a report.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a report or history file as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of dotted `key = value` lines. Defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set policy.g=10`. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for relative dataset paths [env: PBITT_DATA_ROOT].
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset config. Without it, the config stored in the checkpoint is used.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    pub train_split: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// g, fraction or passive.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values. g: integers or inf. fraction: (0, 1].
    /// passive: synthetic and/or config.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Maximum runs in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// small or full.
    #[arg(long, default_value = "small")]
    pub spec: String,
    /// Scales analytic gradients by 2 to confirm the check fails.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json from `ablate` or a history.jsonl from `train`.
    pub input: PathBuf,
}

/// Parses arguments and runs the command. Clap usage errors exit with 3.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> pbitt::Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(line);
    let _ = out.write_all(b"\n");
}

impl ConfigArgs {
    fn data_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(data_root_from_env)
    }

    fn overrides(&self, extra: &[String]) -> pbitt::Result<Vec<(String, ConfigValue)>> {
        let mut all: Vec<String> = self.set.clone();
        if let Some(s) = self.seed {
            all.push(format!("train.seed={s}"));
        }
        all.extend_from_slice(extra);
        all.iter().map(|s| parse_override(s)).collect()
    }

    fn resolve_text(&self, text: &str, origin: &str, extra: &[String]) -> pbitt::Result<RunConfig> {
        RunConfig::resolve(parse_keys(text, origin)?, &self.overrides(extra)?, self.data_root().as_deref())
    }

    fn resolve(&self, extra: &[String]) -> pbitt::Result<RunConfig> {
        match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                self.resolve_text(&text, &path.display().to_string(), extra)
            }
            None => self.resolve_text("", "defaults", extra),
        }
    }
}

fn out_override(out: &Option<PathBuf>) -> Vec<String> {
    out.iter()
        .map(|p| format!("output.dir={}", toml_string(&p.to_string_lossy())))
        .collect()
}

fn toml_string(s: &str) -> String {
    let escaped: String = s
        .chars()
        .flat_map(|c| match c {
            '"' => vec!['\\', '"'],
            '\\' => vec!['\\', '\\'],
            c => vec![c],
        })
        .collect();
    format!("\"{escaped}\"")
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> pbitt::Result<i32> {
    let cfg = a.cfg.resolve(&out_override(&a.out))?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let echo = cfg.render();
    write_file(&dir.join(CONFIG_ECHO_FILE), &echo)?;
    let data = cfg.prepare_data()?;
    say(
        out,
        format_args!(
            "train: {} train / {} test active samples, passive {}, g {}, {} epochs, seed {}",
            data.active_train.len(),
            data.active_test.len(),
            cfg.passive_label(),
            cfg.train.policy.g,
            cfg.train.epochs,
            cfg.train.seed
        ),
    );
    match train_prepared(&cfg.train, &data) {
        Ok(o) => {
            write_file(&dir.join(HISTORY_FILE), o.history.to_jsonl())?;
            write_file(&dir.join(TIMING_FILE), o.history.timings_jsonl())?;
            let mut ck = Checkpoint::from_stripped(&o.model);
            ck.spec.config = Some(echo);
            ck.spec.normalization = Some(data.norm.clone());
            ck.save(&dir.join(CHECKPOINT_FILE))?;
            let gap = o.history.final_gap.expect("completed run");
            say(
                out,
                format_args!(
                    "done: train {:.4} test {:.4} gap {:.4} passive steps {} of {}",
                    gap.train_acc,
                    gap.test_acc,
                    gap.gap,
                    o.history.total_passive_steps(),
                    o.history.total_passive_steps() + o.history.total_active_steps()
                ),
            );
            say(out, format_args!("wrote {}", dir.display()));
            Ok(EXIT_OK)
        }
        Err(f) => {
            if let Some(h) = &f.history {
                write_file(&dir.join(HISTORY_FILE), h.to_jsonl())?;
                write_file(&dir.join(TIMING_FILE), h.timings_jsonl())?;
            }
            Err(f.error)
        }
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> pbitt::Result<i32> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let cfg = match (&a.cfg.config, &ck.spec.config) {
        (None, Some(stored)) => a.cfg.resolve_text(stored, "checkpoint config", &[])?,
        _ => a.cfg.resolve(&[])?,
    };
    // Only the active data is needed.
    let mut cfg = cfg;
    cfg.passive = PassiveSource::None;
    cfg.train.policy.g = Injection::Never;
    let data = cfg.prepare_data()?;
    let norm = ck.spec.normalization.clone().unwrap_or_else(|| data.norm.clone());
    let model = ck.into_model()?;
    let ds = if a.train_split { &data.active_train } else { &data.active_test };
    let r = evaluate(&model, ds, &norm, cfg.train.eval_batch)?;
    say(
        out,
        format_args!("top1={:.6} correct={} total={} mean_loss={:.6}", r.top1, r.correct, r.total, r.mean_loss),
    );
    Ok(EXIT_OK)
}

fn parse_values<T>(values: &[String], default: &[&str], parse: impl Fn(&str) -> pbitt::Result<T>) -> pbitt::Result<Vec<T>> {
    if values.is_empty() {
        default.iter().map(|s| parse(s)).collect()
    } else {
        values.iter().map(|s| parse(s.trim())).collect()
    }
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> pbitt::Result<i32> {
    let axis: Axis = a.axis.parse()?;
    let cfg = a.cfg.resolve(&out_override(&a.out))?;
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    let report = match axis {
        Axis::G => {
            let gs = parse_values(&a.values, &["1", "10", "100", "1000", "inf"], |s| s.parse::<Injection>())?;
            g_sweep(&cfg, &gs, &a.seeds, a.jobs)?
        }
        Axis::Fraction => {
            let fs = parse_values(&a.values, &["1.0", "0.25", "0.125"], |s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("--values: {s:?} is not a fraction")))
            })?;
            gap_study(&cfg, &fs, &a.seeds, a.jobs)?
        }
        Axis::Passive => {
            let default = if cfg.passive == PassiveSource::None { "synthetic" } else { "config" };
            let sources = parse_values(&a.values, &[default], |s| match s {
                "synthetic" => Ok(("synthetic".to_string(), PassiveSource::Synthetic)),
                "config" if cfg.passive != PassiveSource::None => Ok((cfg.passive_label().to_string(), cfg.passive.clone())),
                other => Err(Error::Config(format!(
                    "--values: passive sources are synthetic or config (with a passive dataset configured), got {other:?}"
                ))),
            })?;
            passive_ablation(&cfg, &sources, &a.seeds, a.jobs)?
        }
    };
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join(CONFIG_ECHO_FILE), cfg.render())?;
    write_file(&dir.join(REPORT_JSON_FILE), report.to_json())?;
    let table = report.to_table();
    write_file(&dir.join(REPORT_TEXT_FILE), &table)?;
    let _ = out.write_all(table.as_bytes());
    say(out, format_args!("wrote {}", dir.display()));
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> pbitt::Result<i32> {
    let size: SuiteSize = a.spec.parse()?;
    let fault = a.inject_fault.then_some(2.0);
    let checks = gradcheck_suite(size, fault)?;
    let width = checks.iter().map(|c| c.op.len()).max().unwrap_or(0);
    for c in &checks {
        say(
            out,
            format_args!(
                "{:width$}  max_rel_err={:.3e}  {}",
                c.op,
                c.max_rel_err,
                if c.passed() { "ok" } else { "FAIL" }
            ),
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    say(
        out,
        format_args!("{} of {} checks within {GRADCHECK_TOLERANCE:e}", checks.len() - failed, checks.len()),
    );
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> pbitt::Result<i32> {
    let text = std::fs::read_to_string(&a.input).map_err(io_err(&a.input))?;
    if text.trim_start().starts_with("{\n") || a.input.extension().is_some_and(|e| e == "json") {
        let report = AblationReport::from_json(&text)?;
        let _ = out.write_all(report.to_table().as_bytes());
        return Ok(EXIT_OK);
    }
    let _ = out.write_all(history_table(&text, &a.input)?.as_bytes());
    Ok(EXIT_OK)
}

/// Renders a history file as an epoch table.
pub fn history_table(text: &str, path: &Path) -> pbitt::Result<String> {
    let history = TrainHistory::from_jsonl(text).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })?;
    let mut s = format!(
        "seed {}  g {}  {} active batches/epoch\n{:>5}  {:>8}  {:>6}  {:>7}  {:>10}  {:>9}  {:>8}\n",
        history.seed, history.g, history.active_batches_per_epoch, "epoch", "lr", "active", "passive", "train_loss", "train_acc", "test_acc"
    );
    for e in &history.epochs {
        s.push_str(&format!(
            "{:>5}  {:>8.5}  {:>6}  {:>7}  {:>10.4}  {:>9.4}  {:>8.4}\n",
            e.epoch, e.lr, e.active_steps, e.passive_steps, e.train_loss, e.train_acc, e.test_acc
        ));
    }
    if let Some(g) = history.final_gap {
        s.push_str(&format!(
            "final: train {:.4}  test {:.4}  gap {:.4}\n",
            g.train_acc, g.test_acc, g.gap
        ));
    }
    Ok(s)
}
