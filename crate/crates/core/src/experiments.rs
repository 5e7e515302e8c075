//! Multi-seed experiment runners and their reports.
//!
//! A report is a list of cells (one configuration each) with one run per
//! seed. Failed runs stay in the report with their error message and are
//! left out of the aggregates.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{PassiveSource, RunConfig};
use crate::error::{Error, Result};
use crate::scheduler::{train_prepared, Injection, TrainHistory};

pub const REPORT_FORMAT: &str = "pbitt-ablation";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    G,
    Fraction,
    Passive,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" => Ok(Axis::G),
            "fraction" => Ok(Axis::Fraction),
            "passive" => Ok(Axis::Passive),
            other => Err(Error::Config(format!("--axis: expected g, fraction or passive, got {other:?}"))),
        }
    }
}

/// Passive steps per active step over a whole run.
pub fn overhead_probe(history: &TrainHistory) -> f64 {
    let active = history.total_active_steps();
    if active == 0 {
        return 0.0;
    }
    history.total_passive_steps() as f64 / active as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// `None` for completed runs.
    pub error: Option<String>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub gap: Option<f64>,
    pub passive_fraction: Option<f64>,
    pub epochs_completed: usize,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { n, mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Value along the ablation axis, e.g. `100` or `0.25`.
    pub label: String,
    /// `baseline` or `pbitt`.
    pub arm: String,
    pub g: Injection,
    pub config: String,
    pub runs: Vec<RunRecord>,
    pub test_acc: Option<Stat>,
    pub train_acc: Option<Stat>,
    pub gap: Option<Stat>,
    pub failed: usize,
}

impl Cell {
    fn new(label: String, arm: &str, cfg: &RunConfig, runs: Vec<RunRecord>) -> Self {
        let pick = |f: fn(&RunRecord) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
        Cell {
            test_acc: Stat::of(&pick(|r| r.test_acc)),
            train_acc: Stat::of(&pick(|r| r.train_acc)),
            gap: Stat::of(&pick(|r| r.gap)),
            failed: runs.iter().filter(|r| !r.ok()).count(),
            label,
            arm: arm.to_string(),
            g: cfg.train.policy.g,
            config: cfg.render(),
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub format_version: u32,
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

/// Trains one configuration to completion and summarizes it.
pub fn run_one(cfg: &RunConfig) -> RunRecord {
    let seed = cfg.train.seed;
    let failed = |error: String, history: Option<&TrainHistory>| RunRecord {
        seed,
        error: Some(error),
        train_acc: None,
        test_acc: None,
        gap: None,
        passive_fraction: None,
        epochs_completed: history.map_or(0, |h| h.epochs.len()),
    };
    let data = match cfg.prepare_data() {
        Ok(d) => d,
        Err(e) => return failed(e.to_string(), None),
    };
    match train_prepared(&cfg.train, &data) {
        Ok(out) => {
            let gap = out.history.final_gap.expect("completed runs record a gap");
            RunRecord {
                seed,
                error: None,
                train_acc: Some(gap.train_acc),
                test_acc: Some(gap.test_acc),
                gap: Some(gap.gap),
                passive_fraction: Some(overhead_probe(&out.history)),
                epochs_completed: out.history.epochs.len(),
            }
        }
        Err(f) => failed(f.error.to_string(), f.history.as_ref()),
    }
}

/// Runs every config with at most `jobs` worker threads. Results come back
/// in input order whatever the completion order.
pub fn run_all(configs: &[RunConfig], jobs: usize) -> Vec<RunRecord> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                log::info!("run {}/{}: seed {} g {}", i + 1, configs.len(), cfg.train.seed, cfg.train.policy.g);
                let rec = run_one(cfg);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(rec);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every index was claimed"))
        .collect()
}

struct Plan {
    label: String,
    arm: &'static str,
    cfg: RunConfig,
}

fn execute(axis: Axis, plans: Vec<Plan>, seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    for p in &plans {
        p.cfg.validate()?;
    }
    let configs: Vec<RunConfig> = plans
        .iter()
        .flat_map(|p| seeds.iter().map(|&s| p.cfg.clone().with_seed(s)))
        .collect();
    let mut records = run_all(&configs, jobs).into_iter();
    let cells = plans
        .into_iter()
        .map(|p| {
            let runs = records.by_ref().take(seeds.len()).collect();
            Cell::new(p.label, p.arm, &p.cfg, runs)
        })
        .collect();
    Ok(AblationReport {
        format: REPORT_FORMAT.into(),
        format_version: REPORT_VERSION,
        axis,
        seeds: seeds.to_vec(),
        cells,
    })
}

fn pbitt_g(base: &RunConfig) -> Injection {
    match base.train.policy.g {
        Injection::Never => Injection::Every(100),
        g => g,
    }
}

/// Baseline and PBITT at each training-data fraction.
pub fn gap_study(base: &RunConfig, fractions: &[f64], seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    if base.passive == PassiveSource::None {
        return Err(Error::Config("gap study needs a passive dataset for the PBITT arm".into()));
    }
    let mut plans = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("fractions must be in (0, 1], got {f}")));
        }
        let mut baseline = base.clone();
        baseline.fraction = f;
        baseline.passive = PassiveSource::None;
        baseline.train.policy.g = Injection::Never;
        let mut pbitt = base.clone();
        pbitt.fraction = f;
        pbitt.train.policy.g = pbitt_g(base);
        plans.push(Plan {
            label: f.to_string(),
            arm: "baseline",
            cfg: baseline,
        });
        plans.push(Plan {
            label: f.to_string(),
            arm: "pbitt",
            cfg: pbitt,
        });
    }
    execute(Axis::Fraction, plans, seeds, jobs)
}

/// One PBITT run per `(g, seed)`. `Injection::Never` is the baseline cell.
pub fn g_sweep(base: &RunConfig, g_values: &[Injection], seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    if base.passive == PassiveSource::None && g_values.iter().any(|g| *g != Injection::Never) {
        return Err(Error::Config("g sweep needs a passive dataset".into()));
    }
    let plans = g_values
        .iter()
        .map(|&g| {
            let mut cfg = base.clone();
            cfg.train.policy.g = g;
            Plan {
                label: g.to_string(),
                arm: if g == Injection::Never { "baseline" } else { "pbitt" },
                cfg,
            }
        })
        .collect();
    execute(Axis::G, plans, seeds, jobs)
}

/// A baseline cell plus one PBITT cell per passive source.
pub fn passive_ablation(
    base: &RunConfig,
    sources: &[(String, PassiveSource)],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationReport> {
    let mut baseline = base.clone();
    baseline.passive = PassiveSource::None;
    baseline.train.policy.g = Injection::Never;
    let mut plans = vec![Plan {
        label: "none".into(),
        arm: "baseline",
        cfg: baseline,
    }];
    for (label, src) in sources {
        if *src == PassiveSource::None {
            continue;
        }
        let mut cfg = base.clone();
        cfg.passive = src.clone();
        cfg.train.policy.g = pbitt_g(base);
        plans.push(Plan {
            label: label.clone(),
            arm: "pbitt",
            cfg,
        });
    }
    execute(Axis::Passive, plans, seeds, jobs)
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: AblationReport =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed report: {e}")))?;
        if r.format != REPORT_FORMAT || r.format_version != REPORT_VERSION {
            return Err(Error::Config(format!(
                "unsupported report {} v{} (expected {REPORT_FORMAT} v{REPORT_VERSION})",
                r.format, r.format_version
            )));
        }
        Ok(r)
    }

    pub fn cell(&self, label: &str, arm: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.label == label && c.arm == arm)
    }

    pub fn failed_runs(&self) -> usize {
        self.cells.iter().map(|c| c.failed).sum()
    }

    /// Aligned text table, accuracies in percent.
    pub fn to_table(&self) -> String {
        let head = match self.axis {
            Axis::G => "g",
            Axis::Fraction => "fraction",
            Axis::Passive => "passive",
        };
        let pct = |s: &Option<Stat>| match s {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            None => "n/a".to_string(),
        };
        let mut rows = vec![[
            head.to_string(),
            "arm".into(),
            "train acc".into(),
            "test acc".into(),
            "gap".into(),
            "runs".into(),
        ]];
        for c in &self.cells {
            let runs = if c.failed > 0 {
                format!("{}/{} ({} failed)", c.runs.len() - c.failed, c.runs.len(), c.failed)
            } else {
                format!("{}/{}", c.runs.len(), c.runs.len())
            };
            rows.push([c.label.clone(), c.arm.clone(), pct(&c.train_acc), pct(&c.test_acc), pct(&c.gap), runs]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        writeln!(out, "axis: {head}   seeds: {}", seeds.join(",")).unwrap();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(v, &w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
            if n == 0 {
                writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
            }
        }
        for c in &self.cells {
            for r in c.runs.iter().filter(|r| !r.ok()) {
                writeln!(
                    out,
                    "FAILED {head}={} arm={} seed={}: {}",
                    c.label,
                    c.arm,
                    r.seed,
                    r.error.as_deref().unwrap_or("")
                )
                .unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.active_train = 60;
        cfg.synth.active_test = 40;
        cfg.synth.passive_count = 40;
        cfg.synth.image = [3, 8, 8];
        cfg.train.trunk_widths = vec![4, 8];
        cfg.train.epochs = 1;
        cfg.train.policy.active_batch = 10;
        cfg.train.policy.passive_batch = 10;
        cfg.train.policy.g = Injection::Every(2);
        cfg.train.augment.pad = 1;
        cfg
    }

    #[test]
    fn stat_matches_hand_computation() {
        let s = Stat::of(&[1.0, 2.0, 4.0]).unwrap();
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        let var = ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0;
        assert!((s.std - var.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.5]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn g_sweep_cells_and_recompute() {
        let report = g_sweep(&tiny(), &[Injection::Every(1), Injection::Never], &[1, 2], 2).unwrap();
        assert_eq!(report.cells.len(), 2);
        for c in &report.cells {
            assert_eq!(c.runs.len(), 2);
            let raws: Vec<f64> = c.runs.iter().filter_map(|r| r.test_acc).collect();
            let s = Stat::of(&raws).unwrap();
            let t = c.test_acc.unwrap();
            assert!((s.mean - t.mean).abs() <= 1e-12 && (s.std - t.std).abs() <= 1e-12);
            for r in &c.runs {
                assert!((r.gap.unwrap() - (r.train_acc.unwrap() - r.test_acc.unwrap())).abs() == 0.0);
            }
        }
        let baseline = report.cell("inf", "baseline").unwrap();
        assert!(baseline.runs.iter().all(|r| r.passive_fraction == Some(0.0)));
        let g1 = report.cell("1", "pbitt").unwrap();
        assert!(g1.runs.iter().all(|r| r.passive_fraction == Some(1.0)));

        let back = AblationReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
        let table = report.to_table();
        assert!(table.contains("inf") && table.contains("baseline"), "{table}");
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = tiny();
        let configs: Vec<RunConfig> = (1..=3).map(|s| cfg.clone().with_seed(s)).collect();
        assert_eq!(run_all(&configs, 1), run_all(&configs, 3));
    }

    #[test]
    fn failed_runs_are_kept() {
        let mut cfg = tiny();
        cfg.train.schedule.initial = 1e6;
        let report = g_sweep(&cfg, &[Injection::Every(1)], &[1], 1).unwrap();
        let c = &report.cells[0];
        assert_eq!(c.failed, 1);
        assert!(c.test_acc.is_none());
        assert!(c.runs[0].error.as_deref().unwrap().contains("diverged"), "{:?}", c.runs[0].error);
        assert!(report.to_table().contains("FAILED"));
    }
}
