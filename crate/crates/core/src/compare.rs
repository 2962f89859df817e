//! Multi-seed experiment matrix over scenarios and λ values.
//!
//! Every seed trains its own λ=0 `no_trans` baseline. That model is the
//! reference for the relative-reduction column and the labeler for
//! `asr_trans` cells of the same seed. Seeds are independent, so they may run
//! on several threads; results are gathered by seed index and the report does
//! not depend on scheduling.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{gen_corpus, Corpus, CorpusSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, probe_invariance, relative_reduction, Metrics, ProbeConfig};
use crate::model::{DatModel, HyperParams};
use crate::train::{scenario_view, train_model, Scenario};

pub const THREADS_VAR: &str = "DATLAB_THREADS";

pub const REPORT_HEADER: &str = "scenario,lambda,runs,failed,fer_target_mean,fer_target_std,\
fer_source_mean,fer_source_std,dev_fer_target_mean,rel_reduction,probe_mean";

pub const RUNS_HEADER: &str = "scenario,lambda,seed,split,fer_source,fer_target,domain_acc,E,Ly,Ld,probe";

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    /// Corpus recipe; the split field is ignored, all three splits are generated.
    pub corpus: CorpusSpec,
    /// Seed `k` trains with `hp.seed + k`.
    pub hp: HyperParams,
    pub scenarios: Vec<Scenario>,
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub probe: bool,
    pub threads: usize,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("compare needs at least one seed".into()));
        }
        if self.scenarios.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("compare needs at least one scenario and one lambda".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !l.is_finite()) {
            return Err(Error::Config(format!("lambda {l} is not finite")));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be >= 1".into()));
        }
        self.corpus.validate()?;
        self.hp.validate()?;
        if self.corpus.dim != self.hp.arch.input_dim || self.corpus.classes != self.hp.arch.classes {
            return Err(Error::Config("corpus dim/classes disagree with the architecture".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(Scenario, f64)> {
        self.scenarios
            .iter()
            .flat_map(|&s| self.lambdas.iter().map(move |&l| (s, l)))
            .collect()
    }
}

/// Reads `DATLAB_THREADS`; unset means 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR}={v:?} is not a positive integer"))),
        },
    }
}

/// Why a cell did not complete.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub exit_code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { exit_code: e.exit_code(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dev: Metrics,
    pub test: Metrics,
    /// Probe accuracy on test-split tap features.
    pub probe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub scenario: Scenario,
    pub lambda: f64,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutcome, Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub lambda: f64,
    pub runs: usize,
    pub failed: usize,
    pub fer_target_mean: Option<f64>,
    pub fer_target_std: Option<f64>,
    pub fer_source_mean: Option<f64>,
    pub fer_source_std: Option<f64>,
    pub dev_fer_target_mean: Option<f64>,
    /// Against the mean test `fer_target` of the λ=0 `no_trans` baselines.
    pub rel_reduction: Option<f64>,
    pub probe_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    /// Seed-major, then cell order.
    pub runs: Vec<Run>,
    pub cells: Vec<CellSummary>,
    /// Per-seed baseline (`no_trans`, λ=0) outcome.
    pub baselines: Vec<std::result::Result<RunOutcome, Failure>>,
}

/// Train, dev and test corpora of one recipe.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn generate(spec: &CorpusSpec) -> Result<Splits> {
        Ok(Splits {
            train: gen_corpus(&spec.with_split(Split::Train))?,
            dev: gen_corpus(&spec.with_split(Split::Dev))?,
            test: gen_corpus(&spec.with_split(Split::Test))?,
        })
    }
}

pub fn run_compare(cfg: &CompareConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let splits = Splits::generate(&cfg.corpus)?;
    run_compare_on(cfg, &splits)
}

/// Runs the matrix on already generated corpora.
pub fn run_compare_on(cfg: &CompareConfig, splits: &Splits) -> Result<CompareReport> {
    cfg.validate()?;
    let slots: Mutex<Vec<Option<SeedResult>>> = Mutex::new(vec![None; cfg.seeds]);
    let next = AtomicUsize::new(0);
    let workers = cfg.threads.min(cfg.seeds);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= cfg.seeds {
                    break;
                }
                let result = run_seed(cfg, splits, k);
                slots.lock().unwrap()[k] = Some(result);
            });
        }
    });
    let seeds: Vec<SeedResult> = slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect();

    let mut runs = Vec::new();
    let mut baselines = Vec::new();
    for s in seeds {
        baselines.push(s.baseline);
        runs.extend(s.runs);
    }
    let base_fers: Vec<f64> = baselines
        .iter()
        .filter_map(|b| b.as_ref().ok().and_then(|o| o.test.fer_target))
        .collect();
    let base_mean = mean(&base_fers);
    let cells = cfg
        .cells()
        .into_iter()
        .map(|(scenario, lambda)| summarize(&runs, scenario, lambda, base_mean))
        .collect();
    Ok(CompareReport { runs, cells, baselines })
}

#[derive(Debug, Clone)]
struct SeedResult {
    baseline: std::result::Result<RunOutcome, Failure>,
    runs: Vec<Run>,
}

fn run_seed(cfg: &CompareConfig, splits: &Splits, k: usize) -> SeedResult {
    let seed = cfg.hp.seed.wrapping_add(k as u64);
    let hp_for = |lambda: f64| HyperParams { lambda, seed, ..cfg.hp.clone() };
    let measure = |model: &DatModel| -> std::result::Result<RunOutcome, Failure> {
        let probe = if cfg.probe { Some(probe_invariance(model, &splits.test, &ProbeConfig::default())?) } else { None };
        Ok(RunOutcome { dev: evaluate(model, &splits.dev)?, test: evaluate(model, &splits.test)?, probe })
    };

    let no_trans = splits.train.no_trans();
    let base_model = train_model(&hp_for(0.0), &no_trans, usize::MAX).map(|(m, _)| m);
    let baseline = match &base_model {
        Ok(m) => measure(m),
        Err(e) => Err(Failure { exit_code: e.exit_code(), message: format!("baseline: {e}") }),
    };

    let mut runs = Vec::new();
    for (scenario, lambda) in cfg.cells() {
        let outcome = if scenario == Scenario::NoTrans && lambda == 0.0 {
            baseline.clone()
        } else {
            let view = match (scenario, &base_model) {
                (Scenario::AsrTrans, Err(_)) => Err(Failure {
                    exit_code: baseline.as_ref().err().map_or(2, |f| f.exit_code),
                    message: "baseline for pseudo-labels failed".into(),
                }),
                (_, m) => scenario_view(&splits.train, scenario, m.as_ref().ok()).map_err(Failure::from),
            };
            view.and_then(|v| {
                let (model, _) = train_model(&hp_for(lambda), &v, usize::MAX)?;
                measure(&model)
            })
        };
        runs.push(Run { scenario, lambda, seed, outcome });
    }
    SeedResult { baseline, runs }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

fn summarize(runs: &[Run], scenario: Scenario, lambda: f64, base_mean: Option<f64>) -> CellSummary {
    let cell: Vec<&Run> = runs
        .iter()
        .filter(|r| r.scenario == scenario && r.lambda.to_bits() == lambda.to_bits())
        .collect();
    let ok: Vec<&RunOutcome> = cell.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let collect = |f: &dyn Fn(&RunOutcome) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|o| f(o)).collect() };
    let tgt = collect(&|o| o.test.fer_target);
    let src = collect(&|o| o.test.fer_source);
    let dev = collect(&|o| o.dev.fer_target);
    let probes = collect(&|o| o.probe);
    let fer_target_mean = mean(&tgt);
    let rel_reduction = match (base_mean, fer_target_mean) {
        (Some(b), Some(n)) => relative_reduction(b, n).ok(),
        _ => None,
    };
    CellSummary {
        scenario,
        lambda,
        runs: cell.len(),
        failed: cell.len() - ok.len(),
        fer_target_mean,
        fer_target_std: std_dev(&tgt),
        fer_source_mean: mean(&src),
        fer_source_std: std_dev(&src),
        dev_fer_target_mean: mean(&dev),
        rel_reduction,
        probe_mean: mean(&probes),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CompareReport {
    pub fn failures(&self) -> Vec<&Run> {
        self.runs.iter().filter(|r| r.outcome.is_err()).collect()
    }

    pub fn cell(&self, scenario: Scenario, lambda: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.lambda.to_bits() == lambda.to_bits())
    }

    /// Outcomes of one cell in seed order.
    pub fn outcomes(&self, scenario: Scenario, lambda: f64) -> Vec<&std::result::Result<RunOutcome, Failure>> {
        self.runs
            .iter()
            .filter(|r| r.scenario == scenario && r.lambda.to_bits() == lambda.to_bits())
            .map(|r| &r.outcome)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.scenario.name(),
                c.lambda,
                c.runs,
                c.failed,
                opt(c.fer_target_mean),
                opt(c.fer_target_std),
                opt(c.fer_source_mean),
                opt(c.fer_source_std),
                opt(c.dev_fer_target_mean),
                opt(c.rel_reduction),
                opt(c.probe_mean),
            );
        }
        out
    }

    /// One row per (scenario, λ, seed, split); failed runs are omitted.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(RUNS_HEADER);
        out.push('\n');
        for r in &self.runs {
            let Ok(o) = &r.outcome else { continue };
            for (split, m, probe) in [("dev", &o.dev, None), ("test", &o.test, o.probe)] {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    r.scenario.name(),
                    r.lambda,
                    r.seed,
                    split,
                    opt(m.fer_source),
                    opt(m.fer_target),
                    m.domain_acc,
                    m.e_value,
                    m.ly_mean,
                    m.ld_mean,
                    opt(probe),
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn small(seeds: usize, threads: usize) -> CompareConfig {
        CompareConfig {
            corpus: CorpusSpec { utterances_per_domain: 10, ..CorpusSpec::default() },
            hp: HyperParams {
                epochs: 2,
                arch: Architecture { feature_widths: vec![12, 12, 12], domain_widths: vec![8, 8], ..Architecture::default() },
                ..HyperParams::default()
            },
            scenarios: vec![Scenario::NoTrans, Scenario::AsrTrans],
            lambdas: vec![0.0, 0.03],
            seeds,
            probe: false,
            threads,
        }
    }

    #[test]
    fn matrix_shape() {
        let report = run_compare(&small(2, 1)).unwrap();
        assert_eq!(report.runs.len(), 8);
        assert_eq!(report.cells.len(), 4);
        assert!(report.failures().is_empty());
        assert_eq!(report.to_csv().lines().count(), 5);
        assert_eq!(report.runs_csv().lines().count(), 1 + 16);
        let base = report.cell(Scenario::NoTrans, 0.0).unwrap();
        assert!(base.rel_reduction.unwrap().abs() < 1e-9);
    }

    #[test]
    fn threads_do_not_change_the_report() {
        let a = run_compare(&small(3, 1)).unwrap();
        let b = run_compare(&small(3, 3)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.runs_csv(), b.runs_csv());
    }

    #[test]
    fn zero_seeds_is_config_error() {
        assert!(matches!(run_compare(&small(0, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn std_dev_cases() {
        assert_eq!(std_dev(&[]), None);
        assert_eq!(std_dev(&[3.0]), Some(0.0));
        assert!((std_dev(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }
}
