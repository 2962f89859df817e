//! Command-line front end. Each command ends its output with one CSV header
//! line and one CSV value line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::compare::{run_compare, threads_from_env, CompareConfig};
use crate::config::{parse_list, ExperimentConfig};
use crate::data::{self, gen_corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate, grad_check, grad_check_batch, probe_invariance, ProbeConfig};
use crate::model::Domain;
use crate::train::{self, Scenario, Trainer};

// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! emit {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "datlab", version, about = "Domain adversarial training on synthetic frame corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus and its `.truth` sidecar.
    Gen(GenArgs),
    /// Train one model and write a checkpoint plus `<out>.log.csv`.
    Train(TrainArgs),
    /// Frame error rates of a checkpoint on a corpus with truth.
    Eval(EvalArgs),
    /// Domain probe accuracy on a checkpoint's tap features.
    Probe(ProbeArgs),
    /// Finite-difference check of a checkpoint's gradients.
    Gradcheck(GradcheckArgs),
    /// Run the scenario × λ × seed matrix and write a report.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set hp.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Corpus file to write; truth goes to `<out>.truth`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `corpus.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Overrides `train.scenario`.
    #[arg(long, value_parser = ["no_trans", "asr_trans", "human_trans"])]
    pub scenario: Option<String>,
    /// Overrides `hp.lambda`: > 0 adversarial, < 0 multi-task, 0 baseline.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint used to pseudo-label target speech (asr_trans).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Overrides `train.source`. Without a source the corpus is generated from the corpus keys.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Overrides `train.target`.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Overrides `hp.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Truth sidecar [default: <corpus>.truth]
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Check at this λ instead of the checkpoint's.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Frames taken from each (domain, speech, labeled) cell.
    #[arg(long, default_value_t = 4)]
    pub per_cell: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Comma-separated λ values.
    #[arg(long, default_value = "0,0.03,-0.03", allow_hyphen_values = true)]
    pub lambdas: String,
    /// Comma-separated scenarios [default: compare.scenarios]
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Also run the invariance probe on every model.
    #[arg(long)]
    pub probe: bool,
    /// Report file; per-run rows go to `<out>.runs.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Base `hp.seed`; seed k uses base + k.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg.set("corpus.seed", &seed.to_string())?;
    }
    let spec = cfg.corpus_spec()?;
    let corpus = gen_corpus(&spec)?;
    data::write_corpus(&corpus, &a.out)?;
    let truth = data::truth_path(&a.out);
    data::write_truth(&corpus, &truth)?;

    let counts = corpus.counts();
    say!("wrote {} frames to {} (truth: {})", corpus.len(), a.out.display(), truth.display());
    let mut header = Vec::new();
    let mut row = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for vad in [true, false] {
            for labeled in [true, false] {
                let n = counts.get(domain, vad, labeled);
                let name = format!(
                    "{}_{}_{}",
                    if domain == Domain::Source { "source" } else { "target" },
                    if vad { "speech" } else { "silence" },
                    if labeled { "labeled" } else { "unlabeled" }
                );
                say!("  {name:<32} {n}");
                header.push(name);
                row.push(n.to_string());
            }
        }
    }
    say!("{}", header.join(","));
    say!("{}", row.join(","));
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    if let Some(s) = &a.scenario {
        cfg.set("train.scenario", s)?;
    }
    if let Some(l) = a.lambda {
        cfg.set("hp.lambda", &l.to_string())?;
    }
    if let Some(s) = a.seed {
        cfg.set("hp.seed", &s.to_string())?;
    }
    for (key, path) in [("train.baseline", &a.baseline), ("train.source", &a.source), ("train.target", &a.target)] {
        if let Some(p) = path {
            cfg.set(key, &p.to_string_lossy())?;
        }
    }

    let outcome = if cfg.raw("train.source").is_some_and(|s| !s.is_empty()) {
        train::train(&cfg.train_config()?)
    } else {
        // No corpus files: generate the training split from the corpus keys.
        let hp = cfg.hyper_params()?;
        let scenario = cfg.scenario()?;
        let log_every = cfg.log_every()?;
        if log_every == 0 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        let baseline = match cfg.raw("train.baseline").filter(|s| !s.is_empty()) {
            Some(p) => Some(checkpoint::load(p)?.0),
            None if scenario == Scenario::AsrTrans => {
                return Err(Error::Config("scenario asr_trans requires a baseline checkpoint path".into()))
            }
            None => None,
        };
        let corpus = gen_corpus(&cfg.corpus_spec()?)?;
        train::train_corpus(&hp, scenario, &corpus, baseline.as_ref(), log_every)
    };

    let log_path = suffixed(&a.out, ".log.csv");
    match outcome {
        Ok(t) => {
            save_trainer(&t, &a.out, &log_path)?;
            say!("trained {} steps; checkpoint {}, log {}", t.steps(), a.out.display(), log_path.display());
            print_train_row(&t, "ok");
            Ok(EXIT_OK)
        }
        Err((e, Some(t))) => {
            save_trainer(&t, &a.out, &log_path)?;
            eprintln!("error: {e}");
            eprintln!("last good checkpoint after {} steps written to {}", t.steps(), a.out.display());
            print_train_row(&t, "aborted");
            Ok(e.exit_code())
        }
        Err((e, None)) => Err(e),
    }
}

fn save_trainer(t: &Trainer, ckpt: &Path, log: &Path) -> Result<()> {
    checkpoint::save(ckpt, &t.model, &t.hp)?;
    write_file(log, &t.log.to_csv())
}

fn print_train_row(t: &Trainer, status: &str) {
    let last = t.log.rows.last();
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    say!("status,lambda,steps,E,Ly,Ld,domain_acc");
    say!(
        "{status},{},{},{},{},{},{}",
        t.model.lambda(),
        t.steps(),
        f(last.map(|r| r.e)),
        f(last.map(|r| r.ly)),
        f(last.map(|r| r.ld)),
        f(last.map(|r| r.domain_acc)),
    );
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let truth = a.truth.clone().unwrap_or_else(|| data::truth_path(&a.corpus));
    let corpus = data::read_corpus_with_truth(&a.corpus, &truth)?;
    let m = evaluate(&model, &corpus)?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    say!("source FER  {}", f(m.fer_source));
    say!("target FER  {}", f(m.fer_target));
    say!("domain acc  {:.6}", m.domain_acc);
    say!("E {:.6}  Ly {:.6}  Ld {:.6}", m.e_value, m.ly_mean, m.ld_mean);
    say!("fer_source,fer_target,domain_acc,E,Ly,Ld");
    say!(
        "{},{},{:.6},{:.6},{:.6},{:.6}",
        f(m.fer_source),
        f(m.fer_target),
        m.domain_acc,
        m.e_value,
        m.ly_mean,
        m.ld_mean
    );
    Ok(EXIT_OK)
}

fn cmd_probe(a: &ProbeArgs) -> Result<i32> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let corpus = data::read_corpus(&a.corpus)?;
    let acc = probe_invariance(&model, &corpus, &ProbeConfig::default())?;
    say!("probe accuracy {acc:.6} (0.5 is domain-invariant)");
    say!("probe_accuracy");
    say!("{acc:.6}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let (mut model, _) = checkpoint::load(&a.ckpt)?;
    if let Some(l) = a.lambda {
        model.set_lambda(l);
    }
    let corpus = data::read_corpus(&a.corpus)?;
    let examples = model.prepare(&corpus.frames)?;
    let batch = grad_check_batch(&model, &examples, a.per_cell)?;
    let report = grad_check(&model, &batch, a.epsilon)?;
    let pass = report.max_rel_err <= a.tolerance;
    let worst = report.worst.map(|id| format!("{id:?}")).unwrap_or_default();
    say!(
        "max relative error {:.3e} over {} parameters (batch {}, lambda {}); worst {worst}",
        report.max_rel_err,
        report.checked,
        batch.len(),
        model.lambda()
    );
    say!("max_rel_err,checked,lambda,pass");
    say!("{:e},{},{},{}", report.max_rel_err, report.checked, model.lambda(), pass);
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_compare(a: &CompareArgs) -> Result<i32> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.set("hp.seed", &s.to_string())?;
    }
    if let Some(s) = &a.scenarios {
        cfg.set("compare.scenarios", s)?;
    }
    let lambdas: Vec<f64> =
        parse_list(&a.lambdas).map_err(|_| Error::Config(format!("--lambdas: cannot parse {:?}", a.lambdas)))?;
    let cc = CompareConfig {
        corpus: cfg.corpus_spec()?,
        hp: cfg.hyper_params()?,
        scenarios: cfg.compare_scenarios()?,
        lambdas,
        seeds: a.seeds,
        probe: a.probe || cfg.compare_probe()?,
        threads: threads_from_env()?,
    };
    let report = run_compare(&cc)?;
    let csv = report.to_csv();
    write_file(&a.out, &csv)?;
    let runs_path = suffixed(&a.out, ".runs.csv");
    write_file(&runs_path, &report.runs_csv())?;

    emit!("{csv}");
    let failures = report.failures();
    for f in &failures {
        if let Err(e) = &f.outcome {
            eprintln!("failed: {} lambda={} seed={}: {}", f.scenario.name(), f.lambda, f.seed, e.message);
        }
    }
    say!("report {} ({} runs in {})", a.out.display(), report.runs.len(), runs_path.display());
    say!("cells,runs,failed");
    say!("{},{},{}", report.cells.len(), report.runs.len(), failures.len());
    Ok(failures
        .first()
        .and_then(|f| f.outcome.as_ref().err())
        .map_or(EXIT_OK, |e| e.exit_code))
}
