//! Minibatch SGD over a merged source/target frame pool.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{self, Corpus};
use crate::error::{Error, Result};
use crate::layers;
use crate::model::{Activations, DatModel, Frame, HyperParams};
use crate::numeric::Pcg32;

/// How much of the target domain is transcribed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    /// Target frames are unlabeled.
    NoTrans,
    /// Target speech carries a baseline model's predictions.
    AsrTrans,
    /// Target speech carries its true labels.
    HumanTrans,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::NoTrans, Scenario::AsrTrans, Scenario::HumanTrans];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::NoTrans => "no_trans",
            Scenario::AsrTrans => "asr_trans",
            Scenario::HumanTrans => "human_trans",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?} (no_trans|asr_trans|human_trans)")))
    }
}

/// Builds the training view of `corpus` for a scenario.
///
/// `asr_trans` needs the baseline used for pseudo-labeling.
pub fn scenario_view(corpus: &Corpus, scenario: Scenario, baseline: Option<&DatModel>) -> Result<Corpus> {
    match scenario {
        Scenario::NoTrans => Ok(corpus.no_trans()),
        Scenario::HumanTrans => corpus.human_trans(),
        Scenario::AsrTrans => {
            let baseline = baseline
                .ok_or_else(|| Error::Config("scenario asr_trans requires a baseline checkpoint".into()))?;
            data::pseudo_label(&corpus.no_trans(), baseline)
        }
    }
}

/// File-driven training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub scenario: Scenario,
    pub source_path: PathBuf,
    /// Defaults to `source_path`: domain-1 frames are taken from this file.
    pub target_path: Option<PathBuf>,
    pub baseline_path: Option<PathBuf>,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.scenario == Scenario::AsrTrans && self.baseline_path.is_none() {
            return Err(Error::Config("scenario asr_trans requires a baseline checkpoint path".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Reads the source and target corpora and merges them.
    ///
    /// Source frames come from `source_path`, target frames from
    /// `target_path`; each file's truth sidecar is attached when present.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let load = |path: &PathBuf| -> Result<Corpus> {
            let mut c = data::read_corpus(path)?;
            let tp = data::truth_path(path);
            if tp.exists() {
                let sidecar = data::read_corpus(&tp)?;
                data::attach_truth(&mut c, &sidecar)?;
            }
            Ok(c)
        };
        let source = load(&self.source_path)?;
        let target = match &self.target_path {
            Some(p) if p != &self.source_path => load(p)?,
            _ => source.clone(),
        };
        source
            .domain(crate::model::Domain::Source)
            .concat(&target.domain(crate::model::Domain::Target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub e: f64,
    pub ly: f64,
    pub ld: f64,
    pub domain_acc: f64,
}

/// Rows of the training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "epoch,batch,E,Ly,Ld,domain_acc";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.batch, r.e, r.ly, r.ld, r.domain_acc);
        }
        s
    }
}

/// Batches of example indices for every epoch.
///
/// The pool is reshuffled once per epoch; the final partial batch is dropped.
pub fn batch_schedule(len: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = Pcg32::new(seed, 0x73687566);
    let mut order: Vec<usize> = (0..len).collect();
    (0..epochs)
        .map(|_| {
            rng.shuffle(&mut order);
            order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

/// Loss summary of a forward pass, normalized by `n`.
pub fn batch_stats(acts: &Activations, batch: &[Frame], lambda: f64, n: usize) -> LogRow {
    let (mut e, mut ly, mut ld) = (0.0, 0.0, 0.0);
    let (mut hits, mut speech) = (0usize, 0usize);
    for (i, f) in batch.iter().enumerate() {
        let mut term = 0.0;
        if let Some(label) = f.label {
            let (l, _) = layers::softmax_row(acts.task_logits.row(i), label);
            ly += l;
            term += l;
        }
        if f.vad {
            let row = acts.domain_logits.row(i);
            let (l, _) = layers::softmax_row(row, f.domain.index());
            ld += l;
            term -= lambda * l;
            speech += 1;
            hits += (layers::argmax(row) == f.domain.index()) as usize;
        }
        e += term;
    }
    let n = n as f64;
    LogRow {
        epoch: 0,
        batch: 0,
        e: e / n,
        ly: ly / n,
        ld: ld / n,
        domain_acc: if speech == 0 { f64::NAN } else { hits as f64 / speech as f64 },
    }
}

/// Owns a model during training; keeps the last good parameters on abort.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DatModel,
    pub hp: HyperParams,
    pub log: TrainLog,
    pub log_every: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(hp: &HyperParams, log_every: usize) -> Result<Trainer> {
        Ok(Trainer {
            model: DatModel::build(hp)?,
            hp: hp.clone(),
            log: TrainLog::default(),
            log_every: log_every.max(1),
            steps: 0,
        })
    }

    /// SGD steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One SGD step normalized by `n`. A non-finite loss aborts before the update.
    pub fn step(&mut self, epoch: usize, batch_index: usize, batch: &[Frame], n: usize) -> Result<()> {
        let acts = self.model.forward(batch)?;
        let mut stats = batch_stats(&acts, batch, self.model.lambda(), n);
        if !stats.e.is_finite() || !stats.ly.is_finite() || !stats.ld.is_finite() {
            return Err(Error::NonFinite {
                group: "loss",
                detail: format!("epoch {epoch} batch {batch_index}: E={}", stats.e),
            });
        }
        let grads = self.model.backward_normalized(batch, n)?;
        self.model.sgd_step(&grads, self.hp.alpha)?;
        self.steps += 1;
        if self.steps % self.log_every == 0 {
            stats.epoch = epoch;
            stats.batch = batch_index;
            self.log.rows.push(stats);
        }
        Ok(())
    }

    /// Runs an explicit schedule over prepared examples.
    pub fn run_schedule(&mut self, examples: &[Frame], schedule: &[Vec<Vec<usize>>], n: usize) -> Result<()> {
        let mut batch = Vec::with_capacity(n);
        for (epoch, batches) in schedule.iter().enumerate() {
            for (bi, idx) in batches.iter().enumerate() {
                batch.clear();
                batch.extend(idx.iter().map(|&i| examples[i].clone()));
                self.step(epoch, bi, &batch, n)?;
            }
        }
        self.model.clear_trace();
        Ok(())
    }

    /// Trains on a corpus view (labels already set for the scenario).
    pub fn fit(&mut self, corpus: &Corpus) -> Result<()> {
        let examples = self.model.prepare(&corpus.frames)?;
        let schedule = batch_schedule(examples.len(), self.hp.batch_size, self.hp.epochs, self.hp.seed);
        self.run_schedule(&examples, &schedule, self.hp.batch_size)
    }
}

/// Builds, trains and returns a model on a prepared scenario view.
pub fn train_model(hp: &HyperParams, view: &Corpus, log_every: usize) -> Result<(DatModel, TrainLog)> {
    let mut trainer = Trainer::new(hp, log_every)?;
    trainer.fit(view)?;
    Ok((trainer.model, trainer.log))
}

/// Result of a run that may abort part-way: the error comes with the trainer
/// holding the last good parameters when training had started.
pub type TrainOutcome = std::result::Result<Trainer, (Error, Option<Box<Trainer>>)>;

/// Trains from a [`TrainConfig`]. On a numeric abort the trainer is returned
/// with the last good parameters alongside the error.
pub fn train(config: &TrainConfig) -> TrainOutcome {
    config.validate().map_err(|e| (e, None))?;
    let corpus = config.load_corpus().map_err(|e| (e, None))?;
    let baseline = match &config.baseline_path {
        Some(p) if config.scenario == Scenario::AsrTrans => {
            Some(crate::checkpoint::load(p).map_err(|e| (e, None))?.0)
        }
        _ => None,
    };
    train_corpus(&config.hp, config.scenario, &corpus, baseline.as_ref(), config.log_every)
}

/// Trains on an in-memory corpus under a scenario.
pub fn train_corpus(
    hp: &HyperParams,
    scenario: Scenario,
    corpus: &Corpus,
    baseline: Option<&DatModel>,
    log_every: usize,
) -> TrainOutcome {
    if corpus.dim != hp.arch.input_dim || corpus.classes != hp.arch.classes {
        return Err((
            Error::Config(format!(
                "corpus dim={} classes={} but model expects dim={} classes={}",
                corpus.dim, corpus.classes, hp.arch.input_dim, hp.arch.classes
            )),
            None,
        ));
    }
    let view = scenario_view(corpus, scenario, baseline).map_err(|e| (e, None))?;
    let mut trainer = Trainer::new(hp, log_every).map_err(|e| (e, None))?;
    match trainer.fit(&view) {
        Ok(()) => Ok(trainer),
        Err(e) => {
            trainer.model.clear_trace();
            Err((e, Some(Box::new(trainer))))
        }
    }
}
