//! Evaluation, the invariance probe and the finite-difference gradient checker.

use crate::data::{self, Corpus};
use crate::error::{Error, Result};
use crate::layers::{self, DenseLayer};
use crate::model::{DatModel, Domain, Frame, Group, ParamId};
use crate::numeric::{Matrix, Pcg32};
use crate::train::batch_stats;

/// Per-domain frame error rates and loss components on one corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `None` when the corpus has no source speech frames.
    pub fer_source: Option<f64>,
    pub fer_target: Option<f64>,
    /// Domain-head accuracy over speech frames.
    pub domain_acc: f64,
    pub e_value: f64,
    pub ly_mean: f64,
    pub ld_mean: f64,
}

/// Frame error rates over truth-labeled speech frames, split by domain.
///
/// Losses are computed with every speech frame labeled by its truth.
pub fn evaluate(model: &DatModel, corpus: &Corpus) -> Result<Metrics> {
    let truth = corpus
        .truth
        .as_ref()
        .ok_or_else(|| Error::Validation("evaluation corpus has no truth labels".into()))?;
    let mut inputs = data::splice_every_frame(model, &corpus.frames)?;
    for (f, t) in inputs.iter_mut().zip(truth) {
        f.label = if f.vad { *t } else { None };
    }
    let speech: Vec<Frame> = inputs.into_iter().filter(|f| f.vad && f.label.is_some()).collect();
    if speech.is_empty() {
        return Err(Error::Validation("no speech frames with truth to evaluate".into()));
    }

    let mut errors = [0usize; 2];
    let mut totals = [0usize; 2];
    let mut domain_hits = 0usize;
    let (mut e, mut ly, mut ld) = (0.0, 0.0, 0.0);
    for chunk in speech.chunks(1024) {
        let acts = model.infer(chunk)?;
        let stats = batch_stats(&acts, chunk, model.lambda(), 1);
        e += stats.e;
        ly += stats.ly;
        ld += stats.ld;
        for (i, f) in chunk.iter().enumerate() {
            let d = f.domain.index();
            totals[d] += 1;
            if layers::argmax(acts.task_logits.row(i)) != f.label.unwrap() {
                errors[d] += 1;
            }
            if layers::argmax(acts.domain_logits.row(i)) == d {
                domain_hits += 1;
            }
        }
    }
    let n = speech.len() as f64;
    let rate = |d: usize| (totals[d] > 0).then(|| errors[d] as f64 / totals[d] as f64);
    Ok(Metrics {
        fer_source: rate(0),
        fer_target: rate(1),
        domain_acc: domain_hits as f64 / n,
        e_value: e / n,
        ly_mean: ly / n,
        ld_mean: ld / n,
    })
}

/// `100·(base − new)/base`.
pub fn relative_reduction(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::Validation(format!("relative reduction needs base > 0, got {base}")));
    }
    Ok(100.0 * (base - new) / base)
}

/// Mean of the per-pair relative reductions.
pub fn mean_relative_reduction(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("no pairs to average".into()));
    }
    let mut sum = 0.0;
    for &(b, n) in pairs {
        sum += relative_reduction(b, n)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Settings of the invariance probe. Fixed so probe numbers are comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 20, alpha: 0.05, batch_size: 32, train_fraction: 0.8, seed: 0x70726f6265 }
    }
}

pub const PROBE_MIN_FRAMES: usize = 100;

/// Small ReLU classifier used by the probe.
#[derive(Debug, Clone)]
pub struct Classifier {
    layers: Vec<DenseLayer>,
}

impl Classifier {
    pub fn new(input: usize, hidden: &[usize], classes: usize, rng: &mut Pcg32) -> Classifier {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Classifier { layers: dims.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect() }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.infer(&h)?;
            if i < last {
                h = layers::relu_forward(&h);
            }
        }
        Ok(h)
    }

    /// One mean-cross-entropy SGD step.
    pub fn step(&mut self, x: &Matrix, labels: &[usize], alpha: f64) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = l.infer(&h)?;
            inputs.push(h);
            h = if i < last { layers::relu_forward(&pre) } else { pre.clone() };
            pres.push(pre);
        }
        let (_, grad) = layers::softmax_ce(&h, labels)?;
        let mut grad = grad.scale(1.0 / labels.len() as f64);
        for i in (0..self.layers.len()).rev() {
            if i < last {
                grad = layers::relu_backward(&pres[i], &grad)?;
            }
            let (gin, g) = self.layers[i].backward_from(&inputs[i], &grad)?;
            self.layers[i].apply(&g, alpha);
            grad = gin;
        }
        Ok(())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let hits = (0..logits.rows()).filter(|&r| layers::argmax(logits.row(r)) == labels[r]).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Trains a fresh domain classifier on frozen tap features of speech frames and
/// returns its held-out accuracy.
pub fn probe_invariance(model: &DatModel, corpus: &Corpus, cfg: &ProbeConfig) -> Result<f64> {
    let inputs = data::splice_every_frame(model, &corpus.frames)?;
    let speech: Vec<Frame> = inputs.into_iter().filter(|f| f.vad).collect();
    probe_features(model, &speech, cfg)
}

/// Probe over already-prepared model inputs.
pub fn probe_features(model: &DatModel, speech: &[Frame], cfg: &ProbeConfig) -> Result<f64> {
    if speech.len() < PROBE_MIN_FRAMES {
        return Err(Error::Validation(format!(
            "probe needs at least {PROBE_MIN_FRAMES} speech frames, got {}",
            speech.len()
        )));
    }
    let features = model.tap_features(speech)?;
    let labels: Vec<usize> = speech.iter().map(|f| f.domain.index()).collect();
    probe_matrix(&features, &labels, &model.arch().domain_widths, cfg)
}

/// Probe on an arbitrary feature matrix with binary domain labels.
pub fn probe_matrix(features: &Matrix, labels: &[usize], hidden: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    let mut rng = Pcg32::new(cfg.seed, 0x7072);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rng.shuffle(&mut order);
    let cut = (cfg.train_fraction * labels.len() as f64).round() as usize;
    let (train_idx, test_idx) = order.split_at(cut);

    let mut clf = Classifier::new(features.cols(), hidden, 2, &mut rng);
    let mut batch_order = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut batch_order);
        for idx in batch_order.chunks(cfg.batch_size) {
            let x = features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            clf.step(&x, &y, cfg.alpha)?;
        }
    }
    let y: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    clf.accuracy(&features.select_rows(test_idx), &y)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<ParamId>,
    pub checked: usize,
}

/// Parameters checked per group before switching to a seeded sample.
pub const GRAD_CHECK_FULL_LIMIT: usize = 4096;
pub const GRAD_CHECK_SAMPLE: usize = 1000;

/// Compares analytic gradients with central differences.
///
/// `θ_f` and `θ_y` are checked against the adversarial objective `E`; `θ_d`
/// against the domain head's own descent objective (`|λ|` or `λ` times the
/// masked mean domain loss). Relative error uses a denominator floored at 1e-8.
pub fn grad_check(model: &DatModel, batch: &[Frame], epsilon: f64) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::Validation("gradient check needs a nonempty batch".into()));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Validation(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let mut work = model.clone();
    work.forward(batch)?;
    let grads = work.backward(batch)?;
    work.clear_trace();

    let lambda = model.lambda();
    let domain_coef = if model.eq4_literal() { lambda } else { lambda.abs() };
    let scalar = |m: &DatModel, group: Group| -> Result<f64> {
        let o = m.objective(batch)?;
        Ok(match group {
            Group::Domain => domain_coef * o.ld_mean,
            _ => o.e,
        })
    };

    let mut rng = Pcg32::new(0x6772616463, 0);
    let mut report = GradCheck { max_rel_err: 0.0, worst: None, checked: 0 };
    let all = model.param_ids();
    for group in Group::ALL {
        let mut ids: Vec<ParamId> = all.iter().copied().filter(|id| id.group == group).collect();
        if ids.len() > GRAD_CHECK_FULL_LIMIT {
            rng.shuffle(&mut ids);
            ids.truncate(GRAD_CHECK_SAMPLE);
        }
        for id in ids {
            let orig = work.param(id);
            work.set_param(id, orig + epsilon);
            let plus = scalar(&work, group)?;
            work.set_param(id, orig - epsilon);
            let minus = scalar(&work, group)?;
            work.set_param(id, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(id);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(id);
            }
        }
    }
    Ok(report)
}

/// Frames whose ReLU pre-activations all lie at least this far from zero.
/// Central differences straddling a kink are not a gradient oracle.
pub const KINK_MARGIN: f64 = 1e-4;

/// [`mixed_batch`] restricted to frames at least [`KINK_MARGIN`] from every ReLU kink.
pub fn grad_check_batch(model: &DatModel, examples: &[Frame], per_cell: usize) -> Result<Vec<Frame>> {
    let margins = model.relu_margins(examples)?;
    let smooth: Vec<Frame> = examples
        .iter()
        .zip(margins)
        .filter(|(_, m)| *m >= KINK_MARGIN)
        .map(|(f, _)| f.clone())
        .collect();
    Ok(mixed_batch(&smooth, per_cell))
}

/// A batch mixing every available (domain, speech, labeled) cell, taking up to
/// `per_cell` frames from each in corpus order.
pub fn mixed_batch(examples: &[Frame], per_cell: usize) -> Vec<Frame> {
    let mut out = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for vad in [true, false] {
            for labeled in [true, false] {
                out.extend(
                    examples
                        .iter()
                        .filter(|f| f.domain == domain && f.vad == vad && f.is_labeled() == labeled)
                        .take(per_cell)
                        .cloned(),
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;

    #[test]
    fn relative_reduction_cases() {
        assert_eq!(relative_reduction(5.0, 5.0).unwrap(), 0.0);
        assert!((relative_reduction(19.34, 17.90).unwrap() - 7.4457).abs() < 1e-3);
        assert!(relative_reduction(0.0, 1.0).is_err());
    }

    #[test]
    fn evaluate_requires_truth_and_speech() {
        let model = DatModel::build(&HyperParams::default()).unwrap();
        let corpus = Corpus::empty(8, 4);
        assert!(matches!(evaluate(&model, &corpus), Err(Error::Validation(_))));
        let with_truth = Corpus { truth: Some(vec![]), ..corpus };
        assert!(matches!(evaluate(&model, &with_truth), Err(Error::Validation(_))));
    }

    #[test]
    fn probe_rejects_small_sets() {
        let model = DatModel::build(&HyperParams::default()).unwrap();
        let frames: Vec<Frame> = (0..50)
            .map(|i| Frame { utt: i, domain: Domain::Source, vad: true, label: None, features: vec![0.0; 24] })
            .collect();
        assert!(matches!(
            probe_features(&model, &frames, &ProbeConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn constant_features_give_majority_prior() {
        let n = 400;
        let features = Matrix::from_fn(n, 4, |_, _| 1.0);
        // 3:1 domain prior
        let labels: Vec<usize> = (0..n).map(|i| (i % 4 == 0) as usize).collect();
        let acc = probe_matrix(&features, &labels, &[8, 8], &ProbeConfig::default()).unwrap();
        let mut rng = Pcg32::new(ProbeConfig::default().seed, 0x7072);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let test = &order[320..];
        let majority = test.iter().filter(|&&i| labels[i] == 0).count() as f64 / test.len() as f64;
        assert_eq!(acc, majority);
    }

    #[test]
    fn grad_check_argument_validation() {
        let model = DatModel::build(&HyperParams::default()).unwrap();
        assert!(grad_check(&model, &[], 1e-5).is_err());
        let f = Frame { utt: 0, domain: Domain::Source, vad: true, label: Some(1), features: vec![0.1; 24] };
        assert!(grad_check(&model, &[f.clone()], 1e-2).is_err());
        assert!(grad_check(&model, &[f], 1e-5).is_ok());
    }
}
