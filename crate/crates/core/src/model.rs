//! The three-branch adversarial network and its masked training objective.
//!
//! A shared feature generator feeds two heads: the task classifier on top of
//! the generator's last layer, and the domain classifier attached at a tap
//! layer through a gradient reversal layer. Per batch of `N` frames the
//! objective is
//!
//! ```text
//! E = (1/N) Σᵢ ( I_d(i)·L_y(i) − λ·I_vad(i)·L_d(i) )
//! ```
//!
//! where `I_d` marks frames that carry a class label and `I_vad` marks speech
//! frames. The generator and task head descend `E`; the domain head descends
//! `|λ|·(1/N) Σ I_vad·L_d` (or `λ·…` when `eq4_literal` is set).

use crate::error::{Error, Result};
use crate::layers::{self, DenseGrads, DenseLayer, GrlLayer, SpliceSpec};
use crate::numeric::{Matrix, Pcg32};

/// Which side of the domain shift a frame comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Domain> {
        match i {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One example: features plus the domain bit, speech bit and optional label.
///
/// `label.is_some()` is the transcription indicator `I_d`; `vad` is `I_vad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub utt: u32,
    pub domain: Domain,
    pub vad: bool,
    pub label: Option<usize>,
    pub features: Vec<f64>,
}

impl Frame {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    /// Contributes to neither loss term.
    pub fn is_inert(&self) -> bool {
        self.label.is_none() && !self.vad
    }
}

/// Training mode implied by the sign of λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Adversarial,
    MultiTask,
    Baseline,
}

impl Mode {
    pub fn of(lambda: f64) -> Mode {
        if lambda > 0.0 {
            Mode::Adversarial
        } else if lambda < 0.0 {
            Mode::MultiTask
        } else {
            Mode::Baseline
        }
    }
}

/// Layer widths and input handling.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Raw per-frame feature width before splicing.
    pub input_dim: usize,
    pub context: Vec<i32>,
    pub subsample: usize,
    /// Hidden widths of the feature generator (each layer is dense + ReLU).
    pub feature_widths: Vec<usize>,
    /// Hidden widths of the task head before its softmax layer.
    pub task_widths: Vec<usize>,
    pub classes: usize,
    /// Hidden widths of the domain head before its 2-way softmax layer.
    pub domain_widths: Vec<usize>,
    /// 1-based generator layer whose activation feeds the domain head.
    pub tap: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 8,
            context: vec![-1, 0, 1],
            subsample: 3,
            feature_widths: vec![64, 64, 64],
            task_widths: vec![],
            classes: 4,
            domain_widths: vec![64, 64],
            tap: 2,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input layer has zero width".into()));
        }
        if self.feature_widths.is_empty() {
            return Err(Error::Config("feature generator needs at least one layer".into()));
        }
        for (name, widths) in [
            ("feature", &self.feature_widths),
            ("task", &self.task_widths),
            ("domain", &self.domain_widths),
        ] {
            if let Some(i) = widths.iter().position(|&w| w == 0) {
                return Err(Error::Config(format!("{name} layer {} has zero width", i + 1)));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("task output layer needs >= 2 classes, got {}", self.classes)));
        }
        if self.tap < 1 || self.tap > self.feature_widths.len() {
            return Err(Error::Config(format!(
                "tap index {} outside feature layers 1..={}",
                self.tap,
                self.feature_widths.len()
            )));
        }
        SpliceSpec::new(self.context.clone(), self.subsample)?;
        Ok(())
    }

    pub fn spliced_dim(&self) -> usize {
        self.input_dim * self.context.len()
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lambda: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub arch: Architecture,
    /// Update the domain head with `λ` instead of `|λ|`.
    pub eq4_literal: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: 0.03,
            alpha: 0.3,
            batch_size: 32,
            seed: 1,
            epochs: 30,
            arch: Architecture::default(),
            eq4_literal: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        self.arch.validate()
    }

    pub fn mode(&self) -> Mode {
        Mode::of(self.lambda)
    }
}

/// Parameter group of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Feature,
    Task,
    Domain,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Feature, Group::Task, Group::Domain];

    pub fn name(self) -> &'static str {
        match self {
            Group::Feature => "theta_f",
            Group::Task => "theta_y",
            Group::Domain => "theta_d",
        }
    }
}

/// Address of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub group: Group,
    pub layer: usize,
    /// `None` addresses the bias vector.
    pub weight: Option<(usize, usize)>,
    pub index: usize,
}

/// Accumulated gradients for all three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub feature: Vec<DenseGrads>,
    pub task: Vec<DenseGrads>,
    pub domain: Vec<DenseGrads>,
}

impl BatchGradients {
    pub fn group(&self, g: Group) -> &[DenseGrads] {
        match g {
            Group::Feature => &self.feature,
            Group::Task => &self.task,
            Group::Domain => &self.domain,
        }
    }

    pub fn get(&self, id: ParamId) -> f64 {
        let layer = &self.group(id.group)[id.layer];
        match id.weight {
            Some((r, c)) => layer.weights.get(r, c),
            None => layer.bias[id.index],
        }
    }

    /// Flattened values of one group, layer by layer, weights then bias.
    pub fn flatten(&self, g: Group) -> Vec<f64> {
        self.group(g)
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub task_logits: Matrix,
    pub domain_logits: Matrix,
    pub tap: Matrix,
}

/// Intermediates of a forward pass needed by backprop.
#[derive(Debug, Clone)]
struct Trace {
    input: Matrix,
    feature_pre: Vec<Matrix>,
    feature_act: Vec<Matrix>,
    task_pre: Vec<Matrix>,
    task_act: Vec<Matrix>,
    domain_pre: Vec<Matrix>,
    domain_act: Vec<Matrix>,
    task_logits: Matrix,
    domain_logits: Matrix,
}

/// Per-batch loss summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// The full adversarial objective.
    pub e: f64,
    /// `(1/N) Σ I_d·L_y`.
    pub ly_mean: f64,
    /// `(1/N) Σ I_vad·L_d`.
    pub ld_mean: f64,
}

/// The feature generator, task head, domain head and the GRL between them.
#[derive(Debug, Clone)]
pub struct DatModel {
    arch: Architecture,
    pub feature: Vec<DenseLayer>,
    pub task: Vec<DenseLayer>,
    pub domain: Vec<DenseLayer>,
    pub grl: GrlLayer,
    splice: SpliceSpec,
    eq4_literal: bool,
    trace: Option<Trace>,
}

fn widths_chain(input: usize, hidden: &[usize], output: Option<usize>) -> Vec<(usize, usize)> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.extend(output);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

impl DatModel {
    /// Builds a freshly initialized model from `hp`.
    pub fn build(hp: &HyperParams) -> Result<DatModel> {
        hp.validate()?;
        let arch = hp.arch.clone();
        let mut rng = Pcg32::new(hp.seed, 0x6d6f64656c);
        let mut make = |pairs: Vec<(usize, usize)>| -> Vec<DenseLayer> {
            pairs
                .into_iter()
                .map(|(i, o)| DenseLayer::glorot(i, o, &mut rng))
                .collect()
        };
        let feature = make(widths_chain(arch.spliced_dim(), &arch.feature_widths, None));
        let top = *arch.feature_widths.last().unwrap();
        let task = make(widths_chain(top, &arch.task_widths, Some(arch.classes)));
        let tap_width = arch.feature_widths[arch.tap - 1];
        let domain = make(widths_chain(tap_width, &arch.domain_widths, Some(2)));
        let splice = SpliceSpec::new(arch.context.clone(), arch.subsample)?;
        Ok(DatModel {
            arch,
            feature,
            task,
            domain,
            grl: GrlLayer::new(hp.lambda),
            splice,
            eq4_literal: hp.eq4_literal,
            trace: None,
        })
    }

    /// Reassembles a model from stored layers. Shapes are checked against `arch`.
    pub fn from_parts(
        arch: Architecture,
        lambda: f64,
        eq4_literal: bool,
        feature: Vec<DenseLayer>,
        task: Vec<DenseLayer>,
        domain: Vec<DenseLayer>,
    ) -> Result<DatModel> {
        arch.validate()?;
        let top = *arch.feature_widths.last().unwrap();
        let expected = [
            (Group::Feature, widths_chain(arch.spliced_dim(), &arch.feature_widths, None), &feature),
            (Group::Task, widths_chain(top, &arch.task_widths, Some(arch.classes)), &task),
            (
                Group::Domain,
                widths_chain(arch.feature_widths[arch.tap - 1], &arch.domain_widths, Some(2)),
                &domain,
            ),
        ];
        for (group, dims, layers) in expected {
            if dims.len() != layers.len() {
                return Err(Error::Format(format!(
                    "{}: expected {} layers, found {}",
                    group.name(),
                    dims.len(),
                    layers.len()
                )));
            }
            for (i, ((fan_in, fan_out), l)) in dims.iter().zip(layers.iter()).enumerate() {
                if (l.in_width(), l.out_width()) != (*fan_in, *fan_out) {
                    return Err(Error::Format(format!(
                        "{} layer {}: expected {}x{}, found {}x{}",
                        group.name(),
                        i + 1,
                        fan_out,
                        fan_in,
                        l.out_width(),
                        l.in_width()
                    )));
                }
            }
        }
        let splice = SpliceSpec::new(arch.context.clone(), arch.subsample)?;
        Ok(DatModel {
            arch,
            feature,
            task,
            domain,
            grl: GrlLayer::new(lambda),
            splice,
            eq4_literal,
            trace: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn splice(&self) -> &SpliceSpec {
        &self.splice
    }

    pub fn lambda(&self) -> f64 {
        self.grl.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.grl.lambda = lambda;
    }

    pub fn eq4_literal(&self) -> bool {
        self.eq4_literal
    }

    pub fn set_eq4_literal(&mut self, literal: bool) {
        self.eq4_literal = literal;
    }

    pub fn input_width(&self) -> usize {
        self.arch.spliced_dim()
    }

    pub fn group(&self, g: Group) -> &[DenseLayer] {
        match g {
            Group::Feature => &self.feature,
            Group::Task => &self.task,
            Group::Domain => &self.domain,
        }
    }

    fn group_mut(&mut self, g: Group) -> &mut [DenseLayer] {
        match g {
            Group::Feature => &mut self.feature,
            Group::Task => &mut self.task,
            Group::Domain => &mut self.domain,
        }
    }

    pub fn param_count(&self) -> usize {
        Group::ALL
            .iter()
            .flat_map(|&g| self.group(g))
            .map(DenseLayer::param_count)
            .sum()
    }

    /// Every scalar parameter, group by group, weights before bias.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(self.param_count());
        for g in Group::ALL {
            for (li, layer) in self.group(g).iter().enumerate() {
                let (rows, cols) = layer.weights.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        ids.push(ParamId { group: g, layer: li, weight: Some((r, c)), index: r * cols + c });
                    }
                }
                for b in 0..layer.bias.len() {
                    ids.push(ParamId { group: g, layer: li, weight: None, index: b });
                }
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> f64 {
        let layer = &self.group(id.group)[id.layer];
        match id.weight {
            Some((r, c)) => layer.weights.get(r, c),
            None => layer.bias[id.index],
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        let layer = &mut self.group_mut(id.group)[id.layer];
        match id.weight {
            Some((r, c)) => layer.weights.set(r, c, value),
            None => layer.bias[id.index] = value,
        }
    }

    /// Splices each utterance of a frame sequence into model inputs.
    ///
    /// Consecutive frames sharing `utt` form one utterance. Output frames take
    /// their domain, VAD bit and label from the centre frame.
    pub fn prepare(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        prepare_frames(&self.splice, self.arch.input_dim, frames)
    }

    fn stack(&self, batch: &[Frame]) -> Result<Matrix> {
        let width = self.input_width();
        let mut data = Vec::with_capacity(batch.len() * width);
        for (i, f) in batch.iter().enumerate() {
            if f.features.len() != width {
                return Err(Error::Shape {
                    op: "model input",
                    left: (i, f.features.len()),
                    right: (batch.len(), width),
                });
            }
            data.extend_from_slice(&f.features);
        }
        Matrix::from_vec(batch.len(), width, data)
    }

    fn run(&self, input: Matrix) -> Result<Trace> {
        let mut feature_pre = Vec::with_capacity(self.feature.len());
        let mut feature_act: Vec<Matrix> = Vec::with_capacity(self.feature.len());
        for layer in &self.feature {
            let x = feature_act.last().unwrap_or(&input);
            let pre = layer.infer(x)?;
            feature_act.push(layers::relu_forward(&pre));
            feature_pre.push(pre);
        }

        let (task_pre, task_act, task_logits) = run_head(&self.task, feature_act.last().unwrap())?;
        let domain_in = self.grl.forward(&feature_act[self.arch.tap - 1]);
        let (domain_pre, domain_act, domain_logits) = run_head(&self.domain, &domain_in)?;

        Ok(Trace {
            input,
            feature_pre,
            feature_act,
            task_pre,
            task_act,
            domain_pre,
            domain_act,
            task_logits,
            domain_logits,
        })
    }

    /// Smallest |pre-activation| over every ReLU unit, per frame.
    pub fn relu_margins(&self, batch: &[Frame]) -> Result<Vec<f64>> {
        let trace = self.run(self.stack(batch)?)?;
        let mut margins = vec![f64::INFINITY; batch.len()];
        for pre in trace.feature_pre.iter().chain(&trace.task_pre).chain(&trace.domain_pre) {
            for (i, m) in margins.iter_mut().enumerate() {
                *m = pre.row(i).iter().fold(*m, |acc, v| acc.min(v.abs()));
            }
        }
        Ok(margins)
    }

    /// Forward pass that records the intermediates for [`DatModel::backward`].
    pub fn forward(&mut self, batch: &[Frame]) -> Result<Activations> {
        let trace = self.run(self.stack(batch)?)?;
        let acts = activations_of(&trace, self.arch.tap);
        self.trace = Some(trace);
        Ok(acts)
    }

    /// Forward pass without side effects.
    pub fn infer(&self, batch: &[Frame]) -> Result<Activations> {
        let trace = self.run(self.stack(batch)?)?;
        Ok(activations_of(&trace, self.arch.tap))
    }

    /// Activation at the tap layer only.
    pub fn tap_features(&self, batch: &[Frame]) -> Result<Matrix> {
        let mut x = self.stack(batch)?;
        for layer in &self.feature[..self.arch.tap] {
            x = layers::relu_forward(&layer.infer(&x)?);
        }
        Ok(x)
    }

    /// Argmax of the task logits, one per frame.
    pub fn predict(&self, batch: &[Frame]) -> Result<Vec<usize>> {
        let acts = self.infer(batch)?;
        Ok((0..acts.task_logits.rows()).map(|r| layers::argmax(acts.task_logits.row(r))).collect())
    }

    pub fn clear_trace(&mut self) {
        self.trace = None;
    }

    /// Evaluates `E` and its masked components, normalized by `batch.len()`.
    pub fn objective(&self, batch: &[Frame]) -> Result<Objective> {
        self.objective_normalized(batch, batch.len())
    }

    /// As [`DatModel::objective`] but with an explicit normalizer `n`.
    pub fn objective_normalized(&self, batch: &[Frame], n: usize) -> Result<Objective> {
        if batch.is_empty() || n == 0 {
            return Err(Error::Validation("objective of an empty batch".into()));
        }
        let acts = self.infer(batch)?;
        let lambda = self.lambda();
        let (mut e, mut ly, mut ld) = (0.0, 0.0, 0.0);
        for (i, frame) in batch.iter().enumerate() {
            let mut term = 0.0;
            if let Some(label) = frame.label {
                check_label(label, self.arch.classes)?;
                let (l, _) = layers::softmax_row(acts.task_logits.row(i), label);
                ly += l;
                term += l;
            }
            if frame.vad {
                let (l, _) = layers::softmax_row(acts.domain_logits.row(i), frame.domain.index());
                ld += l;
                term -= lambda * l;
            }
            e += term;
        }
        let n = n as f64;
        Ok(Objective { e: e / n, ly_mean: ly / n, ld_mean: ld / n })
    }

    /// Gradients of the last forward batch, normalized by its size.
    pub fn backward(&self, batch: &[Frame]) -> Result<BatchGradients> {
        self.backward_normalized(batch, batch.len())
    }

    /// Backprop through the GRL.
    ///
    /// The generator receives the task error plus `−λ` times the domain error
    /// at the tap; the domain head's own gradient is scaled by `|λ|`.
    pub fn backward_normalized(&self, batch: &[Frame], n: usize) -> Result<BatchGradients> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if trace.input.rows() != batch.len() {
            return Err(Error::State(format!(
                "backward batch of {} frames does not match forward batch of {}",
                batch.len(),
                trace.input.rows()
            )));
        }
        if n == 0 {
            return Err(Error::Validation("normalizer must be >= 1".into()));
        }
        let lambda = self.lambda();
        let grl = self.grl;
        let parts = self.backprop(trace, batch, n, 1.0, if lambda == 0.0 { 0.0 } else { 1.0 }, |g| {
            grl.backward(g)
        })?;
        let coef = if self.eq4_literal { lambda } else { lambda.abs() };
        let domain = match parts.domain {
            Some(raw) => raw.iter().map(|g| g.scale(coef)).collect(),
            None => self.domain.iter().map(DenseGrads::zeros_like).collect(),
        };
        Ok(BatchGradients { feature: parts.feature, task: parts.task, domain })
    }

    /// Gradients of `task_weight·(1/N)Σ I_d·L_y + domain_weight·(1/N)Σ I_vad·L_d`
    /// computed by direct differentiation, without the GRL.
    ///
    /// This is the independent route used to check that backprop through the
    /// reversal layer produces the intended combination.
    pub fn weighted_loss_gradients(
        &self,
        batch: &[Frame],
        task_weight: f64,
        domain_weight: f64,
    ) -> Result<BatchGradients> {
        let trace = self.run(self.stack(batch)?)?;
        let parts = self.backprop(&trace, batch, batch.len(), task_weight, domain_weight, Matrix::clone)?;
        let domain = parts
            .domain
            .unwrap_or_else(|| self.domain.iter().map(DenseGrads::zeros_like).collect());
        Ok(BatchGradients { feature: parts.feature, task: parts.task, domain })
    }

    fn backprop(
        &self,
        trace: &Trace,
        batch: &[Frame],
        n: usize,
        task_weight: f64,
        domain_weight: f64,
        at_tap: impl Fn(&Matrix) -> Matrix,
    ) -> Result<Parts> {
        let rows = batch.len();
        let scale = 1.0 / n as f64;

        // task head
        let mut task_grad = Matrix::zeros(rows, self.arch.classes);
        if task_weight != 0.0 {
            for (i, frame) in batch.iter().enumerate() {
                if let Some(label) = frame.label {
                    check_label(label, self.arch.classes)?;
                    let (_, g) = layers::softmax_row(trace.task_logits.row(i), label);
                    for (dst, v) in task_grad.row_mut(i).iter_mut().zip(g) {
                        *dst = task_weight * scale * v;
                    }
                }
            }
        }
        let top = trace.feature_act.last().unwrap();
        let (task, mut grad_act) =
            backprop_head(&self.task, top, &trace.task_pre, &trace.task_act, task_grad)?;

        // domain head
        let mut domain = None;
        let mut tap_grad = None;
        if domain_weight != 0.0 {
            let mut dgrad = Matrix::zeros(rows, 2);
            for (i, frame) in batch.iter().enumerate() {
                if frame.vad {
                    let (_, g) = layers::softmax_row(trace.domain_logits.row(i), frame.domain.index());
                    for (dst, v) in dgrad.row_mut(i).iter_mut().zip(g) {
                        *dst = domain_weight * scale * v;
                    }
                }
            }
            let tap_act = &trace.feature_act[self.arch.tap - 1];
            let (grads, grad_in) =
                backprop_head(&self.domain, tap_act, &trace.domain_pre, &trace.domain_act, dgrad)?;
            domain = Some(grads);
            tap_grad = Some(at_tap(&grad_in));
        }

        // shared generator, top down
        let mut feature = vec![None; self.feature.len()];
        for li in (0..self.feature.len()).rev() {
            if li + 1 == self.arch.tap {
                if let Some(extra) = &tap_grad {
                    grad_act = grad_act.add(extra)?;
                }
            }
            let grad_pre = layers::relu_backward(&trace.feature_pre[li], &grad_act)?;
            let x = if li == 0 { &trace.input } else { &trace.feature_act[li - 1] };
            let (grad_in, g) = self.feature[li].backward_from(x, &grad_pre)?;
            feature[li] = Some(g);
            grad_act = grad_in;
        }
        Ok(Parts {
            feature: feature.into_iter().map(Option::unwrap).collect(),
            task,
            domain,
        })
    }

    /// `θ ← θ − α·g` for all groups. Non-finite gradients abort before any update.
    pub fn sgd_step(&mut self, grads: &BatchGradients, alpha: f64) -> Result<()> {
        for g in Group::ALL {
            let layers = grads.group(g);
            if layers.len() != self.group(g).len() {
                return Err(Error::Validation(format!("{} gradient has wrong layer count", g.name())));
            }
            for (i, (lg, l)) in layers.iter().zip(self.group(g)).enumerate() {
                if lg.weights.shape() != l.weights.shape() || lg.bias.len() != l.bias.len() {
                    return Err(Error::Shape {
                        op: g.name(),
                        left: lg.weights.shape(),
                        right: l.weights.shape(),
                    });
                }
                if !lg.is_finite() {
                    return Err(Error::NonFinite { group: g.name(), detail: format!("layer {}", i + 1) });
                }
            }
        }
        for g in Group::ALL {
            for (layer, lg) in self.group_mut(g).iter_mut().zip(grads.group(g)) {
                layer.apply(lg, alpha);
            }
        }
        Ok(())
    }

    /// One forward/backward/update on `batch`, normalized by `n`.
    pub fn train_step(&mut self, batch: &[Frame], n: usize, alpha: f64) -> Result<BatchGradients> {
        self.forward(batch)?;
        let grads = self.backward_normalized(batch, n)?;
        self.sgd_step(&grads, alpha)?;
        Ok(grads)
    }
}

struct Parts {
    feature: Vec<DenseGrads>,
    task: Vec<DenseGrads>,
    domain: Option<Vec<DenseGrads>>,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Validation(format!("label {label} out of range for {classes} classes")));
    }
    Ok(())
}

fn activations_of(trace: &Trace, tap: usize) -> Activations {
    Activations {
        task_logits: trace.task_logits.clone(),
        domain_logits: trace.domain_logits.clone(),
        tap: trace.feature_act[tap - 1].clone(),
    }
}

/// Hidden dense+ReLU layers followed by a linear output layer.
fn run_head(layers_: &[DenseLayer], input: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>, Matrix)> {
    let (hidden, out) = layers_.split_at(layers_.len() - 1);
    let mut pre = Vec::with_capacity(hidden.len());
    let mut act: Vec<Matrix> = Vec::with_capacity(hidden.len());
    for layer in hidden {
        let x = act.last().unwrap_or(input);
        let p = layer.infer(x)?;
        act.push(layers::relu_forward(&p));
        pre.push(p);
    }
    let logits = out[0].infer(act.last().unwrap_or(input))?;
    Ok((pre, act, logits))
}

/// Returns the head's layer gradients and the gradient at its input.
fn backprop_head(
    layers_: &[DenseLayer],
    input: &Matrix,
    pre: &[Matrix],
    act: &[Matrix],
    grad_logits: Matrix,
) -> Result<(Vec<DenseGrads>, Matrix)> {
    let last = layers_.len() - 1;
    let mut grads = vec![None; layers_.len()];
    let x = act.last().unwrap_or(input);
    let (mut grad, g) = layers_[last].backward_from(x, &grad_logits)?;
    grads[last] = Some(g);
    for li in (0..last).rev() {
        let grad_pre = layers::relu_backward(&pre[li], &grad)?;
        let x = if li == 0 { input } else { &act[li - 1] };
        let (grad_in, g) = layers_[li].backward_from(x, &grad_pre)?;
        grads[li] = Some(g);
        grad = grad_in;
    }
    Ok((grads.into_iter().map(Option::unwrap).collect(), grad))
}

pub(crate) fn prepare_frames(splice: &SpliceSpec, dim: usize, frames: &[Frame]) -> Result<Vec<Frame>> {
    let mut out = Vec::with_capacity(frames.len().div_ceil(splice.subsample()));
    let mut start = 0;
    while start < frames.len() {
        let utt = frames[start].utt;
        let mut end = start;
        while end < frames.len() && frames[end].utt == utt {
            if frames[end].features.len() != dim {
                return Err(Error::Shape {
                    op: "prepare",
                    left: (end, frames[end].features.len()),
                    right: (frames.len(), dim),
                });
            }
            end += 1;
        }
        let seq = &frames[start..end];
        let mut data = Vec::with_capacity(seq.len() * dim);
        for f in seq {
            data.extend_from_slice(&f.features);
        }
        let spliced = splice.forward(&Matrix::from_vec(seq.len(), dim, data)?);
        for (row, center) in splice.centers(seq.len()).enumerate() {
            let c = &seq[center];
            out.push(Frame {
                utt: c.utt,
                domain: c.domain,
                vad: c.vad,
                label: c.label,
                features: spliced.row(row).to_vec(),
            });
        }
        start = end;
    }
    Ok(out)
}
