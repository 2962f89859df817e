//! Forward and backward passes for the layer kinds the model is built from.
//!
//! Layers return per-frame quantities. Batch reduction and masking belong to
//! the model, which needs to gate each frame's loss individually.

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Pcg32};

/// Fully connected layer `y = x·Wᵀ + b` with weights stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    cached_input: Option<Matrix>,
}

/// Gradients of a dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        DenseGrads {
            weights: Matrix::zeros(layer.out_width(), layer.in_width()),
            bias: vec![0.0; layer.out_width()],
        }
    }

    pub fn scale(&self, s: f64) -> DenseGrads {
        DenseGrads {
            weights: self.weights.scale(s),
            bias: self.bias.iter().map(|b| b * s).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape {
                op: "dense bias",
                left: weights.shape(),
                right: (bias.len(), 1),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            cached_input: None,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_width: usize, out_width: usize, rng: &mut Pcg32) -> Self {
        let limit = (6.0 / (in_width + out_width) as f64).sqrt();
        let weights = Matrix::from_fn(out_width, in_width, |_, _| rng.uniform(-limit, limit));
        DenseLayer {
            weights,
            bias: vec![0.0; out_width],
            cached_input: None,
        }
    }

    pub fn in_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.infer(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_width() {
            return Err(Error::Shape {
                op: "dense_forward",
                left: x.shape(),
                right: self.weights.shape(),
            });
        }
        let mut y = x.matmul_t(&self.weights)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Returns `(grad_in, grads)` for the cached batch.
    pub fn backward(&self, grad_out: &Matrix) -> Result<(Matrix, DenseGrads)> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        self.backward_from(x, grad_out)
    }

    /// Backward pass against an explicitly supplied forward input.
    pub fn backward_from(&self, x: &Matrix, grad_out: &Matrix) -> Result<(Matrix, DenseGrads)> {
        if grad_out.rows() != x.rows() || grad_out.cols() != self.out_width() {
            return Err(Error::Shape {
                op: "dense_backward",
                left: grad_out.shape(),
                right: (x.rows(), self.out_width()),
            });
        }
        let grad_in = grad_out.matmul(&self.weights)?;
        let weights = grad_out.t_matmul(x)?;
        let bias = grad_out.col_sums();
        Ok((grad_in, DenseGrads { weights, bias }))
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }

    pub fn apply(&mut self, grads: &DenseGrads, alpha: f64) {
        for (w, g) in self.weights.data_mut().iter_mut().zip(grads.weights.data()) {
            *w -= alpha * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= alpha * g;
        }
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where the pre-activation is strictly positive.
pub fn relu_backward(pre_activation: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if pre_activation.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "relu_backward",
            left: pre_activation.shape(),
            right: grad_out.shape(),
        });
    }
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(grad_out.rows(), grad_out.cols(), data)
}

/// Frame splicing: context offsets plus an output stride.
#[derive(Debug, Clone, PartialEq)]
pub struct SpliceSpec {
    context: Vec<i32>,
    subsample: usize,
}

impl SpliceSpec {
    pub fn new(context: Vec<i32>, subsample: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::Config("splice context must not be empty".into()));
        }
        if context.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "splice offsets must be strictly increasing: {context:?}"
            )));
        }
        if subsample == 0 {
            return Err(Error::Config("splice subsample must be >= 1".into()));
        }
        Ok(SpliceSpec { context, subsample })
    }

    pub fn identity() -> Self {
        SpliceSpec {
            context: vec![0],
            subsample: 1,
        }
    }

    pub fn context(&self) -> &[i32] {
        &self.context
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn output_width(&self, dim: usize) -> usize {
        dim * self.context.len()
    }

    /// Number of output rows for a `len`-frame sequence.
    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.subsample)
    }

    /// Frame positions each output row is centered on.
    pub fn centers(&self, len: usize) -> impl Iterator<Item = usize> {
        let stride = self.subsample;
        (0..self.output_len(len)).map(move |t| t * stride)
    }

    /// Splices a `T × D` sequence. Out-of-range positions replicate the edge frame.
    pub fn forward(&self, frames: &Matrix) -> Matrix {
        let (len, dim) = frames.shape();
        let out_len = self.output_len(len);
        let mut out = Matrix::zeros(out_len, self.output_width(dim));
        for (row, center) in self.centers(len).enumerate() {
            let dst = out.row_mut(row);
            for (slot, &offset) in self.context.iter().enumerate() {
                let pos = (center as i64 + offset as i64).clamp(0, len as i64 - 1) as usize;
                dst[slot * dim..(slot + 1) * dim].copy_from_slice(frames.row(pos));
            }
        }
        out
    }
}

/// Per-row softmax cross-entropy.
///
/// Returns the unreduced loss and `softmax − onehot` per row.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(Vec<f64>, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "softmax_ce",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut loss = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Validation(format!(
                "label {label} out of range for {classes} classes (row {r})"
            )));
        }
        let (l, g) = softmax_row(logits.row(r), label);
        loss.push(l);
        grad.row_mut(r).copy_from_slice(&g);
    }
    Ok((loss, grad))
}

pub(crate) fn softmax_row(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = -(logits[label] - max - log_sum);
    let mut g = probs;
    g[label] -= 1.0;
    (loss, g)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradient reversal: identity forward, `−λ` times the gradient backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlLayer {
    pub lambda: f64,
}

impl GrlLayer {
    pub fn new(lambda: f64) -> Self {
        GrlLayer { lambda }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        let factor = -self.lambda;
        grad_out.map(|g| factor * g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random(rng: &mut Pcg32, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform(-1.0, 1.0))
    }

    /// Scalar probe `sum(y ⊙ probe)` so that `grad_out = probe`.
    fn dot(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn dense_identity_and_hand_cases() {
        let mut id = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(id.forward(&x).unwrap(), x);

        let mut l = DenseLayer::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), vec![0.0, 0.0]).unwrap();
        let y = l.forward(&Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[3.0, 7.0]]));

        let mut rng = Pcg32::new(3, 3);
        let mut z = DenseLayer::new(random(&mut rng, 2, 3), vec![1.0, -1.0]).unwrap();
        let y = z.forward(&Matrix::zeros(1, 3)).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[1.0, -1.0]]));
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut l = DenseLayer::glorot(3, 2, &mut Pcg32::new(1, 1));
        assert!(matches!(l.forward(&Matrix::zeros(1, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn dense_backward_before_forward_is_state_error() {
        let l = DenseLayer::glorot(3, 2, &mut Pcg32::new(1, 1));
        assert!(matches!(l.backward(&Matrix::zeros(1, 2)), Err(Error::State(_))));
    }

    #[test]
    fn dense_zero_grad_and_identity_grad() {
        let mut rng = Pcg32::new(4, 4);
        let mut l = DenseLayer::glorot(3, 2, &mut rng);
        l.forward(&random(&mut rng, 5, 3)).unwrap();
        let (gi, g) = l.backward(&Matrix::zeros(5, 2)).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));

        let mut id = DenseLayer::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        id.forward(&random(&mut rng, 4, 3)).unwrap();
        let go = random(&mut rng, 4, 3);
        assert_eq!(id.backward(&go).unwrap().0, go);
    }

    #[test]
    fn dense_gradients_match_central_differences() {
        let mut rng = Pcg32::new(8, 1);
        let mut layer = DenseLayer::glorot(4, 3, &mut rng);
        let x = random(&mut rng, 6, 4);
        let probe = random(&mut rng, 6, 3);
        layer.forward(&x).unwrap();
        let (gi, g) = layer.backward(&probe).unwrap();

        for i in 0..layer.weights.data().len() {
            let mut plus = layer.clone();
            plus.weights.data_mut()[i] += EPS;
            let mut minus = layer.clone();
            minus.weights.data_mut()[i] -= EPS;
            let fd = (dot(&plus.infer(&x).unwrap(), &probe) - dot(&minus.infer(&x).unwrap(), &probe)) / (2.0 * EPS);
            assert!(rel_err(fd, g.weights.data()[i]) <= 1e-4);
        }
        for i in 0..layer.bias.len() {
            let mut plus = layer.clone();
            plus.bias[i] += EPS;
            let mut minus = layer.clone();
            minus.bias[i] -= EPS;
            let fd = (dot(&plus.infer(&x).unwrap(), &probe) - dot(&minus.infer(&x).unwrap(), &probe)) / (2.0 * EPS);
            assert!(rel_err(fd, g.bias[i]) <= 1e-4);
        }
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += EPS;
            let mut xm = x.clone();
            xm.data_mut()[i] -= EPS;
            let fd = (dot(&layer.infer(&xp).unwrap(), &probe) - dot(&layer.infer(&xm).unwrap(), &probe)) / (2.0 * EPS);
            assert!(rel_err(fd, gi.data()[i]) <= 1e-4);
        }
    }

    #[test]
    fn relu_definition_and_zero_convention() {
        let x = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]);
        assert_eq!(relu_forward(&x), Matrix::from_rows(&[[0.0, 0.0, 2.0]]));
        let g = Matrix::from_rows(&[[5.0, 5.0, 5.0]]);
        assert_eq!(relu_backward(&x, &g).unwrap(), Matrix::from_rows(&[[0.0, 0.0, 5.0]]));
    }

    #[test]
    fn relu_gradient_matches_central_differences_away_from_kink() {
        let mut rng = Pcg32::new(12, 2);
        let x = Matrix::from_fn(8, 8, |_, _| {
            let mut v = rng.uniform(-1.0, 1.0);
            while v.abs() < 1e-3 {
                v = rng.uniform(-1.0, 1.0);
            }
            v
        });
        let probe = random(&mut rng, 8, 8);
        let g = relu_backward(&x, &probe).unwrap();
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += EPS;
            let mut xm = x.clone();
            xm.data_mut()[i] -= EPS;
            let fd = (dot(&relu_forward(&xp), &probe) - dot(&relu_forward(&xm), &probe)) / (2.0 * EPS);
            assert!(rel_err(fd, g.data()[i]) <= 1e-4);
        }
    }

    #[test]
    fn splice_identity() {
        let frames = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(SpliceSpec::identity().forward(&frames), frames);
    }

    #[test]
    fn splice_replicates_edges() {
        let (a, b, c) = (1.0, 2.0, 3.0);
        let frames = Matrix::from_rows(&[[a], [b], [c]]);
        let spec = SpliceSpec::new(vec![-1, 0, 1], 1).unwrap();
        let out = spec.forward(&frames);
        assert_eq!(out, Matrix::from_rows(&[[a, a, b], [a, b, c], [b, c, c]]));
    }

    #[test]
    fn splice_subsampled_length() {
        let spec = SpliceSpec::new(vec![-1, 0, 1], 3).unwrap();
        assert_eq!(spec.forward(&Matrix::zeros(6, 2)).rows(), 2);
        assert_eq!(spec.forward(&Matrix::zeros(7, 2)).rows(), 3);
        assert_eq!(spec.forward(&Matrix::zeros(0, 2)).rows(), 0);
    }

    #[test]
    fn splice_rejects_bad_specs() {
        assert!(SpliceSpec::new(vec![0, 0], 1).is_err());
        assert!(SpliceSpec::new(vec![1, 0], 1).is_err());
        assert!(SpliceSpec::new(vec![0], 0).is_err());
    }

    #[test]
    fn softmax_ce_symmetric_case() {
        let (loss, grad) = softmax_ce(&Matrix::from_rows(&[[0.0, 0.0]]), &[0]).unwrap();
        assert!((loss[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, Matrix::from_rows(&[[-0.5, 0.5]]));
    }

    #[test]
    fn softmax_ce_is_stable_for_large_logits() {
        let (loss, grad) = softmax_ce(&Matrix::from_rows(&[[1000.0, 0.0]]), &[0]).unwrap();
        assert!(loss[0].abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        assert!(matches!(
            softmax_ce(&Matrix::zeros(1, 3), &[3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn softmax_ce_gradient_matches_central_differences() {
        let mut rng = Pcg32::new(21, 0);
        let logits = Matrix::from_fn(5, 4, |_, _| rng.uniform(-2.0, 2.0));
        let labels = [0, 3, 1, 2, 2];
        let (_, grad) = softmax_ce(&logits, &labels).unwrap();
        let total = |m: &Matrix| softmax_ce(m, &labels).unwrap().0.iter().sum::<f64>();
        for i in 0..logits.data().len() {
            let mut p = logits.clone();
            p.data_mut()[i] += EPS;
            let mut m = logits.clone();
            m.data_mut()[i] -= EPS;
            let fd = (total(&p) - total(&m)) / (2.0 * EPS);
            assert!(rel_err(fd, grad.data()[i]) <= 1e-4, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn grl_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(GrlLayer::new(0.03).forward(&x), x);
        assert_eq!(GrlLayer::new(7.0).forward(&Matrix::zeros(1, 3)), Matrix::zeros(1, 3));

        let g = Matrix::from_rows(&[[2.0]]);
        assert_eq!(GrlLayer::new(0.03).backward(&g).get(0, 0), -0.06);
        assert_eq!(GrlLayer::new(0.0).backward(&g).get(0, 0), 0.0);
        assert_eq!(GrlLayer::new(-0.03).backward(&g).get(0, 0), 0.06);
    }

    proptest! {
        #[test]
        fn grl_forward_is_idempotent_and_lambda_free(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..32),
            lambda in -10.0f64..10.0,
        ) {
            let x = Matrix::from_vec(1, vals.len(), vals).unwrap();
            let grl = GrlLayer::new(lambda);
            let once = grl.forward(&x);
            prop_assert_eq!(&grl.forward(&once), &once);
            prop_assert_eq!(&GrlLayer::new(0.5).forward(&x), &once);
        }

        #[test]
        fn grl_backward_negates_under_lambda_sign_flip(
            vals in proptest::collection::vec(-1e3f64..1e3, 1..32),
            lambda in -10.0f64..10.0,
        ) {
            let g = Matrix::from_vec(1, vals.len(), vals).unwrap();
            let pos = GrlLayer::new(lambda).backward(&g);
            let neg = GrlLayer::new(-lambda).backward(&g);
            for (a, b) in pos.data().iter().zip(neg.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn splice_width_is_dim_times_context(
            len in 0usize..20, dim in 1usize..6, sub in 1usize..4, lo in -3i32..1, n in 1usize..5,
        ) {
            let ctx: Vec<i32> = (0..n as i32).map(|i| lo + i).collect();
            let spec = SpliceSpec::new(ctx, sub).unwrap();
            let out = spec.forward(&Matrix::zeros(len, dim));
            prop_assert_eq!(out.cols(), dim * n);
            prop_assert_eq!(out.rows(), len.div_ceil(sub));
        }
    }
}
