use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, squared_error, LossKind};
use super::Rng;
use crate::error::{shape_err, Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine layer `h -> h W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Parameters of a feed-forward network.
///
/// Dropout acts on hidden activations only; weight decay penalizes weights
/// (not biases) with `0.5 * weight_decay * |W|^2` added to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub weight_decay: f64,
}

impl ModelParams {
    /// Builds a network with the given layer widths, e.g. `[22, 64, 2]`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            activation,
            dropout_rate: 0.0,
            weight_decay: 0.0,
        })
    }

    pub fn with_regularization(mut self, dropout_rate: f64, weight_decay: f64) -> Self {
        self.dropout_rate = dropout_rate;
        self.weight_decay = weight_decay;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Checks layer composition, regularization ranges and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape_err(
                    "layer composition",
                    format!("layer {} input {}", k + 1, pair[0].output_dim()),
                    pair[1].input_dim(),
                ));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(shape_err("bias", l.output_dim(), l.bias.len()));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} < 0", self.weight_decay)));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `0.5 * wd * sum |W|^2`.
    pub fn decay_penalty(&self) -> f64 {
        if self.weight_decay == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum();
        0.5 * self.weight_decay * sq
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Mutable access to the `idx`-th flattened parameter.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.len();
            if idx < nw {
                return l.weight.iter_mut().nth(idx).unwrap();
            }
            idx -= nw;
            let nb = l.bias.len();
            if idx < nb {
                return &mut l.bias[idx];
            }
            idx -= nb;
        }
        panic!("parameter index out of range");
    }

    /// Logits in evaluation mode.
    pub fn predict_logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(forward_trace(self, inputs, Mode::Eval, None)?.logits)
    }

    /// Argmax class per row in evaluation mode.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(super::argmax_rows(&self.predict_logits(inputs)?))
    }

    /// Output of the first `n` layers (hidden activations after the
    /// nonlinearity), evaluation mode.
    pub fn hidden_representation(&self, inputs: ArrayView2<f64>, n: usize) -> Result<Array2<f64>> {
        check_input(self, inputs)?;
        let mut h = inputs.to_owned();
        for l in self.layers.iter().take(n) {
            h = affine(&h.view(), l);
            apply_activation(self.activation, &mut h);
        }
        Ok(h)
    }
}

/// Gradients shaped exactly like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Zeroes the gradient of layer `k` (used to freeze layers).
    pub fn zero_layer(&mut self, k: usize) {
        self.layers[k].weight.fill(0.0);
        self.layers[k].bias.fill(0.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Rows of inputs with their class labels and an optional group tag.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub group_id: Option<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(shape_err("batch rows", inputs.nrows(), labels.len()));
        }
        Ok(Self {
            inputs,
            labels,
            group_id: None,
        })
    }
}

/// Intermediate values of a forward pass kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input seen by each layer (after activation and dropout of the previous one).
    pub layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pub hidden_pre: Vec<Array2<f64>>,
    /// Scaled dropout mask per hidden layer (`0` or `1/(1-p)`).
    pub masks: Vec<Option<Array2<f64>>>,
    pub logits: Array2<f64>,
}

fn check_input(params: &ModelParams, inputs: ArrayView2<f64>) -> Result<()> {
    if inputs.ncols() != params.input_dim() {
        return Err(shape_err("forward input columns", params.input_dim(), inputs.ncols()));
    }
    Ok(())
}

fn affine(h: &ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let mut out = h.dot(&layer.weight);
    out += &layer.bias;
    out
}

fn apply_activation(act: Activation, m: &mut Array2<f64>) {
    if act == Activation::Relu {
        m.mapv_inplace(|v| v.max(0.0));
    }
}

/// Forward pass keeping the intermediates. `rng` is only consulted in
/// training mode with a positive dropout rate.
pub fn forward_trace(
    params: &ModelParams,
    inputs: ArrayView2<f64>,
    mode: Mode,
    mut rng: Option<&mut Rng>,
) -> Result<Trace> {
    check_input(params, inputs)?;
    let n_layers = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut hidden_pre = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut h = inputs.to_owned();
    for (k, layer) in params.layers.iter().enumerate() {
        let pre = affine(&h.view(), layer);
        layer_inputs.push(h);
        if k + 1 == n_layers {
            return Ok(Trace {
                layer_inputs,
                hidden_pre,
                masks,
                logits: pre,
            });
        }
        let mut act = pre.clone();
        apply_activation(params.activation, &mut act);
        let mask = if mode == Mode::Train && params.dropout_rate > 0.0 {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::Config("dropout in training mode needs a generator".into()))?;
            let keep = 1.0 - params.dropout_rate;
            let scale = 1.0 / keep;
            let mask = Array2::from_shape_simple_fn(act.raw_dim(), || {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            });
            act *= &mask;
            Some(mask)
        } else {
            None
        };
        hidden_pre.push(pre);
        masks.push(mask);
        h = act;
    }
    unreachable!("loop returns at the output layer")
}

/// Logits for `inputs`. Deterministic given the parameters, inputs, mode
/// and generator state.
pub fn forward(
    params: &ModelParams,
    inputs: ArrayView2<f64>,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<Array2<f64>> {
    Ok(forward_trace(params, inputs, mode, rng)?.logits)
}

/// Backpropagates `d_logits` (gradient of the loss w.r.t. the logits,
/// already divided by the batch size) and adds the weight-decay gradient.
pub fn backprop(params: &ModelParams, trace: &Trace, d_logits: &Array2<f64>) -> Result<Gradients> {
    if d_logits.raw_dim() != trace.logits.raw_dim() {
        return Err(shape_err(
            "output gradient",
            format!("{:?}", trace.logits.dim()),
            format!("{:?}", d_logits.dim()),
        ));
    }
    let n_layers = params.layers.len();
    let mut grads = Vec::with_capacity(n_layers);
    let mut delta = d_logits.clone();
    for k in (0..n_layers).rev() {
        let layer = &params.layers[k];
        let mut gw = trace.layer_inputs[k].t().dot(&delta);
        if params.weight_decay > 0.0 {
            gw.scaled_add(params.weight_decay, &layer.weight);
        }
        let gb = delta.sum_axis(Axis(0));
        if !gw.iter().chain(gb.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: k });
        }
        if k > 0 {
            let mut next = delta.dot(&layer.weight.t());
            if let Some(mask) = &trace.masks[k - 1] {
                next *= mask;
            }
            if params.activation == Activation::Relu {
                Zip::from(&mut next)
                    .and(&trace.hidden_pre[k - 1])
                    .for_each(|d, &pre| {
                        if pre <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = next;
        }
        grads.push(Dense {
            weight: gw,
            bias: gb,
        });
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Loss (mean over the batch plus the decay penalty) and its gradient.
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    loss_kind: LossKind,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(f64, Gradients)> {
    if batch.inputs.nrows() != batch.labels.len() {
        return Err(shape_err("batch rows", batch.inputs.nrows(), batch.labels.len()));
    }
    let trace = forward_trace(params, batch.inputs.view(), mode, rng)?;
    let (loss, d_logits) = match loss_kind {
        LossKind::CrossEntropy => {
            let (loss, mut probs) = cross_entropy(&trace.logits, &batch.labels)?;
            let n = batch.labels.len() as f64;
            for (mut row, &y) in probs.rows_mut().into_iter().zip(&batch.labels) {
                row[y] -= 1.0;
                row /= n;
            }
            (loss, probs)
        }
        LossKind::SquaredError => squared_error(&trace.logits, &batch.labels)?,
    };
    let grads = backprop(params, &trace, &d_logits)?;
    Ok((loss + params.decay_penalty(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut rng = rng_from_seed(0);
        let mut p = ModelParams::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        for l in &mut p.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = random_matrix(5, 3, &mut rng);
        let out = forward(&p, x.view(), Mode::Eval, None).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = ModelParams {
            layers: vec![Dense {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
            activation: Activation::Identity,
            dropout_rate: 0.0,
            weight_decay: 0.0,
        };
        let out = forward(&p, array![[1.0, 2.0, 3.0]].view(), Mode::Eval, None).unwrap();
        assert_eq!(out, array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn forward_matches_straight_line_matmul() {
        let mut rng = rng_from_seed(11);
        let p = ModelParams::new(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let x = random_matrix(7, 4, &mut rng);
        let out = forward(&p, x.view(), Mode::Eval, None).unwrap();
        // hand-rolled triple loops
        for r in 0..7 {
            let mut hidden = [0.0f64; 6];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = p.layers[0].bias[j];
                for i in 0..4 {
                    acc += x[[r, i]] * p.layers[0].weight[[i, j]];
                }
                *h = acc.max(0.0);
            }
            for o in 0..3 {
                let mut acc = p.layers[1].bias[o];
                for (j, h) in hidden.iter().enumerate() {
                    acc += h * p.layers[1].weight[[j, o]];
                }
                assert!((acc - out[[r, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut rng = rng_from_seed(0);
        let p = ModelParams::new(&[3, 2], Activation::Relu, &mut rng).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            forward(&p, x.view(), Mode::Eval, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = rng_from_seed(3);
        let p = ModelParams::new(&[5, 16, 2], Activation::Relu, &mut rng)
            .unwrap()
            .with_regularization(0.5, 0.0);
        let x = random_matrix(4, 5, &mut rng);
        let a = forward(&p, x.view(), Mode::Eval, None).unwrap();
        let b = forward(&p, x.view(), Mode::Eval, Some(&mut rng)).unwrap();
        assert_eq!(a, b);
        let c = forward(&p, x.view(), Mode::Train, Some(&mut rng_from_seed(1))).unwrap();
        assert_ne!(a, c);
        let d = forward(&p, x.view(), Mode::Train, Some(&mut rng_from_seed(1))).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn dead_relu_path_has_zero_gradient() {
        let mut rng = rng_from_seed(5);
        let mut p = ModelParams::new(&[2, 3, 2], Activation::Relu, &mut rng).unwrap();
        // hidden unit 1 never activates for non-negative inputs
        p.layers[0].weight[[0, 1]] = -1.0;
        p.layers[0].weight[[1, 1]] = -1.0;
        p.layers[0].bias[1] = -0.5;
        let batch = Batch::new(array![[0.2, 0.3], [1.0, 0.1], [0.5, 0.5]], vec![0, 1, 1]).unwrap();
        let (_, g) = backward(&p, &batch, LossKind::CrossEntropy, Mode::Eval, None).unwrap();
        assert_eq!(g.layers[0].weight[[0, 1]], 0.0);
        assert_eq!(g.layers[0].weight[[1, 1]], 0.0);
        assert_eq!(g.layers[0].bias[1], 0.0);
        assert_eq!(g.layers[1].weight[[1, 0]], 0.0);
    }

    #[test]
    fn linear_layer_gradients_have_closed_form() {
        let mut rng = rng_from_seed(9);
        let p = ModelParams::new(&[4, 3], Activation::Identity, &mut rng).unwrap();
        let x = random_matrix(6, 4, &mut rng);
        let labels = vec![0, 2, 1, 1, 0, 2];
        let batch = Batch::new(x.clone(), labels.clone()).unwrap();
        let mut onehot = Array2::<f64>::zeros((6, 3));
        for (r, &y) in labels.iter().enumerate() {
            onehot[[r, y]] = 1.0;
        }
        let logits = x.dot(&p.layers[0].weight) + &p.layers[0].bias;

        // squared-logit surrogate: X^T (Z - Y) / n
        let (_, g) = backward(&p, &batch, LossKind::SquaredError, Mode::Eval, None).unwrap();
        let expected = x.t().dot(&(&logits - &onehot)) / 6.0;
        for (a, b) in g.layers[0].weight.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }

        // softmax cross-entropy: X^T (P - Y) / n
        let (_, g) = backward(&p, &batch, LossKind::CrossEntropy, Mode::Eval, None).unwrap();
        let probs = crate::numerics::softmax_rows(&logits);
        let expected = x.t().dot(&(&probs - &onehot)) / 6.0;
        for (a, b) in g.layers[0].weight.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_weights_reported_with_layer() {
        let mut rng = rng_from_seed(2);
        let mut p = ModelParams::new(&[2, 3, 2], Activation::Relu, &mut rng).unwrap();
        p.layers[1].weight[[0, 0]] = f64::NAN;
        assert!(matches!(p.validate(), Err(Error::NonFinite { layer: 1 })));
        let batch = Batch::new(array![[1.0, 1.0]], vec![0]).unwrap();
        let err = backward(&p, &batch, LossKind::SquaredError, Mode::Eval, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
