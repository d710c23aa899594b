use super::mlp::{Dense, Gradients, ModelParams};
use crate::error::{shape_err, Result};

/// Bias-corrected Adam state; moments mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Dense>,
    pub second_moment: Vec<Dense>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Dense> = params
            .layers
            .iter()
            .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update. Weight decay is expected to be folded into `grads`
/// already (see [`super::backprop`]), so a zero gradient leaves the
/// parameters untouched.
pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != params.layers.len() || state.first_moment.len() != params.layers.len() {
        return Err(shape_err("adam layers", params.layers.len(), grads.layers.len()));
    }
    for (k, (p, g)) in params.layers.iter().zip(&grads.layers).enumerate() {
        let m = &state.first_moment[k];
        if p.weight.dim() != g.weight.dim()
            || p.bias.dim() != g.bias.dim()
            || m.weight.dim() != p.weight.dim()
        {
            return Err(shape_err(
                "adam layer",
                format!("{:?}", p.weight.dim()),
                format!("{:?}", g.weight.dim()),
            ));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (k, (p, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (((pw, &gw), mw), vw) in p
            .weight
            .iter_mut()
            .zip(g.weight.iter())
            .zip(m.weight.iter_mut())
            .zip(v.weight.iter_mut())
        {
            update(pw, gw, mw, vw);
        }
        for (((pb, &gb), mb), vb) in p
            .bias
            .iter_mut()
            .zip(g.bias.iter())
            .zip(m.bias.iter_mut())
            .zip(v.bias.iter_mut())
        {
            update(pb, gb, mb, vb);
        }
    }
    Ok(())
}
