use std::cell::Cell;

use rand::Rng;

use super::scalar::{leaky_relu, leaky_relu_grad};
use super::{Param, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
}

/// Shape of a feed-forward net. Hidden layers use the leaky rectifier with
/// negative slope `alpha`; the last layer uses `output_activation`
/// (identity unless configured otherwise).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub widths: Vec<usize>,
    pub alpha: f64,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(input_width: usize, widths: Vec<usize>) -> Self {
        MlpSpec {
            input_width,
            widths,
            alpha: 0.01,
            output_activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(TensorError::InvalidSpec("at least one layer".into()));
        }
        if self.input_width == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(TensorError::InvalidSpec("all widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let fan_in = if layer == 0 {
            self.input_width
        } else {
            self.widths[layer - 1]
        };
        (self.widths[layer], fan_in)
    }

    fn activation_at(&self, layer: usize) -> Activation {
        if layer + 1 == self.widths.len() {
            self.output_activation
        } else {
            Activation::LeakyRelu
        }
    }
}

pub fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}/w{layer}")
}

pub fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}/b{layer}")
}

/// Create the weight and bias groups for `spec` under `prefix`.
pub fn register_mlp<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut R,
) -> Result<()> {
    spec.validate()?;
    for layer in 0..spec.widths.len() {
        let (out, fan_in) = spec.layer_dims(layer);
        store.insert(&weight_name(prefix, layer), Param::glorot(out, fan_in, rng))?;
        store.insert(&bias_name(prefix, layer), Param::zeros(1, out))?;
    }
    Ok(())
}

/// Cached activations from one forward pass, enough for an exact
/// reverse-mode sweep. Single-use: backward marks it consumed.
#[derive(Debug)]
pub struct MlpTape {
    prefix: String,
    spec: MlpSpec,
    input: Vec<f64>,
    /// Pre-activation z_l per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation a_l per layer (a_last is the output).
    post: Vec<Vec<f64>>,
    consumed: Cell<bool>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }
}

pub fn mlp_forward(
    spec: &MlpSpec,
    params: &ParamStore,
    prefix: &str,
    input: &[f64],
) -> Result<(Vec<f64>, MlpTape)> {
    spec.validate()?;
    if input.len() != spec.input_width {
        return Err(TensorError::Dimension {
            context: format!("{prefix} layer 0 input"),
            expected: spec.input_width,
            got: input.len(),
        });
    }
    let mut pre = Vec::with_capacity(spec.widths.len());
    let mut post = Vec::with_capacity(spec.widths.len());
    let mut cur: Vec<f64> = input.to_vec();
    for layer in 0..spec.widths.len() {
        let w = params.get(&weight_name(prefix, layer))?;
        let b = params.get(&bias_name(prefix, layer))?;
        let (out, fan_in) = spec.layer_dims(layer);
        if w.rows != out || w.cols != fan_in {
            return Err(TensorError::Dimension {
                context: format!("{prefix} layer {layer} weights"),
                expected: out * fan_in,
                got: w.len(),
            });
        }
        let mut z = vec![0.0; out];
        for r in 0..out {
            let row = w.row(r);
            let mut acc = b.value[r];
            for (x, wv) in cur.iter().zip(row) {
                acc += x * wv;
            }
            z[r] = acc;
        }
        let a: Vec<f64> = match spec.activation_at(layer) {
            Activation::Identity => z.clone(),
            Activation::LeakyRelu => z.iter().map(|&v| leaky_relu(v, spec.alpha)).collect(),
        };
        pre.push(z);
        cur = a.clone();
        post.push(a);
    }
    let tape = MlpTape {
        prefix: prefix.to_string(),
        spec: spec.clone(),
        input: input.to_vec(),
        pre,
        post,
        consumed: Cell::new(false),
    };
    Ok((cur, tape))
}

/// Reverse sweep: accumulates parameter gradients into `params` and
/// returns the gradient with respect to the input.
pub fn mlp_backward(params: &mut ParamStore, tape: &MlpTape, upstream: &[f64]) -> Result<Vec<f64>> {
    if tape.consumed.get() {
        return Err(TensorError::StaleTape(tape.prefix.clone()));
    }
    tape.consumed.set(true);
    let spec = &tape.spec;
    let last = spec.widths.len() - 1;
    if upstream.len() != spec.widths[last] {
        return Err(TensorError::Dimension {
            context: format!("{} upstream grad", tape.prefix),
            expected: spec.widths[last],
            got: upstream.len(),
        });
    }
    let mut grad: Vec<f64> = upstream.to_vec();
    for layer in (0..=last).rev() {
        // d loss / d z
        let z = &tape.pre[layer];
        let dz: Vec<f64> = match spec.activation_at(layer) {
            Activation::Identity => grad,
            Activation::LeakyRelu => grad
                .iter()
                .zip(z)
                .map(|(&g, &zv)| g * leaky_relu_grad(zv, spec.alpha))
                .collect(),
        };
        let below: &[f64] = if layer == 0 {
            &tape.input
        } else {
            &tape.post[layer - 1]
        };
        let (out, fan_in) = spec.layer_dims(layer);
        {
            let w = params.get_mut(&weight_name(&tape.prefix, layer))?;
            for r in 0..out {
                let row = &mut w.grad[r * fan_in..(r + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(below) {
                    *g += dz[r] * x;
                }
            }
        }
        {
            let b = params.get_mut(&bias_name(&tape.prefix, layer))?;
            for (g, d) in b.grad.iter_mut().zip(&dz) {
                *g += d;
            }
        }
        // propagate: grad_below = W^T dz
        let w = params.get(&weight_name(&tape.prefix, layer))?;
        let mut down = vec![0.0; fan_in];
        for r in 0..out {
            let row = w.row(r);
            for (d, wv) in down.iter_mut().zip(row) {
                *d += dz[r] * wv;
            }
        }
        grad = down;
    }
    Ok(grad)
}
