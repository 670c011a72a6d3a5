//! Four-layer perceptron with ReLU hidden activations and a sigmoid head.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{Architecture, ModelParams, NnError};

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Layer inputs: `a0 = input`, `a1..a3` post-ReLU activations.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the three hidden layers.
    pre: Vec<Array2<f64>>,
    probs: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_input(params: &ModelParams, input: ArrayView2<f64>) -> Result<(), NnError> {
    if params.architecture() != Architecture::Mlp4 {
        return Err(NnError::Shape("expected mlp4 parameters".into()));
    }
    let w1 = params.tensor(0);
    if input.ncols() != w1.nrows() {
        return Err(NnError::Shape(format!("input width {} != w1 rows {}", input.ncols(), w1.nrows())));
    }
    Ok(())
}

/// Edge probabilities, one per input row.
pub fn mlp_forward(params: &ModelParams, input: ArrayView2<f64>) -> Result<Array1<f64>, NnError> {
    mlp_forward_cached(params, input).map(|(p, _)| p)
}

pub fn mlp_forward_cached(params: &ModelParams, input: ArrayView2<f64>) -> Result<(Array1<f64>, MlpCache), NnError> {
    check_input(params, input)?;
    let mut inputs = vec![input.to_owned()];
    let mut pre = Vec::with_capacity(3);
    for l in 0..3 {
        let z = inputs[l].dot(params.tensor(2 * l)) + params.tensor(2 * l + 1);
        inputs.push(z.mapv(|v| v.max(0.0)));
        pre.push(z);
    }
    let out = inputs[3].dot(params.tensor(6)) + params.tensor(7);
    let probs: Array1<f64> = out.column(0).mapv(sigmoid);
    Ok((probs.clone(), MlpCache { inputs, pre, probs }))
}

/// Backpropagates `dprobs = dL/dŷ` through the sigmoid head and all layers.
pub fn mlp_backward(params: &ModelParams, cache: &MlpCache, dprobs: &[f64]) -> Result<ModelParams, NnError> {
    if dprobs.len() != cache.probs.len() {
        return Err(NnError::Shape(format!(
            "gradient length {} != batch {}",
            dprobs.len(),
            cache.probs.len()
        )));
    }
    let dout: Array2<f64> = Array2::from_shape_fn((dprobs.len(), 1), |(i, _)| {
        let p = cache.probs[i];
        dprobs[i] * p * (1.0 - p)
    });
    let mut grads: Vec<(String, Array2<f64>)> = Vec::with_capacity(8);
    let mut delta = dout;
    for l in (0..4).rev() {
        let dw = cache.inputs[l].t().dot(&delta);
        let db = delta.sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.push((format!("b{}", l + 1), db));
        grads.push((format!("w{}", l + 1), dw));
        if l > 0 {
            let mut d_in = delta.dot(&params.tensor(2 * l).t());
            Zip::from(&mut d_in).and(&cache.pre[l - 1]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_in;
        }
    }
    grads.reverse();
    ModelParams::from_tensors(Architecture::Mlp4, grads)
}
