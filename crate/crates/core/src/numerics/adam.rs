use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hyperparameters of the Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    pub params: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: AdamParams, shapes: &[&[usize]]) -> Self {
        Self {
            params,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: AdamParams, tensors: &[Tensor<T>]) -> Self {
        let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
        Self::new(params, &shapes)
    }
}

/// One bias-corrected Adam update. Grads are validated before any parameter
/// or moment is touched, so a failed call leaves everything unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g, "adam_step")?;
        p.expect_same_shape(&state.m[i], "adam_step")?;
        g.check_finite(&format!("gradient #{i}"))?;
    }

    state.step += 1;
    let hp = state.params;
    let b1 = T::from_f64_lossy(hp.beta1);
    let b2 = T::from_f64_lossy(hp.beta2);
    let one = T::one();
    let bias1 = one - T::from_f64_lossy(hp.beta1.powi(state.step as i32));
    let bias2 = one - T::from_f64_lossy(hp.beta2.powi(state.step as i32));
    let lr = T::from_f64_lossy(hp.lr);
    let eps = T::from_f64_lossy(hp.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
