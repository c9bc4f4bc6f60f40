use std::collections::BTreeMap;

use super::{NamedTensors, ParamTable, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    pub step_count: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub learning_rate: f32,
}

impl AdamState {
    pub fn new(learning_rate: f32) -> Self {
        AdamState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

fn checked_grad<'a>(grads: &'a NamedTensors, name: &str, param: &Tensor) -> Result<&'a Tensor> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
    if g.shape() != param.shape() {
        return Err(Error::Argument(format!(
            "gradient for `{name}` has shape {:?}, parameter {:?}",
            g.shape(),
            param.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
    }
    Ok(g)
}

/// One Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamTable, grads: &NamedTensors, state: &mut AdamState) -> Result<()> {
    // Validate before touching anything so a failed step leaves no trace.
    for e in params.entries() {
        checked_grad(grads, &e.name, &e.tensor)?;
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("name from table");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name)
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(params: &mut ParamTable, grads: &NamedTensors, learning_rate: f32) -> Result<()> {
    for e in params.entries() {
        checked_grad(grads, &e.name, &e.tensor)?;
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("name from table");
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= learning_rate * gv;
        }
    }
    Ok(())
}
