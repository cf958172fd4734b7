//! SGD with (optional nesterov) momentum and weight decay, plus the
//! momentum-encoder parameter update used by the queue-based variant.

use std::collections::BTreeMap;

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 1e-4, nesterov: true }
    }
}

/// Optimizer state: hyperparameters plus one velocity buffer per parameter.
pub struct OptimState {
    pub cfg: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(cfg: SgdConfig, model: &EncoderModel) -> Self {
        let velocity =
            model.params().iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        OptimState { cfg, velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// One SGD step:
/// v <- mu*v + (g + lambda*theta)
/// theta <- theta - lr*(g + lambda*theta + mu*v)   (nesterov)
/// theta <- theta - lr*v                            (otherwise)
pub fn sgd_step(
    model: &mut EncoderModel,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptimState,
) -> Result<()> {
    let keys: Vec<String> = model.params().keys().cloned().collect();
    if grads.len() != keys.len() || keys.iter().any(|k| !grads.contains_key(k)) {
        return Err(Error::Shape(format!(
            "sgd_step: gradient keys do not match parameter keys ({} vs {})",
            grads.len(),
            keys.len()
        )));
    }
    let SgdConfig { lr, momentum: mu, weight_decay: lambda, nesterov } = opt.cfg;
    for name in keys {
        let theta = model.param(&name).unwrap().clone();
        let g = &grads[&name];
        let decayed = g.zip(&theta, |gi, ti| gi + lambda * ti)?;
        let v_old = opt.velocity.get(&name).unwrap();
        let v_new = v_old.zip(&decayed, |vi, di| mu * vi + di)?;
        let theta_new = if nesterov {
            let step = decayed.zip(&v_new, |di, vi| di + mu * vi)?;
            theta.zip(&step, |ti, si| ti - lr * si)?
        } else {
            theta.zip(&v_new, |ti, vi| ti - lr * vi)?
        };
        opt.velocity.insert(name.clone(), v_new);
        model.set_param(&name, theta_new)?;
    }
    Ok(())
}

/// Exponential moving average of the query encoder into the key encoder:
/// theta_g <- m*theta_g + (1-m)*theta_f. No gradients flow here.
pub fn momentum_update(key: &mut EncoderModel, query: &EncoderModel, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum m must be in [0,1], got {m}")));
    }
    let key_names: Vec<String> = key.params().keys().cloned().collect();
    let query_names: Vec<&String> = query.params().keys().collect();
    if key_names.len() != query_names.len()
        || key_names.iter().zip(&query_names).any(|(a, b)| &a != b)
    {
        return Err(Error::Shape("momentum_update: parameter maps are not congruent".into()));
    }
    for name in key_names {
        let theta_g = key.param(&name).unwrap();
        let theta_f = query.param(&name).unwrap();
        let updated = theta_g.zip(theta_f, |g, f| m * g + (1.0 - m) * f)?;
        key.set_param(&name, updated)?;
    }
    Ok(())
}
