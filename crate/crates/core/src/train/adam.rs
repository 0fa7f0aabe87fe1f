use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{BoundNet, NetworkParams};
use crate::tensor::{Real, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates of one network plus its update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape()).expect("parameter shape")))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &NetworkParams<T>) -> bool {
        params.len() == self.m.len()
            && params.len() == self.v.len()
            && params.iter().all(|(k, p)| {
                self.m.get(k).is_some_and(|m| m.shape() == p.shape())
                    && self.v.get(k).is_some_and(|v| v.shape() == p.shape())
            })
    }
}

/// Gradients of every parameter of `net` after a backward pass; parameters
/// the loss did not reach get zeros.
pub fn collect_grads<T: Real>(tape: &Tape<T>, net: &BoundNet) -> IndexMap<String, Tensor<T>> {
    net.vars()
        .map(|(name, v)| {
            let g = tape
                .grad_tensor(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)).expect("parameter shape"));
            (name.clone(), g)
        })
        .collect()
}

/// One bias-corrected Adam step. The whole step is rejected, leaving
/// parameters and moments untouched, if any gradient is non-finite.
pub fn adam_update<T: Real>(
    net_name: &str,
    params: &mut NetworkParams<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("{net_name}: no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "{net_name}/{name}: gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFinite(format!("gradient of {net_name}/{name}")).into());
        }
    }
    if !state.matches(params) {
        return Err(Error::Config(format!("{net_name}: optimizer state does not match parameters")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
    let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            let mhat = *mi / corr1;
            let vhat = *vi / corr2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture, DiscriminatorConfig};

    fn net() -> NetworkParams<f64> {
        let arch = Architecture::Discriminator(DiscriminatorConfig {
            input_channels: 1,
            base_width: 1,
            n_layers: 1,
            padding: 0,
        });
        init_params(&arch, 0).unwrap()
    }

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn filled(p: &NetworkParams<f64>, v: f64) -> IndexMap<String, Tensor<f64>> {
        p.iter().map(|(k, t)| (k.clone(), Tensor::full(t.shape(), v).unwrap())).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = net();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = filled(&p, 0.0);
        for _ in 0..3 {
            adam_update("d", &mut p, &g, &mut s, &cfg(0.1)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = net();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = filled(&p, 1.0);
        adam_update("d", &mut p, &g, &mut s, &cfg(0.1)).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(p.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // m̂ = 1, v̂ = 1, so the step is lr/(1+ε)
                assert!((x - y - 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut p = net();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = filled(&p, 0.5);
        g.get_mut("layer1.norm.gain").unwrap().data_mut()[0] = f64::NAN;
        let err = adam_update("d_x", &mut p, &g, &mut s, &cfg(0.1)).unwrap_err();
        assert!(err.to_string().contains("d_x/layer1.norm.gain"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }
}
