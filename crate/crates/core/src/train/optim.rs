use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Plain gradient descent: `p ← p − lr · ∂L/∂p` for every layer parameter
/// and `γ ← γ − scale_lr · ∂L/∂γ` for the softmax scale, then checks that no
/// normalizing weight row collapsed and everything is finite.
pub fn sgd_step(net: &mut Network, learning_rate: f64, scale_learning_rate: f64) -> Result<()> {
    let descend = |p: &mut crate::layers::Param, lr: f64| {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    };
    for layer in net.layers_mut() {
        layer.params_mut().into_iter().for_each(|p| descend(p, learning_rate));
    }
    descend(net.head_mut().param_mut(), scale_learning_rate);
    net.check_weights()
}

/// Shadow copies of a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    /// Starts the shadow at the network's current parameters.
    pub fn new(net: &Network, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: net.params().into_iter().map(|p| p.value.clone()).collect(),
        })
    }

    pub fn from_shadow(decay: f64, shadow: Vec<Tensor>) -> Self {
        Self { decay, shadow }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn update(&mut self, net: &Network) -> Result<()> {
        ema_update(&mut self.shadow, net, self.decay)
    }

    /// Copies the shadow values into `net`'s parameters.
    pub fn apply_to(&self, net: &mut Network) -> Result<()> {
        load_params(net, &self.shadow)
    }
}

/// `shadow ← decay · shadow + (1 − decay) · param`, parameter by parameter.
pub fn ema_update(shadow: &mut [Tensor], net: &Network, decay: f64) -> Result<()> {
    let params = net.params();
    if params.len() != shadow.len() {
        return Err(Error::Shape {
            op: "ema_update",
            left: vec![shadow.len()],
            right: vec![params.len()],
        });
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        if s.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "ema_update",
                left: s.shape().to_vec(),
                right: p.value.shape().to_vec(),
            });
        }
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.value.data()) {
            *sv = decay * *sv + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

/// Overwrites every parameter of `net` with `values` (same order as
/// [`Network::params`]).
pub fn load_params(net: &mut Network, values: &[Tensor]) -> Result<()> {
    let mut params = net.params_mut();
    if params.len() != values.len() {
        return Err(Error::Shape {
            op: "load_params",
            left: vec![values.len()],
            right: vec![params.len()],
        });
    }
    for (p, v) in params.iter_mut().zip(values) {
        if p.value.shape() != v.shape() {
            return Err(Error::Shape {
                op: "load_params",
                left: v.shape().to_vec(),
                right: p.value.shape().to_vec(),
            });
        }
        p.value = v.clone();
    }
    Ok(())
}
