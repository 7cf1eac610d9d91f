//! Optimizers over the trainable entries of a [`ParamStore`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial decay `lr · (1 - t/T)^power`; 0 keeps the rate constant.
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 2.5e-3,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            poly_power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::config(format!("{what} = {v} is out of range"));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta2", self.beta2));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(bad("weight_decay", self.weight_decay));
        }
        if self.poly_power.is_nan() || self.poly_power < 0.0 {
            return Err(bad("poly_power", self.poly_power));
        }
        Ok(())
    }

    /// Learning rate at step `t` of `total`.
    pub fn rate_at(&self, t: u64, total: u64) -> f64 {
        if self.poly_power == 0.0 || total == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - (t.min(total) as f64) / total as f64;
        self.learning_rate * frac.powf(self.poly_power)
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: one or two buffers per trainable parameter, keyed
/// `"{param}.momentum"`, or `"{param}.adam_m"` and `"{param}.adam_v"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer { config, step: 0, buffers: BTreeMap::new() }
    }

    fn buffer<'a>(buffers: &'a mut BTreeMap<String, Tensor<T>>, key: String, shape: &[usize]) -> &'a mut Tensor<T> {
        buffers.entry(key).or_insert_with(|| Tensor::zeros(shape))
    }

    /// Applies one update with `grads` at learning rate `lr`. Frozen parameters
    /// are rejected rather than skipped.
    pub fn apply<'g>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: impl IntoIterator<Item = (ParamId, &'g Tensor<T>)>,
        lr: f64,
    ) -> Result<()>
    where
        T: 'g,
    {
        self.step += 1;
        let c = self.config;
        let lr = T::lit(lr);
        let wd = T::lit(c.weight_decay);
        let b1 = T::lit(c.momentum);
        let b2 = T::lit(c.beta2);
        let (bc1, bc2) = (
            T::lit(1.0 - c.momentum.powi(self.step as i32)),
            T::lit(1.0 - c.beta2.powi(self.step as i32)),
        );
        for (id, grad) in grads {
            let param = store.get(id);
            if !param.trainable {
                return Err(Error::Contract(format!("gradient step on frozen parameter {}", param.name)));
            }
            if grad.shape() != param.value.shape() {
                return Err(Error::shape(format!("gradient shape {:?} for {}", grad.shape(), param.name)));
            }
            let name = param.name.clone();
            let shape = param.value.shape().to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    let v = Self::buffer(&mut self.buffers, format!("{name}.momentum"), &shape);
                    let w = store.value_mut(id);
                    for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                        *vi = b1 * *vi + gi + wd * *wi;
                        *wi = *wi - lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let mut m = self.buffers.remove(&format!("{name}.adam_m")).unwrap_or_else(|| Tensor::zeros(&shape));
                    let v = Self::buffer(&mut self.buffers, format!("{name}.adam_v"), &shape);
                    let w = store.value_mut(id);
                    let eps = T::lit(ADAM_EPS);
                    for (((wi, mi), vi), &gi) in
                        w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data())
                    {
                        let g = gi + wd * *wi;
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        *wi = *wi - lr * (*mi / bc1) / (Float::sqrt(*vi / bc2) + eps);
                    }
                    self.buffers.insert(format!("{name}.adam_m"), m);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn quadratic(kind: OptimizerKind) -> f64 {
        // minimize (w - 3)^2 from w = 0
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.0), true);
        let cfg = OptimConfig { kind, learning_rate: 0.05, poly_power: 0.0, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg);
        for _ in 0..500 {
            let w = store.value(id).data()[0];
            let g = Tensor::scalar(2.0 * (w - 3.0));
            opt.apply(&mut store, [(id, &g)], cfg.learning_rate).unwrap();
        }
        store.value(id).data()[0]
    }

    #[test]
    fn both_optimizers_reach_the_minimum() {
        assert!((quadratic(OptimizerKind::Sgd) - 3.0).abs() < 1e-6);
        assert!((quadratic(OptimizerKind::Adam) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn first_sgd_step_is_plain_gradient_descent() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(), true);
        let mut opt = Optimizer::new(OptimConfig::default());
        let g = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
        opt.apply(&mut store, [(id, &g)], 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[0.95, -1.2]);
        assert_eq!(opt.buffers["w.momentum"].data(), &[0.5, 2.0]);
    }

    #[test]
    fn frozen_parameters_are_refused() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0), false);
        let mut opt = Optimizer::new(OptimConfig::default());
        let g = Tensor::scalar(1.0);
        assert!(matches!(opt.apply(&mut store, [(id, &g)], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn poly_schedule() {
        let c = OptimConfig { learning_rate: 1.0, poly_power: 1.0, ..OptimConfig::default() };
        assert_eq!(c.rate_at(0, 10), 1.0);
        assert!((c.rate_at(5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(c.rate_at(10, 10), 0.0);
        assert!(OptimConfig { learning_rate: 0.0, ..c }.validate().is_err());
    }
}
