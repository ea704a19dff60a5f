use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named trainable tensors together with their Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.first_moment.push(value.zeros_like());
        self.second_moment.push(value.zeros_like());
        self.values.push(value);
        self.names.push(name);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second_moment[index]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Pulls this store's gradients out of a backward pass.
    pub fn collect(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.wrt(v).cloned().unwrap_or_else(|| p.zeros_like()))
            .collect()
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.values.len() {
            return dim_err(format!("{} gradients for {} parameters", grads.len(), self.values.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.values[i].shape() {
                return dim_err(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    self.names[i],
                    g.shape(),
                    self.values[i].shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for {}", self.names[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Named copies of every parameter, with `prefix` prepended.
    pub fn to_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names.iter().zip(&self.values).map(|(n, v)| (format!("{prefix}{n}"), v.clone())).collect()
    }

    /// Overwrites parameters from checkpoint records whose names start with `prefix`.
    ///
    /// Every parameter must be present with a matching shape. Optimizer
    /// moments are reset.
    pub fn load_records(&mut self, prefix: &str, records: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let full = format!("{prefix}{name}");
            let Some((_, t)) = records.iter().find(|(n, _)| *n == full) else {
                return Err(Error::Format(format!("checkpoint lacks parameter {full}")));
            };
            if t.len() != self.values[i].len() {
                return Err(Error::Format(format!("parameter {full} has {} values, expected {}", t.len(), self.values[i].len())));
            }
            self.values[i] = Tensor::new(self.values[i].shape().to_vec(), t.data().to_vec())?;
            self.first_moment[i] = self.values[i].zeros_like();
            self.second_moment[i] = self.values[i].zeros_like();
        }
        self.step = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_everything_unchanged() {
        let mut s = scalar_store(1.5);
        s.adam_step(&[Tensor::scalar(0.0)], &AdamConfig::default()).unwrap();
        assert_eq!(s.get(0).item(), 1.5);
        assert_eq!(s.first_moment(0).item(), 0.0);
        assert_eq!(s.second_moment(0).item(), 0.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the update is
        // lr * g / (|g| + eps).
        for g in [3.0, -0.02, 1e-3] {
            let mut s = scalar_store(0.0);
            let cfg = AdamConfig::with_lr(0.01);
            s.adam_step(&[Tensor::scalar(g)], &cfg).unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((s.get(0).item() - expected).abs() < 1e-15);
            assert!((s.get(0).item().abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_decreases_a_convex_quadratic() {
        // loss = (x - 2)^2, gradient 2(x - 2).
        let mut s = scalar_store(-1.0);
        let cfg = AdamConfig::with_lr(0.1);
        let loss = |x: f64| (x - 2.0).powi(2);
        let mut prev = loss(s.get(0).item());
        for _ in 0..2 {
            let g = 2.0 * (s.get(0).item() - 2.0);
            s.adam_step(&[Tensor::scalar(g)], &cfg).unwrap();
            let now = loss(s.get(0).item());
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut s = scalar_store(0.0);
        assert!(s.adam_step(&[], &AdamConfig::default()).is_err());
        assert!(s.adam_step(&[Tensor::row(vec![1.0, 2.0])], &AdamConfig::default()).is_err());
        assert!(s.adam_step(&[Tensor::scalar(f64::NAN)], &AdamConfig::default()).is_err());
        assert_eq!(s.step(), 0);
    }
}
