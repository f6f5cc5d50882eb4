use std::collections::BTreeMap;

use super::dense::Tensor;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with Adam moment buffers. Iteration order is the
/// lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Tape handles for every parameter of a store, bound for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Replace the handle bound for `name`, e.g. with a variable under test.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    /// Collect per-name gradients from a backward pass.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let m = Tensor::zeros_like(&value);
        let v = Tensor::zeros_like(&value);
        self.slots.insert(name.into(), Slot { value, m, v });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.slots.iter().map(|(k, s)| (k.clone(), tape.leaf(s.value.clone()))).collect();
        BoundParams { vars }
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, slot) in &self.slots {
            match grads.get(name) {
                None => return Err(Error::MissingGradient(name.clone())),
                Some(g) if g.shape() != slot.value.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("{name}: {:?} vs {:?}", g.shape(), slot.value.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = &grads[name];
            let Slot { value, m, v } = slot;
            for (((p, mi), vi), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copy of the parameter values only, without optimizer state.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.slots.iter().map(|(k, s)| (k.clone(), s.value.clone())).collect()
    }

    pub fn set_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in values {
            let slot = self
                .slots
                .get_mut(k)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{k}`")))?;
            if slot.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_values",
                    detail: format!("{k}: {:?} vs {:?}", t.shape(), slot.value.shape()),
                });
            }
            slot.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(p));
        store
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = single(1.5);
        store.adam_step(&grad(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(store.get("p").unwrap().item(), 1.5);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(1.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        store.adam_step(&grad(1.0), &cfg).unwrap();
        assert!((store.get("p").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut store = single(1.0);
        let err = store.adam_step(&BTreeMap::new(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "p"));
        assert_eq!(store.step_count(), 0);
    }

    #[test]
    fn quadratic_loss_decreases_after_warmup() {
        // f(p) = Σ (p_i - c_i)^2
        let target = [3.0, -2.0, 0.5];
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![0.0; 3]));
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let p = store.get("p").unwrap().data().to_vec();
            let loss: f64 = p.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            losses.push(loss);
            let g = Tensor::vector(p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect());
            store.adam_step(&BTreeMap::from([("p".to_string(), g)]), &cfg).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
    }
}
