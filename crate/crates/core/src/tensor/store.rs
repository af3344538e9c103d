//! Named parameter store with per-parameter optimizer slots.
//!
//! Names use a `model/` prefix convention (`nav/*`, `spk/*`, `critic/*`) so
//! optimizer steps can target one model's parameters at a time.

use std::collections::BTreeMap;

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    /// Adam first/second moment, lazily allocated.
    pub adam_m: Option<Vec<f32>>,
    pub adam_v: Option<Vec<f32>>,
    pub adam_t: u64,
    /// RMSProp running mean square.
    pub rms_sq: Option<Vec<f32>>,
}

/// Trainable parameters keyed by name. Iteration order is the sorted name
/// order, which keeps checkpoints and updates reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> TensorResult<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                adam_m: None,
                adam_v: None,
                adam_t: 0,
                rms_sq: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub(crate) fn insert_raw(&mut self, name: String, p: Param) {
        self.params.insert(name, p);
    }

    pub fn add_grad(&mut self, name: &str, g: &[f32]) -> TensorResult<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if g.len() != p.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_grad",
                lhs: p.value.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut p.grad {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Explicitly mark a parameter as having a (zero) gradient.
    pub fn set_zero_grad(&mut self, name: &str) -> TensorResult<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.grad = Some(vec![0.0; p.value.len()]);
        Ok(())
    }

    /// Clear all gradients back to the missing state.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Euclidean norm of the gradients under a name prefix; missing
    /// gradients count as zero.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        let mut acc = 0.0f64;
        for (name, p) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(g) = &p.grad {
                for x in g {
                    acc += (*x as f64) * (*x as f64);
                }
            }
        }
        acc.sqrt()
    }

    /// Byte-stable fingerprint of the parameter values (little-endian f32).
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            out.extend_from_slice(name.as_bytes());
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Adam with decoupled weight decay applied directly to the parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Apply one Adam step to every parameter whose name starts with `prefix`.
/// Every targeted parameter must have a populated gradient.
pub fn adam_step(store: &mut ParamStore, prefix: &str, cfg: &AdamConfig) -> TensorResult<()> {
    let names: Vec<String> = store
        .params
        .keys()
        .filter(|n| n.starts_with(prefix))
        .cloned()
        .collect();
    for name in &names {
        if store.params[name].grad.is_none() {
            return Err(TensorError::MissingGrad(name.clone()));
        }
    }
    for name in names {
        let p = store.params.get_mut(&name).unwrap();
        let g = p.grad.take().unwrap();
        let n = p.value.len();
        let m = p.adam_m.get_or_insert_with(|| vec![0.0; n]);
        let v = p.adam_v.get_or_insert_with(|| vec![0.0; n]);
        p.adam_t += 1;
        let t = p.adam_t as f64;
        let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            let step = cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64);
            let decay = cfg.lr as f64 * cfg.weight_decay as f64 * p.value.data[i] as f64;
            p.value.data[i] = (p.value.data[i] as f64 - step - decay) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RmsPropConfig {
    pub lr: f32,
    pub alpha: f32,
    pub eps: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Apply one RMSProp step to every parameter under `prefix`.
pub fn rmsprop_step(store: &mut ParamStore, prefix: &str, cfg: &RmsPropConfig) -> TensorResult<()> {
    let names: Vec<String> = store
        .params
        .keys()
        .filter(|n| n.starts_with(prefix))
        .cloned()
        .collect();
    for name in &names {
        if store.params[name].grad.is_none() {
            return Err(TensorError::MissingGrad(name.clone()));
        }
    }
    for name in names {
        let p = store.params.get_mut(&name).unwrap();
        let g = p.grad.take().unwrap();
        let n = p.value.len();
        let sq = p.rms_sq.get_or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            sq[i] = cfg.alpha * sq[i] + (1.0 - cfg.alpha) * g[i] * g[i];
            let step = cfg.lr as f64 * g[i] as f64 / ((sq[i] as f64).sqrt() + cfg.eps as f64);
            p.value.data[i] = (p.value.data[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0])).unwrap();
        store.add_grad("w", &[0.5]).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut store, "w", &cfg).unwrap();
        // First step: m_hat = g, v_hat = g^2, so delta ~= -lr * sign(g).
        let w = store.get("w").unwrap().data[0];
        assert!((w - (1.0 - cfg.lr)).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn adam_zero_grad_pure_decay() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![2.0])).unwrap();
        store.set_zero_grad("w").unwrap();
        let cfg = AdamConfig::default();
        adam_step(&mut store, "w", &cfg).unwrap();
        let expect = 2.0 - cfg.lr as f64 * cfg.weight_decay as f64 * 2.0;
        assert_eq!(store.get("w").unwrap().data[0], expect as f32);
    }

    #[test]
    fn adam_missing_grad_is_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            adam_step(&mut store, "w", &AdamConfig::default()),
            Err(TensorError::MissingGrad(_))
        ));
    }

    fn quadratic_loss(store: &mut ParamStore) -> f64 {
        let mut tape = Tape::new(true);
        let w = tape.param(store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let out = tape.scalar64(loss).unwrap();
        tape.backward(loss, store).unwrap();
        out
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]))
            .unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let loss = quadratic_loss(&mut store);
            assert!(loss < last, "loss {loss} did not decrease from {last}");
            last = loss;
            adam_step(&mut store, "w", &cfg).unwrap();
        }
    }

    #[test]
    fn rmsprop_descends_quadratic_bowl() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::vector(vec![1.5, -0.7]))
            .unwrap();
        let cfg = RmsPropConfig {
            lr: 0.05,
            ..RmsPropConfig::default()
        };
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let loss = quadratic_loss(&mut store);
            assert!(loss < last);
            last = loss;
            rmsprop_step(&mut store, "w", &cfg).unwrap();
        }
    }

    #[test]
    fn prefix_step_leaves_other_params_untouched() {
        let mut store = ParamStore::new();
        store.insert("nav/w", Tensor::vector(vec![1.0])).unwrap();
        store.insert("spk/w", Tensor::vector(vec![1.0])).unwrap();
        store.add_grad("nav/w", &[1.0]).unwrap();
        adam_step(&mut store, "nav/", &AdamConfig::default()).unwrap();
        assert_eq!(store.get("spk/w").unwrap().data[0], 1.0);
        assert_ne!(store.get("nav/w").unwrap().data[0], 1.0);
    }
}
