//! Minimal training substrate: a flat f64 parameter store with parallel
//! gradient storage, seeded initialization and an AdamW optimizer.
//!
//! Keeping every tensor in one contiguous buffer makes the optimizer a
//! single element-wise loop, makes checkpoint serialization a memcpy, and
//! lets finite-difference checks perturb any single scalar parameter.

use ndarray::{ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// All learnable tensors of one model, flattened into a single buffer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            entries: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                self.values.extend((0..len).map(|_| dist.sample(rng)));
            }
            Init::Zeros => self.values.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.values.extend(std::iter::repeat_n(1.0, len)),
        }
        self.grads.extend(std::iter::repeat_n(0.0, len));
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(id))
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(id))
            .expect("entry shape matches storage")
    }

    pub fn set(&mut self, id: ParamId, data: &[f64]) {
        let e = &self.entries[id.0];
        assert_eq!(data.len(), e.len, "size mismatch for {}", e.name);
        self.values[e.offset..e.offset + e.len].copy_from_slice(data);
    }

    /// Overwrites a tensor by name; used when loading checkpoints.
    pub fn set_by_name(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Config(format!(
            "model has no tensor named `{name}`"
        )))?;
        self.set(id, data);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.grads[e.offset..e.offset + e.len]
    }

    pub fn accum_grad(&mut self, id: ParamId, delta: &[f64]) {
        let e = &self.entries[id.0];
        assert_eq!(delta.len(), e.len, "grad size mismatch for {}", e.name);
        for (g, d) in self.grads[e.offset..e.offset + e.len].iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn grads_all(&self) -> &[f64] {
        &self.grads
    }
}

/// AdamW with decoupled weight decay applied uniformly to all parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> AdamW {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) {
        let n = store.len();
        self.step_range(store, lr, weight_decay, 0..n);
    }

    /// Updates only parameters whose flat offset falls in `range`; m/v state
    /// outside the range is left untouched, so frozen parameters stay frozen.
    pub fn step_range(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        weight_decay: f64,
        range: std::ops::Range<usize>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grads: Vec<f64> = store.grads_all()[range.clone()].to_vec();
        let values = store.values_mut();
        for (k, g) in range.clone().zip(grads) {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            values[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * values[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trip_and_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", &[2, 3], Init::Normal(0.02), &mut rng);
        let b = store.add("b", &[3], Init::Zeros, &mut rng);
        assert_eq!(store.len(), 9);
        assert_eq!(store.view2(w).shape(), &[2, 3]);
        assert!(store.view1(b).iter().all(|&x| x == 0.0));
        store.set_by_name("b", &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(store.slice(b), &[1.0, 2.0, 3.0]);
        assert!(store.set_by_name("nope", &[0.0]).is_err());
    }

    #[test]
    fn adamw_with_zero_lr_leaves_parameters_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", &[4, 4], Init::Normal(0.5), &mut rng);
        let before = store.values().to_vec();
        store.accum_grad(w, &vec![1.0; 16]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.999, 1e-8);
        opt.step(&mut store, 0.0, 0.05);
        assert_eq!(store.values(), before.as_slice());
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add("w", &[1], Init::Zeros, &mut rng);
        store.accum_grad(w, &[2.0]);
        let mut opt = AdamW::new(store.len(), 0.9, 0.999, 1e-8);
        opt.step(&mut store, 0.1, 0.0);
        assert!(store.slice(w)[0] < 0.0);
    }

    #[test]
    fn step_range_freezes_outside_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], Init::Ones, &mut rng);
        let b = store.add("b", &[2], Init::Ones, &mut rng);
        store.accum_grad(a, &[1.0, 1.0]);
        store.accum_grad(b, &[1.0, 1.0]);
        let head = store.entry(b).offset;
        let n = store.len();
        let mut opt = AdamW::new(n, 0.9, 0.999, 1e-8);
        opt.step_range(&mut store, 0.1, 0.01, head..n);
        assert_eq!(store.slice(a), &[1.0, 1.0]);
        assert!(store.slice(b)[0] < 1.0);
    }
}
