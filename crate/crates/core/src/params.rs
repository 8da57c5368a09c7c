//! Named parameter storage, initialisation, optimiser and EMA.

use std::collections::HashMap;

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, CareError, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named 2-D tensors. Insertion order is the
/// canonical order for checkpoints and gradient reductions.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CareError::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| CareError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`, in store order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn numel_of(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.values[id.0].len()).sum()
    }

    /// Element-type conversion, e.g. an `f64` copy for finite differences.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::lit(x.as_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over the little-endian f64 image of the selected tensors.
    pub fn digest(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.names[id.0].as_bytes());
            for x in self.values[id.0].iter() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Random initialisers. Weights follow Xavier-uniform, biases are zero and
/// embedding-like tables use a small normal.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn xavier<F: Real>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
        Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(self.rng)))
    }

    pub fn normal<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(self.rng)))
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<F>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn accumulate_owned(&mut self, id: ParamId, g: Array2<F>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `other` into `self`; used for the ordered batch reduction.
    pub fn merge(&mut self, other: &Grads<F>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> F {
        let sq: f64 = self
            .slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum();
        F::lit(sq.sqrt())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: F) -> F {
        let norm = self.global_norm();
        if max_norm > F::zero() && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub t: u64,
    pub m: Vec<Option<Array2<F>>>,
    pub v: Vec<Option<Array2<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(n_params: usize, lr: F) -> Self {
        Self {
            lr,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Grows the moment tables after parameters were appended to the store.
    pub fn resize(&mut self, n_params: usize) {
        self.m.resize(n_params, None);
        self.v.resize(n_params, None);
    }

    /// Updates only parameters that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.step_scaled(store, grads, |_| F::one());
    }

    /// Like `step` with a per-parameter learning-rate multiplier.
    pub fn step_scaled(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr_scale: impl Fn(ParamId) -> F) {
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in grads.ids().collect::<Vec<_>>() {
            let g = grads.get(id).expect("listed id");
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            let lr = lr * lr_scale(id);
            let w = store.get_mut(id);
            Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// `target := momentum * target + (1 - momentum) * online`, elementwise.
pub fn ema_update<F: Real>(
    store: &mut ParamStore<F>,
    pairs: &[(ParamId, ParamId)],
    momentum: F,
) -> Result<()> {
    for &(online, target) in pairs {
        if store.get(online).dim() != store.get(target).dim() {
            return Err(shape_err!(
                "ema pair `{}` {:?} vs `{}` {:?}",
                store.name(online),
                store.get(online).dim(),
                store.name(target),
                store.get(target).dim()
            ));
        }
        let src = store.get(online).clone();
        let dst = store.get_mut(target);
        Zip::from(dst).and(&src).for_each(|t, &o| {
            *t = momentum * *t + (F::one() - momentum) * o;
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> (ParamStore<f32>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.insert("online.w", array![[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let b = s.insert("target.w", array![[0.0f32, 0.0], [0.0, 0.0]]).unwrap();
        (s, a, b)
    }

    #[test]
    fn duplicate_name_rejected() {
        let (mut s, _, _) = store();
        assert!(s.insert("online.w", Array2::zeros((1, 1))).is_err());
    }

    #[test]
    fn ema_momentum_one_keeps_target() {
        let (mut s, a, b) = store();
        ema_update(&mut s, &[(a, b)], 1.0).unwrap();
        assert_eq!(s.get(b), &Array2::<f32>::zeros((2, 2)));
    }

    #[test]
    fn ema_momentum_zero_copies_online() {
        let (mut s, a, b) = store();
        ema_update(&mut s, &[(a, b)], 0.0).unwrap();
        assert_eq!(s.get(b), s.get(a));
    }

    #[test]
    fn ema_matches_definition() {
        let (mut s, a, b) = store();
        *s.get_mut(b) = array![[1.0f32, 1.0], [1.0, 1.0]];
        ema_update(&mut s, &[(a, b)], 0.99).unwrap();
        let expect = array![[1.0f32, 1.01], [1.02, 1.03]];
        for (x, y) in s.get(b).iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("o", array![[1.0, -2.0, 3.0]]).unwrap();
        let b = s.insert("t", array![[0.0, 0.0, 0.0]]).unwrap();
        let m = 0.9;
        let dist = |s: &ParamStore<f64>| (s.get(a) - s.get(b)).mapv(|x| x * x).sum().sqrt();
        let mut prev = dist(&s);
        for _ in 0..20 {
            ema_update(&mut s, &[(a, b)], m).unwrap();
            let d = dist(&s);
            assert!((d / prev - m).abs() < 1e-9);
            prev = d;
        }
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("o", Array2::zeros((2, 2))).unwrap();
        let b = s.insert("t", Array2::zeros((2, 3))).unwrap();
        assert!(matches!(ema_update(&mut s, &[(a, b)], 0.5), Err(CareError::Shape(_))));
    }

    #[test]
    fn adam_zero_lr_is_noop() {
        let (mut s, a, _) = store();
        let before = s.get(a).clone();
        let mut g = Grads::new(s.len());
        g.accumulate(a, &array![[1.0f32, -1.0], [0.5, 2.0]]);
        let mut opt = Adam::new(s.len(), 0.0);
        opt.step(&mut s, &g);
        assert_eq!(s.get(a), &before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, a, _) = store();
        let mut g = Grads::new(s.len());
        g.accumulate(a, &array![[1.0f32, -1.0], [0.5, 2.0]]);
        let mut opt = Adam::new(s.len(), 0.1);
        opt.step(&mut s, &g);
        let d = s.get(a) - &array![[1.0f32, 2.0], [3.0, 4.0]];
        for (x, sign) in d.iter().zip([-1.0f32, 1.0, -1.0, -1.0]) {
            assert!((x - 0.1 * sign).abs() < 1e-5, "{x}");
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let (s, a, _) = store();
        let mut g = Grads::new(s.len());
        g.accumulate(a, &array![[3.0f32, 4.0], [0.0, 0.0]]);
        let before = g.clip_global_norm(1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
    }
}
