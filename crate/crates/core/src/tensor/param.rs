//! Trainable parameters and the ordered registry that owns them.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::rng::sample_normal;

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// One named trainable array. Cloning shares storage, so a graph leaf and
/// the optimizer see the same values and gradient buffer.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamInner>>,
}

impl Param {
    pub fn new(name: &str, shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape {shape:?} does not hold {} values",
            data.len()
        );
        let n = data.len();
        Param {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.to_string(),
                shape: shape.to_vec(),
                data,
                grad: vec![0.0; n],
            })),
        }
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn full(name: &str, shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    /// Gaussian init with standard deviation `sigma`.
    pub fn randn(name: &str, shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| sigma * sample_normal(rng)).collect();
        Self::new(name, shape, data)
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |p| p.data.as_slice())
    }

    pub fn grad(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |p| p.grad.as_slice())
    }

    pub(crate) fn shape_and_data(&self) -> (Vec<usize>, Vec<f64>) {
        let p = self.inner.borrow();
        (p.shape.clone(), p.data.clone())
    }

    pub fn set_data(&self, values: &[f64]) {
        let mut p = self.inner.borrow_mut();
        assert_eq!(
            p.data.len(),
            values.len(),
            "param {}: cannot load {} values into {} slots",
            p.name,
            values.len(),
            p.data.len()
        );
        p.data.copy_from_slice(values);
    }

    pub fn add_grad(&self, g: &[f64]) {
        let mut p = self.inner.borrow_mut();
        assert_eq!(p.grad.len(), g.len(), "param {}: gradient shape", p.name);
        for (dst, src) in p.grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.fill(0.0);
    }

    /// In-place update used by optimizers.
    pub fn update<F: FnMut(usize, f64, f64) -> f64>(&self, mut f: F) {
        let mut p = self.inner.borrow_mut();
        let grads: Vec<f64> = p.grad.clone();
        for (i, x) in p.data.iter_mut().enumerate() {
            *x = f(i, *x, grads[i]);
        }
    }
}

/// Registration-ordered collection of parameters. The order is the contract
/// for flat vectors, optimizer state and checkpoints, so it must be identical
/// across runs (it is, because model construction is deterministic).
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a parameter; names must be unique.
    pub fn register(&mut self, param: Param) -> Param {
        let name = param.name();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name, self.params.len());
        self.params.push(param.clone());
        param
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// All values concatenated in registration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for p in &self.params {
            out.extend_from_slice(&p.data());
        }
        out
    }

    /// All gradients concatenated in registration order.
    pub fn grad_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for p in &self.params {
            out.extend_from_slice(&p.grad());
        }
        out
    }

    /// Overwrite every parameter from one flat vector (inverse of `to_flat`).
    pub fn load_flat(&self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.total_len(),
            "flat vector has {} values, parameters hold {}",
            flat.len(),
            self.total_len()
        );
        let mut off = 0;
        for p in &self.params {
            let n = p.numel();
            p.set_data(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Named copies of every value, for checkpoints and cross-thread clones.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| {
                let (shape, data) = p.shape_and_data();
                (p.name(), shape, data)
            })
            .collect()
    }
}
