//! Named parameter leaves and the initializers used to create them.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::rng::{normal, normal_vec, uniform, Prng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLeaf {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    leaves: Vec<ParamLeaf>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf. Names are unique; re-registering a name is a bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        let id = self.leaves.len();
        self.index.insert(name.clone(), id);
        self.leaves.push(ParamLeaf { name, value, grad });
        ParamId(id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.leaves[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.leaves[id.0].grad
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf {
        &self.leaves[id.0]
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [ParamLeaf] {
        &mut self.leaves
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves.iter().map(|l| l.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.leaves {
            l.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.leaves
            .iter()
            .flat_map(|l| l.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for l in &mut self.leaves {
            l.grad.scale(s);
        }
    }
}

/// Scoped parameter factory: names are built as `prefix.name`.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Prng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Prng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.path(name);
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let path = self.path(name);
        self.store.add(path, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::full(shape, 1.0))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = normal_vec(self.rng, n).into_iter().map(|v| v * std).collect();
        self.param(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    /// Uniform in ±sqrt(6/(fan_in+fan_out)).
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| uniform(self.rng, -a, a)).collect();
        self.param(name, Tensor::matrix(fan_in, fan_out, data))
    }

    /// Square matrix with orthonormal columns, from the QR factor of a
    /// Gaussian matrix (sign-corrected so the draw is Haar distributed).
    pub fn orthogonal(&mut self, name: &str, n: usize) -> ParamId {
        let g = DMatrix::from_fn(n, n, |_, _| normal(self.rng));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                data[i * n + j] = q[(i, j)] * s;
            }
        }
        self.param(name, Tensor::matrix(n, n, data))
    }

    pub fn rng(&mut self) -> &mut Prng {
        self.rng
    }
}
