//! Named parameter storage and the layers built on top of it.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamKey, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// A flat list of named 2-D parameters with a frozen flag.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: u32,
    names: Vec<String>,
    values: Vec<Array2<T>>,
    frozen: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new(id: u32) -> Self {
        Self { id, names: Vec::new(), values: Vec::new(), frozen: false }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn set_id(&mut self, id: u32) {
        self.id = id;
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Array2<T> {
        &self.values[i]
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mutable access; refused for frozen stores.
    pub fn get_mut(&mut self, i: usize) -> Result<&mut Array2<T>> {
        if self.frozen {
            return Err(Error::contract("params", format!("store {} is frozen", self.id)));
        }
        Ok(&mut self.values[i])
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn key(&self, i: usize) -> ParamKey {
        ParamKey { store: self.id, index: i as u32 }
    }

    /// Inserts parameter `i` into the graph: tracked when trainable,
    /// constant when frozen.
    pub fn var<'p>(&'p self, g: &mut Graph<'p, T>, i: usize) -> Var {
        if self.frozen {
            g.constant_ref(&self.values[i])
        } else {
            g.param(self.key(i), &self.values[i])
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces values from `(name, array)` pairs; names and shapes must match.
    pub fn load_named(&mut self, named: &[(String, Array2<T>)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.iter().enumerate() {
            if name != &self.names[i] || value.dim() != self.values[i].dim() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected `{}` {:?}, found `{name}` {:?}",
                    self.names[i],
                    self.values[i].dim(),
                    value.dim()
                )));
            }
            self.values[i] = value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: self.id,
            names: self.names.clone(),
            values: self.values.iter().map(crate::real::cast).collect(),
            frozen: self.frozen,
        }
    }
}

/// Truncated normal (±2 std) matrix.
pub fn trunc_normal<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return T::of(z * std);
        }
    })
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), trunc_normal(rng, fan_in, fan_out, INIT_STD));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    /// Zero-initialized layer (adaLN gates and other identity-at-init paths).
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((fan_in, fan_out)));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Var {
        let w = store.var(g, self.w);
        let b = store.var(g, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two-layer perceptron with a GELU or SiLU hidden activation.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub silu: bool,
}

impl Mlp {
    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = if self.silu { g.silu(h) } else { g.gelu(h) };
        self.fc2.forward(g, store, h)
    }
}
