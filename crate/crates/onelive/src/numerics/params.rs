//! Named parameter storage.
//!
//! All trainable tensors of a model live in one `ParamStore`. A tensor is
//! addressed by `ParamId`; names map onto ids and two names may share one id,
//! which is how weight aliasing (the lite decoders reusing the main decoder's
//! first-layer attention) is represented: one storage slot, several names.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Matrix>,
    names: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Matrix) -> ParamId {
        assert!(
            !self.names.contains_key(name),
            "parameter name registered twice: {name}"
        );
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor);
        self.names.insert(name.to_string(), id);
        id
    }

    /// Register `name` as an alias of an existing tensor. Reads and writes
    /// through either name hit the same storage.
    pub fn alias(&mut self, name: &str, id: ParamId) -> ParamId {
        assert!(id.0 < self.tensors.len(), "alias target out of range");
        assert!(
            !self.names.contains_key(name),
            "parameter name registered twice: {name}"
        );
        self.names.insert(name.to_string(), id);
        id
    }

    /// Gaussian init, std scaled by the caller.
    pub fn register_randn(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| gauss(rng) * std).collect();
        self.register(name, Matrix { rows, cols, data })
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Matrix::zeros(rows, cols))
    }

    pub fn register_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.register(
            name,
            Matrix {
                rows,
                cols,
                data: vec![v; rows * cols],
            },
        )
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// (name, id) pairs in name order; aliases appear once per name.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.names.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Flatten all tensors into one vector, in id order. Aliased tensors
    /// contribute once, so perturbing a coordinate reaches every use site.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_values() {
            return Err(Error::Dimension(format!(
                "flat parameter vector length {} vs store size {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Standard normal draw via Box–Muller; two uniforms per sample keeps the
/// stream layout independent of any library's sampling internals.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
