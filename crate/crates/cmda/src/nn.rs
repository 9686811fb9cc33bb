//! Named-parameter bookkeeping shared by every trainable block.
//!
//! Each tensor draws its init values from an RNG seeded by (run seed, name),
//! so adding or removing one block never shifts another block's init — a
//! requirement for the "disabled branch leaves the rest bit-identical" tests.

use crate::autodiff::{AdResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to derive stable per-name RNG streams (hasher stability
/// across platforms/toolchains matters; std's DefaultHasher promises none).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform(−1/√fan_in, +1/√fan_in) init.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor initialized uniform(±1/√fan_in) from a stream derived
    /// from (seed, name). Duplicate names are a programming error.
    pub fn add_init(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
        self.add_tensor(name, init_uniform(shape, fan_in, &mut rng));
    }

    /// Add a zero tensor (biases).
    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        self.add_tensor(name, Tensor::zeros(shape));
    }

    pub fn add_tensor(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merge another set under a distinct name prefix already baked into it.
    pub fn extend(&mut self, other: ParamSet) {
        for (name, tensor) in other.entries {
            self.add_tensor(&name, tensor);
        }
    }

    /// Register every tensor on a tape; the returned binding resolves names
    /// to tape handles for the forward pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut vars = Vec::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            names.push(name.clone());
            vars.push(tape.param(tensor.clone()));
        }
        BoundParams { names, vars }
    }
}

/// Tape handles for one registration of a [`ParamSet`].
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    /// Assemble a binding from pre-registered vars (gradient-check closures).
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|n| n.as_str()).zip(self.vars.iter().copied())
    }
}

/// x·W + b for x of shape [n, in], W [in, out], b [out].
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> AdResult<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = ParamSet::new();
        a.add_init("w", &[4, 4], 4, 99);
        let mut b = ParamSet::new();
        b.add_init("w", &[4, 4], 4, 99);
        assert_eq!(a.get("w"), b.get("w"));
        assert!(a.get("w").data().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn init_streams_are_independent_per_name() {
        let mut with_extra = ParamSet::new();
        with_extra.add_init("extra", &[8], 8, 7);
        with_extra.add_init("w", &[3, 3], 3, 7);
        let mut alone = ParamSet::new();
        alone.add_init("w", &[3, 3], 3, 7);
        assert_eq!(with_extra.get("w"), alone.get("w"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = ParamSet::new();
        p.add_zeros("b", &[2]);
        p.add_zeros("b", &[2]);
    }

    #[test]
    fn bind_round_trips_values() {
        let mut p = ParamSet::new();
        p.add_init("w", &[2, 2], 2, 1);
        p.add_zeros("b", &[2]);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        assert_eq!(tape.value(bound.var("w")), p.get("w"));
        assert_eq!(tape.value(bound.var("b")).data(), &[0.0, 0.0]);
    }
}
