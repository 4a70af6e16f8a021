use std::collections::BTreeMap;

use rand::Rng;

use super::{Result, TensorError};

/// One named parameter group: a dense row-major matrix (vectors are
/// `1 x n`), its gradient accumulator, and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Param {
            rows,
            cols,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Glorot-uniform init: +-sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(rows, cols);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        for w in p.value.iter_mut() {
            *w = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.value[r * self.cols..(r + 1) * self.cols]
    }
}

/// All learnable parameters of a model, keyed by group name.
///
/// BTreeMap keeps iteration order deterministic, which the optimizer and
/// checkpoint format rely on. Single-writer: mutation happens only from
/// the training thread.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) -> Result<()> {
        if self.groups.contains_key(name) {
            return Err(TensorError::DuplicateGroup(name.to_string()));
        }
        self.groups.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.groups
            .get(name)
            .ok_or_else(|| TensorError::UnknownGroup(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.groups
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownGroup(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.groups.iter_mut()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for p in self.groups.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total scalar parameter count across all groups.
    pub fn num_params(&self) -> usize {
        self.groups.values().map(Param::len).sum()
    }
}
