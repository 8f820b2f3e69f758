use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn value_at(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Mat)> + 'a {
        self.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(name, m)| NamedTensor {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self, String> {
        let mut store = ParamStore::default();
        for t in tensors {
            let m = Mat::from_shape_vec((t.rows, t.cols), t.data).map_err(|e| format!("tensor {}: {e}", t.name))?;
            store.insert(t.name, m);
        }
        Ok(store)
    }
}

/// Serialized form of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Lazily places parameters on a tape, once per tape.
pub(crate) struct Binder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder { tape: Tape::new(), store, vars: vec![None; store.len()] }
    }

    pub fn p(&mut self, name: &str) -> Var {
        let i = self.store.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.param(i, self.store.value_at(i));
        self.vars[i] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b)
    }
}
