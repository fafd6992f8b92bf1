use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Name, shape and flat offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Location of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter vector plus its tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    pub values: Vec<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize], init: impl FnMut() -> f64) -> ParamRange {
        let offset = self.values.len();
        let numel: usize = shape.iter().product();
        self.values.extend(std::iter::repeat_with(init).take(numel));
        self.specs.push(TensorSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        ParamRange { offset, len: numel }
    }

    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamRange {
        self.push(name, shape, || rng.gen_range(-bound..=bound))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamRange {
        self.push(name, shape, || value)
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, r: ParamRange) -> &[f64] {
        &self.values[r.range()]
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Replaces values after checking the layout matches.
    pub fn load(&mut self, specs: &[TensorSpec], values: Vec<f64>) -> Result<(), String> {
        if specs != self.specs.as_slice() {
            return Err("tensor layout does not match the model config".into());
        }
        if values.len() != self.values.len() {
            return Err(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            ));
        }
        self.values = values;
        Ok(())
    }
}
