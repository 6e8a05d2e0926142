use std::collections::HashMap;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Buffers (e.g. batch-norm running statistics) are stored and
    /// serialized with the parameters but never optimized.
    pub trainable: bool,
}

/// Named `f32` tensors owned by a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param `{name}` shape/data mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate param `{name}`");
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), shape, data, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let p = &self.params[id.0];
        Tensor::from_parts(p.shape.clone(), p.data.iter().map(|&v| v as f64).collect())
    }

    /// Places every tensor on the tape; trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .ids()
            .map(|id| {
                let t = self.tensor(id);
                if self.params[id.0].trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Writes `f64` values back, rounding to `f32`.
    pub fn set_from_f64(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.data.len() {
            return Err(TensorError::Shape { op: "set_param", lhs: p.shape.clone(), rhs: vec![values.len()] });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "set_param" });
        }
        for (d, &v) in p.data.iter_mut().zip(values) {
            *d = v as f32;
        }
        Ok(())
    }

    /// FNV-1a over names, shapes, and raw bits of every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in &p.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
