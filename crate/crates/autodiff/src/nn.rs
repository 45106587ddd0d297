//! Named parameter storage and the single-linear-layer building block.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::ops::Activation;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "ParamSet::add",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.as_str(), v.as_ref()))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamSet::set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn shared_values(&self) -> Vec<Arc<Tensor>> {
        self.values.clone()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a over names, shapes and the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, v) in self.iter() {
            feed(name.as_bytes());
            for d in v.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every parameter of `other` whose name exists here, checking shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, value) in other.iter() {
            let id = self.id(name).ok_or_else(|| TensorError::Invalid {
                op: "ParamSet::load_from",
                msg: format!("unknown parameter {name}"),
            })?;
            self.set(id, value.clone())?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.names.iter().zip(self.values.iter().map(|v| v.shape())))
            .finish()
    }
}

/// `y = activation(x W + b)` with `W: [d_in, d_out]`, `b: [d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng)?;
        let bias = params.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng)?;
        Ok(Self {
            weight,
            bias,
            activation: Activation::Identity,
            d_in,
            d_out,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Applies the layer to the last axis of `x` (any rank ≥ 1).
    pub fn forward<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let Some(&last) = shape.last() else {
            return Err(TensorError::Rank {
                op: "linear",
                expected: 1,
                got: shape,
            });
        };
        if last != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let x2 = if shape.len() == 2 {
            *x
        } else {
            x.reshape(&[rows, last])?
        };
        let y = x2
            .matmul(&g.param(self.weight))?
            .add_row(&g.param(self.bias))?
            .activation(self.activation)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            y.reshape(&out)
        }
    }
}
