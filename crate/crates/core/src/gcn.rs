//! Pairwise graph baseline: relation nodes linked to their subject and object.

use hgere_autodiff::{Activation, Graph, ParamId, ParamSet, Var};
use rand::Rng;

use crate::backbone::rel_pairs;
use crate::error::Result;
use crate::layers::Ffn;

/// Directed neighbor pairs `(source, target)` over the stacked node layout
/// (subjects, objects, relations). Every relation node touches its subject
/// and its object, in both directions.
pub fn gcn_neighbors(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (r, (i, j)) in rel_pairs(k).into_iter().enumerate() {
        let rn = 2 * k + r;
        out.push((i, rn));
        out.push((k + j, rn));
        out.push((rn, i));
        out.push((rn, k + j));
    }
    out
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub proj: Ffn,
    pub att_w: ParamId,
    pub att_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct Gcn {
    pub d: usize,
    pub layers: Vec<GcnLayer>,
}

impl Gcn {
    pub fn new<R: Rng>(ps: &mut ParamSet, d: usize, n_layers: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("gcn.layer{l}");
            layers.push(GcnLayer {
                proj: Ffn::new(ps, &format!("{p}.proj"), &[d, d], Activation::Identity, rng)?,
                att_w: ps.add_uniform(format!("{p}.att.W"), &[2 * d, d], 2 * d, rng)?,
                att_v: ps.add_uniform(format!("{p}.att.w"), &[d, 1], d, rng)?,
            });
        }
        Ok(Self { d, layers })
    }

    /// `g'(v) = g(v) + sum_{v1 in N(v)} alpha(v1, v) P(g(v1))` with
    /// `beta(v1, v) = w' tanh(W [g(v1); g(v)])`.
    pub fn layer<'g>(
        &self,
        g: &'g Graph,
        layer: &GcnLayer,
        k: usize,
        nodes: &Var<'g>,
    ) -> Result<Var<'g>> {
        let nb = gcn_neighbors(k);
        if nb.is_empty() {
            return Ok(*nodes);
        }
        let n = nodes.shape()[0];
        let src: Vec<usize> = nb.iter().map(|p| p.0).collect();
        let dst: Vec<usize> = nb.iter().map(|p| p.1).collect();
        let beta = g
            .concat(&[nodes.gather_rows(&src)?, nodes.gather_rows(&dst)?])?
            .matmul(&g.param(layer.att_w))?
            .tanh()?
            .matmul(&g.param(layer.att_v))?
            .reshape(&[nb.len()])?;
        let alpha = beta.segment_softmax(&dst, n)?;
        let agg = layer
            .proj
            .forward(g, nodes)?
            .gather_rows(&src)?
            .mul_rows(&alpha)?
            .scatter_add_rows(&dst, n)?;
        Ok(nodes.add(&agg)?)
    }

    pub fn forward<'g>(&self, g: &'g Graph, k: usize, nodes: &Var<'g>) -> Result<Var<'g>> {
        let mut x = *nodes;
        for l in &self.layers {
            x = self.layer(g, l, k, &x)?;
        }
        Ok(x)
    }
}
