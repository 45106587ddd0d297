//! First-order subject, object and relation representations from
//! subject-oriented packings.

use hgere_autodiff::{Activation, Graph, ParamSet, Var};
use rand::Rng;

use crate::corpus::ContextWindow;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::layers::Ffn;
use crate::packing::{build_joint_packing, Item};
use crate::corpus::Span;
use crate::store::{PackKind, StoreKey};

/// Row of relation `(i, j)`, `i != j`, among the `K(K-1)` ordered pairs.
pub fn rel_index(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i != j && i < k && j < k);
    i * (k - 1) + if j < i { j } else { j - 1 }
}

/// Ordered pairs `(i, j)`, `i != j`, in relation-row order.
pub fn rel_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * k.saturating_sub(1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Reprs<'g> {
    pub k: usize,
    /// `[K, d]`
    pub h_s: Var<'g>,
    /// Pooled objects `[K, d]`.
    pub h_o: Var<'g>,
    /// `[K(K-1), d]`, `None` when `K < 2`.
    pub h_r: Option<Var<'g>>,
}

/// Which subject/object rows a sentence needs: the input identity of a
/// joint forward pass.
pub struct SentenceInput<'a> {
    pub doc_id: &'a str,
    pub sent_idx: usize,
    pub window: &'a ContextWindow,
    pub candidates: &'a [Span],
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub ffn_s: Ffn,
    pub ffn_o: Ffn,
    pub ffn_r: Ffn,
    pub d: usize,
}

impl Backbone {
    pub fn new<R: Rng>(ps: &mut ParamSet, d_model: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ffn_s: Ffn::new(ps, "backbone.ffn_s", &[2 * d_model, d], Activation::Gelu, rng)?,
            ffn_o: Ffn::new(ps, "backbone.ffn_o", &[2 * d_model, d], Activation::Gelu, rng)?,
            ffn_r: Ffn::new(ps, "backbone.ffn_r", &[2 * d, d], Activation::Gelu, rng)?,
            d,
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        encoder: &Encoder,
        input: &SentenceInput<'_>,
    ) -> Result<Reprs<'g>> {
        let k = input.candidates.len();
        if k == 0 {
            return Err(Error::Config("no candidate spans".into()));
        }
        let mut subj = Vec::with_capacity(k);
        let mut obj = Vec::with_capacity(k);
        for i in 0..k {
            let seq = build_joint_packing(input.window, input.candidates, i)?;
            let key = StoreKey {
                doc_id: input.doc_id.to_string(),
                sent_idx: input.sent_idx,
                kind: PackKind::Joint,
                unit: i,
            };
            let states = encoder.encode(g, &input.window.tokens, &seq, &key)?;
            let so = seq.position_of(Item::SolidOpen).expect("solid open present");
            let sc = seq.position_of(Item::SolidClose).expect("solid close present");
            subj.push(g.concat(&[states.row(so)?, states.row(sc)?])?);
            if k > 1 {
                let base = seq.len() - 2 * (k - 1);
                let opens = states.slice_rows(base, k - 1)?;
                let closes = states.slice_rows(base + k - 1, k - 1)?;
                obj.push(g.concat(&[opens, closes])?);
            }
        }
        let h_s = self.ffn_s.forward(g, &g.concat_rows(&subj)?)?;
        if k == 1 {
            return Ok(Reprs {
                k,
                h_s,
                h_o: h_s,
                h_r: None,
            });
        }
        let h_oi = self.ffn_o.forward(g, &g.concat_rows(&obj)?)?;
        let pairs = rel_pairs(k);
        let subj_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let obj_of: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h_r = self
            .ffn_r
            .forward(g, &g.concat(&[h_s.gather_rows(&subj_rows)?, h_oi])?)?;
        let h_o = h_oi.segment_max(&obj_of, k)?;
        Ok(Reprs {
            k,
            h_s,
            h_o,
            h_r: Some(h_r),
        })
    }
}
