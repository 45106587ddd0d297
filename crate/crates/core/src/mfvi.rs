//! Higher-order CRF baseline with mean-field variational inference.

use hgere_autodiff::{Activation, Graph, ParamSet, Var};
use rand::Rng;

use crate::backbone::{rel_index, rel_pairs};
use crate::error::Result;
use crate::hypergraph::{EdgeType, Variant};
use crate::layers::Ffn;

/// Ordered factor triples `(i, j, k)` of a relation-relation type with the
/// relation rows of their `a` and `b` endpoints.
pub fn factor_triples(t: EdgeType, k: usize, gp_allow_cycle: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let pair = match t {
                    EdgeType::Ter => None,
                    EdgeType::Sib if i != j && i != l && j != l => {
                        Some((rel_index(i, j, k), rel_index(i, l, k)))
                    }
                    EdgeType::Cop if i != j && l != j && i != l => {
                        Some((rel_index(i, j, k), rel_index(l, j, k)))
                    }
                    EdgeType::Gp if i != j && j != l && (gp_allow_cycle || l != i) => {
                        Some((rel_index(i, j, k), rel_index(j, l, k)))
                    }
                    _ => None,
                };
                out.extend(pair);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FactorParams {
    pub roles: Vec<Ffn>,
    pub table: Ffn,
}

#[derive(Debug, Clone)]
pub struct Mfvi {
    pub variant: Variant,
    pub iterations: usize,
    pub raw_sum: bool,
    pub gp_allow_cycle: bool,
    pub n_ent: usize,
    pub n_rel: usize,
    pub unary_s: Ffn,
    pub unary_o: Ffn,
    pub unary_r: Ffn,
    pub factors: Vec<(EdgeType, FactorParams)>,
}

#[derive(Debug, Clone)]
pub struct Posteriors<'g> {
    pub q_s: Var<'g>,
    pub q_o: Var<'g>,
    pub q_r: Option<Var<'g>>,
}

#[derive(Debug, Clone)]
pub struct MfviOutput<'g> {
    /// Posteriors after each iteration; index 0 is the normalized unaries.
    pub history: Vec<Posteriors<'g>>,
    /// Per-span entity distribution `[K, |Ce|+1]`.
    pub entity: Var<'g>,
}

impl<'g> MfviOutput<'g> {
    pub fn last(&self) -> &Posteriors<'g> {
        self.history.last().expect("history is never empty")
    }
}

/// Unary and factor scores of one sentence.
pub struct Scores<'g> {
    pub u_s: Var<'g>,
    pub u_o: Var<'g>,
    pub u_r: Option<Var<'g>>,
    /// `[K(K-1), E*E*R]`, laid out `(e1, e2, r)` row-major.
    pub ter: Option<Var<'g>>,
    /// Per type: `(a rows, b rows, table [T, R*R])`.
    pub pairwise: Vec<(Vec<usize>, Vec<usize>, Var<'g>)>,
}

impl Mfvi {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        d: usize,
        d_factor: usize,
        n_ent: usize,
        n_rel: usize,
        variant: Variant,
        iterations: usize,
        gp_allow_cycle: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let id = Activation::Identity;
        let unary_s = Ffn::new(ps, "mfvi.unary.s", &[d, n_ent], id, rng)?;
        let unary_o = Ffn::new(ps, "mfvi.unary.o", &[d, n_ent], id, rng)?;
        let unary_r = Ffn::new(ps, "mfvi.unary.r", &[d, n_rel], id, rng)?;
        let mut factors = Vec::new();
        for t in variant.types() {
            let (names, size): (&[&str], usize) = if t == EdgeType::Ter {
                (&["s", "o", "r"], n_ent * n_ent * n_rel)
            } else {
                (&["a", "b"], n_rel * n_rel)
            };
            let mut roles = Vec::new();
            for n in names {
                roles.push(Ffn::new(
                    ps,
                    &format!("mfvi.{}.{n}", t.name()),
                    &[d, d_factor],
                    Activation::Gelu,
                    rng,
                )?);
            }
            let table = Ffn::new(ps, &format!("mfvi.{}.f", t.name()), &[d_factor, size], id, rng)?;
            factors.push((t, FactorParams { roles, table }));
        }
        Ok(Self {
            variant,
            iterations,
            raw_sum: false,
            gp_allow_cycle,
            n_ent,
            n_rel,
            unary_s,
            unary_o,
            unary_r,
            factors,
        })
    }

    pub fn scores<'g>(
        &self,
        g: &'g Graph,
        k: usize,
        h_s: &Var<'g>,
        h_o: &Var<'g>,
        h_r: Option<&Var<'g>>,
    ) -> Result<Scores<'g>> {
        let u_s = self.unary_s.forward(g, h_s)?;
        let u_o = self.unary_o.forward(g, h_o)?;
        let mut out = Scores {
            u_s,
            u_o,
            u_r: None,
            ter: None,
            pairwise: Vec::new(),
        };
        let Some(h_r) = h_r else {
            return Ok(out);
        };
        out.u_r = Some(self.unary_r.forward(g, h_r)?);
        let pairs = rel_pairs(k);
        let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        for (t, p) in &self.factors {
            if *t == EdgeType::Ter {
                let hs = p.roles[0].forward(g, h_s)?.gather_rows(&is)?;
                let ho = p.roles[1].forward(g, h_o)?.gather_rows(&js)?;
                let hr = p.roles[2].forward(g, h_r)?;
                out.ter = Some(p.table.forward(g, &hs.hadamard(&ho)?.hadamard(&hr)?)?);
            } else {
                let tri = factor_triples(*t, k, self.gp_allow_cycle);
                if tri.is_empty() {
                    continue;
                }
                let a: Vec<usize> = tri.iter().map(|x| x.0).collect();
                let b: Vec<usize> = tri.iter().map(|x| x.1).collect();
                let ha = p.roles[0].forward(g, h_r)?.gather_rows(&a)?;
                let hb = p.roles[1].forward(g, h_r)?.gather_rows(&b)?;
                let table = p.table.forward(g, &ha.hadamard(&hb)?)?;
                out.pairwise.push((a, b, table));
            }
        }
        Ok(out)
    }

    /// One synchronous update of all posteriors.
    pub fn iterate<'g>(
        &self,
        k: usize,
        scores: &Scores<'g>,
        q: &Posteriors<'g>,
    ) -> Result<Posteriors<'g>> {
        let (e, r) = (self.n_ent, self.n_rel);
        let (Some(u_r), Some(q_r)) = (scores.u_r, q.q_r) else {
            return Ok(Posteriors {
                q_s: scores.u_s.softmax()?,
                q_o: scores.u_o.softmax()?,
                q_r: None,
            });
        };
        let pairs = rel_pairs(k);
        let nr = pairs.len();
        let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut logit_s = scores.u_s;
        let mut logit_o = scores.u_o;
        let mut logit_r = u_r;
        if let Some(f) = scores.ter {
            let qs_i = q.q_s.gather_rows(&is)?;
            let qo_j = q.q_o.gather_rows(&js)?;
            let t = qs_i.row_outer(&qo_j)?.row_vecmat(&f, r)?;
            let a = f.row_matvec(&q_r, e * e)?;
            let f_s = a.row_matvec(&qo_j, e)?.scatter_add_rows(&is, k)?;
            let f_o = qs_i.row_vecmat(&a, e)?.scatter_add_rows(&js, k)?;
            logit_s = logit_s.add(&f_s)?;
            logit_o = logit_o.add(&f_o)?;
            logit_r = logit_r.add(&t)?;
        }
        for (a, b, f) in &scores.pairwise {
            let to_a = f.row_matvec(&q_r.gather_rows(b)?, r)?.scatter_add_rows(a, nr)?;
            let to_b = q_r.gather_rows(a)?.row_vecmat(f, r)?.scatter_add_rows(b, nr)?;
            logit_r = logit_r.add(&to_a)?.add(&to_b)?;
        }
        Ok(Posteriors {
            q_s: logit_s.softmax()?,
            q_o: logit_o.softmax()?,
            q_r: Some(logit_r.softmax()?),
        })
    }

    pub fn infer<'g>(
        &self,
        g: &'g Graph,
        k: usize,
        h_s: &Var<'g>,
        h_o: &Var<'g>,
        h_r: Option<&Var<'g>>,
    ) -> Result<MfviOutput<'g>> {
        let scores = self.scores(g, k, h_s, h_o, h_r)?;
        self.run(k, &scores)
    }

    pub fn run<'g>(&self, k: usize, scores: &Scores<'g>) -> Result<MfviOutput<'g>> {
        let q0 = Posteriors {
            q_s: scores.u_s.softmax()?,
            q_o: scores.u_o.softmax()?,
            q_r: scores.u_r.map(|u| u.softmax()).transpose()?,
        };
        let mut history = vec![q0];
        for _ in 0..self.iterations {
            let next = self.iterate(k, scores, history.last().unwrap())?;
            history.push(next);
        }
        let last = history.last().unwrap();
        let sum = last.q_s.add(&last.q_o)?;
        let entity = if self.raw_sum { sum } else { sum.scale(0.5)? };
        Ok(MfviOutput { history, entity })
    }
}
