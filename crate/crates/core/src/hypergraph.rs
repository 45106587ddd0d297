//! Subject/object/relation hypergraph and its message-passing network.

use std::fmt;
use std::str::FromStr;

use hgere_autodiff::{Activation, Graph, ParamId, ParamSet, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::rel_index;
use crate::error::{Error, Result};
use crate::layers::Ffn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    Ter,
    Sib,
    Cop,
    Gp,
}

impl EdgeType {
    pub const ALL: [EdgeType; 4] = [EdgeType::Ter, EdgeType::Sib, EdgeType::Cop, EdgeType::Gp];

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::Ter => "ter",
            EdgeType::Sib => "sib",
            EdgeType::Cop => "cop",
            EdgeType::Gp => "gp",
        }
    }
}

/// Set of hyperedge types, written as their names concatenated in canonical
/// order (`ter`, `sib`, `cop`, `gp`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Variant {
    pub ter: bool,
    pub sib: bool,
    pub cop: bool,
    pub gp: bool,
}

impl Variant {
    /// The eleven hypergraph configurations compared in the experiments.
    pub const NAMED: [&'static str; 11] = [
        "ter",
        "cop",
        "sib",
        "gp",
        "tersib",
        "tercop",
        "tergp",
        "tersibcop",
        "tersibgp",
        "tercopgp",
        "tersibcopgp",
    ];

    pub fn full() -> Self {
        Self {
            ter: true,
            sib: true,
            cop: true,
            gp: true,
        }
    }

    pub fn has(&self, t: EdgeType) -> bool {
        match t {
            EdgeType::Ter => self.ter,
            EdgeType::Sib => self.sib,
            EdgeType::Cop => self.cop,
            EdgeType::Gp => self.gp,
        }
    }

    pub fn types(&self) -> Vec<EdgeType> {
        EdgeType::ALL.into_iter().filter(|t| self.has(*t)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.types().is_empty()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.types() {
            f.write_str(t.name())?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        let mut rest = s;
        let mut last: Option<EdgeType> = None;
        while !rest.is_empty() {
            let t = EdgeType::ALL
                .into_iter()
                .find(|t| rest.starts_with(t.name()))
                .ok_or_else(|| Error::Config(format!("bad variant {s:?}: unknown token at {rest:?}")))?;
            if last.is_some_and(|l| l >= t) {
                return Err(Error::Config(format!(
                    "bad variant {s:?}: edge types must appear once, in the order ter, sib, cop, gp"
                )));
            }
            match t {
                EdgeType::Ter => v.ter = true,
                EdgeType::Sib => v.sib = true,
                EdgeType::Cop => v.cop = true,
                EdgeType::Gp => v.gp = true,
            }
            last = Some(t);
            rest = &rest[t.name().len()..];
        }
        if v.is_empty() {
            return Err(Error::Config("variant must name at least one edge type".into()));
        }
        Ok(v)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Attn,
    Max,
    Sum,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn" => Ok(Aggregation::Attn),
            "max" => Ok(Aggregation::Max),
            "sum" => Ok(Aggregation::Sum),
            _ => Err(Error::Config(format!("unknown aggregation {s:?} (attn|max|sum)"))),
        }
    }
}

/// A hyperedge over stacked node indices. Ter edges list `[r, s, o]`;
/// relation-relation edges list `[a, b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub kind: EdgeType,
    /// Candidate indices naming the edge: `(i, j)` for ter, `(i, j, k)` otherwise.
    pub index: Vec<usize>,
    pub nodes: Vec<usize>,
}

/// Nodes are stacked as `K` subjects, `K` objects, then `K(K-1)` relations.
#[derive(Debug, Clone)]
pub struct Hypergraph {
    pub k: usize,
    pub variant: Variant,
    pub edges: Vec<Edge>,
    /// `(edge, node)` incidence pairs in edge order.
    pub incidence: Vec<(usize, usize)>,
}

impl Hypergraph {
    pub fn subject(&self, i: usize) -> usize {
        i
    }

    pub fn object(&self, j: usize) -> usize {
        self.k + j
    }

    pub fn relation(&self, i: usize, j: usize) -> usize {
        2 * self.k + rel_index(i, j, self.k)
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.k + self.num_relations()
    }

    pub fn num_relations(&self) -> usize {
        self.k * self.k.saturating_sub(1)
    }

    pub fn count(&self, t: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.kind == t).count()
    }

    pub fn edges_of(&self, t: EdgeType) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.kind == t)
    }

    /// Edges incident to `node`.
    pub fn incident(&self, node: usize) -> Vec<usize> {
        self.incidence
            .iter()
            .filter(|(_, v)| *v == node)
            .map(|(e, _)| *e)
            .collect()
    }
}

pub fn build_hypergraph(k: usize, variant: Variant, gp_allow_cycle: bool) -> Hypergraph {
    let mut hg = Hypergraph {
        k,
        variant,
        edges: Vec::new(),
        incidence: Vec::new(),
    };
    let r = |i: usize, j: usize| 2 * k + rel_index(i, j, k);
    let mut edges = Vec::new();
    if variant.ter {
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                edges.push(Edge {
                    kind: EdgeType::Ter,
                    index: vec![i, j],
                    nodes: vec![r(i, j), i, k + j],
                });
            }
        }
    }
    let triples = |keep: &dyn Fn(usize, usize, usize) -> bool| {
        let mut out = Vec::new();
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    if keep(i, j, l) {
                        out.push((i, j, l));
                    }
                }
            }
        }
        out
    };
    let mut rr = |kind: EdgeType, list: Vec<(usize, usize, usize)>, b: &dyn Fn(usize, usize, usize) -> usize| {
        for (i, j, l) in list {
            edges.push(Edge {
                kind,
                index: vec![i, j, l],
                nodes: vec![r(i, j), b(i, j, l)],
            });
        }
    };
    if variant.sib {
        rr(
            EdgeType::Sib,
            triples(&|i, j, l| j != i && l != i && j < l),
            &|i, _, l| r(i, l),
        );
    }
    if variant.cop {
        rr(
            EdgeType::Cop,
            triples(&|i, j, l| i != j && l != j && i < l),
            &|_, j, l| r(l, j),
        );
    }
    if variant.gp {
        rr(
            EdgeType::Gp,
            triples(&|i, j, l| i != j && j != l && (gp_allow_cycle || l != i)),
            &|_, j, l| r(j, l),
        );
    }
    for (e, edge) in edges.iter().enumerate() {
        for &v in &edge.nodes {
            hg.incidence.push((e, v));
        }
    }
    hg.edges = edges;
    hg
}

/// Role projections and message FFN for one edge type in one layer.
#[derive(Debug, Clone)]
pub struct EdgeParams {
    /// `[r, s, o]` for ter, `[a, b]` for relation-relation edges.
    pub roles: Vec<Ffn>,
    pub message: Ffn,
}

#[derive(Debug, Clone)]
pub struct HgnnLayer {
    pub edges: Vec<(EdgeType, EdgeParams)>,
    /// `W: [2d, d_att]` and `w: [d_att, 1]`, shared across edge types.
    pub att_w: ParamId,
    pub att_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct Hgnn {
    pub d: usize,
    pub variant: Variant,
    pub aggregation: Aggregation,
    pub layers: Vec<HgnnLayer>,
}

impl Hgnn {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        d: usize,
        n_layers: usize,
        variant: Variant,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Result<Self> {
        if variant.is_empty() {
            return Err(Error::Config("hypergraph variant must be nonempty".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("hgnn.layer{l}");
            let mut edges = Vec::new();
            for t in variant.types() {
                let names: &[&str] = if t == EdgeType::Ter {
                    &["r", "s", "o"]
                } else {
                    &["a", "b"]
                };
                let mut roles = Vec::new();
                for n in names {
                    roles.push(Ffn::new(
                        ps,
                        &format!("{p}.{}.{n}", t.name()),
                        &[d, d],
                        Activation::Gelu,
                        rng,
                    )?);
                }
                let message = Ffn::new(
                    ps,
                    &format!("{p}.{}.e", t.name()),
                    &[d, d],
                    Activation::Identity,
                    rng,
                )?;
                edges.push((t, EdgeParams { roles, message }));
            }
            let att_w = ps.add_uniform(format!("{p}.att.W"), &[2 * d, d], 2 * d, rng)?;
            let att_v = ps.add_uniform(format!("{p}.att.w"), &[d, 1], d, rng)?;
            layers.push(HgnnLayer {
                edges,
                att_w,
                att_v,
            });
        }
        Ok(Self {
            d,
            variant,
            aggregation,
            layers,
        })
    }

    /// Messages of every edge, `[E, d]` in edge order.
    pub fn messages<'g>(
        &self,
        g: &'g Graph,
        layer: &HgnnLayer,
        hg: &Hypergraph,
        nodes: &Var<'g>,
    ) -> Result<Option<Var<'g>>> {
        let mut parts = Vec::new();
        for (t, p) in &layer.edges {
            let edges: Vec<&Edge> = hg.edges_of(*t).map(|(_, e)| e).collect();
            if edges.is_empty() {
                continue;
            }
            let mut prod: Option<Var<'g>> = None;
            for (role, ffn) in p.roles.iter().enumerate() {
                let idx: Vec<usize> = edges.iter().map(|e| e.nodes[role]).collect();
                let h = ffn.forward(g, &nodes.gather_rows(&idx)?)?;
                prod = Some(match prod {
                    None => h,
                    Some(acc) => acc.hadamard(&h)?,
                });
            }
            parts.push(p.message.forward(g, &prod.expect("at least one role"))?);
        }
        Ok(match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(g.concat_rows(&parts)?),
        })
    }

    /// Attention logits `beta(e, v)` for every incidence pair.
    pub fn attention_logits<'g>(
        &self,
        g: &'g Graph,
        layer: &HgnnLayer,
        nodes: &Var<'g>,
        msgs: &Var<'g>,
        incidence: &[(usize, usize)],
    ) -> Result<Var<'g>> {
        let e_idx: Vec<usize> = incidence.iter().map(|p| p.0).collect();
        let v_idx: Vec<usize> = incidence.iter().map(|p| p.1).collect();
        let x = g.concat(&[nodes.gather_rows(&v_idx)?, msgs.gather_rows(&e_idx)?])?;
        Ok(x
            .matmul(&g.param(layer.att_w))?
            .tanh()?
            .matmul(&g.param(layer.att_v))?
            .reshape(&[incidence.len()])?)
    }

    pub fn layer<'g>(
        &self,
        g: &'g Graph,
        layer: &HgnnLayer,
        hg: &Hypergraph,
        nodes: &Var<'g>,
    ) -> Result<Var<'g>> {
        let Some(msgs) = self.messages(g, layer, hg, nodes)? else {
            return Ok(*nodes);
        };
        let n = hg.num_nodes();
        let e_idx: Vec<usize> = hg.incidence.iter().map(|p| p.0).collect();
        let v_idx: Vec<usize> = hg.incidence.iter().map(|p| p.1).collect();
        let incoming = msgs.gather_rows(&e_idx)?;
        let agg = match self.aggregation {
            Aggregation::Attn => {
                let beta = self.attention_logits(g, layer, nodes, &msgs, &hg.incidence)?;
                let alpha = beta.segment_softmax(&v_idx, n)?;
                incoming.mul_rows(&alpha)?.scatter_add_rows(&v_idx, n)?
            }
            Aggregation::Max => incoming.segment_max(&v_idx, n)?,
            Aggregation::Sum => incoming.scatter_add_rows(&v_idx, n)?,
        };
        Ok(nodes.add(&agg)?)
    }

    pub fn forward<'g>(&self, g: &'g Graph, hg: &Hypergraph, nodes: &Var<'g>) -> Result<Var<'g>> {
        let mut x = *nodes;
        for l in &self.layers {
            x = self.layer(g, l, hg, &x)?;
        }
        Ok(x)
    }
}
