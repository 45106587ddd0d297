//! Joint entity/relation model: encoder, backbone, optional higher-order
//! refinement and classification heads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use hgere_autodiff::{Activation, Graph, ParamSet, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{rel_pairs, Backbone, Reprs, SentenceInput};
use crate::corpus::{LabelSpace, Span};
use crate::encoder::{Encoder, EncoderConfig, MiniTransformer};
use crate::error::{Error, Result};
use crate::gcn::Gcn;
use crate::hypergraph::{build_hypergraph, Aggregation, Hgnn, Variant};
use crate::instance::Instance;
use crate::layers::Ffn;
use crate::mfvi::{Mfvi, MfviOutput};
use crate::store::EmbeddingStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Backbone,
    Gcn,
    Mfvi,
    Hgnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Backbone, ModelKind::Gcn, ModelKind::Mfvi, ModelKind::Hgnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Backbone => "backbone",
            ModelKind::Gcn => "gcn",
            ModelKind::Mfvi => "mfvi",
            ModelKind::Hgnn => "hgnn",
        }
    }

    pub fn uses_variant(self) -> bool {
        matches!(self, ModelKind::Mfvi | ModelKind::Hgnn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?} (backbone|gcn|mfvi|hgnn)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub kind: ModelKind,
    pub variant: Variant,
    pub aggregation: Aggregation,
    /// HGNN/GCN layers or MFVI iterations.
    pub layers: usize,
    /// Node representation size.
    pub d_repr: usize,
    /// Role projection size inside MFVI factors.
    pub d_factor: usize,
    pub gp_allow_cycle: bool,
    /// Report `Q_s + Q_o` instead of their average as the MFVI entity distribution.
    pub mfvi_raw_sum: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Hgnn,
            variant: "tersibcop".parse().expect("valid variant"),
            aggregation: Aggregation::Attn,
            layers: 3,
            d_repr: 64,
            d_factor: 32,
            gp_allow_cycle: true,
            mfvi_raw_sum: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Refiner {
    None,
    Gcn(Gcn),
    Hgnn(Hgnn),
    Mfvi(Mfvi),
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub config: JointConfig,
    pub labels: LabelSpace,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub backbone: Backbone,
    pub refiner: Refiner,
    /// Classification heads; absent for MFVI, whose unaries play that role.
    pub heads: Option<(Ffn, Ffn)>,
}

/// Scores of one sentence. MFVI yields normalized distributions, the other
/// kinds yield logits.
pub struct JointOutput<'g> {
    pub k: usize,
    /// `[K, |Ce|+1]`
    pub entity: Var<'g>,
    /// `[K(K-1), |Cr|+1]`
    pub relation: Option<Var<'g>>,
    pub normalized: bool,
    pub mfvi: Option<MfviOutput<'g>>,
}

/// Posterior probabilities of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceProbs {
    pub candidates: Vec<Span>,
    /// Row per candidate.
    pub entity: Vec<Vec<f64>>,
    /// Row per ordered pair, in relation-row order.
    pub relation: Vec<Vec<f64>>,
}

fn rows(v: &Var<'_>) -> Vec<Vec<f64>> {
    let t = v.value();
    let c = t.last_dim();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

impl JointModel {
    pub fn new<R: Rng>(
        config: &JointConfig,
        encoder: &EncoderConfig,
        labels: &LabelSpace,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ps = ParamSet::new();
        let enc = MiniTransformer::new(&mut ps, "joint.encoder", encoder, rng)?;
        Self::build(config, labels, ps, Encoder::Transformer(enc), rng)
    }

    pub fn with_store<R: Rng>(
        config: &JointConfig,
        labels: &LabelSpace,
        store: Arc<EmbeddingStore>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, labels, ParamSet::new(), Encoder::Store(store), rng)
    }

    fn build<R: Rng>(
        config: &JointConfig,
        labels: &LabelSpace,
        mut ps: ParamSet,
        encoder: Encoder,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_repr;
        if d == 0 {
            return Err(Error::Config("d_repr must be positive".into()));
        }
        if config.kind.uses_variant() && config.variant.is_empty() {
            return Err(Error::Config("hypergraph variant must be nonempty".into()));
        }
        let backbone = Backbone::new(&mut ps, encoder.d_model(), d, rng)?;
        let (ne, nr) = (labels.num_entity_labels(), labels.num_relation_labels());
        let refiner = match config.kind {
            ModelKind::Backbone => Refiner::None,
            ModelKind::Gcn => Refiner::Gcn(Gcn::new(&mut ps, d, config.layers, rng)?),
            ModelKind::Hgnn => Refiner::Hgnn(Hgnn::new(
                &mut ps,
                d,
                config.layers,
                config.variant,
                config.aggregation,
                rng,
            )?),
            ModelKind::Mfvi => {
                let mut m = Mfvi::new(
                    &mut ps,
                    d,
                    config.d_factor,
                    ne,
                    nr,
                    config.variant,
                    config.layers,
                    config.gp_allow_cycle,
                    rng,
                )?;
                m.raw_sum = config.mfvi_raw_sum;
                Refiner::Mfvi(m)
            }
        };
        let heads = if config.kind == ModelKind::Mfvi {
            None
        } else {
            Some((
                Ffn::new(&mut ps, "head.entity", &[2 * d, d, ne], Activation::Identity, rng)?,
                Ffn::new(&mut ps, "head.relation", &[d, d, nr], Activation::Identity, rng)?,
            ))
        };
        Ok(Self {
            config: config.clone(),
            labels: labels.clone(),
            params: ps,
            encoder,
            backbone,
            refiner,
            heads,
        })
    }

    /// Heads and refinement on top of given backbone representations.
    pub fn forward_reprs<'g>(&self, g: &'g Graph, reprs: &Reprs<'g>) -> Result<JointOutput<'g>> {
        let k = reprs.k;
        if let Refiner::Mfvi(m) = &self.refiner {
            let out = m.infer(g, k, &reprs.h_s, &reprs.h_o, reprs.h_r.as_ref())?;
            let last = out.last().clone();
            return Ok(JointOutput {
                k,
                entity: out.entity,
                relation: last.q_r,
                normalized: true,
                mfvi: Some(out),
            });
        }
        let (g_s, g_o, g_r) = match &self.refiner {
            Refiner::None | Refiner::Mfvi(_) => (reprs.h_s, reprs.h_o, reprs.h_r),
            Refiner::Gcn(_) | Refiner::Hgnn(_) if k < 2 => (reprs.h_s, reprs.h_o, None),
            refiner => {
                let h_r = reprs.h_r.expect("relations exist for K >= 2");
                let nodes = g.concat_rows(&[reprs.h_s, reprs.h_o, h_r])?;
                let out = match refiner {
                    Refiner::Gcn(gcn) => gcn.forward(g, k, &nodes)?,
                    Refiner::Hgnn(h) => {
                        let hg = build_hypergraph(k, h.variant, self.config.gp_allow_cycle);
                        h.forward(g, &hg, &nodes)?
                    }
                    _ => unreachable!(),
                };
                (
                    out.slice_rows(0, k)?,
                    out.slice_rows(k, k)?,
                    Some(out.slice_rows(2 * k, k * (k - 1))?),
                )
            }
        };
        let (ent_head, rel_head) = self.heads.as_ref().expect("heads exist outside MFVI");
        let entity = ent_head.forward(g, &g.concat(&[g_s, g_o])?)?;
        let relation = g_r.map(|r| rel_head.forward(g, &r)).transpose()?;
        Ok(JointOutput {
            k,
            entity,
            relation,
            normalized: false,
            mfvi: None,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, input: &SentenceInput<'_>) -> Result<JointOutput<'g>> {
        let reprs = self.backbone.forward(g, &self.encoder, input)?;
        self.forward_reprs(g, &reprs)
    }

    /// Gold label ids for candidates and their ordered pairs.
    pub fn targets(inst: &Instance, candidates: &[Span]) -> (Vec<usize>, Vec<usize>) {
        let ent = candidates.iter().map(|s| inst.entity_label(*s)).collect();
        let rel = rel_pairs(candidates.len())
            .into_iter()
            .map(|(i, j)| inst.relation_label(candidates[i], candidates[j]))
            .collect();
        (ent, rel)
    }

    /// Summed entity and relation cross-entropy.
    pub fn loss_of<'g>(out: &JointOutput<'g>, ent_gold: &[usize], rel_gold: &[usize]) -> Result<Var<'g>> {
        let mut loss = if out.normalized {
            let last = out.mfvi.as_ref().expect("normalized output carries posteriors").last();
            last.q_s.add(&last.q_o)?.scale(0.5)?.nll(ent_gold)?
        } else {
            out.entity.cross_entropy(ent_gold)?
        };
        if let Some(r) = out.relation {
            let l = if out.normalized {
                r.nll(rel_gold)?
            } else {
                r.cross_entropy(rel_gold)?
            };
            loss = loss.add(&l)?;
        }
        Ok(loss)
    }

    pub fn input<'a>(inst: &'a Instance, candidates: &'a [Span]) -> SentenceInput<'a> {
        SentenceInput {
            doc_id: &inst.doc_id,
            sent_idx: inst.sent_idx,
            window: &inst.window,
            candidates,
        }
    }

    pub fn loss<'g>(&self, g: &'g Graph, inst: &Instance, candidates: &[Span]) -> Result<Option<Var<'g>>> {
        if candidates.is_empty() {
            return Ok(None);
        }
        let out = self.forward(g, &Self::input(inst, candidates))?;
        let (ent, rel) = Self::targets(inst, candidates);
        Ok(Some(Self::loss_of(&out, &ent, &rel)?))
    }

    pub fn probabilities(&self, inst: &Instance, candidates: &[Span]) -> Result<SentenceProbs> {
        if candidates.is_empty() {
            return Ok(SentenceProbs {
                candidates: Vec::new(),
                entity: Vec::new(),
                relation: Vec::new(),
            });
        }
        let g = Graph::inference(&self.params);
        let out = self.forward(&g, &Self::input(inst, candidates))?;
        let (entity, relation) = if out.normalized {
            (out.entity, out.relation)
        } else {
            (out.entity.softmax()?, out.relation.map(|r| r.softmax()).transpose()?)
        };
        Ok(SentenceProbs {
            candidates: candidates.to_vec(),
            entity: rows(&entity),
            relation: relation.as_ref().map(rows).unwrap_or_default(),
        })
    }
}
