//! Span existence scoring and top-K candidate selection.

use std::io::Write;
use std::path::Path;

use hgere_autodiff::{Activation, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_spans, Span};
use crate::encoder::{Encoder, EncoderConfig, MiniTransformer};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::layers::Ffn;
use crate::metrics::{Counts, Prf};
use crate::packing::build_pruner_packing;
use crate::store::{EmbeddingStore, PackKind, StoreKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrunerConfig {
    pub lambda: f64,
    pub l_min: usize,
    pub l_max: usize,
    /// Maximum span length in tokens.
    pub max_span_len: usize,
    pub d_m: usize,
    pub d_biaf: usize,
    pub d_span: usize,
    /// Maximum number of levitated pairs per packed group.
    pub group_cap: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            l_min: 3,
            l_max: 18,
            max_span_len: 8,
            d_m: 32,
            d_biaf: 32,
            d_span: 64,
            group_cap: 128,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "l_min {} exceeds l_max {}",
                self.l_min, self.l_max
            )));
        }
        if self.max_span_len == 0 || self.group_cap == 0 {
            return Err(Error::Config("max_span_len and group_cap must be positive".into()));
        }
        Ok(())
    }

    /// K = max(l_min, min(ceil(lambda * n), l_max)).
    pub fn num_candidates(&self, n: usize) -> usize {
        let k = (self.lambda * n as f64).ceil() as usize;
        self.l_min.max(k.min(self.l_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub span: Span,
    pub score: f64,
}

/// The `min(K, m)` highest-scoring spans, returned in (start, end) order.
/// Equal scores prefer the earlier span.
pub fn select_topk(spans: &[Span], scores: &[f64], n: usize, cfg: &PrunerConfig) -> Vec<Candidate> {
    assert_eq!(spans.len(), scores.len(), "one score per span");
    let k = cfg.num_candidates(n).min(spans.len());
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| spans[a].cmp(&spans[b]))
    });
    let mut out: Vec<Candidate> = order[..k]
        .iter()
        .map(|&i| Candidate {
            span: spans[i],
            score: scores[i],
        })
        .collect();
    out.sort_by_key(|c| c.span);
    out
}

/// Unlabeled span matching of candidates against gold spans.
pub fn span_counts(candidates: &[Span], gold: &[Span]) -> Counts {
    Counts::of(candidates, gold)
}

pub fn recall_eval<'a>(pairs: impl IntoIterator<Item = (&'a [Span], &'a [Span])>) -> (Counts, Prf) {
    let mut c = Counts::default();
    for (cand, gold) in pairs {
        c.add(span_counts(cand, gold));
    }
    (c, c.prf())
}

#[derive(Debug, Clone)]
pub struct Pruner {
    pub config: PrunerConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    ffn_st: Ffn,
    ffn_ed: Ffn,
    w_p: ParamId,
    ffn_q: Ffn,
    ffn_attn: Ffn,
    score: Ffn,
}

/// Span scores for one instance, aligned with `spans`.
pub struct SpanScores<'g> {
    pub spans: Vec<Span>,
    pub logits: Option<Var<'g>>,
}

impl Pruner {
    pub fn new<R: Rng>(config: &PrunerConfig, encoder: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut ps = ParamSet::new();
        let enc = MiniTransformer::new(&mut ps, "pruner.encoder", encoder, rng)?;
        Self::build(config, ps, Encoder::Transformer(enc), rng)
    }

    /// A pruner whose hidden states come from a precomputed store.
    pub fn with_store<R: Rng>(
        config: &PrunerConfig,
        store: std::sync::Arc<EmbeddingStore>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, ParamSet::new(), Encoder::Store(store), rng)
    }

    fn build<R: Rng>(config: &PrunerConfig, mut ps: ParamSet, encoder: Encoder, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = encoder.d_model();
        let c = config;
        let ffn_st = Ffn::new(&mut ps, "pruner.ffn_st", &[2 * d, c.d_m], Activation::Gelu, rng)?;
        let ffn_ed = Ffn::new(&mut ps, "pruner.ffn_ed", &[2 * d, c.d_m], Activation::Gelu, rng)?;
        let w_p = ps.add_uniform(
            "pruner.w_p",
            &[c.d_m + 1, c.d_biaf, c.d_m + 1],
            c.d_m + 1,
            rng,
        )?;
        let ffn_q = Ffn::new(&mut ps, "pruner.ffn_q", &[d, 1], Activation::Identity, rng)?;
        let ffn_attn = Ffn::new(
            &mut ps,
            "pruner.ffn_attn",
            &[c.d_biaf + d, c.d_span],
            Activation::Gelu,
            rng,
        )?;
        let score = Ffn::new(&mut ps, "pruner.score", &[c.d_span, 1], Activation::Identity, rng)?;
        Ok(Self {
            config: config.clone(),
            params: ps,
            encoder,
            ffn_st,
            ffn_ed,
            w_p,
            ffn_q,
            ffn_attn,
            score,
        })
    }

    pub fn w_p(&self) -> ParamId {
        self.w_p
    }

    pub fn spans_for(&self, inst: &Instance) -> Vec<Span> {
        enumerate_spans(inst.len(), self.config.max_span_len)
    }

    /// Span representations `[m, d_span]` from encoder states of one packed
    /// group. `text` is `[n_text, d]`, `opens`/`closes` are `[m, d]` and
    /// `bounds` gives each span's token rows within `text`.
    pub fn span_representation<'g>(
        &self,
        g: &'g Graph,
        text: &Var<'g>,
        opens: &Var<'g>,
        closes: &Var<'g>,
        bounds: &[(usize, usize)],
    ) -> Result<Var<'g>> {
        let m = bounds.len();
        let starts: Vec<usize> = bounds.iter().map(|b| b.0).collect();
        let ends: Vec<usize> = bounds.iter().map(|b| b.1).collect();
        let ones = g.constant(Tensor::ones(&[m, 1]));
        let h_st = self
            .ffn_st
            .forward(g, &g.concat(&[text.gather_rows(&starts)?, *opens])?)?;
        let h_ed = self
            .ffn_ed
            .forward(g, &g.concat(&[text.gather_rows(&ends)?, *closes])?)?;
        let h_biaf = g
            .concat(&[h_st, ones])?
            .biaffine(&g.param(self.w_p), &g.concat(&[h_ed, ones])?)?;

        let mut flat = Vec::new();
        let mut seg = Vec::new();
        for (k, &(s, e)) in bounds.iter().enumerate() {
            for t in s..=e {
                flat.push(t);
                seg.push(k);
            }
        }
        let n_text = text.shape()[0];
        let q = self.ffn_q.forward(g, text)?.reshape(&[n_text])?;
        let w = q.gather_rows(&flat)?.segment_softmax(&seg, m)?;
        let h_attn = text
            .gather_rows(&flat)?
            .mul_rows(&w)?
            .scatter_add_rows(&seg, m)?;
        self.ffn_attn.forward(g, &g.concat(&[h_biaf, h_attn])?)
    }

    /// Existence logits for every enumerated span of the center sentence.
    pub fn forward<'g>(&self, g: &'g Graph, inst: &Instance) -> Result<SpanScores<'g>> {
        let spans = self.spans_for(inst);
        if spans.is_empty() {
            return Ok(SpanScores { spans, logits: None });
        }
        let window = &inst.window;
        let groups = build_pruner_packing(window, &spans, self.config.group_cap)?;
        let n_text = window.len();
        let mut parts = Vec::with_capacity(groups.len());
        for (gi, seq) in groups.iter().enumerate() {
            let key = StoreKey {
                doc_id: inst.doc_id.clone(),
                sent_idx: inst.sent_idx,
                kind: PackKind::Pruner,
                unit: gi,
            };
            let states = self.encoder.encode(g, &window.tokens, seq, &key)?;
            let m = seq.lev_spans.len();
            let text = states.slice_rows(0, n_text)?;
            let opens = states.slice_rows(n_text, m)?;
            let closes = states.slice_rows(n_text + m, m)?;
            let bounds: Vec<(usize, usize)> = seq
                .lev_spans
                .iter()
                .map(|&j| (window.pos(spans[j].start), window.pos(spans[j].end)))
                .collect();
            let h = self.span_representation(g, &text, &opens, &closes, &bounds)?;
            parts.push(self.score.forward(g, &h)?.reshape(&[m])?);
        }
        let logits = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts)?
        };
        Ok(SpanScores {
            spans,
            logits: Some(logits),
        })
    }

    /// Summed BCE of span existence against the gold entity spans.
    pub fn loss<'g>(&self, g: &'g Graph, inst: &Instance) -> Result<Option<Var<'g>>> {
        let out = self.forward(g, inst)?;
        let Some(logits) = out.logits else {
            return Ok(None);
        };
        let gold = inst.gold_spans();
        let y: Vec<f64> = out
            .spans
            .iter()
            .map(|s| f64::from(u8::from(gold.binary_search(s).is_ok())))
            .collect();
        Ok(Some(logits.sigmoid()?.bce(&y)?))
    }

    /// Probabilities for all enumerated spans.
    pub fn score_spans(&self, inst: &Instance) -> Result<(Vec<Span>, Vec<f64>)> {
        let g = Graph::inference(&self.params);
        let out = self.forward(&g, inst)?;
        let probs = match out.logits {
            Some(l) => l.sigmoid()?.value().data().to_vec(),
            None => Vec::new(),
        };
        Ok((out.spans, probs))
    }

    pub fn predict(&self, inst: &Instance) -> Result<Vec<Candidate>> {
        let (spans, probs) = self.score_spans(inst)?;
        Ok(select_topk(&spans, &probs, inst.len(), &self.config))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub doc_id: String,
    pub sent_idx: usize,
    /// `[start, end, score]` triples.
    pub candidates: Vec<(usize, usize, f64)>,
}

impl CandidateRecord {
    pub fn new(inst: &Instance, cands: &[Candidate]) -> Self {
        Self {
            doc_id: inst.doc_id.clone(),
            sent_idx: inst.sent_idx,
            candidates: cands
                .iter()
                .map(|c| (c.span.start, c.span.end, c.score))
                .collect(),
        }
    }

    pub fn spans(&self) -> Vec<Candidate> {
        self.candidates
            .iter()
            .map(|&(s, e, score)| Candidate {
                span: Span::new(s, e),
                score,
            })
            .collect()
    }
}

pub fn write_candidates(path: &Path, records: &[CandidateRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("candidate records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn parse_candidates(text: &str) -> Result<Vec<CandidateRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&text)
}
