//! Marker-augmented sequences and their directional attention masks.

use crate::corpus::{ContextWindow, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Item {
    /// Window token at the given window position.
    Text(usize),
    SolidOpen,
    SolidClose,
    /// Levitated markers carry the index of their span in the candidate list.
    LevOpen(usize),
    LevClose(usize),
}

impl Item {
    pub fn is_levitated(&self) -> bool {
        matches!(self, Item::LevOpen(_) | Item::LevClose(_))
    }

    /// Role name used in embedding-store marker keys.
    pub fn role(&self) -> &'static str {
        match self {
            Item::Text(_) => "text",
            Item::SolidOpen => "solid_open",
            Item::SolidClose => "solid_close",
            Item::LevOpen(_) => "lev_open",
            Item::LevClose(_) => "lev_close",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub items: Vec<Item>,
    pub position_ids: Vec<usize>,
    /// Index of the partner marker for levitated items.
    pub pair: Vec<Option<usize>>,
    /// Subject span in center-sentence coordinates.
    pub subject: Option<Span>,
    /// Index of the subject in the candidate list.
    pub subject_idx: Option<usize>,
    /// Candidate index of each levitated pair, in appended order.
    pub lev_spans: Vec<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position_of(&self, item: Item) -> Option<usize> {
        self.items.iter().position(|&i| i == item)
    }

    /// Item index of the text token at window position `pos`.
    pub fn text_index(&self, pos: usize) -> Option<usize> {
        self.position_of(Item::Text(pos))
    }

    pub fn num_text(&self) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, Item::Text(_)))
            .count()
    }

    /// Structural checks on marker pairing and position ids.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("malformed packed sequence: {msg}")));
        if self.position_ids.len() != self.items.len() || self.pair.len() != self.items.len() {
            return bad("length mismatch".into());
        }
        for (k, item) in self.items.iter().enumerate() {
            match (item, self.pair[k]) {
                (Item::LevOpen(j), Some(p)) => {
                    if self.items.get(p) != Some(&Item::LevClose(*j)) || self.pair[p] != Some(k) {
                        return bad(format!("LevOpen({j}) not paired with its close"));
                    }
                }
                (Item::LevClose(j), Some(p)) => {
                    if self.items.get(p) != Some(&Item::LevOpen(*j)) || self.pair[p] != Some(k) {
                        return bad(format!("LevClose({j}) not paired with its open"));
                    }
                }
                (Item::LevOpen(_) | Item::LevClose(_), None) => {
                    return bad(format!("levitated item {k} has no partner"))
                }
                (_, Some(_)) => return bad(format!("non-levitated item {k} has a partner")),
                _ => {}
            }
        }
        let has_solid = self.items.contains(&Item::SolidOpen);
        if has_solid != self.subject.is_some() || has_solid != self.items.contains(&Item::SolidClose)
        {
            return bad("solid markers do not match the subject".into());
        }
        Ok(())
    }
}

/// Window text tokens, optionally with solid markers around `subject` (given
/// in window coordinates). Returns items and their in-line position ids.
fn text_items(window: &ContextWindow, subject: Option<Span>) -> (Vec<Item>, Vec<usize>) {
    let mut items = Vec::with_capacity(window.len() + 2);
    for p in 0..window.len() {
        if subject.is_some_and(|s| s.start == p) {
            items.push(Item::SolidOpen);
        }
        items.push(Item::Text(p));
        if subject.is_some_and(|s| s.end == p) {
            items.push(Item::SolidClose);
        }
    }
    let positions = (0..items.len()).collect();
    (items, positions)
}

fn append_levitated(
    seq: &mut PackedSequence,
    window: &ContextWindow,
    spans: &[Span],
    indices: &[usize],
) {
    let base = seq.items.len();
    let n = indices.len();
    for &j in indices {
        let pos = seq.position_ids[seq.text_index(window.pos(spans[j].start)).unwrap()];
        seq.items.push(Item::LevOpen(j));
        seq.position_ids.push(pos);
    }
    for &j in indices {
        let pos = seq.position_ids[seq.text_index(window.pos(spans[j].end)).unwrap()];
        seq.items.push(Item::LevClose(j));
        seq.position_ids.push(pos);
    }
    seq.pair.resize(base + 2 * n, None);
    for k in 0..n {
        seq.pair[base + k] = Some(base + n + k);
        seq.pair[base + n + k] = Some(base + k);
    }
    seq.lev_spans.extend_from_slice(indices);
}

fn check_spans(window: &ContextWindow, spans: &[Span]) -> Result<()> {
    for s in spans {
        if s.start > s.end || s.end >= window.center_len {
            return Err(Error::Config(format!(
                "span ({}, {}) outside the {}-token center sentence",
                s.start, s.end, window.center_len
            )));
        }
    }
    Ok(())
}

/// Neighborhood-oriented packing: spans (sorted by start, end) are cut into
/// consecutive groups of at most `group_cap` pairs; each group gets its own
/// copy of the window text followed by its opens and then its closes.
pub fn build_pruner_packing(
    window: &ContextWindow,
    spans: &[Span],
    group_cap: usize,
) -> Result<Vec<PackedSequence>> {
    if group_cap == 0 {
        return Err(Error::Config("group cap must be positive".into()));
    }
    check_spans(window, spans)?;
    let indices: Vec<usize> = (0..spans.len()).collect();
    let chunks: Vec<&[usize]> = if indices.is_empty() {
        vec![&[]]
    } else {
        indices.chunks(group_cap).collect()
    };
    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let (items, position_ids) = text_items(window, None);
        let mut seq = PackedSequence {
            pair: vec![None; items.len()],
            items,
            position_ids,
            subject: None,
            subject_idx: None,
            lev_spans: Vec::new(),
        };
        append_levitated(&mut seq, window, spans, chunk);
        out.push(seq);
    }
    Ok(out)
}

/// Subject-oriented packing: solid markers around candidate `subject_idx`,
/// levitated pairs for every other candidate in list order.
pub fn build_joint_packing(
    window: &ContextWindow,
    candidates: &[Span],
    subject_idx: usize,
) -> Result<PackedSequence> {
    let subject = *candidates.get(subject_idx).ok_or_else(|| {
        Error::Config(format!(
            "subject index {subject_idx} out of range for {} candidates",
            candidates.len()
        ))
    })?;
    check_spans(window, candidates)?;
    let in_window = Span::new(window.pos(subject.start), window.pos(subject.end));
    let (items, position_ids) = text_items(window, Some(in_window));
    let mut seq = PackedSequence {
        pair: vec![None; items.len()],
        items,
        position_ids,
        subject: Some(subject),
        subject_idx: Some(subject_idx),
        lev_spans: Vec::new(),
    };
    let others: Vec<usize> = (0..candidates.len()).filter(|&j| j != subject_idx).collect();
    append_levitated(&mut seq, window, candidates, &others);
    Ok(seq)
}

/// `mask[q * len + k]` is true iff item `q` may attend to item `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub len: usize,
    pub data: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.len + k]
    }
}

pub fn build_attention_mask(seq: &PackedSequence) -> AttentionMask {
    let n = seq.len();
    let mut data = vec![false; n * n];
    for q in 0..n {
        let lev_q = seq.items[q].is_levitated();
        for k in 0..n {
            data[q * n + k] = if !seq.items[k].is_levitated() {
                true
            } else {
                lev_q && (k == q || seq.pair[q] == Some(k))
            };
        }
    }
    AttentionMask { len: n, data }
}
