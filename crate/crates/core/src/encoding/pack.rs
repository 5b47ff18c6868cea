use std::ops::Range;

use super::vocab::{Vocabulary, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `[CLS] R [SEP] U_1 [SEP] … U_n [SEP]`, with span bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    /// 0 on the response side (including `[CLS]` and its `[SEP]`), 1 on the
    /// context side.
    pub segments: Vec<u8>,
    pub sep_positions: Vec<usize>,
    pub response_span: Range<usize>,
    pub utterance_spans: Vec<Range<usize>>,
    /// Original context index of each retained utterance.
    pub utterance_index: Vec<usize>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.utterance_spans.len()
    }

    /// Number of non-padding tokens.
    pub fn content_len(&self) -> usize {
        self.ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1)
    }

    /// Appends `[PAD]` tokens up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.segments.push(1);
        }
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }
}

/// Tokenizes and packs a context/response pair.
pub fn pack<S: AsRef<str>>(context: &[S], response: &str, vocab: &Vocabulary, max_len: usize) -> Result<PackedInput> {
    let ctx: Vec<Vec<usize>> = context.iter().map(|u| vocab.tokenize(u.as_ref())).collect();
    pack_ids(&ctx, &vocab.tokenize(response), max_len)
}

/// Packs pre-tokenized input. Empty utterances are skipped; when the result
/// exceeds `max_len` the oldest utterances are dropped first, then the
/// oldest tokens of the earliest remaining one. The response is never cut.
pub fn pack_ids(context: &[Vec<usize>], response: &[usize], max_len: usize) -> Result<PackedInput> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    let mut kept: Vec<(usize, &[usize])> = context
        .iter()
        .enumerate()
        .filter(|(_, u)| !u.is_empty())
        .map(|(i, u)| (i, u.as_slice()))
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("context"));
    }
    let fixed = response.len() + 2;
    if fixed + 2 > max_len {
        return Err(Error::Invalid(format!(
            "response of {} tokens does not fit max_len {max_len}",
            response.len()
        )));
    }
    let total = |k: &[(usize, &[usize])]| fixed + k.iter().map(|(_, u)| u.len() + 1).sum::<usize>();
    while total(&kept) > max_len && kept.len() > 1 {
        kept.remove(0);
    }
    let over = total(&kept).saturating_sub(max_len);
    if over > 0 {
        let (i, u) = kept[0];
        kept[0] = (i, &u[over..]);
    }

    let mut ids = Vec::with_capacity(total(&kept));
    let mut segments = Vec::with_capacity(ids.capacity());
    ids.push(CLS);
    ids.extend_from_slice(response);
    let response_span = 1..1 + response.len();
    ids.push(SEP);
    let mut sep_positions = vec![ids.len() - 1];
    segments.resize(ids.len(), 0);
    let mut utterance_spans = Vec::with_capacity(kept.len());
    for (_, u) in &kept {
        let start = ids.len();
        ids.extend_from_slice(u);
        utterance_spans.push(start..ids.len());
        ids.push(SEP);
        sep_positions.push(ids.len() - 1);
    }
    segments.resize(ids.len(), 1);
    Ok(PackedInput {
        ids,
        segments,
        sep_positions,
        response_span,
        utterance_spans,
        utterance_index: kept.iter().map(|(i, _)| *i).collect(),
    })
}

/// Hidden states split by span. Every utterance block is zero-padded to
/// `l` rows; `context` stacks the blocks (`n·l` rows).
#[derive(Debug, Clone)]
pub struct SeparatedStates {
    pub h0: Var,
    pub response_tokens: Var,
    pub response_sep: Var,
    pub utterance_blocks: Vec<Var>,
    pub utterance_seps: Vec<Var>,
    pub context: Var,
    /// `true` for real token rows of `context`, `false` for padding.
    pub context_mask: Vec<bool>,
    pub utterance_lens: Vec<usize>,
    pub n: usize,
    pub l: usize,
    pub d: usize,
}

impl SeparatedStates {
    /// Row mask of a single padded block.
    pub fn block_mask(&self, i: usize) -> Vec<bool> {
        (0..self.l).map(|r| r < self.utterance_lens[i]).collect()
    }
}

pub fn separate(tape: &mut Tape, hidden: Var, packed: &PackedInput) -> Result<SeparatedStates> {
    let (rows, d) = tape.shape(hidden);
    if rows != packed.len() {
        return Err(Error::shape(
            "separate",
            format!("{rows} hidden rows for {} tokens", packed.len()),
        ));
    }
    let n = packed.num_utterances();
    if packed.sep_positions.len() != n + 1 || packed.sep_positions.iter().any(|&p| p >= rows || packed.ids[p] != SEP) {
        return Err(Error::Invalid("separator positions inconsistent with packed ids".into()));
    }
    let h0 = tape.row(hidden, 0)?;
    let response_tokens = tape.slice_rows(hidden, packed.response_span.start, packed.response_span.end)?;
    let response_sep = tape.row(hidden, packed.sep_positions[0])?;
    let l = packed.utterance_spans.iter().map(|s| s.len()).max().unwrap_or(0);
    if l == 0 {
        return Err(Error::Empty("utterances"));
    }
    let mut blocks = Vec::with_capacity(n);
    let mut seps = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n * l);
    let mut lens = Vec::with_capacity(n);
    for (i, span) in packed.utterance_spans.iter().enumerate() {
        if span.end != packed.sep_positions[i + 1] {
            return Err(Error::Invalid(format!("utterance {i} is not terminated by its [SEP]")));
        }
        let tokens = tape.slice_rows(hidden, span.start, span.end)?;
        let block = if span.len() < l {
            let pad = tape.constant(Tensor::zeros(&[l - span.len(), d]));
            tape.concat_rows(&[tokens, pad])?
        } else {
            tokens
        };
        blocks.push(block);
        seps.push(tape.row(hidden, packed.sep_positions[i + 1])?);
        mask.extend((0..l).map(|r| r < span.len()));
        lens.push(span.len());
    }
    let context = if blocks.len() == 1 {
        blocks[0]
    } else {
        tape.concat_rows(&blocks)?
    };
    Ok(SeparatedStates {
        h0,
        response_tokens,
        response_sep,
        utterance_blocks: blocks,
        utterance_seps: seps,
        context,
        context_mask: mask,
        utterance_lens: lens,
        n,
        l,
        d,
    })
}
