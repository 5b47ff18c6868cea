//! Response-selection head: pivot-aware attention, response-aware
//! attention, GRU aggregation and the binary matching predictor.

use rand::Rng;

use crate::encoding::{pack_ids, separate, Dropout, Encoder, EncoderConfig, PackedInput};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{gru_sequence, mha, GruParams, Linear, MhaParams, Params, Tape, Tensor, Var};
use crate::pivot::{histogram, most_related_last_t, select_pivots, ExternalScores, PivotSelection, ScoreContext, SelectionConfig};
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingParams {
    pub pivot_attn: MhaParams,
    pub response_attn: MhaParams,
    pub gru: GruParams,
    /// `2d → 2` over `[ĥ_u; h_0]`.
    pub predictor: Linear,
}

impl MatchingParams {
    /// `share_attention` reuses the pivot-aware weights for the
    /// response-aware stage.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        d_model: usize,
        heads: usize,
        share_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let pivot_attn = MhaParams::new(params, "match.pivot_attn", d_model, heads, false, false, rng)?;
        let response_attn = if share_attention {
            pivot_attn.clone()
        } else {
            MhaParams::new(params, "match.response_attn", d_model, heads, false, false, rng)?
        };
        Ok(Self {
            pivot_attn,
            response_attn,
            gru: GruParams::new(params, "match.gru", d_model, d_model, rng),
            predictor: Linear::new(params, "match.predictor", 2 * d_model, 2, true, rng),
        })
    }
}

/// `H^CP = MHA(H^C, H^P, H^P)`: context tokens attend over pivot tokens.
pub fn pivot_attend(tape: &mut Tape, h_c: Var, h_p: Var, pivot_mask: &[bool], p: &MhaParams) -> Result<Var> {
    if tape.rows(h_p) == 0 {
        return Err(Error::Empty("pivot set"));
    }
    mha(tape, h_c, h_p, h_p, p, Some(pivot_mask))
}

/// `H^G = MHA(H^CP, H^R, H^R)`.
pub fn response_attend(tape: &mut Tape, h_cp: Var, h_r: Var, p: &MhaParams) -> Result<Var> {
    if tape.rows(h_r) == 0 {
        return Err(Error::Empty("response"));
    }
    mha(tape, h_cp, h_r, h_r, p, None)
}

/// Runs the GRU over every row of `H^G` from a zero state and returns the
/// last hidden state `ĥ_u`.
pub fn aggregate(tape: &mut Tape, h_g: Var, gru: &GruParams) -> Result<Var> {
    if tape.rows(h_g) == 0 {
        return Err(Error::Empty("aggregate"));
    }
    let h0 = tape.constant(Tensor::zeros(&[1, gru.hidden_dim]));
    Ok(gru_sequence(tape, h_g, gru, h0)?.1)
}

/// `W_g [ĥ_u; h_0] + b_g` as a `1 × 2` row.
pub fn predict_logits(tape: &mut Tape, h_u: Var, h0: Var, predictor: &Linear) -> Result<Var> {
    let x = tape.concat_cols(&[h_u, h0])?;
    predictor.forward(tape, x)
}

/// `(not-match, match)` probabilities.
pub fn predict(tape: &mut Tape, h_u: Var, h0: Var, predictor: &Linear) -> Result<Var> {
    let logits = predict_logits(tape, h_u, h0, predictor)?;
    tape.softmax_rows(logits, None)
}

/// A packed context/candidate pair ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub example_id: String,
    pub packed: PackedInput,
    pub label: u8,
}

impl Instance {
    pub fn new(example_id: &str, context: &[Vec<usize>], response: &[usize], label: u8, max_len: usize) -> Result<Self> {
        Ok(Self {
            example_id: example_id.to_string(),
            packed: pack_ids(context, response, max_len)?,
            label,
        })
    }
}

/// Encoder plus matching head.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    pub params: Params,
    pub encoder: Encoder,
    pub head: MatchingParams,
    pub selection: SelectionConfig,
    pub external: Option<ExternalScores>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub selection: PivotSelection,
}

impl ResponseModel {
    pub fn new(encoder: EncoderConfig, selection: SelectionConfig, share_attention: bool, seed: u64) -> Result<Self> {
        selection.validate()?;
        let mut rng = seeding::rng(seed);
        let mut params = Params::new();
        let heads = encoder.heads;
        let d = encoder.d_model;
        let encoder = Encoder::new(&mut params, encoder, &mut rng)?;
        let head = MatchingParams::new(&mut params, d, heads, share_attention, &mut rng)?;
        Ok(Self {
            params,
            encoder,
            head,
            selection,
            external: None,
        })
    }

    /// pack → encode → separate → select → pivot/response attention →
    /// aggregate → logits. `label` only matters for `positive_only`.
    pub fn forward(&self, tape: &mut Tape, packed: &PackedInput, example_id: &str, label: Option<u8>, dropout: Option<&mut Dropout>) -> Result<Forward> {
        let hidden = self.encoder.encode(tape, packed, dropout)?;
        let states = separate(tape, hidden, packed)?;
        let ctx = ScoreContext {
            example_id,
            label,
            external: self.external.as_ref(),
            utterance_index: Some(&packed.utterance_index),
        };
        let selection = select_pivots(tape, &states, states.response_sep, &self.selection, &ctx)?;
        let h_cp = pivot_attend(tape, states.context, selection.pivot, &selection.pivot_mask, &self.head.pivot_attn)?;
        let h_g = response_attend(tape, h_cp, states.response_tokens, &self.head.response_attn)?;
        let h_u = aggregate(tape, h_g, &self.head.gru)?;
        let logits = predict_logits(tape, h_u, states.h0, &self.head.predictor)?;
        Ok(Forward { logits, selection })
    }

    /// Cross-entropy of the gold label.
    pub fn loss(&self, tape: &mut Tape, inst: &Instance, dropout: Option<&mut Dropout>) -> Result<Var> {
        let f = self.forward(tape, &inst.packed, &inst.example_id, Some(inst.label), dropout)?;
        tape.cross_entropy(f.logits, inst.label as usize)
    }

    /// Match probability at inference (labels are never consulted).
    pub fn score(&self, packed: &PackedInput, example_id: &str) -> Result<f64> {
        let mut tape = Tape::inference(&self.params);
        let f = self.forward(&mut tape, packed, example_id, None, None)?;
        let p = tape.softmax_rows(f.logits, None)?;
        Ok(tape.value(p).data()[1])
    }

    /// Per-utterance selection scores under the configured strategy.
    pub fn pivot_scores(&self, packed: &PackedInput, example_id: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.params);
        let hidden = self.encoder.encode(&mut tape, packed, None)?;
        let states = separate(&mut tape, hidden, packed)?;
        let ctx = ScoreContext {
            example_id,
            label: None,
            external: self.external.as_ref(),
            utterance_index: Some(&packed.utterance_index),
        };
        let selection = select_pivots(&mut tape, &states, states.response_sep, &self.selection, &ctx)?;
        Ok(selection.scores)
    }

    /// Last-`t` position of the utterance whose `[SEP]` state is closest to
    /// the response `[SEP]` state.
    pub fn most_related(&self, packed: &PackedInput) -> Result<usize> {
        let mut tape = Tape::inference(&self.params);
        let hidden = self.encoder.encode(&mut tape, packed, None)?;
        let states = separate(&mut tape, hidden, packed)?;
        let seps: Vec<&[f64]> = states.utterance_seps.iter().map(|&s| tape.value(s).data()).collect();
        most_related_last_t(&seps, tape.value(states.response_sep).data()).ok_or(Error::Empty("utterances"))
    }
}

/// Normalised last-`t` histogram of the utterance most related to each
/// positive response; index 0 holds `t = 1`.
pub fn pivot_distribution(model: &ResponseModel, instances: &[Instance], exec: Exec) -> Result<Vec<f64>> {
    let positives: Vec<&Instance> = instances.iter().filter(|i| i.label == 1).collect();
    if positives.is_empty() {
        return Err(Error::Empty("positive examples"));
    }
    let ts = exec.try_map(&positives, |_, inst| model.most_related(&inst.packed))?;
    histogram(&ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_predictor_is_uniform() {
        let mut params = Params::new();
        let mut rng = seeding::rng(1);
        let lin = Linear::new(&mut params, "p", 4, 2, true, &mut rng);
        params.set_value(lin.weight, Tensor::zeros(&[4, 2])).unwrap();
        let mut tape = Tape::with_params(&params);
        let h = tape.constant(Tensor::row(vec![1.0, -2.0]));
        let h0 = tape.constant(Tensor::row(vec![0.5, 3.0]));
        let p = predict(&mut tape, h, h0, &lin).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        let logits = predict_logits(&mut tape, h, h0, &lin).unwrap();
        let loss = tape.cross_entropy(logits, 1).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_empty() {
        let mut params = Params::new();
        let gru = GruParams::new(&mut params, "g", 2, 2, &mut seeding::rng(0));
        let mut tape = Tape::with_params(&params);
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(aggregate(&mut tape, x, &gru).is_err());
    }
}
