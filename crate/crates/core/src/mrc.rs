//! Multiple-choice dialogue comprehension head: question-anchored pivots,
//! knowledge refinement, DUMA fusion and KPR option scoring.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoding::{pack_ids, separate, Encoder, EncoderConfig, PackedInput, SeparatedStates};
use crate::error::{Error, Result};
use crate::knowledge::{encode_fact, FactCache, FactStore};
use crate::numerics::{masked_mean_rows, mha, Linear, MhaParams, Params, Tape, Tensor, Var};
use crate::pivot::{select_pivots, ScoreContext, SelectionConfig};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    /// `O = [O^O; Linear(O^P; O^K)]`.
    #[default]
    Full,
    /// Drops `O^K`; `O^KPR` comes from `O^P` alone.
    NoKnowledge,
    /// Drops `O^P`; `O^KPR` comes from `O^K` alone.
    NoPivot,
    /// `O^O` only, scored with the first half of `W`.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoKnowledge, Ablation::NoPivot, Ablation::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoKnowledge => "no_knowledge",
            Ablation::NoPivot => "no_pivot",
            Ablation::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrcConfig {
    pub ablation: Ablation,
    /// Second DUMA attention as `MHA(H_b, H_b, H_a)` (requires equal
    /// lengths) instead of `MHA(H_b, H_a, H_a)`.
    pub duma_literal: bool,
    /// Use the knowledge-refined QA states inside `O^O` as well.
    pub refined_qa_everywhere: bool,
}

impl Default for MrcConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            duma_literal: false,
            refined_qa_everywhere: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrcParams {
    pub pivot_attn: MhaParams,
    pub ck_attn: MhaParams,
    pub qak_attn: MhaParams,
    /// Self-attention inside the fact encoder.
    pub fact_attn: MhaParams,
    pub duma_1: MhaParams,
    pub duma_2: MhaParams,
    /// `4d → 2d` over `[O^P; O^K]`.
    pub kpr: Linear,
    pub kpr_pivot_only: Linear,
    pub kpr_knowledge_only: Linear,
    /// `4d × 1` option decoder.
    pub decoder: Linear,
    pub d_model: usize,
}

impl MrcParams {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let d = d_model;
        let mut attn = |name: &str, rng: &mut R| MhaParams::new(params, &format!("mrc.{name}"), d, heads, false, false, rng);
        let pivot_attn = attn("pivot_attn", rng)?;
        let ck_attn = attn("ck_attn", rng)?;
        let qak_attn = attn("qak_attn", rng)?;
        let fact_attn = attn("fact_attn", rng)?;
        let duma_1 = attn("duma_1", rng)?;
        let duma_2 = attn("duma_2", rng)?;
        Ok(Self {
            pivot_attn,
            ck_attn,
            qak_attn,
            fact_attn,
            duma_1,
            duma_2,
            kpr: Linear::new(params, "mrc.kpr", 4 * d, 2 * d, true, rng),
            kpr_pivot_only: Linear::new(params, "mrc.kpr_pivot_only", 2 * d, 2 * d, true, rng),
            kpr_knowledge_only: Linear::new(params, "mrc.kpr_knowledge_only", 2 * d, 2 * d, true, rng),
            decoder: Linear::new(params, "mrc.decoder", 4 * d, 1, false, rng),
            d_model: d,
        })
    }
}

/// `MHA(H_C, K, K)`, or `H_C` unchanged when `K` is absent.
pub fn refine_with(tape: &mut Tape, h: Var, k: Option<Var>, p: &MhaParams) -> Result<Var> {
    match k {
        Some(k) => mha(tape, h, k, k, p, None),
        None => Ok(h),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub h_cp: Var,
    pub h_ck: Var,
    pub h_qa: Var,
}

/// Pivot, context-knowledge and QA-knowledge refinement.
pub fn refine(
    tape: &mut Tape,
    h_c: Var,
    h_p: Var,
    pivot_mask: &[bool],
    ck: Option<Var>,
    h_qa: Var,
    qak: Option<Var>,
    p: &MrcParams,
) -> Result<Refined> {
    Ok(Refined {
        h_cp: mha(tape, h_c, h_p, h_p, &p.pivot_attn, Some(pivot_mask))?,
        h_ck: refine_with(tape, h_c, ck, &p.ck_attn)?,
        h_qa: refine_with(tape, h_qa, qak, &p.qak_attn)?,
    })
}

/// `[mean(MHA₁); mean(MHA₂)]` with `MHA₁ = MHA(H_a, H_b, H_b)`. Rows of
/// `H_a` flagged `false` in `mask_a` are padding and excluded from the
/// pooling and from attention keys.
pub fn duma(tape: &mut Tape, h_a: Var, mask_a: &[bool], h_b: Var, p: &MrcParams, literal: bool) -> Result<Var> {
    if tape.rows(h_a) == 0 || tape.rows(h_b) == 0 {
        return Err(Error::Empty("duma input"));
    }
    let m1 = mha(tape, h_a, h_b, h_b, &p.duma_1, None)?;
    let pooled_1 = masked_mean_rows(tape, m1, mask_a)?;
    let m2 = if literal {
        if tape.rows(h_a) != tape.rows(h_b) {
            return Err(Error::shape(
                "duma",
                format!(
                    "literal second attention needs equal lengths, got {} and {}",
                    tape.rows(h_a),
                    tape.rows(h_b)
                ),
            ));
        }
        mha(tape, h_b, h_b, h_a, &p.duma_2, None)?
    } else {
        mha(tape, h_b, h_a, h_a, &p.duma_2, Some(mask_a))?
    };
    let pooled_2 = tape.mean_rows(m2)?;
    tape.concat_cols(&[pooled_1, pooled_2])
}

/// `O = [O^O; O^KPR]` for the given ablation (Baseline returns `O^O`).
pub fn fuse_outputs(tape: &mut Tape, o_o: Var, o_p: Var, o_k: Var, p: &MrcParams, mode: Ablation) -> Result<Var> {
    let kpr = match mode {
        Ablation::Full => {
            let pk = tape.concat_cols(&[o_p, o_k])?;
            p.kpr.forward(tape, pk)?
        }
        Ablation::NoKnowledge => p.kpr_pivot_only.forward(tape, o_p)?,
        Ablation::NoPivot => p.kpr_knowledge_only.forward(tape, o_k)?,
        Ablation::Baseline => return Ok(o_o),
    };
    tape.concat_cols(&[o_o, kpr])
}

/// `Wᵀ O` with `W` cut to its first `2d` rows in baseline mode.
pub fn option_logit(tape: &mut Tape, o: Var, p: &MrcParams, mode: Ablation) -> Result<Var> {
    let w = tape.param(p.decoder.weight);
    let w = if mode == Ablation::Baseline {
        tape.slice_rows(w, 0, 2 * p.d_model)?
    } else {
        w
    };
    tape.matmul(o, w)
}

/// One tokenized example. `context_facts` are retrieved for the dialogue
/// and `option_facts[j]` for `[Q; A_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcInstance {
    pub example_id: String,
    /// `[CLS] Q A_j [SEP] U_1 [SEP] …` per option.
    pub packed: Vec<PackedInput>,
    pub answer: usize,
    pub context_facts: Vec<usize>,
    pub option_facts: Vec<Vec<usize>>,
}

impl MrcInstance {
    pub fn new(
        example_id: &str,
        utterances: &[Vec<usize>],
        question: &[usize],
        options: &[Vec<usize>],
        answer: usize,
        max_len: usize,
    ) -> Result<Self> {
        if options.len() < 2 {
            return Err(Error::Invalid(format!("example {example_id}: need at least 2 options")));
        }
        if answer >= options.len() {
            return Err(Error::OutOfRange {
                what: "answer",
                index: answer,
                size: options.len(),
            });
        }
        let packed = options
            .iter()
            .map(|a| {
                let mut qa = question.to_vec();
                qa.extend_from_slice(a);
                pack_ids(utterances, &qa, max_len)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            example_id: example_id.to_string(),
            packed,
            answer,
            context_facts: Vec::new(),
            option_facts: vec![Vec::new(); options.len()],
        })
    }
}

/// Encoder, MRC head and the fact store it reads from.
#[derive(Debug, Clone)]
pub struct MrcModel {
    pub params: Params,
    pub encoder: Encoder,
    pub head: MrcParams,
    pub selection: SelectionConfig,
    pub config: MrcConfig,
    pub store: FactStore,
}

impl MrcModel {
    pub fn new(encoder: EncoderConfig, selection: SelectionConfig, config: MrcConfig, seed: u64) -> Result<Self> {
        selection.validate()?;
        let mut rng = seeding::rng(seed);
        let mut params = Params::new();
        let (d, heads) = (encoder.d_model, encoder.heads);
        let encoder = Encoder::new(&mut params, encoder, &mut rng)?;
        let head = MrcParams::new(&mut params, d, heads, &mut rng)?;
        Ok(Self {
            params,
            encoder,
            head,
            selection,
            config,
            store: FactStore::default(),
        })
    }

    /// Stacked `r_k` rows for `facts`, or `None` when there are none.
    /// With a cache the vectors enter the tape as constants.
    fn knowledge(&self, tape: &mut Tape, facts: &[usize], cache: Option<&FactCache>) -> Result<Option<Var>> {
        if facts.is_empty() {
            return Ok(None);
        }
        let rows = facts
            .iter()
            .map(|&f| match cache {
                Some(c) => {
                    let t = c.get_or_compute(f, || {
                        let mut t2 = Tape::inference(&self.params);
                        let r = encode_fact(&mut t2, &self.encoder, &self.head.fact_attn, self.store.tokens(f))?;
                        Ok(t2.value(r).clone())
                    })?;
                    Ok(tape.constant(t))
                }
                None => encode_fact(tape, &self.encoder, &self.head.fact_attn, self.store.tokens(f)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? }))
    }

    /// Option logits as a `1 × n_a` row.
    pub fn logits(&self, tape: &mut Tape, inst: &MrcInstance, cache: Option<&FactCache>) -> Result<Var> {
        let mode = self.config.ablation;
        let uses_knowledge = matches!(mode, Ablation::Full | Ablation::NoPivot);
        let ck = if uses_knowledge {
            self.knowledge(tape, &inst.context_facts, cache)?
        } else {
            None
        };
        let mut logits = Vec::with_capacity(inst.packed.len());
        for (j, packed) in inst.packed.iter().enumerate() {
            let hidden = self.encoder.encode(tape, packed, None)?;
            let states = separate(tape, hidden, packed)?;
            let qak = if uses_knowledge {
                self.knowledge(tape, &inst.option_facts[j], cache)?
            } else {
                None
            };
            let o = self.option_output(tape, &states, &inst.example_id, ck, qak)?;
            logits.push(option_logit(tape, o, &self.head, mode)?);
        }
        tape.concat_cols(&logits)
    }

    fn option_output(&self, tape: &mut Tape, states: &SeparatedStates, example_id: &str, ck: Option<Var>, qak: Option<Var>) -> Result<Var> {
        let p = &self.head;
        let lit = self.config.duma_literal;
        let mode = self.config.ablation;
        let (h_c, mask, h_qa) = (states.context, states.context_mask.as_slice(), states.response_tokens);
        let h_qa_refined = refine_with(tape, h_qa, qak, &p.qak_attn)?;
        let qa_o = if self.config.refined_qa_everywhere { h_qa_refined } else { h_qa };
        let o_o = duma(tape, h_c, mask, qa_o, p, lit)?;
        if mode == Ablation::Baseline {
            return Ok(o_o);
        }
        let o_p = if mode == Ablation::NoPivot {
            None
        } else {
            let ctx = ScoreContext {
                example_id,
                label: None,
                external: None,
                utterance_index: None,
            };
            let sel = select_pivots(tape, states, states.response_sep, &self.selection, &ctx)?;
            let h_cp = mha(tape, h_c, sel.pivot, sel.pivot, &p.pivot_attn, Some(&sel.pivot_mask))?;
            Some(duma(tape, h_cp, mask, h_qa_refined, p, lit)?)
        };
        let o_k = if mode == Ablation::NoKnowledge {
            None
        } else {
            let h_ck = refine_with(tape, h_c, ck, &p.ck_attn)?;
            Some(duma(tape, h_ck, mask, h_qa_refined, p, lit)?)
        };
        // Unused branches get a placeholder that fuse_outputs never reads.
        let zero = || Tensor::zeros(&[1, 2 * p.d_model]);
        let o_p = o_p.unwrap_or_else(|| tape.constant(zero()));
        let o_k = o_k.unwrap_or_else(|| tape.constant(zero()));
        fuse_outputs(tape, o_o, o_p, o_k, p, mode)
    }

    /// `−log p(gold)` under the option softmax.
    pub fn loss(&self, tape: &mut Tape, inst: &MrcInstance) -> Result<Var> {
        let logits = self.logits(tape, inst, None)?;
        tape.cross_entropy(logits, inst.answer)
    }

    /// Option probabilities at inference.
    pub fn probabilities(&self, inst: &MrcInstance, cache: Option<&FactCache>) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(&self.params);
        let logits = self.logits(&mut tape, inst, cache)?;
        let p = tape.softmax_rows(logits, None)?;
        Ok(tape.value(p).data().to_vec())
    }
}
