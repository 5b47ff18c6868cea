use rand::{Rng, RngCore};

use super::pack::PackedInput;
use crate::error::{Error, Result};
use crate::numerics::{mha, LayerNorm, Linear, MhaParams, ParamId, Params, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Restart position ids at the start of the context segment.
    pub positions_restart: bool,
    /// Normalize before each sublayer (plus once at the end) instead of after.
    pub pre_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            max_len: 384,
            dropout: 0.0,
            vocab_size: 4,
            positions_restart: false,
            pre_norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.layers == 0 || self.max_len < 5 || self.vocab_size < 4 {
            return Err(Error::Invalid("encoder needs layers >= 1, max_len >= 5, vocab >= 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn: MhaParams,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: LayerNorm,
}

/// Transformer encoder over token + segment + position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    token_emb: ParamId,
    segment_emb: ParamId,
    position_emb: ParamId,
    emb_norm: LayerNorm,
    blocks: Vec<Block>,
    final_norm: Option<LayerNorm>,
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        tape.mask_mul(x, mask)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb_std = 0.1;
        let token_emb = params.add("enc.token_emb", Tensor::randn(&[config.vocab_size, d], emb_std, rng));
        let segment_emb = params.add("enc.segment_emb", Tensor::randn(&[2, d], emb_std, rng));
        let position_emb = params.add("enc.position_emb", Tensor::randn(&[config.max_len, d], emb_std, rng));
        let emb_norm = LayerNorm::new(params, "enc.emb_norm", d);
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let name = format!("enc.layer{i}");
            blocks.push(Block {
                attn: MhaParams::new(params, &format!("{name}.attn"), d, config.heads, true, true, rng)?,
                attn_norm: LayerNorm::new(params, &format!("{name}.attn_norm"), d),
                ff_in: Linear::new(params, &format!("{name}.ff_in"), d, config.ff_dim, true, rng),
                ff_out: Linear::new(params, &format!("{name}.ff_out"), config.ff_dim, d, true, rng),
                ff_norm: LayerNorm::new(params, &format!("{name}.ff_norm"), d),
            });
        }
        let final_norm = config.pre_norm.then(|| LayerNorm::new(params, "enc.final_norm", d));
        Ok(Self {
            config,
            token_emb,
            segment_emb,
            position_emb,
            emb_norm,
            blocks,
            final_norm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn positions(&self, packed: &PackedInput) -> Vec<usize> {
        if !self.config.positions_restart {
            return (0..packed.len()).collect();
        }
        let ctx_start = packed.segments.iter().position(|&s| s == 1).unwrap_or(packed.len());
        (0..packed.len())
            .map(|i| if i < ctx_start { i } else { i - ctx_start })
            .collect()
    }

    /// Last-layer hidden states, `len × d_model`.
    pub fn encode(&self, tape: &mut Tape, packed: &PackedInput, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        if packed.is_empty() {
            return Err(Error::Empty("packed input"));
        }
        if packed.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "packed length {} exceeds max_len {}",
                packed.len(),
                self.config.max_len
            )));
        }
        let tok_table = tape.param(self.token_emb);
        let seg_table = tape.param(self.segment_emb);
        let pos_table = tape.param(self.position_emb);
        let tok = tape.gather(tok_table, &packed.ids)?;
        let segs: Vec<usize> = packed.segments.iter().map(|&s| s as usize).collect();
        let seg = tape.gather(seg_table, &segs)?;
        let pos = tape.gather(pos_table, &self.positions(packed))?;
        let x = tape.add(tok, seg)?;
        let x = tape.add(x, pos)?;
        let mut x = self.emb_norm.forward(tape, x)?;
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(tape, x)?;
        }

        let mask = packed.key_mask();
        let mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        for b in &self.blocks {
            if self.config.pre_norm {
                let h = b.attn_norm.forward(tape, x)?;
                let mut a = mha(tape, h, h, h, &b.attn, mask.as_deref())?;
                if let Some(d) = dropout.as_deref_mut() {
                    a = d.apply(tape, a)?;
                }
                x = tape.add(x, a)?;
                let h = b.ff_norm.forward(tape, x)?;
                let mut f = self.feed_forward(tape, b, h)?;
                if let Some(d) = dropout.as_deref_mut() {
                    f = d.apply(tape, f)?;
                }
                x = tape.add(x, f)?;
            } else {
                let mut a = mha(tape, x, x, x, &b.attn, mask.as_deref())?;
                if let Some(d) = dropout.as_deref_mut() {
                    a = d.apply(tape, a)?;
                }
                let r = tape.add(x, a)?;
                x = b.attn_norm.forward(tape, r)?;
                let mut f = self.feed_forward(tape, b, x)?;
                if let Some(d) = dropout.as_deref_mut() {
                    f = d.apply(tape, f)?;
                }
                let r = tape.add(x, f)?;
                x = b.ff_norm.forward(tape, r)?;
            }
        }
        match &self.final_norm {
            Some(n) => n.forward(tape, x),
            None => Ok(x),
        }
    }

    fn feed_forward(&self, tape: &mut Tape, b: &Block, x: Var) -> Result<Var> {
        let h = b.ff_in.forward(tape, x)?;
        let h = tape.gelu(h)?;
        b.ff_out.forward(tape, h)
    }

    /// Encodes a bare token sequence as `[CLS] tokens [SEP]` and returns the
    /// rows of the tokens themselves (`n_k × d_model`).
    pub fn encode_tokens(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(super::vocab::CLS);
        ids.extend_from_slice(tokens);
        ids.push(super::vocab::SEP);
        let n = ids.len();
        let packed = PackedInput {
            segments: vec![0; n],
            sep_positions: vec![n - 1],
            response_span: 1..n - 1,
            utterance_spans: vec![],
            utterance_index: vec![],
            ids,
        };
        let h = self.encode(tape, &packed, None)?;
        tape.slice_rows(h, 1, n - 1)
    }
}
