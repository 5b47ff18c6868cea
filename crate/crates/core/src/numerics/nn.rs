//! Neural building blocks composed from tape operations.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, Params, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor::glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            shift: params.add(format!("{name}.shift"), Tensor::zeros(&[1, dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.normalize_rows(x, self.eps)?;
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, s)
    }
}

/// Multi-head attention parameters.
///
/// The per-head projections `W_i` (each `d_model × d_head`) are stored as the
/// column blocks of one `d_model × d_model` matrix per role, so head `i`
/// reads columns `i * d_head .. (i + 1) * d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
}

impl MhaParams {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        d_model: usize,
        heads: usize,
        bias: bool,
        output_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Invalid(format!(
                "{heads} heads do not divide d_model {d_model}"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(params, &format!("{name}.q"), d_model, d_model, bias, rng),
            key: Linear::new(params, &format!("{name}.k"), d_model, d_model, bias, rng),
            value: Linear::new(params, &format!("{name}.v"), d_model, d_model, bias, rng),
            output: output_projection
                .then(|| Linear::new(params, &format!("{name}.o"), d_model, d_model, true, rng)),
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `MHA(q, k, v)`: per-head `softmax(Q_i K_iᵀ / √d_head) V_i`, heads
/// concatenated, optionally followed by the output projection.
///
/// `key_mask[j] == false` excludes key/value row `j`.
pub fn mha(tape: &mut Tape, q: Var, k: Var, v: Var, p: &MhaParams, key_mask: Option<&[bool]>) -> Result<Var> {
    mha_with_weights(tape, q, k, v, p, key_mask).map(|(out, _)| out)
}

/// [`mha`] that also returns each head's attention matrix.
pub fn mha_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &MhaParams,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (nq, dq) = tape.shape(q);
    let (nk, dk) = tape.shape(k);
    let (nv, dv) = tape.shape(v);
    if dq != p.d_model || dk != p.d_model || dv != p.d_model {
        return Err(Error::shape(
            "mha",
            format!("widths {dq}/{dk}/{dv}, d_model {}", p.d_model),
        ));
    }
    if nk != nv {
        return Err(Error::shape("mha", format!("{nk} keys but {nv} values")));
    }
    if nk == 0 || nq == 0 {
        return Err(Error::Empty("mha"));
    }
    let full_mask = match key_mask {
        Some(m) if m.len() != nk => {
            return Err(Error::shape("mha", format!("key mask of {} for {nk} keys", m.len())));
        }
        Some(m) => {
            if !m.iter().any(|&b| b) {
                return Err(Error::FullyMasked(0));
            }
            Some((0..nq).flat_map(|_| m.iter().copied()).collect::<Vec<bool>>())
        }
        None => None,
    };

    let qp = p.query.forward(tape, q)?;
    let kp = p.key.forward(tape, k)?;
    let vp = p.value.forward(tape, v)?;
    let dh = p.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, lo, hi)?,
                tape.slice_cols(kp, lo, hi)?,
                tape.slice_cols(vp, lo, hi)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let att = tape.softmax_rows(scores, full_mask.as_deref())?;
        heads.push(tape.matmul(att, vh)?);
        weights.push(att);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = match &p.output {
        Some(o) => o.forward(tape, cat)?,
        None => cat,
    };
    Ok((out, weights))
}

/// GRU parameters; gate blocks are ordered `[update | reset | candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `input_dim × 3·hidden`
    pub w_input: ParamId,
    /// `1 × 3·hidden`
    pub bias: ParamId,
    /// `hidden × 2·hidden`, recurrent weights of the update and reset gates
    pub u_gates: ParamId,
    /// `hidden × hidden`, recurrent weights of the candidate
    pub u_candidate: ParamId,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let h = hidden_dim;
        let mut w = Tensor::zeros(&[input_dim, 3 * h]);
        let mut u = Tensor::zeros(&[h, 2 * h]);
        // Glorot per gate block rather than over the stacked matrix.
        for block in 0..3 {
            let g = Tensor::glorot(input_dim, h, rng);
            for r in 0..input_dim {
                w.data_mut()[r * 3 * h + block * h..r * 3 * h + (block + 1) * h].copy_from_slice(g.row_slice(r));
            }
        }
        for block in 0..2 {
            let g = Tensor::glorot(h, h, rng);
            for r in 0..h {
                u.data_mut()[r * 2 * h + block * h..r * 2 * h + (block + 1) * h].copy_from_slice(g.row_slice(r));
            }
        }
        Self {
            input_dim,
            hidden_dim,
            w_input: params.add(format!("{name}.w_input"), w),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[1, 3 * h])),
            u_gates: params.add(format!("{name}.u_gates"), u),
            u_candidate: params.add(format!("{name}.u_candidate"), Tensor::glorot(h, h, rng)),
        }
    }
}

/// Runs a GRU over the rows of `inputs` (`T × input_dim`), starting from
/// `h0` (`1 × hidden`):
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)
/// r = σ(x W_r + h U_r + b_r)
/// n = tanh(x W_n + (r ⊙ h) U_n + b_n)
/// h' = (1 − z) ⊙ h + z ⊙ n
/// ```
///
/// Returns every hidden state and the last one.
pub fn gru_sequence(tape: &mut Tape, inputs: Var, p: &GruParams, h0: Var) -> Result<(Vec<Var>, Var)> {
    let (steps, width) = tape.shape(inputs);
    if steps == 0 {
        return Err(Error::Empty("gru_sequence"));
    }
    if width != p.input_dim {
        return Err(Error::shape(
            "gru_sequence",
            format!("input width {width}, expected {}", p.input_dim),
        ));
    }
    if tape.shape(h0) != (1, p.hidden_dim) {
        return Err(Error::shape("gru_sequence", "initial state must be 1 x hidden"));
    }
    let d = p.hidden_dim;
    let w = tape.param(p.w_input);
    let b = tape.param(p.bias);
    let u_gates = tape.param(p.u_gates);
    let u_cand = tape.param(p.u_candidate);

    // Input contributions for all steps at once.
    let xw = tape.matmul(inputs, w)?;
    let xw = tape.add_row(xw, b)?;
    let x_gates = tape.slice_cols(xw, 0, 2 * d)?;
    let x_cand = tape.slice_cols(xw, 2 * d, 3 * d)?;

    let mut h = h0;
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let xg = tape.row(x_gates, t)?;
        let xc = tape.row(x_cand, t)?;
        let hg = tape.matmul(h, u_gates)?;
        let pre = tape.add(xg, hg)?;
        let gates = tape.sigmoid(pre)?;
        let z = tape.slice_cols(gates, 0, d)?;
        let r = tape.slice_cols(gates, d, 2 * d)?;
        let rh = tape.mul(r, h)?;
        let hc = tape.matmul(rh, u_cand)?;
        let pre_n = tape.add(xc, hc)?;
        let n = tape.tanh(pre_n)?;
        let delta = tape.sub(n, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        states.push(h);
    }
    Ok((states, h))
}

/// Cosine similarity; 0 when either vector has (near) zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < COSINE_EPS || nv < COSINE_EPS {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Mean over the rows flagged `true` in `mask`.
pub fn masked_mean_rows(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.len() != tape.rows(x) {
        return Err(Error::shape("masked_mean_rows", "mask length"));
    }
    if mask.iter().all(|&m| m) {
        return tape.mean_rows(x);
    }
    let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(Error::Empty("masked_mean_rows"));
    }
    let sel = tape.select_rows(x, &keep)?;
    tape.mean_rows(sel)
}
