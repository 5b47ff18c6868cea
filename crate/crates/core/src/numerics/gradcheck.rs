//! Finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::{Params, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Cap on checked coordinates per tensor (evenly strided); `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-3,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar_output(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        Ok(out)
    } else {
        tape.sum(out)
    }
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let stride = len as f64 / c as f64;
            (0..c).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Checks `f` with respect to free input tensors. Non-scalar outputs are
/// reduced by summation.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let out = scalar_output(&mut tape, out)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let out = scalar_output(&mut tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in coords(inputs[k].len(), opts.max_coords) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("gradcheck"));
            }
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        coords_checked: checked,
    })
}

/// Checks a parameterised scalar loss with respect to every parameter in
/// `params`.
pub fn gradcheck_params<F>(params: &Params, f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |p: &Params| -> Result<f64> {
        let mut tape = Tape::inference(p);
        let out = f(&mut tape)?;
        let out = scalar_output(&mut tape, out)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::with_params(params);
    let out = f(&mut tape)?;
    let out = scalar_output(&mut tape, out)?;
    let grads = tape.backward(out)?;
    let pg = tape.param_grads(&grads);

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in params.ids() {
        let len = params.get(id).len();
        let analytic = pg.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for i in coords(len, opts.max_coords) {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("gradcheck"));
            }
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        coords_checked: checked,
    })
}
