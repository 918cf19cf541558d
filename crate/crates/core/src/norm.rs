//! Normalization primitives: plain instance normalization, layer
//! normalization with per-channel affine, and the conditional biasing
//! injection (CBIN) used by the generator and both critics.
//!
//! CBIN normalizes per instance and channel, then adds a bounded,
//! condition-dependent per-channel bias:
//! `out[c] = IN(x)[c] + tanh(weight[c,:] . cond + bias[c])`.

use crate::autodiff::{Elem, Tape, Tx};
use crate::error::{ensure_contract, Result};
use ndarray::{Array1, Array2, Array3, ArrayD};

/// Default epsilon for all normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Parameters of one CBIN injection: `weight` is `[channels, cond_dim]`,
/// `bias` is `[channels]`. `cond_dim` is `n_s + n_d` in the generator and
/// `n_d` in the critics.
#[derive(Debug, Clone)]
pub struct CbinParams {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl CbinParams {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Result<Self> {
        ensure_contract!(
            weight.dim().0 == bias.len(),
            "CBIN weight rows {} must match bias length {}",
            weight.dim().0,
            bias.len()
        );
        ensure_contract!(
            weight.iter().chain(bias.iter()).all(|v| v.is_finite()),
            "CBIN parameters contain non-finite entries"
        );
        Ok(CbinParams { weight, bias })
    }
}

fn to_batch1(x: &Array3<f32>) -> ArrayD<f32> {
    let (c, h, w) = x.dim();
    x.to_shape((1, c, h, w)).expect("contiguous").to_owned().into_dyn()
}

fn from_batch1(x: &ArrayD<f32>) -> Array3<f32> {
    let s = x.shape();
    debug_assert_eq!(s[0], 1);
    x.to_shape((s[1], s[2], s[3]))
        .expect("contiguous")
        .to_owned()
}

/// Instance normalization of a single `[C,H,W]` tensor, no learned affine:
/// per channel, `(x - mean) / sqrt(var + eps)` with biased variance.
pub fn instance_normalize(x: &Array3<f32>, eps: f32) -> Result<Array3<f32>> {
    ensure_contract!(eps > 0.0, "eps must be positive");
    ensure_contract!(
        x.iter().all(|v| v.is_finite()),
        "instance_normalize input contains non-finite entries"
    );
    let mut tape = Tape::<f32>::new();
    let t = tape.constant(to_batch1(x));
    let y = tape.instance_norm(t, eps);
    Ok(from_batch1(tape.value(y)))
}

/// CBIN on a single `[C,H,W]` tensor with conditioning vector `cond`.
pub fn cbin(
    x: &Array3<f32>,
    cond: &[f32],
    params: &CbinParams,
    eps: f32,
) -> Result<Array3<f32>> {
    let (c, _, _) = x.dim();
    ensure_contract!(
        params.weight.dim() == (c, cond.len()),
        "CBIN weight shape {:?} incompatible with channels {} and cond_dim {}",
        params.weight.dim(),
        c,
        cond.len()
    );
    let mut tape = Tape::<f32>::new();
    let xt = tape.constant(to_batch1(x));
    let condt = tape.constant(
        Array2::from_shape_vec((1, cond.len()), cond.to_vec())
            .expect("shape")
            .into_dyn(),
    );
    let wt = tape.constant(params.weight.clone().into_dyn());
    let bt = tape.constant(params.bias.clone().into_dyn());
    let y = cbin_tape(&mut tape, xt, condt, wt, bt, eps);
    Ok(from_batch1(tape.value(y)))
}

/// Layer normalization of a single `[C,H,W]` tensor over all of (C,H,W),
/// then per-channel `gain`/`shift`.
pub fn layer_normalize(
    x: &Array3<f32>,
    gain: &Array1<f32>,
    shift: &Array1<f32>,
    eps: f32,
) -> Result<Array3<f32>> {
    let (c, _, _) = x.dim();
    ensure_contract!(eps > 0.0, "eps must be positive");
    ensure_contract!(
        gain.len() == c && shift.len() == c,
        "gain/shift length must equal channel count {c}"
    );
    let mut tape = Tape::<f32>::new();
    let xt = tape.constant(to_batch1(x));
    let gt = tape.constant(gain.clone().into_dyn());
    let st = tape.constant(shift.clone().into_dyn());
    let y = tape.layer_norm(xt, gt, st, eps);
    Ok(from_batch1(tape.value(y)))
}

/// Tape-level CBIN over a batch: `x [B,C,H,W]`, `cond [B,cond_dim]`,
/// `weight [C,cond_dim]`, `bias [C]`.
pub fn cbin_tape<E: Elem>(
    tape: &mut Tape<E>,
    x: Tx,
    cond: Tx,
    weight: Tx,
    bias: Tx,
    eps: E,
) -> Tx {
    let normed = tape.instance_norm(x, eps);
    let lin = tape.linear(cond, weight, Some(bias));
    let squashed = tape.tanh(lin);
    tape.add_channel_map(normed, squashed)
}
