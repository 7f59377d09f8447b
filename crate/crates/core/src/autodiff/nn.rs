//! Composite layers built from graph primitives.

use super::{Graph, Var};
use crate::error::{shape_err, Result};

/// `x · w + b` for `x: [r, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Weights of one GRU layer. Gate blocks are ordered reset, update, candidate
/// along the `3 * hidden` axis.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[d_in, 3h]`
    pub w_ih: Var,
    /// `[h, 3h]`
    pub w_hh: Var,
    /// `[3h]`
    pub b_ih: Var,
    /// `[3h]`
    pub b_hh: Var,
}

/// One GRU step:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// u  = σ(x W_iu + b_iu + h W_hu + b_hu)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - u) ⊙ n + u ⊙ h
/// ```
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruWeights) -> Result<Var> {
    let (b, d_in) = g.value(x).dims2()?;
    let (hb, hidden) = g.value(h_prev).dims2()?;
    let (wr, wc) = g.value(p.w_ih).dims2()?;
    let (hr, hc) = g.value(p.w_hh).dims2()?;
    if hb != b || wr != d_in || wc != 3 * hidden || hr != hidden || hc != 3 * hidden {
        return shape_err(format!(
            "gru_cell: x {b}x{d_in}, h {hb}x{hidden}, w_ih {wr}x{wc}, w_hh {hr}x{hc}"
        ));
    }
    let gi = linear(g, x, p.w_ih, Some(p.b_ih))?;
    let gh = linear(g, h_prev, p.w_hh, Some(p.b_hh))?;
    let i_r = g.slice_cols(gi, 0, hidden)?;
    let i_u = g.slice_cols(gi, hidden, hidden)?;
    let i_n = g.slice_cols(gi, 2 * hidden, hidden)?;
    let h_r = g.slice_cols(gh, 0, hidden)?;
    let h_u = g.slice_cols(gh, hidden, hidden)?;
    let h_n = g.slice_cols(gh, 2 * hidden, hidden)?;
    let pre_r = g.add(i_r, h_r)?;
    let r = g.sigmoid(pre_r)?;
    let pre_u = g.add(i_u, h_u)?;
    let u = g.sigmoid(pre_u)?;
    let gated = g.mul(r, h_n)?;
    let pre_n = g.add(i_n, gated)?;
    let n = g.tanh(pre_n)?;
    let diff = g.sub(h_prev, n)?;
    let keep = g.mul(u, diff)?;
    g.add(n, keep)
}
