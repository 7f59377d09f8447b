//! Dense numeric kernels shared by the forward and backward passes.

/// `c (m×n) = op(a) · op(b)` (+ `c` when `accumulate`), all row-major.
///
/// `op(a)` is `m×k`; when `a_t` is set `a` is stored as `k×m`. Likewise
/// `op(b)` is `k×n` and stored as `n×k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 1-D convolution over `[batch, channels, length]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub len_out: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// Samples unfolded together so each GEMM is wide enough to amortise packing.
const CHUNK_COLS: usize = 8192;

/// Output positions `o` whose input tap `o * stride + offset` lies inside
/// `0..len_in`.
fn valid_range(g: &ConvGeom, offset: isize) -> (usize, usize) {
    let s = g.stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let room = g.len_in as isize - offset;
    let hi = if room > 0 { (((room + s - 1) / s) as usize).min(g.len_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one sample `[c_in, len_in]` into column block `[c_in * kernel, len_out]`
/// of a matrix whose rows are `ld` wide.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64], ld: usize) {
    let lo = g.len_out;
    for k in 0..g.kernel {
        let offset = k as isize - g.padding as isize;
        let (a, b) = valid_range(g, offset);
        for ci in 0..g.c_in {
            let xrow = &x[ci * g.len_in..(ci + 1) * g.len_in];
            let r = ci * g.kernel + k;
            let dst = &mut cols[r * ld..r * ld + lo];
            dst[..a].fill(0.0);
            dst[b..].fill(0.0);
            if a == b {
                continue;
            }
            let first = (a * g.stride) as isize + offset;
            if g.stride == 1 {
                dst[a..b].copy_from_slice(&xrow[first as usize..first as usize + (b - a)]);
            } else {
                for (d, &v) in dst[a..b].iter_mut().zip(xrow[first as usize..].iter().step_by(g.stride)) {
                    *d = v;
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, dx: &mut [f64]) {
    for k in 0..g.kernel {
        let offset = k as isize - g.padding as isize;
        let (a, b) = valid_range(g, offset);
        if a == b {
            continue;
        }
        let first = ((a * g.stride) as isize + offset) as usize;
        for ci in 0..g.c_in {
            let xrow = &mut dx[ci * g.len_in..(ci + 1) * g.len_in];
            let r = ci * g.kernel + k;
            let src = &cols[r * ld + a..r * ld + b];
            for (d, s) in xrow[first..].iter_mut().step_by(g.stride).zip(src) {
                *d += s;
            }
        }
    }
}

fn chunk_len(g: &ConvGeom) -> usize {
    (CHUNK_COLS / g.len_out.max(1)).clamp(1, g.batch.max(1))
}

/// Copy `[nb, c, lo]` sample-major data to or from a `[c, nb * lo]` matrix.
fn reorder(nb: usize, c: usize, lo: usize, sample_major: &mut [f64], channel_major: &mut [f64], to_channel: bool) {
    let ld = nb * lo;
    for s in 0..nb {
        for ch in 0..c {
            let a = &mut sample_major[(s * c + ch) * lo..(s * c + ch + 1) * lo];
            let b = &mut channel_major[ch * ld + s * lo..ch * ld + (s + 1) * lo];
            if to_channel {
                b.copy_from_slice(a);
            } else {
                a.copy_from_slice(b);
            }
        }
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let in_stride = g.c_in * g.len_in;
    let out_stride = g.c_out * g.len_out;
    let rows = g.col_rows();
    let lo = g.len_out;
    let mut out = vec![0.0; g.batch * out_stride];
    let chunk = chunk_len(g);
    let mut cols = vec![0.0; rows * chunk * lo];
    let mut tmp = vec![0.0; g.c_out * chunk * lo];
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let ld = nb * lo;
        for s in 0..nb {
            let n = n0 + s;
            im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols[s * lo..], ld);
        }
        gemm(g.c_out, rows, ld, w, false, &cols[..rows * ld], false, &mut tmp[..g.c_out * ld], false);
        reorder(nb, g.c_out, lo, &mut out[n0 * out_stride..(n0 + nb) * out_stride], &mut tmp[..g.c_out * ld], false);
        n0 += nb;
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy`.
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_stride = g.c_in * g.len_in;
    let out_stride = g.c_out * g.len_out;
    let rows = g.col_rows();
    let lo = g.len_out;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let chunk = chunk_len(g);
    let mut cols = vec![0.0; rows * chunk * lo];
    let mut dy_cm = vec![0.0; g.c_out * chunk * lo];
    let mut dy_copy = vec![0.0; chunk * out_stride];
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let ld = nb * lo;
        dy_copy[..nb * out_stride].copy_from_slice(&dy[n0 * out_stride..(n0 + nb) * out_stride]);
        reorder(nb, g.c_out, lo, &mut dy_copy[..nb * out_stride], &mut dy_cm[..g.c_out * ld], true);
        if let Some(dw) = dw.as_mut() {
            for s in 0..nb {
                let n = n0 + s;
                im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols[s * lo..], ld);
            }
            gemm(g.c_out, ld, rows, &dy_cm[..g.c_out * ld], false, &cols[..rows * ld], true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.c_out, ld, w, true, &dy_cm[..g.c_out * ld], false, &mut cols[..rows * ld], false);
            for s in 0..nb {
                let n = n0 + s;
                col2im(g, &cols[s * lo..], ld, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
        n0 += nb;
    }
    (dx, dw)
}
