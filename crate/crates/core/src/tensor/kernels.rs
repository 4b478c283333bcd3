//! Raw numeric kernels on flat row-major buffers.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers whose lengths were asserted.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox + kj - pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let ow = g.out_w();
    let lo = g.pad.saturating_sub(kj);
    let hi = (g.w + g.pad).saturating_sub(kj).min(ow);
    (lo, hi.max(lo))
}

/// Unfolds sample `n` of `x` into columns `n*oh*ow..` of `cols`, which is
/// `[cin*kh*kw, ld]`.
fn im2col(g: &ConvGeom, x: &[f64], n: usize, cols: &mut [f64], ld: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let xs = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
    let off = n * oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy + ki).wrapping_sub(g.pad);
                    if iy >= g.h || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let src = (c * g.h + iy) * g.w + lo + kj - g.pad;
                    line[lo..hi].copy_from_slice(&xs[src..src + hi - lo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns of sample `n` back into `dx`, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, n: usize, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let dxs = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
    let off = n * oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..oh {
                    let iy = (oy + ki).wrapping_sub(g.pad);
                    if iy >= g.h {
                        continue;
                    }
                    let base = (c * g.h + iy) * g.w + lo + kj - g.pad;
                    for (d, s) in dxs[base..base + hi - lo]
                        .iter_mut()
                        .zip(&src[oy * ow + lo..oy * ow + hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` to `[C, N*P]`.
fn to_channel_major(src: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        for ch in 0..c {
            let s = &src[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// `[C, N*P]` to `[N, C, P]`.
fn to_sample_major(src: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        for ch in 0..c {
            let s = &src[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane];
            out[(i * c + ch) * plane..(i * c + ch + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// Unfolded input `[cin*kh*kw, N*oh*ow]` (channel-major input for 1x1 kernels).
fn unfold(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    if g.is_pointwise() {
        return to_channel_major(x, g.n, g.cin, plane);
    }
    let ld = g.n * plane;
    let mut cols = vec![0.0; g.col_rows() * ld];
    for n in 0..g.n {
        im2col(g, x, n, &mut cols, ld);
    }
    cols
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let ld = g.n * plane;
    let cols = unfold(g, x);
    let mut out = vec![0.0; g.cout * ld];
    for (co, chunk) in out.chunks_mut(ld).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(
        g.cout,
        g.col_rows(),
        ld,
        w,
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    to_sample_major(&out, g.n, g.cout, plane)
}

/// Returns `(dx, dw, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_h() * g.out_w();
    let ld = g.n * plane;
    let krows = g.col_rows();
    let dout_t = to_channel_major(dout, g.n, g.cout, plane);
    let db = need_db.then(|| dout_t.chunks(ld).map(|c| c.iter().sum()).collect());
    let dw = need_dw.then(|| {
        let cols = unfold(g, x);
        let mut dw = vec![0.0; w.len()];
        // dw[cout, krows] = dout[cout, ld] · cols[krows, ld]^T
        gemm(
            g.cout, ld, krows, &dout_t, false, &cols, true, &mut dw, false,
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; krows * ld];
        gemm(
            krows, g.cout, ld, w, true, &dout_t, false, &mut dcols, false,
        );
        if g.is_pointwise() {
            return to_sample_major(&dcols, g.n, g.cin, plane);
        }
        let mut dx = vec![0.0; x.len()];
        for n in 0..g.n {
            col2im(g, &dcols, ld, n, &mut dx);
        }
        dx
    });
    (dx, dw, db)
}
