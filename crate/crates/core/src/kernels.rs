//! Convolution lowering (im2col / col2im) and a row-partitioned GEMM.
//!
//! Every product is split over rows of the output matrix only, so each
//! output element is accumulated in the same order whatever the thread
//! count. Results are therefore bit-identical between 1 and N threads.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the worker threads used by the numeric kernels (minimum 1).
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Strided view of a row-major (or transposed) matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn rm(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn tr(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let workers = threads().min(m / 16).max(1);
    if workers == 1 {
        gemm_rows(0, m, k, n, a, b, beta, c);
        return;
    }
    let chunk = m.div_ceil(workers);
    std::thread::scope(|s| {
        for (i, c_rows) in c[..m * n].chunks_mut(chunk * n).enumerate() {
            let row0 = i * chunk;
            let rows = c_rows.len() / n;
            s.spawn(move || gemm_rows(row0, rows, k, n, a, b, beta, c_rows));
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_rows(row0: usize, rows: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    let a_off = row0 as isize * a.rs;
    let a_data = &a.data[a_off as usize..];
    // SAFETY: every pointer/stride pair addresses elements inside the
    // borrowed slices: a covers rows [row0, row0 + rows) x k, b covers k x n
    // and c holds rows x n row-major values.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            k,
            n,
            1.0,
            a_data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial bookkeeping for one convolution: input `c x h x w`, kernel
/// `kh x kw`, output `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lowers a batch `[n, c, h, w]` into columns `[c*kh*kw, n*oh*ow]`.
pub(crate) fn im2col(x: &[f32], n: usize, g: &Geometry) -> Vec<f32> {
    let p = g.out_plane();
    let np = n * p;
    let mut cols = vec![0.0f32; g.rows() * np];
    let plane = g.h * g.w;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let src = &x[(b * g.c + ci) * plane..(b * g.c + ci + 1) * plane];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into `[n, c, h, w]`,
/// accumulating overlapping windows.
pub(crate) fn col2im(cols: &[f32], n: usize, g: &Geometry) -> Vec<f32> {
    let p = g.out_plane();
    let np = n * p;
    let plane = g.h * g.w;
    let mut x = vec![0.0f32; n * g.c * plane];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for b in 0..n {
                    let dst = &mut x[(b * g.c + ci) * plane..(b * g.c + ci + 1) * plane];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, f, p]` (NCHW with flattened plane) to `[f, n*p]`.
pub(crate) fn nfp_to_fnp(x: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for fi in 0..f {
            let src = &x[(b * f + fi) * p..(b * f + fi + 1) * p];
            out[fi * n * p + b * p..fi * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`nfp_to_fnp`].
pub(crate) fn fnp_to_nfp(x: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for fi in 0..f {
        for b in 0..n {
            let src = &x[fi * n * p + b * p..fi * n * p + (b + 1) * p];
            out[(b * f + fi) * p..(b * f + fi + 1) * p].copy_from_slice(src);
        }
    }
    out
}
