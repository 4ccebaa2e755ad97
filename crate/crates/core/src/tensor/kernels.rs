// Raw numeric kernels shared by forward and backward passes.

/// Strided matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + (accumulate ? c : 0)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: &mut [f64], accumulate: bool) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views describe in-bounds strided matrices of the stated
    // dimensions (checked by callers through tensor shapes) and `c` does
    // not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies
/// inside `0..extent`, as a half-open range.
fn valid_range(out: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `items` consecutive images into a `[C*kh*kw, items*out_h*out_w]`
/// column matrix (image index varies slowest along the columns).
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, items: usize, cols: &mut [f64]) {
    let plane = g.height * g.width;
    let per_item = g.col_cols();
    let ncols = items * per_item;
    let s = g.stride;
    for c in 0..g.channels {
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, s, ky, g.pad);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, s, kx, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for item in 0..items {
                    let src = &input[(item * g.channels + c) * plane..][..plane];
                    let dst = &mut dst_row[item * per_item..(item + 1) * per_item];
                    for oy in 0..g.out_h {
                        let dst_line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if oy < y_lo || oy >= y_hi {
                            dst_line.fill(0.0);
                            continue;
                        }
                        let iy = oy * s + ky - g.pad;
                        let line = &src[iy * g.width..][..g.width];
                        dst_line[..x_lo].fill(0.0);
                        dst_line[x_hi..].fill(0.0);
                        let x0 = x_lo * s + kx - g.pad;
                        if s == 1 {
                            dst_line[x_lo..x_hi].copy_from_slice(&line[x0..x0 + (x_hi - x_lo)]);
                        } else {
                            for (d, &v) in dst_line[x_lo..x_hi].iter_mut().zip(line[x0..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into image gradients.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, items: usize, grad_input: &mut [f64]) {
    let plane = g.height * g.width;
    let per_item = g.col_cols();
    let ncols = items * per_item;
    let s = g.stride;
    for c in 0..g.channels {
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, s, ky, g.pad);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, s, kx, g.pad);
                if x_lo >= x_hi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for item in 0..items {
                    let dst = &mut grad_input[(item * g.channels + c) * plane..][..plane];
                    let src = &src_row[item * per_item..(item + 1) * per_item];
                    for oy in y_lo..y_hi {
                        let iy = oy * s + ky - g.pad;
                        let line = &mut dst[iy * g.width..][..g.width];
                        let x0 = x_lo * s + kx - g.pad;
                        let from = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                        if s == 1 {
                            for (d, &v) in line[x0..x0 + from.len()].iter_mut().zip(from) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in line[x0..].iter_mut().step_by(s).zip(from) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of images unfolded per im2col chunk, bounding scratch memory.
pub(crate) fn conv_chunk(g: &ConvGeom, batch: usize) -> usize {
    const SCRATCH_ELEMS: usize = 1 << 21;
    let per_item = g.col_rows() * g.col_cols();
    (SCRATCH_ELEMS / per_item.max(1)).clamp(1, batch.max(1))
}

/// Convolutions with at most this many filters skip im2col: a gemm with so
/// few rows degenerates to a memory-bound matrix-vector product.
pub(crate) const DIRECT_MAX_FILTERS: usize = 4;

/// Direct cross-correlation; `out` must be zeroed `[B, F, out_h, out_w]`.
pub(crate) fn conv_direct(input: &[f64], kernel: &[f64], g: &ConvGeom, batch: usize, filters: usize, out: &mut [f64]) {
    let plane = g.height * g.width;
    let oplane = g.col_cols();
    let s = g.stride;
    for b in 0..batch {
        for c in 0..g.channels {
            let src = &input[(b * g.channels + c) * plane..][..plane];
            for f in 0..filters {
                let dst = &mut out[(b * filters + f) * oplane..][..oplane];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = valid_range(g.out_h, g.height, s, ky, g.pad);
                    for kx in 0..g.kw {
                        let (x_lo, x_hi) = valid_range(g.out_w, g.width, s, kx, g.pad);
                        let w = kernel[((f * g.channels + c) * g.kh + ky) * g.kw + kx];
                        if x_lo >= x_hi {
                            continue;
                        }
                        let x0 = x_lo * s + kx - g.pad;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - g.pad;
                            let line = &src[iy * g.width..][..g.width];
                            let o = &mut dst[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                            if s == 1 {
                                for (d, &v) in o.iter_mut().zip(&line[x0..x0 + (x_hi - x_lo)]) {
                                    *d += w * v;
                                }
                            } else {
                                for (d, &v) in o.iter_mut().zip(line[x0..].iter().step_by(s)) {
                                    *d += w * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv_direct`]; both outputs are accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_direct_backward(
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    batch: usize,
    filters: usize,
    mut ginput: Option<&mut [f64]>,
    mut gkernel: Option<&mut [f64]>,
) {
    let plane = g.height * g.width;
    let oplane = g.col_cols();
    let s = g.stride;
    for b in 0..batch {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * plane;
            for f in 0..filters {
                let go = &gout[(b * filters + f) * oplane..][..oplane];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = valid_range(g.out_h, g.height, s, ky, g.pad);
                    for kx in 0..g.kw {
                        let (x_lo, x_hi) = valid_range(g.out_w, g.width, s, kx, g.pad);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let ki = ((f * g.channels + c) * g.kh + ky) * g.kw + kx;
                        let w = kernel[ki];
                        let x0 = x_lo * s + kx - g.pad;
                        let mut dot = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - g.pad;
                            let grow = &go[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                            if let Some(gi) = ginput.as_deref_mut() {
                                let line = &mut gi[base + iy * g.width..][..g.width];
                                for (d, &v) in line[x0..].iter_mut().step_by(s).zip(grow) {
                                    *d += w * v;
                                }
                            }
                            if gkernel.is_some() {
                                let line = &input[base + iy * g.width..][..g.width];
                                for (&a, &v) in line[x0..].iter().step_by(s).zip(grow) {
                                    dot += a * v;
                                }
                            }
                        }
                        if let Some(gk) = gkernel.as_deref_mut() {
                            gk[ki] += dot;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation through im2col and gemm, chunked over the batch.
pub(crate) fn conv_im2col(input: &[f64], kernel: &[f64], g: &ConvGeom, batch: usize, filters: usize, out: &mut [f64]) {
    let plane = g.col_cols();
    let in_item = g.channels * g.height * g.width;
    let chunk = conv_chunk(g, batch);
        let mut cols = vec![0.0; g.col_rows() * chunk * plane];
        let mut tmp = vec![0.0; filters * chunk * plane];
        let mut b0 = 0;
        while b0 < batch {
            let items = chunk.min(batch - b0);
            let ncols = items * plane;
            im2col(&input[b0 * in_item..], g, items, &mut cols);
            gemm(
                filters,
                g.col_rows(),
                ncols,
                MatRef::row_major(kernel, g.col_rows()),
                MatRef::row_major(&cols, ncols),
                &mut tmp,
                false,
            );
            for it in 0..items {
                for f in 0..filters {
                    let dst = &mut out[((b0 + it) * filters + f) * plane..][..plane];
                    dst.copy_from_slice(&tmp[f * ncols + it * plane..][..plane]);
                }
            }
            b0 += items;
        }
}
