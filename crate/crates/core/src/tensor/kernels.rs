//! Raw numeric kernels on row-major slices. No shape validation happens here.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold exactly the m×k, k×n and m×n row-major blocks
    // addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `c[m×n] += aᵀ · b` with `a` stored `[k×m]`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as in `gemm_acc`, with `a` read column-major.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] += a · bᵀ` with `b` stored `[n×k]`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: as in `gemm_acc`, with `b` read column-major.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `channels × height × width` image.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let out = |extent: usize| {
            let padded = extent + 2 * padding;
            if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                None
            } else {
                Some((padded - kernel) / stride + 1)
            }
        };
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: out(height)?,
            out_w: out(width)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[C,H,W]` into `[C·k·k, Ho·Wo]`.
pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = oi as isize * s - p + ki as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = oj as isize * s - p + kj as isize;
                        *v = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `[C·k·k, Ho·Wo]` back into an image `[C,H,W]` (adjoint of `im2col`).
pub fn col2im_acc(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = oi as isize * s - p + ki as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let jj = oj as isize * s - p + kj as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `x: [B, C_in, H, W]`, `w: [C_out, C_in, k, k]` → `[B, C_out, Ho, Wo]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], batch: usize, c_out: usize, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = c_out * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        gemm_acc(
            w,
            &col,
            &mut out[b * out_len..(b + 1) * out_len],
            c_out,
            g.col_rows(),
            g.col_cols(),
        );
    }
    out
}

/// Gradients of `conv2d_forward` given upstream `dy`. Either output may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = c_out * g.col_cols();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    if let Some(dw) = dw {
        let mut col = vec![0.0; rows * cols];
        for b in 0..batch {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            gemm_nt_acc(&dy[b * out_len..(b + 1) * out_len], &col, dw, c_out, cols, rows);
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; rows * cols];
        for b in 0..batch {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn_acc(w, &dy[b * out_len..(b + 1) * out_len], &mut dcol, rows, c_out, cols);
            col2im_acc(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Transposed convolution: the input-gradient map of `conv2d_forward` with geometry `g`.
/// `x: [B, C_out, Ho, Wo]`, `w: [C_out, C_in, k, k]` → `[B, C_in, H, W]`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.channels * g.height * g.width];
    conv2d_backward(&[], w, x, batch, c_out, g, Some(&mut out), None);
    out
}

/// Gradients of `conv_transpose2d_forward`.
pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let img_len = g.channels * g.height * g.width;
    let small_len = c_out * g.col_cols();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..batch {
        im2col(&dy[b * img_len..(b + 1) * img_len], g, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            gemm_acc(w, &col, &mut dx[b * small_len..(b + 1) * small_len], c_out, rows, cols);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm_nt_acc(&x[b * small_len..(b + 1) * small_len], &col, dw, c_out, cols, rows);
        }
    }
}

/// Group normalization statistics: returns `(normalized, rstd)` with `rstd` per (sample, group).
pub fn group_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let per_group = channels / groups * spatial;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; batch * groups];
    for bg in 0..batch * groups {
        let seg = &x[bg * per_group..(bg + 1) * per_group];
        let mean = seg.iter().sum::<f64>() / per_group as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[bg] = r;
        for (o, v) in xhat[bg * per_group..(bg + 1) * per_group].iter_mut().zip(seg) {
            *o = (v - mean) * r;
        }
    }
    (xhat, rstd)
}

/// Input gradient of group normalization from the gradient w.r.t. `xhat`.
pub fn group_norm_backward(dxhat: &[f64], xhat: &[f64], rstd: &[f64], per_group: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (bg, r) in rstd.iter().enumerate() {
        let range = bg * per_group..(bg + 1) * per_group;
        let dh = &dxhat[range.clone()];
        let xh = &xhat[range.clone()];
        let mean_dh = dh.iter().sum::<f64>() / per_group as f64;
        let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per_group as f64;
        for ((o, d), h) in dx[range].iter_mut().zip(dh).zip(xh) {
            *o = r * (d - mean_dh - h * mean_dhx);
        }
    }
    dx
}
