//! Matrix product, transpose, and 2-D convolution (with their adjoints).
//!
//! conv2d is cross-correlation with zero padding: kernels are applied as
//! stored, never flipped. It lowers each batch item to an im2col matrix and
//! runs the matmul kernels below; the backward pass recomputes the im2col
//! gather instead of keeping it alive, trading a cheap re-gather for memory.

use super::{Tensor, TensorError};

// ── Raw kernels ──────────────────────────────────────────────────────

/// out += A[m,k] · B[k,n]; `out` must arrive zeroed unless accumulating.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out += A[m,k] · B[n,k]ᵀ.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out += A[m,k]ᵀ · B[m,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Gathers one image [C,H,W] into columns [C·kh·kw, outH·outW].
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    debug_assert_eq!(col.len(), g.patch_len() * g.positions());
    let positions = g.positions();
    let mut row = 0;
    for c in 0..g.in_c {
        let chan = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let dst = &mut col[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + di) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        dst[p..p + g.out_w].fill(0.0);
                        p += g.out_w;
                        continue;
                    }
                    let src_row = &chan[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + dj) as isize - g.padding as isize;
                        dst[p] = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns back into an image (adjoint of `im2col`).
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let positions = g.positions();
    let mut row = 0;
    for c in 0..g.in_c {
        let chan = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let src = &col[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + di) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        p += g.out_w;
                        continue;
                    }
                    let dst_row =
                        &mut chan[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + dj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst_row[iw as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tensor {
    /// Standard product of a [m,k] by a [k,n] matrix.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "matmul expects rank-2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul inner extents differ: {sa:?} × {sb:?}"
            )));
        }
        let mut out = vec![0.0; m * n];
        self.with_data(|a| other.with_data(|b| matmul_nn(a, b, m, k, n, &mut out)));
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut ga = vec![0.0; m * k];
                    parents[1].with_data(|b| matmul_nt(g, b, m, n, k, &mut ga));
                    parents[0].accumulate_grad(&ga);
                }
                if parents[1].tracks_grad() {
                    let mut gb = vec![0.0; k * n];
                    parents[0].with_data(|a| matmul_tn(a, g, m, k, n, &mut gb));
                    parents[1].accumulate_grad(&gb);
                }
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "transpose2d expects rank 2, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        self.with_data(|d| {
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
        });
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; r * c];
                    for j in 0..c {
                        for i in 0..r {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Cross-correlation of [B,C,H,W] with kernels [O,C,kh,kw].
    ///
    /// Output spatial extents follow floor((H + 2·padding − kh)/stride) + 1.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d expects [B,C,H,W] and [O,C,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Domain("conv2d stride must be >= 1".into()));
        }
        let (batch, in_c, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != in_c {
            return Err(TensorError::Dimension(format!(
                "conv2d channel mismatch: input C={in_c}, kernel C={kc}"
            )));
        }
        if kh > in_h + 2 * padding || kw > in_w + 2 * padding {
            return Err(TensorError::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        let out_h = (in_h + 2 * padding - kh) / stride + 1;
        let out_w = (in_w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let patch = geom.patch_len();
        let positions = geom.positions();
        let img = in_c * in_h * in_w;
        let out_img = out_c * positions;

        let mut out = vec![0.0; batch * out_img];
        let mut col = vec![0.0; patch * positions];
        self.with_data(|x| {
            kernel.with_data(|w| {
                for b in 0..batch {
                    im2col(&x[b * img..(b + 1) * img], &geom, &mut col);
                    matmul_nn(
                        w,
                        &col,
                        out_c,
                        patch,
                        positions,
                        &mut out[b * out_img..(b + 1) * out_img],
                    );
                }
            })
        });

        Ok(Tensor::from_op(
            vec![batch, out_c, out_h, out_w],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, parents| {
                let need_x = parents[0].tracks_grad();
                let need_w = parents[1].tracks_grad();
                if !need_x && !need_w {
                    return;
                }
                let mut col = vec![0.0; patch * positions];
                let mut gx = if need_x {
                    vec![0.0; batch * img]
                } else {
                    Vec::new()
                };
                let mut gw = if need_w {
                    vec![0.0; out_c * patch]
                } else {
                    Vec::new()
                };
                parents[0].with_data(|x| {
                    parents[1].with_data(|w| {
                        let mut gcol = vec![0.0; patch * positions];
                        for b in 0..batch {
                            let gout = &g[b * out_img..(b + 1) * out_img];
                            if need_w {
                                im2col(&x[b * img..(b + 1) * img], &geom, &mut col);
                                matmul_nt(gout, &col, out_c, positions, patch, &mut gw);
                            }
                            if need_x {
                                gcol.fill(0.0);
                                matmul_tn(w, gout, out_c, patch, positions, &mut gcol);
                                col2im(&gcol, &geom, &mut gx[b * img..(b + 1) * img]);
                            }
                        }
                    })
                });
                if need_x {
                    parents[0].accumulate_grad(&gx);
                }
                if need_w {
                    parents[1].accumulate_grad(&gw);
                }
            }),
        ))
    }
}
