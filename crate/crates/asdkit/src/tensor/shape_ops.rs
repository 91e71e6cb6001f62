//! Shape manipulation, reductions, broadcasts, and per-row indexing.
//!
//! Reductions remove the reduced axes from the output shape. Broadcast
//! helpers are deliberately specific (row, column, channel) rather than a
//! general broadcasting engine; these three patterns cover the entire
//! pipeline and keep every backward rule obvious.

use super::{numel_of, Tensor, TensorError};

/// Splits a flat index into coordinates for `shape` (row-major).
fn unravel(mut idx: usize, shape: &[usize], coords: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] = idx % shape[d];
        idx /= shape[d];
    }
}

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<(), TensorError> {
    if axes.is_empty() {
        return Err(TensorError::Domain("reduction needs at least one axis".into()));
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Domain(format!(
                "axis {a} out of range for shape {shape:?}"
            )));
        }
        if seen[a] {
            return Err(TensorError::Domain(format!("duplicate reduction axis {a}")));
        }
        seen[a] = true;
        if shape[a] == 0 {
            return Err(TensorError::Domain(format!(
                "empty reduction axis {a} in shape {shape:?}"
            )));
        }
    }
    Ok(())
}

/// For every input flat index, the flat index of its output slot once
/// `axes` are collapsed. Also returns the output shape and reduced count.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let rank = shape.len();
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let out_shape: Vec<usize> = (0..rank)
        .filter(|&d| !reduced[d])
        .map(|d| shape[d])
        .collect();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let n = numel_of(shape);
    let mut map = vec![0usize; n];
    let mut coords = vec![0usize; rank];
    for (idx, slot) in map.iter_mut().enumerate() {
        unravel(idx, shape, &mut coords);
        let mut out = 0usize;
        for d in 0..rank {
            if !reduced[d] {
                out = out * shape[d] + coords[d];
            }
        }
        *slot = out;
    }
    (map, out_shape, count)
}

impl Tensor {
    /// Same data, new shape with identical element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel_of(new_shape) != self.numel() {
            return Err(TensorError::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents| {
                if parents[0].tracks_grad() {
                    parents[0].accumulate_grad(g);
                }
            }),
        ))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| {
                p < rank && !std::mem::replace(&mut seen[p], true)
            });
        if !valid {
            return Err(TensorError::Domain(format!(
                "permute {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = self.with_data(|d| permute_data(d, &shape, perm, &out_shape));
        let perm_owned = perm.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut inverse = vec![0usize; perm_owned.len()];
                    for (d, &p) in perm_owned.iter().enumerate() {
                        inverse[p] = d;
                    }
                    let in_shape = parents[0].shape().to_vec();
                    let gx = permute_data(g, &out_shape, &inverse, &in_shape);
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        validate_axes(&shape, axes)?;
        let (map, out_shape, _) = reduction_map(&shape, axes);
        let mut out = vec![0.0; numel_of(&out_shape)];
        self.with_data(|d| {
            for (idx, &slot) in map.iter().enumerate() {
                out[slot] += d[idx];
            }
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx: Vec<f64> = map.iter().map(|&slot| g[slot]).collect();
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        validate_axes(&shape, axes)?;
        let (map, out_shape, count) = reduction_map(&shape, axes);
        let inv = 1.0 / count as f64;
        let mut out = vec![0.0; numel_of(&out_shape)];
        self.with_data(|d| {
            for (idx, &slot) in map.iter().enumerate() {
                out[slot] += d[idx] * inv;
            }
        });
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx: Vec<f64> = map.iter().map(|&slot| g[slot] * inv).collect();
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Maximum over `axes`; the gradient routes only to the first element
    /// attaining the maximum in each output slot.
    pub fn reduce_max(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        validate_axes(&shape, axes)?;
        let (map, out_shape, _) = reduction_map(&shape, axes);
        let out_n = numel_of(&out_shape);
        let mut out = vec![f64::NEG_INFINITY; out_n];
        let mut argmax = vec![usize::MAX; out_n];
        self.with_data(|d| {
            for (idx, &slot) in map.iter().enumerate() {
                if d[idx] > out[slot] {
                    out[slot] = d[idx];
                    argmax[slot] = idx;
                }
            }
        });
        let in_n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; in_n];
                    for (slot, &idx) in argmax.iter().enumerate() {
                        gx[idx] += g[slot];
                    }
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Elementwise clip to [lo, hi]; gradient passes only where lo ≤ x ≤ hi.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.with_data(|d| d.iter().map(|v| v.clamp(lo, hi)).collect());
        super::unary_borrow_parent(self, data, move |g, x| {
            g.iter()
                .zip(x)
                .map(|(gv, xv)| if *xv >= lo && *xv <= hi { *gv } else { 0.0 })
                .collect()
        })
    }

    /// out[r] = self[r, cols[r]] for a rank-2 tensor.
    pub fn take_per_row(&self, cols: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "take_per_row expects rank 2, got {s:?}"
            )));
        }
        let (r, k) = (s[0], s[1]);
        if cols.len() != r {
            return Err(TensorError::Contract(format!(
                "take_per_row got {} indices for {r} rows",
                cols.len()
            )));
        }
        if let Some(bad) = cols.iter().find(|&&c| c >= k) {
            return Err(TensorError::Contract(format!(
                "take_per_row column {bad} out of range 0..{k}"
            )));
        }
        let cols_owned = cols.to_vec();
        let out = self.with_data(|d| {
            cols_owned
                .iter()
                .enumerate()
                .map(|(row, &c)| d[row * k + c])
                .collect()
        });
        Ok(Tensor::from_op(
            vec![r],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; r * k];
                    for (row, &c) in cols_owned.iter().enumerate() {
                        gx[row * k + c] += g[row];
                    }
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Copies self with out[r, cols[r]] = values[r]; gradient splits between
    /// the untouched entries (to self) and the written ones (to values).
    pub fn replace_per_row(
        &self,
        cols: &[usize],
        values: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "replace_per_row expects rank 2, got {s:?}"
            )));
        }
        let (r, k) = (s[0], s[1]);
        if values.shape() != [r] {
            return Err(TensorError::Dimension(format!(
                "replace_per_row values shape {:?}, want [{r}]",
                values.shape()
            )));
        }
        if cols.len() != r || cols.iter().any(|&c| c >= k) {
            return Err(TensorError::Contract(format!(
                "replace_per_row indices invalid for [{r}, {k}]"
            )));
        }
        let cols_owned = cols.to_vec();
        let mut out = self.to_vec();
        values.with_data(|v| {
            for (row, &c) in cols_owned.iter().enumerate() {
                out[row * k + c] = v[row];
            }
        });
        Ok(Tensor::from_op(
            vec![r, k],
            out,
            vec![self.clone(), values.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = g.to_vec();
                    for (row, &c) in cols_owned.iter().enumerate() {
                        gx[row * k + c] = 0.0;
                    }
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].tracks_grad() {
                    let gv: Vec<f64> = cols_owned
                        .iter()
                        .enumerate()
                        .map(|(row, &c)| g[row * k + c])
                        .collect();
                    parents[1].accumulate_grad(&gv);
                }
            }),
        ))
    }

    /// Repeats each row of a rank-2 tensor `times` times consecutively:
    /// [N, D] -> [N·times, D].
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "repeat_rows expects rank 2, got {s:?}"
            )));
        }
        if times == 0 {
            return Err(TensorError::Domain("repeat_rows times must be >= 1".into()));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(n * times * d);
        self.with_data(|x| {
            for row in 0..n {
                for _ in 0..times {
                    out.extend_from_slice(&x[row * d..(row + 1) * d]);
                }
            }
        });
        Ok(Tensor::from_op(
            vec![n * times, d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; n * d];
                    for row in 0..n {
                        for t in 0..times {
                            let src = &g[(row * times + t) * d..(row * times + t + 1) * d];
                            for (a, b) in gx[row * d..(row + 1) * d].iter_mut().zip(src) {
                                *a += *b;
                            }
                        }
                    }
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// [R, C] + [C], the linear-layer bias pattern.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || row.shape() != [s[1]] {
            return Err(TensorError::Dimension(format!(
                "add_row_broadcast: {:?} + {:?}",
                s,
                row.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = self.with_data(|x| {
            row.with_data(|b| {
                let mut o = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        o.push(x[i * c + j] + b[j]);
                    }
                }
                o
            })
        });
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    parents[0].accumulate_grad(g);
                }
                if parents[1].tracks_grad() {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// [R, C] ⊙ [C], every row scaled elementwise (window application).
    pub fn mul_row_broadcast(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || row.shape() != [s[1]] {
            return Err(TensorError::Dimension(format!(
                "mul_row_broadcast: {:?} x {:?}",
                s,
                row.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = self.with_data(|x| {
            row.with_data(|w| {
                let mut o = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        o.push(x[i * c + j] * w[j]);
                    }
                }
                o
            })
        });
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, parents| {
                let need_x = parents[0].tracks_grad();
                let need_w = parents[1].tracks_grad();
                if need_x {
                    let gx = parents[1].with_data(|w| {
                        let mut v = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for j in 0..c {
                                v.push(g[i * c + j] * w[j]);
                            }
                        }
                        v
                    });
                    parents[0].accumulate_grad(&gx);
                }
                if need_w {
                    let gw = parents[0].with_data(|x| {
                        let mut v = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                v[j] += g[i * c + j] * x[i * c + j];
                            }
                        }
                        v
                    });
                    parents[1].accumulate_grad(&gw);
                }
            }),
        ))
    }

    /// [R, C] ⊙ [R], every row scaled by its own coefficient (attention
    /// weights over time frames).
    pub fn mul_col_broadcast(&self, col: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || col.shape() != [s[0]] {
            return Err(TensorError::Dimension(format!(
                "mul_col_broadcast: {:?} x {:?}",
                s,
                col.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = self.with_data(|x| {
            col.with_data(|w| {
                let mut o = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        o.push(x[i * c + j] * w[i]);
                    }
                }
                o
            })
        });
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx = parents[1].with_data(|w| {
                        let mut v = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for j in 0..c {
                                v.push(g[i * c + j] * w[i]);
                            }
                        }
                        v
                    });
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].tracks_grad() {
                    let gw = parents[0].with_data(|x| {
                        let mut v = vec![0.0; r];
                        for i in 0..r {
                            for j in 0..c {
                                v[i] += g[i * c + j] * x[i * c + j];
                            }
                        }
                        v
                    });
                    parents[1].accumulate_grad(&gw);
                }
            }),
        ))
    }

    /// [B, C, ...spatial] ⊙ [B, C]: squeeze-excitation channel gating.
    pub fn mul_channelwise(&self, gates: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() < 2 || gates.shape() != [s[0], s[1]] {
            return Err(TensorError::Dimension(format!(
                "mul_channelwise: {:?} x {:?}",
                s,
                gates.shape()
            )));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let out = self.with_data(|x| {
            gates.with_data(|w| {
                let mut o = Vec::with_capacity(x.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let gval = w[bi * c + ci];
                        let base = (bi * c + ci) * spatial;
                        for k in 0..spatial {
                            o.push(x[base + k] * gval);
                        }
                    }
                }
                o
            })
        });
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gates.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx = parents[1].with_data(|w| {
                        let mut v = Vec::with_capacity(g.len());
                        for bi in 0..b {
                            for ci in 0..c {
                                let gval = w[bi * c + ci];
                                let base = (bi * c + ci) * spatial;
                                for k in 0..spatial {
                                    v.push(g[base + k] * gval);
                                }
                            }
                        }
                        v
                    });
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].tracks_grad() {
                    let gw = parents[0].with_data(|x| {
                        let mut v = vec![0.0; b * c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                let mut acc = 0.0;
                                for k in 0..spatial {
                                    acc += g[base + k] * x[base + k];
                                }
                                v[bi * c + ci] = acc;
                            }
                        }
                        v
                    });
                    parents[1].accumulate_grad(&gw);
                }
            }),
        ))
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for (idx, &v) in data.iter().enumerate() {
        unravel(idx, shape, &mut coords);
        let mut o = 0usize;
        for (d, &p) in perm.iter().enumerate() {
            o = o * out_shape[d] + coords[p];
        }
        out[o] = v;
    }
    out
}
