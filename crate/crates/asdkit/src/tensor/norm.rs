//! Softmax family, normalization layers, and cosine similarity.
//!
//! All softmax-like ops subtract the slice maximum before exponentiating,
//! so logits up to ±1000 stay finite. Cosine similarity uses the
//! `dot/(‖a‖·‖b‖ + eps)` form: the eps floor sits in the denominator sum,
//! never dividing by zero even for zero vectors.

use super::{numel_of, Tensor, TensorError};

/// outer × len × inner decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Domain(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if len == 0 {
        return Err(TensorError::Domain(format!(
            "empty axis {axis} in shape {shape:?}"
        )));
    }
    Ok((outer, len, inner))
}

/// Calls `f(start, stride)` once per slice along `axis`; elements of the
/// slice live at start + k·stride for k in 0..len.
fn for_each_slice(outer: usize, len: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

impl Tensor {
    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            for_each_slice(outer, len, inner, |start, stride| {
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(x[start + k * stride]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    sum += (x[start + k * stride] - m).exp();
                }
                let lse = m + sum.ln();
                for k in 0..len {
                    out[start + k * stride] = x[start + k * stride] - lse;
                }
            });
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for_each_slice(outer, len, inner, |start, stride| {
                        let mut gsum = 0.0;
                        for k in 0..len {
                            gsum += g[start + k * stride];
                        }
                        for k in 0..len {
                            let i = start + k * stride;
                            gx[i] = g[i] - saved[i].exp() * gsum;
                        }
                    });
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Softmax along `axis`; exp of [`Tensor::log_softmax`] with its own
    /// (cheaper) backward rule.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            for_each_slice(outer, len, inner, |start, stride| {
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(x[start + k * stride]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[start + k * stride] - m).exp();
                    out[start + k * stride] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[start + k * stride] /= sum;
                }
            });
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for_each_slice(outer, len, inner, |start, stride| {
                        let mut dot = 0.0;
                        for k in 0..len {
                            let i = start + k * stride;
                            dot += g[i] * saved[i];
                        }
                        for k in 0..len {
                            let i = start + k * stride;
                            gx[i] = saved[i] * (g[i] - dot);
                        }
                    });
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// Normalizes every slice along the last axis to zero mean and unit
    /// variance (eps-regularized). For [B,C,T] input this is instance
    /// normalization over time per (batch, channel).
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor, TensorError> {
        let shape = self.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::Dimension(
                "instance_norm needs at least rank 1".into(),
            ));
        }
        let t = *shape.last().unwrap();
        if t < 2 {
            return Err(TensorError::DegenerateInput(format!(
                "instance_norm needs >= 2 elements along the last axis, got {t}"
            )));
        }
        let slices = numel_of(&shape) / t;
        let mut out = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; slices];
        self.with_data(|x| {
            for s in 0..slices {
                let row = &x[s * t..(s + 1) * t];
                let mean = row.iter().sum::<f64>() / t as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[s] = inv;
                for (o, v) in out[s * t..(s + 1) * t].iter_mut().zip(row) {
                    *o = (v - mean) * inv;
                }
            }
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..slices {
                        let gr = &g[s * t..(s + 1) * t];
                        let yr = &saved[s * t..(s + 1) * t];
                        let g_mean = gr.iter().sum::<f64>() / t as f64;
                        let gy_mean =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / t as f64;
                        for k in 0..t {
                            gx[s * t + k] =
                                inv_std[s] * (gr[k] - g_mean - yr[k] * gy_mean);
                        }
                    }
                    parents[0].accumulate_grad(&gx);
                }
            }),
        ))
    }

    /// y[b,c,·] = x[b,c,·]·scale[c] + shift[c]; the eval-mode batch-norm
    /// pattern once running statistics are folded into scale/shift.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::Dimension(format!(
                "channel_affine needs rank >= 2, got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(TensorError::Dimension(format!(
                "channel_affine scale/shift {:?}/{:?}, want [{c}]",
                scale.shape(),
                shift.shape()
            )));
        }
        let spatial: usize = s[2..].iter().product();
        let out = self.with_data(|x| {
            scale.with_data(|sc| {
                shift.with_data(|sh| {
                    let mut o = Vec::with_capacity(x.len());
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for k in 0..spatial {
                                o.push(x[base + k] * sc[ci] + sh[ci]);
                            }
                        }
                    }
                    o
                })
            })
        });
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |g, parents| {
                if parents[0].tracks_grad() {
                    let gx = parents[1].with_data(|sc| {
                        let mut v = Vec::with_capacity(g.len());
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                for k in 0..spatial {
                                    v.push(g[base + k] * sc[ci]);
                                }
                            }
                        }
                        v
                    });
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].tracks_grad() {
                    let gs = parents[0].with_data(|x| {
                        let mut v = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                for k in 0..spatial {
                                    v[ci] += g[base + k] * x[base + k];
                                }
                            }
                        }
                        v
                    });
                    parents[1].accumulate_grad(&gs);
                }
                if parents[2].tracks_grad() {
                    let mut gb = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for k in 0..spatial {
                                gb[ci] += g[base + k];
                            }
                        }
                    }
                    parents[2].accumulate_grad(&gb);
                }
            }),
        ))
    }

    /// Train-mode batch normalization over [B,C,H,W] using batch statistics.
    ///
    /// Returns the normalized tensor plus the per-channel batch mean and
    /// biased variance so the caller can maintain running statistics.
    pub fn batch_norm2d_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>), TensorError> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "batch_norm2d_train expects [B,C,H,W], got {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::Dimension(format!(
                "batch_norm2d_train gamma/beta {:?}/{:?}, want [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let m = b * h * w;
        if m < 2 {
            return Err(TensorError::DegenerateInput(
                "batch_norm2d_train needs >= 2 values per channel".into(),
            ));
        }
        let spatial = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        self.with_data(|x| {
            for ci in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * spatial;
                    for k in 0..spatial {
                        let v = x[base + k];
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / m as f64;
                mean[ci] = mu;
                var[ci] = (sq / m as f64 - mu * mu).max(0.0);
            }
        });
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.with_data(|x| {
            gamma.with_data(|ga| {
                beta.with_data(|be| {
                    let mut o = Vec::with_capacity(x.len());
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for k in 0..spatial {
                                let xh = (x[base + k] - mean[ci]) * inv_std[ci];
                                o.push(ga[ci] * xh + be[ci]);
                            }
                        }
                    }
                    o
                })
            })
        });
        let saved_mean = mean.clone();
        let saved_inv = inv_std;
        let y = Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let need_x = parents[0].tracks_grad();
                let need_g = parents[1].tracks_grad();
                let need_b = parents[2].tracks_grad();
                if !need_x && !need_g && !need_b {
                    return;
                }
                // dbeta = Σg, dgamma = Σ g·x̂, and the standard coupled term
                // dx = γ·invstd·(g − dbeta/m − x̂·dgamma/m) from the batch
                // statistics' own dependence on x.
                let mut dbeta = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                parents[0].with_data(|x| {
                    for ci in 0..c {
                        for bi in 0..b {
                            let base = (bi * c + ci) * spatial;
                            for k in 0..spatial {
                                let xh = (x[base + k] - saved_mean[ci]) * saved_inv[ci];
                                dbeta[ci] += g[base + k];
                                dgamma[ci] += g[base + k] * xh;
                            }
                        }
                    }
                });
                if need_x {
                    let gx = parents[0].with_data(|x| {
                        parents[1].with_data(|ga| {
                            let mut v = vec![0.0; g.len()];
                            let mf = m as f64;
                            for ci in 0..c {
                                let coeff = ga[ci] * saved_inv[ci];
                                for bi in 0..b {
                                    let base = (bi * c + ci) * spatial;
                                    for k in 0..spatial {
                                        let xh = (x[base + k] - saved_mean[ci])
                                            * saved_inv[ci];
                                        v[base + k] = coeff
                                            * (g[base + k]
                                                - dbeta[ci] / mf
                                                - xh * dgamma[ci] / mf);
                                    }
                                }
                            }
                            v
                        })
                    });
                    parents[0].accumulate_grad(&gx);
                }
                if need_g {
                    parents[1].accumulate_grad(&dgamma);
                }
                if need_b {
                    parents[2].accumulate_grad(&dbeta);
                }
            }),
        );
        Ok((y, mean, var))
    }

    /// Pairwise cosine similarity: out[r,k] = a_r·b_k / (‖a_r‖·‖b_k‖ + eps)
    /// for a: [R,D], b: [K,D].
    pub fn cosine_cross(&self, other: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::Dimension(format!(
                "cosine_cross expects [R,D] and [K,D], got {sa:?} and {sb:?}"
            )));
        }
        let (r, d) = (sa[0], sa[1]);
        let k = sb[0];
        let row_norms = |t: &Tensor, n: usize| {
            t.with_data(|x| {
                (0..n)
                    .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect::<Vec<f64>>()
            })
        };
        let na = row_norms(self, r);
        let nb = row_norms(other, k);
        let mut out = vec![0.0; r * k];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..r {
                    for j in 0..k {
                        let dot: f64 = a[i * d..(i + 1) * d]
                            .iter()
                            .zip(&b[j * d..(j + 1) * d])
                            .map(|(x, y)| x * y)
                            .sum();
                        out[i * k + j] = dot / (na[i] * nb[j] + eps);
                    }
                }
            })
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            vec![r, k],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let need_a = parents[0].tracks_grad();
                let need_b = parents[1].tracks_grad();
                if !need_a && !need_b {
                    return;
                }
                parents[0].with_data(|a| {
                    parents[1].with_data(|b| {
                        if need_a {
                            let mut ga = vec![0.0; r * d];
                            for i in 0..r {
                                // Zero rows contribute nothing through the
                                // second term (c=0 and a_i=0); the max floor
                                // only avoids 0/0.
                                let na_safe = na[i].max(1e-300);
                                let mut coef = 0.0;
                                for j in 0..k {
                                    let q = na[i] * nb[j] + eps;
                                    let gq = g[i * k + j] / q;
                                    for (o, &bv) in
                                        ga[i * d..(i + 1) * d].iter_mut().zip(&b[j * d..(j + 1) * d])
                                    {
                                        *o += gq * bv;
                                    }
                                    coef += g[i * k + j] * saved[i * k + j] * nb[j] / q;
                                }
                                for (o, &av) in
                                    ga[i * d..(i + 1) * d].iter_mut().zip(&a[i * d..(i + 1) * d])
                                {
                                    *o -= coef * av / na_safe;
                                }
                            }
                            parents[0].accumulate_grad(&ga);
                        }
                        if need_b {
                            let mut gb = vec![0.0; k * d];
                            for j in 0..k {
                                let nb_safe = nb[j].max(1e-300);
                                let mut coef = 0.0;
                                for i in 0..r {
                                    let q = na[i] * nb[j] + eps;
                                    let gq = g[i * k + j] / q;
                                    for (o, &av) in
                                        gb[j * d..(j + 1) * d].iter_mut().zip(&a[i * d..(i + 1) * d])
                                    {
                                        *o += gq * av;
                                    }
                                    coef += g[i * k + j] * saved[i * k + j] * na[i] / q;
                                }
                                for (o, &bv) in
                                    gb[j * d..(j + 1) * d].iter_mut().zip(&b[j * d..(j + 1) * d])
                                {
                                    *o -= coef * bv / nb_safe;
                                }
                            }
                            parents[1].accumulate_grad(&gb);
                        }
                    })
                });
            }),
        ))
    }

    /// Row-paired cosine similarity: out[r] = a_r·b_r / (‖a_r‖·‖b_r‖ + eps)
    /// for a, b both [R,D].
    pub fn cosine_paired(&self, other: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sa != sb {
            return Err(TensorError::Dimension(format!(
                "cosine_paired expects two equal-shape [R,D] tensors, got {sa:?} and {sb:?}"
            )));
        }
        let (r, d) = (sa[0], sa[1]);
        let row_norms = |t: &Tensor| {
            t.with_data(|x| {
                (0..r)
                    .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect::<Vec<f64>>()
            })
        };
        let na = row_norms(self);
        let nb = row_norms(other);
        let mut out = vec![0.0; r];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..r {
                    let dot: f64 = a[i * d..(i + 1) * d]
                        .iter()
                        .zip(&b[i * d..(i + 1) * d])
                        .map(|(x, y)| x * y)
                        .sum();
                    out[i] = dot / (na[i] * nb[i] + eps);
                }
            })
        });
        let saved = out.clone();
        Ok(Tensor::from_op(
            vec![r],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let need_a = parents[0].tracks_grad();
                let need_b = parents[1].tracks_grad();
                if !need_a && !need_b {
                    return;
                }
                parents[0].with_data(|a| {
                    parents[1].with_data(|b| {
                        let side = |own: &[f64], opp: &[f64], n_own: &[f64], n_opp: &[f64]| {
                            let mut gr = vec![0.0; r * d];
                            for i in 0..r {
                                let q = n_own[i] * n_opp[i] + eps;
                                let gq = g[i] / q;
                                let coef = g[i] * saved[i] * n_opp[i] / q / n_own[i].max(1e-300);
                                for ((o, &ov), &sv) in gr[i * d..(i + 1) * d]
                                    .iter_mut()
                                    .zip(&opp[i * d..(i + 1) * d])
                                    .zip(&own[i * d..(i + 1) * d])
                                {
                                    *o = gq * ov - coef * sv;
                                }
                            }
                            gr
                        };
                        if need_a {
                            parents[0].accumulate_grad(&side(a, b, &na, &nb));
                        }
                        if need_b {
                            parents[1].accumulate_grad(&side(b, a, &nb, &na));
                        }
                    })
                });
            }),
        ))
    }

    /// Cosine similarity of two rank-1 vectors as a scalar tensor.
    pub fn cosine_similarity(&self, other: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 1 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(TensorError::Dimension(format!(
                "cosine_similarity expects two equal-length vectors, got {sa:?} and {sb:?}"
            )));
        }
        if sa[0] == 0 {
            return Err(TensorError::DegenerateInput(
                "cosine_similarity of empty vectors".into(),
            ));
        }
        let d = sa[0];
        self.reshape(&[1, d])?
            .cosine_cross(&other.reshape(&[1, d])?, eps)?
            .reshape(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::grad_check;
    use super::super::{Tensor, TensorError};
    use rand::SeedableRng;

    const COS_EPS: f64 = 1e-8;

    #[test]
    fn log_softmax_uniform_logits() {
        let x = Tensor::zeros(&[4]);
        let y = x.log_softmax(0).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_extreme_logits_stay_finite() {
        let x = Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap();
        let y = x.log_softmax(0).unwrap().to_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(y[0].abs() < 1e-12);
        assert!((y[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_exp_sums_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[7], &mut rng).scale(100.0);
        let s: f64 = x.log_softmax(0).unwrap().to_vec().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12, "sum {s}");
    }

    #[test]
    fn softmax_matches_exp_of_log_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[3, 5], &mut rng);
        let a = x.softmax(1).unwrap().to_vec();
        let b: Vec<f64> = x.log_softmax(1).unwrap().to_vec().iter().map(|v| v.exp()).collect();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_family_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::randn(&[3, 5], &mut rng);
        let pick = Tensor::randn(&[3, 5], &mut rng);
        for axis in [0usize, 1] {
            let rep = grad_check(
                |x| {
                    x.log_softmax(axis)
                        .unwrap()
                        .mul(&pick)
                        .unwrap()
                        .reduce_sum(&[0, 1])
                        .unwrap()
                },
                &x0,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "log_softmax axis {axis}: {}", rep.max_rel_err);
            let rep = grad_check(
                |x| {
                    x.softmax(axis)
                        .unwrap()
                        .mul(&pick)
                        .unwrap()
                        .reduce_sum(&[0, 1])
                        .unwrap()
                },
                &x0,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "softmax axis {axis}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn instance_norm_constant_slice_is_zero() {
        let x = Tensor::full(&[2, 3, 8], 4.2);
        let y = x.instance_norm(1e-5).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn instance_norm_centers_and_scales() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        // Slice variance around 100 keeps the eps bias below 1e-6.
        let x = Tensor::randn(&[2, 3, 64], &mut rng).scale(10.0);
        let y = x.instance_norm(1e-5).unwrap().to_vec();
        for s in 0..6 {
            let row = &y[s * 64..(s + 1) * 64];
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-10, "slice {s} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "slice {s} var {var}");
        }
    }

    #[test]
    fn instance_norm_rejects_single_sample() {
        let x = Tensor::zeros(&[2, 3, 1]);
        assert!(matches!(
            x.instance_norm(1e-5),
            Err(TensorError::DegenerateInput(_))
        ));
    }

    #[test]
    fn instance_norm_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x0 = Tensor::randn(&[2, 2, 6], &mut rng);
        let pick = Tensor::randn(&[2, 2, 6], &mut rng);
        let rep = grad_check(
            |x| {
                x.instance_norm(1e-5)
                    .unwrap()
                    .mul(&pick)
                    .unwrap()
                    .reduce_sum(&[0, 1, 2])
                    .unwrap()
            },
            &x0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[4, 3, 5, 5], &mut rng).scale(3.0).add_const(7.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (y, mean, var) = x.batch_norm2d_train(&gamma, &beta, 1e-5).unwrap();
        assert!(mean.iter().all(|m| (m - 7.0).abs() < 1.0));
        assert!(var.iter().all(|v| *v > 0.0));
        let yd = y.to_vec();
        for ci in 0..3 {
            let mut sum = 0.0;
            let mut count = 0.0;
            for bi in 0..4 {
                let base = (bi * 3 + ci) * 25;
                for k in 0..25 {
                    sum += yd[base + k];
                    count += 1.0;
                }
            }
            assert!((sum / count).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let x0 = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let pick = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let rep = grad_check(
            |x| {
                let (y, _, _) = x.batch_norm2d_train(&gamma, &beta, 1e-5).unwrap();
                y.mul(&pick).unwrap().reduce_sum(&[0, 1, 2, 3]).unwrap()
            },
            &x0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "x grad rel err {}", rep.max_rel_err);
        let g0 = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let rep_g = grad_check(
            |g| {
                let (y, _, _) = x0.batch_norm2d_train(g, &beta, 1e-5).unwrap();
                y.mul(&pick).unwrap().reduce_sum(&[0, 1, 2, 3]).unwrap()
            },
            &g0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep_g.pass, "gamma grad rel err {}", rep_g.max_rel_err);
    }

    #[test]
    fn channel_affine_matches_manual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let sc = Tensor::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap();
        let sh = Tensor::from_vec(&[3], vec![1.0, 0.0, -3.0]).unwrap();
        let y = x.channel_affine(&sc, &sh).unwrap().to_vec();
        let xd = x.to_vec();
        for b in 0..2 {
            for c in 0..3 {
                for k in 0..4 {
                    let i = (b * 3 + c) * 4 + k;
                    let want = xd[i] * sc.to_vec()[c] + sh.to_vec()[c];
                    assert!((y[i] - want).abs() < 1e-15);
                }
            }
        }
        let rep = grad_check(
            |x| {
                x.channel_affine(&sc, &sh)
                    .unwrap()
                    .tanh()
                    .reduce_mean(&[0, 1, 2])
                    .unwrap()
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.cosine_similarity(&b, COS_EPS).unwrap().item(), 0.0);
    }

    #[test]
    fn cosine_collinear_is_one() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![2.0, 4.0]).unwrap();
        let c = a.cosine_similarity(&b, COS_EPS).unwrap().item();
        assert!((c - 1.0).abs() < 1e-8, "cos {c}");
    }

    #[test]
    fn cosine_45_degrees() {
        let a = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let c = a.cosine_similarity(&b, COS_EPS).unwrap().item();
        assert!((c - 0.7071).abs() < 1e-4, "cos {c}");
    }

    #[test]
    fn cosine_zero_vector_returns_zero() {
        let a = Tensor::zeros(&[3]);
        let b = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = a.cosine_similarity(&b, COS_EPS).unwrap().item();
        assert!(c.abs() < 1e-12 && c.is_finite());
    }

    #[test]
    fn cosine_scale_invariance() {
        // With the +eps denominator, invariance is exact only in the limit;
        // vectors of norm ~8 and scales near 1 keep the residual below 1e-10.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        for i in 0..20 {
            let a = Tensor::randn(&[64], &mut rng);
            let b = Tensor::randn(&[64], &mut rng);
            let alpha = 0.95 + 0.005 * i as f64;
            let beta = 1.05 - 0.004 * i as f64;
            let c0 = a.cosine_similarity(&b, COS_EPS).unwrap().item();
            let c1 = a
                .scale(alpha)
                .cosine_similarity(&b.scale(beta), COS_EPS)
                .unwrap()
                .item();
            assert!((c0 - c1).abs() < 1e-10, "drift {}", (c0 - c1).abs());
        }
    }

    #[test]
    fn cosine_gradients_both_arguments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(47);
        let a0 = Tensor::randn(&[6], &mut rng);
        let b0 = Tensor::randn(&[6], &mut rng);
        let rep_a = grad_check(
            |a| a.cosine_similarity(&b0, COS_EPS).unwrap(),
            &a0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep_a.pass, "a grad rel err {}", rep_a.max_rel_err);
        let rep_b = grad_check(
            |b| a0.cosine_similarity(b, COS_EPS).unwrap(),
            &b0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep_b.pass, "b grad rel err {}", rep_b.max_rel_err);
    }

    #[test]
    fn cosine_cross_matches_pairwise_calls() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let a = Tensor::randn(&[4, 5], &mut rng);
        let b = Tensor::randn(&[3, 5], &mut rng);
        let cross = a.cosine_cross(&b, COS_EPS).unwrap().to_vec();
        let (ad, bd) = (a.to_vec(), b.to_vec());
        for i in 0..4 {
            for j in 0..3 {
                let ai = Tensor::from_vec(&[5], ad[i * 5..(i + 1) * 5].to_vec()).unwrap();
                let bj = Tensor::from_vec(&[5], bd[j * 5..(j + 1) * 5].to_vec()).unwrap();
                let want = ai.cosine_similarity(&bj, COS_EPS).unwrap().item();
                assert!((cross[i * 3 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cosine_cross_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(59);
        let a0 = Tensor::randn(&[3, 4], &mut rng);
        let b0 = Tensor::randn(&[2, 4], &mut rng);
        let pick = Tensor::randn(&[3, 2], &mut rng);
        let rep = grad_check(
            |a| {
                a.cosine_cross(&b0, COS_EPS)
                    .unwrap()
                    .mul(&pick)
                    .unwrap()
                    .reduce_sum(&[0, 1])
                    .unwrap()
            },
            &a0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "a rel err {}", rep.max_rel_err);
        let rep_b = grad_check(
            |b| {
                a0.cosine_cross(b, COS_EPS)
                    .unwrap()
                    .mul(&pick)
                    .unwrap()
                    .reduce_sum(&[0, 1])
                    .unwrap()
            },
            &b0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep_b.pass, "b rel err {}", rep_b.max_rel_err);
    }

    #[test]
    fn cosine_paired_matches_rowwise_similarity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let a = Tensor::randn(&[5, 6], &mut rng);
        let b = Tensor::randn(&[5, 6], &mut rng);
        let paired = a.cosine_paired(&b, COS_EPS).unwrap().to_vec();
        for i in 0..5 {
            let ar = a.to_vec()[i * 6..(i + 1) * 6].to_vec();
            let br = b.to_vec()[i * 6..(i + 1) * 6].to_vec();
            let c = Tensor::from_vec(&[6], ar)
                .unwrap()
                .cosine_similarity(&Tensor::from_vec(&[6], br).unwrap(), COS_EPS)
                .unwrap()
                .item();
            assert!((paired[i] - c).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_paired_gradient_both_arguments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(62);
        let a0 = Tensor::randn(&[4, 3], &mut rng);
        let b0 = Tensor::randn(&[4, 3], &mut rng);
        let pick = Tensor::randn(&[4], &mut rng);
        for swap in [false, true] {
            let (fixed, probe) = if swap { (&a0, &b0) } else { (&b0, &a0) };
            let fixed = fixed.clone();
            let pick = pick.clone();
            let rep = grad_check(
                move |p| {
                    let (x, y) = if swap { (&fixed, p) } else { (p, &fixed) };
                    x.cosine_paired(y, COS_EPS)
                        .unwrap()
                        .mul(&pick)
                        .unwrap()
                        .reduce_sum(&[0])
                        .unwrap()
                },
                probe,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "swap={swap} rel err {}", rep.max_rel_err);
        }
    }
}
