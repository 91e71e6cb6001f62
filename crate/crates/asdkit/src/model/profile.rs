//! Parameter and multiply-accumulate counting for a model layout. MACs are
//! counted for convolutions (O·C·kh·kw·H'·W') and linear layers only,
//! evaluated at a given input frame count.

use super::{ModelConfig, STAGE_STRIDES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Profile {
    pub params: u64,
    pub macs: u64,
}

fn out_extent(x: usize, k: usize, stride: usize, pad: usize) -> usize {
    (x + 2 * pad - k) / stride + 1
}

/// Parameters and MACs of one conv layer at the given output extent.
pub fn conv_counts(
    in_c: usize,
    out_c: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
) -> Profile {
    let weights = (out_c * in_c * k * k) as u64;
    Profile {
        params: weights + if bias { out_c as u64 } else { 0 },
        macs: weights * (out_h * out_w) as u64,
    }
}

/// Parameters and MACs of one linear layer applied `times` times.
pub fn linear_counts(in_f: usize, out_f: usize, bias: bool, times: usize) -> Profile {
    let weights = (in_f * out_f) as u64;
    Profile {
        params: weights + if bias { out_f as u64 } else { 0 },
        macs: weights * times as u64,
    }
}

/// Exact parameter count and per-utterance MACs of the backbone at `input_t`
/// frames.
pub fn count_params_macs(cfg: &ModelConfig, input_t: usize) -> Profile {
    let mut total = Profile { params: 0, macs: 0 };
    let mut add = |p: Profile| {
        total.params += p.params;
        total.macs += p.macs;
    };
    let bn = |c: usize| Profile {
        params: c as u64 * 2,
        macs: 0,
    };

    let (mut h, mut w) = (cfg.input_mels, input_t);
    add(conv_counts(1, cfg.channels[0], 3, h, w, false));
    add(bn(cfg.channels[0]));

    let mut in_c = cfg.channels[0];
    for (si, (&out_c, &n_blocks)) in cfg.channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
        for bi in 0..n_blocks {
            let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
            let (h1, w1) = (out_extent(h, 3, stride, 1), out_extent(w, 3, stride, 1));
            add(conv_counts(in_c, out_c, 3, h1, w1, false));
            add(bn(out_c));
            add(conv_counts(out_c, out_c, 3, h1, w1, false));
            add(bn(out_c));
            let mid = (out_c / cfg.se_reduction).max(1);
            add(linear_counts(out_c, mid, true, 1));
            add(linear_counts(mid, out_c, true, 1));
            if stride != 1 || in_c != out_c {
                add(conv_counts(in_c, out_c, 1, h1, w1, false));
                add(bn(out_c));
            }
            (h, w) = (h1, w1);
            in_c = out_c;
        }
    }

    let c3 = cfg.channels[3];
    // Attention projection runs per frame; the score vector too.
    add(linear_counts(c3, c3, true, w));
    add(Profile {
        params: c3 as u64,
        macs: (c3 * w) as u64,
    });
    add(linear_counts(c3, cfg.embedding_dim, true, 1));
    add(linear_counts(cfg.embedding_dim, cfg.n_classes, true, 1));
    drop(add);

    total
}
