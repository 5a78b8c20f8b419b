//! Non-overlapping window attention (self-attention when query and key/value
//! sources coincide).
//!
//! Pixels are tokens. Maps whose sides are not window multiples get partial
//! windows at the right and bottom edges; padded positions never act as keys.

use rayon::prelude::*;

use super::{pointwise, softmax_in_place, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Names the `{prefix}.q`, `{prefix}.k`, `{prefix}.v` linear layers.
#[derive(Clone, Copy, Debug)]
pub struct WindowAttention<'a> {
    pub store: &'a ParamStore,
    pub prefix: &'a str,
    pub window: usize,
    pub heads: usize,
}

/// Attention probabilities of one window, `heads x n x n` row-major.
#[derive(Clone, Debug)]
pub struct WindowProbs {
    /// `(y, x)` of every token in the window.
    pub tokens: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub heads: usize,
    pub windows: Vec<WindowProbs>,
    /// Value projection of the key/value source.
    pub values: Option<Tensor3>,
}

pub fn window_attention(q_src: &Tensor3, kv_src: &Tensor3, attn: WindowAttention<'_>) -> Result<Tensor3> {
    run(q_src, kv_src, attn, false).map(|(t, _)| t)
}

pub fn window_attention_traced(
    q_src: &Tensor3,
    kv_src: &Tensor3,
    attn: WindowAttention<'_>,
) -> Result<(Tensor3, AttentionTrace)> {
    run(q_src, kv_src, attn, true)
}

fn run(q_src: &Tensor3, kv_src: &Tensor3, attn: WindowAttention<'_>, trace: bool) -> Result<(Tensor3, AttentionTrace)> {
    if (q_src.height(), q_src.width()) != (kv_src.height(), kv_src.width()) {
        return Err(Error::shape(format!(
            "attention query {:?} and key/value {:?} spatial dims differ",
            q_src.dims(),
            kv_src.dims()
        )));
    }
    if attn.window == 0 || attn.heads == 0 {
        return Err(Error::shape("window and heads must be positive"));
    }
    let layer = |s: &str| format!("{}.{s}", attn.prefix);
    let st = attn.store;
    let q = pointwise(q_src, st.weight(&layer("q"))?, st.bias(&layer("q"))?)?;
    let k = pointwise(kv_src, st.weight(&layer("k"))?, st.bias(&layer("k"))?)?;
    let v = pointwise(kv_src, st.weight(&layer("v"))?, st.bias(&layer("v"))?)?;
    let c = q.channels();
    if k.channels() != c || v.channels() != c || c % attn.heads != 0 {
        return Err(Error::shape(format!(
            "attention projections {}/{}/{} channels with {} heads",
            c,
            k.channels(),
            v.channels(),
            attn.heads
        )));
    }
    let head_dim = c / attn.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (h, w) = (q.height(), q.width());
    let win = attn.window;
    let origins: Vec<(usize, usize)> = (0..h.div_ceil(win))
        .flat_map(|wy| (0..w.div_ceil(win)).map(move |wx| (wy * win, wx * win)))
        .collect();
    let plane = h * w;

    let results: Vec<(Vec<(usize, usize)>, Vec<f64>, Vec<f64>)> = origins
        .par_iter()
        .map(|&(y0, x0)| {
            let tokens: Vec<(usize, usize)> = (y0..(y0 + win).min(h))
                .flat_map(|y| (x0..(x0 + win).min(w)).map(move |x| (y, x)))
                .collect();
            let n = tokens.len();
            let mut out = vec![0.0; c * n];
            let mut probs = vec![0.0; attn.heads * n * n];
            let mut row = vec![0.0; n];
            for hd in 0..attn.heads {
                let chans = hd * head_dim..(hd + 1) * head_dim;
                for (i, &(qy, qx)) in tokens.iter().enumerate() {
                    let qi = qy * w + qx;
                    for (j, &(ky, kx)) in tokens.iter().enumerate() {
                        let kj = ky * w + kx;
                        let dot: f64 = chans
                            .clone()
                            .map(|ch| q.data()[ch * plane + qi] * k.data()[ch * plane + kj])
                            .sum();
                        row[j] = dot * scale;
                    }
                    softmax_in_place(&mut row);
                    for ch in chans.clone() {
                        let mut acc = 0.0;
                        for (j, &(vy, vx)) in tokens.iter().enumerate() {
                            acc += row[j] * v.data()[ch * plane + vy * w + vx];
                        }
                        out[ch * n + i] = acc;
                    }
                    probs[(hd * n + i) * n..][..n].copy_from_slice(&row);
                }
            }
            (tokens, out, probs)
        })
        .collect();

    let mut output = Tensor3::zeros(c, h, w);
    let mut tr = AttentionTrace {
        heads: attn.heads,
        ..Default::default()
    };
    for (tokens, out, probs) in results {
        let n = tokens.len();
        for (i, &(y, x)) in tokens.iter().enumerate() {
            for ch in 0..c {
                output.set(ch, y, x, out[ch * n + i]);
            }
        }
        if trace {
            tr.windows.push(WindowProbs { tokens, probs });
        }
    }
    if trace {
        tr.values = Some(v);
    }
    Ok((output, tr))
}
