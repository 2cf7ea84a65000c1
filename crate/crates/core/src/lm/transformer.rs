//! A small pre-LayerNorm causal transformer with a hand-written backward pass.
//!
//! Sequences of different lengths are packed back to back into one
//! `N × d` activation matrix; attention never crosses a sequence boundary,
//! so no padding is needed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::linalg::{add_bias, add_column_sums, gemm};
use crate::error::{Error, Result};
use crate::numerics::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_limit: usize,
    pub ff_dim: usize,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("context_limit", self.context_limit),
            ("ff_dim", self.ff_dim),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && self.embed_dim % self.num_heads != 0 {
            bad.push(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.vocab_size == 1 {
            bad.push("vocab_size must be at least 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_1: usize,
    b_1: usize,
    w_2: usize,
    b_2: usize,
}

/// Offsets of every parameter tensor in the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_head: usize,
    b_head: usize,
    total: usize,
}

impl Layout {
    fn new(c: &TransformerConfig) -> Self {
        let (v, d, f) = (c.vocab_size, c.embed_dim, c.ff_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(c.context_limit * d);
        let layers = (0..c.num_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_1: take(d * f),
                b_1: take(f),
                w_2: take(f * d),
                b_2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_head = take(d * v);
        let b_head = take(v);
        Self { tok, pos, layers, lnf_g, lnf_b, w_head, b_head, total: at }
    }
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: TransformerConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Default)]
struct LayerCache {
    ln1: NormCache,
    qkv: Vec<f64>,
    /// Attention probabilities, per sequence and head, each `T × T`.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Default)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

/// Everything [`Transformer::backward`] needs from a forward pass.
#[derive(Debug)]
pub struct TransformerCache {
    tokens: Vec<TokenId>,
    offsets: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
}

impl Transformer {
    /// Randomly initialised model: weights ~ N(0, 1/fan_in), residual
    /// output projections further scaled by 1/sqrt(2 · layers), LayerNorm
    /// gains 1, biases 0.
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d, f) = (cfg.vocab_size, cfg.embed_dim, cfg.ff_dim);
        let resid = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
        let mut fill = |at: usize, n: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[at..at + n] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.tok, v * d, 0.5);
        fill(layout.pos, cfg.context_limit * d, 0.1);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        for l in &layout.layers {
            fill(l.w_qkv, d * 3 * d, inv(d));
            fill(l.w_o, d * d, inv(d) * resid);
            fill(l.w_1, d * f, inv(d));
            fill(l.w_2, f * d, inv(f) * resid);
        }
        fill(layout.w_head, d * v, inv(d));
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: TransformerConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Snapshot(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn p(&self, at: usize, n: usize) -> &[f64] {
        &self.params[at..at + n]
    }

    /// Runs the model over packed sequences. Returns `N × V` logits and the
    /// cache for [`Transformer::backward`].
    pub fn forward_train(&self, seqs: &[&[TokenId]]) -> Result<(Vec<f64>, TransformerCache)> {
        let c = &self.cfg;
        let (v, d, f) = (c.vocab_size, c.embed_dim, c.ff_dim);
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        let mut tokens = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::input(format!("sequence {i} is empty")));
            }
            if s.len() > c.context_limit {
                return Err(Error::input(format!(
                    "sequence {i} has length {} beyond the context limit {}",
                    s.len(),
                    c.context_limit
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= v) {
                return Err(Error::input(format!("token {t} in sequence {i} is outside the vocabulary")));
            }
            tokens.extend_from_slice(s);
            offsets.push(tokens.len());
        }
        let n = tokens.len();

        let mut x = vec![0.0; n * d];
        for w in offsets.windows(2) {
            for (t, i) in (w[0]..w[1]).enumerate() {
                let tok = self.p(self.layout.tok + tokens[i] as usize * d, d);
                let pos = self.p(self.layout.pos + t * d, d);
                for ((o, a), b) in x[i * d..(i + 1) * d].iter_mut().zip(tok).zip(pos) {
                    *o = a + b;
                }
            }
        }

        let mut layers = Vec::with_capacity(c.num_layers);
        for lo in &self.layout.layers {
            let mut lc = LayerCache {
                ln1: layer_norm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d)),
                ..Default::default()
            };
            lc.qkv = vec![0.0; n * 3 * d];
            gemm(n, d, 3 * d, &lc.ln1.out, false, self.p(lo.w_qkv, d * 3 * d), false, &mut lc.qkv, 0.0);
            add_bias(&mut lc.qkv, self.p(lo.b_qkv, 3 * d));
            let (probs, attn) = self.attention(&lc.qkv, &offsets);
            lc.probs = probs;
            lc.attn = attn;
            gemm(n, d, d, &lc.attn, false, self.p(lo.w_o, d * d), false, &mut x, 1.0);
            add_bias(&mut x, self.p(lo.b_o, d));

            lc.ln2 = layer_norm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            lc.pre_act = vec![0.0; n * f];
            gemm(n, d, f, &lc.ln2.out, false, self.p(lo.w_1, d * f), false, &mut lc.pre_act, 0.0);
            add_bias(&mut lc.pre_act, self.p(lo.b_1, f));
            lc.act = lc.pre_act.iter().map(|&u| gelu(u)).collect();
            gemm(n, f, d, &lc.act, false, self.p(lo.w_2, f * d), false, &mut x, 1.0);
            add_bias(&mut x, self.p(lo.b_2, d));
            layers.push(lc);
        }

        let lnf = layer_norm(&x, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d));
        let mut logits = vec![0.0; n * v];
        gemm(n, d, v, &lnf.out, false, self.p(self.layout.w_head, d * v), false, &mut logits, 0.0);
        add_bias(&mut logits, self.p(self.layout.b_head, v));
        Ok((logits, TransformerCache { tokens, offsets, layers, lnf }))
    }

    fn attention(&self, qkv: &[f64], offsets: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let d = self.cfg.embed_dim;
        let h = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = *offsets.last().unwrap();
        let prob_len: usize = offsets.windows(2).map(|w| (w[1] - w[0]).pow(2)).sum::<usize>() * h;
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; n * d];
        let mut at = 0;
        for w in offsets.windows(2) {
            let (o, len) = (w[0], w[1] - w[0]);
            for head in 0..h {
                let p = &mut probs[at..at + len * len];
                at += len * len;
                for i in 0..len {
                    let q = &qkv[(o + i) * 3 * d + head * dh..][..dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                        let k = &qkv[(o + j) * 3 * d + d + head * dh..][..dh];
                        *s = dot(q, k) * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in &mut row[..=i] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let a = &mut out[(o + i) * d + head * dh..][..dh];
                    for (j, s) in row[..=i].iter_mut().enumerate() {
                        *s /= sum;
                        let val = &qkv[(o + j) * 3 * d + 2 * d + head * dh..][..dh];
                        for (ak, vk) in a.iter_mut().zip(val) {
                            *ak += *s * vk;
                        }
                    }
                }
            }
        }
        (probs, out)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dlogits` (`N × V`).
    pub fn backward(&self, cache: &TransformerCache, dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.cfg;
        let (v, d, f) = (c.vocab_size, c.embed_dim, c.ff_dim);
        let n = cache.tokens.len();
        assert_eq!(dlogits.len(), n * v);
        assert_eq!(grad.len(), self.params.len());
        let lay = &self.layout;

        gemm(d, n, v, &cache.lnf.out, true, dlogits, false, &mut grad[lay.w_head..lay.w_head + d * v], 1.0);
        add_column_sums(dlogits, v, &mut grad[lay.b_head..lay.b_head + v]);
        let mut dh = vec![0.0; n * d];
        gemm(n, v, d, dlogits, false, self.p(lay.w_head, d * v), true, &mut dh, 0.0);
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(&cache.lnf, self.p(lay.lnf_g, d), &dh, &mut dx, grad, lay.lnf_g, lay.lnf_b);

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block: x += W2 gelu(W1 ln2(x))
            gemm(f, n, d, &lc.act, true, &dx, false, &mut grad[lo.w_2..lo.w_2 + f * d], 1.0);
            add_column_sums(&dx, d, &mut grad[lo.b_2..lo.b_2 + d]);
            let mut dact = vec![0.0; n * f];
            gemm(n, d, f, &dx, false, self.p(lo.w_2, f * d), true, &mut dact, 0.0);
            for (g, &u) in dact.iter_mut().zip(&lc.pre_act) {
                *g *= gelu_grad(u);
            }
            gemm(d, n, f, &lc.ln2.out, true, &dact, false, &mut grad[lo.w_1..lo.w_1 + d * f], 1.0);
            add_column_sums(&dact, f, &mut grad[lo.b_1..lo.b_1 + f]);
            let mut dln = vec![0.0; n * d];
            gemm(n, f, d, &dact, false, self.p(lo.w_1, d * f), true, &mut dln, 0.0);
            layer_norm_backward(&lc.ln2, self.p(lo.ln2_g, d), &dln, &mut dx, grad, lo.ln2_g, lo.ln2_b);

            // attention block: x += Wo attn(Wqkv ln1(x))
            gemm(d, n, d, &lc.attn, true, &dx, false, &mut grad[lo.w_o..lo.w_o + d * d], 1.0);
            add_column_sums(&dx, d, &mut grad[lo.b_o..lo.b_o + d]);
            let mut dattn = vec![0.0; n * d];
            gemm(n, d, d, &dx, false, self.p(lo.w_o, d * d), true, &mut dattn, 0.0);
            let dqkv = self.attention_backward(&lc.qkv, &lc.probs, &dattn, &cache.offsets);
            gemm(d, n, 3 * d, &lc.ln1.out, true, &dqkv, false, &mut grad[lo.w_qkv..lo.w_qkv + d * 3 * d], 1.0);
            add_column_sums(&dqkv, 3 * d, &mut grad[lo.b_qkv..lo.b_qkv + 3 * d]);
            gemm(n, 3 * d, d, &dqkv, false, self.p(lo.w_qkv, d * 3 * d), true, &mut dln, 0.0);
            layer_norm_backward(&lc.ln1, self.p(lo.ln1_g, d), &dln, &mut dx, grad, lo.ln1_g, lo.ln1_b);
        }

        for w in cache.offsets.windows(2) {
            for (t, i) in (w[0]..w[1]).enumerate() {
                let g = &dx[i * d..(i + 1) * d];
                let tok = lay.tok + cache.tokens[i] as usize * d;
                for (o, x) in grad[tok..tok + d].iter_mut().zip(g) {
                    *o += x;
                }
                let pos = lay.pos + t * d;
                for (o, x) in grad[pos..pos + d].iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }

    fn attention_backward(&self, qkv: &[f64], probs: &[f64], dout: &[f64], offsets: &[usize]) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        let h = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = *offsets.last().unwrap();
        let mut dqkv = vec![0.0; n * 3 * d];
        let mut dp = Vec::new();
        let mut at = 0;
        for w in offsets.windows(2) {
            let (o, len) = (w[0], w[1] - w[0]);
            for head in 0..h {
                let p = &probs[at..at + len * len];
                at += len * len;
                let qo = head * dh;
                let ko = d + head * dh;
                let vo = 2 * d + head * dh;
                for i in 0..len {
                    let row = &p[i * len..i * len + i + 1];
                    let da = &dout[(o + i) * d + head * dh..][..dh];
                    dp.clear();
                    let mut dot_pd = 0.0;
                    for (j, &pij) in row.iter().enumerate() {
                        let val = &qkv[(o + j) * 3 * d + vo..][..dh];
                        let g = dot(da, val);
                        dp.push(g);
                        dot_pd += pij * g;
                        let dv = &mut dqkv[(o + j) * 3 * d + vo..][..dh];
                        for (x, &a) in dv.iter_mut().zip(da) {
                            *x += pij * a;
                        }
                    }
                    for (j, &pij) in row.iter().enumerate() {
                        let ds = pij * (dp[j] - dot_pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for k in 0..dh {
                            let kj = qkv[(o + j) * 3 * d + ko + k];
                            let qi = qkv[(o + i) * 3 * d + qo + k];
                            dqkv[(o + i) * 3 * d + qo + k] += ds * kj;
                            dqkv[(o + j) * 3 * d + ko + k] += ds * qi;
                        }
                    }
                }
            }
        }
        dqkv
    }
}

impl TransformerCache {
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> NormCache {
    let d = gain.len();
    let rows = x.len() / d;
    let mut c = NormCache {
        xhat: vec![0.0; x.len()],
        rstd: Vec::with_capacity(rows),
        out: vec![0.0; x.len()],
    };
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        c.rstd.push(rstd);
        for k in 0..d {
            let xh = (row[k] - mean) * rstd;
            c.xhat[r * d + k] = xh;
            c.out[r * d + k] = xh * gain[k] + bias[k];
        }
    }
    c
}

/// Adds the input gradient to `dx` and the gain/bias gradients to `grad`.
fn layer_norm_backward(
    c: &NormCache,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    grad: &mut [f64],
    g_at: usize,
    b_at: usize,
) {
    let d = gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, (dyr, xh)) in dy.chunks_exact(d).zip(c.xhat.chunks_exact(d)).enumerate() {
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 0..d {
            grad[g_at + k] += dyr[k] * xh[k];
            grad[b_at + k] += dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            m1 += dxhat[k];
            m2 += dxhat[k] * xh[k];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rstd = c.rstd[r];
        for k in 0..d {
            dx[r * d + k] += rstd * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
}
