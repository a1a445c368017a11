use crate::corpus::{CLS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::spans::Span;

use super::ops::{
    add_bias, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_a_bt_acc, matmul_acc,
    matmul_at_b_acc, sum_rows_acc, LayerNormCache,
};
use super::{LayerParams, ParamStore, ProjectorKind};

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x rows x rows` attention probabilities.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn_ln: LayerNormCache,
    mid: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    ffn_ln: LayerNormCache,
}

/// Hidden states `h_0 .. h_n` (row 0 is `[CLS]`) plus everything the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct Activations {
    ids: Vec<u32>,
    key_mask: Vec<bool>,
    emb_ln: LayerNormCache,
    layers: Vec<LayerCache>,
    hidden: Vec<f64>,
    width: usize,
}

impl Activations {
    /// Row count, `n + 1`.
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn h(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.width..(i + 1) * self.width]
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// Input ids including the leading `[CLS]`.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Encodes `[CLS] + tokens`. `[PAD]` tokens are excluded as attention keys.
pub fn forward(params: &ParamStore, tokens: &[u32]) -> Result<Activations> {
    let cfg = &params.config;
    if tokens.len() + 1 > cfg.max_len {
        return Err(Error::TooLong { len: tokens.len(), max: cfg.max_len - 1 });
    }
    let h = cfg.hidden;
    let rows = tokens.len() + 1;
    let mut ids = Vec::with_capacity(rows);
    ids.push(CLS_ID);
    ids.extend_from_slice(tokens);
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let key_mask: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();

    let mut x = vec![0.0; rows * h];
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut x[i * h..(i + 1) * h];
        for ((o, a), b) in row.iter_mut().zip(params.token_emb.row(id as usize)).zip(params.pos_emb.row(i)) {
            *o = a + b;
        }
    }
    let (mut x, emb_ln) =
        layer_norm(&x, &params.emb_ln_gamma.data, &params.emb_ln_beta.data, cfg.layer_norm_eps);

    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let (out, cache) = layer_forward(params, lp, x, &key_mask);
        layers.push(cache);
        x = out;
    }
    Ok(Activations { ids, key_mask, emb_ln, layers, hidden: x, width: h })
}

fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    matmul_acc(&mut out, x, w, rows, din, dout);
    add_bias(&mut out, b);
    out
}

fn layer_forward(
    params: &ParamStore,
    lp: &LayerParams,
    input: Vec<f64>,
    key_mask: &[bool],
) -> (Vec<f64>, LayerCache) {
    let cfg = &params.config;
    let (h, f, heads, dh) = (cfg.hidden, cfg.ffn, cfg.heads, cfg.head_dim());
    let rows = key_mask.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(&input, &lp.wq.data, &lp.bq.data, rows, h, h);
    let k = linear(&input, &lp.wk.data, &lp.bk.data, rows, h, h);
    let v = linear(&input, &lp.wv.data, &lp.bv.data, rows, h, h);

    let mut probs = vec![0.0; heads * rows * rows];
    let mut ctx = vec![0.0; rows * h];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..rows {
            let qi = &q[i * h + off..i * h + off + dh];
            let p = &mut probs[(hd * rows + i) * rows..(hd * rows + i + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for j in 0..rows {
                if key_mask[j] {
                    let s = dot(qi, &k[j * h + off..j * h + off + dh]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = 0.0;
            for j in 0..rows {
                if key_mask[j] {
                    p[j] = (p[j] - max).exp();
                    sum += p[j];
                } else {
                    p[j] = 0.0;
                }
            }
            let c = &mut ctx[i * h + off..i * h + off + dh];
            for j in 0..rows {
                if !key_mask[j] {
                    continue;
                }
                p[j] /= sum;
                let vj = &v[j * h + off..j * h + off + dh];
                for (cv, vv) in c.iter_mut().zip(vj) {
                    *cv += p[j] * vv;
                }
            }
        }
    }

    let mut resid = linear(&ctx, &lp.wo.data, &lp.bo.data, rows, h, h);
    for (r, x) in resid.iter_mut().zip(&input) {
        *r += x;
    }
    let (mid, attn_ln) =
        layer_norm(&resid, &lp.attn_ln_gamma.data, &lp.attn_ln_beta.data, cfg.layer_norm_eps);

    let pre_act = linear(&mid, &lp.w_in.data, &lp.b_in.data, rows, h, f);
    let act: Vec<f64> = pre_act.iter().map(|&u| gelu(u)).collect();
    let mut resid2 = linear(&act, &lp.w_out.data, &lp.b_out.data, rows, f, h);
    for (r, x) in resid2.iter_mut().zip(&mid) {
        *r += x;
    }
    let (out, ffn_ln) =
        layer_norm(&resid2, &lp.ffn_ln_gamma.data, &lp.ffn_ln_beta.data, cfg.layer_norm_eps);

    let cache = LayerCache { input, q, k, v, probs, ctx, attn_ln, mid, pre_act, act, ffn_ln };
    (out, cache)
}

/// Backpropagates `d_hidden` (`rows x hidden`, gradient w.r.t. the final
/// hidden states) and accumulates parameter gradients into `grads`.
pub fn backward(params: &ParamStore, acts: &Activations, d_hidden: &[f64], grads: &mut ParamStore) {
    let cfg = &params.config;
    let h = cfg.hidden;
    let rows = acts.rows();
    assert_eq!(d_hidden.len(), rows * h, "gradient shape does not match activations");
    if d_hidden.iter().all(|&g| g == 0.0) {
        return;
    }

    let mut dx = d_hidden.to_vec();
    for (l, cache) in acts.layers.iter().enumerate().rev() {
        dx = layer_backward(params, &params.layers[l], cache, &acts.key_mask, &dx, &mut grads.layers[l]);
    }
    let dx0 = layer_norm_backward(
        &dx,
        &acts.emb_ln,
        &params.emb_ln_gamma.data,
        &mut grads.emb_ln_gamma.data,
        &mut grads.emb_ln_beta.data,
    );
    for (i, &id) in acts.ids.iter().enumerate() {
        let g = &dx0[i * h..(i + 1) * h];
        for (t, v) in grads.token_emb.row_mut(id as usize).iter_mut().zip(g) {
            *t += v;
        }
        for (t, v) in grads.pos_emb.row_mut(i).iter_mut().zip(g) {
            *t += v;
        }
    }
}

fn layer_backward(
    params: &ParamStore,
    lp: &LayerParams,
    c: &LayerCache,
    key_mask: &[bool],
    d_out: &[f64],
    g: &mut LayerParams,
) -> Vec<f64> {
    let cfg = &params.config;
    let (h, f, heads, dh) = (cfg.hidden, cfg.ffn, cfg.heads, cfg.head_dim());
    let rows = key_mask.len();
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward block
    let d_resid2 = layer_norm_backward(
        d_out,
        &c.ffn_ln,
        &lp.ffn_ln_gamma.data,
        &mut g.ffn_ln_gamma.data,
        &mut g.ffn_ln_beta.data,
    );
    matmul_at_b_acc(&mut g.w_out.data, &c.act, &d_resid2, rows, f, h);
    sum_rows_acc(&mut g.b_out.data, &d_resid2);
    let mut d_act = vec![0.0; rows * f];
    matmul_a_bt_acc(&mut d_act, &d_resid2, &lp.w_out.data, rows, h, f);
    for (d, &u) in d_act.iter_mut().zip(&c.pre_act) {
        *d *= gelu_grad(u);
    }
    matmul_at_b_acc(&mut g.w_in.data, &c.mid, &d_act, rows, h, f);
    sum_rows_acc(&mut g.b_in.data, &d_act);
    let mut d_mid = d_resid2;
    matmul_a_bt_acc(&mut d_mid, &d_act, &lp.w_in.data, rows, f, h);

    // attention block
    let d_resid = layer_norm_backward(
        &d_mid,
        &c.attn_ln,
        &lp.attn_ln_gamma.data,
        &mut g.attn_ln_gamma.data,
        &mut g.attn_ln_beta.data,
    );
    matmul_at_b_acc(&mut g.wo.data, &c.ctx, &d_resid, rows, h, h);
    sum_rows_acc(&mut g.bo.data, &d_resid);
    let mut d_ctx = vec![0.0; rows * h];
    matmul_a_bt_acc(&mut d_ctx, &d_resid, &lp.wo.data, rows, h, h);

    let mut dq = vec![0.0; rows * h];
    let mut dk = vec![0.0; rows * h];
    let mut dv = vec![0.0; rows * h];
    let mut dp = vec![0.0; rows];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..rows {
            let p = &c.probs[(hd * rows + i) * rows..(hd * rows + i + 1) * rows];
            let dci = &d_ctx[i * h + off..i * h + off + dh];
            let mut weighted = 0.0;
            for j in 0..rows {
                if !key_mask[j] {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &c.v[j * h + off..j * h + off + dh];
                dp[j] = dot(dci, vj);
                weighted += dp[j] * p[j];
                let dvj = &mut dv[j * h + off..j * h + off + dh];
                for (d, &x) in dvj.iter_mut().zip(dci) {
                    *d += p[j] * x;
                }
            }
            for j in 0..rows {
                if !key_mask[j] {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * h + off + t] += ds * c.k[j * h + off + t];
                    dk[j * h + off + t] += ds * c.q[i * h + off + t];
                }
            }
        }
    }

    let mut d_in = d_resid;
    for (w, gw, gb, d) in [
        (&lp.wq, &mut g.wq, &mut g.bq, &dq),
        (&lp.wk, &mut g.wk, &mut g.bk, &dk),
        (&lp.wv, &mut g.wv, &mut g.bv, &dv),
    ] {
        matmul_at_b_acc(&mut gw.data, &c.input, d, rows, h, h);
        sum_rows_acc(&mut gb.data, d);
        matmul_a_bt_acc(&mut d_in, d, &w.data, rows, h, h);
    }
    d_in
}

/// Projects the `[CLS]` state `h0` according to `kind`.
pub fn project(params: &ParamStore, kind: ProjectorKind, h0: &[f64]) -> Vec<f64> {
    let h = params.config.hidden;
    match kind {
        ProjectorKind::None => h0.to_vec(),
        ProjectorKind::Linear | ProjectorKind::Nonlinear => {
            let mut z = linear(h0, &params.proj_w.data, &params.proj_b.data, 1, h, h);
            if kind == ProjectorKind::Nonlinear {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            z
        }
    }
}

/// Gradient w.r.t. `h0` given the gradient `dz` on the projector output `z`.
pub fn project_backward(
    params: &ParamStore,
    kind: ProjectorKind,
    h0: &[f64],
    z: &[f64],
    dz: &[f64],
    grads: &mut ParamStore,
) -> Vec<f64> {
    let h = params.config.hidden;
    match kind {
        ProjectorKind::None => dz.to_vec(),
        ProjectorKind::Linear | ProjectorKind::Nonlinear => {
            let du: Vec<f64> = if kind == ProjectorKind::Nonlinear {
                dz.iter().zip(z).map(|(d, z)| d * (1.0 - z * z)).collect()
            } else {
                dz.to_vec()
            };
            matmul_at_b_acc(&mut grads.proj_w.data, h0, &du, 1, h, h);
            sum_rows_acc(&mut grads.proj_b.data, &du);
            let mut dh = vec![0.0; h];
            matmul_a_bt_acc(&mut dh, &du, &params.proj_w.data, 1, h, h);
            dh
        }
    }
}

fn check_span(acts: &Activations, span: &Span) -> Result<()> {
    if span.start >= span.end || span.end >= acts.rows() {
        return Err(Error::InvalidSpan {
            doc_id: span.doc_id.clone(),
            line: 0,
            message: format!(
                "span [{}, {}) invalid for a document of {} tokens",
                span.start,
                span.end,
                acts.rows() - 1
            ),
        });
    }
    Ok(())
}

/// Mean of `h_{start+1} ..= h_end`; row 0 is `[CLS]`, so token `t` is row `t + 1`.
pub fn avg_pool(acts: &Activations, span: &Span) -> Result<Vec<f64>> {
    check_span(acts, span)?;
    let w = acts.width;
    let mut out = vec![0.0; w];
    for r in span.start + 1..=span.end {
        for (o, v) in out.iter_mut().zip(acts.h(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / span.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Spreads the pooled gradient `dz` over the span rows of `d_hidden`.
pub fn avg_pool_backward(acts: &Activations, span: &Span, dz: &[f64], d_hidden: &mut [f64]) -> Result<()> {
    check_span(acts, span)?;
    let w = acts.width;
    let inv = 1.0 / span.len() as f64;
    for r in span.start + 1..=span.end {
        for (d, g) in d_hidden[r * w..(r + 1) * w].iter_mut().zip(dz) {
            *d += g * inv;
        }
    }
    Ok(())
}

/// Logits (`positions.len() x vocab`) from the tied token-embedding matrix
/// plus the output bias. Positions index activation rows and must lie in
/// `1..=n`.
pub fn mlm_logits(params: &ParamStore, acts: &Activations, positions: &[usize]) -> Result<Vec<f64>> {
    let v = params.config.vocab_size;
    let h = params.config.hidden;
    for &p in positions {
        if p == 0 || p >= acts.rows() {
            return Err(Error::Invalid(format!("MLM position {p} outside 1..={}", acts.rows() - 1)));
        }
    }
    let mut out = Vec::with_capacity(positions.len() * v);
    for &p in positions {
        let hp = acts.h(p);
        for id in 0..v {
            out.push(dot(hp, &params.token_emb.data[id * h..(id + 1) * h]) + params.mlm_bias.data[id]);
        }
    }
    Ok(out)
}

/// Accumulates embedding and bias gradients and adds the hidden-state
/// gradient into `d_hidden`.
pub fn mlm_logits_backward(
    params: &ParamStore,
    acts: &Activations,
    positions: &[usize],
    d_logits: &[f64],
    grads: &mut ParamStore,
    d_hidden: &mut [f64],
) {
    let v = params.config.vocab_size;
    let h = params.config.hidden;
    for (k, &p) in positions.iter().enumerate() {
        let dl = &d_logits[k * v..(k + 1) * v];
        let hp = acts.h(p);
        let dh = &mut d_hidden[p * h..(p + 1) * h];
        for id in 0..v {
            let g = dl[id];
            if g == 0.0 {
                continue;
            }
            grads.mlm_bias.data[id] += g;
            let e = &params.token_emb.data[id * h..(id + 1) * h];
            let ge = &mut grads.token_emb.data[id * h..(id + 1) * h];
            for t in 0..h {
                dh[t] += g * e[t];
                ge[t] += g * hp[t];
            }
        }
    }
}
