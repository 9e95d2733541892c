//! Causal self-attention next-item scorer trained by hand-rolled gradient
//! descent.
//!
//! Architecture (pre-LN): item + position embeddings, `num_layers` blocks of
//! multi-head causal attention and a GELU feed-forward, a final layer norm,
//! and a separate output projection over the vocabulary. Parameters live in
//! one flat `Vec<f64>` described by a [`Layout`]; values are snapped to the
//! f32 grid after every optimizer step so checkpoints (32-bit payloads)
//! round-trip to score-identical models.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::ops::Range;

use crate::corpus::{InteractionDataset, ItemId, Query};
use crate::error::{Error, Result};
use crate::rng::standard_normal;

use super::{Optimizer, TrainConfig};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = GELU_C * (x + GELU_A * x * x * x);
    let th = t.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Segment {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerRanges {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

/// Shape manifest of the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
    item_emb: Range<usize>,
    pos_emb: Range<usize>,
    layers: Vec<LayerRanges>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

impl Layout {
    pub fn new(vocab: usize, cfg: &TrainConfig) -> Self {
        let d = cfg.embed_dim;
        let f = 4 * d;
        let mut segments = Vec::new();
        let mut offset = 0usize;
        let mut push = |segments: &mut Vec<Segment>, name: String, dims: Vec<usize>| {
            let seg = Segment {
                name,
                dims,
                offset,
            };
            let r = seg.range();
            offset = r.end;
            segments.push(seg);
            r
        };
        let item_emb = push(&mut segments, "embed.item".into(), vec![vocab, d]);
        let pos_emb = push(&mut segments, "embed.pos".into(), vec![cfg.max_context, d]);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layers.push(LayerRanges {
                ln1_g: push(&mut segments, format!("l{l}.ln1.g"), vec![d]),
                ln1_b: push(&mut segments, format!("l{l}.ln1.b"), vec![d]),
                wq: push(&mut segments, format!("l{l}.attn.wq"), vec![d, d]),
                wk: push(&mut segments, format!("l{l}.attn.wk"), vec![d, d]),
                wv: push(&mut segments, format!("l{l}.attn.wv"), vec![d, d]),
                wo: push(&mut segments, format!("l{l}.attn.wo"), vec![d, d]),
                ln2_g: push(&mut segments, format!("l{l}.ln2.g"), vec![d]),
                ln2_b: push(&mut segments, format!("l{l}.ln2.b"), vec![d]),
                w1: push(&mut segments, format!("l{l}.ffn.w1"), vec![f, d]),
                b1: push(&mut segments, format!("l{l}.ffn.b1"), vec![f]),
                w2: push(&mut segments, format!("l{l}.ffn.w2"), vec![d, f]),
                b2: push(&mut segments, format!("l{l}.ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push(&mut segments, "ln_f.g".into(), vec![d]);
        let lnf_b = push(&mut segments, "ln_f.b".into(), vec![d]);
        let out_w = push(&mut segments, "out.w".into(), vec![vocab, d]);
        let out_b = push(&mut segments, "out.b".into(), vec![vocab]);
        Layout {
            segments,
            total: offset,
            item_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        }
    }
}

/// Snap every parameter onto the f32 grid (see module docs).
fn quantize_f32(params: &mut [f64]) {
    for p in params.iter_mut() {
        *p = *p as f32 as f64;
    }
}

// y = W x with W row-major [out_dim, in_dim]
fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize, y: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

// dx += W^T dy
fn matvec_t_acc(w: &[f64], dy: &[f64], out_dim: usize, in_dim: usize, dx: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        for i in 0..in_dim {
            dx[i] += row[i] * g;
        }
    }
}

// dW += dy x^T
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64], out_dim: usize, in_dim: usize) {
    for o in 0..out_dim {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            row[i] += g * x[i];
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,    // t × d
    inv_std: Vec<f64>, // t
}

fn ln_forward(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize, out: &mut [f64]) -> LnCache {
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for p in 0..t {
        let row = &x[p * d..(p + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[p] = is;
        for i in 0..d {
            let xh = (row[i] - mean) * is;
            xhat[p * d + i] = xh;
            out[p * d + i] = g[i] * xh + b[i];
        }
    }
    LnCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
fn ln_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    t: usize,
    d: usize,
    dx_acc: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let dn = d as f64;
    for p in 0..t {
        let dy_row = &dy[p * d..(p + 1) * d];
        let xhat_row = &cache.xhat[p * d..(p + 1) * d];
        let is = cache.inv_std[p];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dy_row[i] * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_row[i];
            dg[i] += dy_row[i] * xhat_row[i];
            db[i] += dy_row[i];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        for i in 0..d {
            let dxh = dy_row[i] * g[i];
            dx_acc[p * d + i] += is * (dxh - mean_dxhat - xhat_row[i] * mean_dxhat_xhat);
        }
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>, // heads × t × t
    u: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    z1: Vec<f64>,
    g1: Vec<f64>,
}

struct ForwardCache {
    t: usize,
    tokens: Vec<ItemId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Vec<f64>, // final LN output, t × d
}

/// Run the trunk (everything below the output head) over `tokens`.
fn forward_trunk(params: &[f64], layout: &Layout, cfg: &TrainConfig, tokens: &[ItemId]) -> ForwardCache {
    let d = cfg.embed_dim;
    let t = tokens.len();
    let heads = cfg.num_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let f = 4 * d;

    let item_emb = &params[layout.item_emb.clone()];
    let pos_emb = &params[layout.pos_emb.clone()];

    let mut h = vec![0.0f64; t * d];
    for (p, &tok) in tokens.iter().enumerate() {
        let e = &item_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos_emb[p * d..(p + 1) * d];
        for i in 0..d {
            h[p * d + i] = e[i] + pe[i];
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.num_layers);
    for lr in &layout.layers {
        let h_in = h.clone();
        let mut a = vec![0.0; t * d];
        let ln1 = ln_forward(
            &h_in,
            &params[lr.ln1_g.clone()],
            &params[lr.ln1_b.clone()],
            t,
            d,
            &mut a,
        );
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for p in 0..t {
            let ap = &a[p * d..(p + 1) * d];
            matvec(&params[lr.wq.clone()], ap, d, d, &mut q[p * d..(p + 1) * d]);
            matvec(&params[lr.wk.clone()], ap, d, d, &mut k[p * d..(p + 1) * d]);
            matvec(&params[lr.wv.clone()], ap, d, d, &mut v[p * d..(p + 1) * d]);
        }
        let mut att = vec![0.0; heads * t * t];
        let mut u = vec![0.0; t * d];
        for head in 0..heads {
            let hoff = head * hd;
            for j in 0..t {
                let qj = &q[j * d + hoff..j * d + hoff + hd];
                let att_row = &mut att[head * t * t + j * t..head * t * t + j * t + t];
                let mut max_s = f64::NEG_INFINITY;
                #[allow(clippy::needless_range_loop)]
                for i in 0..=j {
                    let ki = &k[i * d + hoff..i * d + hoff + hd];
                    let mut s = 0.0;
                    for x in 0..hd {
                        s += qj[x] * ki[x];
                    }
                    let s = s * scale;
                    att_row[i] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = 0.0;
                for a in att_row.iter_mut().take(j + 1) {
                    let e = (*a - max_s).exp();
                    *a = e;
                    denom += e;
                }
                let uj = &mut u[j * d + hoff..j * d + hoff + hd];
                for i in 0..=j {
                    att_row[i] /= denom;
                    let w = att_row[i];
                    let vi = &v[i * d + hoff..i * d + hoff + hd];
                    for x in 0..hd {
                        uj[x] += w * vi[x];
                    }
                }
            }
        }
        let mut h_mid = h_in.clone();
        let wo = &params[lr.wo.clone()];
        let mut attn_out = vec![0.0; d];
        for p in 0..t {
            matvec(wo, &u[p * d..(p + 1) * d], d, d, &mut attn_out);
            for i in 0..d {
                h_mid[p * d + i] += attn_out[i];
            }
        }

        let mut b = vec![0.0; t * d];
        let ln2 = ln_forward(
            &h_mid,
            &params[lr.ln2_g.clone()],
            &params[lr.ln2_b.clone()],
            t,
            d,
            &mut b,
        );
        let mut z1 = vec![0.0; t * f];
        let mut g1 = vec![0.0; t * f];
        let w1 = &params[lr.w1.clone()];
        let b1 = &params[lr.b1.clone()];
        let w2 = &params[lr.w2.clone()];
        let b2 = &params[lr.b2.clone()];
        let mut h_out = h_mid.clone();
        let mut ff = vec![0.0; d];
        for p in 0..t {
            let zp = &mut z1[p * f..(p + 1) * f];
            matvec(w1, &b[p * d..(p + 1) * d], f, d, zp);
            for x in 0..f {
                zp[x] += b1[x];
                g1[p * f + x] = gelu(zp[x]);
            }
            matvec(w2, &g1[p * f..(p + 1) * f], d, f, &mut ff);
            for i in 0..d {
                h_out[p * d + i] += ff[i] + b2[i];
            }
        }

        layer_caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            att,
            u,
            ln2,
            b,
            z1,
            g1,
        });
        h = h_out;
    }

    let mut y = vec![0.0; t * d];
    let lnf = ln_forward(
        &h,
        &params[layout.lnf_g.clone()],
        &params[layout.lnf_b.clone()],
        t,
        d,
        &mut y,
    );
    ForwardCache {
        t,
        tokens: tokens.to_vec(),
        layers: layer_caches,
        lnf,
        y,
    }
}

/// Logits over the vocabulary at one trunk position.
fn logits_at(params: &[f64], layout: &Layout, cfg: &TrainConfig, cache: &ForwardCache, pos: usize) -> Vec<f64> {
    let d = cfg.embed_dim;
    let vocab = layout.out_b.len();
    let mut logits = vec![0.0; vocab];
    matvec(
        &params[layout.out_w.clone()],
        &cache.y[pos * d..(pos + 1) * d],
        vocab,
        d,
        &mut logits,
    );
    let ob = &params[layout.out_b.clone()];
    for (l, b) in logits.iter_mut().zip(ob) {
        *l += b;
    }
    logits
}

/// Cross-entropy loss and parameter gradient contribution of one sequence.
///
/// `grad` accumulates `weight * dCE` unscaled; the caller divides by the
/// total pair weight afterwards. Returns `(sum of weighted losses, sum of
/// pair weights)`.
fn loss_grad_sequence(
    params: &[f64],
    layout: &Layout,
    cfg: &TrainConfig,
    window: &[ItemId],
    weight: f64,
    grad: &mut [f64],
) -> (f64, f64) {
    debug_assert!(window.len() >= 2);
    let d = cfg.embed_dim;
    let f = 4 * d;
    let heads = cfg.num_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let vocab = layout.out_b.len();

    let inputs = &window[..window.len() - 1];
    let t = inputs.len();
    let cache = forward_trunk(params, layout, cfg, inputs);

    // output head: loss + dlogits folded directly into dW_out/db_out and dy
    let mut dy = vec![0.0f64; t * d];
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    {
        let out_w = &params[layout.out_w.clone()];
        let out_b = &params[layout.out_b.clone()];
        let (dw_chunk, rest) = grad[layout.out_w.start..layout.out_b.end].split_at_mut(layout.out_w.len());
        let db_chunk = rest;
        let mut logits = vec![0.0f64; vocab];
        for p in 0..t {
            let target = window[p + 1] as usize;
            let yp = &cache.y[p * d..(p + 1) * d];
            matvec(out_w, yp, vocab, d, &mut logits);
            for (l, b) in logits.iter_mut().zip(out_b) {
                *l += b;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &l in logits.iter() {
                denom += (l - max).exp();
            }
            let lse = max + denom.ln();
            loss_sum += weight * (lse - logits[target]);
            weight_sum += weight;
            let dyp = &mut dy[p * d..(p + 1) * d];
            for j in 0..vocab {
                let mut dl = (logits[j] - max).exp() / denom;
                if j == target {
                    dl -= 1.0;
                }
                let dl = dl * weight;
                if dl == 0.0 {
                    continue;
                }
                db_chunk[j] += dl;
                let wrow = &out_w[j * d..(j + 1) * d];
                let dwrow = &mut dw_chunk[j * d..(j + 1) * d];
                for i in 0..d {
                    dwrow[i] += dl * yp[i];
                    dyp[i] += dl * wrow[i];
                }
            }
        }
    }

    // final layer norm
    let mut dh = vec![0.0f64; t * d];
    {
        let (dg, db) = {
            let (a, b) = grad[layout.lnf_g.start..layout.lnf_b.end].split_at_mut(layout.lnf_g.len());
            (a, b)
        };
        ln_backward(
            &dy,
            &cache.lnf,
            &params[layout.lnf_g.clone()],
            t,
            d,
            &mut dh,
            dg,
            db,
        );
    }

    // transformer blocks, reversed
    for (lr, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // FFN: h_out = h_mid + W2 gelu(W1 b + b1) + b2
        let mut db_vec = vec![0.0f64; t * d]; // gradient wrt b (post-LN2)
        {
            let w1 = &params[lr.w1.clone()];
            let w2 = &params[lr.w2.clone()];
            let mut dg1 = vec![0.0f64; f];
            let mut dz1 = vec![0.0f64; f];
            for p in 0..t {
                let dhp = &dh[p * d..(p + 1) * d];
                // b2
                for i in 0..d {
                    grad[lr.b2.start + i] += dhp[i];
                }
                let g1p = &lc.g1[p * f..(p + 1) * f];
                let z1p = &lc.z1[p * f..(p + 1) * f];
                outer_acc(&mut grad[lr.w2.clone()], dhp, g1p, d, f);
                dg1.fill(0.0);
                matvec_t_acc(w2, dhp, d, f, &mut dg1);
                for x in 0..f {
                    dz1[x] = dg1[x] * gelu_deriv(z1p[x]);
                }
                let bp = &lc.b[p * d..(p + 1) * d];
                outer_acc(&mut grad[lr.w1.clone()], &dz1, bp, f, d);
                for x in 0..f {
                    grad[lr.b1.start + x] += dz1[x];
                }
                matvec_t_acc(w1, &dz1, f, d, &mut db_vec[p * d..(p + 1) * d]);
            }
        }
        // LN2: dh continues to carry the residual path into h_mid
        {
            let (dg, db) = {
                let (a, b) = grad[lr.ln2_g.start..lr.ln2_b.end].split_at_mut(lr.ln2_g.len());
                (a, b)
            };
            ln_backward(
                &db_vec,
                &lc.ln2,
                &params[lr.ln2_g.clone()],
                t,
                d,
                &mut dh,
                dg,
                db,
            );
        }

        // attention: h_mid = h_in + Wo u
        let mut du = vec![0.0f64; t * d];
        {
            let wo = &params[lr.wo.clone()];
            for p in 0..t {
                let dhp = &dh[p * d..(p + 1) * d];
                outer_acc(&mut grad[lr.wo.clone()], dhp, &lc.u[p * d..(p + 1) * d], d, d);
                matvec_t_acc(wo, dhp, d, d, &mut du[p * d..(p + 1) * d]);
            }
        }
        let mut dq = vec![0.0f64; t * d];
        let mut dk = vec![0.0f64; t * d];
        let mut dv = vec![0.0f64; t * d];
        {
            let mut datt = vec![0.0f64; t];
            let mut dscore = vec![0.0f64; t];
            for head in 0..heads {
                let hoff = head * hd;
                for j in 0..t {
                    let att_row = &lc.att[head * t * t + j * t..head * t * t + j * t + t];
                    let duj = &du[j * d + hoff..j * d + hoff + hd];
                    let mut dot = 0.0;
                    for i in 0..=j {
                        let vi = &lc.v[i * d + hoff..i * d + hoff + hd];
                        let mut s = 0.0;
                        for x in 0..hd {
                            s += duj[x] * vi[x];
                        }
                        datt[i] = s;
                        dot += s * att_row[i];
                        // dv accumulation
                        let dvi = &mut dv[i * d + hoff..i * d + hoff + hd];
                        let w = att_row[i];
                        for x in 0..hd {
                            dvi[x] += w * duj[x];
                        }
                    }
                    for i in 0..=j {
                        dscore[i] = att_row[i] * (datt[i] - dot) * scale;
                    }
                    let dqj = &mut dq[j * d + hoff..j * d + hoff + hd];
                    for i in 0..=j {
                        let ds = dscore[i];
                        if ds == 0.0 {
                            continue;
                        }
                        let ki = &lc.k[i * d + hoff..i * d + hoff + hd];
                        for x in 0..hd {
                            dqj[x] += ds * ki[x];
                        }
                        let qj = &lc.q[j * d + hoff..j * d + hoff + hd];
                        let dki = &mut dk[i * d + hoff..i * d + hoff + hd];
                        for x in 0..hd {
                            dki[x] += ds * qj[x];
                        }
                    }
                }
            }
        }
        // project dq/dk/dv back through Wq/Wk/Wv into da
        let mut da = vec![0.0f64; t * d];
        for p in 0..t {
            let ap = &lc.a[p * d..(p + 1) * d];
            let dap = &mut da[p * d..(p + 1) * d];
            outer_acc(&mut grad[lr.wq.clone()], &dq[p * d..(p + 1) * d], ap, d, d);
            matvec_t_acc(&params[lr.wq.clone()], &dq[p * d..(p + 1) * d], d, d, dap);
            outer_acc(&mut grad[lr.wk.clone()], &dk[p * d..(p + 1) * d], ap, d, d);
            matvec_t_acc(&params[lr.wk.clone()], &dk[p * d..(p + 1) * d], d, d, dap);
            outer_acc(&mut grad[lr.wv.clone()], &dv[p * d..(p + 1) * d], ap, d, d);
            matvec_t_acc(&params[lr.wv.clone()], &dv[p * d..(p + 1) * d], d, d, dap);
        }
        // LN1 (residual into h_in already carried by dh)
        {
            let (dg, db) = {
                let (a, b) = grad[lr.ln1_g.start..lr.ln1_b.end].split_at_mut(lr.ln1_g.len());
                (a, b)
            };
            ln_backward(
                &da,
                &lc.ln1,
                &params[lr.ln1_g.clone()],
                t,
                d,
                &mut dh,
                dg,
                db,
            );
        }
    }

    // embeddings
    for (p, &tok) in cache.tokens.iter().enumerate() {
        let dhp = &dh[p * d..(p + 1) * d];
        let ie = layout.item_emb.start + tok as usize * d;
        let pe = layout.pos_emb.start + p * d;
        for i in 0..d {
            grad[ie + i] += dhp[i];
            grad[pe + i] += dhp[i];
        }
    }

    (loss_sum, weight_sum)
}

/// Training window: the most recent `max_context + 1` items.
fn train_window(items: &[ItemId], max_context: usize) -> &[ItemId] {
    let w = items.len().min(max_context + 1);
    &items[items.len() - w..]
}

/// Mean weighted cross-entropy (plus L2) and gradient over a batch of
/// sequences. Exposed within the crate for the finite-difference check.
pub(crate) fn batch_loss_grad(
    params: &[f64],
    layout: &Layout,
    cfg: &TrainConfig,
    batch: &[(&[ItemId], f64)],
    grad: Option<&mut Vec<f64>>,
) -> f64 {
    let mut scratch_grad;
    let (grad, want_grad) = match grad {
        Some(g) => {
            g.iter_mut().for_each(|x| *x = 0.0);
            (g, true)
        }
        None => {
            scratch_grad = Vec::new();
            (&mut scratch_grad, false)
        }
    };

    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    if want_grad {
        if cfg.parallel_batches {
            let (l, w, g) = batch
                .par_iter()
                .fold(
                    || (0.0f64, 0.0f64, vec![0.0f64; layout.total]),
                    |(mut l, mut w, mut g), &(items, weight)| {
                        let window = train_window(items, cfg.max_context);
                        let (ls, ws) = loss_grad_sequence(params, layout, cfg, window, weight, &mut g);
                        l += ls;
                        w += ws;
                        (l, w, g)
                    },
                )
                .reduce(
                    || (0.0f64, 0.0f64, vec![0.0f64; layout.total]),
                    |(l1, w1, mut g1), (l2, w2, g2)| {
                        for (a, b) in g1.iter_mut().zip(&g2) {
                            *a += b;
                        }
                        (l1 + l2, w1 + w2, g1)
                    },
                );
            grad.copy_from_slice(&g);
            loss_sum = l;
            weight_sum = w;
        } else {
            for &(items, weight) in batch {
                let window = train_window(items, cfg.max_context);
                let (ls, ws) = loss_grad_sequence(params, layout, cfg, window, weight, grad);
                loss_sum += ls;
                weight_sum += ws;
            }
        }
    } else {
        // loss only: forward passes without gradient bookkeeping
        for &(items, weight) in batch {
            let window = train_window(items, cfg.max_context);
            let inputs = &window[..window.len() - 1];
            let cache = forward_trunk(params, layout, cfg, inputs);
            for p in 0..inputs.len() {
                let logits = logits_at(params, layout, cfg, &cache, p);
                let target = window[p + 1] as usize;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                loss_sum += weight * (max + denom.ln() - logits[target]);
                weight_sum += weight;
            }
        }
    }

    if weight_sum == 0.0 {
        return 0.0;
    }
    let mut loss = loss_sum / weight_sum;
    if want_grad {
        for g in grad.iter_mut() {
            *g /= weight_sum;
        }
    }
    if cfg.l2 > 0.0 {
        let sq: f64 = params.iter().map(|p| p * p).sum();
        loss += 0.5 * cfg.l2 * sq;
        if want_grad {
            for (g, p) in grad.iter_mut().zip(params) {
                *g += cfg.l2 * p;
            }
        }
    }
    loss
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// The trained causal self-attention scorer.
#[derive(Debug, Clone)]
pub struct NeuralScorer {
    cfg: TrainConfig,
    vocab_size: usize,
    layout: Layout,
    params: Vec<f64>,
    trained_epochs: usize,
    best_epoch: usize,
    final_loss: f64,
    inference_mode: bool,
}

impl NeuralScorer {
    /// Seeded parameter initialization on the f32 grid.
    fn init_params(layout: &Layout, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; layout.total];
        for seg in &layout.segments {
            let slice = &mut params[seg.range()];
            let name = seg.name.as_str();
            if name.ends_with(".g") && (name.contains("ln") || name.starts_with("ln_f")) {
                slice.fill(1.0);
            } else if name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name == "out.b"
                || name.ends_with(".attn.wo")
                || name.ends_with(".ffn.w2")
            {
                // zero-init: biases plus the residual-writing projections
                slice.fill(0.0);
            } else {
                for p in slice.iter_mut() {
                    *p = 0.02 * standard_normal(&mut rng);
                }
            }
        }
        quantize_f32(&mut params);
        params
    }

    pub(crate) fn train(
        ds: &InteractionDataset,
        cfg: &TrainConfig,
        weights: Option<&[f64]>,
        validation: &[Query],
    ) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let layout = Layout::new(ds.vocab_size, cfg);
        let mut params = Self::init_params(&layout, cfg.seed);
        let mut model = NeuralScorer {
            cfg: cfg.clone(),
            vocab_size: ds.vocab_size,
            layout,
            params: Vec::new(),
            trained_epochs: cfg.epochs,
            best_epoch: 0,
            final_loss: f64::NAN,
            inference_mode: true,
        };
        let outcome = fit(&mut params, &model.layout, cfg, ds, weights, validation, 1)?;
        model.params = outcome.params;
        model.best_epoch = outcome.best_epoch;
        model.final_loss = outcome.final_loss;
        Ok(model)
    }

    /// Continue gradient descent from the current parameters on `data`,
    /// returning a new model; `self` is untouched.
    pub fn finetuned(
        &self,
        data: &InteractionDataset,
        cfg: &TrainConfig,
        start_epoch: usize,
    ) -> Result<NeuralScorer> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.vocab_size > self.vocab_size {
            return Err(Error::VocabMismatch {
                expected: self.vocab_size,
                actual: data.vocab_size,
            });
        }
        let mut arch = cfg.clone();
        // the victim's architecture is fixed; only optimization knobs apply
        arch.embed_dim = self.cfg.embed_dim;
        arch.num_layers = self.cfg.num_layers;
        arch.num_heads = self.cfg.num_heads;
        arch.max_context = self.cfg.max_context;
        let mut params = self.params.clone();
        let outcome = fit(&mut params, &self.layout, &arch, data, None, &[], start_epoch)?;
        Ok(NeuralScorer {
            cfg: arch,
            vocab_size: self.vocab_size,
            layout: self.layout.clone(),
            params: outcome.params,
            trained_epochs: self.trained_epochs + cfg.epochs,
            best_epoch: outcome.best_epoch,
            final_loss: outcome.final_loss,
            inference_mode: true,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn inference_mode(&self) -> bool {
        self.inference_mode
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn from_parts(
        cfg: TrainConfig,
        vocab_size: usize,
        params: Vec<f64>,
        trained_epochs: usize,
        best_epoch: usize,
        final_loss: f64,
    ) -> Result<Self> {
        let layout = Layout::new(vocab_size, &cfg);
        if layout.total != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        Ok(NeuralScorer {
            cfg,
            vocab_size,
            layout,
            params,
            trained_epochs,
            best_epoch,
            final_loss,
            inference_mode: true,
        })
    }

    pub fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        if !self.inference_mode {
            return Err(Error::InvalidArgument(
                "model is not in inference mode".into(),
            ));
        }
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("prefix must be non-empty".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "item {bad} out of vocabulary (size {})",
                self.vocab_size
            )));
        }
        Ok(score_window(
            &self.params,
            &self.layout,
            &self.cfg,
            prefix,
        ))
    }
}

/// Inference scores: trunk over the trailing `max_context` items, logits at
/// the last position.
fn score_window(params: &[f64], layout: &Layout, cfg: &TrainConfig, prefix: &[ItemId]) -> Vec<f64> {
    let w = prefix.len().min(cfg.max_context);
    let window = &prefix[prefix.len() - w..];
    let cache = forward_trunk(params, layout, cfg, window);
    logits_at(params, layout, cfg, &cache, cache.t - 1)
}

pub(crate) struct FitOutcome {
    pub params: Vec<f64>,
    pub best_epoch: usize,
    pub final_loss: f64,
}

/// Epoch-driven gradient descent with optional Recall@10-based snapshot
/// selection over `validation`.
pub(crate) fn fit(
    params: &mut [f64],
    layout: &Layout,
    cfg: &TrainConfig,
    ds: &InteractionDataset,
    weights: Option<&[f64]>,
    validation: &[Query],
    first_epoch: usize,
) -> Result<FitOutcome> {
    let seqs: Vec<(&[ItemId], f64)> = ds
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.items.len() >= 2)
        .map(|(i, s)| {
            let w = weights.map_or(1.0, |ws| ws[i]);
            (s.items.as_slice(), w)
        })
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(
            "no sequences of length >= 2 to train on".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05EE_DF17);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut grad = vec![0.0f64; layout.total];
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(AdamState {
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut best_recall = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut best_epoch = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in first_epoch..first_epoch + cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[ItemId], f64)> = chunk.iter().map(|&i| seqs[i]).collect();
            let loss = batch_loss_grad(params, layout, cfg, &batch, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss;
            batches += 1;
            match adam.as_mut() {
                None => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                Some(state) => {
                    state.t += 1;
                    let b1 = 0.9f64;
                    let b2 = 0.999f64;
                    let bc1 = 1.0 - b1.powi(state.t as i32);
                    let bc2 = 1.0 - b2.powi(state.t as i32);
                    for i in 0..params.len() {
                        let g = grad[i];
                        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                        let mhat = state.m[i] / bc1;
                        let vhat = state.v[i] / bc2;
                        params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + 1e-8);
                    }
                }
            }
            quantize_f32(params);
        }
        last_loss = if batches > 0 {
            epoch_loss / batches as f64
        } else {
            f64::NAN
        };

        if !validation.is_empty() {
            let recall = validation_recall_at_10(params, layout, cfg, validation)?;
            if recall > best_recall {
                best_recall = recall;
                best_params = Some(params.to_vec());
                best_epoch = epoch;
            }
        }
    }

    let final_params = match best_params {
        Some(p) => p,
        None => {
            best_epoch = first_epoch + cfg.epochs - 1;
            params.to_vec()
        }
    };
    Ok(FitOutcome {
        params: final_params,
        best_epoch,
        final_loss: last_loss,
    })
}

fn validation_recall_at_10(
    params: &[f64],
    layout: &Layout,
    cfg: &TrainConfig,
    validation: &[Query],
) -> Result<f64> {
    let ranks = crate::metrics::query_ranks_fn(
        &|prefix: &[ItemId]| Ok(score_window(params, layout, cfg, prefix)),
        validation,
    )?;
    let hits = ranks.iter().filter(|&&r| r <= 10).count();
    Ok(hits as f64 / ranks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SyntheticConfig, UserSequence};

    fn tiny_ds(vocab: usize) -> InteractionDataset {
        let seqs = vec![
            vec![0, 1, 2, 3],
            vec![1, 2, 3, 4],
            vec![0, 1, 2, 4],
            vec![2, 3, 4, 0],
        ];
        InteractionDataset {
            sequences: seqs
                .into_iter()
                .enumerate()
                .map(|(u, items)| UserSequence {
                    user_id: u as u64,
                    items,
                })
                .collect(),
            vocab_size: vocab,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            learning_rate: 0.3,
            batch_size: 2,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_context: 6,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_zero_epochs() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        assert!(NeuralScorer::train(&tiny_ds(5), &cfg, None, &[]).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let ds = tiny_ds(5);
        let cfg = tiny_cfg();
        let a = NeuralScorer::train(&ds, &cfg, None, &[]).unwrap();
        let b = NeuralScorer::train(&ds, &cfg, None, &[]).unwrap();
        assert_eq!(a.params, b.params);
        let c = NeuralScorer::train(
            &ds,
            &TrainConfig {
                seed: 99,
                ..cfg
            },
            None,
            &[],
        )
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn score_shape_and_determinism() {
        let ds = tiny_ds(5);
        let m = NeuralScorer::train(&ds, &tiny_cfg(), None, &[]).unwrap();
        let s1 = m.score(&[0, 1]).unwrap();
        let s2 = m.score(&[0, 1]).unwrap();
        assert_eq!(s1.len(), 5);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn score_windowing_drops_old_items() {
        let ds = tiny_ds(5);
        let m = NeuralScorer::train(&ds, &tiny_cfg(), None, &[]).unwrap();
        // max_context = 6: items beyond the trailing 6 must not matter
        let long: Vec<ItemId> = vec![4, 3, 0, 1, 2, 3, 0, 1];
        let s_long = m.score(&long).unwrap();
        let s_window = m.score(&long[long.len() - 6..]).unwrap();
        assert_eq!(s_long, s_window);
    }

    #[test]
    fn score_rejects_bad_prefixes() {
        let ds = tiny_ds(5);
        let m = NeuralScorer::train(&ds, &tiny_cfg(), None, &[]).unwrap();
        assert!(m.score(&[]).is_err());
        assert!(m.score(&[7]).is_err());
    }

    #[test]
    fn per_position_softmax_normalizes() {
        let ds = tiny_ds(5);
        let cfg = tiny_cfg();
        let m = NeuralScorer::train(&ds, &cfg, None, &[]).unwrap();
        let cache = forward_trunk(&m.params, &m.layout, &cfg, &[0, 1, 2]);
        for p in 0..3 {
            let logits = logits_at(&m.params, &m.layout, &cfg, &cache, p);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
            let total: f64 = logits.iter().map(|&l| (l - max).exp() / denom).sum();
            assert!((total - 1.0).abs() < 1e-6, "sum = {total}");
        }
    }

    #[test]
    fn weighted_loss_matches_duplication() {
        // gradient of {A, B, B} equals gradient of {A, B at weight 2}
        let ds = tiny_ds(5);
        let cfg = tiny_cfg();
        let layout = Layout::new(5, &cfg);
        let params = NeuralScorer::init_params(&layout, 3);
        let a: &[ItemId] = &[0, 1, 2, 3];
        let b: &[ItemId] = &[2, 3, 4];
        let mut g_dup = vec![0.0; layout.total];
        let l_dup = batch_loss_grad(
            &params,
            &layout,
            &cfg,
            &[(a, 1.0), (b, 1.0), (b, 1.0)],
            Some(&mut g_dup),
        );
        let mut g_w = vec![0.0; layout.total];
        let l_w = batch_loss_grad(&params, &layout, &cfg, &[(a, 1.0), (b, 2.0)], Some(&mut g_w));
        assert!((l_dup - l_w).abs() < 1e-12);
        for (x, y) in g_dup.iter().zip(&g_w) {
            assert!((x - y).abs() < 1e-12);
        }
        drop(ds);
    }

    #[test]
    fn learns_planted_signal_above_popularity() {
        let synth = SyntheticConfig {
            vocab_size: 60,
            num_users: 300,
            mean_length: 10.0,
            seed: 5,
            ..Default::default()
        };
        let ds = synth_generate(&synth).unwrap();
        let split = crate::corpus::leave_one_out_split(&ds);
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 0.5,
            embed_dim: 16,
            max_context: 12,
            ..Default::default()
        };
        let model =
            NeuralScorer::train(&split.train, &cfg, None, &split.validation).unwrap();
        let report = crate::metrics::evaluate_fn(
            |p| model.score(p),
            &split.validation,
            &[10],
        )
        .unwrap();
        let pop = crate::corpus::item_popularity(&split.train);
        let pop_report = crate::metrics::evaluate_fn(
            |_| Ok(pop.iter().map(|&c| c as f64).collect()),
            &split.validation,
            &[10],
        )
        .unwrap();
        assert!(
            report.recall(10).unwrap() > pop_report.recall(10).unwrap(),
            "model {} <= popularity {}",
            report.recall(10).unwrap(),
            pop_report.recall(10).unwrap()
        );
    }
}
