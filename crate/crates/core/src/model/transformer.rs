//! Pre-norm decoder-only transformer with hand-written backpropagation.
//!
//! Input is `[BOS] ⊕ prompt ⊕ response[..len-1]`; the output at input
//! position `|prompt| + t` predicts response token `t`. Each block is
//! `x += Attn(RMSNorm(x)); x += MLP(RMSNorm(x))` with a SiLU MLP and causal
//! multi-head attention. Every nonlinearity is smooth, so central finite
//! differences are a valid oracle for the whole network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Architecture;
use crate::scalar::{log_softmax_in_place, sigmoid, Scalar};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct BlockLayout {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct TransformerLayout {
    pub vocab: usize,
    pub context: usize,
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    blocks: Vec<BlockLayout>,
    pub final_norm: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl TransformerLayout {
    pub fn new(arch: &Architecture) -> Self {
        let Architecture::Transformer {
            vocab,
            context,
            width,
            layers,
            heads,
            hidden,
            ..
        } = *arch
        else {
            panic!("transformer layout requested for a non-transformer architecture");
        };
        let mut off = 0;
        let mut take = |n: usize| {
            let at = off;
            off += n;
            at
        };
        let tok_emb = take((vocab + 1) * width);
        let pos_emb = take(context * width);
        let blocks = (0..layers)
            .map(|_| BlockLayout {
                norm1: take(width),
                wq: take(width * width),
                wk: take(width * width),
                wv: take(width * width),
                wo: take(width * width),
                norm2: take(width),
                w1: take(width * hidden),
                b1: take(hidden),
                w2: take(hidden * width),
                b2: take(width),
            })
            .collect();
        let final_norm = take(width);
        let head_w = take(width * vocab);
        let head_b = take(vocab);
        TransformerLayout {
            vocab,
            context,
            width,
            heads,
            hidden,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head_w,
            head_b,
            total: off,
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }
}

pub(super) fn init<T: Scalar, R: Rng>(arch: &Architecture, rng: &mut R) -> Vec<T> {
    let lay = TransformerLayout::new(arch);
    let zero_head = matches!(
        arch,
        Architecture::Transformer {
            zero_head: true,
            ..
        }
    );
    let mut p = vec![T::zero(); lay.total];
    let mut fill = |p: &mut [T], at: usize, n: usize, std: f64| {
        let normal = Normal::new(0.0, std).expect("valid normal");
        for v in &mut p[at..at + n] {
            *v = T::lit(normal.sample(rng));
        }
    };
    let (d, h) = (lay.width, lay.hidden);
    let depth_scale = 1.0 / ((2 * lay.layers()) as f64).sqrt();
    fill(&mut p, lay.tok_emb, (lay.vocab + 1) * d, 1.0);
    fill(&mut p, lay.pos_emb, lay.context * d, 1.0);
    for b in &lay.blocks {
        let s = 1.0 / (d as f64).sqrt();
        fill(&mut p, b.wq, d * d, s);
        fill(&mut p, b.wk, d * d, s);
        fill(&mut p, b.wv, d * d, s);
        fill(&mut p, b.wo, d * d, s * depth_scale);
        fill(&mut p, b.w1, d * h, s);
        fill(&mut p, b.w2, h * d, depth_scale / (h as f64).sqrt());
        for g in [b.norm1, b.norm2] {
            p[g..g + d].iter_mut().for_each(|v| *v = T::one());
        }
    }
    p[lay.final_norm..lay.final_norm + d]
        .iter_mut()
        .for_each(|v| *v = T::one());
    if !zero_head {
        fill(&mut p, lay.head_w, d * lay.vocab, 1.0 / (d as f64).sqrt());
    }
    p
}

struct BlockCache<T> {
    x_in: Vec<T>,
    h1: Vec<T>,
    rms1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × n × n`, zero above the diagonal.
    probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    h2: Vec<T>,
    rms2: Vec<T>,
    u: Vec<T>,
    act: Vec<T>,
}

pub(super) struct TransformerCache<T> {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    start: usize,
    blocks: Vec<BlockCache<T>>,
    x_final: Vec<T>,
    hf: Vec<T>,
    rmsf: Vec<T>,
}

/// `a (n×k) · b (k×m)`.
fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out (k×m) += aᵀ (k×n) · dy (n×m)`.
fn acc_at_b<T: Scalar>(a: &[T], dy: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &g) in out[kk * m..(kk + 1) * m].iter_mut().zip(dyr) {
                *o += av * g;
            }
        }
    }
}

/// `out (n×k) += dy (n×m) · bᵀ` where `b` is `k×m`.
fn acc_a_bt<T: Scalar>(dy: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for kk in 0..k {
            let s: T = dyr
                .iter()
                .zip(&b[kk * m..(kk + 1) * m])
                .map(|(&g, &w)| g * w)
                .sum();
            out[i * k + kk] += s;
        }
    }
}

fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], n: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n * d];
    let mut rms = vec![T::zero(); n];
    let dd = T::lit(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dd;
        let r = (ms + T::lit(NORM_EPS)).sqrt();
        rms[i] = r;
        for ((o, &v), &g) in out[i * d..(i + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = g * v / r;
        }
    }
    (out, rms)
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    rms: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let dd = T::lit(d as f64);
    for i in 0..n {
        let r = rms[i];
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut dot = T::zero();
        for j in 0..d {
            let xhat = xr[j] / r;
            dgain[j] += dyr[j] * xhat;
            dot += dyr[j] * gain[j] * xhat;
        }
        let mean = dot / dd;
        for j in 0..d {
            let xhat = xr[j] / r;
            dx[i * d + j] += (dyr[j] * gain[j] - xhat * mean) / r;
        }
    }
}

fn silu<T: Scalar>(u: T) -> T {
    u * sigmoid(u)
}

fn silu_grad<T: Scalar>(u: T) -> T {
    let s = sigmoid(u);
    s * (T::one() + u * (T::one() - s))
}

pub(super) fn forward<T: Scalar>(
    arch: &Architecture,
    p: &[T],
    prompt: &[u32],
    response: &[u32],
) -> (Vec<Vec<T>>, TransformerCache<T>) {
    let lay = TransformerLayout::new(arch);
    let (d, hid, nh) = (lay.width, lay.hidden, lay.heads);
    let dh = d / nh;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let mut tokens = Vec::with_capacity(prompt.len() + response.len());
    tokens.push(lay.vocab);
    tokens.extend(prompt.iter().map(|&t| t as usize));
    tokens.extend(response[..response.len() - 1].iter().map(|&t| t as usize));
    let n = tokens.len();
    let start = prompt.len();

    let mut x = vec![T::zero(); n * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &p[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d];
        let pe = &p[lay.pos_emb + i * d..lay.pos_emb + (i + 1) * d];
        for ((o, &a), &b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
            *o = a + b;
        }
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for b in &lay.blocks {
        let (h1, rms1) = rmsnorm(&x, &p[b.norm1..b.norm1 + d], n, d);
        let q = matmul(&h1, &p[b.wq..b.wq + d * d], n, d, d);
        let k = matmul(&h1, &p[b.wk..b.wk + d * d], n, d, d);
        let v = matmul(&h1, &p[b.wv..b.wv + d * d], n, d, d);
        let mut probs = vec![T::zero(); nh * n * n];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    for (c, &vv) in ci.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *c += pij * vv;
                    }
                }
            }
        }
        let attn = matmul(&ctx, &p[b.wo..b.wo + d * d], n, d, d);
        let x_mid: Vec<T> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
        let (h2, rms2) = rmsnorm(&x_mid, &p[b.norm2..b.norm2 + d], n, d);
        let mut u = matmul(&h2, &p[b.w1..b.w1 + d * hid], n, d, hid);
        for i in 0..n {
            for (uv, &bv) in u[i * hid..(i + 1) * hid]
                .iter_mut()
                .zip(&p[b.b1..b.b1 + hid])
            {
                *uv += bv;
            }
        }
        let act: Vec<T> = u.iter().map(|&v| silu(v)).collect();
        let mlp = matmul(&act, &p[b.w2..b.w2 + hid * d], n, hid, d);
        let mut x_out = x_mid.clone();
        for i in 0..n {
            for ((o, &m), &bv) in x_out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&mlp[i * d..(i + 1) * d])
                .zip(&p[b.b2..b.b2 + d])
            {
                *o += m + bv;
            }
        }
        let x_in = std::mem::replace(&mut x, x_out);
        blocks.push(BlockCache {
            x_in,
            h1,
            rms1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            h2,
            rms2,
            u,
            act,
        });
    }

    let (hf, rmsf) = rmsnorm(&x, &p[lay.final_norm..lay.final_norm + d], n, d);
    let vocab = lay.vocab;
    let head_w = &p[lay.head_w..lay.head_w + d * vocab];
    let head_b = &p[lay.head_b..lay.head_b + vocab];
    let rows = (start..n)
        .map(|i| {
            let mut row = matmul(&hf[i * d..(i + 1) * d], head_w, 1, d, vocab);
            for (r, &bv) in row.iter_mut().zip(head_b) {
                *r += bv;
            }
            log_softmax_in_place(&mut row);
            row
        })
        .collect();

    let cache = TransformerCache {
        tokens,
        targets: response.iter().map(|&t| t as usize).collect(),
        start,
        blocks,
        x_final: x,
        hf,
        rmsf,
    };
    (rows, cache)
}

pub(super) fn backward<T: Scalar>(
    arch: &Architecture,
    p: &[T],
    c: &TransformerCache<T>,
    rows: &[Vec<T>],
    d_logprobs: &[T],
    grad: &mut [T],
) {
    let lay = TransformerLayout::new(arch);
    let (d, hid, nh, vocab) = (lay.width, lay.hidden, lay.heads, lay.vocab);
    let dh = d / nh;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let n = c.tokens.len();

    // Output head.
    let mut dhf = vec![T::zero(); n * d];
    for (r, (&g, row)) in d_logprobs.iter().zip(rows).enumerate() {
        if g == T::zero() {
            continue;
        }
        let i = c.start + r;
        let dlogit: Vec<T> = row
            .iter()
            .enumerate()
            .map(|(j, &lp)| {
                let ind = if j == c.targets[r] {
                    T::one()
                } else {
                    T::zero()
                };
                g * (ind - lp.exp())
            })
            .collect();
        acc_at_b(
            &c.hf[i * d..(i + 1) * d],
            &dlogit,
            1,
            d,
            vocab,
            &mut grad[lay.head_w..lay.head_w + d * vocab],
        );
        for (gb, &dl) in grad[lay.head_b..lay.head_b + vocab].iter_mut().zip(&dlogit) {
            *gb += dl;
        }
        acc_a_bt(
            &dlogit,
            &p[lay.head_w..lay.head_w + d * vocab],
            1,
            d,
            vocab,
            &mut dhf[i * d..(i + 1) * d],
        );
    }

    let mut dx = vec![T::zero(); n * d];
    rmsnorm_backward(
        &c.x_final,
        &p[lay.final_norm..lay.final_norm + d],
        &c.rmsf,
        &dhf,
        n,
        d,
        &mut dx,
        &mut grad[lay.final_norm..lay.final_norm + d],
    );

    for (b, bc) in lay.blocks.iter().zip(&c.blocks).rev() {
        // MLP branch.
        let dmlp = &dx;
        for i in 0..n {
            for (gb, &g) in grad[b.b2..b.b2 + d]
                .iter_mut()
                .zip(&dmlp[i * d..(i + 1) * d])
            {
                *gb += g;
            }
        }
        acc_at_b(&bc.act, dmlp, n, hid, d, &mut grad[b.w2..b.w2 + hid * d]);
        let mut du = vec![T::zero(); n * hid];
        acc_a_bt(dmlp, &p[b.w2..b.w2 + hid * d], n, hid, d, &mut du);
        for (g, &u) in du.iter_mut().zip(&bc.u) {
            *g *= silu_grad(u);
        }
        for i in 0..n {
            for (gb, &g) in grad[b.b1..b.b1 + hid]
                .iter_mut()
                .zip(&du[i * hid..(i + 1) * hid])
            {
                *gb += g;
            }
        }
        acc_at_b(&bc.h2, &du, n, d, hid, &mut grad[b.w1..b.w1 + d * hid]);
        let mut dh2 = vec![T::zero(); n * d];
        acc_a_bt(&du, &p[b.w1..b.w1 + d * hid], n, d, hid, &mut dh2);
        let mut dx_mid = dx.clone();
        rmsnorm_backward(
            &bc.x_mid,
            &p[b.norm2..b.norm2 + d],
            &bc.rms2,
            &dh2,
            n,
            d,
            &mut dx_mid,
            &mut grad[b.norm2..b.norm2 + d],
        );

        // Attention branch.
        acc_at_b(&bc.ctx, &dx_mid, n, d, d, &mut grad[b.wo..b.wo + d * d]);
        let mut dctx = vec![T::zero(); n * d];
        acc_a_bt(&dx_mid, &p[b.wo..b.wo + d * d], n, d, d, &mut dctx);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..n {
                let pr = &bc.probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                let dci = &dctx[i * d + off..i * d + off + dh];
                let mut weighted = T::zero();
                for j in 0..=i {
                    let vj = &bc.v[j * d + off..j * d + off + dh];
                    dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    weighted += pr[j] * dp[j];
                    for (g, &dc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                        *g += pr[j] * dc;
                    }
                }
                for j in 0..=i {
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * bc.k[j * d + off + t];
                        dk[j * d + off + t] += ds * bc.q[i * d + off + t];
                    }
                }
            }
        }
        let mut dh1 = vec![T::zero(); n * d];
        for (w, dy) in [(b.wq, &dq), (b.wk, &dk), (b.wv, &dv)] {
            acc_at_b(&bc.h1, dy, n, d, d, &mut grad[w..w + d * d]);
            acc_a_bt(dy, &p[w..w + d * d], n, d, d, &mut dh1);
        }
        let mut dx_in = dx_mid;
        rmsnorm_backward(
            &bc.x_in,
            &p[b.norm1..b.norm1 + d],
            &bc.rms1,
            &dh1,
            n,
            d,
            &mut dx_in,
            &mut grad[b.norm1..b.norm1 + d],
        );
        dx = dx_in;
    }

    for (i, &tok) in c.tokens.iter().enumerate() {
        let dxi = &dx[i * d..(i + 1) * d];
        for (g, &v) in grad[lay.tok_emb + tok * d..lay.tok_emb + (tok + 1) * d]
            .iter_mut()
            .zip(dxi)
        {
            *g += v;
        }
        for (g, &v) in grad[lay.pos_emb + i * d..lay.pos_emb + (i + 1) * d]
            .iter_mut()
            .zip(dxi)
        {
            *g += v;
        }
    }
}
