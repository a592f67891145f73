//! Block-causal pre-LN transformer with a hand-written backward pass.
//!
//! Row `t` of the sequence belongs to scale block `b(t)` and attends to every
//! row of blocks `<= b(t)`. Block 0 rows carry the class embedding; rows of
//! block `k > 0` carry the projected conditioning map built from `r_{k-1}`.
//! Weights follow the `y = x·W + b` convention with `W` stored `in × out`.

use crate::linalg::{gemm, softmax_in_place, Op, Real};

use super::layout::{LayerSegs, ParamLayout, MLP_RATIO};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct NetShape {
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub latent: usize,
    /// Block boundaries in the flattened sequence (len = num_scales + 1).
    pub offsets: Vec<usize>,
}

impl NetShape {
    fn rows(&self, n_blocks: usize) -> usize {
        self.offsets[n_blocks]
    }

    fn block_rows(&self, b: usize) -> (usize, usize) {
        (self.offsets[b], self.offsets[b + 1])
    }

    /// Offset of each block's probability matrix within a head's buffer.
    fn prob_offsets(&self, n_blocks: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n_blocks + 1);
        let mut acc = 0;
        out.push(0);
        for b in 0..n_blocks {
            let (r0, r1) = self.block_rows(b);
            acc += (r1 - r0) * r1;
            out.push(acc);
        }
        out
    }
}

pub(crate) struct NetInput<'a, T> {
    /// Row of the class table (the last row is the null class).
    pub class_row: usize,
    /// Conditioning maps for rows of blocks `1..n_blocks`, `latent` values each.
    pub cond: &'a [T],
    pub n_blocks: usize,
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<Vec<T>>,
    att: Vec<T>,
    ln2: LnCache<T>,
    m: Vec<T>,
    h1: Vec<T>,
    g: Vec<T>,
}

pub(crate) struct Cache<T> {
    n_blocks: usize,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    f: Vec<T>,
}

fn seg<'p, T>(params: &'p [T], s: super::layout::Seg) -> &'p [T] {
    &params[s.range()]
}

fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into<T: Real>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn layer_norm<T: Real>(x: &[T], d: usize, gain: &[T], bias: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = gain[i] * h + bias[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `dgain`, `dbias`.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh_v())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh_v();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Split the fused `rows × 3d` projection into head-major Q, K, V buffers.
fn split_heads<T: Real>(qkv: &[T], rows: usize, shape: &NetShape) -> [Vec<T>; 3] {
    let (d, hd) = (shape.d, shape.head_dim);
    let mut out = [
        vec![T::zero(); rows * d],
        vec![T::zero(); rows * d],
        vec![T::zero(); rows * d],
    ];
    for t in 0..rows {
        let row = &qkv[t * 3 * d..(t + 1) * 3 * d];
        for (part, buf) in out.iter_mut().enumerate() {
            for h in 0..shape.heads {
                let src = &row[part * d + h * hd..part * d + (h + 1) * hd];
                buf[(h * rows + t) * hd..(h * rows + t + 1) * hd].copy_from_slice(src);
            }
        }
    }
    out
}

pub(crate) fn forward<T: Real>(
    layout: &ParamLayout,
    shape: &NetShape,
    params: &[T],
    input: &NetInput<'_, T>,
    keep_cache: bool,
) -> (Vec<T>, Option<Cache<T>>) {
    let d = shape.d;
    let rows = shape.rows(input.n_blocks);
    let first = shape.offsets[1].min(rows);
    let mut x = vec![T::zero(); rows * d];

    // embeddings
    let pos = seg(params, layout.pos_emb);
    x.copy_from_slice(&pos[..rows * d]);
    let scale_emb = seg(params, layout.scale_emb);
    for b in 0..input.n_blocks {
        let (r0, r1) = shape.block_rows(b);
        let se = &scale_emb[b * d..(b + 1) * d];
        for t in r0..r1 {
            for (v, &s) in x[t * d..(t + 1) * d].iter_mut().zip(se) {
                *v += s;
            }
        }
    }
    let class = &seg(params, layout.class_emb)[input.class_row * d..(input.class_row + 1) * d];
    for t in 0..first {
        for (v, &c) in x[t * d..(t + 1) * d].iter_mut().zip(class) {
            *v += c;
        }
    }
    let rest = rows - first;
    if rest > 0 {
        gemm(
            rest,
            shape.latent,
            d,
            T::one(),
            input.cond,
            Op::N,
            seg(params, layout.in_w),
            Op::N,
            T::one(),
            &mut x[first * d..],
        );
        add_bias(&mut x[first * d..], seg(params, layout.in_b));
    }

    let mut layer_caches = Vec::with_capacity(if keep_cache { layout.layers.len() } else { 0 });
    for ls in &layout.layers {
        let lc = layer_forward(ls, shape, params, &mut x, input.n_blocks);
        if keep_cache {
            layer_caches.push(lc);
        }
    }

    let (f, lnf) = layer_norm(&x, d, seg(params, layout.lnf_g), seg(params, layout.lnf_b));
    let mut logits = vec![T::zero(); rows * shape.vocab];
    gemm(
        rows,
        d,
        shape.vocab,
        T::one(),
        &f,
        Op::N,
        seg(params, layout.head_w),
        Op::N,
        T::zero(),
        &mut logits,
    );
    add_bias(&mut logits, seg(params, layout.head_b));

    let cache = keep_cache.then(|| Cache {
        n_blocks: input.n_blocks,
        layers: layer_caches,
        lnf,
        f,
    });
    (logits, cache)
}

fn layer_forward<T: Real>(
    ls: &LayerSegs,
    shape: &NetShape,
    params: &[T],
    x: &mut [T],
    n_blocks: usize,
) -> LayerCache<T> {
    let (d, hd, heads) = (shape.d, shape.head_dim, shape.heads);
    let rows = x.len() / d;
    let scale = T::of(1.0 / (hd as f64).sqrt());

    let (a, ln1) = layer_norm(x, d, seg(params, ls.ln1_g), seg(params, ls.ln1_b));
    let mut qkv = vec![T::zero(); rows * 3 * d];
    gemm(rows, d, 3 * d, T::one(), &a, Op::N, seg(params, ls.w_qkv), Op::N, T::zero(), &mut qkv);
    add_bias(&mut qkv, seg(params, ls.b_qkv));
    let [q, k, v] = split_heads(&qkv, rows, shape);

    let prob_off = shape.prob_offsets(n_blocks);
    let mut probs = Vec::with_capacity(heads);
    let mut att = vec![T::zero(); rows * d];
    let mut out_h = Vec::new();
    for h in 0..heads {
        let qh = &q[h * rows * hd..(h + 1) * rows * hd];
        let kh = &k[h * rows * hd..(h + 1) * rows * hd];
        let vh = &v[h * rows * hd..(h + 1) * rows * hd];
        let mut ph = vec![T::zero(); prob_off[n_blocks]];
        for b in 0..n_blocks {
            let (r0, r1) = shape.block_rows(b);
            let nb = r1 - r0;
            let p = &mut ph[prob_off[b]..prob_off[b + 1]];
            gemm(nb, hd, r1, scale, &qh[r0 * hd..r1 * hd], Op::N, &kh[..r1 * hd], Op::T, T::zero(), p);
            for row in p.chunks_exact_mut(r1) {
                softmax_in_place(row);
            }
            out_h.clear();
            out_h.resize(nb * hd, T::zero());
            gemm(nb, r1, hd, T::one(), p, Op::N, &vh[..r1 * hd], Op::N, T::zero(), &mut out_h);
            for (i, t) in (r0..r1).enumerate() {
                att[t * d + h * hd..t * d + (h + 1) * hd]
                    .copy_from_slice(&out_h[i * hd..(i + 1) * hd]);
            }
        }
        probs.push(ph);
    }

    // x += att·Wo + bo
    gemm(rows, d, d, T::one(), &att, Op::N, seg(params, ls.w_o), Op::N, T::one(), x);
    add_bias(x, seg(params, ls.b_o));

    let (m, ln2) = layer_norm(x, d, seg(params, ls.ln2_g), seg(params, ls.ln2_b));
    let hidden = shape.hidden;
    let mut h1 = vec![T::zero(); rows * hidden];
    gemm(rows, d, hidden, T::one(), &m, Op::N, seg(params, ls.w_fc1), Op::N, T::zero(), &mut h1);
    add_bias(&mut h1, seg(params, ls.b_fc1));
    let g: Vec<T> = h1.iter().map(|&v| gelu(v)).collect();
    gemm(rows, hidden, d, T::one(), &g, Op::N, seg(params, ls.w_fc2), Op::N, T::one(), x);
    add_bias(x, seg(params, ls.b_fc2));

    LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        att,
        ln2,
        m,
        h1,
        g,
    }
}

/// Accumulate `∂loss/∂params` into `grad` given `∂loss/∂logits`.
pub(crate) fn backward<T: Real>(
    layout: &ParamLayout,
    shape: &NetShape,
    params: &[T],
    input: &NetInput<'_, T>,
    cache: &Cache<T>,
    dlogits: &[T],
    grad: &mut [T],
) {
    let d = shape.d;
    let n_blocks = cache.n_blocks;
    let rows = shape.rows(n_blocks);

    // head
    gemm(
        d,
        rows,
        shape.vocab,
        T::one(),
        &cache.f,
        Op::T,
        dlogits,
        Op::N,
        T::one(),
        &mut grad[layout.head_w.range()],
    );
    col_sum_into(dlogits, shape.vocab, &mut grad[layout.head_b.range()]);
    let mut df = vec![T::zero(); rows * d];
    gemm(rows, shape.vocab, d, T::one(), dlogits, Op::N, seg(params, layout.head_w), Op::T, T::zero(), &mut df);

    let mut dx = vec![T::zero(); rows * d];
    {
        let (dg, db) = two_segs(grad, layout.lnf_g, layout.lnf_b);
        layer_norm_backward(&df, &cache.lnf, seg(params, layout.lnf_g), d, &mut dx, dg, db);
    }

    for (ls, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        layer_backward(ls, shape, params, lc, n_blocks, &mut dx, grad);
    }

    // embeddings
    for (g, &v) in grad[layout.pos_emb.off..layout.pos_emb.off + rows * d]
        .iter_mut()
        .zip(&dx)
    {
        *g += v;
    }
    for b in 0..n_blocks {
        let (r0, r1) = shape.block_rows(b);
        let gs = &mut grad[layout.scale_emb.off + b * d..layout.scale_emb.off + (b + 1) * d];
        col_sum_into(&dx[r0 * d..r1 * d], d, gs);
    }
    let first = shape.offsets[1].min(rows);
    let co = layout.class_emb.off + input.class_row * d;
    col_sum_into(&dx[..first * d], d, &mut grad[co..co + d]);
    let rest = rows - first;
    if rest > 0 {
        gemm(
            shape.latent,
            rest,
            d,
            T::one(),
            input.cond,
            Op::T,
            &dx[first * d..],
            Op::N,
            T::one(),
            &mut grad[layout.in_w.range()],
        );
        col_sum_into(&dx[first * d..], d, &mut grad[layout.in_b.range()]);
    }
}

/// Two disjoint mutable views; `a` must precede `b`.
fn two_segs<T>(
    grad: &mut [T],
    a: super::layout::Seg,
    b: super::layout::Seg,
) -> (&mut [T], &mut [T]) {
    debug_assert!(a.off + a.len <= b.off);
    let (lo, hi) = grad.split_at_mut(b.off);
    (&mut lo[a.range()], &mut hi[..b.len])
}

fn layer_backward<T: Real>(
    ls: &LayerSegs,
    shape: &NetShape,
    params: &[T],
    lc: &LayerCache<T>,
    n_blocks: usize,
    dx: &mut [T],
    grad: &mut [T],
) {
    let (d, hd, heads, hidden) = (shape.d, shape.head_dim, shape.heads, shape.hidden);
    let rows = dx.len() / d;
    let scale = T::of(1.0 / (hd as f64).sqrt());

    // MLP branch: x += gelu(m·W1 + b1)·W2 + b2
    gemm(hidden, rows, d, T::one(), &lc.g, Op::T, dx, Op::N, T::one(), &mut grad[ls.w_fc2.range()]);
    col_sum_into(dx, d, &mut grad[ls.b_fc2.range()]);
    let mut dh1 = vec![T::zero(); rows * hidden];
    gemm(rows, d, hidden, T::one(), dx, Op::N, seg(params, ls.w_fc2), Op::T, T::zero(), &mut dh1);
    for (g, &h) in dh1.iter_mut().zip(&lc.h1) {
        *g *= gelu_grad(h);
    }
    gemm(d, rows, hidden, T::one(), &lc.m, Op::T, &dh1, Op::N, T::one(), &mut grad[ls.w_fc1.range()]);
    col_sum_into(&dh1, hidden, &mut grad[ls.b_fc1.range()]);
    let mut dm = vec![T::zero(); rows * d];
    gemm(rows, hidden, d, T::one(), &dh1, Op::N, seg(params, ls.w_fc1), Op::T, T::zero(), &mut dm);
    {
        let (dg, db) = two_segs(grad, ls.ln2_g, ls.ln2_b);
        layer_norm_backward(&dm, &lc.ln2, seg(params, ls.ln2_g), d, dx, dg, db);
    }

    // attention branch: x += att·Wo + bo
    gemm(d, rows, d, T::one(), &lc.att, Op::T, dx, Op::N, T::one(), &mut grad[ls.w_o.range()]);
    col_sum_into(dx, d, &mut grad[ls.b_o.range()]);
    let mut datt = vec![T::zero(); rows * d];
    gemm(rows, d, d, T::one(), dx, Op::N, seg(params, ls.w_o), Op::T, T::zero(), &mut datt);

    let prob_off = shape.prob_offsets(n_blocks);
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    let mut d_out = Vec::new();
    let mut dp = Vec::new();
    for h in 0..heads {
        let qh = &lc.q[h * rows * hd..(h + 1) * rows * hd];
        let kh = &lc.k[h * rows * hd..(h + 1) * rows * hd];
        let vh = &lc.v[h * rows * hd..(h + 1) * rows * hd];
        let mut dq = vec![T::zero(); rows * hd];
        let mut dk = vec![T::zero(); rows * hd];
        let mut dv = vec![T::zero(); rows * hd];
        for b in 0..n_blocks {
            let (r0, r1) = shape.block_rows(b);
            let nb = r1 - r0;
            let p = &lc.probs[h][prob_off[b]..prob_off[b + 1]];
            d_out.clear();
            for t in r0..r1 {
                d_out.extend_from_slice(&datt[t * d + h * hd..t * d + (h + 1) * hd]);
            }
            // out = P·V
            gemm(r1, nb, hd, T::one(), p, Op::T, &d_out, Op::N, T::one(), &mut dv[..r1 * hd]);
            dp.clear();
            dp.resize(nb * r1, T::zero());
            gemm(nb, hd, r1, T::one(), &d_out, Op::N, &vh[..r1 * hd], Op::T, T::zero(), &mut dp);
            // softmax backward, folded with the score scale
            for (dpr, pr) in dp.chunks_exact_mut(r1).zip(p.chunks_exact(r1)) {
                let dot: T = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dpr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            // S = Q_b·K^T
            gemm(nb, r1, hd, T::one(), &dp, Op::N, &kh[..r1 * hd], Op::N, T::one(), &mut dq[r0 * hd..r1 * hd]);
            gemm(r1, nb, hd, T::one(), &dp, Op::T, &qh[r0 * hd..r1 * hd], Op::N, T::one(), &mut dk[..r1 * hd]);
        }
        for t in 0..rows {
            let row = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
            row[h * hd..(h + 1) * hd].copy_from_slice(&dq[t * hd..(t + 1) * hd]);
            row[d + h * hd..d + (h + 1) * hd].copy_from_slice(&dk[t * hd..(t + 1) * hd]);
            row[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(&dv[t * hd..(t + 1) * hd]);
        }
    }
    gemm(d, rows, 3 * d, T::one(), &lc.a, Op::T, &dqkv, Op::N, T::one(), &mut grad[ls.w_qkv.range()]);
    col_sum_into(&dqkv, 3 * d, &mut grad[ls.b_qkv.range()]);
    let mut da = vec![T::zero(); rows * d];
    gemm(rows, 3 * d, d, T::one(), &dqkv, Op::N, seg(params, ls.w_qkv), Op::T, T::zero(), &mut da);
    let (dg, db) = two_segs(grad, ls.ln1_g, ls.ln1_b);
    layer_norm_backward(&da, &lc.ln1, seg(params, ls.ln1_g), d, dx, dg, db);
}

pub(crate) fn mlp_hidden(d_model: usize) -> usize {
    MLP_RATIO * d_model
}
