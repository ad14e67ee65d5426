//! Multistage transformer: forward pass, backward pass and loss.
//!
//! Each stage patchifies its `ℓ × d × d` input into non-overlapping
//! `p × p` tiles, appends the radial positional encoding of each tile,
//! projects to `ε = p²`, and runs post-norm transformer layers
//!
//! ```text
//! ζ1 = LN(MHA(ζ)) + ζ
//! ζ2 = LN(MLP(ζ1)) + ζ1
//! ```
//!
//! over all `ℓ k` tokens of a sample jointly. Tokens are merged back into
//! `ℓ × d × d` and the stage input is added. After the last stage, the
//! output is re-tiled with the last patch size, averaged over tokens and
//! mapped to the Zernike coefficients by a dense head.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView4, Axis};
use rand::Rng;

use super::config::{rpe_len, ModelConfig, StageConfig};
use super::ops::*;
use super::params::{LayerIdx, ParamStore, StageIdx};
use crate::embedding::FourierEmbedding;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Real;

/// Non-overlapping row-major `p × p` tiles of every plane, flattened:
/// `(ℓ, k, p²)`.
pub fn patchify(e: &FourierEmbedding, p: usize) -> Result<Array3<f64>> {
    let (l, d, d2) = e.planes.dim();
    if p == 0 || d != d2 || d % p != 0 {
        return Err(Error::shape(format!("embedding side {d} is not divisible by patch {p}")));
    }
    let x = e.planes.view().insert_axis(Axis(0));
    let rows = patchify4(x, p);
    let k = (d / p) * (d / p);
    Ok(rows.into_shape_with_order((l, k, p * p)).expect("patch count"))
}

/// Inverse of [`patchify`].
pub fn merge_patches(patches: &Array3<f64>, d: usize) -> Result<Array3<f64>> {
    let (l, k, pp) = patches.dim();
    let p = (pp as f64).sqrt().round() as usize;
    if p * p != pp || p == 0 || !d.is_multiple_of(p) || (d / p) * (d / p) != k {
        return Err(Error::shape(format!(
            "cannot merge {k} patches of {pp} values into {d} x {d} planes"
        )));
    }
    let rows = patches.to_owned().into_shape_with_order((l * k, pp)).expect("rows");
    let out = merge4(&rows, 1, l, d, p);
    Ok(out.index_axis_move(Axis(0), 0))
}

/// Tokens of a `(batch, ℓ, d, d)` tensor: rows ordered by sample, plane,
/// tile row, tile column; each row is a tile in row-major order.
fn patchify4<T: Real>(x: ArrayView4<T>, p: usize) -> Array2<T> {
    let (b, l, d, _) = x.dim();
    let t = d / p;
    let mut out = Array2::zeros((b * l * t * t, p * p));
    let mut r = 0;
    for bi in 0..b {
        for li in 0..l {
            for ty in 0..t {
                for tx in 0..t {
                    let tile = x.slice(s![bi, li, ty * p..(ty + 1) * p, tx * p..(tx + 1) * p]);
                    for (o, &v) in out.row_mut(r).iter_mut().zip(tile.iter()) {
                        *o = v;
                    }
                    r += 1;
                }
            }
        }
    }
    out
}

fn merge4<T: Real>(rows: &Array2<T>, b: usize, l: usize, d: usize, p: usize) -> Array4<T> {
    let t = d / p;
    let mut out = Array4::zeros((b, l, d, d));
    let mut r = 0;
    for bi in 0..b {
        for li in 0..l {
            for ty in 0..t {
                for tx in 0..t {
                    let mut tile = out.slice_mut(s![bi, li, ty * p..(ty + 1) * p, tx * p..(tx + 1) * p]);
                    for (o, &v) in tile.iter_mut().zip(rows.row(r).iter()) {
                        *o = v;
                    }
                    r += 1;
                }
            }
        }
    }
    out
}

/// `[r, sin θ, cos θ, …, sin mθ, cos mθ]` for polar coordinates `(r, θ)`.
pub fn radial_vector(r: f64, theta: f64, m: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(rpe_len(m));
    v.push(r);
    for k in 1..=m {
        let a = k as f64 * theta;
        v.push(a.sin());
        v.push(a.cos());
    }
    v
}

/// Radial positional encoding of every tile: polar coordinates of the tile
/// center relative to the plane center (`θ = atan2(row, col)`), radius
/// normalized by the largest tile radius. Shape `(k, 1 + 2m)`.
pub fn radial_encoding(p: usize, d: usize, m: usize) -> Result<Array2<f64>> {
    if p == 0 || !d.is_multiple_of(p) {
        return Err(Error::shape(format!("plane side {d} is not divisible by patch {p}")));
    }
    let t = d / p;
    let c = d as f64 / 2.0;
    let centers: Vec<(f64, f64)> = (0..t * t)
        .map(|i| {
            let (ty, tx) = (i / t, i % t);
            (((ty as f64) + 0.5) * p as f64 - c, ((tx as f64) + 0.5) * p as f64 - c)
        })
        .collect();
    let rmax = centers.iter().map(|(y, x)| y.hypot(*x)).fold(0.0, f64::max);
    let mut out = Array2::zeros((t * t, rpe_len(m)));
    for (i, (y, x)) in centers.into_iter().enumerate() {
        let r = if rmax > 0.0 { y.hypot(x) / rmax } else { 0.0 };
        let v = radial_vector(r, y.atan2(x), m);
        out.row_mut(i).assign(&Array1::from(v));
    }
    Ok(out)
}

/// Dropout and stochastic-depth randomness for one training step.
pub struct Regularizer<'a> {
    pub rng: &'a mut StreamRng,
}

impl Regularizer<'_> {
    /// Inverted-dropout mask (kept entries scaled by `1 / (1 - p)`).
    fn mask<T: Real>(&mut self, shape: (usize, usize), p: f64) -> Option<Array2<T>> {
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some(Array2::from_shape_simple_fn(shape, || {
            if self.rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        }))
    }

    /// Per-sample branch scale for stochastic depth.
    fn depth<T: Real>(&mut self, batch: usize, p: f64) -> Option<Vec<T>> {
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some(
            (0..batch)
                .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<T: Real>(x: Array2<T>, mask: &Option<Array2<T>>) -> Array2<T> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn scale_rows<T: Real>(x: &mut Array2<T>, per_sample: &Option<Vec<T>>, tokens: usize) {
    if let Some(sc) = per_sample {
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let f = sc[i / tokens];
            row.mapv_inplace(|v| v * f);
        }
    }
}

fn check_finite<T: Real>(x: &Array2<T>, location: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: location(),
            detail: "non-finite activation".into(),
        })
    }
}

struct LayerCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    atts: Vec<Array2<T>>,
    o: Array2<T>,
    drop_a: Option<Array2<T>>,
    ln1: NormCache<T>,
    sd1: Option<Vec<T>>,
    z1: Array2<T>,
    pre: Array2<T>,
    h: Array2<T>,
    drop_h: Option<Array2<T>>,
    drop_m: Option<Array2<T>>,
    ln2: NormCache<T>,
    sd2: Option<Vec<T>>,
}

struct StageCache<T> {
    u: Array2<T>,
    layers: Vec<LayerCache<T>>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    stages: Vec<StageCache<T>>,
    pooled: Array2<T>,
}

struct Ctx<'a, T> {
    params: &'a ParamStore<T>,
}

impl<T: Real> Ctx<'_, T> {
    fn m(&self, i: usize) -> ndarray::ArrayView2<'_, T> {
        let t = &self.params.tensors[i];
        view2(&t.data, &t.shape)
    }

    fn v(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        view1(&self.params.tensors[i].data)
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Real>(
    ctx: &Ctx<T>,
    li: &LayerIdx,
    sc: &StageConfig,
    sd_rate: f64,
    x: Array2<T>,
    tokens: usize,
    batch: usize,
    reg: &mut Option<Regularizer>,
    keep: bool,
) -> (Array2<T>, Option<LayerCache<T>>) {
    let q = linear(&x, ctx.m(li.wq), ctx.v(li.bq));
    let k = linear(&x, ctx.m(li.wk), ctx.v(li.bk));
    let v = linear(&x, ctx.m(li.wv), ctx.v(li.bv));
    let (o, atts) = attention(&q, &k, &v, tokens, sc.heads);
    let a = linear(&o, ctx.m(li.wo), ctx.v(li.bo));
    let (drop_a, sd1) = match reg {
        Some(r) => (r.mask(a.dim(), sc.dropout), r.depth(batch, sd_rate)),
        None => (None, None),
    };
    let a = apply_mask(a, &drop_a);
    let (mut n1, ln1) = layer_norm(&a, ctx.v(li.ln1_g), ctx.v(li.ln1_b));
    scale_rows(&mut n1, &sd1, tokens);
    let z1 = n1 + &x;

    let pre = linear(&z1, ctx.m(li.w1), ctx.v(li.b1));
    let drop_h = reg.as_mut().and_then(|r| r.mask(pre.dim(), sc.dropout));
    let h = apply_mask(gelu(&pre), &drop_h);
    let m = linear(&h, ctx.m(li.w2), ctx.v(li.b2));
    let (drop_m, sd2) = match reg {
        Some(r) => (r.mask(m.dim(), sc.dropout), r.depth(batch, sd_rate)),
        None => (None, None),
    };
    let m = apply_mask(m, &drop_m);
    let (mut n2, ln2) = layer_norm(&m, ctx.v(li.ln2_g), ctx.v(li.ln2_b));
    scale_rows(&mut n2, &sd2, tokens);
    let z2 = n2 + &z1;
    let cache = keep.then(|| LayerCache {
        x,
        q,
        k,
        v,
        atts,
        o,
        drop_a,
        ln1,
        sd1,
        z1,
        pre,
        h,
        drop_h,
        drop_m,
        ln2,
        sd2,
    });
    (z2, cache)
}

fn layer_backward<T: Real>(
    ctx: &Ctx<T>,
    li: &LayerIdx,
    sc: &StageConfig,
    c: &LayerCache<T>,
    dz2: Array2<T>,
    tokens: usize,
    grads: &mut [Vec<T>],
) -> Array2<T> {
    let shape = |i: usize| ctx.params.tensors[i].shape.clone();
    // ζ2 = sd2 · LN2(m') + ζ1
    let mut dn2 = dz2.clone();
    scale_rows(&mut dn2, &c.sd2, tokens);
    let dm = {
        let (gg, gb) = two_mut(grads, li.ln2_g, li.ln2_b);
        layer_norm_backward(&c.ln2, ctx.v(li.ln2_g), &dn2, view1_mut(gg), view1_mut(gb))
    };
    let dm = apply_mask(dm, &c.drop_m);
    let dh = {
        let (gw, gb) = two_mut(grads, li.w2, li.b2);
        linear_backward(&c.h, ctx.m(li.w2), &dm, view2_mut(gw, &shape(li.w2)), view1_mut(gb))
    };
    let dh = apply_mask(dh, &c.drop_h);
    let dpre = gelu_backward(&c.pre, &dh);
    let mut dz1 = {
        let (gw, gb) = two_mut(grads, li.w1, li.b1);
        linear_backward(&c.z1, ctx.m(li.w1), &dpre, view2_mut(gw, &shape(li.w1)), view1_mut(gb))
    };
    dz1 += &dz2;

    // ζ1 = sd1 · LN1(a') + ζ
    let mut dn1 = dz1.clone();
    scale_rows(&mut dn1, &c.sd1, tokens);
    let da = {
        let (gg, gb) = two_mut(grads, li.ln1_g, li.ln1_b);
        layer_norm_backward(&c.ln1, ctx.v(li.ln1_g), &dn1, view1_mut(gg), view1_mut(gb))
    };
    let da = apply_mask(da, &c.drop_a);
    let d_o = {
        let (gw, gb) = two_mut(grads, li.wo, li.bo);
        linear_backward(&c.o, ctx.m(li.wo), &da, view2_mut(gw, &shape(li.wo)), view1_mut(gb))
    };
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.atts, &d_o, tokens, sc.heads);
    let mut dx = dz1;
    for (w, b, d) in [(li.wq, li.bq, &dq), (li.wk, li.bk, &dk), (li.wv, li.bv, &dv)] {
        let (gw, gb) = two_mut(grads, w, b);
        dx += &linear_backward(&c.x, ctx.m(w), d, view2_mut(gw, &shape(w)), view1_mut(gb));
    }
    dx
}

fn view1_mut<T>(data: &mut [T]) -> ndarray::ArrayViewMut1<'_, T> {
    ndarray::ArrayViewMut1::from(data)
}

/// Two distinct mutable gradient buffers.
fn two_mut<T>(g: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "gradient buffers must be distinct and ordered");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn stage_forward<T: Real>(
    ctx: &Ctx<T>,
    cfg: &ModelConfig,
    si: usize,
    idx: &StageIdx,
    x: &Array4<T>,
    first_layer: usize,
    reg: &mut Option<Regularizer>,
    keep: bool,
) -> Result<(Array4<T>, Option<StageCache<T>>)> {
    let sc = &cfg.stages[si];
    let (b, l, d, _) = x.dim();
    let p = sc.patch;
    let tokens = cfg.tokens(si);
    let rpe = radial_encoding(p, d, cfg.rpe_m)?.mapv(T::of);
    let patches = patchify4(x.view(), p);
    let r = rpe.ncols();
    let mut u = Array2::zeros((patches.nrows(), p * p + r));
    u.slice_mut(s![.., ..p * p]).assign(&patches);
    let k = cfg.tiles(si);
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        row.slice_mut(s![p * p..]).assign(&rpe.row(i % k));
    }
    let mut z = linear(&u, ctx.m(idx.proj_w), ctx.v(idx.proj_b));
    check_finite(&z, || format!("stage{si}.patch"))?;
    let total = cfg.total_layers().max(1) as f64;
    let mut caches = Vec::new();
    for (j, li) in idx.layers.iter().enumerate() {
        let depth = (first_layer + j + 1) as f64 / total;
        let (z2, c) = layer_forward(ctx, li, sc, sc.stochastic_depth * depth, z, tokens, b, reg, keep);
        check_finite(&z2, || format!("stage{si}.layer{j}"))?;
        z = z2;
        if let Some(c) = c {
            caches.push(c);
        }
    }
    let mut y = merge4(&z, b, l, d, p);
    y += x;
    Ok((y, keep.then_some(StageCache { u, layers: caches })))
}

fn check_input<T>(cfg: &ModelConfig, x: &Array4<T>) -> Result<()> {
    let (_, l, d, d2) = x.dim();
    if l != cfg.planes || d != cfg.d || d2 != cfg.d {
        return Err(Error::shape(format!(
            "model expects ({}, {}, {}) inputs, got ({l}, {d}, {d2})",
            cfg.planes, cfg.d, cfg.d
        )));
    }
    Ok(())
}

fn forward_impl<T: Real>(
    params: &ParamStore<T>,
    x: &Array4<T>,
    mut reg: Option<Regularizer>,
    keep: bool,
) -> Result<(Array2<T>, Option<ForwardCache<T>>)> {
    let cfg = &params.cfg;
    check_input(cfg, x)?;
    let b = x.dim().0;
    let ctx = Ctx { params };
    let mut h = x.clone();
    let mut stages = Vec::new();
    let mut first = 0;
    for (si, idx) in params.idx.stages.iter().enumerate() {
        let (y, c) = stage_forward(&ctx, cfg, si, idx, &h, first, &mut reg, keep)?;
        first += cfg.stages[si].layers;
        h = y;
        if let Some(c) = c {
            stages.push(c);
        }
    }
    let last = cfg.stages.last().expect("validated").patch;
    let tokens = patchify4(h.view(), last);
    let per = tokens.nrows() / b;
    let pooled = tokens
        .into_shape_with_order((b, per, last * last))
        .expect("tokens")
        .mean_axis(Axis(1))
        .expect("non-empty");
    let out = linear(&pooled, ctx.m(params.idx.head_w), ctx.v(params.idx.head_b));
    check_finite(&out, || "head".into())?;
    let cache = keep.then_some(ForwardCache {
        batch: b,
        stages,
        pooled,
    });
    Ok((out, cache))
}

/// Pure evaluation-mode forward pass: `(batch, ℓ, d, d)` → `(batch, 15)`.
/// No dropout, no randomness.
pub fn forward<T: Real>(params: &ParamStore<T>, x: &Array4<T>) -> Result<Array2<T>> {
    Ok(forward_impl(params, x, None, false)?.0)
}

/// Output of every stage in evaluation mode, before pooling and the head.
pub fn forward_stages<T: Real>(params: &ParamStore<T>, x: &Array4<T>) -> Result<Vec<Array4<T>>> {
    let cfg = &params.cfg;
    check_input(cfg, x)?;
    let ctx = Ctx { params };
    let mut outs: Vec<Array4<T>> = Vec::new();
    let mut first = 0;
    for (si, idx) in params.idx.stages.iter().enumerate() {
        let input = outs.last().unwrap_or(x);
        let (y, _) = stage_forward(&ctx, cfg, si, idx, input, first, &mut None, false)?;
        first += cfg.stages[si].layers;
        outs.push(y);
    }
    Ok(outs)
}

/// Training-mode forward pass. Dropout and stochastic depth draw from
/// `rng` when given; the cache feeds [`backward`].
pub fn forward_train<T: Real>(
    params: &ParamStore<T>,
    x: &Array4<T>,
    rng: Option<&mut StreamRng>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let reg = rng.map(|rng| Regularizer { rng });
    let (out, cache) = forward_impl(params, x, reg, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Parameter gradients given `d loss / d output`.
pub fn backward<T: Real>(params: &ParamStore<T>, cache: &ForwardCache<T>, dout: &Array2<T>) -> Vec<Vec<T>> {
    let cfg = &params.cfg;
    let ctx = Ctx { params };
    let mut grads = params.zeros_like();
    let b = cache.batch;
    let (hw, hb) = (params.idx.head_w, params.idx.head_b);
    let dpooled = {
        let shape = params.tensors[hw].shape.clone();
        let (gw, gb) = two_mut(&mut grads, hw, hb);
        linear_backward(&cache.pooled, ctx.m(hw), dout, view2_mut(gw, &shape), view1_mut(gb))
    };
    let last = cfg.stages.last().expect("validated").patch;
    let per = cfg.tokens(cfg.stages.len() - 1);
    let mut dtok = Array2::zeros((b * per, last * last));
    let inv = T::of(1.0 / per as f64);
    for (i, mut row) in dtok.rows_mut().into_iter().enumerate() {
        row.assign(&dpooled.row(i / per).mapv(|v| v * inv));
    }
    let mut dy = merge4(&dtok, b, cfg.planes, cfg.d, last);
    for (si, idx) in params.idx.stages.iter().enumerate().rev() {
        let sc = &cfg.stages[si];
        let sc_cache = &cache.stages[si];
        let tokens = cfg.tokens(si);
        let p = sc.patch;
        let mut dz = patchify4(dy.view(), p);
        for (li, lc) in idx.layers.iter().zip(&sc_cache.layers).rev() {
            dz = layer_backward(&ctx, li, sc, lc, dz, tokens, &mut grads);
            flush(&mut dz);
        }
        let du = {
            let shape = params.tensors[idx.proj_w].shape.clone();
            let (gw, gb) = two_mut(&mut grads, idx.proj_w, idx.proj_b);
            linear_backward(&sc_cache.u, ctx.m(idx.proj_w), &dz, view2_mut(gw, &shape), view1_mut(gb))
        };
        let dpatch = du.slice(s![.., ..p * p]).to_owned();
        dy += &merge4(&dpatch, b, cfg.planes, cfg.d, p);
    }
    grads
}

/// Mean squared coefficient error over all entries (µm²).
pub fn loss_mse<T: Real>(pred: &Array2<T>, truth: &Array2<T>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(truth.iter())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n
}

/// `d loss_mse / d pred`.
pub fn loss_mse_grad<T: Real>(pred: &Array2<T>, truth: &Array2<T>) -> Array2<T> {
    let k = T::of(2.0 / pred.len().max(1) as f64);
    (pred - truth).mapv(|v| v * k)
}

/// Stacks embeddings into a `(batch, ℓ, d, d)` model input.
pub fn stack_embeddings<T: Real>(items: &[&FourierEmbedding]) -> Result<Array4<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .planes
        .dim();
    let mut out = Array4::zeros((items.len(), first.0, first.1, first.2));
    for (i, e) in items.iter().enumerate() {
        if e.planes.dim() != first {
            return Err(Error::shape(format!(
                "embedding {i} has shape {:?}, expected {first:?}",
                e.planes.dim()
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(&e.planes.mapv(T::of));
    }
    Ok(out)
}
