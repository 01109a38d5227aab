//! Forward and reverse-mode passes of the point-displacement denoiser.
//!
//! Architecture: a two-layer point embedding MLP, a noise-level embedding
//! added to every point feature, `L` pre-norm transformer encoder layers with
//! unmasked self-attention over the valid points of a set, a final layer
//! norm, and a linear head producing a 3D displacement per point. There is no
//! positional encoding, so the map is permutation-equivariant.

use super::ops::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows,
    Mat, MatMut, Real,
};
use super::params::{DenoiserWeights, Slot};
use crate::error::{Error, Result};
use crate::geometry::Point;

/// Noise-level conditioning input `ln(sigma) / 4`.
pub fn c_noise(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise level must be positive and finite, got {sigma}")));
    }
    Ok(sigma.ln() / 4.0)
}

/// The learned noise embedding (the vector added to every point feature) for `sigma`.
pub fn noise_embedding<T: Real>(w: &DenoiserWeights<T>, sigma: f64) -> Result<(f64, Vec<T>)> {
    let c = c_noise(sigma)?;
    let (_, _, out) = embed_noise(w, T::lit(c));
    Ok((c, out))
}

/// Point sets zero-padded to `max_points`, with a validity mask and one conditioning value per set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch<T = f32> {
    pub max_points: usize,
    /// `len * max_points * 3` coordinates.
    pub points: Vec<T>,
    /// `len * max_points` validity flags.
    pub mask: Vec<bool>,
    pub c_noise: Vec<T>,
}

impl<T: Real> PointBatch<T> {
    pub fn new(max_points: usize) -> Self {
        PointBatch {
            max_points,
            points: Vec::new(),
            mask: Vec::new(),
            c_noise: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.c_noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_noise.is_empty()
    }

    /// Appends a set of NBV points, padding the remainder.
    pub fn push(&mut self, points: &[Point], c_noise: f64) -> Result<()> {
        if points.len() > self.max_points {
            return Err(Error::InvalidInput(format!(
                "{} points exceed max_points {}",
                points.len(),
                self.max_points
            )));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) || !c_noise.is_finite() {
            return Err(Error::InvalidInput("non-finite point or conditioning value".into()));
        }
        for p in points {
            self.points.extend(p.iter().map(|&v| T::lit(v)));
        }
        let pad = self.max_points - points.len();
        self.points.extend(std::iter::repeat_n(T::zero(), 3 * pad));
        self.mask.extend(std::iter::repeat_n(true, points.len()));
        self.mask.extend(std::iter::repeat_n(false, pad));
        self.c_noise.push(T::lit(c_noise));
        Ok(())
    }

    /// Indices (within set `b`) of the valid rows.
    fn valid_rows(&self, b: usize) -> Vec<usize> {
        let m = &self.mask[b * self.max_points..(b + 1) * self.max_points];
        (0..self.max_points).filter(|&i| m[i]).collect()
    }

    fn gather(&self, b: usize, rows: &[usize]) -> Vec<T> {
        let base = b * self.max_points * 3;
        rows.iter()
            .flat_map(|&r| self.points[base + 3 * r..base + 3 * r + 3].iter().copied())
            .collect()
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    a2: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

struct SetCache<T> {
    n: usize,
    x: Vec<T>,
    c: T,
    e1_pre: Vec<T>,
    e1: Vec<T>,
    nz_pre: Vec<T>,
    nz_act: Vec<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
}

fn embed_noise<T: Real>(w: &DenoiserWeights<T>, c: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let l = &w.layout;
    let pre: Vec<T> = w
        .get(l.noise_w1)
        .iter()
        .zip(w.get(l.noise_b1))
        .map(|(&a, &b)| c * a + b)
        .collect();
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = vec![T::zero(); w.config.hidden_dim];
    linear(&act, 1, w.get(l.noise_w2), w.get(l.noise_b2), &mut out);
    (pre, act, out)
}

fn layer_norm_cached<T: Real>(x: &[T], n: usize, dim: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut out = vec![T::zero(); n * dim];
    let mut xhat = vec![T::zero(); n * dim];
    let mut rstd = vec![T::zero(); n];
    layer_norm(x, dim, g, b, &mut out, &mut xhat, &mut rstd);
    (out, LnCache { xhat, rstd })
}

fn forward_set<T: Real>(w: &DenoiserWeights<T>, x: Vec<T>, n: usize, c: T) -> (Vec<T>, SetCache<T>) {
    let cfg = &w.config;
    let lay = &w.layout;
    let (h, f) = (cfg.hidden_dim, cfg.ff_dim);
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut e1_pre = vec![T::zero(); n * h];
    linear(&x, n, w.get(lay.embed_w1), w.get(lay.embed_b1), &mut e1_pre);
    let e1: Vec<T> = e1_pre.iter().map(|&v| gelu(v)).collect();
    let mut hs = vec![T::zero(); n * h];
    linear(&e1, n, w.get(lay.embed_w2), w.get(lay.embed_b2), &mut hs);
    let (nz_pre, nz_act, nz_out) = embed_noise(w, c);
    for row in hs.chunks_exact_mut(h) {
        for (v, e) in row.iter_mut().zip(&nz_out) {
            *v = *v + *e;
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for ls in &lay.layers {
        let (a1, ln1) = layer_norm_cached(&hs, n, h, w.get(ls.ln1_g), w.get(ls.ln1_b));
        let mut qkv = vec![T::zero(); n * 3 * h];
        linear(&a1, n, w.get(ls.w_qkv), w.get(ls.b_qkv), &mut qkv);
        let mut probs = vec![T::zero(); cfg.num_heads * n * n];
        let mut attn = vec![T::zero(); n * h];
        for (j, p) in probs.chunks_exact_mut(n * n).enumerate() {
            let q = Mat::new(&qkv, n, 3 * h).cols(j * dh, dh);
            let k = Mat::new(&qkv, n, 3 * h).cols(h + j * dh, dh);
            let v = Mat::new(&qkv, n, 3 * h).cols(2 * h + j * dh, dh);
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, n, n));
            softmax_rows(p, n);
            gemm(T::one(), Mat::new(p, n, n), v, T::zero(), MatMut::new(&mut attn, n, h).cols(j * dh, dh));
        }
        let mut o = vec![T::zero(); n * h];
        linear(&attn, n, w.get(ls.w_o), w.get(ls.b_o), &mut o);
        for (v, d) in hs.iter_mut().zip(&o) {
            *v = *v + *d;
        }
        let (a2, ln2) = layer_norm_cached(&hs, n, h, w.get(ls.ln2_g), w.get(ls.ln2_b));
        let mut f_pre = vec![T::zero(); n * f];
        linear(&a2, n, w.get(ls.w_ff1), w.get(ls.b_ff1), &mut f_pre);
        let f_act: Vec<T> = f_pre.iter().map(|&v| gelu(v)).collect();
        let mut ff = vec![T::zero(); n * h];
        linear(&f_act, n, w.get(ls.w_ff2), w.get(ls.b_ff2), &mut ff);
        for (v, d) in hs.iter_mut().zip(&ff) {
            *v = *v + *d;
        }
        layers.push(LayerCache {
            ln1,
            a1,
            qkv,
            probs,
            attn,
            ln2,
            a2,
            f_pre,
            f_act,
        });
    }
    let (hf, lnf) = layer_norm_cached(&hs, n, h, w.get(lay.lnf_g), w.get(lay.lnf_b));
    let mut out = vec![T::zero(); n * 3];
    linear(&hf, n, w.get(lay.head_w), w.get(lay.head_b), &mut out);
    let cache = SetCache {
        n,
        x,
        c,
        e1_pre,
        e1,
        nz_pre,
        nz_act,
        layers,
        lnf,
        hf,
    };
    (out, cache)
}

/// Mutable views of two adjacent tensors (weight immediately followed by bias).
fn pair_mut<T>(g: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert_eq!(a.off + a.len, b.off, "tensors are not adjacent");
    g[a.off..b.off + b.len].split_at_mut(a.len)
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn backward_set<T: Real>(w: &DenoiserWeights<T>, cache: &SetCache<T>, dout: &[T], grads: &mut [T]) {
    let cfg = &w.config;
    let lay = &w.layout;
    let n = cache.n;
    let (h, f) = (cfg.hidden_dim, cfg.ff_dim);
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut dhf = vec![T::zero(); n * h];
    {
        let (gw, gb) = pair_mut(grads, lay.head_w, lay.head_b);
        linear_backward(&cache.hf, n, w.get(lay.head_w), dout, gw, gb, Some(&mut dhf));
    }
    let mut dhs = vec![T::zero(); n * h];
    {
        let (gg, gb) = pair_mut(grads, lay.lnf_g, lay.lnf_b);
        layer_norm_backward(&dhf, h, w.get(lay.lnf_g), &cache.lnf.xhat, &cache.lnf.rstd, gg, gb, &mut dhs);
    }

    let mut tmp = vec![T::zero(); n * h];
    for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // feedforward branch
        let mut df = vec![T::zero(); n * f];
        {
            let (gw, gb) = pair_mut(grads, ls.w_ff2, ls.b_ff2);
            linear_backward(&lc.f_act, n, w.get(ls.w_ff2), &dhs, gw, gb, Some(&mut df));
        }
        for (d, &p) in df.iter_mut().zip(&lc.f_pre) {
            *d = *d * gelu_grad(p);
        }
        let mut da = vec![T::zero(); n * h];
        {
            let (gw, gb) = pair_mut(grads, ls.w_ff1, ls.b_ff1);
            linear_backward(&lc.a2, n, w.get(ls.w_ff1), &df, gw, gb, Some(&mut da));
        }
        {
            let (gg, gb) = pair_mut(grads, ls.ln2_g, ls.ln2_b);
            layer_norm_backward(&da, h, w.get(ls.ln2_g), &lc.ln2.xhat, &lc.ln2.rstd, gg, gb, &mut tmp);
        }
        add_assign(&mut dhs, &tmp);

        // attention branch
        let mut dattn = vec![T::zero(); n * h];
        {
            let (gw, gb) = pair_mut(grads, ls.w_o, ls.b_o);
            linear_backward(&lc.attn, n, w.get(ls.w_o), &dhs, gw, gb, Some(&mut dattn));
        }
        let mut dqkv = vec![T::zero(); n * 3 * h];
        let mut dp = vec![T::zero(); n * n];
        for (j, p) in lc.probs.chunks_exact(n * n).enumerate() {
            let q = Mat::new(&lc.qkv, n, 3 * h).cols(j * dh, dh);
            let k = Mat::new(&lc.qkv, n, 3 * h).cols(h + j * dh, dh);
            let v = Mat::new(&lc.qkv, n, 3 * h).cols(2 * h + j * dh, dh);
            let d_o = Mat::new(&dattn, n, h).cols(j * dh, dh);
            gemm(T::one(), d_o, v.t(), T::zero(), MatMut::new(&mut dp, n, n));
            gemm(
                T::one(),
                Mat::new(p, n, n).t(),
                d_o,
                T::zero(),
                MatMut::new(&mut dqkv, n, 3 * h).cols(2 * h + j * dh, dh),
            );
            // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
            for (drow, prow) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(scale, Mat::new(&dp, n, n), k, T::zero(), MatMut::new(&mut dqkv, n, 3 * h).cols(j * dh, dh));
            gemm(
                scale,
                Mat::new(&dp, n, n).t(),
                q,
                T::zero(),
                MatMut::new(&mut dqkv, n, 3 * h).cols(h + j * dh, dh),
            );
        }
        {
            let (gw, gb) = pair_mut(grads, ls.w_qkv, ls.b_qkv);
            linear_backward(&lc.a1, n, w.get(ls.w_qkv), &dqkv, gw, gb, Some(&mut da));
        }
        {
            let (gg, gb) = pair_mut(grads, ls.ln1_g, ls.ln1_b);
            layer_norm_backward(&da, h, w.get(ls.ln1_g), &lc.ln1.xhat, &lc.ln1.rstd, gg, gb, &mut tmp);
        }
        add_assign(&mut dhs, &tmp);
    }

    // noise embedding is broadcast to every row
    let mut dnz_out = vec![T::zero(); h];
    for row in dhs.chunks_exact(h) {
        add_assign(&mut dnz_out, row);
    }
    let mut dnz_act = vec![T::zero(); cfg.noise_embed_dim];
    {
        let (gw, gb) = pair_mut(grads, lay.noise_w2, lay.noise_b2);
        linear_backward(&cache.nz_act, 1, w.get(lay.noise_w2), &dnz_out, gw, gb, Some(&mut dnz_act));
    }
    {
        let (gw, gb) = pair_mut(grads, lay.noise_w1, lay.noise_b1);
        for ((d, &p), (gwj, gbj)) in dnz_act.iter().zip(&cache.nz_pre).zip(gw.iter_mut().zip(gb.iter_mut())) {
            let dp = *d * gelu_grad(p);
            *gwj = *gwj + cache.c * dp;
            *gbj = *gbj + dp;
        }
    }

    let mut de1 = vec![T::zero(); n * h];
    {
        let (gw, gb) = pair_mut(grads, lay.embed_w2, lay.embed_b2);
        linear_backward(&cache.e1, n, w.get(lay.embed_w2), &dhs, gw, gb, Some(&mut de1));
    }
    for (d, &p) in de1.iter_mut().zip(&cache.e1_pre) {
        *d = *d * gelu_grad(p);
    }
    let (gw, gb) = pair_mut(grads, lay.embed_w1, lay.embed_b1);
    linear_backward(&cache.x, n, w.get(lay.embed_w1), &de1, gw, gb, None);
}

fn diagnose<T: Real>(cache: &SetCache<T>, set: usize) -> String {
    let bad = |v: &[T]| v.iter().any(|x| !x.is_finite());
    if bad(&cache.x) {
        return format!("set {set}: input points");
    }
    if bad(&cache.e1) {
        return format!("set {set}: point embedding");
    }
    for (i, l) in cache.layers.iter().enumerate() {
        if bad(&l.qkv) || bad(&l.probs) {
            return format!("set {set}: attention of layer {i}");
        }
        if bad(&l.f_act) {
            return format!("set {set}: feedforward of layer {i}");
        }
    }
    format!("set {set}: output head")
}

fn run_set<T: Real>(w: &DenoiserWeights<T>, x: Vec<T>, n: usize, c: T, set: usize) -> Result<(Vec<T>, SetCache<T>)> {
    let (out, cache) = forward_set(w, x, n, c);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("denoiser forward ({})", diagnose(&cache, set))));
    }
    Ok((out, cache))
}

fn check_batch<T: Real>(w: &DenoiserWeights<T>, batch: &PointBatch<T>) -> Result<()> {
    let b = batch.len();
    if batch.max_points != w.config.max_points {
        return Err(Error::InvalidInput(format!(
            "batch padded to {} points, model expects {}",
            batch.max_points, w.config.max_points
        )));
    }
    if batch.points.len() != b * batch.max_points * 3 || batch.mask.len() != b * batch.max_points {
        return Err(Error::InvalidInput("batch buffers do not match its size".into()));
    }
    Ok(())
}

/// Per-point displacements for a padded batch; masked entries are zero.
pub fn forward<T: Real>(w: &DenoiserWeights<T>, batch: &PointBatch<T>) -> Result<Vec<T>> {
    check_batch(w, batch)?;
    let mut out = vec![T::zero(); batch.points.len()];
    for b in 0..batch.len() {
        let rows = batch.valid_rows(b);
        if rows.is_empty() {
            continue;
        }
        let (y, _) = run_set(w, batch.gather(b, &rows), rows.len(), batch.c_noise[b], b)?;
        let base = b * batch.max_points * 3;
        for (k, &r) in rows.iter().enumerate() {
            out[base + 3 * r..base + 3 * r + 3].copy_from_slice(&y[3 * k..3 * k + 3]);
        }
    }
    Ok(out)
}

/// Displacements for one unpadded set of NBV points at noise level `sigma`.
pub fn forward_points<T: Real>(w: &DenoiserWeights<T>, points: &[Point], sigma: f64) -> Result<Vec<Point>> {
    if points.len() > w.config.max_points {
        return Err(Error::InvalidInput(format!(
            "{} points exceed max_points {}",
            points.len(),
            w.config.max_points
        )));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let c = c_noise(sigma)?;
    let x: Vec<T> = points.iter().flat_map(|p| p.iter().map(|&v| T::lit(v))).collect();
    let (y, _) = run_set(w, x, points.len(), T::lit(c), 0)?;
    Ok(y.chunks_exact(3)
        .map(|d| Point::new(d[0].to_f64().unwrap(), d[1].to_f64().unwrap(), d[2].to_f64().unwrap()))
        .collect())
}

/// Masked mean-squared displacement error and its exact gradient.
///
/// `loss = (1 / N_valid) * sum over valid points of |F(p) - target(p)|^2`.
pub fn loss_and_grad<T: Real>(w: &DenoiserWeights<T>, batch: &PointBatch<T>, targets: &[T]) -> Result<(f64, Vec<T>)> {
    loss_and_grad_per_set(w, batch, targets).map(|(l, g, _)| (l, g))
}

/// [`loss_and_grad`] plus each set's own mean squared error (`None` for empty sets).
pub fn loss_and_grad_per_set<T: Real>(
    w: &DenoiserWeights<T>,
    batch: &PointBatch<T>,
    targets: &[T],
) -> Result<(f64, Vec<T>, Vec<Option<f64>>)> {
    check_batch(w, batch)?;
    if targets.len() != batch.points.len() {
        return Err(Error::InvalidInput(format!(
            "{} target values for {} point values",
            targets.len(),
            batch.points.len()
        )));
    }
    let n_valid = batch.mask.iter().filter(|&&m| m).count();
    let mut grads = vec![T::zero(); w.num_params()];
    let mut per_set = vec![None; batch.len()];
    if n_valid == 0 {
        return Ok((0.0, grads, per_set));
    }
    let inv = T::one() / T::from_usize(n_valid).unwrap();
    let two_inv = T::lit(2.0) * inv;
    let mut loss = 0.0f64;
    for b in 0..batch.len() {
        let rows = batch.valid_rows(b);
        if rows.is_empty() {
            continue;
        }
        let (y, cache) = run_set(w, batch.gather(b, &rows), rows.len(), batch.c_noise[b], b)?;
        let base = b * batch.max_points * 3;
        let mut dout = vec![T::zero(); y.len()];
        let mut set_sum = 0.0f64;
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..3 {
                let t = targets[base + 3 * r + c];
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("target of set {b} point {r}")));
                }
                let e = y[3 * k + c] - t;
                set_sum += (e * e).to_f64().unwrap();
                dout[3 * k + c] = two_inv * e;
            }
        }
        loss += set_sum;
        per_set[b] = Some(set_sum / rows.len() as f64);
        backward_set(w, &cache, &dout, &mut grads);
    }
    loss /= n_valid as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((loss, grads, per_set))
}
