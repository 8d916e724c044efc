//! Hand-written layers with explicit reverse-mode gradients.
//!
//! Activations are single-sample and channel-major (`[C, H*W]`). The only
//! learnable primitive is [`Linear`], which doubles as a 3×3 convolution via
//! im2col so that low-rank adapters apply uniformly to dense and conv layers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Ordered collection of named tensors (model parameters or their gradients).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) {
        let old_names = std::mem::take(&mut self.names);
        let old = std::mem::take(&mut self.tensors);
        self.index.clear();
        for (n, t) in old_names.into_iter().zip(old) {
            if !pred(&n) {
                self.insert(n, t);
            }
        }
    }

    /// Zero tensors with the same names and shapes, restricted by `keep`.
    pub fn zeros_like(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if keep(n) {
                out.insert(n, Tensor::zeros(t.shape()));
            }
        }
        out
    }

    /// `self += scale * other` for every entry present in both.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (n, t) in other.iter() {
            if let Some(dst) = self.get_mut(n) {
                for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Fixed-order sum of per-sample gradient stores.
pub fn sum_grads(parts: Vec<ParamStore>) -> ParamStore {
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else {
        return ParamStore::new();
    };
    for g in iter {
        acc.add_scaled(&g, 1.0);
    }
    acc
}

/// He-style initialization: N(0, 2/fan_in).
pub fn he_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Low-rank adapter `scale · B · A` attached to a [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LoraRef<'a> {
    /// `[rank, in]`
    pub a: &'a Tensor,
    /// `[out, rank]`
    pub b: &'a Tensor,
    pub scale: f64,
}

/// Affine map `Y[n, p] = Σ_k W[n, k] X[p, k] + b[n]` over `P` input rows,
/// plus the adapter term `scale · Σ_r B[n, r] (Σ_k A[r, k] X[p, k])`.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'a> {
    /// `[out, in]`
    pub w: &'a Tensor,
    /// `[out]`
    pub b: &'a Tensor,
    pub lora: Option<LoraRef<'a>>,
}

/// Saved activations of a [`Linear`] forward.
#[derive(Debug, Clone)]
pub struct LinearCache {
    pub rows: usize,
    /// Adapter bottleneck `U[p, r]`, present when the adapter ran.
    pub u: Option<Vec<f64>>,
}

/// Gradients written by [`Linear::backward`]. `None` slots are skipped.
pub struct LinearGrads<'g> {
    pub w: Option<&'g mut [f64]>,
    pub b: Option<&'g mut [f64]>,
    pub a: Option<&'g mut [f64]>,
    pub bb: Option<&'g mut [f64]>,
    pub x: Option<&'g mut [f64]>,
}

impl<'a> Linear<'a> {
    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x` is `[rows, in]`; returns `[out, rows]`.
    pub fn forward(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, LinearCache)> {
        let (n_out, k_in) = (self.out_dim(), self.in_dim());
        if x.len() != rows * k_in {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, k_in],
                got: vec![x.len()],
            });
        }
        let w = self.w.data();
        let b = self.b.data();
        let mut y = vec![0.0; n_out * rows];
        for n in 0..n_out {
            let wr = &w[n * k_in..(n + 1) * k_in];
            let yr = &mut y[n * rows..(n + 1) * rows];
            for (p, yv) in yr.iter_mut().enumerate() {
                let xr = &x[p * k_in..(p + 1) * k_in];
                *yv = b[n] + dot(wr, xr);
            }
        }
        let mut u_cache = None;
        if let Some(l) = self.lora {
            let r = l.a.shape()[0];
            let a = l.a.data();
            let bm = l.b.data();
            let mut u = vec![0.0; rows * r];
            for p in 0..rows {
                let xr = &x[p * k_in..(p + 1) * k_in];
                for j in 0..r {
                    u[p * r + j] = dot(&a[j * k_in..(j + 1) * k_in], xr);
                }
            }
            for n in 0..n_out {
                for p in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..r {
                        acc += bm[n * r + j] * u[p * r + j];
                    }
                    y[n * rows + p] += l.scale * acc;
                }
            }
            u_cache = Some(u);
        }
        Ok((y, LinearCache { rows, u: u_cache }))
    }

    /// `gy` is `[out, rows]`. Gradients are accumulated (`+=`) into the slots.
    pub fn backward(&self, x: &[f64], cache: &LinearCache, gy: &[f64], grads: LinearGrads<'_>) {
        let (n_out, k_in, rows) = (self.out_dim(), self.in_dim(), cache.rows);
        let w = self.w.data();
        if let Some(gw) = grads.w {
            for n in 0..n_out {
                let gwr = &mut gw[n * k_in..(n + 1) * k_in];
                for p in 0..rows {
                    let g = gy[n * rows + p];
                    if g != 0.0 {
                        axpy(gwr, g, &x[p * k_in..(p + 1) * k_in]);
                    }
                }
            }
        }
        if let Some(gb) = grads.b {
            for n in 0..n_out {
                gb[n] += gy[n * rows..(n + 1) * rows].iter().sum::<f64>();
            }
        }
        let mut gx = grads.x;
        if let Some(gx) = gx.as_deref_mut() {
            for n in 0..n_out {
                let wr = &w[n * k_in..(n + 1) * k_in];
                for p in 0..rows {
                    let g = gy[n * rows + p];
                    if g != 0.0 {
                        axpy(&mut gx[p * k_in..(p + 1) * k_in], g, wr);
                    }
                }
            }
        }
        if let (Some(l), Some(u)) = (self.lora, cache.u.as_ref()) {
            let r = l.a.shape()[0];
            let a = l.a.data();
            let bm = l.b.data();
            if let Some(gbb) = grads.bb {
                for n in 0..n_out {
                    for p in 0..rows {
                        let g = l.scale * gy[n * rows + p];
                        for j in 0..r {
                            gbb[n * r + j] += g * u[p * r + j];
                        }
                    }
                }
            }
            // dU[p, r] = scale · Σ_n B[n, r] gy[n, p]
            let mut du = vec![0.0; rows * r];
            for n in 0..n_out {
                for p in 0..rows {
                    let g = l.scale * gy[n * rows + p];
                    for j in 0..r {
                        du[p * r + j] += bm[n * r + j] * g;
                    }
                }
            }
            if let Some(ga) = grads.a {
                for p in 0..rows {
                    let xr = &x[p * k_in..(p + 1) * k_in];
                    for j in 0..r {
                        let g = du[p * r + j];
                        if g != 0.0 {
                            axpy(&mut ga[j * k_in..(j + 1) * k_in], g, xr);
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                for p in 0..rows {
                    for j in 0..r {
                        let g = du[p * r + j];
                        if g != 0.0 {
                            axpy(&mut gx[p * k_in..(p + 1) * k_in], g, &a[j * k_in..(j + 1) * k_in]);
                        }
                    }
                }
            }
        }
    }
}

/// Inner product with four interleaved partial sums (vectorizable, fixed order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// 3×3, stride 1, zero-padded patches: `[H*W, C*9]` from a `[C, H*W]` map.
pub fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let k = c * 9;
    let mut out = vec![0.0; h * w * k];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut out[(y * w + xx) * k + ci * 9..(y * w + xx) * k + ci * 9 + 9];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[ky * 3 + kx] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto a `[C, H*W]` map.
pub fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let k = c * 9;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[(y * w + xx) * k + ci * 9..(y * w + xx) * k + ci * 9 + 9];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy as usize * w + sx as usize] += row[ky * 3 + kx];
                    }
                }
            }
        }
    }
    out
}

/// Bin boundaries splitting `n` cells into `g` contiguous groups.
pub fn bins(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * n / g, (i + 1) * n / g)).collect()
}

/// Average-pool a `[C, H*W]` map onto a `gh × gw` grid.
pub fn adaptive_avg_pool(x: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let (by, bx) = (bins(h, gh), bins(w, gw));
    let mut out = vec![0.0; c * gh * gw];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[ci * gh * gw + i * gw + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(g: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let (by, bx) = (bins(h, gh), bins(w, gw));
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let v = g[ci * gh * gw + i * gw + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        out[ci * h * w + y * w + xx] += v;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour expansion of a `gh × gw` grid back to `h × w` (adjoint-paired
/// with the bins of [`adaptive_avg_pool`]).
pub fn upsample_nearest(g: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let (by, bx) = (bins(h, gh), bins(w, gw));
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let v = g[ci * gh * gw + i * gw + j];
                for y in y0..y1 {
                    out[ci * h * w + y * w + x0..ci * h * w + y * w + x1].fill(v);
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(gy: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let (by, bx) = (bins(h, gh), bins(w, gw));
    let mut out = vec![0.0; c * gh * gw];
    for ci in 0..c {
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    s += gy[ci * h * w + y * w + x0..ci * h * w + y * w + x1].iter().sum::<f64>();
                }
                out[ci * gh * gw + i * gw + j] = s;
            }
        }
    }
    out
}

/// Numerically stable softmax over `k` classes of one pixel/sample.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Adds an adapter-free layer `{name}.w` (`[out, in]`, He init) and `{name}.b` (zeros).
pub fn init_layer(store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize) {
    store.insert(format!("{name}.w"), he_init(rng, out, inp));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

/// Adapter-free view of layer `name` in `store`.
pub fn plain_linear<'a>(store: &'a ParamStore, name: &str) -> Result<Linear<'a>> {
    Ok(Linear {
        w: store.require(&format!("{name}.w"))?,
        b: store.require(&format!("{name}.b"))?,
        lora: None,
    })
}

/// Backward of [`plain_linear`], accumulating `{name}.w` / `{name}.b` into
/// `grads`. Returns the input gradient when `want_x`.
pub fn plain_backward(
    store: &ParamStore,
    grads: &mut ParamStore,
    name: &str,
    x: &[f64],
    cache: &LinearCache,
    gy: &[f64],
    want_x: bool,
) -> Result<Option<Vec<f64>>> {
    let lin = plain_linear(store, name)?;
    let mut gw = vec![0.0; lin.w.len()];
    let mut gb = vec![0.0; lin.b.len()];
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    lin.backward(
        x,
        cache,
        gy,
        LinearGrads {
            w: Some(&mut gw),
            b: Some(&mut gb),
            a: None,
            bb: None,
            x: gx.as_deref_mut(),
        },
    );
    for (suffix, g) in [("w", gw), ("b", gb)] {
        let slot = format!("{name}.{suffix}");
        let t = grads.get_mut(&slot).ok_or_else(|| Error::invalid(format!("no gradient slot {slot}")))?;
        t.data_mut().iter_mut().zip(g).for_each(|(d, v)| *d += v);
    }
    Ok(gx)
}

/// Saved state of a 3×3 same-padding convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    lin: LinearCache,
}

/// 3×3 same-padding convolution `[C, H, W] → [O, H, W]` with weights
/// `{name}.w` of shape `[O, C·9]`.
pub fn conv3_forward(store: &ParamStore, name: &str, x: &[f64], c: usize, h: usize, w: usize) -> Result<(Vec<f64>, ConvCache)> {
    let cols = im2col3(x, c, h, w);
    let (y, lin) = plain_linear(store, name)?.forward(&cols, h * w)?;
    Ok((y, ConvCache { cols, lin }))
}

pub fn conv3_backward(
    store: &ParamStore,
    grads: &mut ParamStore,
    name: &str,
    cache: &ConvCache,
    gy: &[f64],
    (c, h, w): (usize, usize, usize),
    want_x: bool,
) -> Result<Option<Vec<f64>>> {
    let gcols = plain_backward(store, grads, name, &cache.cols, &cache.lin, gy, want_x)?;
    Ok(gcols.map(|g| col2im3(&g, c, h, w)))
}

/// `[C, N] → [N, C]`.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
