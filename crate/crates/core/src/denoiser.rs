//! Conditional noise predictor `ε̂(x_t, t, token)`.
//!
//! A global MLP reads an average-pooled view of `x_t`, a sinusoidal time
//! embedding and a learned token embedding. It emits a coarse noise map on a
//! `grid × grid` lattice, per-channel FiLM scale/shift for every convolutional
//! block and a scalar input gate. A three-level U-Net refines the result:
//!
//! ```text
//! h       = SiLU(mlp1 · [pool(x_t), temb(t), emb[token]])
//! coarse, {γ'_b, β_b}, s' = mlp2 · h;  γ_b = tanh γ'_b,  s = tanh s'
//! c       = upsample(coarse)
//! block_b(u) = SiLU(conv_b(u) ⊙ (1 + γ_b) + β_b)
//! z0 = enc0([x_t, c])            full resolution, C0 channels
//! z1 = enc1(pool(z0))            1/2, C1 = 2·C0
//! zm = mid(pool(z1))             1/4, C2 = 4·C0
//! d1 = dec1([up(zm), z1])        1/2, C1
//! d0 = dec0([up(d1), z0])        full, C0
//! ε̂  = out(d0) + c + s · x_t
//! ```
//!
//! The gate lets the network pass the input straight through at high noise
//! levels, where `ε ≈ x_t` up to scale. Every multiplicative term is bounded,
//! so the output grows at most linearly in `x_t`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, col2im3, he_init, im2col3, silu, silu_grad,
    upsample_nearest, upsample_nearest_backward, Linear, LinearCache, LinearGrads, LoraRef, ParamStore,
};
use crate::numerics::{Rng, Tensor};
use crate::phantom::NUM_TOKENS;

/// Layers that own a weight matrix, in forward order.
pub const LAYERS: [&str; 8] = ["mlp1", "mlp2", "enc0", "enc1", "mid", "dec1", "dec0", "out"];
/// FiLM-modulated convolution blocks, in forward order.
pub const BLOCKS: [&str; 5] = ["enc0", "enc1", "mid", "dec1", "dec0"];
pub const EMBED: &str = "emb.class";

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub width: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub grid: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 8,
            hidden: 128,
            time_dim: 32,
            embed_dim: 16,
            grid: 16,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl ArchConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.hidden == 0 || self.embed_dim == 0 || self.grid == 0 {
            return Err(Error::invalid("denoiser widths must be ≥ 1"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding dim must be even and ≥ 2"));
        }
        Ok(())
    }

    fn mlp_in(&self) -> usize {
        self.grid * self.grid + self.time_dim + self.embed_dim
    }

    fn mlp_out(&self) -> usize {
        self.film_offsets()[BLOCKS.len()] + 1
    }

    /// `(in, out)` channels of each block in [`BLOCKS`] order.
    fn block_channels(&self) -> [(usize, usize); 5] {
        let (c0, c1, c2) = (self.width, 2 * self.width, 4 * self.width);
        [(2, c0), (c0, c1), (c1, c2), (c2 + c1, c1), (c1 + c0, c0)]
    }

    /// Start of each block's `γ'` slice in the MLP output; `β` follows it.
    /// The final entry is the gate index.
    fn film_offsets(&self) -> [usize; 6] {
        let mut off = [0; 6];
        off[0] = self.grid * self.grid;
        for (b, &(_, c)) in self.block_channels().iter().enumerate() {
            off[b + 1] = off[b] + 2 * c;
        }
        off
    }

    /// `(out, in)` of each weight layer.
    pub fn layer_dims(&self, layer: &str) -> (usize, usize) {
        match layer {
            "mlp1" => (self.hidden, self.mlp_in()),
            "mlp2" => (self.mlp_out(), self.hidden),
            "out" => (1, self.width * 9),
            _ => {
                let b = BLOCKS.iter().position(|&n| n == layer).expect("unknown layer");
                let (ci, co) = self.block_channels()[b];
                (co, ci * 9)
            }
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Denoiser weights, optional low-rank adapters and the token embedding table.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    store: ParamStore,
    pub frozen_base: bool,
    version: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.store == other.store && self.frozen_base == other.frozen_base
    }
}

pub fn is_lora_name(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl ModelParams {
    pub fn init(rng: &mut Rng, arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let emb = (0..NUM_TOKENS * arch.embed_dim).map(|_| rng.normal()).collect();
        store.insert(EMBED, Tensor::new(vec![NUM_TOKENS, arch.embed_dim], emb)?);
        for layer in LAYERS {
            let (o, i) = arch.layer_dims(layer);
            store.insert(format!("{layer}.w"), he_init(rng, o, i));
            store.insert(format!("{layer}.b"), Tensor::zeros(&[o]));
        }
        Ok(Self {
            arch,
            store,
            frozen_base: false,
            version: next_version(),
        })
    }

    /// Rebuilds params from a stored tensor set, validating every shape.
    pub fn from_store(arch: ArchConfig, store: ParamStore, frozen_base: bool) -> Result<Self> {
        arch.validate()?;
        store.require(EMBED)?.ensure_shape(&[NUM_TOKENS, arch.embed_dim])?;
        for layer in LAYERS {
            let (o, i) = arch.layer_dims(layer);
            store.require(&format!("{layer}.w"))?.ensure_shape(&[o, i])?;
            store.require(&format!("{layer}.b"))?.ensure_shape(&[o])?;
            let a = store.get(&format!("{layer}.lora_a"));
            let b = store.get(&format!("{layer}.lora_b"));
            match (a, b) {
                (Some(a), Some(b)) => {
                    a.ensure_shape(&[arch.lora_rank, i])?;
                    b.ensure_shape(&[o, arch.lora_rank])?;
                }
                (None, None) => {}
                _ => return Err(Error::invalid(format!("layer {layer} has half an adapter"))),
            }
        }
        Ok(Self {
            arch,
            store,
            frozen_base,
            version: next_version(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access invalidates outstanding forward caches.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.version = next_version();
        &mut self.store
    }

    pub fn has_lora(&self) -> bool {
        self.store.names().iter().any(|n| is_lora_name(n))
    }

    /// Attaches adapters (`A ~ N(0, 1/in)`, `B = 0`) to every layer and freezes the base.
    pub fn attach_lora(&mut self, rng: &mut Rng) {
        let arch = self.arch.clone();
        let r = arch.lora_rank;
        let store = self.store_mut();
        for layer in LAYERS {
            let (o, i) = arch.layer_dims(layer);
            let std = (1.0 / i as f64).sqrt();
            let a = (0..r * i).map(|_| rng.normal() * std).collect();
            store.insert(format!("{layer}.lora_a"), Tensor::new(vec![r, i], a).unwrap());
            store.insert(format!("{layer}.lora_b"), Tensor::zeros(&[o, r]));
        }
        self.frozen_base = true;
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen_base || is_lora_name(name) || name == EMBED
    }

    /// Base weights and biases only (no adapters, no embedding table).
    pub fn base_digest(&self) -> String {
        let mut s = ParamStore::new();
        for (n, t) in self.store.iter() {
            if !is_lora_name(n) && n != EMBED {
                s.insert(n, t.clone());
            }
        }
        s.digest()
    }

    /// Folds each adapter into its base weight: `W ← W + (α/r)·B·A`.
    pub fn merged(&self) -> ModelParams {
        let mut out = self.clone();
        let scale = self.arch.lora_scale();
        for layer in LAYERS {
            let (Some(a), Some(b)) = (
                self.store.get(&format!("{layer}.lora_a")),
                self.store.get(&format!("{layer}.lora_b")),
            ) else {
                continue;
            };
            let (o, i) = self.arch.layer_dims(layer);
            let r = self.arch.lora_rank;
            let w = out.store.get_mut(&format!("{layer}.w")).unwrap();
            let wd = w.data_mut();
            for n in 0..o {
                for k in 0..i {
                    let mut acc = 0.0;
                    for j in 0..r {
                        acc += b.data()[n * r + j] * a.data()[j * i + k];
                    }
                    wd[n * i + k] += scale * acc;
                }
            }
        }
        out.store.remove_where(is_lora_name);
        out.frozen_base = false;
        out.version = next_version();
        out
    }

    fn linear(&self, layer: &str) -> Linear<'_> {
        let lora = match (
            self.store.get(&format!("{layer}.lora_a")),
            self.store.get(&format!("{layer}.lora_b")),
        ) {
            (Some(a), Some(b)) => Some(LoraRef {
                a,
                b,
                scale: self.arch.lora_scale(),
            }),
            _ => None,
        };
        Linear {
            w: self.store.get(&format!("{layer}.w")).expect("validated layer"),
            b: self.store.get(&format!("{layer}.b")).expect("validated layer"),
            lora,
        }
    }
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoiseModel: Sync {
    fn predict_noise(&self, x_t: &Tensor, t: f64, token: usize) -> Result<Tensor>;
}

impl NoiseModel for ModelParams {
    fn predict_noise(&self, x_t: &Tensor, t: f64, token: usize) -> Result<Tensor> {
        predict(self, x_t, t, token)
    }
}

/// Sinusoidal embedding: `[sin(tω_0), cos(tω_0), sin(tω_1), …]`, `ω_k = 10000^(-2k/D)`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    out
}

#[derive(Debug, Clone)]
struct BlockCache {
    cols: Vec<f64>,
    lin: LinearCache,
    a: Vec<f64>,
    f: Vec<f64>,
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    levels: [(usize, usize); 3],
    token: usize,
    x: Vec<f64>,
    mlp_in: Vec<f64>,
    mlp1: LinearCache,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    mlp2: LinearCache,
    mlp_out: Vec<f64>,
    blocks: Vec<BlockCache>,
    out_cols: Vec<f64>,
    out_lin: LinearCache,
}

fn image_dims(p: &ModelParams, x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("denoiser expects an [H, W] image, got {s:?}")));
    }
    let min = p.arch.grid.max(4);
    if s[0] < min || s[1] < min {
        return Err(Error::invalid(format!("image {}×{} smaller than {min}×{min}", s[0], s[1])));
    }
    Ok((s[0], s[1]))
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn block_forward(
    p: &ModelParams,
    name: &str,
    input: &[f64],
    cin: usize,
    (h, w): (usize, usize),
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Vec<f64>, BlockCache)> {
    let npx = h * w;
    let cols = im2col3(input, cin, h, w);
    let (a, lin) = p.linear(name).forward(&cols, npx)?;
    let mut f = vec![0.0; a.len()];
    let mut z = vec![0.0; a.len()];
    for (c, (&g, &b)) in gamma.iter().zip(beta).enumerate() {
        for q in c * npx..(c + 1) * npx {
            f[q] = a[q] * (1.0 + g) + b;
            z[q] = silu(f[q]);
        }
    }
    Ok((z, BlockCache { cols, lin, a, f }))
}

/// Returns the block input gradient; writes `∂/∂γ'` and `∂/∂β` into `g_film`
/// (laid out `[γ' | β]`).
#[allow(clippy::too_many_arguments)]
fn block_backward(
    p: &ModelParams,
    grads: &mut ParamStore,
    name: &str,
    cache: &BlockCache,
    gz: &[f64],
    cin: usize,
    (h, w): (usize, usize),
    gamma: &[f64],
    g_film: &mut [f64],
) -> Vec<f64> {
    let npx = h * w;
    let cout = gamma.len();
    let mut ga = vec![0.0; cache.a.len()];
    for (c, &g) in gamma.iter().enumerate() {
        let (mut gg, mut gb) = (0.0, 0.0);
        for q in c * npx..(c + 1) * npx {
            let gf = gz[q] * silu_grad(cache.f[q]);
            gg += gf * cache.a[q];
            gb += gf;
            ga[q] = gf * (1.0 + g);
        }
        g_film[c] = gg * (1.0 - g * g);
        g_film[cout + c] = gb;
    }
    let g_cols = layer_backward(p, grads, name, &cache.cols, &cache.lin, &ga);
    col2im3(&g_cols, cin, h, w)
}

/// Predicts the noise in `x_t` at (possibly fractional) timestep `t` under `token`.
pub fn forward(p: &ModelParams, x_t: &Tensor, t: f64, token: usize) -> Result<(Tensor, ForwardCache)> {
    if token >= NUM_TOKENS {
        return Err(Error::invalid(format!("token {token} outside 0..{NUM_TOKENS}")));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid(format!("timestep {t} must be finite and non-negative")));
    }
    let (h, w) = image_dims(p, x_t)?;
    let a = &p.arch;
    let g2 = a.grid * a.grid;
    let levels = [(h, w), (h / 2, w / 2), (h / 4, w / 4)];
    let chans = a.block_channels();
    let offs = a.film_offsets();

    let mut mlp_in = adaptive_avg_pool(x_t.data(), 1, h, w, a.grid, a.grid);
    mlp_in.extend(time_embedding(t, a.time_dim));
    let emb = p.store.get(EMBED).expect("validated");
    mlp_in.extend_from_slice(&emb.data()[token * a.embed_dim..(token + 1) * a.embed_dim]);

    let (pre1, mlp1) = p.linear("mlp1").forward(&mlp_in, 1)?;
    let hidden: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
    let (mlp_out, mlp2) = p.linear("mlp2").forward(&hidden, 1)?;

    let film: Vec<(Vec<f64>, &[f64])> = (0..BLOCKS.len())
        .map(|b| {
            let c = chans[b].1;
            let o = offs[b];
            (mlp_out[o..o + c].iter().map(|v| v.tanh()).collect(), &mlp_out[o + c..o + 2 * c])
        })
        .collect();
    let gate = mlp_out[offs[BLOCKS.len()]].tanh();
    let c_up = upsample_nearest(&mlp_out[..g2], 1, h, w, a.grid, a.grid);

    let [l0, l1, l2] = levels;
    let mut blocks = Vec::with_capacity(BLOCKS.len());
    let mut run = |b: usize, input: &[f64], lv: (usize, usize)| -> Result<Vec<f64>> {
        let (z, cache) = block_forward(p, BLOCKS[b], input, chans[b].0, lv, &film[b].0, film[b].1)?;
        blocks.push(cache);
        Ok(z)
    };
    let z0 = run(0, &concat(x_t.data(), &c_up), l0)?;
    let z1 = run(1, &adaptive_avg_pool(&z0, chans[0].1, l0.0, l0.1, l1.0, l1.1), l1)?;
    let zm = run(2, &adaptive_avg_pool(&z1, chans[1].1, l1.0, l1.1, l2.0, l2.1), l2)?;
    let u1 = upsample_nearest(&zm, chans[2].1, l1.0, l1.1, l2.0, l2.1);
    let d1 = run(3, &concat(&u1, &z1), l1)?;
    let u0 = upsample_nearest(&d1, chans[3].1, l0.0, l0.1, l1.0, l1.1);
    let d0 = run(4, &concat(&u0, &z0), l0)?;

    let out_cols = im2col3(&d0, chans[4].1, h, w);
    let (mut out, out_lin) = p.linear("out").forward(&out_cols, h * w)?;
    for ((o, c), x) in out.iter_mut().zip(&c_up).zip(x_t.data()) {
        *o += c + gate * x;
    }
    let cache = ForwardCache {
        version: p.version,
        levels,
        token,
        x: x_t.data().to_vec(),
        mlp_in,
        mlp1,
        pre1,
        hidden,
        mlp2,
        mlp_out,
        blocks,
        out_cols,
        out_lin,
    };
    Ok((Tensor::new(vec![h, w], out)?, cache))
}

/// Prediction without retaining activations.
pub fn predict(p: &ModelParams, x_t: &Tensor, t: f64, token: usize) -> Result<Tensor> {
    forward(p, x_t, t, token).map(|(y, _)| y)
}

/// Reverse-mode gradients of `⟨grad_out, ε̂⟩` with respect to every trainable parameter.
pub fn backward(p: &ModelParams, cache: &ForwardCache, grad_out: &Tensor) -> Result<ParamStore> {
    if cache.version != p.version {
        return Err(Error::invalid("forward cache is stale: parameters changed since forward"));
    }
    let [l0, l1, l2] = cache.levels;
    grad_out.ensure_shape(&[l0.0, l0.1])?;
    let a = &p.arch;
    let g2 = a.grid * a.grid;
    let chans = a.block_channels();
    let offs = a.film_offsets();
    let npx = l0.0 * l0.1;
    let mut grads = p.store.zeros_like(|n| p.is_trainable(n));
    let mut g_mlp_out = vec![0.0; cache.mlp_out.len()];

    let gout = grad_out.data();
    let gate_idx = offs[BLOCKS.len()];
    let gate = cache.mlp_out[gate_idx].tanh();
    g_mlp_out[gate_idx] = (1.0 - gate * gate) * gout.iter().zip(&cache.x).map(|(g, x)| g * x).sum::<f64>();

    let g_cols = layer_backward(p, &mut grads, "out", &cache.out_cols, &cache.out_lin, gout);
    let g_d0 = col2im3(&g_cols, chans[4].1, l0.0, l0.1);

    let mut block = |b: usize, gz: &[f64], lv: (usize, usize), g_mlp_out: &mut [f64]| -> Vec<f64> {
        let (o, c) = (offs[b], chans[b].1);
        let gamma: Vec<f64> = cache.mlp_out[o..o + c].iter().map(|v| v.tanh()).collect();
        let film = &mut g_mlp_out[o..o + 2 * c];
        block_backward(p, &mut grads, BLOCKS[b], &cache.blocks[b], gz, chans[b].0, lv, &gamma, film)
    };

    // dec0 input = [up(d1), z0]
    let g_in = block(4, &g_d0, l0, &mut g_mlp_out);
    let split = chans[3].1 * npx;
    let mut g_z0 = g_in[split..].to_vec();
    let g_d1 = upsample_nearest_backward(&g_in[..split], chans[3].1, l0.0, l0.1, l1.0, l1.1);

    // dec1 input = [up(zm), z1]
    let g_in = block(3, &g_d1, l1, &mut g_mlp_out);
    let split = chans[2].1 * l1.0 * l1.1;
    let mut g_z1 = g_in[split..].to_vec();
    let g_zm = upsample_nearest_backward(&g_in[..split], chans[2].1, l1.0, l1.1, l2.0, l2.1);

    let g_p1 = block(2, &g_zm, l2, &mut g_mlp_out);
    for (g, v) in g_z1.iter_mut().zip(adaptive_avg_pool_backward(&g_p1, chans[1].1, l1.0, l1.1, l2.0, l2.1)) {
        *g += v;
    }
    let g_p0 = block(1, &g_z1, l1, &mut g_mlp_out);
    for (g, v) in g_z0.iter_mut().zip(adaptive_avg_pool_backward(&g_p0, chans[0].1, l0.0, l0.1, l1.0, l1.1)) {
        *g += v;
    }
    let g_in0 = block(0, &g_z0, l0, &mut g_mlp_out);

    let mut g_cup = gout.to_vec();
    for (g, v) in g_cup.iter_mut().zip(&g_in0[npx..]) {
        *g += v;
    }
    let g_coarse = upsample_nearest_backward(&g_cup, 1, l0.0, l0.1, a.grid, a.grid);
    g_mlp_out[..g2].copy_from_slice(&g_coarse);

    let g_hidden = layer_backward(p, &mut grads, "mlp2", &cache.hidden, &cache.mlp2, &g_mlp_out);
    let g_pre1: Vec<f64> = g_hidden
        .iter()
        .zip(&cache.pre1)
        .map(|(g, &v)| g * silu_grad(v))
        .collect();
    let g_in = layer_backward(p, &mut grads, "mlp1", &cache.mlp_in, &cache.mlp1, &g_pre1);

    if let Some(ge) = grads.get_mut(EMBED) {
        let off = g2 + a.time_dim;
        let row = &mut ge.data_mut()[cache.token * a.embed_dim..(cache.token + 1) * a.embed_dim];
        row.copy_from_slice(&g_in[off..off + a.embed_dim]);
    }
    Ok(grads)
}

/// Worst relative error between the analytic gradient of
/// `mean((ε̂(x_t, t, token) − target)²)` and central finite differences,
/// over a random 5% of each trainable tensor.
pub fn grad_check(
    p: &ModelParams,
    x_t: &Tensor,
    t: f64,
    token: usize,
    target: &Tensor,
    rng: &mut Rng,
) -> Result<f64> {
    let n = x_t.len() as f64;
    let (y, cache) = forward(p, x_t, t, token)?;
    let diff = y.axpby(1.0, target, -1.0)?;
    let grads = backward(p, &cache, &diff.map(|d| 2.0 * d / n))?;
    let loss = |store: &ParamStore| {
        let probe = ModelParams {
            store: store.clone(),
            version: 0,
            ..p.clone()
        };
        let y = predict(&probe, x_t, t, token).expect("shape checked");
        y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
    };
    Ok(crate::gradcheck::check(&p.store, &grads, loss, 0.05, rng))
}

/// Runs one layer's backward pass, accumulating into the named slots of
/// `grads` that exist, and returns the input gradient.
fn layer_backward(
    p: &ModelParams,
    grads: &mut ParamStore,
    layer: &str,
    x: &[f64],
    cache: &LinearCache,
    gy: &[f64],
) -> Vec<f64> {
    let slot = |suffix: &str| grads.get(&format!("{layer}.{suffix}")).map(|t| t.data().to_vec());
    let (mut gw, mut gb, mut ga, mut gbb) = (slot("w"), slot("b"), slot("lora_a"), slot("lora_b"));
    let mut gx = vec![0.0; x.len()];
    p.linear(layer).backward(
        x,
        cache,
        gy,
        LinearGrads {
            w: gw.as_deref_mut(),
            b: gb.as_deref_mut(),
            a: ga.as_deref_mut(),
            bb: gbb.as_deref_mut(),
            x: Some(&mut gx),
        },
    );
    for (suffix, v) in [("w", gw), ("b", gb), ("lora_a", ga), ("lora_b", gbb)] {
        if let Some(v) = v {
            grads.get_mut(&format!("{layer}.{suffix}")).unwrap().data_mut().copy_from_slice(&v);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn tiny() -> ArchConfig {
        ArchConfig {
            width: 4,
            hidden: 8,
            time_dim: 8,
            embed_dim: 4,
            grid: 4,
            lora_rank: 2,
            lora_alpha: 3.0,
        }
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0.0, 32);
        for k in 0..16 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn zero_params_predict_zero() {
        let mut p = ModelParams::init(&mut Rng::new(0, 0), tiny()).unwrap();
        for (_, t) in p.store_mut().iter_mut() {
            t.data_mut().fill(0.0);
        }
        let x = gaussian(&mut Rng::new(1, 0), &[8, 8]);
        let y = predict(&p, &x, 10.0, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_deterministic_zero_bias() {
        let a = ModelParams::init(&mut Rng::new(4, 0), tiny()).unwrap();
        let b = ModelParams::init(&mut Rng::new(4, 0), tiny()).unwrap();
        assert_eq!(a, b);
        for l in LAYERS {
            assert!(a.store().get(&format!("{l}.b")).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.store().get(EMBED).unwrap().shape(), &[6, 4]);
    }

    #[test]
    fn he_variance_wide() {
        let arch = ArchConfig { width: 64, hidden: 64, ..Default::default() };
        let p = ModelParams::init(&mut Rng::new(5, 0), arch.clone()).unwrap();
        for l in LAYERS {
            let wt = p.store().get(&format!("{l}.w")).unwrap();
            let fan_in = wt.shape()[1] as f64;
            let var = wt.sq_norm() / wt.len() as f64;
            let target = 2.0 / fan_in;
            assert!((var / target - 1.0).abs() < 0.2, "{l}: var {var} target {target}");
        }
    }

    #[test]
    fn lora_at_init_is_noop() {
        let mut rng = Rng::new(6, 0);
        let base = ModelParams::init(&mut rng, tiny()).unwrap();
        let mut with = base.clone();
        with.attach_lora(&mut rng);
        let x = gaussian(&mut Rng::new(7, 0), &[8, 8]);
        assert_eq!(predict(&base, &x, 50.0, 2).unwrap(), predict(&with, &x, 50.0, 2).unwrap());
    }

    #[test]
    fn output_shape_matches_input() {
        let p = ModelParams::init(&mut Rng::new(8, 0), tiny()).unwrap();
        for (h, w) in [(4, 4), (5, 9), (8, 8), (13, 7), (16, 20)] {
            let x = gaussian(&mut Rng::new(h as u64, w as u64), &[h, w]);
            assert_eq!(predict(&p, &x, 3.0, 0).unwrap().shape(), &[h, w]);
        }
        assert!(predict(&p, &Tensor::zeros(&[3, 3]), 3.0, 0).is_err());
        assert!(predict(&p, &Tensor::zeros(&[8]), 3.0, 0).is_err());
        assert!(predict(&p, &Tensor::zeros(&[8, 8]), 3.0, 6).is_err());
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let p = ModelParams::init(&mut Rng::new(9, 0), tiny()).unwrap();
        let x = gaussian(&mut Rng::new(10, 0), &[8, 8]);
        let (y, cache) = forward(&p, &x, 5.0, 2).unwrap();
        let g = backward(&p, &cache, &y).unwrap();
        let ge = g.get(EMBED).unwrap();
        for row in 0..6 {
            let s: f64 = ge.data()[row * 4..row * 4 + 4].iter().map(|v| v.abs()).sum();
            if row == 2 {
                assert!(s > 0.0);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn frozen_base_omits_base_slots() {
        let mut rng = Rng::new(11, 0);
        let mut p = ModelParams::init(&mut rng, tiny()).unwrap();
        p.attach_lora(&mut rng);
        let x = gaussian(&mut Rng::new(12, 0), &[8, 8]);
        let (y, cache) = forward(&p, &x, 5.0, 1).unwrap();
        let g = backward(&p, &cache, &y).unwrap();
        for n in g.names() {
            assert!(is_lora_name(n) || n == EMBED, "unexpected slot {n}");
        }
        assert_eq!(g.len(), 2 * LAYERS.len() + 1);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = ModelParams::init(&mut Rng::new(13, 0), tiny()).unwrap();
        let x = gaussian(&mut Rng::new(14, 0), &[8, 8]);
        let (y, cache) = forward(&p, &x, 5.0, 1).unwrap();
        p.store_mut();
        assert!(backward(&p, &cache, &y).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(17, 0);
        let mut p = ModelParams::init(&mut rng, tiny()).unwrap();
        let x = gaussian(&mut rng, &[8, 8]);
        let target = gaussian(&mut rng, &[8, 8]);
        let e = grad_check(&p, &x, 37.0, 3, &target, &mut rng).unwrap();
        assert!(e < 1e-4, "full: {e}");
        p.attach_lora(&mut rng);
        for (n, t) in p.store_mut().iter_mut() {
            if n.ends_with("lora_b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let e = grad_check(&p, &x, 37.0, 3, &target, &mut rng).unwrap();
        assert!(e < 1e-4, "lora: {e}");
        let e = grad_check(&p, &Tensor::zeros(&[8, 8]), 1.0, 0, &Tensor::zeros(&[8, 8]), &mut rng).unwrap();
        assert!(e < 1e-4, "zero input: {e}");
    }

    #[test]
    fn merge_matches_adapter_path() {
        let mut rng = Rng::new(15, 0);
        let mut p = ModelParams::init(&mut rng, tiny()).unwrap();
        p.attach_lora(&mut rng);
        for (n, t) in p.store_mut().iter_mut() {
            if n.ends_with("lora_b") {
                for v in t.data_mut() {
                    *v = rng.normal() * 0.3;
                }
            }
        }
        let m = p.merged();
        assert!(!m.has_lora());
        let x = gaussian(&mut Rng::new(16, 0), &[8, 8]);
        let a = predict(&p, &x, 20.0, 4).unwrap();
        let b = predict(&m, &x, 20.0, 4).unwrap();
        let d = a.axpby(1.0, &b, -1.0).unwrap().max_abs();
        assert!(d < 1e-5, "diff {d}");
    }
}
