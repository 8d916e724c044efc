//! Small segmentation U-Net trained on real phantoms, used to probe whether
//! generated images carry the anatomy their class token asks for.
//!
//! ```text
//! z0 = SiLU(enc0(x))               64², 8
//! z1 = SiLU(enc1(pool z0))         32², 16
//! zm = SiLU(mid(pool z1))          16², 32
//! d1 = SiLU(dec1([up zm, z1]))     32², 16
//! d0 = SiLU(dec0([up d1, z0]))     64², 8
//! logits = head(d0)                64², 4 (bg, TL, FL, FLT)
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, conv3_backward, conv3_forward, init_layer, silu, silu_grad,
    softmax, sum_grads, upsample_nearest, upsample_nearest_backward, ConvCache, ParamStore,
};
use crate::numerics::{Rng, Tensor};
use crate::phantom::{
    labels_match_class, to_u8, DatasetSplit, PhantomSample, Split, LABEL_BG, LABEL_FL, LABEL_FLT, LABEL_TL, NUM_CLASSES,
};
use crate::trainer::optim::{clip_global_norm, AdamWConfig, OptState, StatePrecision};
use crate::trainer::Divergence;

pub const NUM_LABELS: usize = 4;
/// Minimum predicted pixel count for a label to count as detected.
pub const DETECT_PX: usize = 25;
pub const WIDTHS: [usize; 3] = [8, 16, 32];
const INPUT_SHIFT: f64 = 0.4;
const INPUT_GAIN: f64 = 4.0;
const MIN_INPUT: usize = 4;

/// `(name, in channels, out channels)` in forward order.
fn layers() -> [(&'static str, usize, usize); 6] {
    let [c0, c1, c2] = WIDTHS;
    [
        ("enc0", 1, c0),
        ("enc1", c0, c1),
        ("mid", c1, c2),
        ("dec1", c2 + c1, c1),
        ("dec0", c1 + c0, c0),
        ("head", c0, NUM_LABELS),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegParams {
    params: ParamStore,
}

/// Mean per-image Dice on the test split, over images whose ground truth contains the label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegDice {
    pub tl: Option<f64>,
    pub fl: Option<f64>,
    pub flt: Option<f64>,
}

impl SegDice {
    pub fn as_array(&self) -> [Option<f64>; 3] {
        [self.tl, self.fl, self.flt]
    }
}

struct Trace {
    h: usize,
    w: usize,
    convs: Vec<ConvCache>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn act(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&v| silu(v)).collect()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    [a, b].concat()
}

impl SegParams {
    pub fn init(rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        for (name, ci, co) in layers() {
            init_layer(&mut params, rng, name, co, ci * 9);
        }
        Self { params }
    }

    pub fn store(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, image: &Tensor) -> Result<Trace> {
        forward_with(&self.params, image)
    }

    /// Per-pixel class probabilities `[NUM_LABELS, H, W]`.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let tr = self.forward(image)?;
        let npx = tr.h * tr.w;
        let mut out = vec![0.0; NUM_LABELS * npx];
        for q in 0..npx {
            let l: Vec<f64> = (0..NUM_LABELS).map(|k| tr.logits[k * npx + q]).collect();
            for (k, p) in softmax(&l).into_iter().enumerate() {
                out[k * npx + q] = p;
            }
        }
        Tensor::new(vec![NUM_LABELS, tr.h, tr.w], out)
    }
}

fn forward_with(p: &ParamStore, image: &Tensor) -> Result<Trace> {
    let s = image.shape();
    if s.len() != 2 || s[0] < MIN_INPUT || s[1] < MIN_INPUT {
        return Err(Error::invalid(format!("segmentation input must be [H, W] with H, W ≥ {MIN_INPUT}, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let (h1, w1, h2, w2) = (h / 2, w / 2, h / 4, w / 4);
    let [c0, c1, c2] = WIDTHS;
    let x: Vec<f64> = image.data().iter().map(|v| (v - INPUT_SHIFT) * INPUT_GAIN).collect();
    let mut convs = Vec::with_capacity(6);
    let mut pre = Vec::with_capacity(5);
    let mut conv = |name: &str, input: &[f64], c: usize, hh: usize, ww: usize| -> Result<Vec<f64>> {
        let (y, cache) = conv3_forward(p, name, input, c, hh, ww)?;
        convs.push(cache);
        Ok(y)
    };
    let a0 = conv("enc0", &x, 1, h, w)?;
    let z0 = act(&a0);
    let a1 = conv("enc1", &adaptive_avg_pool(&z0, c0, h, w, h1, w1), c0, h1, w1)?;
    let z1 = act(&a1);
    let am = conv("mid", &adaptive_avg_pool(&z1, c1, h1, w1, h2, w2), c1, h2, w2)?;
    let zm = act(&am);
    let ad1 = conv("dec1", &concat(&upsample_nearest(&zm, c2, h1, w1, h2, w2), &z1), c2 + c1, h1, w1)?;
    let d1 = act(&ad1);
    let ad0 = conv("dec0", &concat(&upsample_nearest(&d1, c1, h, w, h1, w1), &z0), c1 + c0, h, w)?;
    let d0 = act(&ad0);
    let logits = conv("head", &d0, c0, h, w)?;
    pre.extend([a0, a1, am, ad1, ad0]);
    Ok(Trace { h, w, convs, pre, logits })
}

/// Mean per-pixel cross-entropy and its gradient.
fn loss_grads(p: &ParamStore, image: &Tensor, mask: &[u8]) -> Result<(f64, ParamStore)> {
    let tr = forward_with(p, image)?;
    let (h, w) = (tr.h, tr.w);
    let npx = h * w;
    if mask.len() != npx {
        return Err(Error::invalid("mask size does not match image"));
    }
    let (h1, w1, h2, w2) = (h / 2, w / 2, h / 4, w / 4);
    let [c0, c1, c2] = WIDTHS;
    let mut loss = 0.0;
    let mut g_logits = vec![0.0; NUM_LABELS * npx];
    for q in 0..npx {
        let l: Vec<f64> = (0..NUM_LABELS).map(|k| tr.logits[k * npx + q]).collect();
        let pr = softmax(&l);
        let y = mask[q] as usize;
        loss -= pr[y].max(f64::MIN_POSITIVE).ln();
        for k in 0..NUM_LABELS {
            g_logits[k * npx + q] = (pr[k] - if k == y { 1.0 } else { 0.0 }) / npx as f64;
        }
    }
    loss /= npx as f64;

    let mut g = p.zeros_like(|_| true);
    let dact = |gz: &[f64], pre: &[f64]| -> Vec<f64> { gz.iter().zip(pre).map(|(g, &v)| g * silu_grad(v)).collect() };
    let [a0, a1, am, ad1, ad0] = [&tr.pre[0], &tr.pre[1], &tr.pre[2], &tr.pre[3], &tr.pre[4]];
    let cv = &tr.convs;

    let g_d0 = conv3_backward(p, &mut g, "head", &cv[5], &g_logits, (c0, h, w), true)?.unwrap();
    let g_in = conv3_backward(p, &mut g, "dec0", &cv[4], &dact(&g_d0, ad0), (c1 + c0, h, w), true)?.unwrap();
    let mut g_z0 = g_in[c1 * npx..].to_vec();
    let g_d1 = upsample_nearest_backward(&g_in[..c1 * npx], c1, h, w, h1, w1);
    let g_in = conv3_backward(p, &mut g, "dec1", &cv[3], &dact(&g_d1, ad1), (c2 + c1, h1, w1), true)?.unwrap();
    let split = c2 * h1 * w1;
    let mut g_z1 = g_in[split..].to_vec();
    let g_zm = upsample_nearest_backward(&g_in[..split], c2, h1, w1, h2, w2);
    let g_p1 = conv3_backward(p, &mut g, "mid", &cv[2], &dact(&g_zm, am), (c1, h2, w2), true)?.unwrap();
    for (a, b) in g_z1.iter_mut().zip(adaptive_avg_pool_backward(&g_p1, c1, h1, w1, h2, w2)) {
        *a += b;
    }
    let g_p0 = conv3_backward(p, &mut g, "enc1", &cv[1], &dact(&g_z1, a1), (c0, h1, w1), true)?.unwrap();
    for (a, b) in g_z0.iter_mut().zip(adaptive_avg_pool_backward(&g_p0, c0, h, w, h1, w1)) {
        *a += b;
    }
    conv3_backward(p, &mut g, "enc0", &cv[0], &dact(&g_z0, a0), (1, h, w), false)?;
    Ok((loss, g))
}

/// Per-pixel argmax label map (row-major, values in `0..NUM_LABELS`).
pub fn segment(net: &SegParams, image: &Tensor) -> Result<Vec<u8>> {
    let tr = net.forward(image)?;
    let npx = tr.h * tr.w;
    Ok((0..npx)
        .map(|q| {
            let mut best = 0;
            for k in 1..NUM_LABELS {
                if tr.logits[k * npx + q] > tr.logits[best * npx + q] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

pub fn segment_batch(net: &SegParams, images: &[Tensor]) -> Result<Vec<Vec<u8>>> {
    images.par_iter().map(|im| segment(net, im)).collect()
}

/// Trains on `samples` with per-pixel cross-entropy (AdamW, fp32 state, clip 5).
pub fn train_on(samples: &[PhantomSample], cfg: &SegConfig) -> Result<SegParams> {
    if samples.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("segmentation training needs samples, epochs, batch size and lr > 0"));
    }
    let root = Rng::new(cfg.seed, 0x5e6);
    let mut net = SegParams::init(&mut root.derive(0));
    let mut opt = OptState::new(AdamWConfig::default(), StatePrecision::Fp32);
    let mut div: Option<Divergence> = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, ParamStore)> = chunk
                .par_iter()
                .map(|&i| loss_grads(&net.params, &samples[i].image, &samples[i].mask))
                .collect::<Result<_>>()?;
            let mut gs = Vec::with_capacity(parts.len());
            for (l, g) in parts {
                total += l;
                gs.push(g);
            }
            let mut g = sum_grads(gs);
            g.scale(1.0 / chunk.len() as f64);
            clip_global_norm(&mut g, 5.0);
            opt.step(&mut net.params, &g, cfg.lr)?;
        }
        let loss = total / samples.len() as f64;
        log::info!("segnet epoch {epoch} loss {loss:.5}");
        match div.as_mut() {
            None if loss.is_finite() => div = Some(Divergence { initial: loss, streak: 0 }),
            None => return Err(Error::Diverged { epoch, loss, initial: f64::NAN }),
            Some(d) => d.observe(epoch, loss)?,
        }
    }
    Ok(net)
}

/// Mean per-image Dice for each vessel label over images whose mask contains it.
pub fn evaluate_dice(net: &SegParams, samples: &[PhantomSample]) -> Result<SegDice> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let preds = segment_batch(net, &images)?;
    let per_label = |label: u8| -> Result<Option<f64>> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (pred, s) in preds.iter().zip(samples) {
            if s.mask.contains(&label) {
                sum += dice(pred, &s.mask, label)?;
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    };
    Ok(SegDice {
        tl: per_label(LABEL_TL)?,
        fl: per_label(LABEL_FL)?,
        flt: per_label(LABEL_FLT)?,
    })
}

/// Trains on the train split and scores Dice on the test split.
pub fn train_segnet(data: &DatasetSplit, cfg: &SegConfig) -> Result<(SegParams, SegDice)> {
    let net = train_on(&data.load(Split::Train)?, cfg)?;
    let d = evaluate_dice(&net, &data.load(Split::Test)?)?;
    Ok((net, d))
}

/// Detection rates for one requested class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub class_id: u8,
    pub n: usize,
    /// Fraction of samples with at least [`DETECT_PX`] pixels of TL, FL and FLT.
    pub tl: f64,
    pub fl: f64,
    pub flt: f64,
    /// Fraction whose detected vessel labels are exactly the class's defining set.
    pub consistent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

/// Vessel labels with at least [`DETECT_PX`] pixels in `mask`.
pub fn detected_labels(mask: &[u8]) -> Vec<u8> {
    [LABEL_TL, LABEL_FL, LABEL_FLT]
        .into_iter()
        .filter(|&l| mask.iter().filter(|&&m| m == l).count() >= DETECT_PX)
        .collect()
}

/// Segments each class's batch and reports per-label detection fractions.
/// Batches are reported in ascending class order.
pub fn utility_probe(net: &SegParams, batches: &[(u8, Vec<Tensor>)]) -> Result<ProbeReport> {
    let mut sorted: Vec<&(u8, Vec<Tensor>)> = batches.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    let mut rows = Vec::with_capacity(sorted.len());
    for (class_id, images) in sorted {
        crate::phantom::check_class(*class_id)?;
        if images.is_empty() {
            return Err(Error::invalid(format!("utility probe batch for class {class_id} is empty")));
        }
        let n = images.len() as f64;
        let found: Vec<Vec<u8>> = segment_batch(net, images)?.iter().map(|m| detected_labels(m)).collect();
        let frac = |l: u8| found.iter().filter(|d| d.contains(&l)).count() as f64 / n;
        rows.push(ProbeRow {
            class_id: *class_id,
            n: images.len(),
            tl: frac(LABEL_TL),
            fl: frac(LABEL_FL),
            flt: frac(LABEL_FLT),
            consistent: found.iter().filter(|d| labels_match_class(*class_id, d)).count() as f64 / n,
        });
    }
    Ok(ProbeReport { rows })
}

impl ProbeReport {
    pub fn row(&self, class_id: u8) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.class_id == class_id)
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("Utility probe (detection = at least {DETECT_PX} px)\n");
        s.push_str("Class     n     TL     FL    FLT  consistent\n");
        for r in &self.rows {
            writeln!(
                s,
                "C{:<4} {:>5} {:>6.2} {:>6.2} {:>6.2} {:>11.2}",
                r.class_id, r.n, r.tl, r.fl, r.flt, r.consistent
            )
            .unwrap();
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("class,n,tl,fl,flt,consistent\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{},{}", r.class_id, r.n, r.tl, r.fl, r.flt, r.consistent).unwrap();
        }
        s
    }
}

/// Colour for each label in overlays: TL green, FL red, FLT blue.
pub fn label_color(label: u8) -> Option<[u8; 3]> {
    match label {
        LABEL_TL => Some([0, 200, 0]),
        LABEL_FL => Some([220, 0, 0]),
        LABEL_FLT => Some([0, 80, 255]),
        _ => None,
    }
}

/// Grey image with labelled pixels blended 50/50 with their label colour, as binary PPM.
pub fn overlay_ppm(image: &Tensor, mask: &[u8]) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 2 || mask.len() != image.len() {
        return Err(Error::invalid("overlay needs an [H, W] image and a matching mask"));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    for (&v, &m) in image.data().iter().zip(mask) {
        let g = to_u8(v);
        match label_color(m) {
            Some(c) => out.extend(c.iter().map(|&ch| ((g as u16 + ch as u16) / 2) as u8)),
            None => out.extend([g, g, g]),
        }
    }
    Ok(out)
}

pub fn write_overlay_ppm(path: &Path, image: &Tensor, mask: &[u8]) -> Result<()> {
    let bytes = overlay_ppm(image, mask)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of pixels labelled background.
pub fn background_fraction(mask: &[u8]) -> f64 {
    mask.iter().filter(|&&m| m == LABEL_BG).count() as f64 / mask.len().max(1) as f64
}

/// One probe row per class 1..=5 is the expected report shape.
pub fn expected_classes() -> Vec<u8> {
    (1..=NUM_CLASSES as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::numerics::fp16_roundtrip;
    use crate::phantom::{build_dataset, gen_phantom, DatasetConfig};
    use std::sync::OnceLock;

    fn trained() -> &'static (SegParams, SegDice, DatasetSplit) {
        static NET: OnceLock<(SegParams, SegDice, DatasetSplit)> = OnceLock::new();
        NET.get_or_init(|| {
            let data = build_dataset(&DatasetConfig::default()).unwrap();
            let (net, d) = train_segnet(&data, &SegConfig::default()).unwrap();
            (net, d, data)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = SegParams::init(&mut Rng::new(1, 0));
        let s = gen_phantom(4, 3, 32).unwrap();
        let (_, g) = loss_grads(&net.params, &s.image, &s.mask).unwrap();
        let loss = |p: &ParamStore| loss_grads(p, &s.image, &s.mask).unwrap().0;
        let e = gradcheck::check(&net.params, &g, loss, 0.05, &mut Rng::new(2, 0));
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn shapes_and_distribution() {
        let net = SegParams::init(&mut Rng::new(3, 0));
        let im = gen_phantom(1, 4, 32).unwrap().image;
        let p = net.probabilities(&im).unwrap();
        assert_eq!(p.shape(), &[4, 32, 32]);
        for q in 0..1024 {
            let s: f64 = (0..4).map(|k| p.data()[k * 1024 + q]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let m = segment(&net, &im).unwrap();
        assert_eq!(m.len(), 1024);
        assert!(m.iter().all(|&v| (v as usize) < NUM_LABELS));
        assert!(segment(&net, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let samples: Vec<PhantomSample> = (0..4).map(|i| gen_phantom(i, 4, 32).unwrap()).collect();
        let cfg = SegConfig { epochs: 2, batch_size: 2, ..Default::default() };
        assert_eq!(train_on(&samples, &cfg).unwrap(), train_on(&samples, &cfg).unwrap());
    }

    #[test]
    fn trained_net_segments_test_split() {
        let (_, d, _) = trained();
        assert!(d.tl.unwrap() >= 0.9, "TL dice {:?}", d.tl);
        assert!(d.fl.unwrap() >= 0.9, "FL dice {:?}", d.fl);
    }

    #[test]
    fn blank_image_is_background() {
        let (net, _, _) = trained();
        let m = segment(net, &Tensor::zeros(&[64, 64])).unwrap();
        assert!(background_fraction(&m) >= 0.99);
    }

    #[test]
    fn fp16_copy_segments_identically() {
        let (net, _, data) = trained();
        let test = data.load(Split::Test).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for s in test.iter().take(20) {
            let a = segment(net, &s.image).unwrap();
            let b = segment(net, &fp16_roundtrip(&s.image).tensor).unwrap();
            same += a.iter().zip(&b).filter(|(x, y)| x == y).count();
            total += a.len();
        }
        assert!(same as f64 / total as f64 >= 0.999);
    }

    #[test]
    fn probe_on_real_images_recovers_class_labels() {
        let (net, _, data) = trained();
        let test = data.load(Split::Test).unwrap();
        let batches: Vec<(u8, Vec<Tensor>)> = expected_classes()
            .into_iter()
            .rev()
            .map(|c| (c, test.iter().filter(|s| s.class_id == c).map(|s| s.image.clone()).collect()))
            .collect();
        let r = utility_probe(net, &batches).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.class_id).collect::<Vec<_>>(), expected_classes());
        for row in &r.rows {
            assert!(row.consistent >= 0.95, "class {}: {row:?}", row.class_id);
            for f in [row.tl, row.fl, row.flt, row.consistent] {
                assert!((0.0..=1.0).contains(&f));
            }
        }
        assert!(utility_probe(net, &[(2, vec![])]).is_err());
    }

    #[test]
    fn overlay_colours() {
        let im = Tensor::full(&[1, 4], 0.0);
        let ppm = overlay_ppm(&im, &[0, 1, 2, 3]).unwrap();
        let head = b"P6\n4 1\n255\n";
        assert_eq!(&ppm[..head.len()], head);
        let px = &ppm[head.len()..];
        assert_eq!(&px[0..3], &[0, 0, 0]);
        assert_eq!(&px[3..6], &[0, 100, 0]);
        assert_eq!(&px[6..9], &[110, 0, 0]);
        assert_eq!(&px[9..12], &[0, 40, 127]);
    }

    #[test]
    fn detection_threshold() {
        let mut m = vec![0u8; 100];
        m[..DETECT_PX].fill(LABEL_FL);
        m[50..50 + DETECT_PX - 1].fill(LABEL_TL);
        assert_eq!(detected_labels(&m), vec![LABEL_FL]);
    }
}
