//! Small convolutional phantom classifier whose penultimate activations
//! serve as the feature space for Fréchet distance and t-SNE.
//!
//! ```text
//! conv1 3×3 (1 → 12), SiLU, pool → 16×16
//! conv2 3×3 (12 → 16), SiLU, pool → 4×4
//! fc1 (256 → 64), SiLU   = φ
//! fc2 (64 → 5)           = class logits
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, conv3_backward, conv3_forward, init_layer, plain_backward,
    plain_linear, silu, silu_grad, softmax, sum_grads, ConvCache, LinearCache, ParamStore,
};
use crate::numerics::tns::DType;
use crate::numerics::{Rng, Tensor};
use crate::phantom::{DatasetSplit, PhantomSample, Split, NUM_CLASSES};
use crate::trainer::checkpoint;
use crate::trainer::optim::{clip_global_norm, AdamWConfig, OptState, StatePrecision};

pub const FEATURE_DIM: usize = 64;
const C1: usize = 12;
const C2: usize = 16;
const G1: usize = 16;
const G2: usize = 4;
const FLAT: usize = C2 * G2 * G2;
const MIN_INPUT: usize = G1;
/// Input standardization `(x − shift) · gain`.
const INPUT_SHIFT: f64 = 0.4;
const INPUT_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training aborts when held-out accuracy ends below this.
    pub min_accuracy: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 1e-2,
            seed: 0,
            min_accuracy: 0.6,
        }
    }
}

/// Frozen feature extractor and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    params: ParamStore,
}

struct Trace {
    h: usize,
    w: usize,
    c1: ConvCache,
    a1: Vec<f64>,
    c2: ConvCache,
    a2: Vec<f64>,
    flat: Vec<f64>,
    l1: LinearCache,
    z1: Vec<f64>,
    phi: Vec<f64>,
    l2: LinearCache,
    logits: Vec<f64>,
}

fn run(params: &ParamStore, image: &Tensor) -> Result<Trace> {
    let &[h, w] = image.shape() else {
        return Err(Error::invalid("encoder expects a 2-D image"));
    };
    if h < MIN_INPUT || w < MIN_INPUT {
        return Err(Error::invalid(format!("encoder input must be at least {MIN_INPUT}×{MIN_INPUT}")));
    }
    let x: Vec<f64> = image.data().iter().map(|v| (v - INPUT_SHIFT) * INPUT_GAIN).collect();
    let (a1, c1) = conv3_forward(params, "conv1", &x, 1, h, w)?;
    let p1 = adaptive_avg_pool(&a1.iter().map(|&v| silu(v)).collect::<Vec<_>>(), C1, h, w, G1, G1);
    let (a2, c2) = conv3_forward(params, "conv2", &p1, C1, G1, G1)?;
    let flat = adaptive_avg_pool(&a2.iter().map(|&v| silu(v)).collect::<Vec<_>>(), C2, G1, G1, G2, G2);
    let (z1, l1) = plain_linear(params, "fc1")?.forward(&flat, 1)?;
    let phi: Vec<f64> = z1.iter().map(|&v| silu(v)).collect();
    let (logits, l2) = plain_linear(params, "fc2")?.forward(&phi, 1)?;
    Ok(Trace {
        h,
        w,
        c1,
        a1,
        c2,
        a2,
        flat,
        l1,
        z1,
        phi,
        l2,
        logits,
    })
}

/// Gradient of `−log softmax(logits)[target]`; returns (loss, grads).
fn loss_grads(params: &ParamStore, image: &Tensor, target: usize) -> Result<(f64, ParamStore)> {
    let tr = run(params, image)?;
    let prob = softmax(&tr.logits);
    let loss = -prob[target].max(1e-300).ln();
    let mut g = params.zeros_like(|_| true);
    let mut gl = prob;
    gl[target] -= 1.0;
    let gphi = plain_backward(params, &mut g, "fc2", &tr.phi, &tr.l2, &gl, true)?.unwrap();
    let gz1: Vec<f64> = gphi.iter().zip(&tr.z1).map(|(g, &z)| g * silu_grad(z)).collect();
    let gflat = plain_backward(params, &mut g, "fc1", &tr.flat, &tr.l1, &gz1, true)?.unwrap();
    let gs2 = adaptive_avg_pool_backward(&gflat, C2, G1, G1, G2, G2);
    let ga2: Vec<f64> = gs2.iter().zip(&tr.a2).map(|(g, &a)| g * silu_grad(a)).collect();
    let gp1 = conv3_backward(params, &mut g, "conv2", &tr.c2, &ga2, (C1, G1, G1), true)?.unwrap();
    let gs1 = adaptive_avg_pool_backward(&gp1, C1, tr.h, tr.w, G1, G1);
    let ga1: Vec<f64> = gs1.iter().zip(&tr.a1).map(|(g, &a)| g * silu_grad(a)).collect();
    conv3_backward(params, &mut g, "conv1", &tr.c1, &ga1, (1, tr.h, tr.w), false)?;
    Ok((loss, g))
}

impl FeatureEncoder {
    pub fn init(rng: &mut Rng) -> Self {
        let mut p = ParamStore::new();
        init_layer(&mut p, rng, "conv1", C1, 9);
        init_layer(&mut p, rng, "conv2", C2, C1 * 9);
        init_layer(&mut p, rng, "fc1", FEATURE_DIM, FLAT);
        init_layer(&mut p, rng, "fc2", NUM_CLASSES, FEATURE_DIM);
        Self { params: p }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Penultimate activations φ (length [`FEATURE_DIM`]).
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(run(&self.params, image)?.phi)
    }

    pub fn features_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|im| self.features(im)).collect()
    }

    pub fn class_probs(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&run(&self.params, image)?.logits))
    }

    /// Predicted class id in `1..=5`; ties go to the lower id.
    pub fn classify(&self, image: &Tensor) -> Result<u8> {
        let logits = run(&self.params, image)?.logits;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best as u8 + 1)
    }

    pub fn classify_batch(&self, images: &[Tensor]) -> Result<Vec<u8>> {
        images.par_iter().map(|im| self.classify(im)).collect()
    }

    /// Mean per-class accuracy over the classes present in `samples`.
    pub fn balanced_accuracy(&self, samples: &[PhantomSample]) -> Result<f64> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let pred = self.classify_batch(&images)?;
        let mut hit = [0usize; NUM_CLASSES];
        let mut tot = [0usize; NUM_CLASSES];
        for (s, p) in samples.iter().zip(pred) {
            let c = s.class_id as usize - 1;
            tot[c] += 1;
            hit[c] += (p == s.class_id) as usize;
        }
        let present: Vec<f64> = (0..NUM_CLASSES).filter(|&c| tot[c] > 0).map(|c| hit[c] as f64 / tot[c] as f64).collect();
        if present.is_empty() {
            return Err(Error::invalid("no samples to score"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "encoder".to_string());
        let (bytes, _) = checkpoint::encode(&meta, &self.params, DType::F64)?;
        checkpoint::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, params) = checkpoint::decode(&bytes)?;
        if meta.get("kind").map(String::as_str) != Some("encoder") {
            return Err(Error::Corrupt {
                format: "CKPT1",
                offset: 0,
                reason: "not an encoder file".into(),
            });
        }
        let reference = Self::init(&mut Rng::new(0, 0));
        for (n, t) in reference.params.iter() {
            params.require(n)?.ensure_shape(t.shape())?;
        }
        Ok(Self { params })
    }
}

/// Trains on the train split. Returns the encoder and its balanced accuracy
/// on the val split; fails when that accuracy is below `cfg.min_accuracy`.
pub fn train_feature_encoder(data: &DatasetSplit, cfg: &EncoderConfig) -> Result<(FeatureEncoder, f64)> {
    let train = data.load(Split::Train)?;
    let val = data.load(Split::Val)?;
    let enc = train_on(&train, cfg)?;
    let acc = enc.balanced_accuracy(if val.is_empty() { &train } else { &val })?;
    log::info!("feature encoder held-out balanced accuracy {acc:.3}");
    if acc < cfg.min_accuracy {
        return Err(Error::Numerical(format!(
            "feature encoder accuracy {acc:.3} below {:.2}; features unusable",
            cfg.min_accuracy
        )));
    }
    Ok((enc, acc))
}

/// Class-balanced minibatch training with AdamW.
pub fn train_on(samples: &[PhantomSample], cfg: &EncoderConfig) -> Result<FeatureEncoder> {
    if samples.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("encoder training needs samples, epochs and batch size ≥ 1"));
    }
    let root = Rng::new(cfg.seed, 0xe2c);
    let mut enc = FeatureEncoder::init(&mut root.derive(0));
    let mut opt = OptState::new(AdamWConfig::default(), StatePrecision::Fp32);
    // Inverse-frequency resampling so rare classes are seen as often as common ones.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.class_id as usize - 1].push(i);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let per_epoch = samples.len();
    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        let order: Vec<usize> = (0..per_epoch)
            .map(|_| {
                let cls = present[rng.below(present.len())];
                cls[rng.below(cls.len())]
            })
            .collect();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, ParamStore)> = chunk
                .par_iter()
                .map(|&i| loss_grads(&enc.params, &samples[i].image, samples[i].class_id as usize - 1))
                .collect::<Result<_>>()?;
            let mut loss = 0.0;
            let mut gs = Vec::with_capacity(parts.len());
            for (l, g) in parts {
                loss += l;
                gs.push(g);
            }
            let mut g = sum_grads(gs);
            g.scale(1.0 / chunk.len() as f64);
            clip_global_norm(&mut g, 5.0);
            opt.step(&mut enc.params, &g, cfg.lr)?;
            total += loss;
        }
        log::debug!("encoder epoch {epoch} loss {:.4}", total / per_epoch as f64);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::phantom::gen_phantom;

    #[test]
    fn feature_dim_and_determinism() {
        let enc = FeatureEncoder::init(&mut Rng::new(1, 0));
        let im = gen_phantom(3, 4, 64).unwrap().image;
        assert_eq!(enc.features(&im).unwrap().len(), FEATURE_DIM);
        assert_eq!(enc.features(&gen_phantom(3, 4, 32).unwrap().image).unwrap().len(), FEATURE_DIM);
        assert_eq!(enc.features(&im).unwrap(), enc.features(&im).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let enc = FeatureEncoder::init(&mut Rng::new(2, 0));
        let im = gen_phantom(5, 4, 32).unwrap().image;
        let (_, g) = loss_grads(&enc.params, &im, 3).unwrap();
        let loss = |p: &ParamStore| loss_grads(p, &im, 3).unwrap().0;
        let e = gradcheck::check(&enc.params, &g, loss, 0.05, &mut Rng::new(3, 0));
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn learns_phantom_classes() {
        let data = crate::phantom::build_dataset(&Default::default()).unwrap();
        let train = data.load(Split::Train).unwrap();
        let held: Vec<PhantomSample> = (0..50).map(|i| gen_phantom(900 + i, (i % 5 + 1) as u8, 64).unwrap()).collect();
        let cfg = EncoderConfig::default();
        let enc = train_on(&train, &cfg).unwrap();
        assert!(enc.balanced_accuracy(&held).unwrap() >= 0.9);
        assert_eq!(enc, train_on(&train, &cfg).unwrap());
    }
}
