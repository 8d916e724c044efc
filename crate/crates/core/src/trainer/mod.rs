//! Noise-prediction training: base model, low-rank adapter fine-tuning with
//! prior preservation, and checkpoint storage.

pub mod checkpoint;
pub mod optim;

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::denoiser::{backward, forward, ModelParams, NoiseModel, EMBED};
use crate::error::{Error, Result};
use crate::nn::{sum_grads, ParamStore};
use crate::numerics::{gaussian, Rng, Tensor};
use crate::phantom::{class_token, DatasetSplit, PhantomSample, Split, NUM_CLASSES};
use crate::sampler::{sample_batch, Method, SamplerConfig};
use crate::schedule::NoiseSchedule;

pub use checkpoint::{load_adapters, load_checkpoint, save_adapters, save_checkpoint};
pub use optim::{clip_global_norm, AdamWConfig, OptState, StatePrecision, StepOutcome};

const VAL_STREAM: u64 = 0x7661_6c00;
const EVAL_STREAM: u64 = 0x6576_616c;
const PRIOR_STREAM: u64 = 0x7072_696f;

/// Divergence: loss above `DIVERGE_FACTOR ×` the epoch-0 loss for
/// `DIVERGE_EPOCHS` consecutive epochs.
pub const DIVERGE_FACTOR: f64 = 10.0;
pub const DIVERGE_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub precision: StatePrecision,
    pub adam: AdamWConfig,
    pub lora: bool,
    pub prior_lambda: f64,
    /// Probability that a training example's token is replaced by 0.
    pub cond_dropout: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Independent `(t, ε)` draws per image per epoch.
    pub draws_per_sample: usize,
    /// Base training draws each slot's class uniformly, then an image within
    /// it, so rare classes are seen as often as common ones.
    pub balance_classes: bool,
    /// Cosine-anneal the learning rate from `lr` to `lr / 10` over the run.
    pub cosine_decay: bool,
    /// Fine-tune subject class.
    pub subject_class: u8,
    /// Prior-set size per non-subject class.
    pub prior_per_class: usize,
    pub prior_steps: usize,
    pub prior_guidance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 1e-4,
            precision: StatePrecision::Q8,
            adam: AdamWConfig::default(),
            lora: true,
            prior_lambda: 1.0,
            cond_dropout: 0.1,
            seed: 0,
            clip_norm: 1.0,
            draws_per_sample: 1,
            balance_classes: true,
            cosine_decay: false,
            subject_class: 3,
            prior_per_class: 32,
            prior_steps: 26,
            prior_guidance: 4.0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the 200-phantom smoke run.
    pub fn smoke() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 2e-3,
            draws_per_sample: 8,
            cosine_decay: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.draws_per_sample == 0 {
            return Err(Error::invalid("epochs, batch_size and draws_per_sample must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("cond_dropout must lie in [0, 1]"));
        }
        if !(self.prior_lambda >= 0.0 && self.prior_lambda.is_finite()) {
            return Err(Error::invalid("prior_lambda must be finite and ≥ 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be > 0"));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` of `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if !cfg.cosine_decay || total <= 1 {
        return cfg.lr;
    }
    let frac = step as f64 / (total - 1) as f64;
    cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// One training image in model space (`[-1, 1]`) with its conditioning token.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor,
    pub token: usize,
}

impl TrainExample {
    pub fn from_sample(s: &PhantomSample) -> Result<Self> {
        Ok(Self {
            x0: s.image.map(|v| 2.0 * v - 1.0),
            token: class_token(s.class_id)?,
        })
    }

    pub fn from_image(image: &Tensor, token: usize) -> Self {
        Self {
            x0: image.map(|v| 2.0 * v - 1.0),
            token,
        }
    }
}

/// The stochastic part of one loss term: timestep, noise and effective token.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Tensor,
    pub token: usize,
}

/// Draws `(t, ε, token)` for each example sequentially from `rng`.
pub fn draw_batch(batch: &[TrainExample], sched: &NoiseSchedule, rng: &mut Rng, cond_dropout: f64) -> Vec<Draw> {
    batch
        .iter()
        .map(|ex| {
            let t = 1 + rng.below(sched.steps);
            let eps = gaussian(rng, ex.x0.shape());
            let drop = rng.uniform() < cond_dropout;
            Draw {
                t,
                eps,
                token: if drop { 0 } else { ex.token },
            }
        })
        .collect()
}

fn check_batch(batch: &[TrainExample], draws: &[Draw]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::invalid("one draw per example required"));
    }
    Ok(())
}

/// Loss `mean ‖ε − ε̂(x_t, t, c)‖²` for fixed draws, using any noise model.
pub fn loss_value<M: NoiseModel + ?Sized>(
    model: &M,
    batch: &[TrainExample],
    draws: &[Draw],
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_batch(batch, draws)?;
    let per: Vec<(f64, usize)> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(ex, d)| {
            let x_t = sched.add_noise(&ex.x0, &d.eps, d.t)?;
            let y = model.predict_noise(&x_t, d.t as f64, d.token)?;
            let se = y.data().iter().zip(d.eps.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            Ok((se, y.len()))
        })
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(|p| p.1).sum();
    Ok(per.iter().map(|p| p.0).sum::<f64>() / n as f64)
}

/// Loss and gradient (trainable slots only) for fixed draws.
pub fn loss_and_grads(
    p: &ModelParams,
    batch: &[TrainExample],
    draws: &[Draw],
    sched: &NoiseSchedule,
) -> Result<(f64, ParamStore)> {
    check_batch(batch, draws)?;
    let n_total: usize = batch.iter().map(|e| e.x0.len()).sum();
    let scale = 2.0 / n_total as f64;
    let per: Vec<(f64, ParamStore)> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(ex, d)| {
            let x_t = sched.add_noise(&ex.x0, &d.eps, d.t)?;
            let (y, cache) = forward(p, &x_t, d.t as f64, d.token)?;
            let diff = y.axpby(1.0, &d.eps, -1.0)?;
            let se = diff.sq_norm();
            let g = backward(p, &cache, &diff.map(|v| v * scale))?;
            Ok((se, g))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut parts = Vec::with_capacity(per.len());
    for (se, g) in per {
        loss += se;
        parts.push(g);
    }
    Ok((loss / n_total as f64, sum_grads(parts)))
}

/// Noise-prediction loss with fresh draws from `rng`.
pub fn diffusion_loss(
    p: &ModelParams,
    batch: &[TrainExample],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cond_dropout: f64,
) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let draws = draw_batch(batch, sched, rng, cond_dropout);
    loss_and_grads(p, batch, &draws, sched)
}

/// `L_subject + λ·L_prior`. The prior term replays the subject term's
/// random stream, so identical batches contribute identical terms.
pub fn prior_preservation_loss(
    p: &ModelParams,
    subject: &[TrainExample],
    prior: &[TrainExample],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    lambda: f64,
    cond_dropout: f64,
) -> Result<(f64, ParamStore)> {
    if lambda > 0.0 && prior.is_empty() {
        return Err(Error::invalid("prior batch is empty but prior_lambda > 0"));
    }
    let mut prior_rng = rng.clone();
    let (ls, mut g) = diffusion_loss(p, subject, sched, rng, cond_dropout)?;
    if lambda == 0.0 {
        return Ok((ls, g));
    }
    let (lp, gp) = diffusion_loss(p, prior, sched, &mut prior_rng, cond_dropout)?;
    g.add_scaled(&gp, lambda);
    Ok((ls + lambda * lp, g))
}

/// Worst finite-difference relative error of `loss_and_grads` on fixed draws.
pub fn loss_grad_check(
    p: &ModelParams,
    batch: &[TrainExample],
    draws: &[Draw],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(p, batch, draws, sched)?;
    let probe = |store: &ParamStore| {
        let q = ModelParams::from_store(p.arch.clone(), store.clone(), p.frozen_base).expect("same shapes");
        loss_value(&q, batch, draws, sched).expect("validated batch")
    };
    Ok(crate::gradcheck::check(p.store(), &grads, probe, 0.05, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochStats>,
    pub rejected_steps: u64,
}

/// `epoch,loss,val_loss` rows.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,val_loss\n");
    for e in curve {
        writeln!(s, "{},{:.17e},{:.17e}", e.epoch, e.loss, e.val_loss).unwrap();
    }
    s
}

/// Epoch index sequence: each example repeated `draws` times, shuffled.
fn epoch_order(n: usize, draws: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, draws)).collect();
    rng.shuffle(&mut order);
    order
}

/// Same length as [`epoch_order`], but each slot picks a token uniformly
/// among those present and then an example of that token uniformly.
fn balanced_order(tokens: &[usize], draws: usize, rng: &mut Rng) -> Vec<usize> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == t) {
            Some((_, v)) => v.push(i),
            None => groups.push((t, vec![i])),
        }
    }
    groups.sort_by_key(|(t, _)| *t);
    (0..tokens.len() * draws)
        .map(|_| {
            let g = &groups[rng.below(groups.len())].1;
            g[rng.below(g.len())]
        })
        .collect()
}

pub(crate) struct Divergence {
    pub(crate) initial: f64,
    pub(crate) streak: usize,
}

impl Divergence {
    pub(crate) fn observe(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss > DIVERGE_FACTOR * self.initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= DIVERGE_EPOCHS {
            return Err(Error::Diverged {
                epoch,
                loss,
                initial: self.initial,
            });
        }
        Ok(())
    }
}

fn fixed_draws(set: &[TrainExample], sched: &NoiseSchedule, seed: u64, stream: u64) -> Vec<Draw> {
    draw_batch(set, sched, &mut Rng::new(seed, stream), 0.0)
}

fn mean_loss(p: &ModelParams, set: &[TrainExample], draws: &[Draw], sched: &NoiseSchedule) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    loss_value(p, set, draws, sched)
}

/// Trains `p` in place on the train split.
///
/// Epoch 0 records the untrained model's loss on a fixed draw of the train
/// set. Every epoch's `val_loss` uses the same seeded draws on the val split.
pub fn train_base(
    p: &mut ModelParams,
    data: &DatasetSplit,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<TrainExample> = data.load(Split::Train)?.iter().map(TrainExample::from_sample).collect::<Result<_>>()?;
    let val: Vec<TrainExample> = data.load(Split::Val)?.iter().map(TrainExample::from_sample).collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    train_examples(p, &train, &val, sched, cfg)
}

/// Training loop over explicit example sets.
pub fn train_examples(
    p: &mut ModelParams,
    train: &[TrainExample],
    val: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed, 0);
    let eval_draws = fixed_draws(train, sched, cfg.seed, EVAL_STREAM);
    let val_draws = fixed_draws(val, sched, cfg.seed, VAL_STREAM);
    let initial = mean_loss(p, train, &eval_draws, sched)?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        loss: initial,
        val_loss: mean_loss(p, val, &val_draws, sched)?,
    }];
    log::info!("epoch 0 loss {initial:.5}");
    let mut div = Divergence { initial, streak: 0 };
    let mut opt = OptState::new(cfg.adam, cfg.precision);
    let total = cfg.epochs * (train.len() * cfg.draws_per_sample).div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        let order = if cfg.balance_classes {
            let tokens: Vec<usize> = train.iter().map(|e| e.token).collect();
            balanced_order(&tokens, cfg.draws_per_sample, &mut rng)
        } else {
            epoch_order(train.len(), cfg.draws_per_sample, &mut rng)
        };
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut grads) = diffusion_loss(p, &batch, sched, &mut rng, cfg.cond_dropout)?;
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(p.store_mut(), &grads, lr_at(cfg, step, total))?;
            step += 1;
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let loss = sum / count as f64;
        let val_loss = mean_loss(p, val, &val_draws, sched)?;
        log::info!("epoch {epoch} loss {loss:.5} val {val_loss:.5}");
        curve.push(EpochStats { epoch, loss, val_loss });
        div.observe(epoch, loss)?;
    }
    Ok(TrainOutcome {
        params: p.clone(),
        curve,
        rejected_steps: opt.rejected,
    })
}

/// Prior set: `per_class` base-model samples for every class except the subject.
pub fn generate_prior(
    base: &ModelParams,
    sched: &NoiseSchedule,
    size: usize,
    cfg: &TrainConfig,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for class_id in 1..=NUM_CLASSES as u8 {
        if class_id == cfg.subject_class {
            continue;
        }
        let token = class_token(class_id)?;
        let sc = SamplerConfig {
            method: Method::Euler,
            steps: cfg.prior_steps.min(sched.steps),
            guidance: cfg.prior_guidance,
            pos_token: token,
            neg_token: 0,
            seed: cfg.seed ^ PRIOR_STREAM,
            stream: class_id as u64 * 1_000_000,
            height: size,
            width: size,
        };
        for s in sample_batch(base, sched, &sc, cfg.prior_per_class)? {
            out.push(TrainExample::from_image(&s.image, token));
        }
    }
    Ok(out)
}

/// Zeroes every embedding-gradient row except `keep`.
fn mask_embedding(grads: &mut ParamStore, keep: usize) {
    if let Some(g) = grads.get_mut(EMBED) {
        let dim = g.shape()[1];
        for (row, chunk) in g.data_mut().chunks_mut(dim).enumerate() {
            if row != keep {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Adapter fine-tune of `base` on the subject images with prior preservation.
/// The returned params carry the same base weights bit for bit.
pub fn train_lora(
    base: &ModelParams,
    subject: &[PhantomSample],
    prior: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.lora {
        return Err(Error::invalid("LoRA fine-tuning requested with lora disabled"));
    }
    if subject.is_empty() {
        return Err(Error::invalid("no subject images"));
    }
    if cfg.prior_lambda > 0.0 && prior.is_empty() {
        return Err(Error::invalid("prior set is empty but prior_lambda > 0"));
    }
    let keep = class_token(cfg.subject_class)?;
    let subject: Vec<TrainExample> = subject.iter().map(TrainExample::from_sample).collect::<Result<_>>()?;
    let mut p = base.clone();
    let root = Rng::new(cfg.seed, 1);
    if !p.has_lora() {
        p.attach_lora(&mut root.derive(u64::MAX));
    }
    p.frozen_base = true;
    let eval_draws = fixed_draws(&subject, sched, cfg.seed, EVAL_STREAM);
    let initial = loss_value(&p, &subject, &eval_draws, sched)?;
    let mut curve = vec![EpochStats {
        epoch: 0,
        loss: initial,
        val_loss: initial,
    }];
    let mut div = Divergence { initial, streak: 0 };
    let mut opt = OptState::new(cfg.adam, cfg.precision);
    let total = cfg.epochs * (subject.len() * cfg.draws_per_sample).div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        let order = epoch_order(subject.len(), cfg.draws_per_sample, &mut rng);
        let mut prior_order = epoch_order(prior.len(), 1, &mut rng);
        let mut prior_pos = 0;
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| subject[i].clone()).collect();
            let mut prior_batch = Vec::new();
            if cfg.prior_lambda > 0.0 {
                for _ in 0..batch.len() {
                    if prior_pos == prior_order.len() {
                        rng.shuffle(&mut prior_order);
                        prior_pos = 0;
                    }
                    prior_batch.push(prior[prior_order[prior_pos]].clone());
                    prior_pos += 1;
                }
            }
            let (loss, mut grads) =
                prior_preservation_loss(&p, &batch, &prior_batch, sched, &mut rng, cfg.prior_lambda, cfg.cond_dropout)?;
            mask_embedding(&mut grads, keep);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(p.store_mut(), &grads, lr_at(cfg, step, total))?;
            step += 1;
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let loss = sum / count as f64;
        let val_loss = loss_value(&p, &subject, &eval_draws, sched)?;
        log::info!("lora epoch {epoch} loss {loss:.5} subject {val_loss:.5}");
        curve.push(EpochStats { epoch, loss, val_loss });
        div.observe(epoch, loss)?;
    }
    Ok(TrainOutcome {
        params: p,
        curve,
        rejected_steps: opt.rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::phantom::{build_dataset, DatasetConfig};
    use crate::schedule::ScheduleKind;

    fn tiny() -> ArchConfig {
        ArchConfig {
            width: 4,
            hidden: 16,
            time_dim: 8,
            embed_dim: 4,
            grid: 4,
            lora_rank: 2,
            lora_alpha: 2.0,
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap()
    }

    fn examples(n: usize, size: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|i| TrainExample::from_sample(&crate::phantom::gen_phantom(i as u64, (i % 5 + 1) as u8, size).unwrap()).unwrap())
            .collect()
    }

    /// Knows the clean image, so recovers ε exactly from `x_t`.
    struct Oracle<'a> {
        x0: &'a Tensor,
        sched: &'a NoiseSchedule,
    }

    impl NoiseModel for Oracle<'_> {
        fn predict_noise(&self, x_t: &Tensor, t: f64, _: usize) -> Result<Tensor> {
            let ab = self.sched.alpha_bar[t as usize];
            x_t.axpby(1.0 / (1.0 - ab).sqrt(), self.x0, -ab.sqrt() / (1.0 - ab).sqrt())
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = sched();
        let batch = examples(1, 32);
        let draws = draw_batch(&batch, &s, &mut Rng::new(1, 0), 0.0);
        let oracle = Oracle { x0: &batch[0].x0, sched: &s };
        assert!(loss_value(&oracle, &batch, &draws, &s).unwrap() < 1e-20);
    }

    #[test]
    fn zero_model_loss_is_noise_variance() {
        let s = sched();
        let mut p = ModelParams::init(&mut Rng::new(0, 0), tiny()).unwrap();
        p.store_mut().iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let batch = examples(1, 32);
        let mut rng = Rng::new(5, 0);
        let (loss, _) = diffusion_loss(&p, &batch, &s, &mut rng, 0.0).unwrap();
        // 1024 draws of ε²
        assert!((loss - 1.0).abs() < 0.15, "{loss}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let s = sched();
        let mut rng = Rng::new(11, 0);
        let mut p = ModelParams::init(&mut rng, tiny()).unwrap();
        let batch = examples(2, 32);
        let draws = draw_batch(&batch, &s, &mut rng, 0.0);
        assert!(loss_grad_check(&p, &batch, &draws, &s, &mut rng).unwrap() < 1e-4);
        p.attach_lora(&mut rng);
        for (n, t) in p.store_mut().iter_mut() {
            if n.ends_with("lora_b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.05);
            }
        }
        assert!(loss_grad_check(&p, &batch, &draws, &s, &mut rng).unwrap() < 1e-4);
    }

    #[test]
    fn prior_term_reductions() {
        let s = sched();
        let p = ModelParams::init(&mut Rng::new(2, 0), tiny()).unwrap();
        let subj = examples(2, 32);
        let (a, ga) = diffusion_loss(&p, &subj, &s, &mut Rng::new(9, 0), 0.1).unwrap();
        let (b, gb) = prior_preservation_loss(&p, &subj, &[], &s, &mut Rng::new(9, 0), 0.0, 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = prior_preservation_loss(&p, &subj, &subj, &s, &mut Rng::new(9, 0), 1.0, 0.1).unwrap();
        assert_eq!(c, 2.0 * a);
        assert!(prior_preservation_loss(&p, &subj, &[], &s, &mut Rng::new(9, 0), 0.5, 0.1).is_err());
        assert!(diffusion_loss(&p, &[], &s, &mut Rng::new(9, 0), 0.1).is_err());
    }

    fn small_data() -> DatasetSplit {
        build_dataset(&DatasetConfig {
            total: 100,
            size: 32,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn base_training_is_deterministic_and_improves() {
        let s = sched();
        let data = small_data();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut a = ModelParams::init(&mut Rng::new(1, 0), tiny()).unwrap();
        let mut b = a.clone();
        let ra = train_base(&mut a, &data, &s, &cfg).unwrap();
        let rb = train_base(&mut b, &data, &s, &cfg).unwrap();
        assert_eq!(curve_csv(&ra.curve), curve_csv(&rb.curve));
        assert_eq!(a, b);
        assert_eq!(ra.curve.len(), 4);
        let first = ra.curve[0];
        let last = ra.curve[3];
        assert!(last.loss < first.loss);
        assert!(last.val_loss < first.val_loss);
    }

    #[test]
    fn cosine_lr_spans_full_to_tenth() {
        let cfg = TrainConfig { lr: 1e-3, cosine_decay: true, ..TrainConfig::default() };
        assert_eq!(lr_at(&cfg, 0, 11), 1e-3);
        assert!((lr_at(&cfg, 10, 11) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 5, 11) - 5.5e-4).abs() < 1e-15);
        let flat = TrainConfig { cosine_decay: false, ..cfg };
        assert_eq!(lr_at(&flat, 7, 11), 1e-3);
    }

    #[test]
    fn balanced_order_equalises_classes() {
        let tokens: Vec<usize> = (0..100).map(|i| if i < 90 { 4 } else if i < 95 { 1 } else { 2 }).collect();
        let order = balanced_order(&tokens, 30, &mut Rng::new(0, 0));
        assert_eq!(order.len(), 3000);
        let mut counts = [0usize; 6];
        for &i in &order {
            counts[tokens[i]] += 1;
        }
        for t in [1, 2, 4] {
            assert!((counts[t] as f64 / 1000.0 - 1.0).abs() < 0.1, "{counts:?}");
        }
        assert_eq!(order, balanced_order(&tokens, 30, &mut Rng::new(0, 0)));
    }

    #[test]
    fn divergence_is_detected() {
        let mut d = Divergence { initial: 1.0, streak: 0 };
        d.observe(1, 20.0).unwrap();
        d.observe(2, 20.0).unwrap();
        assert!(matches!(d.observe(3, 20.0), Err(Error::Diverged { epoch: 3, .. })));
        let mut d = Divergence { initial: 1.0, streak: 0 };
        d.observe(1, 20.0).unwrap();
        d.observe(2, 1.0).unwrap();
        d.observe(3, 20.0).unwrap();
    }

    #[test]
    fn lora_keeps_base_and_other_rows() {
        let s = sched();
        let mut rng = Rng::new(3, 0);
        let base = ModelParams::init(&mut rng, tiny()).unwrap();
        let subject: Vec<PhantomSample> = (0..4).map(|i| crate::phantom::gen_phantom(i, 3, 32).unwrap()).collect();
        let prior = examples(4, 32);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let out = train_lora(&base, &subject, &prior, &s, &cfg).unwrap();
        assert_eq!(out.params.base_digest(), base.base_digest());
        let (e0, e1) = (base.store().get(EMBED).unwrap(), out.params.store().get(EMBED).unwrap());
        let dim = tiny().embed_dim;
        for row in 0..6 {
            let same = e0.data()[row * dim..(row + 1) * dim] == e1.data()[row * dim..(row + 1) * dim];
            assert_eq!(same, row != 3, "row {row}");
        }
        let off = TrainConfig { lora: false, ..cfg.clone() };
        assert!(train_lora(&base, &subject, &prior, &s, &off).is_err());
        let no_prior = train_lora(&base, &subject, &[], &s, &cfg);
        assert!(no_prior.is_err());
    }
}
