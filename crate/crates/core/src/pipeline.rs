//! Pipeline stages over a run directory `<out>/<run-id>/`.
//!
//! Each stage writes its artifacts under `<run>/<stage>/` together with a
//! `manifest.txt` that echoes the resolved configuration and records the
//! SHA-256 of every input and output file. A manifest is itself a valid
//! configuration file, so any stage can be replayed from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::config::{AdapterUse, RunConfig};
use crate::denoiser::{ModelParams, NoiseModel};
use crate::embed::{embedding_csv, nearest_real, tsne, EmbedPoint, PointSet};
use crate::error::{Error, Result};
use crate::metrics::{fid, pair_msssim, train_feature_encoder, FeatureEncoder, MetricReport, Pairing, SsimParams};
use crate::numerics::tns;
use crate::numerics::{Rng, Tensor};
use crate::phantom::{write_image_pgm, write_mask_pgm, DatasetSplit, PhantomSample, Split, NUM_CLASSES};
use crate::sampler::sample_batch;
use crate::segcheck::{train_segnet, utility_probe, write_overlay_ppm, segment_batch};
use crate::trainer::checkpoint::{load_adapters, load_checkpoint, save_adapters, save_checkpoint, write_atomic};
use crate::trainer::{curve_csv, generate_prior, train_examples, train_lora, TrainExample};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainBase,
    FinetuneLora,
    Sample,
    Evaluate,
    Embed,
    Segcheck,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::FinetuneLora,
        Stage::Sample,
        Stage::Evaluate,
        Stage::Embed,
        Stage::Segcheck,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::FinetuneLora => "finetune-lora",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Embed => "embed",
            Stage::Segcheck => "segcheck",
            Stage::Report => "report",
        }
    }

    /// Only the evaluation stages may read held-out test images.
    pub fn reads_test(self) -> bool {
        matches!(self, Stage::Evaluate | Stage::Embed | Stage::Segcheck)
    }
}

/// Loads one split of `data` on behalf of `stage`, enforcing the test-split guard.
pub fn load_split(stage: Stage, data: &DatasetSplit, split: Split) -> Result<Vec<PhantomSample>> {
    if split == Split::Test && !stage.reads_test() {
        return Err(Error::Leakage(stage.name().to_string()));
    }
    data.load(split)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A run directory plus the configuration every stage resolves against.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
    pub cfg: RunConfig,
}

/// Files a stage read and wrote, relative to the run root.
#[derive(Debug, Default)]
struct Ledger {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Self {
        Self { root: root.into(), cfg }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    fn require(&self, stage: Stage, file: &str, ledger: &mut Ledger) -> Result<PathBuf> {
        let p = self.path(stage, file);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p, stage: stage.name() });
        }
        ledger.inputs.push(p.clone());
        Ok(p)
    }

    fn prepare(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn write(&self, stage: Stage, file: &str, bytes: &[u8], ledger: &mut Ledger) -> Result<PathBuf> {
        let p = self.path(stage, file);
        write_atomic(&p, bytes)?;
        ledger.outputs.push(p.clone());
        Ok(p)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn write_manifest(&self, stage: Stage, ledger: &Ledger) -> Result<PathBuf> {
        let mut s = String::new();
        writeln!(s, "[manifest]\nstage = {}\nversion = {VERSION}\nseed = {}\n", stage.name(), self.cfg.seed()?).unwrap();
        s.push_str(&self.cfg.render());
        for (title, files) in [("inputs", &ledger.inputs), ("outputs", &ledger.outputs)] {
            writeln!(s, "\n[{title}]").unwrap();
            for f in files {
                writeln!(s, "{} = {}", self.rel(f), sha256_file(f)?).unwrap();
            }
        }
        let p = self.path(stage, MANIFEST);
        write_atomic(&p, s.as_bytes())?;
        Ok(p)
    }

    fn dataset(&self, ledger: &mut Ledger) -> Result<DatasetSplit> {
        let p = self.require(Stage::GenData, "dataset.txt", ledger)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        DatasetSplit::parse_manifest(&text, self.cfg.dataset()?.size)
    }

    fn base(&self, ledger: &mut Ledger) -> Result<ModelParams> {
        load_checkpoint(&self.require(Stage::TrainBase, "base.ckpt", ledger)?)
    }

    fn samples(&self, class_id: u8, ledger: &mut Ledger) -> Result<Vec<Tensor>> {
        let t = tns::read_file(&self.require(Stage::Sample, &format!("c{class_id}.tns"), ledger)?)?;
        unstack(&t)
    }

    /// Synthetic batches for every class that has been sampled.
    fn sampled_classes(&self, ledger: &mut Ledger) -> Result<Vec<(u8, Vec<Tensor>)>> {
        let mut out = Vec::new();
        for c in 1..=NUM_CLASSES as u8 {
            if self.path(Stage::Sample, &format!("c{c}.tns")).exists() {
                out.push((c, self.samples(c, ledger)?));
            }
        }
        if out.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.path(Stage::Sample, "c<k>.tns"),
                stage: Stage::Sample.name(),
            });
        }
        Ok(out)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<PathBuf> {
        self.cfg.validate()?;
        self.prepare(stage)?;
        let mut ledger = Ledger::default();
        log::info!("stage {} in {}", stage.name(), self.root.display());
        match stage {
            Stage::GenData => self.gen_data(&mut ledger)?,
            Stage::TrainBase => self.train_base(&mut ledger)?,
            Stage::FinetuneLora => self.finetune(&mut ledger)?,
            Stage::Sample => self.sample(&mut ledger)?,
            Stage::Evaluate => self.evaluate(&mut ledger)?,
            Stage::Embed => self.embed(&mut ledger)?,
            Stage::Segcheck => self.segcheck(&mut ledger)?,
            Stage::Report => self.report(&mut ledger)?,
        }
        self.write_manifest(stage, &ledger)
    }

    fn gen_data(&self, ledger: &mut Ledger) -> Result<()> {
        let data = crate::phantom::build_dataset(&self.cfg.dataset()?)?;
        self.write(Stage::GenData, "dataset.txt", data.manifest_text().as_bytes(), ledger)?;
        let dir = self.stage_dir(Stage::GenData);
        for split in [Split::Train, Split::Val, Split::Test] {
            let sub = dir.join(split.as_str());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            // Writing the held-out images is generation, not a read.
            for (i, s) in data.load(split)?.iter().enumerate() {
                let img = sub.join(format!("{i:04}_c{}.pgm", s.class_id));
                let mask = sub.join(format!("{i:04}_c{}_mask.pgm", s.class_id));
                write_image_pgm(&img, &s.image)?;
                write_mask_pgm(&mask, s.size(), &s.mask)?;
                ledger.outputs.extend([img, mask]);
            }
        }
        Ok(())
    }

    fn train_base(&self, ledger: &mut Ledger) -> Result<()> {
        let data = self.dataset(ledger)?;
        let to_ex = |v: Vec<PhantomSample>| v.iter().map(TrainExample::from_sample).collect::<Result<Vec<_>>>();
        let train = to_ex(load_split(Stage::TrainBase, &data, Split::Train)?)?;
        let val = to_ex(load_split(Stage::TrainBase, &data, Split::Val)?)?;
        let cfg = self.cfg.train()?;
        let mut p = ModelParams::init(&mut Rng::new(cfg.seed, 0x1a17), self.cfg.arch()?)?;
        let out = train_examples(&mut p, &train, &val, &self.cfg.schedule()?, &cfg)?;
        let path = self.path(Stage::TrainBase, "base.ckpt");
        let saturated = save_checkpoint(&out.params, &path, self.cfg.precision()?)?;
        if saturated > 0 {
            log::warn!("{saturated} weights saturated when storing the base checkpoint");
        }
        ledger.outputs.push(path);
        self.write(Stage::TrainBase, "loss.csv", curve_csv(&out.curve).as_bytes(), ledger)?;
        Ok(())
    }

    fn finetune(&self, ledger: &mut Ledger) -> Result<()> {
        let data = self.dataset(ledger)?;
        let base = self.base(ledger)?;
        let cfg = self.cfg.finetune()?;
        let sched = self.cfg.schedule()?;
        let subject: Vec<PhantomSample> = load_split(Stage::FinetuneLora, &data, Split::Train)?
            .into_iter()
            .filter(|s| s.class_id == cfg.subject_class)
            .collect();
        let prior = if cfg.prior_lambda > 0.0 {
            generate_prior(&base, &sched, self.cfg.dataset()?.size, &cfg)?
        } else {
            Vec::new()
        };
        let out = train_lora(&base, &subject, &prior, &sched, &cfg)?;
        let path = self.path(Stage::FinetuneLora, "adapters.ckpt");
        save_adapters(&out.params, &path, self.cfg.precision()?)?;
        ledger.outputs.push(path);
        self.write(Stage::FinetuneLora, "loss.csv", curve_csv(&out.curve).as_bytes(), ledger)?;
        Ok(())
    }

    /// The model used to sample `class_id` under the adapter policy.
    fn model_for(&self, base: &ModelParams, class_id: u8, ledger: &mut Ledger) -> Result<Option<ModelParams>> {
        let adapters = self.path(Stage::FinetuneLora, "adapters.ckpt");
        let subject = self.cfg.finetune()?.subject_class;
        let wanted = match self.cfg.adapter_use()? {
            AdapterUse::Off => false,
            AdapterUse::On => true,
            AdapterUse::Auto => adapters.exists() && class_id == subject,
        };
        if !wanted {
            return Ok(None);
        }
        let p = self.require(Stage::FinetuneLora, "adapters.ckpt", ledger)?;
        Ok(Some(load_adapters(base, &p)?))
    }

    fn sample(&self, ledger: &mut Ledger) -> Result<()> {
        let base = self.base(ledger)?;
        let sched = self.cfg.schedule()?;
        let n = self.cfg.sample_count()?;
        let dtype = self.cfg.precision()?;
        let mut sidecar = String::from("file,seed,stream,method,steps,g,pos,neg\n");
        for c in self.cfg.sample_classes()? {
            let tuned = self.model_for(&base, c, ledger)?;
            let model: &dyn NoiseModel = tuned.as_ref().map_or(&base as &dyn NoiseModel, |m| m as &dyn NoiseModel);
            let sc = self.cfg.sampler(c)?;
            let outs = sample_batch(model, &sched, &sc, n)?;
            let images: Vec<Tensor> = outs.into_iter().map(|o| o.image).collect();
            let (bytes, _) = tns::encode(&stack(&images)?, dtype)?;
            self.write(Stage::Sample, &format!("c{c}.tns"), &bytes, ledger)?;
            for (i, im) in images.iter().enumerate() {
                let p = self.path(Stage::Sample, &format!("c{c}_{i:03}.pgm"));
                write_image_pgm(&p, im)?;
                ledger.outputs.push(p);
                writeln!(
                    sidecar,
                    "c{c}_{i:03}.pgm,{},{},{},{},{:?},{},{}",
                    sc.seed,
                    sc.stream + i as u64,
                    sc.method.as_str(),
                    sc.steps,
                    sc.guidance,
                    sc.pos_token,
                    sc.neg_token
                )
                .unwrap();
            }
        }
        self.write(Stage::Sample, "samples.csv", sidecar.as_bytes(), ledger)?;
        Ok(())
    }

    fn evaluate(&self, ledger: &mut Ledger) -> Result<()> {
        let data = self.dataset(ledger)?;
        let synth = self.sampled_classes(ledger)?;
        let train = load_split(Stage::Evaluate, &data, Split::Train)?;
        let test = load_split(Stage::Evaluate, &data, Split::Test)?;
        let (n_fid, pairs) = self.cfg.eval_sizes()?;
        let (enc, acc) = train_feature_encoder(&data, &self.cfg.encoder()?)?;
        let enc_path = self.path(Stage::Evaluate, "encoder.ckpt");
        enc.save(&enc_path)?;
        ledger.outputs.push(enc_path);

        let sp = SsimParams::default();
        let rng = Rng::new(self.cfg.seed()?, 0xe7a1);
        let mut report = MetricReport::default();
        let mut classify = String::from("class,n,accuracy\n");
        for c in 1..=NUM_CLASSES as u8 {
            let real: Vec<Tensor> = train.iter().filter(|s| s.class_id == c).map(|s| s.image.clone()).collect();
            if real.len() >= 2 {
                let st = pair_msssim(&real, &real, pairs, Pairing::Within, &mut rng.derive(c as u64), &sp)?;
                report.real_msssim[c as usize - 1] = Some(st.mean);
            }
            if let Some((_, imgs)) = synth.iter().find(|(k, _)| *k == c) {
                if imgs.len() >= 2 {
                    let st = pair_msssim(imgs, imgs, pairs, Pairing::Within, &mut rng.derive(100 + c as u64), &sp)?;
                    report.synth_msssim[c as usize - 1] = Some(st.mean);
                }
                let pred = enc.classify_batch(imgs)?;
                let hits = pred.iter().filter(|&&p| p == c).count();
                writeln!(classify, "{c},{},{:?}", imgs.len(), hits as f64 / imgs.len() as f64).unwrap();
            }
        }
        let pooled: Vec<Tensor> = synth.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
        let real_test: Vec<Tensor> = test.iter().map(|s| s.image.clone()).collect();
        let n = n_fid.min(pooled.len()).min(real_test.len());
        report.n_fid = n;
        // Spread the FID subset evenly over classes rather than taking the first n.
        let spread = interleave(&synth);
        report.fid = Some(fid(&real_test, &spread, &enc, n)?);
        report.notes = self.report_notes(acc, n < n_fid);
        self.write(Stage::Evaluate, "metrics.csv", report.to_metrics_csv().as_bytes(), ledger)?;
        self.write(Stage::Evaluate, "classify.csv", classify.as_bytes(), ledger)?;
        Ok(())
    }

    fn report_notes(&self, enc_acc: f64, fid_clamped: bool) -> Vec<String> {
        let size = self.cfg.raw("data", "size");
        let mut notes = vec![
            format!(
                "FID features come from a phantom classifier trained in-run (held-out accuracy {enc_acc:.3}); values are comparable only within this pipeline"
            ),
            format!("images are {size}x{size} synthetic phantoms"),
            "real MS-SSIM uses within-class pairs of the training split; FID compares against the test split".to_string(),
        ];
        if fid_clamped {
            notes.push("FID sample count reduced to the smaller of the available real and synthetic sets".to_string());
        }
        notes
    }

    fn encoder(&self, ledger: &mut Ledger) -> Result<FeatureEncoder> {
        FeatureEncoder::load(&self.require(Stage::Evaluate, "encoder.ckpt", ledger)?)
    }

    fn embed(&self, ledger: &mut Ledger) -> Result<()> {
        let data = self.dataset(ledger)?;
        let enc = self.encoder(ledger)?;
        let synth = self.sampled_classes(ledger)?;
        let k = self.cfg.embed_per_class()?;
        let test = load_split(Stage::Embed, &data, Split::Test)?;
        let mut labels: Vec<(PointSet, u8)> = Vec::new();
        let mut images: Vec<Tensor> = Vec::new();
        for c in 1..=NUM_CLASSES as u8 {
            for s in test.iter().filter(|s| s.class_id == c).take(k) {
                labels.push((PointSet::Real, c));
                images.push(s.image.clone());
            }
        }
        let n_real = images.len();
        for (c, imgs) in &synth {
            for im in imgs.iter().take(k) {
                labels.push((PointSet::Synth, *c));
                images.push(im.clone());
            }
        }
        let feats = enc.features_batch(&images)?;
        let cfg = self.cfg.tsne()?;
        let n = feats.len();
        if cfg.perplexity >= (n as f64 - 1.0) / 3.0 {
            return Err(Error::invalid(format!(
                "embed.perplexity {} too large for {n} points; lower it below {:.1}",
                cfg.perplexity,
                (n as f64 - 1.0) / 3.0
            )));
        }
        let r = tsne(&feats, &cfg)?;
        let points: Vec<EmbedPoint> = labels
            .iter()
            .enumerate()
            .map(|(i, &(set, class))| EmbedPoint { id: i, set, class, x: r.point(i)[0], y: r.point(i)[1] })
            .collect();
        self.write(Stage::Embed, "embedding.csv", embedding_csv(&points).as_bytes(), ledger)?;
        let matches = nearest_real(&images[n_real..], &images[..n_real], &SsimParams::default())?;
        let mut s = String::from("synth_id,class,real_id,real_class,msssim\n");
        for m in matches {
            let (sid, rid) = (n_real + m.synth, m.real);
            writeln!(s, "{sid},{},{rid},{},{:?}", labels[sid].1, labels[rid].1, m.score).unwrap();
        }
        self.write(Stage::Embed, "nearest.csv", s.as_bytes(), ledger)?;
        let summary = format!(
            "points,{n}\nperplexity,{}\niterations,{}\nkl_initial,{:?}\nkl_final,{:?}\n",
            cfg.perplexity, cfg.iterations, r.kl_initial, r.kl_final
        );
        self.write(Stage::Embed, "summary.csv", summary.as_bytes(), ledger)?;
        Ok(())
    }

    fn segcheck(&self, ledger: &mut Ledger) -> Result<()> {
        let data = self.dataset(ledger)?;
        let synth = self.sampled_classes(ledger)?;
        // `train_segnet` reads the test split for Dice; only permitted stages get here.
        load_split(Stage::Segcheck, &data, Split::Test)?;
        let (net, d) = train_segnet(&data, &self.cfg.segcheck()?)?;
        let mut s = String::from("label,dice\n");
        for (name, v) in crate::metrics::report::DICE_LABELS.iter().zip(d.as_array()) {
            writeln!(s, "{name},{}", v.map_or(String::new(), |x| format!("{x:?}"))).unwrap();
        }
        self.write(Stage::Segcheck, "dice.csv", s.as_bytes(), ledger)?;
        let probe = utility_probe(&net, &synth)?;
        self.write(Stage::Segcheck, "probe.csv", probe.render_csv().as_bytes(), ledger)?;
        self.write(Stage::Segcheck, "probe.txt", probe.render_text().as_bytes(), ledger)?;
        let k = self.cfg.overlays()?;
        for (c, imgs) in &synth {
            let masks = segment_batch(&net, &imgs[..k.min(imgs.len())])?;
            for (i, (im, m)) in imgs.iter().zip(&masks).enumerate() {
                let p = self.path(Stage::Segcheck, &format!("overlay_c{c}_{i:03}.ppm"));
                write_overlay_ppm(&p, im, m)?;
                ledger.outputs.push(p);
            }
        }
        Ok(())
    }

    fn report(&self, ledger: &mut Ledger) -> Result<()> {
        let p = self.require(Stage::Evaluate, "metrics.csv", ledger)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut report = MetricReport::from_metrics_csv(&text)?;
        let dice_path = self.path(Stage::Segcheck, "dice.csv");
        if dice_path.exists() {
            ledger.inputs.push(dice_path.clone());
            let text = std::fs::read_to_string(&dice_path).map_err(|e| Error::io(&dice_path, e))?;
            report.dice = parse_dice(&text)?;
        } else {
            report.notes.push("segmentation Dice unavailable: run `segcheck`".to_string());
        }
        report.notes.push(format!(
            "guidance scale {} is a configuration choice, not a published setting",
            self.cfg.raw("sample", "guidance")
        ));
        report.notes.push(
            "t-SNE perplexity, iteration count and feature space are pipeline defaults, not published settings".to_string(),
        );
        report.config = [("run", "seed"), ("run", "precision"), ("sample", "method"), ("sample", "steps"), ("sample", "guidance")]
            .iter()
            .map(|&(s, k)| (format!("{s}.{k}"), self.cfg.raw(s, k).to_string()))
            .collect();
        if report.is_partial() || !dice_path.exists() {
            log::warn!("report has missing metrics; gaps are shown as n/a");
        }
        self.write(Stage::Report, "report.txt", report.render_text().as_bytes(), ledger)?;
        self.write(Stage::Report, "report.csv", report.render_csv().as_bytes(), ledger)?;
        Ok(())
    }
}

fn parse_dice(text: &str) -> Result<[Option<f64>; 3]> {
    let mut out = [None; 3];
    for line in text.lines().skip(1) {
        let (label, v) = line.split_once(',').ok_or_else(|| Error::invalid(format!("bad dice row {line:?}")))?;
        let i = crate::metrics::report::DICE_LABELS
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::invalid(format!("unknown dice label {label:?}")))?;
        out[i] = if v.is_empty() {
            None
        } else {
            Some(v.parse().map_err(|_| Error::invalid(format!("bad dice value {v:?}")))?)
        };
    }
    Ok(out)
}

/// Round-robin over class batches so any prefix is class-balanced.
fn interleave(batches: &[(u8, Vec<Tensor>)]) -> Vec<Tensor> {
    let longest = batches.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| batches.iter().filter_map(move |(_, v)| v.get(i).cloned()))
        .collect()
}

/// `[n, H, W]` from `n` images of equal shape.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        im.ensure_shape(&shape)?;
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

pub fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected an [n, H, W] stack, got {s:?}")));
    }
    let per = s[1] * s[2];
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(vec![s[1], s[2]], c.to_vec()))
        .collect()
}

/// Checks every file recorded in a manifest exists with the recorded hash.
/// Returns the number of files verified.
pub fn verify_manifest(run_root: &Path, manifest: &Path) -> Result<usize> {
    let ini = Ini::load_from_file(manifest).map_err(|e| Error::Config { line: 0, reason: format!("{}: {e}", manifest.display()) })?;
    let mut n = 0;
    for section in ["inputs", "outputs"] {
        let Some(props) = ini.section(Some(section)) else { continue };
        for (rel, want) in props.iter() {
            let p = run_root.join(rel);
            if !p.exists() {
                return Err(Error::MissingArtifact { path: p, stage: "manifest" });
            }
            let got = sha256_file(&p)?;
            if got != want {
                return Err(Error::Corrupt {
                    format: "manifest",
                    offset: 0,
                    reason: format!("{rel}: hash {got} differs from recorded {want}"),
                });
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Parses the `[manifest]` header of a stage manifest.
pub fn manifest_header(manifest: &Path) -> Result<BTreeMap<String, String>> {
    let ini = Ini::load_from_file(manifest).map_err(|e| Error::Config { line: 0, reason: format!("{}: {e}", manifest.display()) })?;
    Ok(ini
        .section(Some("manifest"))
        .map(|p| p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
        .unwrap_or_default())
}
