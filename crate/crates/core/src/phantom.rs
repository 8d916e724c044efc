//! Procedural CT-slice phantoms with true-lumen / false-lumen / thrombus
//! masks, and the class-stratified dataset partition built from them.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{mix, Rng, Tensor};

pub const LABEL_BG: u8 = 0;
pub const LABEL_TL: u8 = 1;
pub const LABEL_FL: u8 = 2;
pub const LABEL_FLT: u8 = 3;

pub const NUM_CLASSES: usize = 5;
/// Token 0 is the null (unconditional) token; classes map to 1..=5.
pub const NUM_TOKENS: usize = NUM_CLASSES + 1;
pub const MIN_SIZE: usize = 32;

/// Training-set class counts of the source corpus, used as default proportions.
pub const SOURCE_CLASS_COUNTS: [f64; NUM_CLASSES] = [501.0, 387.0, 121.0, 13544.0, 3582.0];

const STREAM_PHANTOM: u64 = 0x5048_414e;

// Intensities on a [0, 1] display scale.
const I_AIR: f64 = 0.02;
const I_TISSUE: f64 = 0.22;
const I_SKIN: f64 = 0.5;
const I_FLAP: f64 = 0.3;
const I_TL: f64 = 0.88;
const I_FL: f64 = 0.62;
const I_FLT: f64 = 0.36;
const NOISE_STD: f64 = 0.03;

/// One annotated phantom slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    /// `[size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major labels in `{0, 1, 2, 3}`.
    pub mask: Vec<u8>,
    pub class_id: u8,
    pub seed: u64,
}

impl PhantomSample {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn label_count(&self, label: u8) -> usize {
        self.mask.iter().filter(|&&m| m == label).count()
    }
}

/// Labels that must be present for each class (and, for class 5, the absence of all).
pub fn class_labels(class_id: u8) -> &'static [u8] {
    match class_id {
        1 => &[LABEL_TL],
        2 => &[LABEL_FL],
        3 => &[LABEL_FLT],
        4 => &[LABEL_TL, LABEL_FL],
        _ => &[],
    }
}

/// Whether a set of present labels fits the class. Exact match, except that
/// class 3 may also carry FL around its thrombus.
pub fn labels_match_class(class_id: u8, present: &[u8]) -> bool {
    let want = class_labels(class_id);
    if class_id == 3 {
        present.contains(&LABEL_FLT) && present.iter().all(|&l| l == LABEL_FLT || l == LABEL_FL)
    } else {
        present.len() == want.len() && want.iter().all(|l| present.contains(l))
    }
}

pub fn check_class(class_id: u8) -> Result<()> {
    if (1..=NUM_CLASSES as u8).contains(&class_id) {
        Ok(())
    } else {
        Err(Error::invalid(format!("class id {class_id} outside 1..=5")))
    }
}

/// Conditioning token for a class. Injective onto 1..=5; 0 stays reserved.
pub fn class_token(class_id: u8) -> Result<usize> {
    check_class(class_id)?;
    Ok(class_id as usize)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
}

impl Ellipse {
    fn value(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.value(x, y) <= 1.0
    }
}

/// Generates the phantom for `(seed, class_id)` at `size × size`.
pub fn gen_phantom(seed: u64, class_id: u8, size: usize) -> Result<PhantomSample> {
    check_class(class_id)?;
    if size < MIN_SIZE {
        return Err(Error::invalid(format!("phantom size {size} below minimum {MIN_SIZE}")));
    }
    let mut rng = Rng::new(seed, STREAM_PHANTOM);
    let s = size as f64;
    let mid = s / 2.0;

    let body = Ellipse {
        cx: mid + rng.uniform_range(-0.03, 0.03) * s,
        cy: mid + rng.uniform_range(-0.03, 0.03) * s,
        rx: rng.uniform_range(0.40, 0.45) * s,
        ry: rng.uniform_range(0.33, 0.39) * s,
        theta: rng.uniform_range(-0.1, 0.1),
    };
    let skin = (s / 32.0).max(1.5);
    let inner_body = Ellipse {
        rx: body.rx - skin,
        ry: body.ry - skin,
        ..body
    };

    let acx = mid + rng.uniform_range(-0.07, 0.07) * s;
    let acy = mid - 0.1 * s + rng.uniform_range(-0.06, 0.06) * s;
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);

    let mut image = vec![0.0; size * size];
    let mut mask = vec![LABEL_BG; size * size];

    // Pixel classifier per class; returns (intensity, label) for pixels inside the vessel.
    let vessel: Box<dyn Fn(f64, f64) -> Option<(f64, u8)>> = match class_id {
        1 => {
            let r = rng.uniform_range(0.10, 0.13) * s;
            let tl = Ellipse {
                cx: acx,
                cy: acy,
                rx: r * rng.uniform_range(0.95, 1.1),
                ry: r,
                theta,
            };
            Box::new(move |x, y| tl.contains(x, y).then_some((I_TL, LABEL_TL)))
        }
        2 | 3 => {
            let fl = Ellipse {
                cx: acx,
                cy: acy,
                rx: rng.uniform_range(0.14, 0.18) * s,
                ry: rng.uniform_range(0.10, 0.13) * s,
                theta,
            };
            if class_id == 2 {
                Box::new(move |x, y| fl.contains(x, y).then_some((I_FL, LABEL_FL)))
            } else {
                // Thrombus is the crescent of the FL ellipse left uncovered by a shifted inner ellipse.
                let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                let off = rng.uniform_range(0.40, 0.50);
                let (sp, cp) = phi.sin_cos();
                let inner = Ellipse {
                    cx: acx + cp * off * fl.rx.min(fl.ry),
                    cy: acy + sp * off * fl.rx.min(fl.ry),
                    rx: fl.rx * 0.8,
                    ry: fl.ry * 0.8,
                    theta,
                };
                Box::new(move |x, y| {
                    if !fl.contains(x, y) {
                        None
                    } else if inner.contains(x, y) {
                        Some((I_FL, LABEL_FL))
                    } else {
                        Some((I_FLT, LABEL_FLT))
                    }
                })
            }
        }
        4 => {
            let r = rng.uniform_range(0.15, 0.19) * s;
            let aorta = Ellipse {
                cx: acx,
                cy: acy,
                rx: r * rng.uniform_range(1.0, 1.15),
                ry: r,
                theta,
            };
            // Flap: chord with unit normal (cos phi, sin phi) at signed offset `off`.
            let phi = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let (sp, cp) = phi.sin_cos();
            let off = rng.uniform_range(-0.25, 0.05) * r;
            let half_flap = 0.75;
            Box::new(move |x, y| {
                if !aorta.contains(x, y) {
                    return None;
                }
                let d = cp * (x - acx) + sp * (y - acy) - off;
                if d < -half_flap {
                    Some((I_TL, LABEL_TL))
                } else if d > half_flap {
                    Some((I_FL, LABEL_FL))
                } else {
                    Some((I_FLAP, LABEL_BG))
                }
            })
        }
        _ => Box::new(|_, _| None),
    };

    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let i = py * size + px;
            let v = if let Some((v, label)) = vessel(x, y) {
                mask[i] = label;
                v
            } else if inner_body.contains(x, y) {
                I_TISSUE
            } else if body.contains(x, y) {
                I_SKIN
            } else {
                I_AIR
            };
            image[i] = v;
        }
    }
    for v in image.iter_mut() {
        *v = (*v + NOISE_STD * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(PhantomSample {
        image: Tensor::new(vec![size, size], image)?,
        mask,
        class_id,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub total: usize,
    pub seed: u64,
    pub size: usize,
    pub proportions: [f64; NUM_CLASSES],
    pub min_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            total: 200,
            seed: 0,
            size: 64,
            proportions: SOURCE_CLASS_COUNTS,
            min_per_class: 20,
        }
    }
}

/// One manifest row: enough to regenerate the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub class_id: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Per-class counts: proportional to `cfg.proportions`, floored at
/// `cfg.min_per_class`, summing to `cfg.total` (largest-remainder rounding).
pub fn class_counts(cfg: &DatasetConfig) -> Result<[usize; NUM_CLASSES]> {
    if cfg.total < 100 {
        return Err(Error::invalid(format!("dataset total {} below 100", cfg.total)));
    }
    if cfg.proportions.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::invalid("class proportions must all be positive (a class would be empty)"));
    }
    if cfg.min_per_class == 0 || cfg.min_per_class * NUM_CLASSES > cfg.total {
        return Err(Error::invalid("min_per_class must be ≥ 1 and fit within the total"));
    }
    let mut fixed = [false; NUM_CLASSES];
    loop {
        let remaining = cfg.total - fixed.iter().filter(|f| **f).count() * cfg.min_per_class;
        let mass: f64 = (0..NUM_CLASSES).filter(|&c| !fixed[c]).map(|c| cfg.proportions[c]).sum();
        let mut changed = false;
        let mut ideal = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            if fixed[c] {
                ideal[c] = cfg.min_per_class as f64;
            } else {
                ideal[c] = remaining as f64 * cfg.proportions[c] / mass;
                if ideal[c] < cfg.min_per_class as f64 {
                    fixed[c] = true;
                    changed = true;
                }
            }
        }
        if changed {
            continue;
        }
        let mut counts = [0usize; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            counts[c] = ideal[c].floor() as usize;
        }
        let mut short = cfg.total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&a, &b| {
            let ra = ideal[a] - ideal[a].floor();
            let rb = ideal[b] - ideal[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if short == 0 {
                break;
            }
            counts[c] += 1;
            short -= 1;
        }
        return Ok(counts);
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    if cfg.size < MIN_SIZE {
        return Err(Error::invalid(format!("phantom size {} below minimum {MIN_SIZE}", cfg.size)));
    }
    let counts = class_counts(cfg)?;
    let mut entries = Vec::with_capacity(cfg.total);
    let mut serial = 0u64;
    for (c, &n) in counts.iter().enumerate() {
        let class_id = c as u8 + 1;
        let mut seeds: Vec<u64> = (0..n)
            .map(|_| {
                serial += 1;
                mix(cfg.seed ^ mix(serial))
            })
            .collect();
        Rng::new(cfg.seed, 0x5350_4c54 + c as u64).shuffle(&mut seeds);
        let n_train = (0.8 * n as f64).round() as usize;
        let n_val = (0.1 * n as f64).round() as usize;
        for (i, seed) in seeds.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry { seed, class_id, split });
        }
    }
    Ok(DatasetSplit { size: cfg.size, entries })
}

impl DatasetSplit {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split, class_id: u8) -> usize {
        self.entries_in(split).filter(|e| e.class_id == class_id).count()
    }

    /// Materializes every sample of `split`, in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<PhantomSample>> {
        self.entries_in(split)
            .map(|e| gen_phantom(e.seed, e.class_id, self.size))
            .collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::from("seed,class,split\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.seed, e.class_id, e.split));
        }
        s
    }

    pub fn parse_manifest(text: &str, size: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("seed")) {
                continue;
            }
            let bad = || Error::Config {
                line: i + 1,
                reason: format!("malformed manifest row `{line}`"),
            };
            let mut parts = line.split(',');
            let seed = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let class_id: u8 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let split = parts.next().and_then(Split::parse).ok_or_else(bad)?;
            check_class(class_id)?;
            entries.push(ManifestEntry { seed, class_id, split });
        }
        Ok(Self { size, entries })
    }
}

/// Maps `[0, 1]` to 8-bit grey levels.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

pub fn write_image_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let px: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    write_pgm(path, w, h, &px)
}

/// Masks are stored with labels spread to grey levels {0, 64, 128, 192}.
pub fn write_mask_pgm(path: &Path, size: usize, mask: &[u8]) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|&m| m.saturating_mul(64)).collect();
    write_pgm(path, size, size, &px)
}

/// Reads a binary (P5, maxval 255) PGM into `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |offset: usize, reason: &str| Error::Corrupt {
        format: "PGM",
        offset,
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(pos, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(corrupt(0, "not a binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| corrupt(3, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| corrupt(3, "bad height"))?;
    if fields[3] != "255" {
        return Err(corrupt(pos, "only maxval 255 is supported"));
    }
    if bytes.len() < pos + w * h {
        return Err(corrupt(bytes.len(), "pixel data truncated"));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_sets_per_class() {
        assert!(labels_match_class(3, &[LABEL_FL, LABEL_FLT]));
        assert!(labels_match_class(3, &[LABEL_FLT]));
        assert!(!labels_match_class(3, &[LABEL_FL]));
        assert!(!labels_match_class(2, &[LABEL_FL, LABEL_FLT]));
        assert!(labels_match_class(4, &[LABEL_TL, LABEL_FL]));
        assert!(labels_match_class(5, &[]));
    }

    #[test]
    fn class_five_is_all_background() {
        let p = gen_phantom(0, 5, 64).unwrap();
        assert!(p.mask.iter().all(|&m| m == LABEL_BG));
    }

    #[test]
    fn class_four_has_tl_and_fl_only() {
        for k in 0..20 {
            let p = gen_phantom(k, 4, 64).unwrap();
            assert!(p.label_count(LABEL_TL) > 0);
            assert!(p.label_count(LABEL_FL) > 0);
            assert_eq!(p.label_count(LABEL_FLT), 0);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(gen_phantom(0, 0, 64).is_err());
        assert!(gen_phantom(0, 6, 64).is_err());
        assert!(gen_phantom(0, 1, 31).is_err());
        assert!(class_token(0).is_err());
        assert!(class_token(6).is_err());
    }

    #[test]
    fn tokens() {
        assert_eq!(class_token(1).unwrap(), 1);
        assert_eq!(class_token(5).unwrap(), 5);
        let toks: Vec<usize> = (1..=5).map(|c| class_token(c).unwrap()).collect();
        assert!(!toks.contains(&0));
        let mut d = toks.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_phantom(9, 3, 48).unwrap(), gen_phantom(9, 3, 48).unwrap());
        assert_ne!(gen_phantom(9, 3, 48).unwrap().image, gen_phantom(10, 3, 48).unwrap().image);
    }

    #[test]
    fn counts_small_total() {
        let cfg = DatasetConfig::default();
        let c = class_counts(&cfg).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 200);
        assert!(c.iter().all(|&n| n >= 20));
        assert_eq!(c, [20, 20, 20, 111, 29]);
    }

    #[test]
    fn dataset_rejections() {
        let mut cfg = DatasetConfig { total: 99, ..Default::default() };
        assert!(build_dataset(&cfg).is_err());
        cfg.total = 500;
        cfg.proportions[2] = 0.0;
        assert!(build_dataset(&cfg).is_err());
    }

    #[test]
    fn manifest_parse_roundtrip() {
        let d = build_dataset(&DatasetConfig::default()).unwrap();
        let back = DatasetSplit::parse_manifest(&d.manifest_text(), d.size).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = gen_phantom(1, 4, 32).unwrap();
        let path = dir.path().join("x.pgm");
        write_image_pgm(&path, &p.image).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[32, 32]);
        for (a, b) in back.data().iter().zip(p.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
