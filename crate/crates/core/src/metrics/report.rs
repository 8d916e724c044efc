//! Metric summary: per-class MS-SSIM for real and synthetic sets, one pooled
//! FID, and segmentation Dice per label.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phantom::NUM_CLASSES;

pub const DICE_LABELS: [&str; 3] = ["TL", "FL", "FLT"];
const MISSING: &str = "n/a";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub real_msssim: [Option<f64>; NUM_CLASSES],
    pub synth_msssim: [Option<f64>; NUM_CLASSES],
    pub fid: Option<f64>,
    pub n_fid: usize,
    pub dice: [Option<f64>; 3],
    /// Echo of the settings that produced the numbers.
    pub config: Vec<(String, String)>,
    /// Footnotes printed under the text table.
    pub notes: Vec<String>,
}

impl Default for MetricReport {
    fn default() -> Self {
        Self {
            real_msssim: [None; NUM_CLASSES],
            synth_msssim: [None; NUM_CLASSES],
            fid: None,
            n_fid: super::FID_N,
            dice: [None; 3],
            config: Vec::new(),
            notes: Vec::new(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.2}"))
}

fn exact(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v.is_empty() {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| Error::Config {
        line: 0,
        reason: format!("bad number for {key}: {v:?}"),
    })
}

impl MetricReport {
    /// Every present value is finite.
    pub fn validate(&self) -> Result<()> {
        let all = self.real_msssim.iter().chain(&self.synth_msssim).chain(&self.dice).chain(std::iter::once(&self.fid));
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("metric report holds a non-finite value".into()));
        }
        Ok(())
    }

    pub fn is_partial(&self) -> bool {
        self.real_msssim.iter().chain(&self.synth_msssim).any(Option::is_none) || self.fid.is_none()
    }

    /// Aligned text: MS-SSIM rows Real / Synthetic over C1..C5, FID beside
    /// the Real row, then the Dice appendix and footnotes.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let fid_head = format!("FID (n={})", self.n_fid);
        write!(s, "{:<10}", "MS-SSIM").unwrap();
        for c in 1..=NUM_CLASSES {
            write!(s, "{:>7}", format!("C{c}")).unwrap();
        }
        writeln!(s, "{:>14}", fid_head).unwrap();
        for (name, row, fid) in [("Real", &self.real_msssim, self.fid), ("Synthetic", &self.synth_msssim, None)] {
            write!(s, "{name:<10}").unwrap();
            for v in row {
                write!(s, "{:>7}", cell(*v)).unwrap();
            }
            if name == "Real" {
                write!(s, "{:>14}", cell(fid)).unwrap();
            }
            s.push('\n');
        }
        s.push('\n');
        write!(s, "{:<10}", "Dice").unwrap();
        for l in DICE_LABELS {
            write!(s, "{l:>7}").unwrap();
        }
        s.push('\n');
        write!(s, "{:<10}", "Real test").unwrap();
        for v in &self.dice {
            write!(s, "{:>7}", cell(*v)).unwrap();
        }
        s.push('\n');
        if !self.notes.is_empty() {
            s.push('\n');
            for (i, n) in self.notes.iter().enumerate() {
                writeln!(s, "[{}] {n}", i + 1).unwrap();
            }
        }
        s
    }

    /// The text table's numbers as CSV, same rounding.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("row,C1,C2,C3,C4,C5,FID,n_fid\n");
        for (name, row, fid) in [("Real", &self.real_msssim, self.fid), ("Synthetic", &self.synth_msssim, None)] {
            s.push_str(name);
            for v in row {
                write!(s, ",{}", cell(*v)).unwrap();
            }
            match fid {
                Some(_) => writeln!(s, ",{},{}", cell(fid), self.n_fid).unwrap(),
                None if name == "Real" => writeln!(s, ",{MISSING},{}", self.n_fid).unwrap(),
                None => s.push_str(",,\n"),
            }
        }
        s.push_str("Dice");
        for (l, v) in DICE_LABELS.iter().zip(&self.dice) {
            write!(s, ",{l}={}", cell(*v)).unwrap();
        }
        s.push_str(",,,,\n");
        s
    }

    /// Lossless `key,value` serialization.
    pub fn to_metrics_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for c in 0..NUM_CLASSES {
            writeln!(s, "real_msssim_C{},{}", c + 1, exact(self.real_msssim[c])).unwrap();
        }
        for c in 0..NUM_CLASSES {
            writeln!(s, "synth_msssim_C{},{}", c + 1, exact(self.synth_msssim[c])).unwrap();
        }
        writeln!(s, "fid,{}", exact(self.fid)).unwrap();
        writeln!(s, "n_fid,{}", self.n_fid).unwrap();
        for (l, v) in DICE_LABELS.iter().zip(&self.dice) {
            writeln!(s, "dice_{l},{}", exact(*v)).unwrap();
        }
        for (k, v) in &self.config {
            writeln!(s, "config.{k},{v}").unwrap();
        }
        for n in &self.notes {
            writeln!(s, "note,{n}").unwrap();
        }
        s
    }

    pub fn from_metrics_csv(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(',').ok_or(Error::Config {
                line: i + 1,
                reason: "expected key,value".into(),
            })?;
            if let Some(c) = k.strip_prefix("real_msssim_C") {
                let c: usize = c.parse().ok().filter(|c| (1..=NUM_CLASSES).contains(c)).ok_or(Error::Config {
                    line: i + 1,
                    reason: format!("bad key {k}"),
                })?;
                r.real_msssim[c - 1] = parse_opt(k, v)?;
            } else if let Some(c) = k.strip_prefix("synth_msssim_C") {
                let c: usize = c.parse().ok().filter(|c| (1..=NUM_CLASSES).contains(c)).ok_or(Error::Config {
                    line: i + 1,
                    reason: format!("bad key {k}"),
                })?;
                r.synth_msssim[c - 1] = parse_opt(k, v)?;
            } else if k == "fid" {
                r.fid = parse_opt(k, v)?;
            } else if k == "n_fid" {
                r.n_fid = v.parse().map_err(|_| Error::Config {
                    line: i + 1,
                    reason: "bad n_fid".into(),
                })?;
            } else if let Some(l) = k.strip_prefix("dice_") {
                let idx = DICE_LABELS.iter().position(|x| *x == l).ok_or(Error::Config {
                    line: i + 1,
                    reason: format!("unknown dice label {l}"),
                })?;
                r.dice[idx] = parse_opt(k, v)?;
            } else if let Some(ck) = k.strip_prefix("config.") {
                r.config.push((ck.to_string(), v.to_string()));
            } else if k == "note" {
                r.notes.push(v.to_string());
            } else {
                return Err(Error::Config {
                    line: i + 1,
                    reason: format!("unknown key {k}"),
                });
            }
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricReport {
        MetricReport {
            real_msssim: [Some(0.1), Some(0.2), None, Some(0.4), Some(0.5)],
            synth_msssim: [Some(0.15); 5],
            fid: Some(12.345),
            n_fid: 100,
            dice: [Some(0.9), None, Some(1.0 / 3.0)],
            config: vec![("seed".into(), "3".into())],
            notes: vec!["note one".into()],
        }
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let r = sample();
        assert_eq!(MetricReport::from_metrics_csv(&r.to_metrics_csv()).unwrap(), r);
    }

    #[test]
    fn gaps_render_as_na() {
        let t = sample().render_text();
        assert!(t.contains("n/a"));
        assert!(t.contains("FID (n=100)"));
        assert!(t.contains("12.35") || t.contains("12.34"));
        let d = MetricReport::default().render_text();
        assert_eq!(d.matches("n/a").count(), 14);
        assert!(sample().is_partial());
    }

    #[test]
    fn csv_and_text_share_numbers() {
        let r = sample();
        let (t, c) = (r.render_text(), r.render_csv());
        for tok in c.split(|ch: char| ch == ',' || ch == '\n' || ch == '=') {
            if tok.parse::<f64>().is_ok() && tok.contains('.') {
                assert!(t.contains(tok), "{tok}");
            }
        }
    }
}
