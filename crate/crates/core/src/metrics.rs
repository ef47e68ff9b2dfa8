//! Evaluation metrics: SSIM and Dice for masks, detection confusion
//! matrices, and score histograms.

use crate::error::{Error, Result};
use crate::imagegrid::GrayImage;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Default SSIM box-window side.
pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over every valid `window × window` box position, on the
/// unit dynamic range.
pub fn ssim(a: &GrayImage, b: &GrayImage, window: usize) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::contract(format!(
            "ssim needs equal sizes, got {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::contract(format!("ssim window must be odd, got {window}")));
    }
    if window > a.width() || window > a.height() {
        return Err(Error::contract(format!(
            "ssim window {window} exceeds {}x{} image",
            a.width(),
            a.height()
        )));
    }
    let n = (window * window) as f64;
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in y..y + window {
                for c in x..x + window {
                    let (p, q) = (a.get(r, c) as f64, b.get(r, c) as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A boolean mask as a `{0, 1}` image for SSIM.
pub fn mask_image(mask: &[bool], width: usize, height: usize) -> Result<GrayImage> {
    GrayImage::new(
        width,
        height,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
}

/// `2|a ∩ b| / (|a| + |b|)`, or 1 when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "dice needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// `tp / (tp + fn)`, undefined without positives.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `tp / (tp + fp)`, undefined without predicted positives.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Table in the layout of a detector accuracy report.
    pub fn report(&self, title: &str) -> String {
        let row = |label: &str, neg: usize, pos: usize| format!("{label:<16}{neg:>14}{pos:>14}\n");
        let mut s = format!("{title}\n");
        s.push_str(&format!(
            "{:<16}{:>14}{:>14}\n",
            "", "Pred normal", "Pred anomaly"
        ));
        s.push_str(&row("Actual normal", self.tn, self.fp));
        s.push_str(&row("Actual anomaly", self.fn_, self.tp));
        s.push_str(&format!("{:<16}{:>14}\n", "Recall", percent(self.recall())));
        s.push_str(&format!("{:<16}{:>14}\n", "Precision", percent(self.precision())));
        s
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        format!(
            "tn,fp,fn,tp,recall,precision\n{},{},{},{},{},{}\n",
            self.tn,
            self.fp,
            self.fn_,
            self.tp,
            opt(self.recall()),
            opt(self.precision())
        )
    }
}

/// Percentage rounded half-up to one decimal, or `undefined`.
pub fn percent(ratio: Option<f64>) -> String {
    match ratio {
        Some(r) => format!("{:.1}%", round_half_up_1dp(r * 100.0)),
        None => "undefined".into(),
    }
}

/// Rounds half-up to one decimal place.
pub fn round_half_up_1dp(v: f64) -> f64 {
    // The 1e-9 nudge keeps values like 82.85 (stored as 82.8499…) rounding up.
    ((v * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

pub fn confusion(predicted: &[bool], actual: &[bool]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (false, false) => m.tn += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (true, true) => m.tp += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Rows `bin_low,bin_high,count`.
    pub fn csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!(
                "{:.6},{:.6},{c}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1]
            ));
        }
        s
    }
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
/// Values outside the range land in the nearest end bin.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let bin_edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let i = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { bin_edges, counts })
}
