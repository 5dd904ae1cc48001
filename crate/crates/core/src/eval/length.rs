//! Report-length distributions and their KL divergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::text::tokenize;

pub const BIN_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    /// Inclusive lower token count.
    pub lo: usize,
    /// Exclusive upper token count.
    pub hi: usize,
    pub p_gen: f64,
    pub p_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub bins: Vec<LengthBin>,
    /// KL(generated || ground truth) in nats.
    pub kl: f64,
}

impl LengthDistribution {
    pub const TSV_HEADER: &'static str = "bin_lo\tbin_hi\tp_gen\tp_gt";

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        s.push('\n');
        for b in &self.bins {
            s.push_str(&format!("{}\t{}\t{:.12}\t{:.12}\n", b.lo, b.hi, b.p_gen, b.p_gt));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::TSV_HEADER) {
            return Err(Error::Config("length table lacks its header".into()));
        }
        let mut bins = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Config(format!("malformed length row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            bins.push(LengthBin {
                lo: f[0].parse().map_err(|_| bad())?,
                hi: f[1].parse().map_err(|_| bad())?,
                p_gen: f[2].parse().map_err(|_| bad())?,
                p_gt: f[3].parse().map_err(|_| bad())?,
            });
        }
        let kl = kl(&bins);
        Ok(Self { bins, kl })
    }
}

fn kl(bins: &[LengthBin]) -> f64 {
    bins.iter().map(|b| b.p_gen * (b.p_gen / b.p_gt).ln()).sum()
}

/// Token-length histograms over shared bins with +1 smoothing per bin.
pub fn length_divergence<S: AsRef<str>>(generated: &[S], ground_truth: &[S]) -> Result<LengthDistribution> {
    if generated.is_empty() || ground_truth.is_empty() {
        return Err(Error::Config("length divergence needs non-empty corpora".into()));
    }
    let lens = |c: &[S]| -> Vec<usize> { c.iter().map(|s| tokenize(s.as_ref()).len()).collect() };
    let (g, t) = (lens(generated), lens(ground_truth));
    let n_bins = g.iter().chain(&t).max().copied().unwrap_or(0) / BIN_WIDTH + 1;
    let hist = |l: &[usize]| {
        let mut h = vec![1.0; n_bins];
        for &x in l {
            h[x / BIN_WIDTH] += 1.0;
        }
        let total = (l.len() + n_bins) as f64;
        h.into_iter().map(|c| c / total).collect::<Vec<f64>>()
    };
    let (pg, pt) = (hist(&g), hist(&t));
    let bins: Vec<LengthBin> = (0..n_bins)
        .map(|i| LengthBin {
            lo: i * BIN_WIDTH,
            hi: (i + 1) * BIN_WIDTH,
            p_gen: pg[i],
            p_gt: pt[i],
        })
        .collect();
    Ok(LengthDistribution { kl: kl(&bins), bins })
}
