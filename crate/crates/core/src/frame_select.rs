//! Frame scoring and subset selection for instance-token training.
//!
//! Each frame gets `phi = d(f, prev) + d(f, next) + clarity(f)` where `d` is
//! one minus the intersection of 32-bin grayscale histograms and `clarity` is
//! the variance of the 4-neighbour Laplacian over interior pixels. The top-m
//! frames by `phi` are kept.

use serde::{Deserialize, Serialize};

use crate::{Error, Frame, FrameSequence, Result};

/// Histogram resolution used by [`histogram_dissimilarity`].
pub const HISTOGRAM_BINS: usize = 32;

/// How the three score components are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiMode {
    /// Min-max normalize each component across the sequence before summing.
    #[default]
    Normalized,
    /// Sum the raw components.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub dissim_prev: f64,
    pub dissim_next: f64,
    pub clarity: f64,
    pub phi: f64,
}

impl FrameScore {
    fn new(index: usize, dissim_prev: f64, dissim_next: f64, clarity: f64) -> Self {
        Self {
            index,
            dissim_prev,
            dissim_next,
            clarity,
            phi: dissim_prev + dissim_next + clarity,
        }
    }
}

fn histogram_counts(luma: &[f64]) -> [u64; HISTOGRAM_BINS] {
    let mut counts = [0u64; HISTOGRAM_BINS];
    for &v in luma {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    counts
}

/// `1 - intersection` of the normalized grayscale histograms of two frames.
pub fn histogram_dissimilarity(a: &Frame, b: &Frame) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.width(), a.height()),
            got: format!("{}x{}", b.width(), b.height()),
        });
    }
    let ha = histogram_counts(&a.luma());
    let hb = histogram_counts(&b.luma());
    // Integer intersection keeps d(f, f) = 0 exact.
    let shared: u64 = ha.iter().zip(&hb).map(|(x, y)| (*x).min(*y)).sum();
    let total = (a.width() * a.height()) as f64;
    Ok(1.0 - shared as f64 / total)
}

/// Variance of the `[[0,1,0],[1,-4,1],[0,1,0]]` response over interior pixels.
pub fn laplacian_clarity(f: &Frame) -> Result<f64> {
    let (w, h) = (f.width(), f.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!(
            "laplacian clarity needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let g = f.luma();
    let px = |y: usize, x: usize| g[y * w + x];
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            responses.push(
                px(y - 1, x) + px(y + 1, x) + px(y, x - 1) + px(y, x + 1) - 4.0 * px(y, x),
            );
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    Ok(responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n)
}

fn min_max_normalize(values: &mut [Option<f64>]) {
    let present = values.iter().flatten().copied();
    let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    for v in values.iter_mut().flatten() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// One score per frame. Missing neighbours at the sequence ends contribute 0.
pub fn phi_scores(frames: &FrameSequence, mode: PhiMode) -> Result<Vec<FrameScore>> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot score an empty frame sequence"));
    }
    let fs = frames.frames();
    let n = fs.len();
    // Pairwise dissimilarity between neighbours i and i+1.
    let links = fs
        .windows(2)
        .map(|w| histogram_dissimilarity(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let mut prev: Vec<Option<f64>> = (0..n).map(|i| i.checked_sub(1).map(|j| links[j])).collect();
    let mut next: Vec<Option<f64>> = (0..n).map(|i| links.get(i).copied()).collect();
    let mut clarity: Vec<Option<f64>> = fs
        .iter()
        .map(|f| laplacian_clarity(f).map(Some))
        .collect::<Result<_>>()?;

    if mode == PhiMode::Normalized {
        min_max_normalize(&mut prev);
        min_max_normalize(&mut next);
        min_max_normalize(&mut clarity);
    }

    Ok((0..n)
        .map(|i| {
            FrameScore::new(
                i,
                prev[i].unwrap_or(0.0),
                next[i].unwrap_or(0.0),
                clarity[i].unwrap_or(0.0),
            )
        })
        .collect())
}

/// Indices of the `m` highest-phi scores (ties to the lower index), ascending.
pub fn top_m(scores: &[FrameScore], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::invalid(format!(
            "cannot select {m} frames out of {}",
            scores.len()
        )));
    }
    let mut ranked: Vec<&FrameScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.phi.total_cmp(&a.phi).then(a.index.cmp(&b.index)));
    let mut picked: Vec<usize> = ranked[..m].iter().map(|s| s.index).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn select_frames(frames: &FrameSequence, m: usize, mode: PhiMode) -> Result<Vec<usize>> {
    if m == 0 || m > frames.len() {
        return Err(Error::invalid(format!(
            "cannot select {m} frames out of {}",
            frames.len()
        )));
    }
    top_m(&phi_scores(frames, mode)?, m)
}
