//! Built-in toy encoders standing in for the joint text-image and
//! self-supervised visual encoders. Every feature is nonnegative, so cosine
//! similarities land in `[0, 1]`.
//!
//! Real embeddings can replace these: the pipeline looks for files of the
//! same name under the configured embeddings directory first.

use forge_core::curation::{EmbeddingSet, EncoderKind};
use forge_core::diffusion::model::word_embedding;
use forge_core::text::{content_words, stable_hash};
use forge_core::{Frame, FrameSequence, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const JOINT_DIM: usize = 16;
const GRID: usize = 4;
const HIST_BINS: usize = 8;
const FEATURES: usize = GRID * GRID + HIST_BINS;

/// Block means of the luma over a 4x4 grid followed by an 8-bin luma
/// histogram.
fn frame_features(f: &Frame) -> Vec<f64> {
    let luma = f.luma();
    let (w, h) = (f.width(), f.height());
    let mut grid = vec![0.0; GRID * GRID];
    let mut counts = vec![0usize; GRID * GRID];
    let mut hist = vec![0.0; HIST_BINS];
    for y in 0..h {
        for x in 0..w {
            let v = luma[y * w + x];
            let cell = (y * GRID / h) * GRID + x * GRID / w;
            grid[cell] += v;
            counts[cell] += 1;
            let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[bin] += 1.0 / (w * h) as f64;
        }
    }
    for (g, c) in grid.iter_mut().zip(&counts) {
        if *c > 0 {
            *g /= *c as f64;
        }
    }
    grid.extend(hist);
    grid
}

pub fn structure_embeddings(frames: &FrameSequence) -> Result<EmbeddingSet> {
    EmbeddingSet::new(frames.iter().map(frame_features).collect(), EncoderKind::Structure)
}

fn joint_projection() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash("forge/joint-projection"));
    (0..FEATURES * JOINT_DIM).map(|_| rng.random_range(0.0..1.0)).collect()
}

pub fn joint_image_embeddings(frames: &FrameSequence) -> Result<EmbeddingSet> {
    let proj = joint_projection();
    let rows = frames
        .iter()
        .map(|f| {
            let feat = frame_features(f);
            (0..JOINT_DIM)
                .map(|j| feat.iter().enumerate().map(|(i, v)| v * proj[i * JOINT_DIM + j]).sum())
                .collect()
        })
        .collect();
    EmbeddingSet::new(rows, EncoderKind::Joint)
}

/// Sum of absolute hashed word vectors of the content words, plus a small
/// floor so that an all-stopword prompt still has a direction.
pub fn prompt_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![1e-3; JOINT_DIM];
    for w in content_words(text) {
        for (a, b) in v.iter_mut().zip(word_embedding(&w, JOINT_DIM)) {
            *a += b.abs();
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::curation::{prompt_fidelity, structure_fidelity};

    fn seq(k: usize) -> FrameSequence {
        FrameSequence::new(
            (0..3)
                .map(|i| Frame::gray(8, 8, (0..64).map(|p| ((p + i * k) % 9) as f64 / 8.0).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_scores_are_in_unit_interval() {
        let a = structure_embeddings(&seq(1)).unwrap();
        let b = structure_embeddings(&seq(2)).unwrap();
        let s = structure_fidelity(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!((structure_fidelity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let j = joint_image_embeddings(&seq(1)).unwrap();
        assert_eq!(j.dim(), JOINT_DIM);
        let p = prompt_fidelity(&j, &prompt_embedding("a person hops")).unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }
}
