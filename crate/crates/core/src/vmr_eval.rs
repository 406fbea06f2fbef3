//! Moment retrieval evaluation: temporal IoU, recall at IoU thresholds, mIoU,
//! the novel word split and a pluggable retrieval scorer.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{CandidatePool, GeneratedMoment, Video};
use crate::text::content_words;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// A half-open interval of seconds. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct TemporalSpan {
    pub start: f64,
    pub end: f64,
}

impl TemporalSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start >= 0.0 && start < end) {
            return Err(Error::invalid(format!("invalid span [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    /// Always false for a valid span.
    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }
}

impl TryFrom<[f64; 2]> for TemporalSpan {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<TemporalSpan> for [f64; 2] {
    fn from(s: TemporalSpan) -> Self {
        [s.start, s.end]
    }
}

/// Ground truth in the common `{video_id, start, end, query}` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAnnotation {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub query: String,
}

impl MomentAnnotation {
    pub fn span(&self) -> Result<TemporalSpan> {
        TemporalSpan::new(self.start, self.end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::invalid(format!("empty query for video {}", self.video_id)));
        }
        self.span().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPrediction {
    pub video_id: String,
    pub query: String,
    /// Rank 1 first.
    pub ranked_spans: Vec<TemporalSpan>,
}

pub fn temporal_iou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub threshold: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub queries: usize,
    pub recall: Vec<RecallAt>,
    pub miou: f64,
}

impl Metrics {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.recall)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for r in &self.recall {
            let label = format!("R@{} IoU={}", self.n, r.threshold);
            let w = label.len().max(6);
            let _ = write!(head, "{label:>w$}  ");
            let _ = write!(row, "{:>w$.4}  ", r.recall);
        }
        let _ = write!(head, "{:>6}  {:>7}", "mIoU", "queries");
        let _ = write!(row, "{:>6.4}  {:>7}", self.miou, self.queries);
        format!("{head}\n{row}\n")
    }
}

/// R@n at each threshold and mIoU over top-1 predictions.
///
/// Predictions are matched to ground truth by `(video_id, query)`; repeated
/// pairs are matched in order of occurrence.
pub fn evaluate(
    preds: &[RetrievalPrediction],
    gt: &[MomentAnnotation],
    thresholds: &[f64],
    n: usize,
) -> Result<Metrics> {
    if n == 0 {
        return Err(Error::invalid("rank cutoff must be at least 1"));
    }
    if gt.is_empty() {
        return Err(Error::invalid("no ground-truth annotations"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("IoU threshold {t} outside [0, 1]")));
    }
    let mut by_key: HashMap<(&str, &str), VecDeque<&RetrievalPrediction>> = HashMap::new();
    for p in preds {
        by_key
            .entry((p.video_id.as_str(), p.query.as_str()))
            .or_default()
            .push_back(p);
    }
    let mut hits = vec![0usize; thresholds.len()];
    let mut iou_sum = 0.0;
    for g in gt {
        let span = g.span()?;
        let pred = by_key
            .get_mut(&(g.video_id.as_str(), g.query.as_str()))
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Missing(format!("prediction for {} / {:?}", g.video_id, g.query)))?;
        if pred.ranked_spans.is_empty() {
            return Err(Error::invalid(format!("empty ranking for {} / {:?}", g.video_id, g.query)));
        }
        let ious: Vec<f64> = pred.ranked_spans.iter().take(n).map(|p| temporal_iou(p, &span)).collect();
        iou_sum += ious[0];
        let best = ious.iter().cloned().fold(0.0, f64::max);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if best >= *t {
                *h += 1;
            }
        }
    }
    let q = gt.len() as f64;
    Ok(Metrics {
        n,
        queries: gt.len(),
        recall: thresholds
            .iter()
            .zip(hits)
            .map(|(t, h)| RecallAt {
                threshold: *t,
                recall: h as f64 / q,
            })
            .collect(),
        miou: iou_sum / q,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NovelWordSplit {
    /// Selected novel words, sorted.
    pub novel_words: Vec<String>,
    /// Sentences chosen as editing prompts, in corpus order.
    pub generation_sentences: Vec<MomentAnnotation>,
    /// Remaining sentences that share a selected novel word, in corpus order.
    pub novel_word_star_test: Vec<MomentAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Words absent from `train_vocab` that occur in at least two sentences each
/// contribute one seeded generation sentence. Every other sentence carrying a
/// selected word becomes a test sentence.
pub fn novel_word_split(
    queries: &[MomentAnnotation],
    train_vocab: &BTreeSet<String>,
    seed: u64,
) -> Result<NovelWordSplit> {
    if queries.is_empty() {
        return Err(Error::invalid("empty query corpus"));
    }
    let mut occurrences: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        let words: BTreeSet<String> = content_words(&q.query).into_iter().collect();
        for w in words {
            if !train_vocab.contains(&w) {
                occurrences.entry(w).or_default().push(i);
            }
        }
    }
    occurrences.retain(|_, idx| idx.len() >= 2);
    if occurrences.is_empty() {
        return Ok(NovelWordSplit {
            warning: Some("no novel words occur in two or more sentences".into()),
            ..Default::default()
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generation = BTreeSet::new();
    for idx in occurrences.values() {
        let fresh: Vec<usize> = idx.iter().copied().filter(|i| !generation.contains(i)).collect();
        let pool = if fresh.is_empty() { idx } else { &fresh };
        generation.insert(*pool.choose(&mut rng).expect("at least two occurrences"));
    }
    let test: BTreeSet<usize> = occurrences
        .values()
        .flatten()
        .copied()
        .filter(|i| !generation.contains(i))
        .collect();
    Ok(NovelWordSplit {
        novel_words: occurrences.into_keys().collect(),
        generation_sentences: generation.iter().map(|&i| queries[i].clone()).collect(),
        novel_word_star_test: test.iter().map(|&i| queries[i].clone()).collect(),
        warning: None,
    })
}

/// Any retrieval model that ranks candidate spans of a video for a query.
pub trait ScorerInterface {
    fn score(&self, video: &Video, query: &str) -> Result<Vec<TemporalSpan>>;

    /// Whether `score` may be called concurrently.
    fn read_safe(&self) -> bool {
        false
    }
}

/// Sliding-window proposals ranked by bag-of-words overlap between the query
/// and the descriptions of the moments each window covers.
///
/// Descriptions stand in for visual features. Only words in `vocab` are
/// recognised, so a scorer built from a training set misses novel words.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScorer {
    /// Window boundaries lie on a grid of `grid` equal steps over the video.
    pub grid: usize,
    pub vocab: Option<BTreeSet<String>>,
}

impl Default for ReferenceScorer {
    fn default() -> Self {
        Self { grid: 16, vocab: None }
    }
}

impl ReferenceScorer {
    pub fn with_vocab(vocab: BTreeSet<String>) -> Self {
        Self {
            vocab: Some(vocab),
            ..Self::default()
        }
    }

    /// Vocabulary of the content words in a set of annotations.
    pub fn vocab_of(annotations: &[MomentAnnotation]) -> BTreeSet<String> {
        annotations.iter().flat_map(|a| content_words(&a.query)).collect()
    }

    fn words(&self, text: &str) -> BTreeSet<String> {
        content_words(text)
            .into_iter()
            .filter(|w| self.vocab.as_ref().is_none_or(|v| v.contains(w)))
            .collect()
    }
}

impl ScorerInterface for ReferenceScorer {
    fn score(&self, video: &Video, query: &str) -> Result<Vec<TemporalSpan>> {
        if self.grid == 0 || !(video.duration > 0.0) {
            return Err(Error::invalid("scorer needs a positive grid and video duration"));
        }
        let q = self.words(query);
        let matches: Vec<(TemporalSpan, f64)> = video
            .moments
            .iter()
            .map(|m| {
                let overlap = if q.is_empty() {
                    0.0
                } else {
                    self.words(&m.query).intersection(&q).count() as f64 / q.len() as f64
                };
                Ok((m.span()?, overlap))
            })
            .collect::<Result<_>>()?;
        let step = video.duration / self.grid as f64;
        let mut windows = Vec::new();
        for i in 0..self.grid {
            for j in i + 1..=self.grid {
                let w = TemporalSpan {
                    start: i as f64 * step,
                    end: j as f64 * step,
                };
                let s: f64 = matches
                    .iter()
                    .map(|(m, o)| o * (w.end.min(m.end) - w.start.max(m.start)).max(0.0))
                    .sum::<f64>()
                    / w.len();
                windows.push((s, w));
            }
        }
        windows.sort_by(|(sa, a), (sb, b)| {
            sb.total_cmp(sa)
                .then(b.len().total_cmp(&a.len()))
                .then(a.start.total_cmp(&b.start))
        });
        Ok(windows.into_iter().map(|(_, w)| w).collect())
    }

    fn read_safe(&self) -> bool {
        true
    }
}

/// Top-1 IoU per item, with failures reported per item instead of aborting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerSampleScores {
    pub scores: BTreeMap<String, f64>,
    pub failures: BTreeMap<String, String>,
}

/// Top-1 IoU of the scorer against the item's known span.
pub fn score_item<S: ScorerInterface + ?Sized>(
    scorer: &S,
    item: &GeneratedMoment,
    video: &Video,
) -> Result<f64> {
    let ranked = scorer.score(video, &item.edit_prompt)?;
    let top = ranked
        .first()
        .ok_or_else(|| Error::invalid(format!("scorer returned no spans for {}", item.id)))?;
    Ok(temporal_iou(top, &item.span))
}

/// Scores every pool item against the video that carries it, keyed by item id.
pub fn per_sample_scores<S: ScorerInterface + ?Sized>(
    scorer: &S,
    items: &CandidatePool,
    videos: &BTreeMap<String, Video>,
) -> PerSampleScores {
    let mut out = PerSampleScores::default();
    for item in items.items() {
        let res = videos
            .get(&item.id)
            .ok_or_else(|| Error::Missing(format!("video for {}", item.id)))
            .and_then(|v| score_item(scorer, item, v));
        match res {
            Ok(s) => {
                out.scores.insert(item.id.clone(), s);
            }
            Err(e) => {
                out.failures.insert(item.id.clone(), e.to_string());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::VideoMoment;

    fn span(a: f64, b: f64) -> TemporalSpan {
        TemporalSpan::new(a, b).unwrap()
    }

    fn ann(v: &str, a: f64, b: f64, q: &str) -> MomentAnnotation {
        MomentAnnotation {
            video_id: v.into(),
            start: a,
            end: b,
            query: q.into(),
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(temporal_iou(&span(2.0, 7.0), &span(2.0, 7.0)), 1.0);
        assert_eq!(temporal_iou(&span(0.0, 1.0), &span(2.0, 3.0)), 0.0);
        assert!((temporal_iou(&span(0.0, 10.0), &span(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-9);
        assert!(TemporalSpan::new(3.0, 3.0).is_err());
        assert!(TemporalSpan::new(-1.0, 3.0).is_err());
    }

    #[test]
    fn span_serializes_as_pair() {
        let s = serde_json::to_string(&span(1.5, 2.0)).unwrap();
        assert_eq!(s, "[1.5,2.0]");
        assert!(serde_json::from_str::<TemporalSpan>("[2.0,1.0]").is_err());
    }

    fn pred(v: &str, q: &str, spans: &[(f64, f64)]) -> RetrievalPrediction {
        RetrievalPrediction {
            video_id: v.into(),
            query: q.into(),
            ranked_spans: spans.iter().map(|&(a, b)| span(a, b)).collect(),
        }
    }

    #[test]
    fn evaluate_trivial_cases() {
        let gt = vec![ann("a", 0.0, 4.0, "x"), ann("b", 2.0, 3.0, "y")];
        let same = vec![pred("a", "x", &[(0.0, 4.0)]), pred("b", "y", &[(2.0, 3.0)])];
        let m = evaluate(&same, &gt, &DEFAULT_THRESHOLDS, 1).unwrap();
        assert!(m.recall.iter().all(|r| r.recall == 1.0));
        assert_eq!(m.miou, 1.0);
        let far = vec![pred("a", "x", &[(5.0, 6.0)]), pred("b", "y", &[(0.0, 1.0)])];
        let m = evaluate(&far, &gt, &DEFAULT_THRESHOLDS, 1).unwrap();
        assert!(m.recall.iter().all(|r| r.recall == 0.0));
        assert_eq!(m.miou, 0.0);
        assert!(matches!(evaluate(&same[..1], &gt, &DEFAULT_THRESHOLDS, 1), Err(Error::Missing(_))));
    }

    #[test]
    fn recall_grows_with_n() {
        let gt = vec![ann("a", 0.0, 4.0, "x")];
        let p = vec![pred("a", "x", &[(6.0, 8.0), (0.0, 4.0)])];
        assert_eq!(evaluate(&p, &gt, &[0.5], 1).unwrap().recall_at(0.5), Some(0.0));
        assert_eq!(evaluate(&p, &gt, &[0.5], 2).unwrap().recall_at(0.5), Some(1.0));
        // mIoU only looks at rank 1
        assert_eq!(evaluate(&p, &gt, &[0.5], 2).unwrap().miou, 0.0);
    }

    #[test]
    fn table_has_header_and_row() {
        let gt = vec![ann("a", 0.0, 4.0, "x")];
        let p = vec![pred("a", "x", &[(0.0, 4.0)])];
        let t = evaluate(&p, &gt, &DEFAULT_THRESHOLDS, 1).unwrap().table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("R@1 IoU=0.5"));
        assert_eq!(lines[0].len(), lines[1].len());
    }

    #[test]
    fn split_trivial_cases() {
        let corpus = vec![ann("v", 0.0, 1.0, "a man runs"), ann("v", 1.0, 2.0, "a man walks")];
        let vocab: BTreeSet<String> = ["man", "runs", "walks"].iter().map(|s| s.to_string()).collect();
        let out = novel_word_split(&corpus, &vocab, 1).unwrap();
        assert!(out.generation_sentences.is_empty() && out.novel_word_star_test.is_empty());
        assert!(out.warning.is_some());

        let three = vec![
            ann("v", 0.0, 1.0, "he juggles"),
            ann("v", 1.0, 2.0, "she juggles"),
            ann("w", 0.0, 1.0, "they juggles"),
        ];
        let out = novel_word_split(&three, &BTreeSet::new(), 7).unwrap();
        assert_eq!(out.novel_words, ["juggles"]);
        assert_eq!(out.generation_sentences.len(), 1);
        assert_eq!(out.novel_word_star_test.len(), 2);
    }

    #[test]
    fn reference_scorer_finds_matching_moment() {
        let m = |s: f64, e: f64, q: &str| VideoMoment {
            start: s,
            end: e,
            query: q.into(),
            frames: None,
        };
        let video = Video {
            video_id: "v".into(),
            fps: 1.0,
            duration: 16.0,
            moments: vec![m(0.0, 4.0, "a dog barks"), m(4.0, 12.0, "a cat sleeps"), m(12.0, 16.0, "rain falls")],
        };
        let s = ReferenceScorer::default();
        assert_eq!(s.score(&video, "the cat sleeps").unwrap()[0], span(4.0, 12.0));
        assert_eq!(s.score(&video, "rain").unwrap()[0], span(12.0, 16.0));
        let blind = ReferenceScorer::with_vocab(["dog".to_string()].into_iter().collect());
        // unknown words give a flat score and the longest window wins
        assert_eq!(blind.score(&video, "rain").unwrap()[0], span(0.0, 16.0));
    }
}
