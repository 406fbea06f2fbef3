//! Scoring and selection of generated moments, and assembly of video
//! variants that carry them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::vmr_eval::{MomentAnnotation, TemporalSpan};
use crate::{Error, Result};

/// Which external encoder produced an embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Joint text-image space, used for prompt fidelity.
    Joint,
    /// Self-supervised visual space, used for structure fidelity.
    Structure,
}

/// Per-frame embedding vectors of one moment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    per_frame: Vec<Vec<f64>>,
    source_tag: EncoderKind,
}

impl EmbeddingSet {
    pub fn new(per_frame: Vec<Vec<f64>>, source_tag: EncoderKind) -> Result<Self> {
        let dim = per_frame.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("embedding set needs at least one nonempty vector"));
        }
        for (i, v) in per_frame.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("dimension {dim}"),
                    got: format!("row {i} has {}", v.len()),
                });
            }
            if norm(v) == 0.0 || !v.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("embedding row {i} is zero or non-finite")));
            }
        }
        Ok(Self {
            per_frame,
            source_tag,
        })
    }

    pub fn per_frame(&self) -> &[Vec<f64>] {
        &self.per_frame
    }

    pub fn source_tag(&self) -> EncoderKind {
        self.source_tag
    }

    pub fn dim(&self) -> usize {
        self.per_frame[0].len()
    }

    pub fn len(&self) -> usize {
        self.per_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_frame.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("dimension {}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity between each frame embedding and the prompt.
pub fn prompt_fidelity(joint: &EmbeddingSet, prompt_vec: &[f64]) -> Result<f64> {
    let sum = joint
        .per_frame()
        .iter()
        .map(|f| cosine(f, prompt_vec))
        .sum::<Result<f64>>()?;
    Ok(sum / joint.len() as f64)
}

/// Mean frame-wise cosine similarity between source and generated frames.
pub fn structure_fidelity(src: &EmbeddingSet, gen: &EmbeddingSet) -> Result<f64> {
    if src.len() != gen.len() {
        return Err(Error::invalid(format!(
            "structure fidelity needs equal frame counts ({} vs {})",
            src.len(),
            gen.len()
        )));
    }
    let sum = src
        .per_frame()
        .iter()
        .zip(gen.per_frame())
        .map(|(a, b)| cosine(a, b))
        .sum::<Result<f64>>()?;
    Ok(sum / src.len() as f64)
}

/// `2ps / (p + s)`, defined for positive inputs only.
pub fn harmonic_score(p: f64, s: f64) -> Result<f64> {
    if !(p > 0.0 && s > 0.0) {
        return Err(Error::UndefinedScore(p, s));
    }
    Ok(2.0 * p * s / (p + s))
}

/// Harmonic score, or 0 when either fidelity is nonpositive.
pub fn h_score_or_zero(p: f64, s: f64) -> f64 {
    harmonic_score(p, s).unwrap_or(0.0)
}

/// A candidate edited moment. Frames and embeddings live in files referenced
/// by relative path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedMoment {
    pub id: String,
    pub source_video_id: String,
    pub source_moment_index: usize,
    pub edit_prompt: String,
    /// Where the edited moment sits in its variant video.
    pub span: TemporalSpan,
    pub frames: String,
    pub joint_embeddings: String,
    pub structure_embeddings: String,
    pub source_structure_embeddings: String,
    pub prompt_embedding: String,
    pub prompt_fid: f64,
    pub struct_fid: f64,
    pub h_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GeneratedMoment {
    /// Recomputes and stores the three scores from embeddings.
    pub fn score(
        &mut self,
        joint: &EmbeddingSet,
        prompt_vec: &[f64],
        source_structure: &EmbeddingSet,
        structure: &EmbeddingSet,
    ) -> Result<()> {
        self.prompt_fid = prompt_fidelity(joint, prompt_vec)?;
        self.struct_fid = structure_fidelity(source_structure, structure)?;
        self.h_score = h_score_or_zero(self.prompt_fid, self.struct_fid);
        Ok(())
    }

    /// The annotation this moment contributes to a training set.
    pub fn annotation(&self) -> MomentAnnotation {
        MomentAnnotation {
            video_id: variant_video_id(&self.source_video_id, &self.id),
            start: self.span.start,
            end: self.span.end,
            query: self.edit_prompt.clone(),
        }
    }
}

/// Identifier of the variant video that carries generated moment `id`.
pub fn variant_video_id(source_video_id: &str, id: &str) -> String {
    format!("{source_video_id}@{id}")
}

/// Append-only collection of candidates with unique ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidatePool {
    items: Vec<GeneratedMoment>,
    /// Hash of the generation config that produced the items.
    pub provenance: String,
}

impl CandidatePool {
    pub fn new(items: Vec<GeneratedMoment>, provenance: impl Into<String>) -> Result<Self> {
        let mut pool = Self {
            items: Vec::with_capacity(items.len()),
            provenance: provenance.into(),
        };
        for it in items {
            pool.push(it)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, item: GeneratedMoment) -> Result<()> {
        if self.items.iter().any(|m| m.id == item.id) {
            return Err(Error::DuplicateId(item.id));
        }
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[GeneratedMoment] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|m| m.id.as_str()).collect()
    }

    fn with_items(&self, items: Vec<GeneratedMoment>) -> Self {
        Self {
            items,
            provenance: self.provenance.clone(),
        }
    }
}

/// The `k` candidates with the highest harmonic score, best first; ties go
/// to the smaller id.
pub fn quantitative_select(pool: &CandidatePool, k: usize) -> Result<CandidatePool> {
    if k > pool.len() {
        return Err(Error::invalid(format!(
            "cannot keep top {k} of {} candidates",
            pool.len()
        )));
    }
    let mut items = pool.items.clone();
    items.sort_by(|a, b| b.h_score.total_cmp(&a.h_score).then_with(|| a.id.cmp(&b.id)));
    items.truncate(k);
    Ok(pool.with_items(items))
}

/// The `l` candidates on which the retrieval model scores lowest, worst
/// first; ties go to the smaller id.
pub fn qualitative_select(
    filtered: &CandidatePool,
    vmr_scores: &BTreeMap<String, f64>,
    l: usize,
) -> Result<CandidatePool> {
    if l > filtered.len() {
        return Err(Error::invalid(format!(
            "cannot keep bottom {l} of {} candidates",
            filtered.len()
        )));
    }
    let mut scored = filtered
        .items
        .iter()
        .map(|m| {
            vmr_scores
                .get(&m.id)
                .map(|s| (*s, m))
                .ok_or_else(|| Error::Missing(format!("retrieval score for {}", m.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, a), (sb, b)| sa.total_cmp(sb).then_with(|| a.id.cmp(&b.id)));
    Ok(filtered.with_items(scored.into_iter().take(l).map(|(_, m)| m.clone()).collect()))
}

/// How pool-level harmonic scores are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarmonicAggregation {
    /// Harmonic score of the pool-mean fidelities.
    #[default]
    Aggregate,
    /// Mean of per-candidate harmonic scores.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub prompt_fid: f64,
    pub struct_fid: f64,
    pub h_score: f64,
    pub mode: HarmonicAggregation,
}

pub fn pool_report(pool: &CandidatePool, mode: HarmonicAggregation) -> Result<PoolReport> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot report on an empty pool"));
    }
    let n = pool.len() as f64;
    let p = pool.items.iter().map(|m| m.prompt_fid).sum::<f64>() / n;
    let s = pool.items.iter().map(|m| m.struct_fid).sum::<f64>() / n;
    let h = match mode {
        HarmonicAggregation::Aggregate => h_score_or_zero(p, s),
        HarmonicAggregation::PerSample => pool.items.iter().map(|m| m.h_score).sum::<f64>() / n,
    };
    Ok(PoolReport {
        prompt_fid: p,
        struct_fid: s,
        h_score: h,
        mode,
    })
}

/// One annotated moment of a video timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMoment {
    pub start: f64,
    pub end: f64,
    pub query: String,
    /// Packed frames of the moment, relative to the video file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<String>,
}

impl VideoMoment {
    pub fn span(&self) -> Result<TemporalSpan> {
        TemporalSpan::new(self.start, self.end)
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// A video as an ordered list of non-overlapping annotated moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub video_id: String,
    pub fps: f64,
    pub duration: f64,
    pub moments: Vec<VideoMoment>,
}

impl Video {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::invalid(format!("video {} has fps {}", self.video_id, self.fps)));
        }
        let mut prev_end = 0.0;
        for (i, m) in self.moments.iter().enumerate() {
            m.span()?;
            if m.start < prev_end {
                return Err(Error::invalid(format!(
                    "moment {i} of {} overlaps its predecessor",
                    self.video_id
                )));
            }
            if m.end > self.duration {
                return Err(Error::invalid(format!(
                    "moment {i} of {} ends after the video",
                    self.video_id
                )));
            }
            prev_end = m.end;
        }
        Ok(())
    }

    /// Frames in moment `i` at the video frame rate.
    pub fn moment_frames(&self, i: usize) -> usize {
        (self.moments[i].duration() * self.fps).round() as usize
    }

    pub fn annotations(&self) -> Vec<MomentAnnotation> {
        self.moments
            .iter()
            .map(|m| MomentAnnotation {
                video_id: self.video_id.clone(),
                start: m.start,
                end: m.end,
                query: m.query.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssemblyMode {
    Replace,
    Inject,
}

impl std::str::FromStr for AssemblyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(Self::Replace),
            "inject" => Ok(Self::Inject),
            other => Err(Error::invalid(format!("unknown assembly mode `{other}`"))),
        }
    }
}

/// Where an injected moment goes relative to its source moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectPlacement {
    #[default]
    After,
    Before,
}

/// An edited moment ready to be placed into a video.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedMoment {
    pub frame_count: usize,
    pub query: String,
    pub frames: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub video: Video,
    /// Index of the edited moment in `video.moments`.
    pub edited_index: usize,
}

impl Variant {
    pub fn edited_span(&self) -> TemporalSpan {
        let m = &self.video.moments[self.edited_index];
        TemporalSpan {
            start: m.start,
            end: m.end,
        }
    }
}

/// Places an edited version of moment `index` into the video.
///
/// `Replace` swaps the moment in place; its length must match and every
/// span is kept. `Inject` inserts the edit next to the source moment and
/// shifts everything after the insertion point by the edit's duration.
pub fn assemble_variant(
    video: &Video,
    index: usize,
    edited: &EditedMoment,
    mode: AssemblyMode,
    placement: InjectPlacement,
) -> Result<Variant> {
    video.validate()?;
    if index >= video.moments.len() {
        return Err(Error::invalid(format!(
            "moment index {index} out of range for {} moments",
            video.moments.len()
        )));
    }
    let mut out = video.clone();
    match mode {
        AssemblyMode::Replace => {
            let expected = video.moment_frames(index);
            if edited.frame_count != expected {
                return Err(Error::invalid(format!(
                    "replacement has {} frames, moment {index} has {expected}",
                    edited.frame_count
                )));
            }
            let m = &mut out.moments[index];
            m.query = edited.query.clone();
            m.frames = edited.frames.clone();
            Ok(Variant {
                video: out,
                edited_index: index,
            })
        }
        AssemblyMode::Inject => {
            if edited.frame_count == 0 {
                return Err(Error::invalid("cannot inject an empty moment"));
            }
            let shift = edited.frame_count as f64 / video.fps;
            let src = &video.moments[index];
            let (at, insert_index) = match placement {
                InjectPlacement::After => (src.end, index + 1),
                InjectPlacement::Before => (src.start, index),
            };
            for m in out.moments.iter_mut().skip(insert_index) {
                m.start += shift;
                m.end += shift;
            }
            out.moments.insert(
                insert_index,
                VideoMoment {
                    start: at,
                    end: at + shift,
                    query: edited.query.clone(),
                    frames: edited.frames.clone(),
                },
            );
            out.duration += shift;
            Ok(Variant {
                video: out,
                edited_index: insert_index,
            })
        }
    }
}

/// One labelled example of a retrieval training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub id: String,
    #[serde(flatten)]
    pub annotation: MomentAnnotation,
    #[serde(default)]
    pub synthetic: bool,
}

/// Source data followed by the selected generated moments. Ids must not
/// collide.
pub fn build_training_set(
    source: &[TrainingEntry],
    selected: &CandidatePool,
) -> Result<Vec<TrainingEntry>> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for e in source {
        if !seen.insert(&e.id) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
    }
    let mut out = source.to_vec();
    for m in selected.items() {
        if !seen.insert(&m.id) {
            return Err(Error::DuplicateId(m.id.clone()));
        }
        out.push(TrainingEntry {
            id: m.id.clone(),
            annotation: m.annotation(),
            synthetic: true,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<Vec<f64>>) -> EmbeddingSet {
        EmbeddingSet::new(rows, EncoderKind::Joint).unwrap()
    }

    pub(crate) fn moment(id: &str, h: f64) -> GeneratedMoment {
        GeneratedMoment {
            id: id.into(),
            source_video_id: "v".into(),
            source_moment_index: 0,
            edit_prompt: format!("edit {id}"),
            span: TemporalSpan::new(0.0, 1.0).unwrap(),
            frames: String::new(),
            joint_embeddings: String::new(),
            structure_embeddings: String::new(),
            source_structure_embeddings: String::new(),
            prompt_embedding: String::new(),
            prompt_fid: h,
            struct_fid: h,
            h_score: h,
            config_hash: None,
        }
    }

    #[test]
    fn prompt_fidelity_cases() {
        let p = vec![1.0, 0.0];
        assert_eq!(prompt_fidelity(&set(vec![p.clone(), p.clone()]), &p).unwrap(), 1.0);
        assert_eq!(prompt_fidelity(&set(vec![vec![0.0, 3.0]]), &p).unwrap(), 0.0);
        // cos = 0.2 and 0.4
        let a = vec![0.2, (1.0f64 - 0.04).sqrt()];
        let b = vec![0.4, (1.0f64 - 0.16).sqrt()];
        assert!((prompt_fidelity(&set(vec![a, b]), &p).unwrap() - 0.3).abs() < 1e-12);
        assert!(prompt_fidelity(&set(vec![vec![1.0, 0.0]]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn structure_fidelity_cases() {
        let src = set(vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
        assert!((structure_fidelity(&src, &src).unwrap() - 1.0).abs() < 1e-12);
        let neg = set(src.per_frame().iter().map(|v| v.iter().map(|x| -x).collect()).collect());
        assert!((structure_fidelity(&src, &neg).unwrap() + 1.0).abs() < 1e-12);
        let mixed = set(vec![vec![2.0, 4.0], vec![0.5, 1.0]]);
        // cosines 1.0 and 0.0
        assert!((structure_fidelity(&src, &mixed).unwrap() - 0.5).abs() < 1e-12);
        assert!(structure_fidelity(&src, &set(vec![vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn zero_norm_embedding_is_rejected() {
        assert!(EmbeddingSet::new(vec![vec![0.0, 0.0]], EncoderKind::Structure).is_err());
        assert!(EmbeddingSet::new(vec![vec![1.0], vec![1.0, 2.0]], EncoderKind::Structure).is_err());
    }

    #[test]
    fn harmonic_cases() {
        assert!((harmonic_score(0.263, 0.568).unwrap() - 0.359).abs() <= 1e-3);
        assert!((harmonic_score(0.282, 0.397).unwrap() - 0.329).abs() <= 1e-3);
        assert!((harmonic_score(0.7, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(harmonic_score(0.0, 0.5), Err(Error::UndefinedScore(..))));
        assert!(harmonic_score(0.5, -0.1).is_err());
        assert_eq!(h_score_or_zero(-0.2, 0.9), 0.0);
    }

    #[test]
    fn selection_edges() {
        let pool = CandidatePool::new(
            vec![moment("c", 0.5), moment("a", 0.9), moment("b", 0.5)],
            "cfg",
        )
        .unwrap();
        let all = quantitative_select(&pool, 3).unwrap();
        assert_eq!(all.ids(), ["a", "b", "c"]);
        assert_eq!(quantitative_select(&pool, 1).unwrap().ids(), ["a"]);
        assert!(quantitative_select(&pool, 4).is_err());

        let scores: BTreeMap<String, f64> =
            [("a", 0.9), ("b", 0.1), ("c", 0.5)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert_eq!(qualitative_select(&pool, &scores, 1).unwrap().ids(), ["b"]);
        assert_eq!(qualitative_select(&pool, &scores, 3).unwrap().len(), 3);
        let mut missing = scores.clone();
        missing.remove("c");
        assert!(matches!(qualitative_select(&pool, &missing, 1), Err(Error::Missing(_))));
    }

    #[test]
    fn pool_rejects_duplicate_ids() {
        assert!(CandidatePool::new(vec![moment("a", 0.1), moment("a", 0.2)], "").is_err());
    }

    #[test]
    fn aggregation_modes_differ() {
        let mut a = moment("a", 0.0);
        (a.prompt_fid, a.struct_fid) = (0.2, 0.8);
        a.h_score = h_score_or_zero(0.2, 0.8);
        let mut b = moment("b", 0.0);
        (b.prompt_fid, b.struct_fid) = (0.6, 0.4);
        b.h_score = h_score_or_zero(0.6, 0.4);
        let pool = CandidatePool::new(vec![a, b], "").unwrap();
        let agg = pool_report(&pool, HarmonicAggregation::Aggregate).unwrap();
        let per = pool_report(&pool, HarmonicAggregation::PerSample).unwrap();
        assert!((agg.h_score - h_score_or_zero(0.4, 0.6)).abs() < 1e-15);
        assert!((per.h_score - (0.32 + 0.48) / 2.0).abs() < 1e-12);
    }

    fn three() -> Video {
        let m = |s: f64, e: f64, q: &str| VideoMoment {
            start: s,
            end: e,
            query: q.into(),
            frames: None,
        };
        Video {
            video_id: "v".into(),
            fps: 1.0,
            duration: 12.0,
            moments: vec![m(0.0, 5.0, "one"), m(5.0, 9.0, "two"), m(9.0, 12.0, "three")],
        }
    }

    #[test]
    fn replace_keeps_spans_and_repoints_query() {
        let v = three();
        let e = EditedMoment {
            frame_count: 4,
            query: "a person jumps".into(),
            frames: None,
        };
        let out = assemble_variant(&v, 1, &e, AssemblyMode::Replace, InjectPlacement::After).unwrap();
        assert_eq!(out.video.duration, v.duration);
        assert_eq!(out.video.moments.len(), 3);
        assert_eq!(out.video.moments[1].query, "a person jumps");
        for (a, b) in out.video.moments.iter().zip(&v.moments) {
            assert_eq!((a.start, a.end), (b.start, b.end));
        }
        let wrong = EditedMoment { frame_count: 3, ..e };
        assert!(assemble_variant(&v, 1, &wrong, AssemblyMode::Replace, InjectPlacement::After).is_err());
    }

    #[test]
    fn inject_shifts_downstream_spans() {
        let v = three();
        let e = EditedMoment {
            frame_count: 4,
            query: "x".into(),
            frames: None,
        };
        let out = assemble_variant(&v, 1, &e, AssemblyMode::Inject, InjectPlacement::After).unwrap();
        let spans: Vec<(f64, f64)> = out.video.moments.iter().map(|m| (m.start, m.end)).collect();
        assert_eq!(spans, [(0.0, 5.0), (5.0, 9.0), (9.0, 13.0), (13.0, 16.0)]);
        assert_eq!(out.edited_index, 2);
        assert_eq!(out.video.duration, 16.0);

        let before = assemble_variant(&v, 1, &e, AssemblyMode::Inject, InjectPlacement::Before).unwrap();
        let spans: Vec<(f64, f64)> = before.video.moments.iter().map(|m| (m.start, m.end)).collect();
        assert_eq!(spans, [(0.0, 5.0), (5.0, 9.0), (9.0, 13.0), (13.0, 16.0)]);
        assert_eq!(before.video.moments[1].query, "x");
        assert!(assemble_variant(&v, 3, &e, AssemblyMode::Inject, InjectPlacement::After).is_err());
    }

    #[test]
    fn training_set_union() {
        let src: Vec<TrainingEntry> = (0..10)
            .map(|i| TrainingEntry {
                id: format!("s{i}"),
                annotation: MomentAnnotation {
                    video_id: "v".into(),
                    start: 0.0,
                    end: 1.0,
                    query: "q".into(),
                },
                synthetic: false,
            })
            .collect();
        let empty = CandidatePool::default();
        assert_eq!(build_training_set(&src, &empty).unwrap(), src);
        let sel = CandidatePool::new(vec![moment("g0", 0.1), moment("g1", 0.2), moment("g2", 0.3)], "").unwrap();
        let out = build_training_set(&src, &sel).unwrap();
        assert_eq!(out.len(), 13);
        assert!(out[10].synthetic);
        assert_eq!(out[10].annotation.video_id, "v@g0");
        let clash = CandidatePool::new(vec![moment("s3", 0.1)], "").unwrap();
        assert!(matches!(build_training_set(&src, &clash), Err(Error::DuplicateId(_))));
    }
}
