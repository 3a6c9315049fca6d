//! Assessment and retrieval over trained networks: per-operation probe
//! accuracy reports and cosine-similarity video retrieval on raw
//! convolutional features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloze::{apply_resize_crop, ClozeConfig, ClozeError, OperationKind};
use crate::model::{ClozeNetwork, ModelError, VCP_CLASSES};
use crate::tensor::TensorError;
use crate::train::{eval_clip_starts, TrainLog, PREDICT_CLIPS};
use crate::video::{clips_to_batch, Clip, Dataset, VideoError, VideoTensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {reason}")]
    Validation { reason: String },
    #[error("retrieval index unusable: {reason}")]
    Index { reason: String },
    #[error(transparent)]
    Cloze(#[from] ClozeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Feature-based retrieval

/// One gallery video: identity, label, and its pooled conv feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub video_id: String,
    pub class_label: Option<u32>,
    pub features: Vec<f32>,
}

/// Cosine-distance retrieval gallery, one entry per training video in
/// manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub feature_dim: usize,
    pub gallery: Vec<GalleryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub video_id: String,
    pub class_label: Option<u32>,
    pub similarity: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

impl RetrievalIndex {
    pub fn validate(&self) -> Result<(), EvalError> {
        for entry in &self.gallery {
            if entry.features.len() != self.feature_dim {
                return Err(EvalError::Index {
                    reason: format!(
                        "gallery entry {} has {} features, index is {}-dimensional",
                        entry.video_id,
                        entry.features.len(),
                        self.feature_dim
                    ),
                });
            }
            if entry.features.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::Index {
                    reason: format!("gallery entry {} has non-finite features", entry.video_id),
                });
            }
        }
        Ok(())
    }

    /// The `k` most cosine-similar gallery entries, descending; equal
    /// similarities are ordered by ascending video id so results never
    /// depend on platform sort quirks.
    pub fn query(&self, features: &[f32], k: usize) -> Result<Vec<RetrievalHit>, EvalError> {
        if self.gallery.is_empty() {
            return Err(EvalError::Index { reason: "gallery is empty".into() });
        }
        if k == 0 || k > self.gallery.len() {
            return Err(EvalError::Validation {
                reason: format!("k = {k} outside [1, {}]", self.gallery.len()),
            });
        }
        if features.len() != self.feature_dim {
            return Err(EvalError::Validation {
                reason: format!(
                    "query has {} features, index is {}-dimensional",
                    features.len(),
                    self.feature_dim
                ),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Validation { reason: "query features are non-finite".into() });
        }
        let mut hits: Vec<RetrievalHit> = self
            .gallery
            .iter()
            .map(|entry| RetrievalHit {
                video_id: entry.video_id.clone(),
                class_label: entry.class_label,
                similarity: cosine(features, &entry.features),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .expect("similarities are finite")
                .then_with(|| a.video_id.cmp(&b.video_id))
        });
        hits.truncate(k);
        Ok(hits)
    }
}

/// Pooled feature vector for one video: conv features of `PREDICT_CLIPS`
/// uniformly spaced, center-cropped clips, each L2-normalized so every clip
/// contributes equally, then averaged.
pub fn video_features(
    video: &VideoTensor,
    net: &ClozeNetwork<f32>,
    cloze: &ClozeConfig,
) -> Result<Vec<f32>, EvalError> {
    if video.frame_count() < cloze.clip_len {
        return Err(EvalError::Cloze(ClozeError::SpanTooShort {
            video_id: video.video_id().to_string(),
            required: cloze.clip_len,
            actual: video.frame_count(),
        }));
    }
    let starts = eval_clip_starts(video.frame_count(), cloze.clip_len, PREDICT_CLIPS);
    let window = ((cloze.resize.0 - cloze.crop.0) / 2, (cloze.resize.1 - cloze.crop.1) / 2);
    let mut clips = Vec::with_capacity(starts.len());
    for start in starts {
        clips.push(apply_resize_crop(&video.extract_clip(start, cloze.clip_len)?, cloze, window)?);
    }
    let refs: Vec<&Clip> = clips.iter().collect();
    let features = net.extract_conv5(&clips_to_batch(&refs)?, true)?;
    let dim = net.config().feature_dim;
    let mut mean = vec![0.0f32; dim];
    for row in features.data().chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = clips.len() as f32;
    for m in &mut mean {
        *m /= n;
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Validation {
            reason: format!("video {} produced non-finite features", video.video_id()),
        });
    }
    Ok(mean)
}

/// Builds the retrieval gallery from the train split, in manifest order.
pub fn build_index(
    dataset: &Dataset,
    net: &ClozeNetwork<f32>,
    cloze: &ClozeConfig,
) -> Result<RetrievalIndex, EvalError> {
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(EvalError::Validation { reason: "train split is empty".into() });
    }
    let mut gallery = Vec::with_capacity(train.len());
    for i in train {
        let video = dataset.video(i);
        gallery.push(GalleryEntry {
            video_id: video.video_id().to_string(),
            class_label: video.class_label(),
            features: video_features(video, net, cloze)?,
        });
    }
    let index = RetrievalIndex { feature_dim: net.config().feature_dim, gallery };
    index.validate()?;
    Ok(index)
}

/// The `k` gallery videos most similar to `video`.
pub fn retrieve(
    video: &VideoTensor,
    net: &ClozeNetwork<f32>,
    cloze: &ClozeConfig,
    index: &RetrievalIndex,
    k: usize,
) -> Result<Vec<RetrievalHit>, EvalError> {
    index.query(&video_features(video, net, cloze)?, k)
}

/// Fraction of test videos whose top-k retrieved set contains at least one
/// gallery video of the same class, for each requested k (echoed in input
/// order). Every test video must be labeled.
pub fn topk_hit_rate(
    dataset: &Dataset,
    net: &ClozeNetwork<f32>,
    cloze: &ClozeConfig,
    index: &RetrievalIndex,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let queries = dataset.test_indices();
    if queries.is_empty() {
        return Err(EvalError::Validation { reason: "test split is empty".into() });
    }
    if ks.is_empty() {
        return Err(EvalError::Validation { reason: "no k levels requested".into() });
    }
    let deepest = *ks.iter().max().expect("ks is non-empty");
    let mut hits_at = vec![0usize; ks.len()];
    for &q in &queries {
        let video = dataset.video(q);
        let Some(label) = video.class_label() else {
            return Err(EvalError::Validation {
                reason: format!("test video {} has no class label", video.video_id()),
            });
        };
        let ranked = retrieve(video, net, cloze, index, deepest)?;
        // First rank (1-based) at which the query's class appears.
        let first_match = ranked
            .iter()
            .position(|hit| hit.class_label == Some(label))
            .map(|p| p + 1);
        for (slot, &k) in hits_at.iter_mut().zip(ks) {
            if first_match.is_some_and(|rank| rank <= k) {
                *slot += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits_at)
        .map(|(&k, hits)| (k, hits as f64 / queries.len() as f64))
        .collect())
}

/// CSV rows `query_id,rank,gallery_id,label,similarity` for a batch of
/// queries; rank is 1-based, an unlabeled gallery entry prints an empty
/// label field.
pub fn retrieval_csv(results: &[(String, Vec<RetrievalHit>)]) -> String {
    let mut out = String::from("query_id,rank,gallery_id,label,similarity\n");
    for (query_id, hits) in results {
        for (rank, hit) in hits.iter().enumerate() {
            let label = hit.class_label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{query_id},{},{},{label},{:.6}\n",
                rank + 1,
                hit.video_id,
                hit.similarity
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Probe assessment reports

/// Accuracy-over-epochs curves of one probe run: overall and one series per
/// operation class, on a shared epoch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub method: String,
    pub epochs: Vec<usize>,
    pub overall: Vec<f64>,
    /// Per-operation accuracy series, in class-index order.
    pub per_operation: Vec<(OperationKind, Vec<f64>)>,
}

impl AssessmentReport {
    /// Accuracy series of one operation.
    pub fn series(&self, kind: OperationKind) -> Option<&[f64]> {
        self.per_operation
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, series)| series.as_slice())
    }
}

/// Extracts the scored epochs of a probe log into a report. The scores
/// must sit on the 5-epoch cadence (5, 10, 15, ...), each with
/// per-operation accuracies.
pub fn assessment_from_log(method: &str, log: &TrainLog) -> Result<AssessmentReport, EvalError> {
    let scored: Vec<_> = log.records.iter().filter(|r| r.test_accuracy.is_some()).collect();
    if scored.is_empty() {
        return Err(EvalError::Validation {
            reason: format!("log for {method} has no scored epochs"),
        });
    }
    let cadence = 5;
    let mut epochs = Vec::with_capacity(scored.len());
    let mut overall = Vec::with_capacity(scored.len());
    let mut per_op: Vec<Vec<f64>> = vec![Vec::with_capacity(scored.len()); VCP_CLASSES];
    for (i, record) in scored.iter().enumerate() {
        let expected = (i + 1) * cadence;
        if record.epoch != expected {
            return Err(EvalError::Validation {
                reason: format!(
                    "scored epochs of {method} are off the {cadence}-epoch cadence: \
                     expected epoch {expected}, found {}",
                    record.epoch
                ),
            });
        }
        let Some(per_class) = &record.per_class_accuracy else {
            return Err(EvalError::Validation {
                reason: format!("epoch {} lacks per-operation accuracies", record.epoch),
            });
        };
        if per_class.len() != VCP_CLASSES {
            return Err(EvalError::Validation {
                reason: format!(
                    "epoch {} reports {} operation accuracies, expected {VCP_CLASSES}",
                    record.epoch,
                    per_class.len()
                ),
            });
        }
        epochs.push(record.epoch);
        overall.push(record.test_accuracy.expect("filtered on is_some"));
        for (series, &value) in per_op.iter_mut().zip(per_class) {
            series.push(value);
        }
    }
    let per_operation = OperationKind::ALL.into_iter().zip(per_op).collect();
    Ok(AssessmentReport { method: method.to_string(), epochs, overall, per_operation })
}

/// CSV with header `epoch,overall,O,SR,SP,TR,TA` and one row per scored
/// epoch; accuracies carry four fractional digits.
pub fn assessment_csv(report: &AssessmentReport) -> String {
    let mut out = String::from("epoch");
    out.push_str(",overall");
    for (kind, _) in &report.per_operation {
        out.push(',');
        out.push_str(kind.short_label());
    }
    out.push('\n');
    for (i, &epoch) in report.epochs.iter().enumerate() {
        out.push_str(&format!("{epoch},{:.4}", report.overall[i]));
        for (_, series) in &report.per_operation {
            out.push_str(&format!(",{:.4}", series[i]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, StageConfig};
    use crate::train::{EpochRecord, LogMeta, TrainConfig};
    use crate::video::{synthesize_video, DatasetManifest, ManifestEntry, Split, SyntheticSpec};

    fn entry(video_id: &str, label: Option<u32>, split: Split) -> ManifestEntry {
        ManifestEntry {
            video_id: video_id.to_string(),
            file_path: format!("{video_id}.vcpv"),
            class_label: label,
            frame_count: 48,
            height: 24,
            width: 32,
            split,
        }
    }

    fn tiny_dataset(classes: usize, per_class: usize) -> Dataset {
        let spec = SyntheticSpec {
            num_classes: classes,
            videos_per_class: per_class,
            test_per_class: 1,
            frame_count: 48,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 5,
            seed: 23,
            motion_profiles: Vec::new(),
        };
        let mut entries = Vec::new();
        let mut videos = Vec::new();
        for class in 0..classes {
            for index in 0..per_class {
                let video = synthesize_video(&spec, class, index).unwrap();
                let split = if index + 1 == per_class { Split::Test } else { Split::Train };
                entries.push(entry(video.video_id(), Some(class as u32), split));
                videos.push(video);
            }
        }
        Dataset::from_videos(DatasetManifest { entries }, videos).unwrap()
    }

    fn tiny_net() -> ClozeNetwork<f32> {
        let backbone = BackboneConfig {
            input: (3, 8, 16, 16),
            stages: vec![
                StageConfig {
                    out_channels: 4,
                    kernel: (3, 3, 3),
                    pool_window: (2, 2, 2),
                    pool_stride: (2, 2, 2),
                },
                StageConfig {
                    out_channels: 8,
                    kernel: (3, 3, 3),
                    pool_window: (2, 2, 2),
                    pool_stride: (2, 2, 2),
                },
            ],
            feature_dim: 8,
        };
        ClozeNetwork::init(backbone, 3, 2, 31).unwrap()
    }

    fn hand_index() -> RetrievalIndex {
        RetrievalIndex {
            feature_dim: 2,
            gallery: vec![
                GalleryEntry {
                    video_id: "vec_x".into(),
                    class_label: Some(0),
                    features: vec![1.0, 0.0],
                },
                GalleryEntry {
                    video_id: "vec_y".into(),
                    class_label: Some(1),
                    features: vec![0.0, 1.0],
                },
                GalleryEntry {
                    video_id: "vec_diag".into(),
                    class_label: Some(0),
                    features: vec![1.0, 1.0],
                },
            ],
        }
    }

    #[test]
    fn hand_vectors_rank_by_cosine() {
        let index = hand_index();
        let hits = index.query(&[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.video_id.as_str()).collect();
        assert_eq!(ids, ["vec_x", "vec_diag", "vec_y"]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert!((hits[1].similarity - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(hits[2].similarity.abs() < 1e-12);
        assert_eq!(hits[0].class_label, Some(0));
    }

    #[test]
    fn ranking_is_scale_invariant_and_ties_break_by_id() {
        let mut index = hand_index();
        let before: Vec<String> =
            index.query(&[2.0, 1.0], 3).unwrap().into_iter().map(|h| h.video_id).collect();
        for entry in &mut index.gallery {
            for v in &mut entry.features {
                *v *= 37.5;
            }
        }
        let after: Vec<String> =
            index.query(&[2.0, 1.0], 3).unwrap().into_iter().map(|h| h.video_id).collect();
        assert_eq!(before, after);

        // Two identical vectors differ only in id; ascending id wins.
        index.gallery.push(GalleryEntry {
            video_id: "vec_a_clone".into(),
            class_label: Some(1),
            features: index.gallery[0].features.clone(),
        });
        let hits = index.query(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].video_id, "vec_a_clone");
        assert_eq!(hits[1].video_id, "vec_x");
    }

    #[test]
    fn query_validates_k_and_gallery() {
        let index = hand_index();
        assert!(matches!(index.query(&[1.0, 0.0], 0), Err(EvalError::Validation { .. })));
        assert!(matches!(index.query(&[1.0, 0.0], 4), Err(EvalError::Validation { .. })));
        assert!(matches!(index.query(&[1.0], 2), Err(EvalError::Validation { .. })));
        let empty = RetrievalIndex { feature_dim: 2, gallery: Vec::new() };
        assert!(matches!(empty.query(&[1.0, 0.0], 1), Err(EvalError::Index { .. })));
    }

    #[test]
    fn full_depth_query_is_a_permutation_of_the_gallery() {
        let index = hand_index();
        let hits = index.query(&[0.3, 0.9], 3).unwrap();
        let mut ids: Vec<String> = hits.into_iter().map(|h| h.video_id).collect();
        ids.sort();
        assert_eq!(ids, ["vec_diag", "vec_x", "vec_y"]);
    }

    #[test]
    fn index_covers_train_split_and_is_deterministic() {
        let dataset = tiny_dataset(2, 3);
        let net = tiny_net();
        let cloze = ClozeConfig::desk_default();
        let index = build_index(&dataset, &net, &cloze).unwrap();
        assert_eq!(index.gallery.len(), dataset.train_indices().len());
        assert_eq!(index.feature_dim, 8);
        let again = build_index(&dataset, &net, &cloze).unwrap();
        assert_eq!(index, again);
    }

    #[test]
    fn identical_videos_share_features() {
        let dataset = tiny_dataset(2, 3);
        let net = tiny_net();
        let cloze = ClozeConfig::desk_default();
        // Videos 0 and 1 of a class differ; the same video twice does not.
        let a = video_features(dataset.video(0), &net, &cloze).unwrap();
        let b = video_features(dataset.video(0), &net, &cloze).unwrap();
        let c = video_features(dataset.video(1), &net, &cloze).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn short_video_errors_name_the_video() {
        let spec = SyntheticSpec {
            num_classes: 1,
            videos_per_class: 1,
            test_per_class: 0,
            frame_count: 7,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 5,
            seed: 23,
            motion_profiles: Vec::new(),
        };
        let video = synthesize_video(&spec, 0, 0).unwrap();
        let err = video_features(&video, &tiny_net(), &ClozeConfig::desk_default()).unwrap_err();
        assert!(err.to_string().contains(video.video_id()), "got: {err}");
    }

    #[test]
    fn hit_rates_are_monotone_and_saturate() {
        let dataset = tiny_dataset(2, 4);
        let net = tiny_net();
        let cloze = ClozeConfig::desk_default();
        let index = build_index(&dataset, &net, &cloze).unwrap();
        let gallery_size = index.gallery.len();
        let ks: Vec<usize> = (1..=gallery_size).collect();
        let rates = topk_hit_rate(&dataset, &net, &cloze, &index, &ks).unwrap();
        for window in rates.windows(2) {
            assert!(window[1].1 >= window[0].1, "hit rate decreased: {rates:?}");
        }
        // Both query classes appear in the gallery, so the deepest level
        // always finds a match.
        assert_eq!(rates.last().unwrap().1, 1.0);
    }

    #[test]
    fn unlabeled_test_video_is_rejected() {
        let spec = SyntheticSpec {
            num_classes: 2,
            videos_per_class: 2,
            test_per_class: 1,
            frame_count: 48,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 5,
            seed: 23,
            motion_profiles: Vec::new(),
        };
        let mut entries = Vec::new();
        let mut videos = Vec::new();
        for class in 0..2 {
            for index in 0..2 {
                let video = synthesize_video(&spec, class, index).unwrap();
                let split = if index == 1 { Split::Test } else { Split::Train };
                let label = if split == Split::Test { None } else { Some(class as u32) };
                entries.push(entry(video.video_id(), label, split));
                videos.push(video);
            }
        }
        let dataset = Dataset::from_videos(DatasetManifest { entries }, videos).unwrap();
        let net = tiny_net();
        let cloze = ClozeConfig::desk_default();
        let index = build_index(&dataset, &net, &cloze).unwrap();
        let err = topk_hit_rate(&dataset, &net, &cloze, &index, &[1]).unwrap_err();
        assert!(matches!(err, EvalError::Validation { .. }), "got: {err}");
        assert!(err.to_string().contains("class label"), "got: {err}");
    }

    fn probe_like_log(scored_epochs: &[usize], total_epochs: usize) -> TrainLog {
        let records = (1..=total_epochs)
            .map(|epoch| {
                let scored = scored_epochs.contains(&epoch);
                EpochRecord {
                    epoch,
                    train_loss: 1.0,
                    train_accuracy: 0.5,
                    test_accuracy: scored.then_some(0.5 + epoch as f64 / 100.0),
                    per_class_accuracy: scored
                        .then(|| (0..VCP_CLASSES).map(|c| c as f64 / 10.0).collect()),
                    rng_checkpoint: 0,
                    remote_fallbacks: 0,
                    backbone_hash: None,
                    wall_time_ms: 0,
                }
            })
            .collect();
        TrainLog {
            meta: LogMeta {
                train: TrainConfig::default(),
                cloze: ClozeConfig::desk_default(),
                backbone: BackboneConfig::default(),
                num_action_classes: 10,
                num_train_videos: 4,
                num_test_videos: 2,
            },
            records,
        }
    }

    #[test]
    fn assessment_follows_the_log_and_renders_csv() {
        let log = probe_like_log(&[5, 10, 15, 20, 25, 30], 30);
        let report = assessment_from_log("vcp", &log).unwrap();
        assert_eq!(report.epochs, vec![5, 10, 15, 20, 25, 30]);
        assert_eq!(report.overall[0], 0.55);
        assert_eq!(report.series(OperationKind::SpatialPermutation).unwrap()[0], 0.2);

        let csv = assessment_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,overall,O,SR,SP,TR,TA"));
        assert_eq!(lines.next(), Some("5,0.5500,0.0000,0.1000,0.2000,0.3000,0.4000"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn off_cadence_logs_are_rejected() {
        let log = probe_like_log(&[2, 4, 6], 6);
        let err = assessment_from_log("vcp", &log).unwrap_err();
        assert!(err.to_string().contains("cadence"), "got: {err}");

        let none_scored = probe_like_log(&[], 6);
        assert!(assessment_from_log("vcp", &none_scored).is_err());
    }

    #[test]
    fn retrieval_csv_lists_ranked_hits() {
        let results = vec![(
            "query_a".to_string(),
            vec![
                RetrievalHit { video_id: "g1".into(), class_label: Some(3), similarity: 0.75 },
                RetrievalHit { video_id: "g2".into(), class_label: None, similarity: 0.25 },
            ],
        )];
        let csv = retrieval_csv(&results);
        assert_eq!(
            csv,
            "query_id,rank,gallery_id,label,similarity\n\
             query_a,1,g1,3,0.750000\n\
             query_a,2,g2,,0.250000\n"
        );
    }
}
