//! Item assembly: span sampling, clip deletion and option creation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{apply_resize_crop, resize_and_crop};
use super::{
    ClozeConfig, ClozeError, ClozeItem, IndexPair, OperationKind, OperationVariant, Provenance,
};
use crate::rng::derive_rng;
use crate::video::{Clip, VideoTensor};

/// Samples the item span uniformly over its valid range and extracts the
/// m raw clips, spaced k+l frames apart. Returns (span start, clips).
pub fn sample_cloze_span(
    video: &VideoTensor,
    config: &ClozeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, Vec<Clip>), ClozeError> {
    let span = config.span();
    if video.frame_count() < span {
        return Err(ClozeError::SpanTooShort {
            video_id: video.video_id().to_string(),
            required: span,
            actual: video.frame_count(),
        });
    }
    let start = rng.gen_range(0..=video.frame_count() - span);
    let stride = config.clip_len + config.interval;
    let clips = (0..config.clips_per_item)
        .map(|i| video.extract_clip(start + i * stride, config.clip_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((start, clips))
}

/// Withholds one clip uniformly at random.
/// Returns (context clips in order, withheld clip, blank position).
pub fn delete_clip(mut clips: Vec<Clip>, rng: &mut ChaCha8Rng) -> (Vec<Clip>, Clip, usize) {
    let position = rng.gen_range(0..clips.len());
    let withheld = clips.remove(position);
    (clips, withheld, position)
}

/// Produces the filled clip for one operation class, drawing the variant
/// detail uniformly within the class. T_R extracts a raw remote clip and
/// pushes it through the item's shared resize/crop window so its extents
/// match the withheld clip; the other classes operate on the withheld clip
/// directly.
pub fn create_option(
    video: &VideoTensor,
    span_start: usize,
    crop_window: (usize, usize),
    withheld: &Clip,
    kind: OperationKind,
    config: &ClozeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Clip, OperationVariant), ClozeError> {
    match kind {
        OperationKind::Original => Ok((withheld.clone(), OperationVariant::Original)),
        OperationKind::SpatialRotation => {
            let angle = config.rotation_angles[rng.gen_range(0..config.rotation_angles.len())];
            let clip = super::ops::op_spatial_rotation(withheld, angle)?;
            Ok((clip, OperationVariant::SpatialRotation { angle }))
        }
        OperationKind::SpatialPermutation => {
            let tiles = IndexPair::ALL[rng.gen_range(0..IndexPair::ALL.len())];
            let clip = super::ops::op_spatial_permutation(withheld, tiles)?;
            Ok((clip, OperationVariant::SpatialPermutation { tiles }))
        }
        OperationKind::TemporalRemote => {
            let (raw, offset) = super::ops::op_temporal_remote(video, span_start, config, rng)?;
            let clip = apply_resize_crop(&raw, config, crop_window)?;
            Ok((clip, OperationVariant::TemporalRemote { offset }))
        }
        OperationKind::TemporalAdjacent => {
            let subclips = IndexPair::ALL[rng.gen_range(0..IndexPair::ALL.len())];
            let clip = super::ops::op_temporal_adjacent(withheld, subclips)?;
            Ok((clip, OperationVariant::TemporalAdjacent { subclips }))
        }
    }
}

/// Runs the full pipeline for one labeled item, a pure function of
/// (video bytes, config, seed): sample span, resize and crop under one
/// shared window, withhold a clip, draw one of the five operation kinds
/// uniformly, create the option.
///
/// When the remote kind is drawn but the span leaves no slot at the
/// required distance, another kind is drawn uniformly from the remaining
/// four and the fallback is recorded in provenance.
pub fn assemble_item(
    video: &VideoTensor,
    config: &ClozeConfig,
    seed: u64,
) -> Result<ClozeItem, ClozeError> {
    let mut rng = derive_rng(seed, &[]);
    let (span_start, raw_clips) = sample_cloze_span(video, config, &mut rng)?;
    let (clips, window) = resize_and_crop(&raw_clips, config, &mut rng)?;
    let (context_clips, withheld, blank_position) = delete_clip(clips, &mut rng);
    let kind = OperationKind::ALL[rng.gen_range(0..OperationKind::COUNT)];
    let (filled_clip, label, remote_fallback) =
        match create_option(video, span_start, window, &withheld, kind, config, &mut rng) {
            Ok((clip, variant)) => (clip, variant, false),
            Err(ClozeError::RemoteInfeasible { .. }) if kind == OperationKind::TemporalRemote => {
                log::debug!(
                    "video {:?}: no remote slot for span at {span_start}, resampling kind",
                    video.video_id()
                );
                let rest: Vec<OperationKind> = OperationKind::ALL
                    .into_iter()
                    .filter(|k| *k != OperationKind::TemporalRemote)
                    .collect();
                let fallback = rest[rng.gen_range(0..rest.len())];
                let (clip, variant) =
                    create_option(video, span_start, window, &withheld, fallback, config, &mut rng)?;
                (clip, variant, true)
            }
            Err(other) => return Err(other),
        };
    Ok(ClozeItem {
        context_clips,
        blank_position,
        filled_clip,
        label,
        provenance: Provenance {
            video_id: video.video_id().to_string(),
            start_frame: span_start,
            crop_top: window.0,
            crop_left: window.1,
            rng_seed: seed,
            remote_fallback,
        },
    })
}
