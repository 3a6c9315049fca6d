//! Cloze item construction: blank generation, option creation, assembly.
//!
//! An item samples m equal-length clips spaced l frames apart from one
//! video, withholds one clip, and fills the blank with an operated option.
//! The five-way label space is the operation that produced the filler:
//! original (O), spatial rotation (S_R), spatial permutation (S_P),
//! temporal remote substitution (T_R), temporal adjacent shuffle (T_A).

mod assemble;
mod ops;

pub use assemble::{assemble_item, create_option, delete_clip, sample_cloze_span};
pub use ops::{
    apply_resize_crop, feasible_remote_starts, op_spatial_permutation, op_spatial_rotation,
    op_temporal_adjacent, op_temporal_remote, resize_and_crop, resize_clip, sample_crop_window,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video::{Clip, VideoError};

/// Spatial permutation operates on a fixed 2x2 tile grid.
pub const TILE_GRID: (usize, usize) = (2, 2);
/// Temporal adjacent shuffle splits a clip into this many sub-clips.
pub const SUBCLIPS: usize = 4;

#[derive(Debug, Error)]
pub enum ClozeError {
    #[error("invalid cloze config: {reason}")]
    InvalidConfig { reason: String },
    #[error("video {video_id:?} has {actual} frames, cloze span needs {required}")]
    SpanTooShort {
        video_id: String,
        required: usize,
        actual: usize,
    },
    #[error(
        "no feasible remote clip for video {video_id:?}: span [{span_start}, {span_end}) with \
         distance {remote_dist} leaves no {clip_len}-frame slot"
    )]
    RemoteInfeasible {
        video_id: String,
        span_start: usize,
        span_end: usize,
        remote_dist: usize,
        clip_len: usize,
    },
    #[error("spatial rotation needs a square clip, got {height}x{width}")]
    NonSquare { height: usize, width: usize },
    #[error("spatial permutation needs even extents, got {height}x{width}")]
    OddExtents { height: usize, width: usize },
    #[error("temporal shuffle needs clip length divisible by {SUBCLIPS}, got {len}")]
    BadClipLength { len: usize },
    #[error("crop {crop:?} exceeds frame extents {extents:?} at offset {offset:?}")]
    CropBounds {
        crop: (usize, usize),
        extents: (usize, usize),
        offset: (usize, usize),
    },
    #[error(transparent)]
    Video(#[from] VideoError),
}

/// Clip sampling, crop geometry and operation-space configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClozeConfig {
    /// Frames per clip (k).
    pub clip_len: usize,
    /// Gap frames between consecutive clips (l).
    pub interval: usize,
    /// Clips per cloze item (m).
    pub clips_per_item: usize,
    /// Frames are bilinearly resized to (height, width) before cropping.
    pub resize: (usize, usize),
    /// Crop extents (height, width); square so rotations preserve extents.
    pub crop: (usize, usize),
    /// Minimum frames between a remote clip and the span (d).
    pub remote_dist: usize,
    /// Rotation angles available to S_R.
    pub rotation_angles: Vec<RotationAngle>,
}

impl Default for ClozeConfig {
    /// Paper-scale constants: three 16-frame clips every 8 frames, resize
    /// 128x171, crop 112x112, remote distance 16.
    fn default() -> Self {
        Self {
            clip_len: 16,
            interval: 8,
            clips_per_item: 3,
            resize: (128, 171),
            crop: (112, 112),
            remote_dist: 16,
            rotation_angles: RotationAngle::ALL.to_vec(),
        }
    }
}

impl ClozeConfig {
    /// Desk-scale constants: three 8-frame clips every 4 frames, resize
    /// 17x19, crop 16x16, remote distance 8 (span 32 inside 64-frame videos).
    /// The resize extents sit just above the crop so the jittered window
    /// keeps almost the whole frame: a 16x16 crop of a 17x19 frame always
    /// overlaps a moving object, which keeps every operation class learnable.
    pub fn desk_default() -> Self {
        Self {
            clip_len: 8,
            interval: 4,
            clips_per_item: 3,
            resize: (17, 19),
            crop: (16, 16),
            remote_dist: 8,
            rotation_angles: RotationAngle::ALL.to_vec(),
        }
    }

    /// Total frames an item covers: m*k + (m-1)*l.
    pub fn span(&self) -> usize {
        self.clips_per_item * self.clip_len + (self.clips_per_item - 1) * self.interval
    }

    pub fn validate(&self) -> Result<(), ClozeError> {
        let fail = |reason: String| Err(ClozeError::InvalidConfig { reason });
        if self.clip_len == 0 || self.clip_len % SUBCLIPS != 0 {
            return fail(format!(
                "clip_len {} must be a positive multiple of {SUBCLIPS}",
                self.clip_len
            ));
        }
        if self.clips_per_item < 2 {
            return fail(format!("clips_per_item {} must be at least 2", self.clips_per_item));
        }
        if self.crop.0 != self.crop.1 {
            return fail(format!("crop {:?} must be square", self.crop));
        }
        if self.crop.0 == 0 {
            return fail("crop extents must be positive".into());
        }
        if self.crop.0 > self.resize.0 || self.crop.1 > self.resize.1 {
            return fail(format!("crop {:?} exceeds resize {:?}", self.crop, self.resize));
        }
        if self.rotation_angles.is_empty() {
            return fail("rotation_angles must not be empty".into());
        }
        let mut seen = [false; 3];
        for angle in &self.rotation_angles {
            let i = angle.variant_index();
            if seen[i] {
                return fail(format!("duplicate rotation angle {}", angle.degrees()));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum RotationAngle {
    Deg90,
    Deg180,
    Deg270,
}

impl RotationAngle {
    pub const ALL: [RotationAngle; 3] =
        [RotationAngle::Deg90, RotationAngle::Deg180, RotationAngle::Deg270];

    pub fn degrees(self) -> u16 {
        match self {
            RotationAngle::Deg90 => 90,
            RotationAngle::Deg180 => 180,
            RotationAngle::Deg270 => 270,
        }
    }

    pub fn variant_index(self) -> usize {
        match self {
            RotationAngle::Deg90 => 0,
            RotationAngle::Deg180 => 1,
            RotationAngle::Deg270 => 2,
        }
    }
}

impl TryFrom<u16> for RotationAngle {
    type Error = String;
    fn try_from(v: u16) -> Result<Self, Self::Error> {
        match v {
            90 => Ok(RotationAngle::Deg90),
            180 => Ok(RotationAngle::Deg180),
            270 => Ok(RotationAngle::Deg270),
            other => Err(format!("rotation angle must be 90, 180 or 270, got {other}")),
        }
    }
}

impl From<RotationAngle> for u16 {
    fn from(a: RotationAngle) -> u16 {
        a.degrees()
    }
}

/// The five-way operation label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperationKind {
    Original,
    SpatialRotation,
    SpatialPermutation,
    TemporalRemote,
    TemporalAdjacent,
}

impl OperationKind {
    pub const ALL: [OperationKind; 5] = [
        OperationKind::Original,
        OperationKind::SpatialRotation,
        OperationKind::SpatialPermutation,
        OperationKind::TemporalRemote,
        OperationKind::TemporalAdjacent,
    ];
    pub const COUNT: usize = 5;

    pub fn class_index(self) -> usize {
        match self {
            OperationKind::Original => 0,
            OperationKind::SpatialRotation => 1,
            OperationKind::SpatialPermutation => 2,
            OperationKind::TemporalRemote => 3,
            OperationKind::TemporalAdjacent => 4,
        }
    }

    pub fn short_label(self) -> &'static str {
        match self {
            OperationKind::Original => "O",
            OperationKind::SpatialRotation => "SR",
            OperationKind::SpatialPermutation => "SP",
            OperationKind::TemporalRemote => "TR",
            OperationKind::TemporalAdjacent => "TA",
        }
    }

    /// Number of within-class variants.
    pub fn variant_count(self, config: &ClozeConfig) -> usize {
        match self {
            OperationKind::Original => 1,
            OperationKind::SpatialRotation => config.rotation_angles.len(),
            OperationKind::SpatialPermutation => IndexPair::ALL.len(),
            OperationKind::TemporalRemote => 1, // offset is continuous, not enumerated
            OperationKind::TemporalAdjacent => IndexPair::ALL.len(),
        }
    }
}

/// Unordered pair {i, j} with 0 <= i < j <= 3, indexing tiles or sub-clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexPair {
    first: u8,
    second: u8,
}

impl IndexPair {
    /// All C(4,2) = 6 pairs in lexicographic order.
    pub const ALL: [IndexPair; 6] = [
        IndexPair { first: 0, second: 1 },
        IndexPair { first: 0, second: 2 },
        IndexPair { first: 0, second: 3 },
        IndexPair { first: 1, second: 2 },
        IndexPair { first: 1, second: 3 },
        IndexPair { first: 2, second: 3 },
    ];

    pub fn new(first: usize, second: usize) -> Result<Self, ClozeError> {
        if first >= second || second > 3 {
            return Err(ClozeError::InvalidConfig {
                reason: format!("index pair ({first}, {second}) must satisfy 0 <= i < j <= 3"),
            });
        }
        Ok(Self { first: first as u8, second: second as u8 })
    }

    pub fn first(self) -> usize {
        self.first as usize
    }

    pub fn second(self) -> usize {
        self.second as usize
    }

    /// Position in [`IndexPair::ALL`].
    pub fn variant_index(self) -> usize {
        IndexPair::ALL.iter().position(|p| *p == self).expect("pair is canonical")
    }
}

/// Operation class plus its within-class detail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OperationVariant {
    Original,
    SpatialRotation { angle: RotationAngle },
    SpatialPermutation { tiles: IndexPair },
    /// Offset of the substitute clip's start relative to the span start.
    TemporalRemote { offset: i64 },
    TemporalAdjacent { subclips: IndexPair },
}

impl OperationVariant {
    pub fn kind(&self) -> OperationKind {
        match self {
            OperationVariant::Original => OperationKind::Original,
            OperationVariant::SpatialRotation { .. } => OperationKind::SpatialRotation,
            OperationVariant::SpatialPermutation { .. } => OperationKind::SpatialPermutation,
            OperationVariant::TemporalRemote { .. } => OperationKind::TemporalRemote,
            OperationVariant::TemporalAdjacent { .. } => OperationKind::TemporalAdjacent,
        }
    }

    pub fn class_index(&self) -> usize {
        self.kind().class_index()
    }
}

/// Where an item came from; serializes into logs for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub video_id: String,
    pub start_frame: usize,
    pub crop_top: usize,
    pub crop_left: usize,
    /// Seed the item's draws were derived from; replaying it reproduces
    /// the item bitwise.
    pub rng_seed: u64,
    /// True when T_R was drawn but infeasible and another kind was used.
    pub remote_fallback: bool,
}

/// One labeled training example: m-1 context clips, the blank position,
/// and the operated filler clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClozeItem {
    pub context_clips: Vec<Clip>,
    pub blank_position: usize,
    pub filled_clip: Clip,
    pub label: OperationVariant,
    pub provenance: Provenance,
}

impl ClozeItem {
    /// Clips in raw-video order with the filler at the blank position.
    pub fn clips_in_order(&self) -> Vec<&Clip> {
        let mut out: Vec<&Clip> = Vec::with_capacity(self.context_clips.len() + 1);
        let mut ctx = self.context_clips.iter();
        for pos in 0..=self.context_clips.len() {
            if pos == self.blank_position {
                out.push(&self.filled_clip);
            } else {
                out.push(ctx.next().expect("context count matches positions"));
            }
        }
        out
    }
}
