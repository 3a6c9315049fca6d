//! Deterministic synthetic video corpus.
//!
//! Classes differ only by object motion (velocity of a small square moving
//! over a static noise background with toroidal wrap), never by appearance:
//! the background texture distribution, the object shape and color, and all
//! luminance ramps are shared across classes. Three static cues make the
//! videos learnable by a small 3D CNN without giving away class identity:
//!
//! - a vertical (±24) and horizontal (±12) luminance ramp over the image
//!   makes orientation and absolute position readable from single frames,
//!   so spatial rotations and tile permutations are detectable per clip;
//! - a temporal luminance ramp (±48 across the video) makes a clip's
//!   absolute time position readable, so a remote substitute clip sits at
//!   the wrong brightness level relative to its neighbours, and a shuffled
//!   clip's brightness drift jumps at the shuffle boundaries (the static
//!   background cancels in frame differences, so the drift anomaly is a
//!   noise-free temporal cue that works even when the object's own
//!   trajectory is ambiguous);
//! - integer positions, velocities and ramps keep rendering exact, which
//!   gives the generator an exact time-reversal symmetry used as a
//!   self-test.
//!
//! All sums stay inside [20, 237], so no pixel ever clips.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, DatasetManifest, ManifestEntry, Split};
use super::{write_video, VideoError, VideoTensor};
use crate::rng::{derive_rng, stream};

const NOISE_LO: i32 = 104;
const NOISE_HI: i32 = 154; // exclusive
const V_RAMP: i32 = 24;
const H_RAMP: i32 = 12;
const T_RAMP: i32 = 48;
const OBJECT_COLOR_RGB: [u8; 3] = [250, 80, 80];
const OBJECT_COLOR_GRAY: [u8; 1] = [250];

/// Per-class motion: integer pixels per frame with toroidal wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub velocity_y: i32,
    pub velocity_x: i32,
}

impl MotionProfile {
    pub fn new(velocity_y: i32, velocity_x: i32) -> Self {
        Self { velocity_y, velocity_x }
    }
}

/// Built-in distinct velocities for up to 10 classes.
pub fn default_motion_profiles(num_classes: usize) -> Result<Vec<MotionProfile>, VideoError> {
    const TABLE: [(i32, i32); 10] = [
        (3, 0),
        (-3, 0),
        (0, 3),
        (0, -3),
        (3, 3),
        (-3, -3),
        (3, -3),
        (-3, 3),
        (1, 0),
        (-1, 0),
    ];
    if num_classes > TABLE.len() {
        return Err(VideoError::SpecValidation {
            reason: format!(
                "default motion profiles cover up to {} classes, got {num_classes}; \
                 provide explicit motion_profiles",
                TABLE.len()
            ),
        });
    }
    Ok(TABLE[..num_classes]
        .iter()
        .map(|&(vy, vx)| MotionProfile::new(vy, vx))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    /// Last `test_per_class` videos of each class form the test split.
    pub test_per_class: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub object_size: usize,
    pub seed: u64,
    /// Empty means: use `default_motion_profiles(num_classes)`.
    pub motion_profiles: Vec<MotionProfile>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl SyntheticSpec {
    /// 10 classes x 50 videos of 64 frames at 24x32x3, 40/10 train/test.
    pub fn desk_default() -> Self {
        Self {
            num_classes: 10,
            videos_per_class: 50,
            test_per_class: 10,
            frame_count: 64,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 7,
            seed: 42,
            motion_profiles: Vec::new(),
        }
    }

    /// Profiles actually used: explicit ones, or the defaults when empty.
    pub fn effective_profiles(&self) -> Result<Vec<MotionProfile>, VideoError> {
        let profiles = if self.motion_profiles.is_empty() {
            default_motion_profiles(self.num_classes)?
        } else {
            self.motion_profiles.clone()
        };
        if profiles.len() != self.num_classes {
            return Err(VideoError::SpecValidation {
                reason: format!(
                    "{} motion profiles for {} classes",
                    profiles.len(),
                    self.num_classes
                ),
            });
        }
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                if profiles[i] == profiles[j] {
                    return Err(VideoError::SpecValidation {
                        reason: format!("classes {i} and {j} share a motion profile"),
                    });
                }
            }
        }
        Ok(profiles)
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if self.height < 16 || self.width < 16 {
            return Err(VideoError::SpecValidation {
                reason: format!(
                    "spatial extents must be at least 16x16, got {}x{}",
                    self.height, self.width
                ),
            });
        }
        if self.frame_count == 0 {
            return Err(VideoError::SpecValidation { reason: "frame_count must be positive".into() });
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(VideoError::SpecValidation {
                reason: format!("channels must be 1 or 3, got {}", self.channels),
            });
        }
        if self.num_classes == 0 || self.videos_per_class == 0 {
            return Err(VideoError::SpecValidation {
                reason: "num_classes and videos_per_class must be positive".into(),
            });
        }
        if self.test_per_class >= self.videos_per_class {
            return Err(VideoError::SpecValidation {
                reason: format!(
                    "test_per_class {} must be below videos_per_class {}",
                    self.test_per_class, self.videos_per_class
                ),
            });
        }
        if self.object_size == 0 || self.object_size > self.height.min(self.width) {
            return Err(VideoError::SpecValidation {
                reason: format!(
                    "object_size {} outside [1, {}]",
                    self.object_size,
                    self.height.min(self.width)
                ),
            });
        }
        self.effective_profiles()?;
        Ok(())
    }

    fn object_color(&self) -> &'static [u8] {
        if self.channels == 3 {
            &OBJECT_COLOR_RGB
        } else {
            &OBJECT_COLOR_GRAY
        }
    }
}

/// value(i) = (i * 2a) / (n - 1) - a: integer ramp from -a to +a.
fn ramp_table(n: usize, amplitude: i32) -> Vec<i32> {
    if n <= 1 {
        return vec![0; n];
    }
    (0..n)
        .map(|i| (i as i32 * 2 * amplitude) / (n as i32 - 1) - amplitude)
        .collect()
}

/// Renders frames from explicit inputs; pure and integer-exact.
///
/// `background` is an H·W·C plane of i32 base values (noise plus spatial
/// ramps); `temporal_ramp` has one entry per frame; the object starts at
/// `start` and moves by `velocity` per frame with toroidal wrap.
fn render_frames(
    frame_count: usize,
    height: usize,
    width: usize,
    channels: usize,
    background: &[i32],
    temporal_ramp: &[i32],
    velocity: (i32, i32),
    start: (i32, i32),
    object_size: usize,
    object_color: &[u8],
) -> Vec<u8> {
    debug_assert_eq!(background.len(), height * width * channels);
    debug_assert_eq!(temporal_ramp.len(), frame_count);
    debug_assert_eq!(object_color.len(), channels);
    let plane = height * width * channels;
    let mut data = vec![0u8; frame_count * plane];
    for t in 0..frame_count {
        let shift = temporal_ramp[t];
        let frame = &mut data[t * plane..(t + 1) * plane];
        for (dst, &base) in frame.iter_mut().zip(background.iter()) {
            *dst = (base + shift).clamp(0, 255) as u8;
        }
        let oy = (start.0 + velocity.0 * t as i32).rem_euclid(height as i32) as usize;
        let ox = (start.1 + velocity.1 * t as i32).rem_euclid(width as i32) as usize;
        for dy in 0..object_size {
            let y = (oy + dy) % height;
            for dx in 0..object_size {
                let x = (ox + dx) % width;
                let base = (y * width + x) * channels;
                frame[base..base + channels].copy_from_slice(object_color);
            }
        }
    }
    data
}

/// Renders one video deterministically from (spec.seed, class, index).
///
/// Randomness order per video is fixed: start row, start column, then
/// background noise in (y, x, channel) row-major order.
pub fn synthesize_video(
    spec: &SyntheticSpec,
    class: usize,
    index: usize,
) -> Result<VideoTensor, VideoError> {
    spec.validate()?;
    let profiles = spec.effective_profiles()?;
    if class >= spec.num_classes || index >= spec.videos_per_class {
        return Err(VideoError::SpecValidation {
            reason: format!("video ({class}, {index}) outside spec grid"),
        });
    }
    let mut rng = derive_rng(spec.seed, &[stream::RENDER, class as u64, index as u64]);
    let start = (
        rng.gen_range(0..spec.height as i32),
        rng.gen_range(0..spec.width as i32),
    );
    let v_ramp = ramp_table(spec.height, V_RAMP);
    let h_ramp = ramp_table(spec.width, H_RAMP);
    let t_ramp = ramp_table(spec.frame_count, T_RAMP);
    let mut background = vec![0i32; spec.height * spec.width * spec.channels];
    let mut i = 0;
    for y in 0..spec.height {
        for x in 0..spec.width {
            for _ in 0..spec.channels {
                background[i] = rng.gen_range(NOISE_LO..NOISE_HI) + v_ramp[y] + h_ramp[x];
                i += 1;
            }
        }
    }
    let data = render_frames(
        spec.frame_count,
        spec.height,
        spec.width,
        spec.channels,
        &background,
        &t_ramp,
        (profiles[class].velocity_y, profiles[class].velocity_x),
        start,
        spec.object_size,
        spec.object_color(),
    );
    VideoTensor::new(
        video_id(class, index),
        Some(class as u32),
        spec.frame_count,
        spec.height,
        spec.width,
        spec.channels,
        data,
    )
}

pub fn video_id(class: usize, index: usize) -> String {
    format!("c{class:02}_v{index:03}")
}

/// Renders the whole corpus into `out_dir` and writes `manifest.jsonl`
/// there. Returns the manifest. Byte-identical for equal specs.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, VideoError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| VideoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class in 0..spec.num_classes {
        for index in 0..spec.videos_per_class {
            let video = synthesize_video(spec, class, index)?;
            let id = video_id(class, index);
            let file_name = format!("{id}.vcpv");
            write_video(&out_dir.join(&file_name), &video)?;
            let split = if index >= spec.videos_per_class - spec.test_per_class {
                Split::Test
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                video_id: id,
                file_path: file_name,
                class_label: Some(class as u32),
                frame_count: spec.frame_count,
                height: spec.height,
                width: spec.width,
                split,
            });
        }
    }
    let manifest = DatasetManifest { entries };
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}
