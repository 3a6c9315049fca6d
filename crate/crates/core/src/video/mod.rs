//! Video tensors, clips, on-disk formats and dataset loading.
//!
//! Videos are dense T×H×W×C u8 volumes, channel-last both in memory and on
//! disk. Clips are fixed-length frame windows in the same layout; they are
//! converted to channel-first f32 tensors only at the compute boundary.

mod manifest;
mod synthetic;

pub use manifest::{read_manifest, write_manifest, Dataset, DatasetManifest, ManifestEntry, Split};
pub use synthetic::{
    default_motion_profiles, generate_synthetic, synthesize_video, MotionProfile, SyntheticSpec,
};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const VIDEO_MAGIC: &[u8; 4] = b"VCPV";
pub const VIDEO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("{path} truncated at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        path: PathBuf,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("invalid video dimensions: {reason}")]
    InvalidDimensions { reason: String },
    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate video_id {id:?} in manifest")]
    DuplicateId { id: String },
    #[error("video {id:?}: manifest {field} is {expected}, file has {actual}")]
    EntryMismatch {
        id: String,
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("clip [{start}, {start}+{len}) out of range for video {video_id:?} with {frames} frames")]
    ClipBounds {
        video_id: String,
        start: usize,
        len: usize,
        frames: usize,
    },
    #[error("synthetic spec invalid: {reason}")]
    SpecValidation { reason: String },
}

fn check_extents(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<usize, VideoError> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(VideoError::InvalidDimensions {
            reason: format!("extents must be positive, got {frames}x{height}x{width}"),
        });
    }
    if channels != 1 && channels != 3 {
        return Err(VideoError::InvalidDimensions {
            reason: format!("channels must be 1 or 3, got {channels}"),
        });
    }
    frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| VideoError::InvalidDimensions {
            reason: format!("volume {frames}x{height}x{width}x{channels} overflows"),
        })
}

/// Dense T×H×W×C u8 video, channel-last row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoTensor {
    video_id: String,
    class_label: Option<u32>,
    frame_count: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl VideoTensor {
    pub fn new(
        video_id: impl Into<String>,
        class_label: Option<u32>,
        frame_count: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, VideoError> {
        let volume = check_extents(frame_count, height, width, channels)?;
        if data.len() != volume {
            return Err(VideoError::InvalidDimensions {
                reason: format!("buffer length {} does not match volume {volume}", data.len()),
            });
        }
        Ok(Self {
            video_id: video_id.into(),
            class_label,
            frame_count,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn class_label(&self) -> Option<u32> {
        self.class_label
    }

    pub fn set_identity(&mut self, video_id: impl Into<String>, class_label: Option<u32>) {
        self.video_id = video_id.into();
        self.class_label = class_label;
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// One frame as an H·W·C slice.
    pub fn frame(&self, t: usize) -> &[u8] {
        let stride = self.height * self.width * self.channels;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> u8 {
        let idx = ((t * self.height + y) * self.width + x) * self.channels + c;
        self.data[idx]
    }

    /// Copies frames [start, start+len) into a clip.
    pub fn extract_clip(&self, start: usize, len: usize) -> Result<Clip, VideoError> {
        if len == 0 || start + len > self.frame_count {
            return Err(VideoError::ClipBounds {
                video_id: self.video_id.clone(),
                start,
                len,
                frames: self.frame_count,
            });
        }
        let stride = self.height * self.width * self.channels;
        let data = self.data[start * stride..(start + len) * stride].to_vec();
        Clip::new(len, self.height, self.width, self.channels, data)
    }
}

/// Fixed-length frame window, same u8 channel-last layout as VideoTensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Clip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, VideoError> {
        let volume = check_extents(frames, height, width, channels)?;
        if data.len() != volume {
            return Err(VideoError::InvalidDimensions {
                reason: format!("buffer length {} does not match volume {volume}", data.len()),
            });
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> u8 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// One frame as an H·W·C slice.
    pub fn frame(&self, t: usize) -> &[u8] {
        let stride = self.height * self.width * self.channels;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn same_extents(&self, other: &Clip) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }
}

/// Converts a u8 clip into the compute layout: channel-first [C, T, H, W]
/// f32 scaled to [-1, 1] via (p - 127.5) / 127.5. Zero-centering matters:
/// an all-positive encoding leaves every conv channel dominated by the
/// image mean, which stalls training.
pub fn normalize_clip(clip: &Clip) -> Tensor<f32> {
    let (t_n, h, w, c_n) = (clip.frames, clip.height, clip.width, clip.channels);
    let mut data = vec![0.0f32; c_n * t_n * h * w];
    let src = clip.data();
    let scale = 1.0 / 127.5;
    let plane = h * w;
    for c in 0..c_n {
        for t in 0..t_n {
            let dst_base = (c * t_n + t) * plane;
            let src_base = t * plane * c_n;
            for p in 0..plane {
                data[dst_base + p] = (src[src_base + p * c_n + c] as f32 - 127.5) * scale;
            }
        }
    }
    Tensor::new(&[c_n, t_n, h, w], data).expect("clip extents are positive")
}

/// Stacks clips into a [B, C, T, H, W] batch; all clips must share extents.
pub fn clips_to_batch(clips: &[&Clip]) -> Result<Tensor<f32>, VideoError> {
    let first = clips.first().ok_or_else(|| VideoError::InvalidDimensions {
        reason: "empty clip batch".into(),
    })?;
    for clip in clips {
        if !clip.same_extents(first) {
            return Err(VideoError::InvalidDimensions {
                reason: format!(
                    "clip extents {}x{}x{}x{} differ from batch extents {}x{}x{}x{}",
                    clip.frames,
                    clip.height,
                    clip.width,
                    clip.channels,
                    first.frames,
                    first.height,
                    first.width,
                    first.channels
                ),
            });
        }
    }
    let per = first.channels * first.frames * first.height * first.width;
    let mut data = Vec::with_capacity(clips.len() * per);
    for clip in clips {
        data.extend_from_slice(normalize_clip(clip).data());
    }
    Tensor::new(
        &[clips.len(), first.channels, first.frames, first.height, first.width],
        data,
    )
    .map_err(|e| VideoError::InvalidDimensions { reason: e.to_string() })
}

const HEADER_LEN: usize = 4 + 4 + 4 * 4;

/// Writes a video file: magic, version u32 LE, T/H/W/C u32 LE, payload.
pub fn write_video(path: &Path, video: &VideoTensor) -> Result<(), VideoError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + video.data.len());
    bytes.extend_from_slice(VIDEO_MAGIC);
    bytes.extend_from_slice(&VIDEO_FORMAT_VERSION.to_le_bytes());
    for extent in [video.frame_count, video.height, video.width, video.channels] {
        let v = u32::try_from(extent).map_err(|_| VideoError::InvalidDimensions {
            reason: format!("extent {extent} exceeds u32"),
        })?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&video.data);
    fs::write(path, bytes).map_err(|source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, VideoError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(VideoError::Truncated {
            path: path.to_path_buf(),
            offset: offset as u64,
            needed: (end - bytes.len()) as u64,
            available: bytes.len().saturating_sub(offset) as u64,
        });
    }
    Ok(u32::from_le_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Reads a video file written by [`write_video`]. The returned tensor takes
/// its video_id from the file stem; dataset loading overrides it from the
/// manifest along with the class label.
pub fn read_video(path: &Path) -> Result<VideoTensor, VideoError> {
    let bytes = fs::read(path).map_err(|source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 4 || &bytes[0..4] != VIDEO_MAGIC {
        return Err(VideoError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "bad magic, expected VCPV".into(),
        });
    }
    let version = read_u32(&bytes, 4, path)?;
    if version != VIDEO_FORMAT_VERSION {
        return Err(VideoError::Format {
            path: path.to_path_buf(),
            offset: 4,
            reason: format!("unsupported version {version}, expected {VIDEO_FORMAT_VERSION}"),
        });
    }
    let frames = read_u32(&bytes, 8, path)? as usize;
    let height = read_u32(&bytes, 12, path)? as usize;
    let width = read_u32(&bytes, 16, path)? as usize;
    let channels = read_u32(&bytes, 20, path)? as usize;
    let volume = check_extents(frames, height, width, channels).map_err(|e| VideoError::Format {
        path: path.to_path_buf(),
        offset: 8,
        reason: e.to_string(),
    })?;
    let available = bytes.len() - HEADER_LEN;
    if available < volume {
        return Err(VideoError::Truncated {
            path: path.to_path_buf(),
            offset: HEADER_LEN as u64,
            needed: (volume - available) as u64,
            available: available as u64,
        });
    }
    if available > volume {
        return Err(VideoError::Format {
            path: path.to_path_buf(),
            offset: (HEADER_LEN + volume) as u64,
            reason: format!("{} trailing bytes after payload", available - volume),
        });
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoTensor::new(
        video_id,
        None,
        frames,
        height,
        width,
        channels,
        bytes[HEADER_LEN..].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_video() -> VideoTensor {
        let (t, h, w, c) = (3, 2, 4, 3);
        let data: Vec<u8> = (0..t * h * w * c).map(|i| (i * 7 % 256) as u8).collect();
        VideoTensor::new("vid0", Some(2), t, h, w, c, data).unwrap()
    }

    #[test]
    fn roundtrip_preserves_buffers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vid0.vcpv");
        let video = sample_video();
        write_video(&path, &video).unwrap();
        let back = read_video(&path).unwrap();
        assert_eq!(back.data(), video.data());
        assert_eq!(back.frame_count(), video.frame_count());
        assert_eq!(back.video_id(), "vid0");
        // Second write of the read-back video is byte-identical on disk.
        let path2 = dir.path().join("copy.vcpv");
        write_video(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.vcpv");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_video(&path).unwrap_err() {
            VideoError::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_missing_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.vcpv");
        let video = sample_video();
        write_video(&path, &video).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        match read_video(&path).unwrap_err() {
            VideoError::Truncated { needed, .. } => assert_eq!(needed, 10),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trail.vcpv");
        let video = sample_video();
        write_video(&path, &video).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_video(&path).unwrap_err(), VideoError::Format { .. }));
    }

    #[test]
    fn unsupported_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ver.vcpv");
        let video = sample_video();
        write_video(&path, &video).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        match read_video(&path).unwrap_err() {
            VideoError::Format { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn normalize_maps_range_and_layout() {
        // 1 frame, 1x2, 3 channels: pixel 0 = (0,128,255), pixel 1 = (10,20,30).
        let clip = Clip::new(1, 1, 2, 3, vec![0, 128, 255, 10, 20, 30]).unwrap();
        let t = normalize_clip(&clip);
        assert_eq!(t.shape(), &[3, 1, 1, 2]);
        let d = t.data();
        // Channel-first: d = [p0c0, p1c0, p0c1, p1c1, p0c2, p1c2], each
        // mapped through (p - 127.5) / 127.5.
        assert_eq!(d[0], -1.0);
        assert!((d[1] - (10.0 - 127.5) / 127.5).abs() < 1e-7);
        assert!((d[2] - 0.5 / 127.5).abs() < 1e-7);
        assert!((d[5] - (30.0 - 127.5) / 127.5).abs() < 1e-7);
        assert_eq!(d[4], 1.0);
    }

    #[test]
    fn extract_clip_bounds_checked() {
        let video = sample_video();
        let clip = video.extract_clip(1, 2).unwrap();
        assert_eq!(clip.frames(), 2);
        assert_eq!(clip.frame(0), video.frame(1));
        assert!(matches!(
            video.extract_clip(2, 2).unwrap_err(),
            VideoError::ClipBounds { .. }
        ));
    }

    #[test]
    fn batch_requires_uniform_extents() {
        let a = Clip::new(1, 2, 2, 1, vec![0; 4]).unwrap();
        let b = Clip::new(1, 2, 3, 1, vec![0; 6]).unwrap();
        assert!(clips_to_batch(&[&a, &b]).is_err());
        let batch = clips_to_batch(&[&a, &a]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 1, 2, 2]);
    }
}
