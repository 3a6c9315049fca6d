//! Dataset manifests (JSON lines) and whole-dataset loading.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_video, VideoError, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub file_path: String,
    pub class_label: Option<u32>,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Rejects duplicate video ids.
    pub fn validate(&self) -> Result<(), VideoError> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.video_id.as_str()).collect();
        ids.sort_unstable();
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(VideoError::DuplicateId { id: pair[0].to_string() });
            }
        }
        Ok(())
    }
}

/// Writes one JSON object per line.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), VideoError> {
    let io_err = |source| VideoError::Io { path: path.to_path_buf(), source };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for entry in &manifest.entries {
        let line = serde_json::to_string(entry).expect("manifest entries serialize");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Reads a JSON-lines manifest, reporting the offending line on parse errors.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, VideoError> {
    let file = fs::File::open(path).map_err(|source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| VideoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| VideoError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        entries.push(entry);
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

/// A manifest plus every video loaded into memory, extents verified.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    videos: Vec<VideoTensor>,
    root: PathBuf,
}

impl Dataset {
    /// Loads every video referenced by the manifest at `manifest_path`.
    /// Relative file paths resolve against the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self, VideoError> {
        let manifest = read_manifest(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: DatasetManifest, root: PathBuf) -> Result<Self, VideoError> {
        manifest.validate()?;
        let mut videos = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let path = root.join(&entry.file_path);
            let mut video = read_video(&path)?;
            let checks = [
                ("frame_count", entry.frame_count, video.frame_count()),
                ("height", entry.height, video.height()),
                ("width", entry.width, video.width()),
            ];
            for (field, expected, actual) in checks {
                if expected != actual {
                    return Err(VideoError::EntryMismatch {
                        id: entry.video_id.clone(),
                        field,
                        expected,
                        actual,
                    });
                }
            }
            video.set_identity(entry.video_id.clone(), entry.class_label);
            videos.push(video);
        }
        Ok(Self { manifest, videos, root })
    }

    /// In-memory constructor for tests and synthetic pipelines. The
    /// manifest is authoritative: each video is re-stamped with its
    /// entry's id and label.
    pub fn from_videos(
        manifest: DatasetManifest,
        mut videos: Vec<VideoTensor>,
    ) -> Result<Self, VideoError> {
        manifest.validate()?;
        if manifest.entries.len() != videos.len() {
            return Err(VideoError::InvalidDimensions {
                reason: format!(
                    "manifest has {} entries but {} videos supplied",
                    manifest.entries.len(),
                    videos.len()
                ),
            });
        }
        for (entry, video) in manifest.entries.iter().zip(&mut videos) {
            video.set_identity(entry.video_id.clone(), entry.class_label);
        }
        Ok(Self { manifest, videos, root: PathBuf::from(".") })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, idx: usize) -> &VideoTensor {
        &self.videos[idx]
    }

    pub fn entry(&self, idx: usize) -> &ManifestEntry {
        &self.manifest.entries[idx]
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.split_indices(Split::Test)
    }

    /// Highest class label plus one, or zero when nothing is labeled.
    pub fn num_classes(&self) -> usize {
        self.manifest
            .entries
            .iter()
            .filter_map(|e| e.class_label)
            .map(|l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::write_video;
    use tempfile::tempdir;

    fn make_entry(id: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            video_id: id.to_string(),
            file_path: format!("{id}.vcpv"),
            class_label: Some(1),
            frame_count: 2,
            height: 2,
            width: 2,
            split,
        }
    }

    fn make_video(id: &str) -> VideoTensor {
        VideoTensor::new(id, None, 2, 2, 2, 1, vec![5u8; 8]).unwrap()
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let manifest = DatasetManifest {
            entries: vec![make_entry("a", Split::Train), make_entry("b", Split::Test)],
        };
        write_manifest(&path, &manifest).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let manifest = DatasetManifest {
            entries: vec![make_entry("a", Split::Train), make_entry("a", Split::Test)],
        };
        assert!(matches!(manifest.validate().unwrap_err(), VideoError::DuplicateId { .. }));
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let good = serde_json::to_string(&make_entry("a", Split::Train)).unwrap();
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_manifest(&path).unwrap_err() {
            VideoError::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_load_attaches_identity_and_checks_extents() {
        let dir = tempdir().unwrap();
        let manifest = DatasetManifest {
            entries: vec![make_entry("a", Split::Train), make_entry("b", Split::Test)],
        };
        for id in ["a", "b"] {
            write_video(&dir.path().join(format!("{id}.vcpv")), &make_video(id)).unwrap();
        }
        let manifest_path = dir.path().join("manifest.jsonl");
        write_manifest(&manifest_path, &manifest).unwrap();
        let ds = Dataset::load(&manifest_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.video(0).video_id(), "a");
        assert_eq!(ds.video(0).class_label(), Some(1));
        assert_eq!(ds.train_indices(), vec![0]);
        assert_eq!(ds.test_indices(), vec![1]);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn extent_mismatch_names_field() {
        let dir = tempdir().unwrap();
        let mut entry = make_entry("a", Split::Train);
        entry.frame_count = 3; // file has 2
        let manifest = DatasetManifest { entries: vec![entry] };
        write_video(&dir.path().join("a.vcpv"), &make_video("a")).unwrap();
        let manifest_path = dir.path().join("manifest.jsonl");
        write_manifest(&manifest_path, &manifest).unwrap();
        match Dataset::load(&manifest_path).unwrap_err() {
            VideoError::EntryMismatch { field, expected, actual, .. } => {
                assert_eq!((field, expected, actual), ("frame_count", 3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
