//! Labeled clip directories:
//!
//! ```text
//! labels.csv        id,split,labels   (labels: class ids joined by ';')
//! audio/<id>.wav    mono 16-bit PCM
//! video/<id>.vid    JSON header line + u8 frames, [T, H, W, C]
//! manifest.json     SHA-256 of every file above
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trimodal_core::augment::VideoClip;
use trimodal_core::dsp::Waveform;
use trimodal_core::synthdata::{gen_range, LatentSpec};
use trimodal_core::trainer::Clip;

use crate::blob;
use crate::error::{CliError, Result};
use crate::wav;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    split: Split,
    labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoHeader {
    pub shape: [usize; 4],
    pub dtype: String,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<FileDigest>,
}

/// Generation parameters stored next to synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthInfo {
    pub spec: LatentSpec,
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
}

#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub split: Split,
    pub labels: Vec<usize>,
    pub clip: Clip,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn clips(&self, split: Split) -> Vec<Clip> {
        self.split(split).map(|i| i.clip.clone()).collect()
    }

    pub fn waveforms(&self, split: Split) -> Vec<Waveform> {
        self.split(split).map(|i| i.clip.waveform.clone()).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<Vec<usize>> {
        self.split(split).map(|i| i.labels.clone()).collect()
    }

    pub fn is_multi_label(&self) -> bool {
        self.items.iter().any(|i| i.labels.len() != 1)
    }
}

impl Dataset {
    /// The clips [`write_synthetic`] would write, kept in memory at full
    /// precision.
    pub fn synthetic(spec: &LatentSpec, seed: u64, num_train: usize, num_test: usize) -> Result<Self> {
        spec.validate()?;
        let mut items = Vec::with_capacity(num_train + num_test);
        for (split, start, n) in [(Split::Train, 0, num_train), (Split::Test, num_train as u64, num_test)] {
            for s in gen_range(spec, seed, start, n)? {
                items.push(Item {
                    id: format!("clip_{:06}", s.index),
                    split,
                    labels: vec![s.label],
                    clip: Clip { waveform: s.waveform, video: Some(s.video) },
                });
            }
        }
        Ok(Self { items, num_classes: spec.num_classes })
    }
}

pub fn write_video(path: &Path, v: &VideoClip) -> Result<()> {
    let header = VideoHeader { shape: [v.frames, v.height, v.width, v.channels], dtype: "u8".into(), fps: v.fps };
    let bytes: Vec<u8> = v.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    blob::write(path, &header, &bytes)
}

pub fn read_video(path: &Path) -> Result<VideoClip> {
    let (h, bytes): (VideoHeader, Vec<u8>) = blob::read(path).map_err(|e| CliError::Data(e.to_string()))?;
    if h.dtype != "u8" {
        return Err(CliError::Data(format!("{}: dtype {}", path.display(), h.dtype)));
    }
    let [t, hh, w, c] = h.shape;
    let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(VideoClip::new(t, hh, w, c, h.fps, data)?)
}

/// Writes `num_train` then `num_test` synthetic clips drawn from disjoint
/// index ranges.
pub fn write_synthetic(dir: &Path, spec: &LatentSpec, seed: u64, num_train: usize, num_test: usize) -> Result<()> {
    spec.validate()?;
    if num_train < spec.num_classes {
        return Err(CliError::Config(format!("{num_train} training clips cannot cover {} classes", spec.num_classes)));
    }
    for sub in ["audio", "video"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| CliError::io(dir, e))?;
    }
    let mut rows = Vec::new();
    for (split, start, n) in [(Split::Train, 0, num_train), (Split::Test, num_train as u64, num_test)] {
        for s in gen_range(spec, seed, start, n)? {
            let id = format!("clip_{:06}", s.index);
            wav::write(&dir.join("audio").join(format!("{id}.wav")), &s.waveform)?;
            write_video(&dir.join("video").join(format!("{id}.vid")), &s.video)?;
            rows.push(LabelRow { id, split, labels: s.label.to_string() });
        }
    }
    let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(dir, e))?;
    let info = SynthInfo { spec: spec.clone(), seed, num_train, num_test };
    write_json(&dir.join("dataset.json"), &info)?;
    let manifest = manifest_of(dir)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

/// Digests of `labels.csv`, `dataset.json` (if present) and every file under
/// `audio/` and `video/`, sorted by path.
pub fn manifest_of(dir: &Path) -> Result<Manifest> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for top in ["labels.csv", "dataset.json"] {
        if dir.join(top).exists() {
            paths.push(PathBuf::from(top));
        }
    }
    for sub in ["audio", "video"] {
        let Ok(rd) = fs::read_dir(dir.join(sub)) else { continue };
        for e in rd {
            let e = e.map_err(|e| CliError::io(dir, e))?;
            paths.push(Path::new(sub).join(e.file_name()));
        }
    }
    paths.sort();
    let files = paths
        .into_iter()
        .map(|p| {
            let bytes = fs::read(dir.join(&p)).map_err(|e| CliError::io(&p, e))?;
            Ok(FileDigest {
                path: p.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Manifest { files })
}

/// Loads a dataset directory. Video is read only when `with_video` is set,
/// so audio-only directories work for audio-only runs.
pub fn load(dir: &Path, with_video: bool) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    let mut r = csv::Reader::from_path(&labels_path).map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display())))?;
    let mut items = Vec::new();
    let mut max_label = 0;
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display())))?;
        let labels = row
            .labels
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("clip {}: bad label list `{}`: {e}", row.id, row.labels)))?;
        max_label = labels.iter().copied().fold(max_label, usize::max);
        let waveform = wav::read(&dir.join("audio").join(format!("{}.wav", row.id)))?;
        let video = if with_video { Some(read_video(&dir.join("video").join(format!("{}.vid", row.id)))?) } else { None };
        items.push(Item { id: row.id, split: row.split, labels, clip: Clip { waveform, video } });
    }
    if items.is_empty() {
        return Err(CliError::Data(format!("{} lists no clips", labels_path.display())));
    }
    let num_classes = match fs::read(dir.join("dataset.json")) {
        Ok(bytes) => {
            let info: SynthInfo = serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("dataset.json: {e}")))?;
            info.spec.num_classes
        }
        Err(_) => max_label + 1,
    };
    Ok(Dataset { items, num_classes })
}
