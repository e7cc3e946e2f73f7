//! On-disk episode layout (all integers and floats little-endian):
//!
//! ```text
//! header   "TREP" | u32 format_version | u32 manifest_len | manifest JSON
//! record   u32 time_step
//!          f32 × 21 qpos          (observation before the step)
//!          f32 × 21 action        (joint targets applied at the step)
//!          f32 × 7 × n_objects    (x y z qw qx qy qz, before the step)
//!          u8 × w × h × n_cameras (frames in canonical camera order)
//! footer   "TEND" | u32 step_count | u32 record_width | u32 crc32
//! ```
//!
//! The CRC covers every byte before it, footer fields included. The manifest JSON omits
//! `step_count`; the footer carries it, so a writer can stream records and a
//! file without a footer is recognizably unfinished.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraSet, Intrinsics};
use crate::rig::{ChainChecksums, QPOS_LEN};
use crate::sim::TaskConfig;

pub const MAGIC: &[u8; 4] = b"TREP";
pub const FOOTER_MAGIC: &[u8; 4] = b"TEND";
pub const FORMAT_VERSION: u32 = 1;
pub const FOOTER_LEN: usize = 16;
pub const RATE_HZ: u32 = 50;

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an episode file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("episode is unfinished: missing footer")]
    Unfinished,
    #[error("file length {actual} does not match {expected} implied by the footer")]
    Length { expected: usize, actual: usize },
    #[error("record width {footer} in footer, {manifest} implied by manifest")]
    RecordWidth { footer: usize, manifest: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("record {index} has time_step {found}")]
    TimeStep { index: usize, found: u32 },
    #[error("record does not match the manifest layout: {0}")]
    Layout(String),
    #[error("camera subset not contained in the episode: missing {0}")]
    MissingCameras(String),
    #[error("chain description mismatch for {0}: frames would not match the recorded arms")]
    ChainMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub format_version: u32,
    pub task: TaskConfig,
    pub seed: u64,
    pub rate_hz: u32,
    pub camera_set: CameraSet,
    pub av_arm_present: bool,
    pub intrinsics: Intrinsics,
    pub baseline: f64,
    pub object_names: Vec<String>,
    pub chain_checksums: ChainChecksums,
    /// Where the actions came from (e.g. `scripted`, `teleop`).
    pub source: String,
    #[serde(skip)]
    pub step_count: u64,
}

impl EpisodeManifest {
    pub fn frame_len(&self) -> usize {
        self.intrinsics.pixel_count()
    }

    pub fn record_width(&self) -> usize {
        4 + 4 * QPOS_LEN * 2 + 4 * 7 * self.object_names.len() + self.frame_len() * self.camera_set.len()
    }

    pub fn header_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn header_len(&self) -> usize {
        self.header_bytes().len()
    }

    /// Expected size of a finished file with `step_count` records.
    pub fn file_len(&self) -> usize {
        self.header_len() + self.step_count as usize * self.record_width() + FOOTER_LEN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time_step: u32,
    pub qpos: [f32; QPOS_LEN],
    pub action: [f32; QPOS_LEN],
    /// `[x, y, z, qw, qx, qy, qz]` per object.
    pub object_poses: Vec<[f32; 7]>,
    /// One buffer per camera of the manifest set, canonical order.
    pub frames: Vec<Vec<u8>>,
}

impl StepRecord {
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.time_step.to_le_bytes());
        for v in self.qpos.iter().chain(self.action.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.object_poses {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for f in &self.frames {
            out.extend_from_slice(f);
        }
    }

    fn check_layout(&self, m: &EpisodeManifest) -> Result<(), EpisodeError> {
        if self.object_poses.len() != m.object_names.len() {
            return Err(EpisodeError::Layout(format!(
                "{} object poses for {} objects",
                self.object_poses.len(),
                m.object_names.len()
            )));
        }
        if self.frames.len() != m.camera_set.len() || self.frames.iter().any(|f| f.len() != m.frame_len()) {
            return Err(EpisodeError::Layout(format!(
                "expected {} frames of {} bytes",
                m.camera_set.len(),
                m.frame_len()
            )));
        }
        Ok(())
    }

    fn read_from(bytes: &[u8], m: &EpisodeManifest) -> StepRecord {
        let mut pos = 0;
        let u32_at = |p: &mut usize| {
            let v = u32::from_le_bytes(bytes[*p..*p + 4].try_into().expect("4 bytes"));
            *p += 4;
            v
        };
        let time_step = u32_at(&mut pos);
        let f32s = |n: usize, p: &mut usize| -> Vec<f32> {
            let v = (0..n)
                .map(|i| f32::from_le_bytes(bytes[*p + 4 * i..*p + 4 * i + 4].try_into().expect("4 bytes")))
                .collect();
            *p += 4 * n;
            v
        };
        let qpos: [f32; QPOS_LEN] = f32s(QPOS_LEN, &mut pos).try_into().expect("qpos length");
        let action: [f32; QPOS_LEN] = f32s(QPOS_LEN, &mut pos).try_into().expect("action length");
        let object_poses = (0..m.object_names.len())
            .map(|_| f32s(7, &mut pos).try_into().expect("pose length"))
            .collect();
        let frames = (0..m.camera_set.len())
            .map(|_| {
                let f = bytes[pos..pos + m.frame_len()].to_vec();
                pos += m.frame_len();
                f
            })
            .collect();
        StepRecord {
            time_step,
            qpos,
            action,
            object_poses,
            frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub manifest: EpisodeManifest,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// When false a checksum mismatch is tolerated (used to locate the damage
    /// by replay).
    pub verify_crc: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { verify_crc: true }
    }
}

impl Episode {
    pub fn new(manifest: EpisodeManifest) -> Self {
        Self {
            manifest: EpisodeManifest { step_count: 0, ..manifest },
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: StepRecord) -> Result<(), EpisodeError> {
        rec.check_layout(&self.manifest)?;
        if rec.time_step as usize != self.steps.len() {
            return Err(EpisodeError::TimeStep {
                index: self.steps.len(),
                found: rec.time_step,
            });
        }
        self.steps.push(rec);
        self.manifest.step_count = self.steps.len() as u64;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.manifest.header_bytes();
        out.reserve(self.steps.len() * self.manifest.record_width() + FOOTER_LEN);
        for s in &self.steps {
            s.write_to(&mut out);
        }
        out.extend_from_slice(FOOTER_MAGIC);
        out.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.manifest.record_width() as u32).to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EpisodeError> {
        Self::from_bytes_with(bytes, LoadOptions::default()).map(|(e, _)| e)
    }

    /// Parses an episode; the second value reports a tolerated checksum
    /// mismatch.
    pub fn from_bytes_with(bytes: &[u8], opts: LoadOptions) -> Result<(Self, Option<EpisodeError>), EpisodeError> {
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(EpisodeError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(EpisodeError::Version(version));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_len = 12usize
            .checked_add(mlen)
            .filter(|&h| h <= bytes.len())
            .ok_or_else(|| EpisodeError::Manifest("manifest runs past end of file".into()))?;
        let mut manifest: EpisodeManifest =
            serde_json::from_slice(&bytes[12..header_len]).map_err(|e| EpisodeError::Manifest(e.to_string()))?;
        if manifest.format_version != version {
            return Err(EpisodeError::Manifest("format_version disagrees with header".into()));
        }
        if manifest.rate_hz != RATE_HZ {
            return Err(EpisodeError::Manifest(format!("rate_hz must be {RATE_HZ}")));
        }
        if bytes.len() < header_len + FOOTER_LEN || &bytes[bytes.len() - FOOTER_LEN..bytes.len() - 12] != FOOTER_MAGIC {
            return Err(EpisodeError::Unfinished);
        }
        let footer = &bytes[bytes.len() - 12..];
        let step_count = u32::from_le_bytes(footer[0..4].try_into().expect("4 bytes")) as usize;
        let width = u32::from_le_bytes(footer[4..8].try_into().expect("4 bytes")) as usize;
        let stored = u32::from_le_bytes(footer[8..12].try_into().expect("4 bytes"));
        if width != manifest.record_width() {
            return Err(EpisodeError::RecordWidth {
                footer: width,
                manifest: manifest.record_width(),
            });
        }
        let expected = header_len + step_count * width + FOOTER_LEN;
        if expected != bytes.len() {
            return Err(EpisodeError::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let mut tolerated = None;
        if computed != stored {
            let err = EpisodeError::Checksum { stored, computed };
            if opts.verify_crc {
                return Err(err);
            }
            tolerated = Some(err);
        }
        manifest.step_count = step_count as u64;
        let mut steps = Vec::with_capacity(step_count);
        for i in 0..step_count {
            let start = header_len + i * width;
            let rec = StepRecord::read_from(&bytes[start..start + width], &manifest);
            if rec.time_step as usize != i && tolerated.is_none() {
                return Err(EpisodeError::TimeStep {
                    index: i,
                    found: rec.time_step,
                });
            }
            steps.push(rec);
        }
        Ok((Self { manifest, steps }, tolerated))
    }

    pub fn save(&self, path: &Path) -> Result<(), EpisodeError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EpisodeError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn load_with(path: &Path, opts: LoadOptions) -> Result<(Self, Option<EpisodeError>), EpisodeError> {
        Self::from_bytes_with(&std::fs::read(path)?, opts)
    }

    /// Frame of one camera at one step.
    pub fn frame(&self, step: usize, camera: crate::camera::CameraId) -> Option<&[u8]> {
        let idx = self.manifest.camera_set.position(camera)?;
        self.steps.get(step).map(|s| s.frames[idx].as_slice())
    }
}

/// Where recorded steps go: an in-memory episode or a streaming file.
pub trait RecordSink {
    fn push_step(&mut self, rec: StepRecord) -> Result<(), EpisodeError>;
}

impl RecordSink for Episode {
    fn push_step(&mut self, rec: StepRecord) -> Result<(), EpisodeError> {
        self.push(rec)
    }
}

/// Streams records to disk. Dropping it without [`EpisodeWriter::finish`]
/// leaves a file with no footer, which loaders reject as unfinished.
pub struct EpisodeWriter {
    out: BufWriter<File>,
    manifest: EpisodeManifest,
    hasher: crc32fast::Hasher,
    count: u32,
    buf: Vec<u8>,
}

impl EpisodeWriter {
    pub fn create(path: &Path, manifest: EpisodeManifest) -> Result<Self, EpisodeError> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = manifest.header_bytes();
        out.write_all(&header)?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&header);
        Ok(Self {
            out,
            manifest,
            hasher,
            count: 0,
            buf: Vec::new(),
        })
    }

    pub fn manifest(&self) -> &EpisodeManifest {
        &self.manifest
    }

    pub fn step_count(&self) -> u32 {
        self.count
    }

    pub fn finish(mut self) -> Result<EpisodeManifest, EpisodeError> {
        let mut footer = Vec::with_capacity(FOOTER_LEN);
        footer.extend_from_slice(FOOTER_MAGIC);
        footer.extend_from_slice(&self.count.to_le_bytes());
        footer.extend_from_slice(&(self.manifest.record_width() as u32).to_le_bytes());
        self.hasher.update(&footer[..12]);
        let crc = self.hasher.clone().finalize();
        footer.extend_from_slice(&crc.to_le_bytes());
        self.out.write_all(&footer)?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        let mut m = self.manifest.clone();
        m.step_count = self.count as u64;
        Ok(m)
    }
}

impl RecordSink for EpisodeWriter {
    fn push_step(&mut self, rec: StepRecord) -> Result<(), EpisodeError> {
        rec.check_layout(&self.manifest)?;
        if rec.time_step != self.count {
            return Err(EpisodeError::TimeStep {
                index: self.count as usize,
                found: rec.time_step,
            });
        }
        self.buf.clear();
        rec.write_to(&mut self.buf);
        self.hasher.update(&self.buf);
        self.out.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }
}
