//! On-disk formats: frame sequences, training databases and line-delimited
//! session logs.
//!
//! # Frame sequence (`.smgf`)
//!
//! A 32-byte little-endian header followed by the pixels of every frame,
//! row-major, as `f32`:
//!
//! | offset | type    | field          |
//! |--------|---------|----------------|
//! | 0      | [u8; 4] | magic `SMGF`   |
//! | 4      | u16     | format version |
//! | 6      | u16     | dtype (1 = f32)|
//! | 8      | u32     | width          |
//! | 12     | u32     | height         |
//! | 16     | u64     | frame count    |
//! | 24     | f64     | tick rate (Hz) |
//!
//! A JSON sidecar at `<file>.json` carries the session id, labels, schedule,
//! provenance and per-frame index/timestamp.
//!
//! Every file is written to a temporary file in the target directory and
//! renamed into place.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{Frame, FrameError};
use crate::training::{MetronomeSchedule, MotionClass, Provenance, TrainingDatabase, TrainingError};

pub const MAGIC: [u8; 4] = *b"SMGF";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported format version {version}")]
    VersionUnsupported { path: PathBuf, version: u16 },
    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u16 },
    #[error("{path}: truncated payload at byte {offset}, expected {expected} bytes")]
    TruncatedPayload { path: PathBuf, offset: u64, expected: u64 },
    #[error("{path}: shape inconsistent: {detail}")]
    ShapeInconsistent { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),
    #[error("file for class {class:?} missing: {path}")]
    ClassFileMissing { class: String, path: PathBuf },
    #[error("sidecar missing: {0}")]
    SidecarMissing(PathBuf),
    #[error("class id {0:?} is not usable as a file name")]
    InvalidClassId(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Training(#[from] TrainingError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StorageError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceHeader {
    pub format_version: u16,
    pub dtype: u16,
    pub width: u32,
    pub height: u32,
    pub frame_count: u64,
    pub tick_rate_hz: f64,
}

impl SequenceHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.format_version.to_le_bytes());
        b[6..8].copy_from_slice(&self.dtype.to_le_bytes());
        b[8..12].copy_from_slice(&self.width.to_le_bytes());
        b[12..16].copy_from_slice(&self.height.to_le_bytes());
        b[16..24].copy_from_slice(&self.frame_count.to_le_bytes());
        b[24..32].copy_from_slice(&self.tick_rate_hz.to_le_bytes());
        b
    }

    fn parse(path: &Path, b: &[u8; HEADER_LEN]) -> Result<Self, StorageError> {
        let found: [u8; 4] = b[0..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(StorageError::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes(b[i..i + 2].try_into().expect("2 bytes"));
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let header = Self {
            format_version: u16_at(4),
            dtype: u16_at(6),
            width: u32_at(8),
            height: u32_at(12),
            frame_count: u64::from_le_bytes(b[16..24].try_into().expect("8 bytes")),
            tick_rate_hz: f64::from_le_bytes(b[24..32].try_into().expect("8 bytes")),
        };
        if header.format_version != FORMAT_VERSION {
            return Err(StorageError::VersionUnsupported {
                path: path.to_path_buf(),
                version: header.format_version,
            });
        }
        if header.dtype != DTYPE_F32 {
            return Err(StorageError::UnsupportedDtype {
                path: path.to_path_buf(),
                code: header.dtype,
            });
        }
        Ok(header)
    }

    pub fn payload_len(&self) -> u64 {
        self.frame_count * self.width as u64 * self.height as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub session_id: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u64,
    pub tick_rate_hz: f64,
    #[serde(default)]
    pub motion_labels: Vec<String>,
    #[serde(default)]
    pub schedule: Option<MetronomeSchedule>,
    #[serde(default)]
    pub provenance: serde_json::Value,
    #[serde(default)]
    pub frame_index: Option<Vec<u64>>,
    #[serde(default)]
    pub frame_timestamp: Option<Vec<f64>>,
}

/// Descriptive fields for [`write_sequence`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceMeta {
    pub session_id: String,
    pub tick_rate_hz: f64,
    pub motion_labels: Vec<String>,
    pub schedule: Option<MetronomeSchedule>,
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub header: SequenceHeader,
    pub sidecar: Sidecar,
    pub frames: Vec<Frame>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sequence(path: &Path, frames: &[Frame], meta: &SequenceMeta) -> Result<(), StorageError> {
    let (width, height) = frames.first().map(Frame::shape).unwrap_or((0, 0));
    if let Some(bad) = frames.iter().find(|f| f.shape() != (width, height)) {
        return Err(StorageError::ShapeInconsistent {
            path: path.to_path_buf(),
            detail: format!("frame {} is {:?}, expected {:?}", bad.index(), bad.shape(), (width, height)),
        });
    }
    let header = SequenceHeader {
        format_version: FORMAT_VERSION,
        dtype: DTYPE_F32,
        width: width as u32,
        height: height as u32,
        frame_count: frames.len() as u64,
        tick_rate_hz: meta.tick_rate_hz,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
    bytes.extend_from_slice(&header.to_bytes());
    for f in frames {
        for v in f.pixels() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        session_id: meta.session_id.clone(),
        width: header.width,
        height: header.height,
        frame_count: header.frame_count,
        tick_rate_hz: meta.tick_rate_hz,
        motion_labels: meta.motion_labels.clone(),
        schedule: meta.schedule,
        provenance: meta.provenance.clone(),
        frame_index: Some(frames.iter().map(Frame::index).collect()),
        frame_timestamp: Some(frames.iter().map(Frame::timestamp).collect()),
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|source| StorageError::Json {
        path: sidecar_path(path),
        source,
    })?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_sequence(path: &Path) -> Result<FrameSequence, StorageError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hb = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match file.read(&mut hb[got..]).map_err(io_err(path))? {
            0 => {
                return Err(StorageError::TruncatedPayload {
                    path: path.to_path_buf(),
                    offset: got as u64,
                    expected: HEADER_LEN as u64,
                })
            }
            n => got += n,
        }
    }
    let header = SequenceHeader::parse(path, &hb)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err(path))?;
    if (payload.len() as u64) < header.payload_len() {
        return Err(StorageError::TruncatedPayload {
            path: path.to_path_buf(),
            offset: (HEADER_LEN + payload.len()) as u64,
            expected: HEADER_LEN as u64 + header.payload_len(),
        });
    }
    if payload.len() as u64 > header.payload_len() {
        return Err(StorageError::ShapeInconsistent {
            path: path.to_path_buf(),
            detail: format!(
                "{} trailing bytes after {} frames",
                payload.len() as u64 - header.payload_len(),
                header.frame_count
            ),
        });
    }

    let sc_path = sidecar_path(path);
    let sc_bytes = match fs::read(&sc_path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StorageError::SidecarMissing(sc_path)),
        Err(e) => return Err(io_err(&sc_path)(e)),
    };
    let sidecar: Sidecar = serde_json::from_slice(&sc_bytes).map_err(|source| StorageError::Json {
        path: sc_path.clone(),
        source,
    })?;
    let inconsistent = |detail: String| StorageError::ShapeInconsistent {
        path: path.to_path_buf(),
        detail,
    };
    if (sidecar.width, sidecar.height, sidecar.frame_count) != (header.width, header.height, header.frame_count) {
        return Err(inconsistent(format!(
            "sidecar says {}x{}x{}, header says {}x{}x{}",
            sidecar.width, sidecar.height, sidecar.frame_count, header.width, header.height, header.frame_count
        )));
    }
    let n = header.frame_count as usize;
    if sidecar.frame_index.as_ref().is_some_and(|v| v.len() != n)
        || sidecar.frame_timestamp.as_ref().is_some_and(|v| v.len() != n)
    {
        return Err(inconsistent("per-frame metadata length differs from frame count".into()));
    }

    let (w, h) = (header.width as usize, header.height as usize);
    let frame_bytes = w * h * 4;
    let frames = (0..n)
        .map(|i| {
            let chunk = &payload[i * frame_bytes..(i + 1) * frame_bytes];
            let pixels = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let index = sidecar.frame_index.as_ref().map_or(i as u64, |v| v[i]);
            let timestamp = sidecar
                .frame_timestamp
                .as_ref()
                .map_or(i as f64 / header.tick_rate_hz, |v| v[i]);
            Frame::new(w, h, pixels, index, timestamp)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameSequence {
        header,
        sidecar,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: String,
    pub display_name: String,
    pub is_rest: bool,
    pub file: Option<String>,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub classes: Vec<ManifestClass>,
    pub rest_reference: Option<String>,
    pub provenance: Vec<Provenance>,
}

fn class_file_name(id: &str) -> Result<String, StorageError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !ok {
        return Err(StorageError::InvalidClassId(id.to_string()));
    }
    Ok(format!("class_{id}.smgf"))
}

pub fn save_database(dir: &Path, db: &TrainingDatabase) -> Result<(), StorageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut classes = Vec::new();
    for class in db.classes() {
        let name = class_file_name(&class.id)?;
        let entries = db.entries(&class.id);
        let file = if entries.is_empty() {
            None
        } else {
            write_sequence(
                &dir.join(&name),
                entries,
                &SequenceMeta {
                    session_id: format!("db:{}", class.id),
                    tick_rate_hz: db.provenance().first().map_or(0.0, |p| p.tick_rate_hz),
                    motion_labels: vec![class.id.clone()],
                    schedule: None,
                    provenance: serde_json::Value::Null,
                },
            )?;
            Some(name)
        };
        classes.push(ManifestClass {
            id: class.id.clone(),
            display_name: class.display_name.clone(),
            is_rest: class.is_rest,
            file,
            entries: entries.len(),
        });
    }
    let rest_reference = match db.rest_reference() {
        Some(frame) => {
            let name = "rest_reference.smgf".to_string();
            write_sequence(
                &dir.join(&name),
                std::slice::from_ref(frame),
                &SequenceMeta {
                    session_id: "db:rest_reference".into(),
                    ..Default::default()
                },
            )?;
            Some(name)
        }
        None => None,
    };
    let shape = db.shape();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        width: shape.map(|s| s.0),
        height: shape.map(|s| s.1),
        classes,
        rest_reference,
        provenance: db.provenance().to_vec(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| StorageError::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, &json)
}

fn read_class_file(dir: &Path, class: &str, name: &str) -> Result<Vec<Frame>, StorageError> {
    let path = dir.join(name);
    if !path.exists() || !sidecar_path(&path).exists() {
        return Err(StorageError::ClassFileMissing {
            class: class.to_string(),
            path,
        });
    }
    Ok(read_sequence(&path)?.frames)
}

pub fn load_database(dir: &Path) -> Result<TrainingDatabase, StorageError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StorageError::ManifestMissing(path)),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|source| StorageError::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StorageError::VersionUnsupported {
            path,
            version: manifest.format_version,
        });
    }
    let mut entries = BTreeMap::new();
    let mut classes = Vec::new();
    for c in &manifest.classes {
        classes.push(MotionClass {
            id: c.id.clone(),
            display_name: c.display_name.clone(),
            is_rest: c.is_rest,
        });
        let frames = match &c.file {
            Some(name) => read_class_file(dir, &c.id, name)?,
            None if c.entries == 0 => Vec::new(),
            None => {
                return Err(StorageError::ClassFileMissing {
                    class: c.id.clone(),
                    path: dir.join(class_file_name(&c.id)?),
                })
            }
        };
        if frames.len() != c.entries {
            return Err(StorageError::ShapeInconsistent {
                path: dir.join(c.file.as_deref().unwrap_or_default()),
                detail: format!("manifest lists {} entries, file has {}", c.entries, frames.len()),
            });
        }
        entries.insert(c.id.clone(), frames);
    }
    let rest_reference = match &manifest.rest_reference {
        Some(name) => read_class_file(dir, "rest_reference", name)?.into_iter().next(),
        None => None,
    };
    Ok(TrainingDatabase::from_parts(classes, entries, rest_reference, manifest.provenance)?)
}

/// Append-only JSON-lines log. Lines go to `<path>.partial` and the file is
/// renamed to `path` by [`JsonlWriter::finish`], so a crashed session never
/// leaves a complete-looking log behind.
pub struct JsonlWriter {
    path: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, StorageError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut partial = path.as_os_str().to_owned();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let file = File::create(&partial).map_err(io_err(&partial))?;
        Ok(Self {
            path: path.to_path_buf(),
            partial,
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), StorageError> {
        serde_json::to_writer(&mut self.out, record).map_err(|source| StorageError::Json {
            path: self.partial.clone(),
            source,
        })?;
        self.out.write_all(b"\n").map_err(io_err(&self.partial))
    }

    pub fn finish(mut self) -> Result<PathBuf, StorageError> {
        self.out.flush().map_err(io_err(&self.partial))?;
        self.out.get_ref().sync_all().map_err(io_err(&self.partial))?;
        fs::rename(&self.partial, &self.path).map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StorageError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StorageError::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("serializable record"));
        s.push('\n');
    }
    s
}
