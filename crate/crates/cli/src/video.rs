//! Video directories: `frame_%04d.pgm` (binary P5, maxval 255) plus
//! `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use atmv_core::codec::Frame;
use atmv_core::toydata::SceneSpec;
use atmv_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const GENERATOR: &str = concat!("atmv ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: Option<SceneSpec>,
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<serde_json::Value>,
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

pub fn quantize(v: Real) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.pixels.iter().map(|&v| quantize(v)));
    out
}

/// Parses a binary P5 image with maxval 255; `#` comments are allowed in the
/// header.
pub fn decode_pgm(bytes: &[u8]) -> Result<Frame, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported PGM maxval {maxval}"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != width * height {
        return Err(format!("PGM body has {} bytes, expected {}", body.len(), width * height));
    }
    let pixels = body.iter().map(|&b| b as Real / 255.0).collect();
    Frame::new(height, width, pixels).map_err(|e| e.to_string())
}

pub fn read_frame(path: &Path) -> Result<Frame, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_video(dir: &Path, frames: &[Frame], manifest: &VideoManifest) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(frame_name(i));
        fs::write(&path, encode_pgm(f)).map_err(|e| CliError::io(&path, e))?;
    }
    write_json(&dir.join(MANIFEST), manifest)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_manifest(dir: &Path) -> Result<Option<VideoManifest>, CliError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug)]
pub struct Video {
    pub frames: Vec<Frame>,
    pub manifest: Option<VideoManifest>,
}

pub fn read_video(dir: &Path) -> Result<Video, CliError> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!("{} holds no frame_*.pgm files", dir.display())));
    }
    for (i, f) in files.iter().enumerate() {
        if f.file_name().and_then(|n| n.to_str()) != Some(frame_name(i).as_str()) {
            return Err(CliError::data(format!("{}: frame numbering has a gap at {i}", dir.display())));
        }
    }
    let frames = files.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>, _>>()?;
    let manifest = read_manifest(dir)?;
    if let Some(m) = &manifest {
        if m.frames != frames.len() {
            return Err(CliError::data(format!(
                "{}: manifest lists {} frames, found {}",
                dir.display(),
                m.frames,
                frames.len()
            )));
        }
    }
    Ok(Video { frames, manifest })
}

/// A single video directory, or a directory of video subdirectories in name
/// order.
pub fn read_video_set(dir: &Path) -> Result<Vec<Video>, CliError> {
    if dir.join(frame_name(0)).exists() {
        return Ok(vec![read_video(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(frame_name(0)).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(CliError::data(format!("{} contains no videos", dir.display())));
    }
    subdirs.iter().map(|d| read_video(d)).collect()
}
