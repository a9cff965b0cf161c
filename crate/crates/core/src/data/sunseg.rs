//! Video polyp layout: `<root>/<split>/Frame/<clip>/*` and
//! `<root>/<split>/GT/<clip>/*`, described by `<root>/<split>/clips.json`:
//!
//! ```json
//! { "clips": [ { "name": "case1_1", "difficulty": "easy" } ] }
//! ```
//!
//! Frames are matched to ground truth by file stem and ordered naturally
//! (`2` before `10`). Every frame is an independent sample.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::has_image_extension;
use super::SampleSource;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clips: Vec<ClipEntry>,
}

pub const CLIP_MANIFEST: &str = "clips.json";

pub fn read_manifest(split_dir: &Path) -> Result<ClipManifest> {
    let path = split_dir.join(CLIP_MANIFEST);
    if !path.exists() {
        return Err(Error::Dataset(format!("missing clip manifest {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Splits a name into text and number runs so `frame2` sorts before `frame10`.
pub fn natural_key(s: &str) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_ascii_digit() {
            let mut n = c.to_digit(10).unwrap() as u64;
            while let Some(d) = chars.peek().and_then(|d| d.to_digit(10)) {
                n = n.saturating_mul(10).saturating_add(d as u64);
                chars.next();
            }
            out.push((std::mem::take(&mut text), n));
        } else {
            text.push(c);
        }
    }
    out.push((text, u64::MAX));
    out
}

pub(crate) fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort_by_cached_key(|p| natural_key(&p.file_name().unwrap_or_default().to_string_lossy()));
    Ok(files)
}

pub(crate) fn find_by_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    super::io::IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

pub(crate) fn index_clips(split_dir: &Path, difficulty: Option<Difficulty>) -> Result<Vec<SampleSource>> {
    let manifest = read_manifest(split_dir)?;
    let mut out = Vec::new();
    for clip in &manifest.clips {
        if difficulty.is_some() && clip.difficulty != difficulty {
            continue;
        }
        let frames = split_dir.join("Frame").join(&clip.name);
        let gts = split_dir.join("GT").join(&clip.name);
        for (i, frame) in sorted_images(&frames)?.into_iter().enumerate() {
            let stem = frame.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mask = find_by_stem(&gts, &stem).ok_or_else(|| {
                Error::Dataset(format!("no ground truth for frame {}", frame.display()))
            })?;
            out.push(SampleSource::Files {
                image: frame,
                mask,
                frame_index: Some(i as u32),
                group: Some(clip.name.clone()),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order() {
        let mut v = vec!["f10.png", "f2.png", "f1.png", "g1.png"];
        v.sort_by_key(|s| natural_key(s));
        assert_eq!(v, vec!["f1.png", "f2.png", "f10.png", "g1.png"]);
    }
}
