//! JSON-lines dataset manifests: one `{image_path, points, tags}` per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkLayout, LandmarkSet, PointTag};

use super::pts::parse_pts;
use super::AnnotatedSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    /// 0-based pixel-center coordinates.
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<PointTag>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Manifest record for an image with a `.pts` annotation.
pub fn import_pts(image_path: &str, pts_path: impl AsRef<Path>) -> Result<ManifestRecord> {
    Ok(ManifestRecord {
        image_path: image_path.to_string(),
        points: parse_pts(&fs::read_to_string(pts_path)?)?,
        tags: Vec::new(),
    })
}

fn resolve(base: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Decode every image of a manifest. Records must match the layout's point
/// count; missing tags are taken from the layout.
pub fn load_samples(path: impl AsRef<Path>, layout: &LandmarkLayout) -> Result<Vec<AnnotatedSample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|r| {
            if r.points.len() != layout.len() {
                return Err(Error::Data(format!(
                    "{}: {} points, layout {} has {}",
                    r.image_path,
                    r.points.len(),
                    layout.name,
                    layout.len()
                )));
            }
            let tags = if r.tags.is_empty() { layout.tags.clone() } else { r.tags };
            if tags.len() != layout.len() {
                return Err(Error::Data(format!("{}: tag count mismatch", r.image_path)));
            }
            let image = image::open(resolve(base, &r.image_path))?.to_rgb8();
            Ok(AnnotatedSample {
                image,
                landmarks: LandmarkSet::new(r.points),
                tags,
                source: r.image_path,
            })
        })
        .collect()
}
