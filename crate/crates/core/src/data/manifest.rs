//! Dataset directories: one volume file per sample plus a tab-separated
//! `manifest.tsv` of `path<TAB>label<TAB>id` lines, paths relative to the
//! manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::volume_io::{read_volume, write_volume};
use super::VolumeSample;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub subject_id: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::Data(format!("manifest line {}: {why}", lineno + 1));
        if fields.len() != 3 {
            return Err(bad("expected path, label and id separated by tabs"));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(&format!("label `{other}` is not 0 or 1"))),
        };
        out.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            label,
            subject_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// Writes `samples` as `dir/volumes/<id>.dvol` and `dir/manifest.tsv`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[VolumeSample]) -> Result<PathBuf> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        if s.subject_id.is_empty() || s.subject_id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::Data(format!("subject id `{}` cannot be used as a file name", s.subject_id)));
        }
        let rel = PathBuf::from("volumes").join(format!("{}.dvol", s.subject_id));
        write_volume(&dir.join(&rel), s)?;
        writeln!(manifest, "{}\t{}\t{}", rel.display(), s.label, s.subject_id).unwrap();
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every volume listed in a manifest, checking that each file agrees
/// with its manifest line.
pub fn read_dataset(manifest: &Path) -> Result<Vec<VolumeSample>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    parse_manifest(&text)?
        .into_iter()
        .map(|entry| {
            let path = base.join(&entry.path);
            let v = read_volume(&path)?;
            if v.label != entry.label || v.subject_id != entry.subject_id {
                return Err(Error::Data(format!(
                    "{}: file says label {} id `{}`, manifest says label {} id `{}`",
                    path.display(),
                    v.label,
                    v.subject_id,
                    entry.label,
                    entry.subject_id
                )));
            }
            Ok(v)
        })
        .collect()
}
