//! JSON-Lines cohort files and raw little-endian volume files.
//!
//! One subject per line:
//!
//! ```json
//! {"id":"s01","label":"typical_ad","tabular":{"age":75},"mri_path":"volumes/s01_mri.f32"}
//! ```
//!
//! Volumes are either inlined as nested `[z][y][x]` arrays (`mri`/`pet`) or
//! referenced by a path relative to the cohort file (`mri_path`/`pet_path`).
//! A raw volume `X` has a sidecar `X.json` holding
//! `{"shape": [d, h, w], "dtype": "f32le"}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{validate_cohort, SubType, SubjectRecord, Tabular, Volume};
use crate::error::{Error, Result};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const VOLUME_DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    label: SubType,
    #[serde(default)]
    tabular: Tabular,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mri_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pet_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mri: Option<Vec<Vec<Vec<f32>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pet: Option<Vec<Vec<Vec<f32>>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub dtype: String,
}

fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads a raw volume and its shape sidecar.
pub fn read_volume(raw: &Path) -> Result<Volume> {
    let side = sidecar_path(raw);
    let header_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::Validation(format!("{}: bad volume header: {e}", side.display())))?;
    if header.dtype != VOLUME_DTYPE {
        return Err(Error::Validation(format!(
            "{}: unsupported dtype {:?} (expected {VOLUME_DTYPE:?})",
            side.display(),
            header.dtype
        )));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let expected: usize = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Validation(format!(
            "{}: {} bytes on disk, header {:?} needs {expected}",
            raw.display(),
            bytes.len(),
            header.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.shape, data)
}

pub fn write_volume(raw: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    let header = VolumeHeader {
        shape: volume.shape(),
        dtype: VOLUME_DTYPE.to_owned(),
    };
    let side = sidecar_path(raw);
    fs::write(&side, serde_json::to_string(&header)?).map_err(|e| Error::io(&side, e))
}

/// Resolves a cohort location: a directory means `<dir>/cohort.jsonl`.
pub fn cohort_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(COHORT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn volume_from(
    inline: Option<Vec<Vec<Vec<f32>>>>,
    rel: Option<String>,
    base: &Path,
    what: &str,
) -> std::result::Result<Option<Volume>, String> {
    match (inline, rel) {
        (Some(_), Some(_)) => Err(format!("both `{what}` and `{what}_path` given")),
        (Some(nested), None) => Volume::from_nested(&nested).map(Some).map_err(|e| e.to_string()),
        (None, Some(p)) => read_volume(&base.join(p)).map(Some).map_err(|e| e.to_string()),
        (None, None) => Ok(None),
    }
}

/// Loads and validates a cohort file (or directory holding `cohort.jsonl`).
pub fn load_cohort(path: &Path) -> Result<Vec<SubjectRecord>> {
    let file_path = cohort_file(path);
    let base = file_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: file_path.clone(),
            line: i + 1,
            msg,
        };
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mri = volume_from(raw.mri, raw.mri_path, &base, "mri").map_err(parse_err)?;
        let pet = volume_from(raw.pet, raw.pet_path, &base, "pet").map_err(parse_err)?;
        records.push(SubjectRecord {
            id: raw.id,
            label: raw.label,
            tabular: raw.tabular,
            mri,
            pet,
        });
    }
    validate_cohort(&records)?;
    Ok(records)
}

/// Writes `<dir>/cohort.jsonl`. Volumes with at most `inline_max_voxels`
/// voxels are inlined; larger ones go to `<dir>/volumes/`.
pub fn write_cohort(records: &[SubjectRecord], dir: &Path, inline_max_voxels: usize) -> Result<PathBuf> {
    validate_cohort(records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vol_dir = dir.join("volumes");
    let needs_files = records
        .iter()
        .flat_map(|r| [&r.mri, &r.pet])
        .flatten()
        .any(|v| v.len() > inline_max_voxels);
    if needs_files {
        fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    }

    let path = dir.join(COHORT_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let mut line = RecordLine {
            id: r.id.clone(),
            label: r.label,
            tabular: r.tabular.clone(),
            mri_path: None,
            pet_path: None,
            mri: None,
            pet: None,
        };
        for (tag, vol) in [("mri", &r.mri), ("pet", &r.pet)] {
            let Some(v) = vol else { continue };
            if v.len() <= inline_max_voxels {
                let nested = Some(v.to_nested());
                if tag == "mri" {
                    line.mri = nested;
                } else {
                    line.pet = nested;
                }
            } else {
                let rel = format!("volumes/{}_{tag}.f32", r.id);
                write_volume(&dir.join(&rel), v)?;
                if tag == "mri" {
                    line.mri_path = Some(rel);
                } else {
                    line.pet_path = Some(rel);
                }
            }
        }
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_cohort, SynthConfig};

    fn tiny_cohort() -> Vec<SubjectRecord> {
        let cfg = SynthConfig {
            n_subjects: 12,
            volume_shape: [3, 3, 3],
            ..SynthConfig::default()
        };
        synthesize_cohort(&cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_with_raw_files() {
        let dir = tempfile::tempdir().unwrap();
        let rs = tiny_cohort();
        write_cohort(&rs, dir.path(), 0).unwrap();
        assert_eq!(load_cohort(dir.path()).unwrap(), rs);
    }

    #[test]
    fn round_trip_inline() {
        let dir = tempfile::tempdir().unwrap();
        let rs = tiny_cohort();
        let path = write_cohort(&rs, dir.path(), 1000).unwrap();
        assert!(!dir.path().join("volumes").exists());
        assert_eq!(load_cohort(&path).unwrap(), rs);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"label\":\"typical_ad\",\"tabular\":{\"age\":70}}\n\n{\"id\": oops}\n",
        )
        .unwrap();
        match load_cohort(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pet_without_mri_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"label\":\"normal_control\",\"tabular\":{\"age\":70},\"pet\":[[[1.0]]]}\n",
        )
        .unwrap();
        assert!(matches!(load_cohort(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let line = "{\"id\":\"a\",\"label\":\"normal_control\",\"tabular\":{\"age\":70}}\n";
        fs::write(&path, format!("{line}{line}")).unwrap();
        assert!(matches!(load_cohort(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn truncated_raw_volume_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("v.f32");
        write_volume(&raw, &Volume::new([2, 2, 2], vec![1.0; 8]).unwrap()).unwrap();
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..20]).unwrap();
        assert!(read_volume(&raw).is_err());
    }
}
