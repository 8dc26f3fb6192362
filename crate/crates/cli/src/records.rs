//! On-disk record formats: JSON lines for lesions and detections, JSON for
//! the dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use voxdet_core::synthetic::{SyntheticSpec, Volume};
use voxdet_core::{Box3, Detection, GroundTruth};

use crate::CliError;

/// Lesions of one volume. Lesion-free volumes still get a record so they
/// count towards FPs per volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub volume_id: String,
    pub voxel_spacing: [f64; 3],
    pub gts: Vec<GroundTruth>,
}

/// One detection. Fields this tool does not know are carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub volume_id: String,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<[f64; 2]>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl DetectionRecord {
    pub fn from_detection(volume_id: &str, d: &Detection) -> Self {
        let mut extra = Map::new();
        if let Some(m) = d.max_iou {
            extra.insert("max_iou".into(), Value::from(m));
        }
        Self {
            volume_id: volume_id.to_string(),
            bbox: d.bbox,
            score: d.score,
            class_probs: d.class_probs,
            extra,
        }
    }

    pub fn to_detection(&self) -> Detection {
        let mut d = Detection::new(self.bbox, self.score);
        d.class_probs = self.class_probs;
        d.max_iou = self.extra.get("max_iou").and_then(Value::as_f64);
        d
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if let Some(p) = self.class_probs {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(format!("class_probs {p:?} must be probabilities summing to 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub volume_id: String,
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub spec: SyntheticSpec,
    pub gt_file: String,
    pub volumes: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";
pub const GT_FILE: &str = "gts.jsonl";

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// A generated dataset on disk.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub gts: Vec<GtRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        let gts: Vec<GtRecord> = read_jsonl(&dir.join(&manifest.gt_file))?;
        if gts.len() != manifest.volumes.len()
            || gts.iter().zip(&manifest.volumes).any(|(g, v)| g.volume_id != v.volume_id)
        {
            return Err(CliError::Invalid(format!(
                "{}: lesion records do not line up with the manifest",
                dir.display()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            gts,
        })
    }

    pub fn load_volume(&self, i: usize) -> Result<Volume, CliError> {
        let path = self.dir.join(&self.manifest.volumes[i].file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        Volume::from_bytes(&bytes).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn load_all(&self) -> Result<Vec<(Volume, Vec<GroundTruth>)>, CliError> {
        (0..self.gts.len())
            .map(|i| Ok((self.load_volume(i)?, self.gts[i].gts.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_record_keeps_unknown_fields() {
        let line = r#"{"volume_id":"v","box":[1.0,2.0,3.0,4.0,5.0,6.0],"score":0.5,"class_probs":[0.25,0.75],"note":"keep","rank":3}"#;
        let rec: DetectionRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.extra["note"], "keep");
        let once = jsonl_bytes(&[rec]);
        let again: DetectionRecord = serde_json::from_slice(&once).unwrap();
        assert_eq!(jsonl_bytes(&[again]), once);
        assert_eq!(String::from_utf8(once).unwrap().trim_end(), line);
    }

    #[test]
    fn invalid_probabilities_are_flagged() {
        let line = r#"{"volume_id":"v","box":[1,2,3,4,5,6],"score":0.5,"class_probs":[0.5,0.6]}"#;
        let rec: DetectionRecord = serde_json::from_str(line).unwrap();
        assert!(rec.validate().is_err());
    }
}
