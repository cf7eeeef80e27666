//! CSV manifest of prepared sequences: one row per frame with the exact
//! header `sequence_id,frame_path,distance_m,motion_label,intersection_label,split`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdv::{IntersectionClass, MotionClass};

pub const MANIFEST_HEADER: [&str; 6] = [
    "sequence_id",
    "frame_path",
    "distance_m",
    "motion_label",
    "intersection_label",
    "split",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sequence_id: String,
    pub frame_path: String,
    pub distance_m: f64,
    pub motion_label: usize,
    pub intersection_label: usize,
    pub split: String,
}

/// All frames of one sequence, grouped and validated.
#[derive(Clone, Debug)]
pub struct ManifestSequence {
    pub id: String,
    /// (absolute frame path, along-track distance) in row order.
    pub frames: Vec<(PathBuf, f64)>,
    pub motion: MotionClass,
    pub intersection: IntersectionClass,
    pub split: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        what: format!("manifest {}", path.display()),
        detail: e.to_string(),
    })?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse {
            what: format!("manifest {}", path.display()),
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load and validate a manifest. Frame paths are resolved relative to the
/// manifest's directory; every referenced file must exist and per-sequence
/// distances must be strictly increasing.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestSequence>> {
    let parse_err = |detail: String| Error::Parse {
        what: format!("manifest {}", path.display()),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("missing manifest file {}", path.display())),
        _ => parse_err(e.to_string()),
    })?;
    {
        let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(parse_err(format!(
                "header {:?} does not match {:?}",
                got, MANIFEST_HEADER
            )));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<ManifestRow>> = HashMap::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if !grouped.contains_key(&row.sequence_id) {
            order.push(row.sequence_id.clone());
        }
        grouped.entry(row.sequence_id.clone()).or_default().push(row);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let rows = grouped.remove(&id).unwrap();
        let first = &rows[0];
        let motion = MotionClass::from_label(first.motion_label)?;
        let intersection = IntersectionClass::from_label(first.intersection_label)?;
        let mut frames = Vec::with_capacity(rows.len());
        let mut prev = f64::NEG_INFINITY;
        for row in &rows {
            if row.motion_label != first.motion_label
                || row.intersection_label != first.intersection_label
                || row.split != first.split
            {
                return Err(parse_err(format!("sequence {id} has inconsistent labels")));
            }
            if row.distance_m <= prev {
                return Err(parse_err(format!(
                    "sequence {id} distances not strictly increasing at {}",
                    row.distance_m
                )));
            }
            prev = row.distance_m;
            let fp = base.join(&row.frame_path);
            if !fp.exists() {
                return Err(Error::Data(format!("missing frame file {}", fp.display())));
            }
            frames.push((fp, row.distance_m));
        }
        out.push(ManifestSequence {
            id,
            frames,
            motion,
            intersection,
            split: first.split.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn roundtrip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a0.pgm");
        touch(dir.path(), "a1.pgm");
        touch(dir.path(), "b0.pgm");
        let rows = vec![
            ManifestRow {
                sequence_id: "a".into(),
                frame_path: "a0.pgm".into(),
                distance_m: -5.0,
                motion_label: 1,
                intersection_label: 7,
                split: "train".into(),
            },
            ManifestRow {
                sequence_id: "a".into(),
                frame_path: "a1.pgm".into(),
                distance_m: -3.5,
                motion_label: 1,
                intersection_label: 7,
                split: "train".into(),
            },
            ManifestRow {
                sequence_id: "b".into(),
                frame_path: "b0.pgm".into(),
                distance_m: -2.0,
                motion_label: 2,
                intersection_label: 2,
                split: "test".into(),
            },
        ];
        let mpath = dir.path().join("manifest.csv");
        write_manifest(&mpath, &rows).unwrap();
        let text = std::fs::read_to_string(&mpath).unwrap();
        assert!(text.starts_with(
            "sequence_id,frame_path,distance_m,motion_label,intersection_label,split\n"
        ));
        let seqs = load_manifest(&mpath).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].frames.len(), 2);
        assert_eq!(seqs[1].motion, MotionClass::TurnRight);
    }

    #[test]
    fn rejects_missing_file_and_bad_order() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.csv");
        let rows = vec![ManifestRow {
            sequence_id: "a".into(),
            frame_path: "gone.pgm".into(),
            distance_m: -1.0,
            motion_label: 1,
            intersection_label: 1,
            split: "train".into(),
        }];
        write_manifest(&mpath, &rows).unwrap();
        assert!(matches!(load_manifest(&mpath), Err(Error::Data(_))));

        touch(dir.path(), "f0.pgm");
        touch(dir.path(), "f1.pgm");
        let rows = vec![
            ManifestRow {
                sequence_id: "a".into(),
                frame_path: "f0.pgm".into(),
                distance_m: -1.0,
                motion_label: 1,
                intersection_label: 1,
                split: "train".into(),
            },
            ManifestRow {
                sequence_id: "a".into(),
                frame_path: "f1.pgm".into(),
                distance_m: -2.0,
                motion_label: 1,
                intersection_label: 1,
                split: "train".into(),
            },
        ];
        write_manifest(&mpath, &rows).unwrap();
        assert!(load_manifest(&mpath).is_err());
    }
}
