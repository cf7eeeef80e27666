//! Top-1 evaluation, confusion accounting and report export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluation summary. Rows of `confusion` are ground truth, columns are
/// predictions; labels are 1-based class numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    pub top1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_recall: Vec<f64>,
    pub samples: u64,
    pub config_digest: String,
    pub seed: u64,
}

impl EvalReport {
    /// Build from (truth, prediction) pairs of 1-based labels.
    pub fn from_pairs(
        classes: usize,
        pairs: &[(usize, usize)],
        config_digest: &str,
        seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for &(truth, pred) in pairs {
            if truth == 0 || truth > classes || pred == 0 || pred > classes {
                return Err(Error::Data(format!(
                    "label pair ({truth}, {pred}) outside 1..={classes}"
                )));
            }
            confusion[truth - 1][pred - 1] += 1;
        }
        let samples = pairs.len() as u64;
        let trace: u64 = (0..classes).map(|i| confusion[i][i]).sum();
        let per_class_recall = (0..classes)
            .map(|i| {
                let total: u64 = confusion[i].iter().sum();
                if total == 0 {
                    0.0
                } else {
                    confusion[i][i] as f64 / total as f64
                }
            })
            .collect();
        Ok(EvalReport {
            classes,
            top1: trace as f64 / samples as f64,
            confusion,
            per_class_recall,
            samples,
            config_digest: config_digest.to_string(),
            seed,
        })
    }

    /// Accounting identities: entries sum to the sample count and top1
    /// equals trace/sum.
    pub fn check_identities(&self) -> Result<()> {
        let total: u64 = self.confusion.iter().flatten().sum();
        if total != self.samples {
            return Err(Error::Data(format!(
                "confusion total {total} != samples {}",
                self.samples
            )));
        }
        let trace: u64 = (0..self.classes).map(|i| self.confusion[i][i]).sum();
        let top1 = trace as f64 / total as f64;
        if (top1 - self.top1).abs() > 1e-12 {
            return Err(Error::Data(format!("top1 {} != trace/sum {top1}", self.top1)));
        }
        Ok(())
    }

    /// Sum of the two off-diagonal cells for a class pair (1-based).
    pub fn pair_confusions(&self, a: usize, b: usize) -> u64 {
        self.confusion[a - 1][b - 1] + self.confusion[b - 1][a - 1]
    }
}

/// Hex SHA-256 of a canonical config serialization.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run a predictor over a labeled split; `predict` returns a 1-based label.
pub fn evaluate<S>(
    samples: &[S],
    truth_label: impl Fn(&S) -> usize,
    predict: impl Fn(&S) -> Result<usize>,
    classes: usize,
    config_digest_str: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        pairs.push((truth_label(s), predict(s)?));
    }
    EvalReport::from_pairs(classes, &pairs, config_digest_str, seed)
}

/// Files written by `export_report`.
pub struct ReportFiles {
    pub report_json: PathBuf,
    pub confusion_csv: PathBuf,
    pub confusion_ppm: PathBuf,
}

/// Write `report.json`, `confusion.csv` and `confusion.ppm` into `dir`.
/// Refuses to overwrite; writes temp files first and renames on success so
/// a failure leaves no partial outputs.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<ReportFiles> {
    report.check_identities()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let files = ReportFiles {
        report_json: dir.join("report.json"),
        confusion_csv: dir.join("confusion.csv"),
        confusion_ppm: dir.join("confusion.ppm"),
    };
    for path in [&files.report_json, &files.confusion_csv, &files.confusion_ppm] {
        if path.exists() {
            return Err(Error::OutputExists { path: path.display().to_string() });
        }
    }

    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let csv_text: String = report
        .confusion
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    let ppm = confusion_heatmap(report);
    let mut ppm_bytes = format!("P6\n{0} {0}\n255\n", report.classes * HEAT_SCALE).into_bytes();
    ppm_bytes.extend(ppm.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));

    // Stage everything, then rename.
    let staged = [
        (files.report_json.clone(), json.into_bytes()),
        (files.confusion_csv.clone(), csv_text.into_bytes()),
        (files.confusion_ppm.clone(), ppm_bytes),
    ];
    let mut temps = Vec::new();
    for (target, bytes) in &staged {
        let mut tmp_name = target.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = target.with_file_name(tmp_name);
        crate::image_io::write_bytes(&tmp, bytes)?;
        temps.push((tmp, target.clone()));
    }
    for (tmp, target) in temps {
        fs::rename(&tmp, &target).map_err(|e| Error::io(target.display().to_string(), e))?;
    }
    Ok(files)
}

const HEAT_SCALE: usize = 16;

/// Row-normalized grayscale heatmap, `HEAT_SCALE` pixels per cell.
pub fn confusion_heatmap(report: &EvalReport) -> Tensor {
    let n = report.classes;
    let size = n * HEAT_SCALE;
    let mut data = vec![0.0; size * size * 3];
    for r in 0..n {
        let total: u64 = report.confusion[r].iter().sum();
        for c in 0..n {
            let value = if total == 0 {
                0.0
            } else {
                report.confusion[r][c] as f64 / total as f64
            };
            for py in 0..HEAT_SCALE {
                for px in 0..HEAT_SCALE {
                    let y = r * HEAT_SCALE + py;
                    let x = c * HEAT_SCALE + px;
                    let o = (y * size + x) * 3;
                    data[o] = value;
                    data[o + 1] = value;
                    data[o + 2] = value;
                }
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("heatmap shape")
}
