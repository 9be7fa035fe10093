//! Importer for the published UCI HAR archive layout:
//!
//! ```text
//! <root>/
//!   train/
//!     y_train.txt                      # one activity id (1..=6) per row
//!     subject_train.txt                # optional, subject id per row
//!     Inertial Signals/
//!       body_acc_x_train.txt           # 128 whitespace-separated values per row
//!       ...                            # 9 signal files in total
//!   test/
//!     (same with the _test suffix)
//! ```
//!
//! Partitions are concatenated train-first; their ranges are kept in the
//! manifest so the published split can be recovered.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{DatasetManifest, Partition, WindowedDataset};
use crate::error::{Error, Result};

/// Channel order of the imported windows.
pub const UCIHAR_SIGNALS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

pub const UCIHAR_ACTIVITIES: [&str; 6] = [
    "WALKING",
    "WALKING_UPSTAIRS",
    "WALKING_DOWNSTAIRS",
    "SITTING",
    "STANDING",
    "LAYING",
];

const WINDOW: usize = 128;
const PUBLISHED_SUBJECTS: usize = 30;

fn read(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_rows(path: &Path, width: usize) -> Result<Vec<Vec<f32>>> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            let values = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f32>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        row,
                        reason: format!("bad number {tok:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != width {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("expected {width} values, found {}", values.len()),
                });
            }
            Ok(values)
        })
        .collect()
}

fn parse_ids(path: &Path) -> Result<Vec<usize>> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            line.trim().parse::<usize>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                row,
                reason: format!("bad integer {:?}: {e}", line.trim()),
            })
        })
        .collect()
}

struct PartitionData {
    signals: Vec<Vec<Vec<f32>>>,
    labels: Vec<usize>,
    subjects: Option<Vec<usize>>,
}

fn load_partition(root: &Path, part: &str) -> Result<PartitionData> {
    let dir = root.join(part);
    let signal_dir = dir.join("Inertial Signals");
    let signals = UCIHAR_SIGNALS
        .iter()
        .map(|s| parse_rows(&signal_dir.join(format!("{s}_{part}.txt")), WINDOW))
        .collect::<Result<Vec<_>>>()?;

    let label_path = dir.join(format!("y_{part}.txt"));
    let labels = parse_ids(&label_path)?
        .into_iter()
        .enumerate()
        .map(|(row, y)| {
            if (1..=UCIHAR_ACTIVITIES.len()).contains(&y) {
                Ok(y - 1)
            } else {
                Err(Error::Format {
                    path: label_path.clone(),
                    row,
                    reason: format!("activity id {y} outside 1..=6"),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = labels.len();
    for (name, sig) in UCIHAR_SIGNALS.iter().zip(&signals) {
        if sig.len() != rows {
            return Err(Error::Format {
                path: signal_dir.join(format!("{name}_{part}.txt")),
                row: sig.len().min(rows),
                reason: format!("{} rows but {rows} labels", sig.len()),
            });
        }
    }

    let subject_path = dir.join(format!("subject_{part}.txt"));
    let subjects = if subject_path.is_file() {
        Some(parse_ids(&subject_path)?)
    } else {
        None
    };
    Ok(PartitionData {
        signals,
        labels,
        subjects,
    })
}

/// Reads the `train` and `test` partitions under `root` (at least one must
/// exist) into a single `[N, 128, 9]` dataset with labels in `0..6`.
pub fn import_ucihar(root: impl AsRef<Path>) -> Result<WindowedDataset> {
    let root = root.as_ref();
    let parts: Vec<&str> = ["train", "test"]
        .into_iter()
        .filter(|p| root.join(p).is_dir())
        .collect();
    if parts.is_empty() {
        return Err(Error::MissingFile(PathBuf::from(root).join("train")));
    }

    let mut loaded = Vec::new();
    for part in &parts {
        loaded.push((part.to_string(), load_partition(root, part)?));
    }

    let total: usize = loaded.iter().map(|(_, p)| p.labels.len()).sum();
    let mut samples = Array3::<f32>::zeros((total, WINDOW, UCIHAR_SIGNALS.len()));
    let mut labels = Vec::with_capacity(total);
    let mut partitions = Vec::new();
    let mut subjects = BTreeSet::new();
    let mut all_subjects_known = true;
    let mut offset = 0;
    for (name, part) in &loaded {
        let rows = part.labels.len();
        for (c, sig) in part.signals.iter().enumerate() {
            for (r, row) in sig.iter().enumerate() {
                for (t, &v) in row.iter().enumerate() {
                    samples[[offset + r, t, c]] = v;
                }
            }
        }
        labels.extend_from_slice(&part.labels);
        match &part.subjects {
            Some(s) => subjects.extend(s.iter().copied()),
            None => all_subjects_known = false,
        }
        partitions.push(Partition {
            name: name.clone(),
            start: offset,
            len: rows,
        });
        offset += rows;
    }

    let manifest = DatasetManifest {
        name: "ucihar".into(),
        sample_rate_hz: 50.0,
        num_classes: UCIHAR_ACTIVITIES.len(),
        num_subjects: if all_subjects_known {
            subjects.len()
        } else {
            PUBLISHED_SUBJECTS
        },
        window_size: WINDOW,
        overlap_fraction: 0.5,
        class_names: UCIHAR_ACTIVITIES.iter().map(|s| s.to_string()).collect(),
        seed: None,
        num_windows: total,
        num_channels: UCIHAR_SIGNALS.len(),
        partitions,
    };
    WindowedDataset::new(samples, Some(labels), manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Writes a tiny archive with `rows` windows per listed partition.
    pub(crate) fn write_fixture(root: &Path, parts: &[(&str, usize)]) {
        for &(part, rows) in parts {
            let sig_dir = root.join(part).join("Inertial Signals");
            fs::create_dir_all(&sig_dir).unwrap();
            for (c, s) in UCIHAR_SIGNALS.iter().enumerate() {
                let mut f = fs::File::create(sig_dir.join(format!("{s}_{part}.txt"))).unwrap();
                for r in 0..rows {
                    let line: Vec<String> = (0..WINDOW)
                        .map(|t| format!("{:e}", (r * 1000 + c * 128 + t) as f32 * 1e-3))
                        .collect();
                    writeln!(f, "  {}", line.join("  ")).unwrap();
                }
            }
            let y: Vec<String> = (0..rows).map(|r| format!("{}", r % 6 + 1)).collect();
            fs::write(root.join(part).join(format!("y_{part}.txt")), y.join("\n")).unwrap();
        }
    }

    #[test]
    fn two_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("train", 2)]);
        let ds = import_ucihar(dir.path()).unwrap();
        assert_eq!(ds.samples.dim(), (2, 128, 9));
        assert_eq!(ds.labels, Some(vec![0, 1]));
        assert_eq!(ds.manifest.num_classes, 6);
        assert_eq!(ds.manifest.num_subjects, 30);
        assert_eq!(ds.manifest.sample_rate_hz, 50.0);
        // channel 3 (body_gyro_x), row 1, t = 5
        assert_eq!(ds.samples[[1, 5, 3]], (1000 + 3 * 128 + 5) as f32 * 1e-3);
    }

    #[test]
    fn partitions_are_concatenated_with_markers() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("train", 3), ("test", 2)]);
        let ds = import_ucihar(dir.path()).unwrap();
        assert_eq!(ds.num_windows(), 5);
        assert_eq!(
            ds.manifest.partitions,
            vec![
                Partition { name: "train".into(), start: 0, len: 3 },
                Partition { name: "test".into(), start: 3, len: 2 },
            ]
        );
    }

    #[test]
    fn missing_signal_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("train", 2)]);
        let victim = dir
            .path()
            .join("train/Inertial Signals/body_gyro_y_train.txt");
        fs::remove_file(&victim).unwrap();
        match import_ucihar(dir.path()).unwrap_err() {
            Error::MissingFile(p) => assert_eq!(p, victim),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn short_row_reports_row_index() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[("train", 3)]);
        let path = dir.path().join("train/Inertial Signals/total_acc_z_train.txt");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].split_whitespace().take(127).collect::<Vec<_>>().join(" ");
        fs::write(&path, lines.join("\n")).unwrap();
        match import_ucihar(dir.path()).unwrap_err() {
            Error::Format { row, path: p, .. } => {
                assert_eq!(row, 2);
                assert_eq!(p, path);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_directory_is_missing_train() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            import_ucihar(dir.path()).unwrap_err(),
            Error::MissingFile(_)
        ));
    }
}
