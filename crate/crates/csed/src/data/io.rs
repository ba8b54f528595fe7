//! Dataset files on disk: one directory with a TOML manifest, plus one
//! features CSV and one labels CSV per clip. CSVs are headerless numeric
//! rows; label cells must be 0 or 1.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassVocabulary, Clip, DataError, Dataset, SplitKind};
use crate::heads::ActivityMatrix;
use crate::nn::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    classes: Vec<String>,
    #[serde(default)]
    clips: Vec<ManifestClip>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClip {
    id: String,
    split: String,
    features: String,
    labels: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn split_rows(path: &Path) -> Result<(String, Vec<String>), DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file = path.display().to_string();
    let rows: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    if rows.iter().all(|r| r.trim().is_empty()) {
        return Err(DataError::EmptyFile { file });
    }
    Ok((file, rows))
}

fn read_features(path: &Path) -> Result<Tensor, DataError> {
    let (file, rows) = split_rows(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut frames = 0;
    for (idx, row) in rows.iter().enumerate() {
        let line = idx + 1;
        let cells: Vec<&str> = row.split(',').map(str::trim).collect();
        let expected = *cols.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(DataError::ColumnCount {
                file: file.clone(),
                line,
                expected,
                got: cells.len(),
            });
        }
        for cell in cells {
            let v: f64 = cell.parse().map_err(|_| DataError::BadNumber {
                file: file.clone(),
                line,
                cell: cell.to_string(),
            })?;
            data.push(v);
        }
        frames += 1;
    }
    let cols = cols.unwrap_or(0);
    Tensor::new(vec![frames, cols], data)
        .map_err(|e| DataError::Manifest(format!("{file}: {e}")))
}

fn read_labels(path: &Path, classes: usize) -> Result<ActivityMatrix, DataError> {
    let (file, rows) = split_rows(path)?;
    let mut labels = ActivityMatrix::zeros(rows.len(), classes);
    for (idx, row) in rows.iter().enumerate() {
        let line = idx + 1;
        let cells: Vec<&str> = row.split(',').map(str::trim).collect();
        if cells.len() != classes {
            return Err(DataError::ColumnCount {
                file: file.clone(),
                line,
                expected: classes,
                got: cells.len(),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| DataError::BadNumber {
                file: file.clone(),
                line,
                cell: cell.to_string(),
            })?;
            if value == 0.0 {
                continue;
            }
            if value == 1.0 {
                labels.set(idx, col, true);
            } else {
                return Err(DataError::NonBinaryLabel {
                    file: file.clone(),
                    row: line,
                    col: col + 1,
                    value: cell.to_string(),
                });
            }
        }
    }
    Ok(labels)
}

/// Loads one clip from its two CSV files, checking frame alignment against
/// the feature file and label arity against the vocabulary.
pub(crate) fn load_clip(
    id: String,
    features_path: &Path,
    labels_path: &Path,
    split: SplitKind,
    classes: usize,
) -> Result<Clip, DataError> {
    let features = read_features(features_path)?;
    let labels = read_labels(labels_path, classes)?;
    if labels.frames() != features.rows() {
        return Err(DataError::RowCountMismatch {
            file: labels_path.display().to_string(),
            expected: features.rows(),
            got: labels.frames(),
        });
    }
    Clip::new(id, features, labels, split)
}

fn format_row<T: std::fmt::Display>(cells: impl Iterator<Item = T>) -> String {
    cells
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the dataset into `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        if clip.id.contains(['/', '\\']) {
            return Err(DataError::Manifest(format!(
                "clip id {:?} cannot name a file",
                clip.id
            )));
        }
        let features_name = format!("{}_features.csv", clip.id);
        let labels_name = format!("{}_labels.csv", clip.id);

        let mut feat_rows = Vec::with_capacity(clip.frames());
        for t in 0..clip.frames() {
            feat_rows.push(format_row(clip.features.row_slice(t).iter()));
        }
        let feat_path = dir.join(&features_name);
        fs::write(&feat_path, feat_rows.join("\n") + "\n").map_err(io_err(&feat_path))?;

        let mut label_rows = Vec::with_capacity(clip.frames());
        for t in 0..clip.frames() {
            label_rows.push(format_row(
                (0..clip.labels.classes()).map(|c| clip.labels.get(t, c) as u8),
            ));
        }
        let labels_path = dir.join(&labels_name);
        fs::write(&labels_path, label_rows.join("\n") + "\n").map_err(io_err(&labels_path))?;

        entries.push(ManifestClip {
            id: clip.id.clone(),
            split: clip.split.as_str().to_string(),
            features: features_name,
            labels: labels_name,
        });
    }
    let manifest = ManifestFile {
        classes: dataset.vocabulary.names().to_vec(),
        clips: entries,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a dataset back from its manifest. Clip paths are resolved relative
/// to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: ManifestFile =
        toml::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let vocabulary = ClassVocabulary::new(manifest.classes)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        if manifest.clips.iter().filter(|e| e.id == entry.id).count() > 1 {
            return Err(DataError::Manifest(format!("duplicate clip id {:?}", entry.id)));
        }
        let split = SplitKind::parse(&entry.split)?;
        clips.push(load_clip(
            entry.id.clone(),
            &base.join(&entry.features),
            &base.join(&entry.labels),
            split,
            vocabulary.len(),
        )?);
    }
    Dataset::new(vocabulary, clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, ClassDynamics, SynthConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = SynthConfig {
            class_names: vec!["a".into(), "b".into()],
            bins: 3,
            frames_per_clip: 8,
            clips_per_split: (2, 1, 1),
            dynamics: vec![ClassDynamics::new(0.6, 0.7), ClassDynamics::new(0.5, 0.8)],
            dependency: vec![vec![0.0; 2]; 2],
            template_seed: 1,
            noise_level: 0.4,
            seed: 9,
        };
        synth_generate(&cfg).unwrap()
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.vocabulary, ds.vocabulary);
        assert_eq!(back.clips.len(), ds.clips.len());
        for (a, b) in back.clips.iter().zip(&ds.clips) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.features, b.features, "clip {}", a.id);
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_file_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.csv", "\n  \n");
        assert!(matches!(
            read_features(&f),
            Err(DataError::EmptyFile { .. })
        ));
    }

    #[test]
    fn ragged_rows_report_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.csv", "1,2\n3\n");
        match read_features(&f) {
            Err(DataError::ColumnCount { line, expected, got, .. }) => {
                assert_eq!((line, expected, got), (2, 2, 1));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unparsable_cell_reports_line_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "x.csv", "1,2\n3,oops\n");
        match read_features(&f) {
            Err(DataError::BadNumber { line, cell, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(cell, "oops");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_binary_label_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "y.csv", "0,1\n0,2\n");
        match read_labels(&f, 2) {
            Err(DataError::NonBinaryLabel { row, col, value, .. }) => {
                assert_eq!((row, col), (2, 2));
                assert_eq!(value, "2");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn label_row_count_must_match_features() {
        let dir = tempfile::tempdir().unwrap();
        let x = write(dir.path(), "x.csv", "1,2\n3,4\n");
        let y = write(dir.path(), "y.csv", "0,1\n");
        match load_clip("c".into(), &x, &y, SplitKind::Train, 2) {
            Err(DataError::RowCountMismatch { expected, got, .. }) => {
                assert_eq!((expected, got), (2, 1));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn label_arity_must_match_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "y.csv", "0,1,0\n");
        assert!(matches!(
            read_labels(&f, 2),
            Err(DataError::ColumnCount { expected: 2, got: 3, .. })
        ));
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "manifest.toml", "classes = [\"a\"]\nextra = 1\n");
        assert!(matches!(load_dataset(&m), Err(DataError::Manifest(_))));

        let m = write(
            dir.path(),
            "manifest.toml",
            "classes = [\"a\"]\n\n[[clips]]\nid = \"c\"\nsplit = \"dev\"\nfeatures = \"x.csv\"\nlabels = \"y.csv\"\n",
        );
        write(dir.path(), "x.csv", "1\n");
        write(dir.path(), "y.csv", "0\n");
        assert!(matches!(load_dataset(&m), Err(DataError::Manifest(_))));
    }

    #[test]
    fn missing_file_carries_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.csv");
        match read_features(&missing) {
            Err(DataError::Io { path, .. }) => assert!(path.contains("absent.csv")),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
