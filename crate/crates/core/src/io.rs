//! File formats: label-headed CSV matrices, label sequences, sequence
//! manifests and TOML reports. All writers go through a temporary file in the
//! destination directory followed by a rename.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::AirwayTree;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

/// Data records tagged with their 1-based line number.
type NumberedRecords = Vec<(usize, csv::StringRecord)>;

fn csv_records(path: &Path) -> Result<(Vec<String>, NumberedRecords)> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, format!("row {line}: {e}")))?;
        rows.push((line, rec));
    }
    Ok((header, rows))
}

/// Writes `m` with one column per label, columns in `order`.
pub fn write_matrix(path: &Path, labels: &[String], order: &[usize], m: &Array2<f64>) -> Result<()> {
    if labels.len() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{} labels for {} columns",
            labels.len(),
            m.ncols()
        )));
    }
    let header: Vec<&str> = order.iter().map(|&c| labels[c].as_str()).collect();
    let rows = m
        .rows()
        .into_iter()
        .map(|r| order.iter().map(|&c| format_f64(r[c])).collect());
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Reads a label-headed matrix as written by [`write_matrix`], returning the
/// header and rows in file order.
pub fn read_matrix_raw(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let (header, rows) = csv_records(path)?;
    if header.is_empty() {
        return Err(Error::parse(path, "empty header"));
    }
    let k = header.len();
    let mut values = Vec::with_capacity(rows.len() * k);
    for (line, rec) in &rows {
        if rec.len() != k {
            return Err(Error::parse(
                path,
                format!("row {line}: {} fields, header has {k}", rec.len()),
            ));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, format!("row {line}: not a number: {field:?}")))?;
            values.push(v);
        }
    }
    let m = Array2::from_shape_vec((rows.len(), k), values)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((header, m))
}

/// Reads a matrix whose header is a permutation of the tree's labels and
/// returns its columns in tree order.
pub fn read_matrix(path: &Path, tree: &AirwayTree) -> Result<Array2<f64>> {
    let (header, m) = read_matrix_raw(path)?;
    let mismatch = || {
        Error::parse(
            path,
            format!(
                "header {:?} does not match the tree labels {:?}",
                header,
                tree.labels()
            ),
        )
    };
    if header.len() != tree.len() {
        return Err(mismatch());
    }
    let mut cols = vec![usize::MAX; tree.len()];
    for (file_col, name) in header.iter().enumerate() {
        let c = tree.index_of(name).ok_or_else(mismatch)?;
        if cols[c] != usize::MAX {
            return Err(mismatch());
        }
        cols[c] = file_col;
    }
    Ok(Array2::from_shape_fn(m.dim(), |(n, c)| m[[n, cols[c]]]))
}

/// Writes `frame,label`.
pub fn write_labels(path: &Path, tree: &AirwayTree, labels: &[usize]) -> Result<()> {
    let rows = labels
        .iter()
        .enumerate()
        .map(|(n, &c)| vec![n.to_string(), tree.label(c).to_owned()]);
    write_atomic(path, &csv_bytes(&["frame", "label"], rows)?)
}

/// Writes `frame,predicted[,truth]`.
pub fn write_path(path: &Path, tree: &AirwayTree, pred: &[usize], truth: Option<&[usize]>) -> Result<()> {
    let bytes = match truth {
        Some(truth) => csv_bytes(
            &["frame", "predicted", "truth"],
            pred.iter().zip(truth).enumerate().map(|(n, (&p, &t))| {
                vec![n.to_string(), tree.label(p).to_owned(), tree.label(t).to_owned()]
            }),
        )?,
        None => csv_bytes(
            &["frame", "predicted"],
            pred.iter()
                .enumerate()
                .map(|(n, &p)| vec![n.to_string(), tree.label(p).to_owned()]),
        )?,
    };
    write_atomic(path, &bytes)
}

/// Reads the first of `columns` present in the file's header as label names.
/// Frames must be numbered 0, 1, 2, ... when a `frame` column exists.
pub fn read_labels(path: &Path, tree: &AirwayTree, columns: &[&str]) -> Result<Vec<usize>> {
    let (header, rows) = csv_records(path)?;
    let col = columns
        .iter()
        .find_map(|c| header.iter().position(|h| h == c))
        .ok_or_else(|| Error::parse(path, format!("no column named any of {columns:?}")))?;
    let frame_col = header.iter().position(|h| h == "frame");
    rows.iter()
        .enumerate()
        .map(|(n, (line, rec))| {
            if let Some(fc) = frame_col {
                let f = rec.get(fc).unwrap_or("");
                if f.parse::<usize>().ok() != Some(n) {
                    return Err(Error::parse(path, format!("row {line}: expected frame {n}, got {f:?}")));
                }
            }
            let name = rec
                .get(col)
                .ok_or_else(|| Error::parse(path, format!("row {line}: missing field")))?;
            tree.index_of(name)
                .ok_or_else(|| Error::parse(path, format!("row {line}: unknown label {name:?}")))
        })
        .collect()
}

pub fn write_curve(path: &Path, value_name: &str, curve: &[(f64, f64)]) -> Result<()> {
    let rows = curve
        .iter()
        .map(|&(l, v)| vec![format_f64(l), format_f64(v)]);
    write_atomic(path, &csv_bytes(&["lambda", value_name], rows)?)
}

pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let (header, m) = read_matrix_raw(path)?;
    if header.len() != 2 || header[0] != "lambda" {
        return Err(Error::parse(path, "expected a lambda,value table"));
    }
    Ok(m.rows().into_iter().map(|r| (r[0], r[1])).collect())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub likelihoods: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

/// A set of sequences with their files. Relative paths are resolved against
/// the manifest's directory on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<PathBuf>,
    #[serde(default)]
    pub split: String,
    pub sequences: Vec<ManifestEntry>,
}

impl SequenceManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: SequenceManifest = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        if let Some(t) = &m.tree {
            // keep the built-in name usable from manifests
            if t.as_os_str() != crate::tree::PHANTOM_TREE_NAME || base.join(t).exists() {
                m.tree = Some(resolve(t));
            }
        }
        let mut ids = HashSet::new();
        for e in &mut m.sequences {
            if !ids.insert(e.id.clone()) {
                return Err(Error::parse(path, format!("duplicate sequence id {:?}", e.id)));
            }
            e.likelihoods = resolve(&e.likelihoods);
            e.logits = e.logits.as_deref().map(resolve);
            e.truth = e.truth.as_deref().map(resolve);
            for f in std::iter::once(&e.likelihoods).chain(&e.logits).chain(&e.truth) {
                if !f.exists() {
                    return Err(Error::parse(
                        path,
                        format!("sequence {:?}: missing file {}", e.id, f.display()),
                    ));
                }
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matrix_round_trip_in_any_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let tree = AirwayTree::phantom();
        let k = tree.len();
        let m = Array2::from_shape_fn((3, k), |(n, c)| (n * k + c) as f64 / 7.0);
        let p = dir.path().join("m.csv");
        write_matrix(&p, tree.labels(), &tree.depth_first_order(), &m).unwrap();
        assert_eq!(read_matrix(&p, &tree).unwrap(), m);
    }

    #[test]
    fn matrix_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "A,B\n0.5,0.5\n0.5,x\n").unwrap();
        let err = read_matrix_raw(&p).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("bad.csv"), "{err}");

        std::fs::write(&p, "A,B\n0.5\n").unwrap();
        assert!(read_matrix_raw(&p).is_err());

        let tree = AirwayTree::phantom();
        std::fs::write(&p, "A,B\n0.5,0.5\n").unwrap();
        assert!(read_matrix(&p, &tree).is_err());
        assert!(read_matrix_raw(&dir.path().join("nope.csv")).unwrap_err().is_io());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tree = AirwayTree::phantom();
        let labels = vec![0, 3, 3, 16, 0];
        let p = dir.path().join("l.csv");
        write_labels(&p, &tree, &labels).unwrap();
        assert_eq!(read_labels(&p, &tree, &["label"]).unwrap(), labels);

        let q = dir.path().join("path.csv");
        let truth = vec![0, 3, 2, 16, 0];
        write_path(&q, &tree, &labels, Some(&truth)).unwrap();
        assert_eq!(read_labels(&q, &tree, &["predicted"]).unwrap(), labels);
        assert_eq!(read_labels(&q, &tree, &["label", "truth"]).unwrap(), truth);

        std::fs::write(&p, "frame,label\n0,Trachea\n1,Nowhere\n").unwrap();
        assert!(read_labels(&p, &tree, &["label"]).unwrap_err().to_string().contains("row 3"));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "x\n").unwrap();
        let mp = dir.path().join("m.toml");
        std::fs::write(
            &mp,
            "tree = \"phantom_tree\"\nsplit = \"val\"\n[[sequences]]\nid = \"a\"\nlikelihoods = \"a.csv\"\n",
        )
        .unwrap();
        let m = SequenceManifest::load(&mp).unwrap();
        assert_eq!(m.sequences[0].likelihoods, dir.path().join("a.csv"));
        assert_eq!(m.tree.as_deref(), Some(Path::new("phantom_tree")));

        std::fs::write(
            &mp,
            "[[sequences]]\nid = \"a\"\nlikelihoods = \"a.csv\"\n[[sequences]]\nid = \"a\"\nlikelihoods = \"a.csv\"\n",
        )
        .unwrap();
        assert!(SequenceManifest::load(&mp).is_err());
        std::fs::write(&mp, "[[sequences]]\nid = \"a\"\nlikelihoods = \"missing.csv\"\n").unwrap();
        assert!(SequenceManifest::load(&mp).is_err());
    }

    #[test]
    fn curve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let curve = vec![(0.0, 1.5), (0.25, 1.25e-7)];
        write_curve(&p, "nll", &curve).unwrap();
        assert_eq!(read_curve(&p).unwrap(), curve);
    }

    proptest! {
        #[test]
        fn f64_text_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            prop_assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
