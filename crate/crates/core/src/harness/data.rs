//! Dataset ingestion (dense CSV, sparse `label idx:val` text) and client
//! partitioning.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DataFormat, PartitionScheme};
use crate::error::{Error, Result};

/// Labeled samples; labels are one-based class indices in `1..=classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y == 0 || y > classes) {
            return Err(Error::Data(format!("label {bad} outside 1..={classes}")));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn samples(&self) -> usize {
        self.features.nrows()
    }

    /// Rows `idx` as a feature matrix with zero-based labels.
    pub fn select(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let x = DMatrix::from_fn(idx.len(), self.features.ncols(), |i, c| {
            self.features[(idx[i], c)]
        });
        let y = idx.iter().map(|&i| self.labels[i] - 1).collect();
        (x, y)
    }
}

fn parse_label(tok: &str, line: usize, base: u32) -> Result<usize> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("label `{tok}` is not a number"),
    })?;
    if v.fract() != 0.0 || v < base as f64 {
        return Err(Error::Data(format!(
            "line {line}: label {tok} out of range"
        )));
    }
    Ok(v as usize + 1 - base as usize)
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("`{tok}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!(
            "line {line}: non-finite feature `{tok}`"
        )));
    }
    Ok(v)
}

/// Reads a dataset from text. With `classes = None` the class count is the
/// largest label seen. `label_base` is the smallest legal label in the file
/// (1 by default, 0 for zero-based files); labels are stored one-based.
pub fn parse_dataset(
    text: &str,
    format: DataFormat,
    classes: Option<usize>,
    label_base: u32,
) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        match format {
            DataFormat::DenseCsv => {
                let toks: Vec<&str> = raw.split(',').collect();
                if toks.len() < 2 {
                    return Err(Error::Parse {
                        line,
                        message: "need at least one feature and a label".into(),
                    });
                }
                let (feat, label) = toks.split_at(toks.len() - 1);
                if width != 0 && feat.len() != width {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected {width} features, got {}", feat.len()),
                    });
                }
                width = feat.len();
                let row = feat
                    .iter()
                    .enumerate()
                    .map(|(c, t)| parse_value(t, line).map(|v| (c, v)))
                    .collect::<Result<Vec<_>>>()?;
                labels.push(parse_label(label[0], line, label_base)?);
                rows.push(row);
            }
            DataFormat::SparseSvm => {
                let mut toks = raw.split_whitespace();
                let label = toks.next().unwrap_or_default();
                labels.push(parse_label(label, line, label_base)?);
                let mut row = Vec::new();
                let mut last = 0usize;
                for t in toks {
                    let (idx, val) = t.split_once(':').ok_or_else(|| Error::Parse {
                        line,
                        message: format!("expected `idx:val`, got `{t}`"),
                    })?;
                    let idx: usize = idx.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("bad index `{idx}`"),
                    })?;
                    if idx == 0 || idx <= last {
                        return Err(Error::Parse {
                            line,
                            message: format!("indices must be 1-based and increasing (`{t}`)"),
                        });
                    }
                    last = idx;
                    row.push((idx - 1, parse_value(val, line)?));
                }
                width = width.max(last);
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut features = DMatrix::zeros(rows.len(), width);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            features[(r, c)] = v;
        }
    }
    let seen = labels.iter().copied().max().unwrap_or(1);
    let classes = match classes {
        Some(k) if seen > k => {
            return Err(Error::Data(format!(
                "label {seen} exceeds the class count {k}"
            )))
        }
        Some(k) => k,
        None => seen.max(2),
    };
    Dataset::new(features, labels, classes)
}

pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    classes: Option<usize>,
    label_base: u32,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_dataset(&text, format, classes, label_base)
}

/// Index lists for `clients` shards whose sizes differ by at most one; the
/// first `n mod clients` shards take the extra sample.
pub fn partition(
    samples: usize,
    clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || clients > samples {
        return Err(Error::Config(format!(
            "cannot split {samples} samples across {clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..samples).collect();
    if scheme == PartitionScheme::Shuffled {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let base = samples / clients;
    let extra = samples % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for j in 0..clients {
        let len = base + usize::from(j < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_csv_row() {
        let d = parse_dataset("0.5,1.0,3\n", DataFormat::DenseCsv, None, 1).unwrap();
        assert_eq!(d.samples(), 1);
        assert_eq!(d.features.ncols(), 2);
        assert_eq!(d.labels, vec![3]);
        assert_eq!(d.features[(0, 1)], 1.0);
    }

    #[test]
    fn sparse_line() {
        let d = parse_dataset("2 1:0.5 4:-1.0\n", DataFormat::SparseSvm, None, 1).unwrap();
        assert_eq!(d.features.ncols(), 4);
        assert_eq!(
            d.features.row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.5, 0.0, 0.0, -1.0]
        );
        assert_eq!(d.labels, vec![2]);
    }

    #[test]
    fn empty_file_is_a_data_error() {
        let e = parse_dataset("", DataFormat::DenseCsv, None, 1).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let e = parse_dataset("1,2,1\n1,x,2\n", DataFormat::DenseCsv, None, 1).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_dataset("1 1:0.5\n1 0:1\n", DataFormat::SparseSvm, None, 1).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn labels_out_of_range() {
        assert!(matches!(
            parse_dataset("1,0\n", DataFormat::DenseCsv, None, 1),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            parse_dataset("1,4\n", DataFormat::DenseCsv, Some(3), 1),
            Err(Error::Data(_))
        ));
        let d = parse_dataset("1,0\n2,9\n", DataFormat::DenseCsv, Some(10), 0).unwrap();
        assert_eq!(d.labels, vec![1, 10]);
    }

    #[test]
    fn shard_sizes() {
        let s = partition(10, 3, PartitionScheme::Contiguous, 0).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert_eq!(s[1], vec![4, 5, 6]);
        let s = partition(8, 8, PartitionScheme::Contiguous, 0).unwrap();
        assert!(s.iter().all(|x| x.len() == 1));
        assert!(partition(3, 4, PartitionScheme::Contiguous, 0).is_err());
    }

    #[test]
    fn shuffled_partition_is_reproducible() {
        let a = partition(50, 7, PartitionScheme::Shuffled, 42).unwrap();
        let b = partition(50, 7, PartitionScheme::Shuffled, 42).unwrap();
        let c = partition(50, 7, PartitionScheme::Shuffled, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
