//! Numeric tables, underlying chart data, CSV ingestion and range filtering.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "interval bounds out of order: [{lo}, {hi}]"
            )));
        }
        Ok(Interval { lo, hi })
    }

    /// The whole real line.
    pub fn everything() -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    #[inline]
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// A named numeric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    name: String,
    values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::Empty(format!("column '{name}' has no values")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "column '{name}' has non-finite value at index {i}"
            )));
        }
        Ok(Column { name, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Column::new(self.name.clone(), values)
    }
}

/// A table of equally long numeric columns; the unit of the search corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    id: String,
    columns: Vec<Column>,
}

impl Dataset {
    pub fn new(id: impl Into<String>, columns: Vec<Column>) -> Result<Self> {
        let id = id.into();
        let Some(first) = columns.first() else {
            return Err(Error::Empty(format!("dataset '{id}' has no columns")));
        };
        let n_rows = first.len();
        let mut names = BTreeSet::new();
        for c in &columns {
            if c.len() != n_rows {
                return Err(Error::Shape(format!(
                    "dataset '{id}': column '{}' has {} rows, expected {n_rows}",
                    c.name(),
                    c.len()
                )));
            }
            if !names.insert(c.name()) {
                return Err(Error::InvalidArgument(format!(
                    "dataset '{id}': duplicate column name '{}'",
                    c.name()
                )));
            }
        }
        Ok(Dataset { id, columns })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].len()
    }

    /// Same columns under a new id.
    pub fn renamed(&self, id: impl Into<String>) -> Self {
        Dataset {
            id: id.into(),
            columns: self.columns.clone(),
        }
    }

    /// Keeps only the columns at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let cols = indices
            .iter()
            .map(|&i| {
                self.columns
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("column index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.id.clone(), cols)
    }

    /// Serializes to CSV text, header first. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = self.columns.iter().map(|c| c.name()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.n_rows() {
            for (j, c) in self.columns.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{}", c.values()[r]).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Parses CSV text. Rows are numbered from 1 (the header).
    pub fn from_csv(id: impl Into<String>, text: &str) -> Result<Self> {
        let id = id.into();
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::Empty(format!("dataset '{id}': empty file")));
        };
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (row, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected {} cells, found {}", names.len(), cells.len()),
                });
            }
            for (j, cell) in cells.iter().enumerate() {
                let cell = cell.trim();
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("non-numeric cell '{cell}' in column '{}'", names[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        msg: format!("non-finite cell '{cell}' in column '{}'", names[j]),
                    });
                }
                values[j].push(v);
            }
        }
        if values[0].is_empty() {
            return Err(Error::Empty(format!("dataset '{id}': header without rows")));
        }
        let columns = names
            .into_iter()
            .zip(values)
            .map(|(n, v)| Column::new(n, v))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(id, columns)
    }
}

/// Reads a CSV file; the dataset id is the file stem.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", path.display())))?;
    Dataset::from_csv(id, &text)
}

pub fn save_dataset(path: impl AsRef<Path>, t: &Dataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, t.to_csv()).map_err(|e| Error::io(path, e))
}

/// Loads every `*.csv` in a directory, sorted by file name.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Vec<Dataset>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(load_dataset).collect()
}

pub fn save_corpus_dir(dir: impl AsRef<Path>, corpus: &[Dataset]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in corpus {
        save_dataset(dir.join(format!("{}.csv", t.id())), t)?;
    }
    Ok(())
}

/// Value range a column can produce under any windowed aggregation:
/// `[min(C), sum(C)]`, reordered when the sum falls below the minimum.
pub fn column_range(c: &Column) -> Interval {
    let min = c.values().iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = c.values().iter().sum();
    if sum < min {
        Interval { lo: sum, hi: min }
    } else {
        Interval { lo: min, hi: sum }
    }
}

/// Indices of the columns whose range overlaps `yrange`, ascending.
pub fn filter_columns(t: &Dataset, yrange: Interval) -> Vec<usize> {
    t.columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| column_range(c).overlaps(&yrange))
        .map(|(i, _)| i)
        .collect()
}

/// One y-value sequence drawn as a line; x is the implicit index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSeries {
    y: Vec<f64>,
}

impl DataSeries {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "data series needs at least 2 points, got {}",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("data series has non-finite values".into()));
        }
        Ok(DataSeries { y })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// The series a line chart visualizes, one per line, sharing x positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderlyingData {
    series: Vec<DataSeries>,
}

impl UnderlyingData {
    pub fn new(series: Vec<DataSeries>) -> Result<Self> {
        let Some(first) = series.first() else {
            return Err(Error::Empty("underlying data has no series".into()));
        };
        let n = first.len();
        if series.iter().any(|s| s.len() != n) {
            return Err(Error::Shape("underlying series differ in length".into()));
        }
        Ok(UnderlyingData { series })
    }

    pub fn series(&self) -> &[DataSeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Overall `[min, max]` across all series.
    pub fn value_range(&self) -> Interval {
        let (lo, hi) = self
            .series
            .iter()
            .flat_map(|s| s.y().iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Interval { lo, hi }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Column {
        Column::new("c", v.to_vec()).unwrap()
    }

    #[test]
    fn parses_simple_csv() {
        let t = Dataset::from_csv("x", "a,b\n1,2\n3,4").unwrap();
        assert_eq!(t.n_columns(), 2);
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.column(1).values(), &[2.0, 4.0]);
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        match Dataset::from_csv("x", "a\n1\nx") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_and_empty_inputs_rejected() {
        assert!(matches!(
            Dataset::from_csv("x", "a,b\n1,2\n3"),
            Err(Error::Parse { row: 3, .. })
        ));
        assert!(matches!(Dataset::from_csv("x", ""), Err(Error::Empty(_))));
        assert!(matches!(Dataset::from_csv("x", "a,b\n"), Err(Error::Empty(_))));
        assert!(Dataset::from_csv("x", "a\nNaN").is_err());
    }

    #[test]
    fn csv_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.1, -0.0, 1e-300, 123456.789, std::f64::consts::PI];
        let t = Dataset::new("tbl", vec![col(&vals)]).unwrap();
        let p = dir.path().join("tbl.csv");
        save_dataset(&p, &t).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.id(), "tbl");
        for (a, b) in vals.iter().zip(back.column(0).values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new("x", vec![]).is_err());
        let a = Column::new("a", vec![1.0, 2.0]).unwrap();
        let b = Column::new("a", vec![1.0, 2.0]).unwrap();
        assert!(Dataset::new("x", vec![a.clone(), b]).is_err());
        let c = Column::new("c", vec![1.0]).unwrap();
        assert!(Dataset::new("x", vec![a, c]).is_err());
        assert!(Column::new("e", vec![]).is_err());
        assert!(Column::new("e", vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn column_range_examples() {
        assert_eq!(column_range(&col(&[1.0, 2.0, 3.0])), Interval { lo: 1.0, hi: 6.0 });
        assert_eq!(column_range(&col(&[-5.0, -1.0])), Interval { lo: -6.0, hi: -5.0 });
        assert_eq!(column_range(&col(&[7.0])), Interval { lo: 7.0, hi: 7.0 });
    }

    #[test]
    fn filter_examples() {
        // ranges [1,6] and [10,20]
        let t = Dataset::new(
            "t",
            vec![
                Column::new("a", vec![1.0, 5.0]).unwrap(),
                Column::new("b", vec![10.0, 10.0]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(filter_columns(&t, Interval::new(5.0, 12.0).unwrap()), vec![0, 1]);
        assert!(filter_columns(&t, Interval::new(7.0, 9.0).unwrap()).is_empty());
        assert_eq!(filter_columns(&t, Interval::new(1.0, 6.0).unwrap()), vec![0]);
        assert_eq!(filter_columns(&t, Interval::everything()), vec![0, 1]);
    }

    #[test]
    fn series_invariants() {
        assert!(DataSeries::new(vec![1.0]).is_err());
        let a = DataSeries::new(vec![1.0, 2.0]).unwrap();
        let b = DataSeries::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(UnderlyingData::new(vec![a, b]).is_err());
        assert!(UnderlyingData::new(vec![]).is_err());
    }
}
