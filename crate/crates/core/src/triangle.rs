//! Run-off triangle data model and the training / validation / maturity
//! partitioning used to fit pooled ensembles.
//!
//! Cells are indexed by accident period `i` and development period `j`,
//! both starting at 1. The calendar period is always derived as
//! `t = i + j - 1`. For an `I x I` triangle the observed upper triangle is
//! `{t <= I}` and the out-of-sample region is `{t > I}` (which forces
//! `i >= 2`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Two-subset split points: the last accident period of the mature band.
pub const TWO_SUBSET_SPLITS: [u32; 17] = [3, 5, 7, 9, 11, 13, 14, 15, 16, 17, 18, 19, 23, 26, 28, 31, 33];

/// Three-subset split pairs built on top of selected two-subset strategies.
pub const THREE_SUBSET_SPLITS: [(u32, u32); 4] = [(5, 15), (15, 29), (17, 31), (23, 33)];

/// Validation depth (calendar diagonals) used when nothing else is configured.
pub const DEFAULT_VALIDATION_DIAGONALS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Cell {
    pub accident: u32,
    pub development: u32,
}

impl Cell {
    /// Panics if either index is zero.
    pub fn new(accident: u32, development: u32) -> Self {
        assert!(accident >= 1 && development >= 1, "periods are 1-indexed");
        Cell { accident, development }
    }

    #[inline]
    pub fn calendar(&self) -> u32 {
        self.accident + self.development - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TriangleKind {
    Paid,
    Reported,
    Finalised,
}

impl TriangleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TriangleKind::Paid => "paid",
            TriangleKind::Reported => "reported",
            TriangleKind::Finalised => "finalised",
        }
    }
}

/// A square grid of incremental amounts. Every upper-triangle cell is
/// present; lower-triangle cells may carry hold-out values (e.g. from a
/// simulator) that are never used for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangle {
    size: u32,
    kind: TriangleKind,
    values: Vec<Option<f64>>,
}

impl Triangle {
    /// Builds a triangle from long-format `(accident, development, value)`
    /// rows. The size is the largest period index seen.
    pub fn ingest(rows: &[(u32, u32, f64)], kind: TriangleKind) -> Result<Self> {
        let size = rows.iter().map(|&(i, j, _)| i.max(j)).max().unwrap_or(0);
        if size == 0 {
            return Err(Error::InvalidInput("no rows supplied".into()));
        }
        Self::ingest_sized(size, rows, kind)
    }

    pub fn ingest_sized(size: u32, rows: &[(u32, u32, f64)], kind: TriangleKind) -> Result<Self> {
        let n = size as usize;
        let mut values = vec![None; n * n];
        for &(i, j, v) in rows {
            if i < 1 || j < 1 || i > size || j > size {
                return Err(Error::CellOutOfRange { accident: i, development: j, size });
            }
            if !v.is_finite() {
                return Err(Error::NonFiniteAmount { accident: i, development: j });
            }
            if v < 0.0 {
                return Err(Error::NegativeAmount { accident: i, development: j, value: v });
            }
            let slot = &mut values[(i as usize - 1) * n + j as usize - 1];
            if slot.is_some() {
                return Err(Error::DuplicateCell { accident: i, development: j });
            }
            *slot = Some(v);
        }
        let tri = Triangle { size, kind, values };
        if let Some(c) = tri.upper_cells().into_iter().find(|c| tri.get(*c).is_none()) {
            return Err(Error::IncompleteTriangle { accident: c.accident, development: c.development });
        }
        Ok(tri)
    }

    /// Builds a triangle from a complete `size x size` row-major grid; the
    /// lower part is kept as hold-out truth.
    pub fn from_square(size: u32, kind: TriangleKind, grid: &[f64]) -> Result<Self> {
        let n = size as usize;
        if grid.len() != n * n {
            return Err(Error::InvalidInput(format!("expected {} values, got {}", n * n, grid.len())));
        }
        let rows: Vec<(u32, u32, f64)> = (0..n * n)
            .map(|k| ((k / n) as u32 + 1, (k % n) as u32 + 1, grid[k]))
            .collect();
        Self::ingest_sized(size, &rows, kind)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn kind(&self) -> TriangleKind {
        self.kind
    }

    pub fn get(&self, cell: Cell) -> Option<f64> {
        if cell.accident > self.size || cell.development > self.size {
            return None;
        }
        let n = self.size as usize;
        self.values[(cell.accident as usize - 1) * n + cell.development as usize - 1]
    }

    /// Observed value of an upper-triangle cell. Panics for cells outside the grid.
    pub fn value(&self, cell: Cell) -> f64 {
        self.get(cell).expect("cell has no value")
    }

    pub fn is_observed(&self, cell: Cell) -> bool {
        cell.calendar() <= self.size
    }

    /// `D_in`, sorted by accident then development period.
    pub fn upper_cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity((self.size * (self.size + 1) / 2) as usize);
        for i in 1..=self.size {
            for j in 1..=(self.size + 1 - i) {
                out.push(Cell::new(i, j));
            }
        }
        out
    }

    /// `D_out`, sorted by accident then development period.
    pub fn lower_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for i in 2..=self.size {
            for j in (self.size + 2 - i)..=self.size {
                out.push(Cell::new(i, j));
            }
        }
        out
    }

    /// True when every lower-triangle cell carries a hold-out value.
    pub fn has_lower_truth(&self) -> bool {
        self.lower_cells().iter().all(|c| self.get(*c).is_some())
    }

    pub fn rows(&self) -> Vec<(u32, u32, f64)> {
        let n = self.size as usize;
        self.values
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| ((k / n) as u32 + 1, (k % n) as u32 + 1, v)))
            .collect()
    }
}

/// Where validation data is split into maturity bands.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PartitionStrategy {
    /// Last accident period of each band except the final one.
    pub split_points: Vec<u32>,
    /// Number of latest calendar diagonals held out for validation.
    pub validation_diagonals: u32,
}

impl PartitionStrategy {
    pub fn new(split_points: Vec<u32>, validation_diagonals: u32) -> Self {
        PartitionStrategy { split_points, validation_diagonals }
    }

    /// Single band: the standard linear pool.
    pub fn standard(validation_diagonals: u32) -> Self {
        Self::new(Vec::new(), validation_diagonals)
    }

    /// Two-subset strategy `index` (1-based) of the published split table.
    pub fn two_subset(index: usize, validation_diagonals: u32) -> Option<Self> {
        let s = *TWO_SUBSET_SPLITS.get(index.checked_sub(1)?)?;
        Some(Self::new(vec![s], validation_diagonals))
    }

    pub fn validate(&self, size: u32) -> Result<()> {
        let mut prev = 1;
        for &s in &self.split_points {
            if s < 2 || s + 1 > size {
                return Err(Error::InvalidPartition(format!("split point {s} outside [2, {}]", size - 1)));
            }
            if s <= prev && prev != 1 {
                return Err(Error::InvalidPartition("split points must be strictly increasing".into()));
            }
            prev = s;
        }
        Ok(())
    }

    /// Inclusive accident-period bands `(first, last)`.
    pub fn bands(&self, size: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.split_points.len() + 1);
        let mut start = 1;
        for &s in &self.split_points {
            out.push((start, s));
            start = s + 1;
        }
        out.push((start, size));
        out
    }

    /// Share of upper-triangle cells whose accident period falls in the
    /// first band.
    pub fn first_band_share(&self, size: u32) -> f64 {
        let last = self.bands(size)[0].1;
        let n = size as u64;
        let in_band: u64 = (1..=last as u64).map(|i| n + 1 - i).sum();
        in_band as f64 / (n * (n + 1) / 2) as f64
    }
}

/// One maturity band of validation data.
#[derive(Debug, Clone, PartialEq)]
pub struct MaturitySubset {
    pub first_accident: u32,
    pub last_accident: u32,
    /// `S_k`: validation cells whose accident period is in this band.
    pub validation: Vec<Cell>,
    /// `U_k = S_1 ∪ … ∪ S_k`, in the same order as the full validation set.
    pub cumulative: Vec<Cell>,
    /// Out-of-sample cells in this band.
    pub test: Vec<Cell>,
}

impl MaturitySubset {
    pub fn contains_accident(&self, accident: u32) -> bool {
        (self.first_accident..=self.last_accident).contains(&accident)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    size: u32,
    validation_diagonals: u32,
    train: Vec<Cell>,
    validation: Vec<Cell>,
    out_of_sample: Vec<Cell>,
    subsets: Vec<MaturitySubset>,
}

impl DataPartition {
    /// Holds out the latest `tau` calendar diagonals, keeping boundary
    /// cells in training wherever an accident or development period would
    /// otherwise lose all of its training data.
    pub fn split_train_val(tri: &Triangle, tau: u32) -> Result<Self> {
        let size = tri.size();
        if tau == 0 {
            return Err(Error::InvalidPartition("at least one validation diagonal is required".into()));
        }
        if tau >= size {
            return Err(Error::InvalidPartition(format!(
                "{tau} validation diagonals leave no training diagonal in a {size}x{size} triangle"
            )));
        }
        let cutoff = size - tau;
        let upper = tri.upper_cells();
        let mut in_train: Vec<bool> = upper.iter().map(|c| c.calendar() <= cutoff).collect();

        let n = size as usize;
        let mut row_count = vec![0usize; n + 1];
        let mut col_count = vec![0usize; n + 1];
        for (c, t) in upper.iter().zip(&in_train) {
            if *t {
                row_count[c.accident as usize] += 1;
                col_count[c.development as usize] += 1;
            }
        }
        for (k, c) in upper.iter().enumerate() {
            if in_train[k] {
                continue;
            }
            let orphan_row = row_count[c.accident as usize] == 0 && c.development == 1;
            let orphan_col = col_count[c.development as usize] == 0 && c.accident == 1;
            if orphan_row || orphan_col {
                in_train[k] = true;
                row_count[c.accident as usize] += 1;
                col_count[c.development as usize] += 1;
            }
        }
        if (1..=n).any(|p| row_count[p] == 0 || col_count[p] == 0) {
            return Err(Error::InvalidPartition("training coverage cannot be satisfied".into()));
        }
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for (c, t) in upper.into_iter().zip(in_train) {
            if t {
                train.push(c);
            } else {
                validation.push(c);
            }
        }
        if validation.is_empty() {
            return Err(Error::InvalidPartition("no validation cells remain after coverage exceptions".into()));
        }
        Ok(DataPartition {
            size,
            validation_diagonals: tau,
            train,
            validation,
            out_of_sample: tri.lower_cells(),
            subsets: Vec::new(),
        })
    }

    /// Assigns validation and out-of-sample cells to maturity bands.
    pub fn assign_maturity_subsets(&self, strategy: &PartitionStrategy) -> Result<Self> {
        strategy.validate(self.size)?;
        let mut subsets = Vec::new();
        for (first, last) in strategy.bands(self.size) {
            let in_band = |c: &&Cell| (first..=last).contains(&c.accident);
            let validation: Vec<Cell> = self.validation.iter().filter(in_band).copied().collect();
            if validation.is_empty() {
                return Err(Error::InvalidPartition(format!(
                    "maturity band {first}-{last} has no validation cells"
                )));
            }
            let cumulative = self.validation.iter().filter(|c| c.accident <= last).copied().collect();
            let test = self.out_of_sample.iter().filter(in_band).copied().collect();
            subsets.push(MaturitySubset { first_accident: first, last_accident: last, validation, cumulative, test });
        }
        Ok(DataPartition { subsets, ..self.clone() })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn validation_diagonals(&self) -> u32 {
        self.validation_diagonals
    }

    pub fn train(&self) -> &[Cell] {
        &self.train
    }

    pub fn validation(&self) -> &[Cell] {
        &self.validation
    }

    pub fn out_of_sample(&self) -> &[Cell] {
        &self.out_of_sample
    }

    pub fn in_sample(&self) -> Vec<Cell> {
        let mut all: Vec<Cell> = self.train.iter().chain(&self.validation).copied().collect();
        all.sort();
        all
    }

    /// Maturity bands; empty until [`Self::assign_maturity_subsets`] runs.
    pub fn subsets(&self) -> &[MaturitySubset] {
        &self.subsets
    }

    /// Index of the band an accident period falls in.
    pub fn subset_of(&self, accident: u32) -> Option<usize> {
        self.subsets.iter().position(|s| s.contains_accident(accident))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upper_rows(size: u32) -> Vec<(u32, u32, f64)> {
        let mut rows = Vec::new();
        for i in 1..=size {
            for j in 1..=(size + 1 - i) {
                rows.push((i, j, (i * 100 + j) as f64));
            }
        }
        rows
    }

    #[test]
    fn smallest_triangle() {
        let tri = Triangle::ingest(&[(1, 1, 5.0), (1, 2, 3.0), (2, 1, 4.0)], TriangleKind::Paid).unwrap();
        assert_eq!(tri.size(), 2);
        assert_eq!(tri.lower_cells(), vec![Cell::new(2, 2)]);
    }

    #[test]
    fn ingestion_errors() {
        let dup = [(1, 1, 5.0), (1, 1, 3.0), (1, 2, 1.0), (2, 1, 4.0)];
        assert!(matches!(Triangle::ingest(&dup, TriangleKind::Paid), Err(Error::DuplicateCell { .. })));
        let neg = [(1, 1, -5.0), (1, 2, 1.0), (2, 1, 4.0)];
        assert!(matches!(Triangle::ingest(&neg, TriangleKind::Paid), Err(Error::NegativeAmount { .. })));
        let missing = [(1, 1, 5.0), (2, 1, 4.0), (1, 2, 1.0), (3, 1, 1.0)];
        assert!(matches!(
            Triangle::ingest(&missing, TriangleKind::Paid),
            Err(Error::IncompleteTriangle { accident: 1, development: 3 })
        ));
    }

    #[test]
    fn lower_triangle_of_forty() {
        let tri = Triangle::ingest(&upper_rows(40), TriangleKind::Paid).unwrap();
        assert_eq!(tri.upper_cells().len(), 820);
        // Enumeration oracle: count cells with i + j - 1 > 40 and i >= 2.
        let mut expected = 0;
        for i in 1..=40u32 {
            for j in 1..=40u32 {
                if i + j - 1 > 40 && i >= 2 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 780);
        assert_eq!(tri.lower_cells().len(), expected);
    }

    #[test]
    fn four_by_four_single_diagonal() {
        let tri = Triangle::ingest(&upper_rows(4), TriangleKind::Paid).unwrap();
        let p = DataPartition::split_train_val(&tri, 1).unwrap();
        assert_eq!(p.validation(), &[Cell::new(2, 3), Cell::new(3, 2)]);
        assert!(p.train().contains(&Cell::new(1, 4)));
        assert!(p.train().contains(&Cell::new(4, 1)));
        assert!(DataPartition::split_train_val(&tri, 0).is_err());
    }

    #[test]
    fn forty_by_forty_three_diagonals() {
        let tri = Triangle::ingest(&upper_rows(40), TriangleKind::Paid).unwrap();
        let p = DataPartition::split_train_val(&tri, 3).unwrap();
        let retained = [(1, 40), (40, 1), (1, 39), (39, 1), (1, 38), (38, 1)];
        for (i, j) in retained {
            assert!(p.train().contains(&Cell::new(i, j)));
        }
        let expected: Vec<Cell> = tri
            .upper_cells()
            .into_iter()
            .filter(|c| c.calendar() >= 38 && !retained.contains(&(c.accident, c.development)))
            .collect();
        assert_eq!(p.validation(), expected.as_slice());
        assert_eq!(p.train().len() + p.validation().len(), 820);
    }

    #[test]
    fn maturity_bands_match_published_tables() {
        let tri = Triangle::ingest(&upper_rows(40), TriangleKind::Paid).unwrap();
        let p = DataPartition::split_train_val(&tri, 3).unwrap();
        let s = PartitionStrategy::new(vec![15], 3);
        assert_eq!((s.first_band_share(40) * 100.0).round(), 60.0);
        let a = p.assign_maturity_subsets(&s).unwrap();
        assert_eq!(a.subsets().len(), 2);
        assert!(a.subsets()[0].test.iter().all(|c| (2..=15).contains(&c.accident)));
        assert_eq!(a.subsets()[0].test.iter().map(|c| c.accident).min(), Some(2));
        assert!(a.subsets()[1].test.iter().all(|c| (16..=40).contains(&c.accident)));
        assert_eq!(a.subsets()[1].cumulative, p.validation());

        let three = p.assign_maturity_subsets(&PartitionStrategy::new(vec![15, 29], 3)).unwrap();
        let bands: Vec<_> = three.subsets().iter().map(|s| (s.first_accident, s.last_accident)).collect();
        assert_eq!(bands, vec![(1, 15), (16, 29), (30, 40)]);

        let slp = p.assign_maturity_subsets(&PartitionStrategy::standard(3)).unwrap();
        assert_eq!(slp.subsets().len(), 1);
        assert_eq!(slp.subsets()[0].cumulative, p.validation());
    }

    #[test]
    fn published_two_subset_shares() {
        // Rounded shares of the first band as tabulated for a 40x40 triangle.
        let shares = [14, 23, 32, 40, 47, 54, 57, 60, 63, 66, 69, 72, 81, 87, 90, 95, 97];
        for (k, share) in shares.iter().enumerate() {
            let s = PartitionStrategy::two_subset(k + 1, 3).unwrap();
            assert_eq!((s.first_band_share(40) * 100.0).round() as i32, *share, "strategy {}", k + 1);
        }
    }

    #[test]
    fn split_points_are_validated() {
        assert!(PartitionStrategy::new(vec![1], 3).validate(40).is_err());
        assert!(PartitionStrategy::new(vec![40], 3).validate(40).is_err());
        assert!(PartitionStrategy::new(vec![15, 15], 3).validate(40).is_err());
        assert!(PartitionStrategy::new(vec![15, 29], 3).validate(40).is_ok());
    }
}
