//! Heat-map algebra on dense row-major grids.
//!
//! A [`HeatMap`] is a probability distribution over grid cells; a [`ScoreGrid`]
//! holds the unnormalized matching scores a model emits before the softmax.
//! Everything here is a pure function of its inputs.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on the total mass of a heat map.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid score grid: {0}")]
    InvalidScoreGrid(String),
    #[error("invalid heat map: {0}")]
    InvalidHeatMap(String),
    #[error("incompatible pyramid levels: {from_rows}x{from_cols} -> {to_rows}x{to_cols}")]
    IncompatiblePyramidLevels {
        from_rows: usize,
        from_cols: usize,
        to_rows: usize,
        to_cols: usize,
    },
    #[error("sigma must be >= 0, got {0}")]
    NegativeSigma(f64),
    #[error("location ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// A cell index into a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridLoc {
    pub row: usize,
    pub col: usize,
}

impl GridLoc {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Cell-center coordinates `(u, v)` in `[0, 1]²`, `u` along columns.
    pub fn normalized(&self, rows: usize, cols: usize) -> (f64, f64) {
        (
            (self.col as f64 + 0.5) / cols as f64,
            (self.row as f64 + 0.5) / rows as f64,
        )
    }

    /// Euclidean distance in cells.
    pub fn distance(&self, other: &GridLoc) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        dr.hypot(dc)
    }

    /// The cell containing this location after an integer-ratio resolution change.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> GridLoc {
        GridLoc::new(self.row * to.0 / from.0, self.col * to.1 / from.1)
    }

    pub fn check_bounds(&self, rows: usize, cols: usize) -> Result<(), GridError> {
        if self.row < rows && self.col < cols {
            Ok(())
        } else {
            Err(GridError::OutOfBounds {
                row: self.row,
                col: self.col,
                rows,
                cols,
            })
        }
    }
}

/// Nearest cell center for continuous coordinates `(u, v)` in `[0, 1]²`.
pub fn rasterize(u: f64, v: f64, rows: usize, cols: usize) -> GridLoc {
    let to_cell = |x: f64, n: usize| -> usize {
        let idx = (x * n as f64 - 0.5).round();
        idx.clamp(0.0, (n - 1) as f64) as usize
    };
    GridLoc::new(to_cell(v, rows), to_cell(u, cols))
}

/// Unnormalized per-cell matching scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidScoreGrid("empty grid".into()));
        }
        if values.len() != rows * cols {
            return Err(GridError::InvalidScoreGrid(format!(
                "expected {} cells, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn scaled(&self, factor: f64) -> ScoreGrid {
        ScoreGrid {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A probability distribution over a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl HeatMap {
    /// Validates nonnegativity and unit mass.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidHeatMap("empty grid".into()));
        }
        if values.len() != rows * cols {
            return Err(GridError::InvalidHeatMap(format!(
                "expected {} cells, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GridError::InvalidHeatMap(format!("cell value {bad}")));
        }
        let mass: f64 = values.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(GridError::InvalidHeatMap(format!("total mass {mass}")));
        }
        Ok(Self { rows, cols, values })
    }

    /// Renormalizes an arbitrary nonnegative grid with positive mass.
    pub fn from_weights(rows: usize, cols: usize, mut values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(GridError::InvalidHeatMap("shape mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::InvalidHeatMap("negative or non-finite weight".into()));
        }
        let mass: f64 = values.iter().sum();
        if mass <= 0.0 {
            return Err(GridError::InvalidHeatMap("zero mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { rows, cols, values })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(rows: usize, cols: usize, at: GridLoc) -> Result<Self, GridError> {
        at.check_bounds(rows, cols)?;
        let mut values = vec![0.0; rows * cols];
        values[at.row * cols + at.col] = 1.0;
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Header (`rows`, `cols` as little-endian u32) followed by row-major f64 cells.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(rows * cols);
        let mut cell = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut cell)?;
            values.push(f64::from_le_bytes(cell));
        }
        HeatMap::new(rows, cols, values)
    }

    /// `row,col,value` lines with a header, for plotting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GridError> {
        let mut out = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| GridError::Io(io::Error::other(e));
        out.write_record(["row", "col", "value"]).map_err(io_err)?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.write_record([r.to_string(), c.to_string(), format!("{:e}", self.get(r, c))])
                    .map_err(io_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Softmax over all cells.
pub fn normalize(raw: &ScoreGrid) -> Result<HeatMap, GridError> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(GridError::InvalidScoreGrid("non-finite cell".into()));
    }
    let values = softmax(&raw.values);
    Ok(HeatMap {
        rows: raw.rows,
        cols: raw.cols,
        values,
    })
}

/// Numerically stable softmax of a finite slice.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Index of the largest value; ties go to the smallest index.
pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Most confident cell, ties broken by smallest row-major index.
pub fn argmax_loc(h: &HeatMap) -> GridLoc {
    let idx = argmax_index(&h.values);
    GridLoc::new(idx / h.cols, idx % h.cols)
}

/// Isotropic Gaussian label centered on `center`, truncated to the grid and renormalized.
/// `sigma == 0` yields a one-hot map.
pub fn gaussian_pseudo_gt(
    center: GridLoc,
    rows: usize,
    cols: usize,
    sigma: f64,
) -> Result<HeatMap, GridError> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(GridError::NegativeSigma(sigma));
    }
    center.check_bounds(rows, cols)?;
    if sigma == 0.0 {
        return HeatMap::one_hot(rows, cols, center);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    // exp(-(dr² + dc²)·inv) factorizes into a row and a column profile.
    let profile = |n: usize, c: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let d = i as f64 - c as f64;
                (-d * d * inv).exp()
            })
            .collect()
    };
    let row_w = profile(rows, center.row);
    let col_w = profile(cols, center.col);
    let mut values = Vec::with_capacity(rows * cols);
    for rw in &row_w {
        for cw in &col_w {
            values.push(rw * cw);
        }
    }
    HeatMap::from_weights(rows, cols, values)
}

/// Non-overlapping block sums of a row-major grid; mass is conserved exactly up to rounding.
pub fn block_sum(
    values: &[f64],
    rows: usize,
    cols: usize,
    target_rows: usize,
    target_cols: usize,
) -> Result<Vec<f64>, GridError> {
    if target_rows == 0
        || target_cols == 0
        || rows % target_rows != 0
        || cols % target_cols != 0
        || values.len() != rows * cols
    {
        return Err(GridError::IncompatiblePyramidLevels {
            from_rows: rows,
            from_cols: cols,
            to_rows: target_rows,
            to_cols: target_cols,
        });
    }
    let br = rows / target_rows;
    let bc = cols / target_cols;
    let mut out = vec![0.0; target_rows * target_cols];
    for r in 0..rows {
        let orow = (r / br) * target_cols;
        for c in 0..cols {
            out[orow + c / bc] += values[r * cols + c];
        }
    }
    Ok(out)
}

/// Mass-conserving sum-pool to a coarser grid, renormalized.
pub fn downsample(x: &HeatMap, target_rows: usize, target_cols: usize) -> Result<HeatMap, GridError> {
    let pooled = block_sum(&x.values, x.rows, x.cols, target_rows, target_cols)?;
    HeatMap::from_weights(target_rows, target_cols, pooled)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(h: &HeatMap) -> f64 {
    entropy_of(&h.values)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_zero_grid_is_uniform() {
        let h = normalize(&ScoreGrid::zeros(2, 2)).unwrap();
        assert!(h.values().iter().all(|v| approx(*v, 0.25, 1e-15)));
    }

    #[test]
    fn normalize_closed_form() {
        let h = normalize(&ScoreGrid::new(1, 2, vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!(approx(h.values()[0], 0.25, 1e-12));
        assert!(approx(h.values()[1], 0.75, 1e-12));
    }

    #[test]
    fn normalize_matches_direct_exp_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h = normalize(&ScoreGrid::new(3, 3, raw.clone()).unwrap()).unwrap();
        let denom: f64 = raw.iter().map(|v| v.exp()).sum();
        for (i, v) in raw.iter().enumerate() {
            assert!(approx(h.values()[i], v.exp() / denom, 1e-14));
        }
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let bad = ScoreGrid::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(normalize(&bad), Err(GridError::InvalidScoreGrid(_))));
        let bad = ScoreGrid::new(1, 2, vec![f64::NEG_INFINITY, 1.0]).unwrap();
        assert!(normalize(&bad).is_err());
    }

    #[test]
    fn argmax_cases() {
        let h = HeatMap::one_hot(3, 4, GridLoc::new(1, 2)).unwrap();
        assert_eq!(argmax_loc(&h), GridLoc::new(1, 2));
        assert_eq!(argmax_loc(&HeatMap::uniform(2, 2)), GridLoc::new(0, 0));
    }

    #[test]
    fn argmax_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w: Vec<f64> = (0..25).map(|_| rng.random_range(0..4) as f64).collect();
            let h = HeatMap::from_weights(5, 5, w).unwrap();
            let mut best = (0, 0);
            for r in 0..5 {
                for c in 0..5 {
                    if h.get(r, c) > h.get(best.0, best.1) {
                        best = (r, c);
                    }
                }
            }
            assert_eq!(argmax_loc(&h), GridLoc::new(best.0, best.1));
        }
    }

    #[test]
    fn gaussian_degenerate_and_ratio() {
        let h = gaussian_pseudo_gt(GridLoc::new(2, 2), 5, 5, 0.0).unwrap();
        assert_eq!(h, HeatMap::one_hot(5, 5, GridLoc::new(2, 2)).unwrap());
        let h = gaussian_pseudo_gt(GridLoc::new(2, 2), 5, 5, 1.0).unwrap();
        assert!(approx(h.get(2, 2) / h.get(2, 3), 0.5f64.exp(), 1e-12));
    }

    #[test]
    fn gaussian_matches_per_cell_oracle() {
        let sigma = 4.0;
        let h = gaussian_pseudo_gt(GridLoc::new(0, 0), 8, 8, sigma).unwrap();
        let mut w = [0.0; 64];
        for r in 0..8 {
            for c in 0..8 {
                w[r * 8 + c] = (-((r * r + c * c) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let total: f64 = w.iter().sum();
        for (i, v) in w.iter().enumerate() {
            assert!(approx(h.values()[i], v / total, 1e-14));
        }
    }

    #[test]
    fn gaussian_rejects_negative_sigma() {
        assert!(matches!(
            gaussian_pseudo_gt(GridLoc::new(0, 0), 3, 3, -1.0),
            Err(GridError::NegativeSigma(_))
        ));
        assert!(gaussian_pseudo_gt(GridLoc::new(3, 0), 3, 3, 1.0).is_err());
    }

    #[test]
    fn downsample_cases() {
        let d = downsample(&HeatMap::uniform(4, 4), 2, 2).unwrap();
        assert!(d.values().iter().all(|v| approx(*v, 0.25, 1e-15)));
        let d = downsample(&HeatMap::one_hot(4, 4, GridLoc::new(0, 0)).unwrap(), 2, 2).unwrap();
        assert_eq!(d, HeatMap::one_hot(2, 2, GridLoc::new(0, 0)).unwrap());
        assert!(matches!(
            downsample(&HeatMap::uniform(4, 4), 3, 2),
            Err(GridError::IncompatiblePyramidLevels { .. })
        ));
    }

    #[test]
    fn downsample_matches_block_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let h = HeatMap::from_weights(8, 8, w).unwrap();
        let d = downsample(&h, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let s = h.get(2 * r, 2 * c)
                    + h.get(2 * r, 2 * c + 1)
                    + h.get(2 * r + 1, 2 * c)
                    + h.get(2 * r + 1, 2 * c + 1);
                assert!(approx(d.get(r, c), s, 1e-15));
            }
        }
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&HeatMap::one_hot(3, 3, GridLoc::new(1, 1)).unwrap()), 0.0);
        assert!(approx(entropy(&HeatMap::uniform(4, 5)), 20f64.ln(), 1e-12));
        let h = HeatMap::new(1, 3, vec![0.5, 0.25, 0.25]).unwrap();
        assert!(approx(entropy(&h), 1.5 * 2f64.ln(), 1e-12));
    }

    #[test]
    fn heatmap_validation() {
        assert!(HeatMap::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(HeatMap::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(HeatMap::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn rasterize_nearest_center() {
        assert_eq!(rasterize(0.0, 0.0, 4, 4), GridLoc::new(0, 0));
        assert_eq!(rasterize(1.0, 1.0, 4, 4), GridLoc::new(3, 3));
        let loc = GridLoc::new(2, 1);
        let (u, v) = loc.normalized(4, 4);
        assert_eq!(rasterize(u, v, 4, 4), loc);
    }

    #[test]
    fn binary_round_trip() {
        let h = gaussian_pseudo_gt(GridLoc::new(1, 2), 4, 6, 1.5).unwrap();
        let mut buf = Vec::new();
        h.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 * 8);
        assert_eq!(HeatMap::read_binary(&buf[..]).unwrap(), h);
    }

    proptest! {
        #[test]
        fn normalize_sums_to_one(raw in prop::collection::vec(-50.0f64..50.0, 12)) {
            let h = normalize(&ScoreGrid::new(3, 4, raw).unwrap()).unwrap();
            prop_assert!((h.mass() - 1.0).abs() <= MASS_TOLERANCE);
            prop_assert!(h.values().iter().all(|v| *v > 0.0));
        }

        #[test]
        fn block_sum_conserves_mass(raw in prop::collection::vec(0.0f64..10.0, 48)) {
            let pooled = block_sum(&raw, 6, 8, 3, 2).unwrap();
            let a: f64 = raw.iter().sum();
            let b: f64 = pooled.iter().sum();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn downsample_one_hot_stays_one_hot(r in 0usize..16, c in 0usize..16) {
            let h = HeatMap::one_hot(16, 16, GridLoc::new(r, c)).unwrap();
            let d = downsample(&h, 4, 8).unwrap();
            prop_assert_eq!(d, HeatMap::one_hot(4, 8, GridLoc::new(r / 4, c / 2)).unwrap());
        }

        #[test]
        fn gaussian_mode_is_center(
            rows in 1usize..=64, cols in 1usize..=64,
            fr in 0.0f64..1.0, fc in 0.0f64..1.0,
            s in prop::sample::select(vec![0.0, 0.5, 1.0, 4.0, 20.0]),
        ) {
            let center = GridLoc::new((fr * rows as f64) as usize, (fc * cols as f64) as usize);
            let h = gaussian_pseudo_gt(center, rows, cols, s).unwrap();
            prop_assert_eq!(argmax_loc(&h), center);
        }

        #[test]
        fn gaussian_entropy_monotone_in_sigma(
            r in 0usize..12, c in 0usize..12, s1 in 0.0f64..10.0, ds in 0.01f64..10.0,
        ) {
            let lo = gaussian_pseudo_gt(GridLoc::new(r, c), 12, 12, s1).unwrap();
            let hi = gaussian_pseudo_gt(GridLoc::new(r, c), 12, 12, s1 + ds).unwrap();
            prop_assert!(entropy(&lo) <= entropy(&hi) + 1e-12);
        }
    }
}
