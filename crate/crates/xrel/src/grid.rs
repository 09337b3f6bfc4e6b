//! Periodic d-dimensional grid: cell indexing, physical coordinates, and the
//! discrete Fourier frequencies the multiplier operators are evaluated at.

use crate::error::{Result, XrelError};
use crate::tensor_space::TensorSpaceSpec;

pub const MIN_CELLS_PER_AXIS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: TensorSpaceSpec,
    sizes: Vec<usize>,
    cell_lengths: Vec<f64>,
}

impl Grid {
    pub fn new(spec: TensorSpaceSpec, sizes: &[usize], cell_lengths: &[f64]) -> Result<Self> {
        if sizes.len() != spec.d() || cell_lengths.len() != spec.d() {
            return Err(XrelError::Precondition(format!(
                "grid needs {} axes, got sizes {:?} lengths {:?}",
                spec.d(),
                sizes,
                cell_lengths
            )));
        }
        if sizes.iter().any(|&n| n < MIN_CELLS_PER_AXIS) {
            return Err(XrelError::Precondition(format!(
                "grid sizes must be >= {MIN_CELLS_PER_AXIS} per axis, got {sizes:?}"
            )));
        }
        if cell_lengths.iter().any(|&h| !(h > 0.0)) {
            return Err(XrelError::Precondition("cell spacing must be > 0".into()));
        }
        let ncells: usize = sizes.iter().product();
        if ncells.checked_mul(spec.q() * spec.q()).is_none() {
            return Err(XrelError::Precondition("grid too large".into()));
        }
        Ok(Self {
            spec,
            sizes: sizes.to_vec(),
            cell_lengths: cell_lengths.to_vec(),
        })
    }

    /// Square grid with unit total length per axis.
    pub fn square(spec: TensorSpaceSpec, n: usize) -> Result<Self> {
        let d = spec.d();
        Grid::new(spec, &vec![n; d], &vec![1.0 / n as f64; d])
    }

    pub fn spec(&self) -> &TensorSpaceSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.spec.d()
    }

    pub fn q(&self) -> usize {
        self.spec.q()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn cell_lengths(&self) -> &[f64] {
        &self.cell_lengths
    }

    pub fn ncells(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_lengths.iter().product()
    }

    pub fn axis_length(&self, a: usize) -> f64 {
        self.sizes[a] as f64 * self.cell_lengths[a]
    }

    /// Row-major cell index.
    pub fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for (a, &c) in coords.iter().enumerate() {
            debug_assert!(c < self.sizes[a]);
            idx = idx * self.sizes[a] + c;
        }
        idx
    }

    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        for a in (0..self.sizes.len()).rev() {
            out[a] = idx % self.sizes[a];
            idx /= self.sizes[a];
        }
        out
    }

    /// Physical position of the cell sample point (lattice point i·h).
    pub fn position(&self, idx: usize) -> Vec<f64> {
        self.coords(idx)
            .iter()
            .zip(&self.cell_lengths)
            .map(|(&c, &h)| c as f64 * h)
            .collect()
    }

    /// Signed integer frequency index for FFT bin j on an axis of size n:
    /// j for j <= n/2, j − n otherwise (even n maps n/2 to −n/2).
    pub fn signed_freq_index(n: usize, j: usize) -> i64 {
        let j = j as i64;
        let n = n as i64;
        if 2 * j <= n {
            j
        } else {
            j - n
        }
    }

    /// Angular wavevector component for FFT bin j on axis a: 2π f / (n·h).
    pub fn wavevector_component(&self, a: usize, j: usize) -> f64 {
        let n = self.sizes[a];
        let f = Self::signed_freq_index(n, j) as f64;
        2.0 * std::f64::consts::PI * f / (n as f64 * self.cell_lengths[a])
    }

    /// Full wavevector of the spectral cell with the same row-major index
    /// convention as real-space cells.
    pub fn wavevector(&self, idx: usize) -> Vec<f64> {
        self.coords(idx)
            .iter()
            .enumerate()
            .map(|(a, &j)| self.wavevector_component(a, j))
            .collect()
    }

    /// Minimum-image (torus) distance between two cells in physical units.
    pub fn torus_distance(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        let mut acc = 0.0;
        for ax in 0..self.d() {
            let n = self.sizes[ax] as i64;
            let diff = (ca[ax] as i64 - cb[ax] as i64).rem_euclid(n);
            let diff = diff.min(n - diff) as f64;
            let d = diff * self.cell_lengths[ax];
            acc += d * d;
        }
        acc.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_roundtrip() {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let g = Grid::new(spec, &[8, 16], &[0.5, 0.25]).unwrap();
        assert_eq!(g.ncells(), 128);
        for idx in [0, 1, 17, 127] {
            assert_eq!(g.index(&g.coords(idx)), idx);
        }
        assert_eq!(g.index(&[1, 1]), 17);
    }

    #[test]
    fn frequencies_signed() {
        assert_eq!(Grid::signed_freq_index(8, 0), 0);
        assert_eq!(Grid::signed_freq_index(8, 3), 3);
        assert_eq!(Grid::signed_freq_index(8, 4), 4); // tie goes positive
        assert_eq!(Grid::signed_freq_index(8, 5), -3);
        assert_eq!(Grid::signed_freq_index(8, 7), -1);
    }

    #[test]
    fn torus_distance_wraps() {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let g = Grid::square(spec, 8).unwrap();
        let a = g.index(&[0, 0]);
        let b = g.index(&[7, 0]);
        assert!((g.torus_distance(a, b) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_grids() {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        assert!(Grid::new(spec, &[4, 8], &[1.0, 1.0]).is_err());
    }
}
