//! Grid fields: L(T)-valued extended fields, coefficient fields with cached
//! coercivity bounds, and the binary dump format.
//!
//! Per-cell q×q matrices are stored row-major, cells outer, matching the dump
//! layout exactly. Small-matrix products are done on raw slices to keep the
//! hot cellwise loops allocation-free.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, XrelError};
use crate::grid::Grid;
use crate::tensor_space::EndoMatrix;

/// Role tag for extended fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldFlavor {
    Source,
    Polarization,
    EType,
    JType,
    General,
}

/// Periodic grid of q×q matrices (houses 𝕊, ℙ, 𝔼, 𝕁, ℍ).
#[derive(Debug, Clone)]
pub struct ExtendedField {
    grid: Grid,
    pub data: Vec<f64>,
    pub flavor: FieldFlavor,
}

#[inline]
pub(crate) fn matmul_rm(q: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    // out = a * b, all q×q row-major.
    for i in 0..q {
        for j in 0..q {
            let mut acc = 0.0;
            for k in 0..q {
                acc += a[i * q + k] * b[k * q + j];
            }
            out[i * q + j] = acc;
        }
    }
}

impl ExtendedField {
    pub fn zeros(grid: &Grid, flavor: FieldFlavor) -> Self {
        let len = grid.ncells() * grid.q() * grid.q();
        Self {
            grid: grid.clone(),
            data: vec![0.0; len],
            flavor,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn q(&self) -> usize {
        self.grid.q()
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> &[f64] {
        let qq = self.q() * self.q();
        &self.data[idx * qq..(idx + 1) * qq]
    }

    #[inline]
    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        let qq = self.q() * self.q();
        &mut self.data[idx * qq..(idx + 1) * qq]
    }

    pub fn get(&self, idx: usize) -> EndoMatrix {
        let q = self.q();
        let c = self.cell(idx);
        EndoMatrix::from_fn(q, q, |r, s| c[r * q + s])
    }

    pub fn set(&mut self, idx: usize, m: &EndoMatrix) {
        let q = self.q();
        let c = self.cell_mut(idx);
        for r in 0..q {
            for s in 0..q {
                c[r * q + s] = m[(r, s)];
            }
        }
    }

    /// Global l2 norm of all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Frobenius norm of one cell.
    pub fn cell_norm(&self, idx: usize) -> f64 {
        self.cell(idx).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cell average as a matrix (the k = 0 Fourier coefficient).
    pub fn mean_matrix(&self) -> EndoMatrix {
        let q = self.q();
        let n = self.grid.ncells() as f64;
        let mut acc = vec![0.0; q * q];
        let qq = q * q;
        for cell in self.data.chunks_exact(qq) {
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
        EndoMatrix::from_fn(q, q, |r, s| acc[r * q + s] / n)
    }

    /// self += c · other
    pub fn add_scaled(&mut self, other: &ExtendedField, c: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    /// ‖self − other‖ over all entries.
    pub fn distance(&self, other: &ExtendedField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Cellwise left-multiplication by a constant matrix: out(x) = A·F(x).
    pub fn left_mul(&self, a: &EndoMatrix, flavor: FieldFlavor) -> ExtendedField {
        let q = self.q();
        let arm: Vec<f64> = (0..q * q).map(|i| a[(i / q, i % q)]).collect();
        let mut out = ExtendedField::zeros(&self.grid, flavor);
        let qq = q * q;
        for (src, dst) in self.data.chunks_exact(qq).zip(out.data.chunks_exact_mut(qq)) {
            matmul_rm(q, &arm, src, dst);
        }
        out
    }

    /// Cellwise right-multiplication: out(x) = F(x)·A.
    pub fn right_mul(&self, a: &EndoMatrix, flavor: FieldFlavor) -> ExtendedField {
        let q = self.q();
        let arm: Vec<f64> = (0..q * q).map(|i| a[(i / q, i % q)]).collect();
        let mut out = ExtendedField::zeros(&self.grid, flavor);
        let qq = q * q;
        for (src, dst) in self.data.chunks_exact(qq).zip(out.data.chunks_exact_mut(qq)) {
            matmul_rm(q, src, &arm, dst);
        }
        out
    }
}

/// Entrywise inner product Σ_cells ⟨A(x), B(x)⟩ (no volume weight; ratios of
/// these are volume-free).
pub fn field_inner(a: &ExtendedField, b: &ExtendedField) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Per-cell coefficient tensor L(x) with cached coercivity bounds
/// α₀I ≤ L(x) ≤ β₀I.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    grid: Grid,
    pub data: Vec<f64>,
    alpha0: f64,
    beta0: f64,
}

impl CoefficientField {
    /// Wraps per-cell data (row-major, cells outer), validating symmetry and
    /// computing the eigenvalue bounds.
    pub fn new(grid: &Grid, data: Vec<f64>) -> Result<Self> {
        let q = grid.q();
        let qq = q * q;
        if data.len() != grid.ncells() * qq {
            return Err(XrelError::ShapeMismatch {
                expected: format!("{} entries", grid.ncells() * qq),
                got: format!("{}", data.len()),
            });
        }
        let mut alpha0 = f64::INFINITY;
        let mut beta0 = f64::NEG_INFINITY;
        for cell in data.chunks_exact(qq) {
            let m = EndoMatrix::from_fn(q, q, |r, s| cell[r * q + s]);
            let asym = (&m - m.transpose()).amax();
            if asym > 1e-10 * m.amax().max(1e-300) {
                return Err(XrelError::Precondition(format!(
                    "coefficient cell not symmetric: asymmetry {asym:.3e}"
                )));
            }
            let ev = m.symmetric_eigen().eigenvalues;
            alpha0 = alpha0.min(ev.min());
            beta0 = beta0.max(ev.max());
        }
        if alpha0 <= 0.0 {
            return Err(XrelError::Precondition(format!(
                "coefficient field not coercive: min eigenvalue {alpha0:.3e}"
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            data,
            alpha0,
            beta0,
        })
    }

    /// Homogeneous field L(x) ≡ L.
    pub fn homogeneous(grid: &Grid, l: &EndoMatrix) -> Result<Self> {
        let q = grid.q();
        let mut cell = vec![0.0; q * q];
        for r in 0..q {
            for s in 0..q {
                cell[r * q + s] = l[(r, s)];
            }
        }
        let mut data = Vec::with_capacity(grid.ncells() * q * q);
        for _ in 0..grid.ncells() {
            data.extend_from_slice(&cell);
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> &[f64] {
        let qq = self.grid.q() * self.grid.q();
        &self.data[idx * qq..(idx + 1) * qq]
    }

    pub fn get(&self, idx: usize) -> EndoMatrix {
        let q = self.grid.q();
        let c = self.cell(idx);
        EndoMatrix::from_fn(q, q, |r, s| c[r * q + s])
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn contrast(&self) -> f64 {
        self.beta0 / self.alpha0
    }
}

// ---------------------------------------------------------------------------
// Binary field dump: magic "XRLF1", little-endian u32 d, m, sizes, then cell
// data as f64, row-major, cells outer, matrix entries inner.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"XRLF1";

pub fn write_field_bytes(grid: &Grid, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 8 + 4 * grid.d() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(grid.spec().d() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.spec().m() as u32).to_le_bytes());
    for &n in grid.sizes() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_field(path: &Path, f: &ExtendedField) -> Result<()> {
    let bytes = write_field_bytes(f.grid(), &f.data);
    let mut w = std::fs::File::create(path)?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Raw parse of a field dump: returns (d, m, sizes, data).
pub fn read_field_raw(path: &Path) -> Result<(usize, usize, Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err(XrelError::Config("bad field dump magic".into()));
    }
    let mut off = 5;
    let mut take_u32 = |bytes: &[u8]| -> Result<u32> {
        if off + 4 > bytes.len() {
            return Err(XrelError::Config("truncated field dump".into()));
        }
        let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        Ok(v)
    };
    let d = take_u32(&bytes)? as usize;
    let m = take_u32(&bytes)? as usize;
    let mut sizes = Vec::with_capacity(d);
    for _ in 0..d {
        sizes.push(take_u32(&bytes)? as usize);
    }
    let ncells: usize = sizes.iter().product();
    let q = d * m;
    let need = ncells * q * q;
    let payload = &bytes[off..];
    if payload.len() != need * 8 {
        return Err(XrelError::Config(format!(
            "field dump payload has {} bytes, expected {}",
            payload.len(),
            need * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((d, m, sizes, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_space::TensorSpaceSpec;

    #[test]
    fn field_ops_and_dump_roundtrip() {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let grid = Grid::square(spec, 8).unwrap();
        let mut f = ExtendedField::zeros(&grid, FieldFlavor::General);
        let m = EndoMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        f.set(5, &m);
        assert_eq!(f.get(5), m);
        assert_eq!(f.cell(5), &[1.0, 2.0, 3.0, 4.0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_field(&path, &f).unwrap();
        let (d, mm, sizes, data) = read_field_raw(&path).unwrap();
        assert_eq!((d, mm), (2, 1));
        assert_eq!(sizes, vec![8, 8]);
        assert_eq!(data, f.data);
    }

    #[test]
    fn coefficient_bounds() {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let grid = Grid::square(spec, 8).unwrap();
        let l = EndoMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let c = CoefficientField::homogeneous(&grid, &l).unwrap();
        assert!((c.alpha0() - 0.5).abs() < 1e-14);
        assert!((c.beta0() - 2.0).abs() < 1e-14);
        assert!((c.contrast() - 4.0).abs() < 1e-13);
    }
}
