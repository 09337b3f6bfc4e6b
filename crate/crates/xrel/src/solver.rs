//! Periodic-grid realization of the multiplier operators Γ, Ψ and the cellwise
//! map K(x), the polarization fixed-point iteration with λ-continuation, the
//! E-form solver, random conforming field synthesis, and membership reports.
//!
//! Torus convention: continuous multiplier symbols are evaluated at the
//! discrete frequencies; the k = 0 mode carries Γ = 0 and is dropped from the
//! Ψ feedback inside the solve loop (see `apply_psi_fluct`), which keeps every
//! iterate exactly inside the closure subspace and keeps the discrete solution
//! operator self-adjoint. The fixed point then solves the canonical equations
//! for the source 𝕊 − M⟨ℙ⟩; the constant offset M⟨ℙ⟩ is reported in the
//! diagnostics and vanishes as the domain grows.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Result, XrelError};
use crate::field::{matmul_rm, CoefficientField, ExtendedField, FieldFlavor};
use crate::grid::Grid;
use crate::physics::{gamma1, ReferenceTensor};
use crate::rng::{normal, SeededRng};
use crate::tensor_space::{EndoMatrix, Subspace};
use crate::transforms::ManifoldSpec;

/// Contrast above which experiments proceed with a warning.
pub const CONTRAST_GUARD: f64 = 16.0;

/// Fixed-point solve options.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Relative residual target.
    pub tol: f64,
    pub max_iters: usize,
    /// λ-continuation schedule; must end at 1.
    pub lambda_schedule: Vec<f64>,
    /// Initial damping factor in (0, 1].
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 20_000,
            lambda_schedule: vec![0.25, 0.5, 0.75, 1.0],
            damping: 1.0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(XrelError::Precondition("tol must be > 0".into()));
        }
        let last = self
            .lambda_schedule
            .last()
            .ok_or_else(|| XrelError::Precondition("empty lambda schedule".into()))?;
        if (*last - 1.0).abs() > 1e-15 {
            return Err(XrelError::Precondition("lambda schedule must end at 1".into()));
        }
        if self.lambda_schedule.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(XrelError::Precondition("lambda values must lie in (0,1]".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(XrelError::Precondition("damping must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Convergence record of one solve.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    /// Iterations spent per λ stage.
    pub lambda_steps: Vec<(f64, usize)>,
    /// Constant source offset M⟨ℙ⟩ implied by the torus zero-mode convention.
    pub zero_mode_offset: EndoMatrix,
    pub contrast: f64,
    pub contrast_warning: bool,
}

// ---------------------------------------------------------------------------
// n-dimensional complex FFT over row-major data
// ---------------------------------------------------------------------------

struct FftNd {
    sizes: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    fn new(sizes: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = sizes.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = sizes.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            sizes: sizes.to_vec(),
            fwd,
            inv,
        }
    }

    fn ncells(&self) -> usize {
        self.sizes.iter().product()
    }

    /// In-place transform of one row-major plane. The inverse applies the
    /// 1/N normalization.
    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let d = self.sizes.len();
        let ncells = self.ncells();
        debug_assert_eq!(data.len(), ncells);
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.sizes[a + 1];
        }
        let mut scratch = Vec::new();
        for a in 0..d {
            let n = self.sizes[a];
            let stride = strides[a];
            let plan = if forward { &self.fwd[a] } else { &self.inv[a] };
            scratch.resize(n, Complex64::default());
            let nlines = ncells / n;
            for line in 0..nlines {
                // Decompose the line index over the remaining axes to get the
                // starting cell of this 1-d line.
                let block = line / stride;
                let offset = line % stride;
                let start = block * stride * n + offset;
                if stride == 1 {
                    plan.process(&mut data[start..start + n]);
                } else {
                    for (i, s) in scratch.iter_mut().enumerate() {
                        *s = data[start + i * stride];
                    }
                    plan.process(&mut scratch);
                    for (i, s) in scratch.iter().enumerate() {
                        data[start + i * stride] = *s;
                    }
                }
            }
        }
        if !forward {
            let scale = 1.0 / ncells as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral operator context
// ---------------------------------------------------------------------------

/// Grid-bound multiplier machinery: cached Γ(k) and Γ₁(k) tables plus FFT
/// plans. Evaluation over frequencies is embarrassingly parallel; all
/// reductions run in a fixed order so results are identical for any worker
/// count.
pub struct SpectralOps {
    grid: Grid,
    fft: FftNd,
    l0: ReferenceTensor,
    m: EndoMatrix,
    m_rm: Vec<f64>,
    gamma_tbl: Vec<f64>,
    gamma1_tbl: Vec<f64>,
    /// Ψ̃(k) = M − Γ(k) zeroed on the special set {k = 0} ∪ Nyquist bins.
    psi_fluct_tbl: Vec<f64>,
    /// Indicator of the special set (per spectral cell).
    special: Vec<bool>,
}

impl SpectralOps {
    pub fn new(grid: &Grid, l0: &ReferenceTensor, m: &EndoMatrix) -> Self {
        Self::with_gamma1(grid, l0, m, &|spec, k| gamma1(spec, k))
    }

    /// Variant taking a user-supplied Γ₁(k) projection for other physics with
    /// the same canonical structure.
    pub fn with_gamma1(
        grid: &Grid,
        l0: &ReferenceTensor,
        m: &EndoMatrix,
        gamma1_fn: &dyn Fn(&crate::tensor_space::TensorSpaceSpec, &[f64]) -> EndoMatrix,
    ) -> Self {
        let q = grid.q();
        let qq = q * q;
        let ncells = grid.ncells();
        let mut gamma_tbl = vec![0.0; ncells * qq];
        let mut gamma1_tbl = vec![0.0; ncells * qq];
        // Nyquist bins (index N/2 on an even axis) carry an ambiguous
        // frequency sign and Γ(+k) ≠ Γ(−k); a real-field multiplier must be
        // zeroed there to stay conjugate-consistent and self-adjoint. Smooth
        // band-limited fields have no content on that set, so the truncation
        // is spectrally accurate.
        let is_nyquist = |cell: usize| -> bool {
            grid.coords(cell)
                .iter()
                .zip(grid.sizes())
                .any(|(&j, &n)| n % 2 == 0 && j == n / 2)
        };
        let mut psi_fluct_tbl = vec![0.0; ncells * qq];
        let mut special = vec![false; ncells];
        for cell in 0..ncells {
            if cell == 0 || is_nyquist(cell) {
                special[cell] = true;
                continue;
            }
            let k = grid.wavevector(cell);
            let g1 = gamma1_fn(grid.spec(), &k);
            let g = if g1.amax() == 0.0 {
                g1.clone()
            } else {
                gamma_from_projection(&g1, l0)
            };
            for r in 0..q {
                for s in 0..q {
                    gamma_tbl[cell * qq + r * q + s] = g[(r, s)];
                    gamma1_tbl[cell * qq + r * q + s] = g1[(r, s)];
                    psi_fluct_tbl[cell * qq + r * q + s] = m[(r, s)] - g[(r, s)];
                }
            }
        }
        let m_rm = (0..qq).map(|i| m[(i / q, i % q)]).collect();
        Self {
            grid: grid.clone(),
            fft: FftNd::new(grid.sizes()),
            l0: l0.clone(),
            m: m.clone(),
            m_rm,
            gamma_tbl,
            gamma1_tbl,
            psi_fluct_tbl,
            special,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn reference(&self) -> &ReferenceTensor {
        &self.l0
    }

    pub fn m_matrix(&self) -> &EndoMatrix {
        &self.m
    }

    fn to_spectral(&self, f: &ExtendedField) -> Vec<Complex64> {
        let q = self.grid.q();
        let qq = q * q;
        let ncells = self.grid.ncells();
        let mut planes = vec![Complex64::default(); qq * ncells];
        planes
            .par_chunks_mut(ncells)
            .enumerate()
            .for_each(|(e, plane)| {
                for (cell, v) in plane.iter_mut().enumerate() {
                    *v = Complex64::new(f.data[cell * qq + e], 0.0);
                }
                self.fft.transform(plane, true);
            });
        planes
    }

    fn from_spectral(&self, mut planes: Vec<Complex64>, flavor: FieldFlavor) -> ExtendedField {
        let q = self.grid.q();
        let qq = q * q;
        let ncells = self.grid.ncells();
        planes.par_chunks_mut(ncells).for_each(|plane| {
            self.fft.transform(plane, false);
        });
        let mut out = ExtendedField::zeros(&self.grid, flavor);
        for e in 0..qq {
            let plane = &planes[e * ncells..(e + 1) * ncells];
            for (cell, v) in plane.iter().enumerate() {
                out.data[cell * qq + e] = v.re;
            }
        }
        out
    }

    /// Per-frequency left-multiplication by a real q×q table.
    fn multiply_table(&self, planes: &mut [Complex64], tbl: &[f64]) {
        let q = self.grid.q();
        let qq = q * q;
        let ncells = self.grid.ncells();
        let mut inbuf = vec![Complex64::default(); qq];
        let mut outbuf = vec![Complex64::default(); qq];
        for cell in 0..ncells {
            let t = &tbl[cell * qq..(cell + 1) * qq];
            for e in 0..qq {
                inbuf[e] = planes[e * ncells + cell];
            }
            for r in 0..q {
                for s in 0..q {
                    let mut acc = Complex64::default();
                    for k in 0..q {
                        acc += t[r * q + k] * inbuf[k * q + s];
                    }
                    outbuf[r * q + s] = acc;
                }
            }
            for e in 0..qq {
                planes[e * ncells + cell] = outbuf[e];
            }
        }
    }

    /// Γ applied through Fourier space; the k = 0 frequency maps to zero, so
    /// the output is an E-type (zero-mean, gradient-compatible) field.
    pub fn apply_gamma(&self, f: &ExtendedField) -> ExtendedField {
        let mut planes = self.to_spectral(f);
        self.multiply_table(&mut planes, &self.gamma_tbl);
        self.from_spectral(planes, FieldFlavor::EType)
    }

    /// Ψ F = M·F − Γ F with the literal zero-mode semantics Ψ(0) = M, so a
    /// constant field maps to M·F.
    pub fn apply_psi(&self, f: &ExtendedField) -> ExtendedField {
        let q = self.grid.q();
        let qq = q * q;
        let mut out = ExtendedField::zeros(&self.grid, FieldFlavor::General);
        out.data
            .par_chunks_mut(qq)
            .enumerate()
            .for_each(|(cell, dst)| {
                matmul_rm(q, &self.m_rm, f.cell(cell), dst);
            });
        let g = self.apply_gamma(f);
        out.add_scaled(&g, -1.0);
        out
    }

    /// Fluctuation variant used inside the solve loop: one fused multiplier
    /// pass with the Ψ symbol zeroed on the special set (k = 0 and Nyquist
    /// bins), so every feedback term stays inside the closure algebra.
    pub fn apply_psi_fluct(&self, f: &ExtendedField) -> ExtendedField {
        let mut planes = self.to_spectral(f);
        self.multiply_table(&mut planes, &self.psi_fluct_tbl);
        self.from_spectral(planes, FieldFlavor::General)
    }

    /// The part of F carried by the special Fourier set {k = 0} ∪ Nyquist:
    /// the modes the solve loop's Ψ̃ does not act on. The fixed point of the
    /// loop solves the canonical equations for the effective source
    /// 𝕊 − M·special_part(ℙ).
    pub fn special_part(&self, f: &ExtendedField) -> ExtendedField {
        let q = self.grid.q();
        let qq = q * q;
        let ncells = self.grid.ncells();
        let mut planes = self.to_spectral(f);
        for (cell, &sp) in self.special.iter().enumerate() {
            if !sp {
                for e in 0..qq {
                    planes[e * ncells + cell] = Complex64::default();
                }
            }
        }
        self.from_spectral(planes, FieldFlavor::General)
    }

    /// Relative l2 magnitude of the Γ₁-projection of the nonzero Fourier modes;
    /// near zero for divergence-free (J-type) fields.
    pub fn gamma1_projection_norm(&self, f: &ExtendedField) -> f64 {
        let planes = self.to_spectral(f);
        let q = self.grid.q();
        let qq = q * q;
        let ncells = self.grid.ncells();
        let mut num = 0.0;
        let mut den = 0.0;
        let mut inbuf = vec![Complex64::default(); qq];
        for cell in 1..ncells {
            let t = &self.gamma1_tbl[cell * qq..(cell + 1) * qq];
            for e in 0..qq {
                inbuf[e] = planes[e * ncells + cell];
                den += inbuf[e].norm_sqr();
            }
            for r in 0..q {
                for s in 0..q {
                    let mut acc = Complex64::default();
                    for k in 0..q {
                        acc += t[r * q + k] * inbuf[k * q + s];
                    }
                    num += acc.norm_sqr();
                }
            }
        }
        if den == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }

    /// E field recovered from a polarization field: 𝔼 = −Γℙ.
    pub fn e_from_p(&self, p: &ExtendedField) -> ExtendedField {
        let mut e = self.apply_gamma(p);
        e.scale(-1.0);
        e.flavor = FieldFlavor::EType;
        e
    }

    /// 𝕁 = ℙ + L₀𝔼.
    pub fn j_from_pe(&self, p: &ExtendedField, e: &ExtendedField) -> ExtendedField {
        let mut j = e.left_mul(self.l0.matrix(), FieldFlavor::JType);
        j.add_scaled(p, 1.0);
        j.flavor = FieldFlavor::JType;
        j
    }
}

/// Γ(k) from a projection Γ₁(k): Γ = Γ₁(Γ₁L₀Γ₁)⁺Γ₁ on range(Γ₁).
fn gamma_from_projection(g1: &EndoMatrix, l0: &ReferenceTensor) -> EndoMatrix {
    let core = g1 * l0.matrix() * g1;
    let eig = core.symmetric_eigen();
    let lmax = eig.eigenvalues.amax().max(1e-300);
    let inv = nalgebra::DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues
            .iter()
            .map(|&l| if l.abs() > 1e-12 * lmax { 1.0 / l } else { 0.0 }),
    );
    let pinv = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let g = g1 * pinv * g1;
    0.5 * (&g + g.transpose())
}

// ---------------------------------------------------------------------------
// Cellwise operations
// ---------------------------------------------------------------------------

/// out(x) = A(x)·B(x) cellwise.
pub fn cellwise_mul(a: &ExtendedField, b: &ExtendedField, flavor: FieldFlavor) -> ExtendedField {
    let q = a.q();
    let qq = q * q;
    let mut out = ExtendedField::zeros(a.grid(), flavor);
    out.data
        .par_chunks_mut(qq)
        .enumerate()
        .for_each(|(cell, dst)| {
            matmul_rm(q, a.cell(cell), b.cell(cell), dst);
        });
    out
}

/// out(x) = L(x)·F(x) cellwise for a coefficient field.
pub fn coeff_mul(l: &CoefficientField, f: &ExtendedField, flavor: FieldFlavor) -> ExtendedField {
    let q = f.q();
    let qq = q * q;
    let mut out = ExtendedField::zeros(f.grid(), flavor);
    out.data
        .par_chunks_mut(qq)
        .enumerate()
        .for_each(|(cell, dst)| {
            matmul_rm(q, l.cell(cell), f.cell(cell), dst);
        });
    out
}

/// out(x) = (L(x) − L₀)·F(x) cellwise.
pub fn coeff_dl_mul(
    l: &CoefficientField,
    l0: &ReferenceTensor,
    f: &ExtendedField,
    flavor: FieldFlavor,
) -> ExtendedField {
    let q = f.q();
    let qq = q * q;
    let l0_rm: Vec<f64> = (0..qq).map(|i| l0.matrix()[(i / q, i % q)]).collect();
    let mut out = ExtendedField::zeros(f.grid(), flavor);
    out.data
        .par_chunks_mut(qq)
        .enumerate()
        .for_each(|(cell, dst)| {
            let mut dl = [0.0; 128];
            let dl = &mut dl[..qq];
            for (d, (a, b)) in dl.iter_mut().zip(l.cell(cell).iter().zip(&l0_rm)) {
                *d = a - b;
            }
            matmul_rm(q, dl, f.cell(cell), dst);
        });
    out
}

/// Cellwise fractional-linear transform of the coefficient field:
/// K(x) = [I + (L(x)−L₀)M]⁻¹(L(x)−L₀). Errors if any cell is singular.
pub fn w_transform_field(
    l: &CoefficientField,
    l0: &ReferenceTensor,
    m: &EndoMatrix,
) -> Result<ExtendedField> {
    let grid = l.grid().clone();
    let q = grid.q();
    let mut out = ExtendedField::zeros(&grid, FieldFlavor::General);
    for cell in 0..grid.ncells() {
        let lm = l.get(cell);
        let dl = &lm - l0.matrix();
        let a = EndoMatrix::identity(q, q) + &dl * m;
        let k = a.lu().solve(&dl).ok_or_else(|| XrelError::Singular {
            context: format!("w_transform_field at cell {cell}"),
        })?;
        out.set(cell, &k);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Polarization solver
// ---------------------------------------------------------------------------

/// Reusable solve context: multiplier tables + the cellwise K(x) table for a
/// fixed (grid, L₀, M, L(x)).
pub struct PolarizationSolver {
    ops: SpectralOps,
    kfield: ExtendedField,
    lfield: CoefficientField,
}

impl PolarizationSolver {
    pub fn new(lfield: CoefficientField, l0: &ReferenceTensor, m: &EndoMatrix) -> Result<Self> {
        let ops = SpectralOps::new(lfield.grid(), l0, m);
        let kfield = w_transform_field(&lfield, l0, m)?;
        Ok(Self {
            ops,
            kfield,
            lfield,
        })
    }

    pub fn ops(&self) -> &SpectralOps {
        &self.ops
    }

    pub fn lfield(&self) -> &CoefficientField {
        &self.lfield
    }

    pub fn kfield(&self) -> &ExtendedField {
        &self.kfield
    }

    /// K(x)·F(x) cellwise.
    pub fn apply_k(&self, f: &ExtendedField) -> ExtendedField {
        cellwise_mul(&self.kfield, f, FieldFlavor::General)
    }

    /// Damped fixed-point iteration for ℙ = λK(Ψ̃ℙ + 𝕊) along the λ schedule,
    /// warm-starting each stage from the previous one.
    pub fn solve(
        &self,
        source: &ExtendedField,
        opts: &SolveOptions,
    ) -> Result<(ExtendedField, SolveDiagnostics)> {
        opts.validate()?;
        let contrast = self.lfield.contrast();
        let contrast_warning = contrast > CONTRAST_GUARD;

        let ks = self.apply_k(source);
        let ks_norm = ks.norm();
        let mut p = ExtendedField::zeros(self.ops.grid(), FieldFlavor::Polarization);
        let mut history = Vec::new();
        let mut lambda_steps = Vec::new();
        let mut total_iters = 0usize;
        let mut final_residual = 0.0;

        if ks_norm > 0.0 {
            for &lam in &opts.lambda_schedule {
                let denom = lam * ks_norm;
                let mut damping = opts.damping;
                let mut prev_res = f64::INFINITY;
                let mut stage_iters = 0usize;
                loop {
                    let psip = self.ops.apply_psi_fluct(&p);
                    let mut g = cellwise_mul(&self.kfield, &psip, FieldFlavor::Polarization);
                    g.add_scaled(&ks, 1.0);
                    g.scale(lam);
                    let res = g.distance(&p) / denom;
                    history.push(res);
                    if res <= opts.tol {
                        p = g;
                        final_residual = res;
                        break;
                    }
                    total_iters += 1;
                    stage_iters += 1;
                    if total_iters >= opts.max_iters {
                        return Err(XrelError::NonConvergence {
                            residual: res,
                            iterations: total_iters,
                            best: Box::new(p),
                        });
                    }
                    if res > prev_res {
                        damping = (damping * 0.5).max(1.0 / 64.0);
                    }
                    prev_res = res;
                    if damping >= 1.0 {
                        p = g;
                    } else {
                        p.scale(1.0 - damping);
                        p.add_scaled(&g, damping);
                    }
                }
                lambda_steps.push((lam, stage_iters));
            }
        }

        let zero_mode_offset = &self.ops.m * p.mean_matrix();
        Ok((
            p,
            SolveDiagnostics {
                iterations: total_iters,
                final_residual,
                residual_history: history,
                lambda_steps,
                zero_mode_offset,
                contrast,
                contrast_warning,
            },
        ))
    }

    /// Partial sums ℙ^j = Σ_{i≤j} λ^{i+1}(KΨ̃)^i K𝕊 for j = 0..=order, built by
    /// the recursion ℙ^{j+1} = λKΨ̃ℙ^j + λK𝕊. Order 0 is λ·K(x)·𝕊(x).
    pub fn partial_sums(
        &self,
        source: &ExtendedField,
        lambda: f64,
        order: usize,
    ) -> Result<Vec<ExtendedField>> {
        if order > 6 {
            return Err(XrelError::Precondition(format!(
                "partial-sum order {order} exceeds the cost guard (6)"
            )));
        }
        let mut ks = self.apply_k(source);
        ks.scale(lambda);
        ks.flavor = FieldFlavor::Polarization;
        let mut sums = vec![ks.clone()];
        let mut cur = ks.clone();
        for _ in 0..order {
            let psip = self.ops.apply_psi_fluct(&cur);
            let mut next = cellwise_mul(&self.kfield, &psip, FieldFlavor::Polarization);
            next.scale(lambda);
            next.add_scaled(&ks, 1.0);
            sums.push(next.clone());
            cur = next;
        }
        Ok(sums)
    }
}

/// One-shot wrapper building the solve context and running the iteration.
pub fn iterate_polarization(
    source: &ExtendedField,
    lfield: &CoefficientField,
    l0: &ReferenceTensor,
    m: &EndoMatrix,
    opts: &SolveOptions,
) -> Result<(ExtendedField, SolveDiagnostics)> {
    PolarizationSolver::new(lfield.clone(), l0, m)?.solve(source, opts)
}

/// Damped Richardson iteration on 𝔼 = Γ(ℍ − (L−L₀)𝔼); returns (𝔼, 𝕁) with
/// 𝕁 = L𝔼 − ℍ. The relaxation weight 2/(2 + β₀/λ_min(L₀) − 1) keeps the scheme
/// contractive for coefficient fields whose contrast exceeds the plain-scheme
/// radius.
pub fn solve_e_form(
    hfield: &ExtendedField,
    lfield: &CoefficientField,
    l0: &ReferenceTensor,
    opts: &SolveOptions,
) -> Result<(ExtendedField, ExtendedField, SolveDiagnostics)> {
    opts.validate()?;
    let m_dummy = EndoMatrix::zeros(hfield.q(), hfield.q());
    let ops = SpectralOps::new(hfield.grid(), l0, &m_dummy);

    let gh = ops.apply_gamma(hfield);
    let gh_norm = gh.norm();
    let mut e = ExtendedField::zeros(hfield.grid(), FieldFlavor::EType);
    let mut history = Vec::new();
    let mut iters = 0usize;
    let mut final_residual = 0.0;

    if gh_norm > 0.0 {
        let e_max = (lfield.beta0() / l0.min_eigenvalue() - 1.0).max(0.0);
        let mut omega = (2.0 / (2.0 + e_max)).min(opts.damping);
        let mut prev_res = f64::INFINITY;
        loop {
            let dle = coeff_dl_mul(lfield, l0, &e, FieldFlavor::General);
            let mut t = hfield.clone();
            t.add_scaled(&dle, -1.0);
            let g = ops.apply_gamma(&t);
            let res = g.distance(&e) / gh_norm;
            history.push(res);
            if res <= opts.tol {
                e = g;
                final_residual = res;
                break;
            }
            iters += 1;
            if iters >= opts.max_iters {
                return Err(XrelError::NonConvergence {
                    residual: res,
                    iterations: iters,
                    best: Box::new(e),
                });
            }
            if res > prev_res {
                omega = (omega * 0.5).max(1.0 / 64.0);
            }
            prev_res = res;
            e.scale(1.0 - omega);
            e.add_scaled(&g, omega);
        }
    }

    let mut j = coeff_mul(lfield, &e, FieldFlavor::JType);
    j.add_scaled(hfield, -1.0);
    j.flavor = FieldFlavor::JType;
    let diag = SolveDiagnostics {
        iterations: iters,
        final_residual,
        residual_history: history,
        lambda_steps: vec![(1.0, iters)],
        zero_mode_offset: EndoMatrix::zeros(hfield.q(), hfield.q()),
        contrast: lfield.contrast(),
        contrast_warning: lfield.contrast() > CONTRAST_GUARD,
    };
    Ok((e, j, diag))
}

// ---------------------------------------------------------------------------
// Conforming random fields
// ---------------------------------------------------------------------------

/// Smooth periodic scalar: superposition of random-phase cosines with a
/// Gaussian spectral envelope of the given correlation length. The mode count
/// depends on the physical lengths and correlation length only (not the grid
/// resolution), so the same seed samples the same continuum field at every
/// refinement level.
#[derive(Debug, Clone)]
pub struct SmoothScalar {
    /// (integer mode vector, amplitude, phase)
    modes: Vec<(Vec<i64>, f64, f64)>,
    axis_lengths: Vec<f64>,
    norm: f64,
}

impl SmoothScalar {
    pub fn draw(grid: &Grid, corr_len: f64, rng: &mut impl rand::Rng) -> Self {
        let d = grid.d();
        let kcut = 4.3 / corr_len.max(1e-12);
        let mut nmax = vec![0i64; d];
        for a in 0..d {
            let per_mode = 2.0 * std::f64::consts::PI / grid.axis_length(a);
            let cap = (grid.sizes()[a] / 2).saturating_sub(1) as i64;
            nmax[a] = ((kcut / per_mode).ceil() as i64).clamp(1, cap.max(1));
        }
        // Fixed lexicographic mode order keeps draws deterministic.
        let mut modes: Vec<(Vec<i64>, f64, f64)> = Vec::new();
        let mut idx = vec![-nmax[0]; d];
        'outer: loop {
            let mut k2 = 0.0;
            for a in 0..d {
                let k = 2.0 * std::f64::consts::PI * idx[a] as f64 / grid.axis_length(a);
                k2 += k * k;
            }
            if idx.iter().any(|&i| i != 0) && k2.sqrt() <= kcut {
                let amp = (-0.5 * k2 * corr_len * corr_len).exp() * normal(rng);
                let phase = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                modes.push((idx.clone(), amp, phase));
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] <= nmax[a] {
                    continue 'outer;
                }
                idx[a] = -nmax[a];
            }
            break;
        }
        let mut s = Self {
            modes,
            axis_lengths: (0..d).map(|a| grid.axis_length(a)).collect(),
            norm: 1.0,
        };
        // Normalize to unit RMS on the sampling grid.
        let samples = s.sample(grid);
        let rms = (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt();
        if rms > 0.0 {
            s.norm = 1.0 / rms;
        }
        s
    }

    pub fn eval(&self, pos: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (mode, amp, phase) in &self.modes {
            let mut arg = *phase;
            for (a, &l) in self.axis_lengths.iter().enumerate() {
                arg += 2.0 * std::f64::consts::PI * mode[a] as f64 * pos[a] / l;
            }
            acc += amp * arg.cos();
        }
        acc * self.norm
    }

    /// Analytic gradient of the cosine sum.
    pub fn eval_grad(&self, pos: &[f64]) -> Vec<f64> {
        let d = self.axis_lengths.len();
        let mut grad = vec![0.0; d];
        for (mode, amp, phase) in &self.modes {
            let mut arg = *phase;
            for (a, &l) in self.axis_lengths.iter().enumerate() {
                arg += 2.0 * std::f64::consts::PI * mode[a] as f64 * pos[a] / l;
            }
            let s = arg.sin();
            for (a, &l) in self.axis_lengths.iter().enumerate() {
                grad[a] -= amp * s * 2.0 * std::f64::consts::PI * mode[a] as f64 / l;
            }
        }
        for g in grad.iter_mut() {
            *g *= self.norm;
        }
        grad
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        let mut out = vec![0.0; grid.ncells()];
        out.par_iter_mut().enumerate().for_each(|(cell, v)| {
            *v = self.eval(&grid.position(cell));
        });
        out
    }
}

/// Unit-RMS smooth periodic scalar field sampled on the grid.
pub fn smooth_scalar_field(grid: &Grid, corr_len: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    SmoothScalar::draw(grid, corr_len, rng).sample(grid)
}

/// Cellwise inverse transform L = L₀ + K(I − MK)⁻¹ without condition
/// estimation; None when the cell is singular.
fn w_inverse_cell(k: &EndoMatrix, l0: &EndoMatrix, m: &EndoMatrix) -> Option<EndoMatrix> {
    let q = k.nrows();
    let a = EndoMatrix::identity(q, q) - m * k;
    let xt = a.transpose().lu().solve(&k.transpose())?;
    Some(l0 + xt.transpose())
}

/// Draws a smooth random K₀-valued field, scales its amplitude so the mapped
/// coefficient field stays within the requested contrast bound β₀/α₀, and maps
/// cellwise through the inverse transform. Every cell lands on the manifold by
/// construction; deterministic given the seed.
pub fn make_manifold_field(
    mspec: &ManifoldSpec,
    grid: &Grid,
    contrast: f64,
    corr_len: f64,
    seed: u64,
) -> Result<CoefficientField> {
    make_manifold_field_blended(mspec, grid, contrast, corr_len, seed, None, None)
}

/// Variant with an optional constant base point in W-coordinates and an
/// optional per-cell blend weight in [0,1] applied to the random part:
/// K(x) = K_base + blend(x)·s·draw(x). With a smooth blend that vanishes
/// outside a region, the coefficient field transitions smoothly into the
/// constant tensor W⁻¹(K_base) there while staying on the manifold everywhere.
pub fn make_manifold_field_blended(
    mspec: &ManifoldSpec,
    grid: &Grid,
    contrast: f64,
    corr_len: f64,
    seed: u64,
    k_base: Option<&EndoMatrix>,
    blend: Option<&[f64]>,
) -> Result<CoefficientField> {
    if contrast < 1.0 {
        return Err(XrelError::Precondition("contrast must be >= 1".into()));
    }
    let q = grid.q();
    let qq = q * q;
    let ncells = grid.ncells();
    let l0 = mspec.l0.matrix().clone();
    let m = mspec.m.clone();
    if let Some(b) = blend {
        if b.len() != ncells {
            return Err(XrelError::ShapeMismatch {
                expected: format!("{ncells} blend weights"),
                got: format!("{}", b.len()),
            });
        }
    }

    let zero = EndoMatrix::zeros(q, q);
    let kb = k_base.unwrap_or(&zero);
    if (contrast <= 1.0 + 1e-12 || mspec.k0.is_empty()) && kb.amax() == 0.0 {
        return CoefficientField::homogeneous(grid, &l0);
    }

    // Unit-RMS coefficient per K0 basis direction, fixed stream order.
    let mut rng = SeededRng::from_seed(seed).stream(1);
    let coeffs: Vec<Vec<f64>> = mspec
        .k0
        .basis()
        .iter()
        .map(|_| smooth_scalar_field(grid, corr_len, &mut rng))
        .collect();

    // Raw K0-valued draw (amplitude 1), blend applied.
    let mut kdraw = vec![0.0; ncells * qq];
    for (b, coeff) in mspec.k0.basis().iter().zip(&coeffs) {
        for cell in 0..ncells {
            let w = blend.map_or(1.0, |bl| bl[cell]);
            let c = coeff[cell] * w;
            for r in 0..q {
                for s in 0..q {
                    kdraw[cell * qq + r * q + s] += c * b[(r, s)];
                }
            }
        }
    }

    // contrast(s): None = infeasible (singular cell or non-coercive).
    let eval = |s: f64| -> Option<(f64, Vec<f64>)> {
        let mut data = vec![0.0; ncells * qq];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for cell in 0..ncells {
            let kc =
                EndoMatrix::from_fn(q, q, |r, c| kb[(r, c)] + s * kdraw[cell * qq + r * q + c]);
            let l = w_inverse_cell(&kc, &l0, &m)?;
            let sym = 0.5 * (&l + l.transpose());
            let ev = sym.symmetric_eigen().eigenvalues;
            if ev.min() <= 0.0 {
                return None;
            }
            lo = lo.min(ev.min());
            hi = hi.max(ev.max());
            for r in 0..q {
                for c in 0..q {
                    data[cell * qq + r * q + c] = l[(r, c)];
                }
            }
        }
        Some((hi / lo, data))
    };

    // Bracket the target contrast, then bisect on the amplitude.
    let mut s_lo = 0.0;
    let mut s_hi = 1.0;
    let mut bracketed = false;
    for _ in 0..64 {
        match eval(s_hi) {
            Some((c, _)) if c < contrast => {
                s_lo = s_hi;
                s_hi *= 2.0;
            }
            _ => {
                bracketed = true;
                break;
            }
        }
    }
    if !bracketed && s_lo == 0.0 {
        return Err(XrelError::Precondition(
            "manifold field amplitude search failed to bracket the contrast".into(),
        ));
    }
    let mut best: Option<Vec<f64>> = None;
    for _ in 0..60 {
        let mid = 0.5 * (s_lo + s_hi);
        match eval(mid) {
            Some((c, data)) if c <= contrast => {
                s_lo = mid;
                best = Some(data);
            }
            _ => {
                s_hi = mid;
            }
        }
    }
    let data = match best {
        Some(d) => d,
        None => {
            // Fall back to the largest known-feasible amplitude.
            let (c, d) = eval(s_lo).ok_or_else(|| {
                XrelError::Precondition("manifold field amplitude search failed".into())
            })?;
            if c > contrast * (1.0 + 1e-12) {
                return Err(XrelError::Precondition(format!(
                    "requested contrast {contrast} infeasible: base field already at {c:.3}"
                )));
            }
            d
        }
    };
    CoefficientField::new(grid, data)
}

/// Smooth random field with values in S·D cellwise (D defaults to identity),
/// scaled to the requested RMS amplitude. Deterministic given the seed.
pub fn make_source_field(
    s: &Subspace,
    d: Option<&EndoMatrix>,
    grid: &Grid,
    corr_len: f64,
    amplitude: f64,
    seed: u64,
) -> Result<ExtendedField> {
    if s.is_empty() {
        return Err(XrelError::Precondition("source subspace is empty".into()));
    }
    let q = grid.q();
    let mut rng = SeededRng::from_seed(seed).stream(2);
    let mut out = ExtendedField::zeros(grid, FieldFlavor::Source);
    if amplitude == 0.0 {
        return Ok(out);
    }
    let id = EndoMatrix::identity(q, q);
    let dmat = d.unwrap_or(&id);
    for b in s.basis() {
        let bd = b * dmat;
        let coeff = smooth_scalar_field(grid, corr_len, &mut rng);
        for cell in 0..grid.ncells() {
            let c = coeff[cell];
            let dst = out.cell_mut(cell);
            for r in 0..q {
                for col in 0..q {
                    dst[r * q + col] += c * bd[(r, col)];
                }
            }
        }
    }
    let n = out.norm() / (grid.ncells() as f64).sqrt();
    if n > 0.0 {
        out.scale(amplitude / n);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Membership reports
// ---------------------------------------------------------------------------

/// Largest source space of a manifold's closure subspace (K·S ⊆ K).
pub fn maximal_source_space_of(ms: &ManifoldSpec) -> Subspace {
    crate::tensor_space::maximal_source_space(&ms.k0, ms.k0.rank_tol())
}

/// Relative floor factor for per-cell residuals (times the max cell norm).
pub const EPS_FLOOR_FACTOR: f64 = 1e-14;

/// Per-cell relative membership statistics of an extended field against a
/// subspace of L(T).
#[derive(Debug, Clone, serde::Serialize)]
pub struct MembershipReport {
    pub max_residual: f64,
    pub mean_residual: f64,
    pub cells: usize,
    pub tol: f64,
    pub pass: bool,
    /// (upper log10 bin edge, count); bins ascending.
    pub histogram: Vec<(f64, usize)>,
}

/// Computes ‖P(x) − proj(P(x))‖ / max(‖P(x)‖, ε_floor) per cell, where
/// ε_floor = 1e-14 × the largest cell norm; masked-out cells are excluded.
pub fn membership_report(
    p: &ExtendedField,
    target: &Subspace,
    mask: Option<&[bool]>,
    tol: f64,
) -> MembershipReport {
    let q = p.q();
    let qq = q * q;
    let ncells = p.grid().ncells();
    let included = |cell: usize| mask.map_or(true, |m| m[cell]);

    // Row-major orthonormal basis for fast per-cell Pythagoras residuals.
    let basis_rm: Vec<Vec<f64>> = target
        .basis()
        .iter()
        .map(|b| (0..qq).map(|i| b[(i / q, i % q)]).collect())
        .collect();

    let mut max_norm: f64 = 0.0;
    for cell in 0..ncells {
        if included(cell) {
            max_norm = max_norm.max(p.cell_norm(cell));
        }
    }
    let floor = EPS_FLOOR_FACTOR * max_norm;

    let mut max_res: f64 = 0.0;
    let mut sum_res = 0.0;
    let mut count = 0usize;
    let mut hist = vec![0usize; 17];
    let mut resid = vec![0.0; qq];
    for cell in 0..ncells {
        if !included(cell) {
            continue;
        }
        let c = p.cell(cell);
        let norm2: f64 = c.iter().map(|x| x * x).sum();
        // Explicit residual vector: the Pythagoras shortcut norm² − proj²
        // cancels catastrophically for near-member cells.
        resid.copy_from_slice(c);
        for b in &basis_rm {
            let coef: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            for (r, v) in resid.iter_mut().zip(b) {
                *r -= coef * v;
            }
        }
        let res = resid.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = res / norm2.sqrt().max(floor).max(1e-300);
        max_res = max_res.max(rel);
        sum_res += rel;
        count += 1;
        // log10 bins: (-inf,-16], (-16,-15], …, (-1, 0+]
        let bin = if rel <= 1e-16 {
            0
        } else {
            ((rel.log10() + 16.0).ceil().max(0.0) as usize).min(16)
        };
        hist[bin] += 1;
    }
    let histogram = hist
        .into_iter()
        .enumerate()
        .map(|(i, n)| (10f64.powi(i as i32 - 16), n))
        .collect();
    MembershipReport {
        max_residual: max_res,
        mean_residual: if count > 0 { sum_res / count as f64 } else { 0.0 },
        cells: count,
        tol,
        pass: max_res < tol,
        histogram,
    }
}
