//! Fourier-multiplier operators for the primary (gradient / divergence-free)
//! equations: the projection Γ₁(k), the operator Γ(k), Ψ(k) = M − Γ(k), and
//! quadrature choices of M.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, XrelError};
use crate::tensor_space::{EndoMatrix, TensorSpaceSpec};

/// Symmetric positive definite reference tensor L₀ on T.
#[derive(Debug, Clone)]
pub struct ReferenceTensor {
    l0: EndoMatrix,
}

impl ReferenceTensor {
    /// Validates symmetry (to 1e-13 relative) and positive definiteness.
    pub fn new(l0: EndoMatrix) -> Result<Self> {
        let scale = l0.amax().max(1e-300);
        let asym = (&l0 - l0.transpose()).amax();
        if asym > 1e-13 * scale {
            return Err(XrelError::Precondition(format!(
                "reference tensor not symmetric: asymmetry {asym:.3e}"
            )));
        }
        let eig = l0.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            return Err(XrelError::Precondition(format!(
                "reference tensor not positive definite: min eigenvalue {min:.3e}"
            )));
        }
        Ok(Self { l0 })
    }

    pub fn isotropic(spec: &TensorSpaceSpec, sigma0: f64) -> Result<Self> {
        if sigma0 <= 0.0 {
            return Err(XrelError::Precondition("sigma0 must be positive".into()));
        }
        Self::new(sigma0 * EndoMatrix::identity(spec.q(), spec.q()))
    }

    pub fn matrix(&self) -> &EndoMatrix {
        &self.l0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.l0.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// Choice of the self-adjoint tensor M entering Ψ = M − Γ.
#[derive(Debug, Clone)]
pub enum MChoice {
    /// M = ⟨Γ(n)⟩ averaged over the unit sphere with the given quadrature order
    /// (node count per angle; `None` picks the default).
    SphereAverage { order: Option<usize> },
    /// M = Γ(n₀) for a single direction.
    SingleDirection(Vec<f64>),
    /// A caller-supplied M, validated against M·L₀·M ≤ M.
    Custom(EndoMatrix),
}

/// Γ₁(k): projection of a d×m matrix A onto k⊗(k·A)/|k|², as a q×q matrix.
/// Returns zero for k = 0. Depends on k only through its direction.
pub fn gamma1(spec: &TensorSpaceSpec, k: &[f64]) -> EndoMatrix {
    let d = spec.d();
    let m = spec.m();
    let q = spec.q();
    debug_assert_eq!(k.len(), d);
    let norm2: f64 = k.iter().map(|x| x * x).sum();
    let mut g = EndoMatrix::zeros(q, q);
    if norm2 == 0.0 {
        return g;
    }
    for i in 0..d {
        for j in 0..d {
            let v = k[i] * k[j] / norm2;
            for alpha in 0..m {
                g[(spec.flat(i, alpha), spec.flat(j, alpha))] = v;
            }
        }
    }
    g
}

/// Pseudo-inverse of a symmetric PSD matrix restricted to its range, by
/// eigendecomposition with relative cutoff.
fn pinv_sym(a: &EndoMatrix, rel_cut: f64) -> EndoMatrix {
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let cut = rel_cut * lmax.max(1e-300);
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| if l.abs() > cut { 1.0 / l } else { 0.0 }),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Γ(k) = Γ₁(k)[Γ₁(k)L₀Γ₁(k)]⁻¹Γ₁(k), the inverse taken on range(Γ₁(k)).
/// Symmetric; Γ(0) = 0.
pub fn gamma(spec: &TensorSpaceSpec, k: &[f64], l0: &ReferenceTensor) -> EndoMatrix {
    let g1 = gamma1(spec, k);
    if g1.amax() == 0.0 {
        return g1;
    }
    let core = &g1 * l0.matrix() * &g1;
    let pinv = pinv_sym(&core, 1e-12);
    let g = &g1 * pinv * &g1;
    // Symmetrize away roundoff; the operator is self-adjoint by construction.
    0.5 * (&g + g.transpose())
}

/// Ψ(k) = M − Γ(k); Ψ(0) = M. Depends on k only through k/|k| for the primary
/// equations.
pub fn psi(spec: &TensorSpaceSpec, k: &[f64], l0: &ReferenceTensor, m: &EndoMatrix) -> EndoMatrix {
    m - gamma(spec, k, l0)
}

/// Default circle quadrature order for d = 2.
pub const CIRCLE_QUAD_ORDER: usize = 128;
/// Default polar × azimuthal product-Gauss orders for d = 3.
pub const SPHERE_QUAD_ORDER: (usize, usize) = (32, 64);

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess.
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Legendre recurrence for P_n(t) and P'_n(t).
            let (mut p0, mut p1) = (1.0, t);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * t * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let dp = (n as f64) * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, t);
        for j in 2..=n {
            let jf = j as f64;
            let p2 = ((2.0 * jf - 1.0) * t * p1 - (jf - 1.0) * p0) / jf;
            p0 = p1;
            p1 = p2;
        }
        let dp = (n as f64) * (t * p1 - p0) / (t * t - 1.0);
        x[i] = t;
        w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
    (x, w)
}

/// Uniformly weighted average of Γ(n) over the unit sphere.
fn sphere_average(spec: &TensorSpaceSpec, l0: &ReferenceTensor, order: Option<usize>) -> EndoMatrix {
    let q = spec.q();
    let mut acc = EndoMatrix::zeros(q, q);
    match spec.d() {
        2 => {
            let n = order.unwrap_or(CIRCLE_QUAD_ORDER);
            for i in 0..n {
                let th = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                acc += gamma(spec, &[th.cos(), th.sin()], l0);
            }
            acc / n as f64
        }
        3 => {
            let np = order.unwrap_or(SPHERE_QUAD_ORDER.0);
            let na = if order.is_some() { 2 * np } else { SPHERE_QUAD_ORDER.1 };
            let (xs, ws) = gauss_legendre(np);
            let mut wsum = 0.0;
            for (c, wp) in xs.iter().zip(&ws) {
                let s = (1.0 - c * c).sqrt();
                for a in 0..na {
                    let ph = 2.0 * std::f64::consts::PI * (a as f64 + 0.5) / na as f64;
                    let n = [s * ph.cos(), s * ph.sin(), *c];
                    acc += *wp * gamma(spec, &n, l0);
                    wsum += wp;
                }
            }
            acc / wsum
        }
        _ => unreachable!(),
    }
}

/// Largest eigenvalue of the symmetric part of M − M·L₀·M; the condition
/// M·L₀·M ≤ M holds when the *smallest* eigenvalue is ≥ −tol.
pub fn mlm_defect(m: &EndoMatrix, l0: &ReferenceTensor) -> f64 {
    let mlm = m * l0.matrix() * m;
    let gap = m - mlm;
    let sym = 0.5 * (&gap + gap.transpose());
    sym.symmetric_eigen().eigenvalues.min()
}

/// Build M per the requested choice; validates symmetry, positive
/// semidefiniteness, and M·L₀·M ≤ M.
pub fn build_m(spec: &TensorSpaceSpec, l0: &ReferenceTensor, choice: &MChoice) -> Result<EndoMatrix> {
    let m = match choice {
        MChoice::SphereAverage { order } => sphere_average(spec, l0, *order),
        MChoice::SingleDirection(n0) => {
            if n0.len() != spec.d() {
                return Err(XrelError::Precondition(format!(
                    "direction has {} components, expected {}",
                    n0.len(),
                    spec.d()
                )));
            }
            if n0.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(XrelError::Precondition("zero direction for M".into()));
            }
            gamma(spec, n0, l0)
        }
        MChoice::Custom(m) => {
            if m.shape() != (spec.q(), spec.q()) {
                return Err(XrelError::ShapeMismatch {
                    expected: format!("{}x{}", spec.q(), spec.q()),
                    got: format!("{:?}", m.shape()),
                });
            }
            m.clone()
        }
    };
    let scale = m.amax().max(1e-300);
    if (&m - m.transpose()).amax() > 1e-12 * scale {
        return Err(XrelError::Precondition("M is not symmetric".into()));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-12 * scale {
        return Err(XrelError::Precondition(format!(
            "M is not positive semidefinite: min eigenvalue {min_eig:.3e}"
        )));
    }
    let defect = mlm_defect(&m, l0);
    if defect < -1e-10 * scale {
        return Err(XrelError::Precondition(format!(
            "M·L0·M ≤ M violated: min eigenvalue of M − MLM is {defect:.3e}"
        )));
    }
    Ok(m)
}

/// Deterministic low-discrepancy unit directions (golden-ratio sequence on the
/// circle, Fibonacci lattice on the sphere), plus caller extras.
pub fn direction_samples(d: usize, count: usize, extras: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(count + extras.len());
    match d {
        2 => {
            let phi_inv = (5.0_f64.sqrt() - 1.0) / 2.0;
            for j in 0..count {
                let th = 2.0 * std::f64::consts::PI * ((j as f64 * phi_inv) % 1.0);
                dirs.push(vec![th.cos(), th.sin()]);
            }
        }
        3 => {
            let ga = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
            for j in 0..count {
                let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let th = ga * j as f64;
                dirs.push(vec![r * th.cos(), r * th.sin(), z]);
            }
        }
        _ => {}
    }
    for e in extras {
        let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            dirs.push(e.iter().map(|x| x / n).collect());
        }
    }
    dirs
}

/// Ψ(n) evaluated on a deterministic direction sample set; the standard input
/// to `closure_check`.
pub fn psi_samples(
    spec: &TensorSpaceSpec,
    l0: &ReferenceTensor,
    m: &EndoMatrix,
    count: usize,
    extras: &[Vec<f64>],
) -> Vec<EndoMatrix> {
    direction_samples(spec.d(), count, extras)
        .iter()
        .map(|n| psi(spec, n, l0, m))
        .collect()
}
