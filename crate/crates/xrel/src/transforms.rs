//! The fractional linear transform W_M, its inverse, manifold membership, the
//! L_λ interpolation family with a coercivity certificate, and the rank-one
//! lamination formula.

use nalgebra::DMatrix;

use crate::error::{Result, XrelError};
use crate::physics::{build_m, gamma, mlm_defect, MChoice, ReferenceTensor};
use crate::tensor_space::{EndoMatrix, Subspace, TensorSpaceSpec, DEFAULT_RANK_TOL};

/// Condition number above which linear solves are flagged in reports.
pub const COND_WARN: f64 = 1e12;

/// Solve A·X = B by LU with partial pivoting; errors with `context` when A is
/// singular. Returns the solution and an inf-norm condition estimate.
fn lu_solve(a: &EndoMatrix, b: &EndoMatrix, context: &str) -> Result<(EndoMatrix, f64)> {
    let norm_a = a.amax();
    let lu = a.clone().lu();
    match lu.solve(b) {
        Some(x) => {
            let cond = match lu.try_inverse() {
                Some(inv) => norm_a * inv.amax(),
                None => f64::INFINITY,
            };
            Ok((x, cond))
        }
        None => Err(XrelError::Singular {
            context: context.to_string(),
        }),
    }
}

/// W_M(L) = [I + (L−L₀)M]⁻¹(L−L₀).
pub fn w_transform(l: &EndoMatrix, l0: &EndoMatrix, m: &EndoMatrix) -> Result<EndoMatrix> {
    let q = l.nrows();
    let dl = l - l0;
    let a = EndoMatrix::identity(q, q) + &dl * m;
    let (x, _cond) = lu_solve(&a, &dl, "w_transform: I + (L−L0)M")?;
    Ok(x)
}

/// Inverse map: L = L₀ + K(I − M·K)⁻¹, so w_transform(w_inverse(K)) = K.
pub fn w_inverse(k: &EndoMatrix, l0: &EndoMatrix, m: &EndoMatrix) -> Result<EndoMatrix> {
    let q = k.nrows();
    let a = EndoMatrix::identity(q, q) - m * k;
    // K(I−MK)⁻¹ = ((I−MK)⁻ᵀ Kᵀ)ᵀ.
    let (xt, _cond) = lu_solve(&a.transpose(), &k.transpose(), "w_inverse: I − M·K")?;
    Ok(l0 + xt.transpose())
}

/// An exact-relation manifold in W-coordinates: M = W_M⁻¹(K₀).
#[derive(Debug, Clone)]
pub struct ManifoldSpec {
    pub spec: TensorSpaceSpec,
    /// Self-adjoint part of the closure space (every basis element symmetric).
    pub k0: Subspace,
    pub l0: ReferenceTensor,
    pub m: EndoMatrix,
}

impl ManifoldSpec {
    pub fn new(
        spec: TensorSpaceSpec,
        k0: Subspace,
        l0: ReferenceTensor,
        m: EndoMatrix,
    ) -> Result<Self> {
        for b in k0.basis() {
            if (b - b.transpose()).amax() > 1e-12 * b.amax().max(1e-300) {
                return Err(XrelError::Precondition(
                    "K0 basis element is not symmetric".into(),
                ));
            }
        }
        if mlm_defect(&m, &l0) < -1e-10 {
            return Err(XrelError::Precondition("M·L0·M ≤ M violated".into()));
        }
        Ok(Self { spec, k0, l0, m })
    }

    /// Residual of W_M(L) against K₀; zero iff L lies on the manifold.
    pub fn membership(&self, l: &EndoMatrix) -> Result<f64> {
        let k = w_transform(l, self.l0.matrix(), &self.m)?;
        Ok(self.k0.residual(&k))
    }
}

/// Trace-free symmetric 2×2 subspace: the closure space of the constant
/// determinant 2-d conductivity relation.
pub fn trace_free_symmetric_2x2() -> Subspace {
    Subspace::from_span(
        &[
            EndoMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            EndoMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        ],
        DEFAULT_RANK_TOL,
    )
    .unwrap()
}

/// Built-in constant-determinant manifold for 2-d conductivity:
/// d = 2, m = 1, L₀ = σ₀I, M = I/(2σ₀), K₀ = trace-free symmetric. Membership
/// is equivalent to det L = σ₀² for symmetric L.
pub fn dykhne_manifold(sigma0: f64) -> Result<ManifoldSpec> {
    let spec = TensorSpaceSpec::new(2, 1)?;
    let l0 = ReferenceTensor::isotropic(&spec, sigma0)?;
    let m = build_m(&spec, &l0, &MChoice::SphereAverage { order: None })?;
    ManifoldSpec::new(spec, trace_free_symmetric_2x2(), l0, m)
}

/// |det L − σ₀²| for the determinant cross-check of the built-in manifold.
pub fn dykhne_det_residual(l: &EndoMatrix, sigma0: f64) -> f64 {
    (l.determinant() - sigma0 * sigma0).abs()
}

/// L_λ = L₀ + λ[I + (1−λ)(L−L₀)M]⁻¹(L−L₀); L_1 = L, L_0 = L₀, and
/// W_M(L_λ) = λ·W_M(L).
pub fn l_lambda(l: &EndoMatrix, l0: &EndoMatrix, m: &EndoMatrix, lambda: f64) -> Result<EndoMatrix> {
    let q = l.nrows();
    let dl = l - l0;
    let a = EndoMatrix::identity(q, q) + (1.0 - lambda) * &dl * m;
    let (x, _cond) = lu_solve(&a, &dl, "l_lambda: I + (1−λ)(L−L0)M")?;
    Ok(l0 + lambda * x)
}

/// Outcome of the numerical coercivity sweep for Theorem-4.2-type hypotheses.
#[derive(Debug, Clone)]
pub struct CoercivityReport {
    /// Smallest eigenvalue of M − M·L₀·M (hypothesis check; must be ≥ −1e-10).
    pub mlm_min_eigenvalue: f64,
    /// min over the λ grid of the smallest eigenvalue of sym(L_λ).
    pub min_eigenvalue: f64,
    /// λ attaining the minimum.
    pub argmin_lambda: f64,
    pub alpha_floor: f64,
    pub pass: bool,
}

/// Verifies M·L₀·M ≤ M and sweeps the smallest eigenvalue of the symmetrized
/// L_λ over the λ grid; passes iff all values stay at or above `alpha_floor`.
pub fn coercivity_certificate(
    l: &EndoMatrix,
    l0: &ReferenceTensor,
    m: &EndoMatrix,
    lambda_grid: &[f64],
    alpha_floor: f64,
) -> Result<CoercivityReport> {
    let mlm_min = mlm_defect(m, l0);
    let mut min_eig = f64::INFINITY;
    let mut argmin = f64::NAN;
    for &lam in lambda_grid {
        let ll = l_lambda(l, l0.matrix(), m, lam)?;
        let sym = 0.5 * (&ll + ll.transpose());
        let e = sym.symmetric_eigen().eigenvalues.min();
        if e < min_eig {
            min_eig = e;
            argmin = lam;
        }
    }
    let pass = mlm_min >= -1e-10 && min_eig >= alpha_floor;
    Ok(CoercivityReport {
        mlm_min_eigenvalue: mlm_min,
        min_eigenvalue: min_eig,
        argmin_lambda: argmin,
        alpha_floor,
        pass,
    })
}

/// Uniform λ grid on [0, 1] with `n` points (default 101).
pub fn lambda_grid(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Rank-one laminate of La and Lb in direction n with volume fraction f of La:
/// L* = W_n⁻¹(f·W_n(La) + (1−f)·W_n(Lb)) with M = Γ(n) fixed internally.
pub fn laminate(
    spec: &TensorSpaceSpec,
    la: &EndoMatrix,
    lb: &EndoMatrix,
    f: f64,
    n: &[f64],
    l0: &ReferenceTensor,
) -> Result<EndoMatrix> {
    if !(0.0..=1.0).contains(&f) {
        return Err(XrelError::Precondition(format!(
            "volume fraction {f} outside [0,1]"
        )));
    }
    let gn = gamma(spec, n, l0);
    let ka = w_transform(la, l0.matrix(), &gn)?;
    let kb = w_transform(lb, l0.matrix(), &gn)?;
    let k = f * ka + (1.0 - f) * kb;
    w_inverse(&k, l0.matrix(), &gn)
}

/// Classical two-phase laminate for 2-d symmetric conductivity with layer
/// normal e₁: harmonic mean along the normal, arithmetic across, used as an
/// independent oracle in tests.
pub fn laminate_conductivity_oracle_e1(la: &EndoMatrix, lb: &EndoMatrix, f: f64) -> EndoMatrix {
    // For diagonal phases: L*_11 = (f/a11 + (1-f)/b11)^-1, L*_22 = f a22 + (1-f) b22.
    let h11 = 1.0 / (f / la[(0, 0)] + (1.0 - f) / lb[(0, 0)]);
    let a22 = f * la[(1, 1)] + (1.0 - f) * lb[(1, 1)];
    DMatrix::from_row_slice(2, 2, &[h11, 0.0, 0.0, a22])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor_space::frob_norm;
    use rand::Rng;

    fn dykhne() -> ManifoldSpec {
        dykhne_manifold(1.0).unwrap()
    }

    fn mat2(a: f64, b: f64, c: f64, d: f64) -> EndoMatrix {
        EndoMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    /// Random symmetric L with det = 1 via exp of a trace-free symmetric H.
    fn random_dykhne_point(rng: &mut impl Rng, radius: f64) -> EndoMatrix {
        let a = radius * (2.0 * rng.gen::<f64>() - 1.0);
        let b = radius * (2.0 * rng.gen::<f64>() - 1.0);
        let h = mat2(a, b, b, -a);
        // exp(H) for symmetric 2×2 trace-free: cosh(r) I + sinh(r)/r H.
        let r = (a * a + b * b).sqrt();
        if r == 0.0 {
            return EndoMatrix::identity(2, 2);
        }
        r.cosh() * EndoMatrix::identity(2, 2) + (r.sinh() / r) * h
    }

    #[test]
    fn w_transform_examples() {
        let d = dykhne();
        let l0 = d.l0.matrix();
        let m = &d.m;
        assert!(frob_norm(&w_transform(l0, l0, m).unwrap()) < 1e-15);

        let k = w_transform(&mat2(2.0, 0.0, 0.0, 0.5), l0, m).unwrap();
        assert!(frob_norm(&(&k - mat2(2.0 / 3.0, 0.0, 0.0, -2.0 / 3.0))) < 1e-14);

        let k = w_transform(&(2.0 * EndoMatrix::identity(2, 2)), l0, m).unwrap();
        assert!(frob_norm(&(&k - (2.0 / 3.0) * EndoMatrix::identity(2, 2))) < 1e-14);
    }

    #[test]
    fn w_inverse_roundtrip() {
        let d = dykhne();
        let l0 = d.l0.matrix();
        let m = &d.m;
        assert!(frob_norm(&(&w_inverse(&EndoMatrix::zeros(2, 2), l0, m).unwrap() - l0)) < 1e-15);

        let k = mat2(2.0 / 3.0, 0.0, 0.0, -2.0 / 3.0);
        let l = w_inverse(&k, l0, m).unwrap();
        assert!(frob_norm(&(&l - mat2(2.0, 0.0, 0.0, 0.5))) < 1e-13);

        let mut rng = SeededRng::from_seed(42).into_rng();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let l = random_dykhne_point(&mut rng, 1.0)
                + 0.05 * EndoMatrix::identity(2, 2) * rng.gen::<f64>();
            let k = w_transform(&l, l0, m).unwrap();
            let back = w_inverse(&k, l0, m).unwrap();
            worst = worst.max(frob_norm(&(&back - &l)) / frob_norm(&l).max(1.0));
        }
        assert!(worst < 1e-11, "roundtrip error {worst:.3e}");
    }

    #[test]
    fn membership_examples() {
        let d = dykhne();
        assert!(d.membership(&mat2(2.0, 0.0, 0.0, 0.5)).unwrap() < 1e-13);

        let r = d.membership(&(2.0 * EndoMatrix::identity(2, 2))).unwrap();
        assert!((r - (2.0 / 3.0) * 2.0_f64.sqrt()).abs() < 1e-13);

        let mut rng = SeededRng::from_seed(7).into_rng();
        for _ in 0..50 {
            let l = random_dykhne_point(&mut rng, 1.2);
            assert!(d.membership(&l).unwrap() < 1e-10);
            assert!(dykhne_det_residual(&l, 1.0) < 1e-12);
        }
    }

    #[test]
    fn l_lambda_endpoints_and_homothety() {
        let d = dykhne();
        let l0 = d.l0.matrix();
        let m = &d.m;
        let l = mat2(2.0, 0.3, 0.3, 0.8);
        assert!(frob_norm(&(&l_lambda(&l, l0, m, 1.0).unwrap() - &l)) < 1e-14);
        assert!(frob_norm(&(&l_lambda(&l, l0, m, 0.0).unwrap() - l0)) < 1e-14);
        assert!(frob_norm(&(&l_lambda(l0, l0, m, 0.37).unwrap() - l0)) < 1e-14);

        let wl = w_transform(&l, l0, m).unwrap();
        let mut rng = SeededRng::from_seed(3).into_rng();
        for _ in 0..20 {
            let lam: f64 = rng.gen();
            let ll = l_lambda(&l, l0, m, lam).unwrap();
            let wll = w_transform(&ll, l0, m).unwrap();
            assert!(frob_norm(&(&wll - lam * &wl)) < 1e-12);
        }
    }

    #[test]
    fn coercivity_examples() {
        let d = dykhne();
        let grid = lambda_grid(101);
        let l = mat2(2.0, 0.0, 0.0, 0.5);
        let rep = coercivity_certificate(&l, &d.l0, &d.m, &grid, 0.0).unwrap();
        assert!(rep.pass && rep.min_eigenvalue > 0.0);
        assert!(rep.mlm_min_eigenvalue > -1e-12);

        // M = 3I violates M L0 M ≤ M for L0 = I.
        let bad = 3.0 * EndoMatrix::identity(2, 2);
        let rep = coercivity_certificate(&l, &d.l0, &bad, &grid, 0.0).unwrap();
        assert!(!rep.pass && rep.mlm_min_eigenvalue < -1.0);
    }

    #[test]
    fn laminate_examples() {
        let d = dykhne();
        let spec = d.spec;
        let la = mat2(2.0, 0.0, 0.0, 0.5);
        let lb = mat2(0.5, 0.0, 0.0, 2.0);
        let l = laminate(&spec, &la, &lb, 0.5, &[1.0, 0.0], &d.l0).unwrap();
        assert!(frob_norm(&(&l - mat2(0.8, 0.0, 0.0, 1.25))) < 1e-12);
        let oracle = laminate_conductivity_oracle_e1(&la, &lb, 0.5);
        assert!(frob_norm(&(&l - &oracle)) < 1e-12);

        assert!(frob_norm(&(&laminate(&spec, &la, &lb, 0.0, &[0.0, 1.0], &d.l0).unwrap() - &lb)) < 1e-13);
        assert!(frob_norm(&(&laminate(&spec, &la, &lb, 1.0, &[0.0, 1.0], &d.l0).unwrap() - &la)) < 1e-13);

        let mut rng = SeededRng::from_seed(11).into_rng();
        for _ in 0..50 {
            let la = random_dykhne_point(&mut rng, 1.0);
            let lb = random_dykhne_point(&mut rng, 1.0);
            let f: f64 = rng.gen();
            let th = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            let l = laminate(&spec, &la, &lb, f, &[th.cos(), th.sin()], &d.l0).unwrap();
            assert!(dykhne_det_residual(&l, 1.0) < 1e-10);
            assert!(d.membership(&l).unwrap() < 1e-10);
        }
    }

    #[test]
    fn laminate_semigroup_in_w_coordinates() {
        // Repeated lamination in one direction composes linearly in W space:
        // laminating (La, Lb; f) then (·, Lb; g) equals (La, Lb; f·g).
        let d = dykhne();
        let spec = d.spec;
        let mut rng = SeededRng::from_seed(19).into_rng();
        for _ in 0..10 {
            let la = random_dykhne_point(&mut rng, 0.9);
            let lb = random_dykhne_point(&mut rng, 0.9);
            let n = [0.6_f64, 0.8];
            let f = 0.3;
            let g = 0.5;
            let step = laminate(&spec, &la, &lb, f, &n, &d.l0).unwrap();
            let two = laminate(&spec, &step, &lb, g, &n, &d.l0).unwrap();
            let direct = laminate(&spec, &la, &lb, f * g, &n, &d.l0).unwrap();
            assert!(frob_norm(&(&two - &direct)) < 1e-11);
        }
    }
}
