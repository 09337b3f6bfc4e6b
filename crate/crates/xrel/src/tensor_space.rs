//! Finite-dimensional algebra of the tensor space T of d×m matrices and its
//! endomorphism space L(T): inner products, orthonormal subspaces, projections,
//! the multialgebra closure check, and the maximal source space.
//!
//! Elements of T are d×m matrices flattened row-major (entry (i,α) at index
//! i*m+α). Elements of L(T) are dense q×q matrices with q = d*m. The inner
//! product on L(T) is ⟨A,B⟩ = Σᵢ ⟨A eᵢ, B eᵢ⟩ = tr(AᵀB), the Frobenius form.

use nalgebra::DMatrix;

use crate::error::{Result, XrelError};

/// Dense real matrix representing an element of L(T) (also used for d×m
/// elements of T where convenient).
pub type EndoMatrix = DMatrix<f64>;

/// Dimensions fixing the tensor space T of d×m matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpaceSpec {
    d: usize,
    m: usize,
}

impl TensorSpaceSpec {
    pub fn new(d: usize, m: usize) -> Result<Self> {
        if !(d == 2 || d == 3) {
            return Err(XrelError::Precondition(format!(
                "spatial dimension must be 2 or 3, got {d}"
            )));
        }
        if m == 0 {
            return Err(XrelError::Precondition("m must be >= 1".into()));
        }
        Ok(Self { d, m })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Dimension of T.
    pub fn q(&self) -> usize {
        self.d * self.m
    }

    /// Index of the T-basis element with spatial index `i` and component `alpha`.
    pub fn flat(&self, i: usize, alpha: usize) -> usize {
        debug_assert!(i < self.d && alpha < self.m);
        i * self.m + alpha
    }

    /// The operator on T that rotates the spatial index by 90° (d = 2 only):
    /// the q×q matrix R⊥ ⊗ I_m with R⊥ = [[0,1],[-1,0]].
    pub fn rotation_operator(&self) -> Result<EndoMatrix> {
        if self.d != 2 {
            return Err(XrelError::Precondition(
                "rotation operator is defined for d = 2".into(),
            ));
        }
        let q = self.q();
        let mut r = EndoMatrix::zeros(q, q);
        for alpha in 0..self.m {
            r[(self.flat(0, alpha), self.flat(1, alpha))] = 1.0;
            r[(self.flat(1, alpha), self.flat(0, alpha))] = -1.0;
        }
        Ok(r)
    }
}

/// Frobenius inner product ⟨A,B⟩ = tr(AᵀB); errors on shape mismatch.
pub fn inner_product(a: &EndoMatrix, b: &EndoMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(XrelError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(ip(a, b))
}

#[inline]
pub(crate) fn ip(a: &EndoMatrix, b: &EndoMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Frobenius norm.
pub fn frob_norm(a: &EndoMatrix) -> f64 {
    ip(a, a).sqrt()
}

/// Adjoint of A ∈ L(T) with respect to the Frobenius inner product:
/// ⟨A·X, Y⟩ = ⟨X, adjoint_endo(A)·Y⟩ for all X, Y, i.e. the matrix transpose.
pub fn adjoint_endo(a: &EndoMatrix) -> EndoMatrix {
    a.transpose()
}

/// Composition B1·Ψ·B2 of three maps T → T.
pub fn triple_product(b1: &EndoMatrix, psi: &EndoMatrix, b2: &EndoMatrix) -> EndoMatrix {
    b1 * psi * b2
}

/// Default relative rank tolerance for subspace construction.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of a linear subspace of L(T).
///
/// The basis is always stored orthonormal under the Frobenius inner product,
/// so `residual` is a true distance to the span.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: Vec<EndoMatrix>,
    nrows: usize,
    ncols: usize,
    rank_tol: f64,
}

impl Subspace {
    /// Orthonormalize a spanning set by modified Gram–Schmidt with column
    /// pivoting; vectors whose residual norm falls below `rank_tol` times the
    /// largest input norm are dropped. An all-zero input yields an empty
    /// subspace.
    pub fn from_span(mats: &[EndoMatrix], rank_tol: f64) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| XrelError::Precondition("empty spanning set".into()))?;
        let (nrows, ncols) = first.shape();
        for m in mats {
            if m.shape() != (nrows, ncols) {
                return Err(XrelError::ShapeMismatch {
                    expected: format!("{:?}", (nrows, ncols)),
                    got: format!("{:?}", m.shape()),
                });
            }
        }
        let scale = mats.iter().map(frob_norm).fold(0.0_f64, f64::max);
        let mut work: Vec<EndoMatrix> = mats.to_vec();
        let mut basis = Vec::new();
        if scale > 0.0 {
            let cutoff = rank_tol * scale;
            while !work.is_empty() {
                // Pivot: remaining vector with the largest residual norm.
                let (best, norm) = work
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (i, frob_norm(m)))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                if norm <= cutoff {
                    break;
                }
                let v = work.swap_remove(best) / norm;
                for w in work.iter_mut() {
                    let c = ip(w, &v);
                    *w -= c * &v;
                }
                basis.push(v);
            }
        }
        Ok(Self {
            basis,
            nrows,
            ncols,
            rank_tol,
        })
    }

    /// The zero subspace of the given shape.
    pub fn empty(nrows: usize, ncols: usize, rank_tol: f64) -> Self {
        Self {
            basis: Vec::new(),
            nrows,
            ncols,
            rank_tol,
        }
    }

    /// The full matrix space of the given shape (standard basis).
    pub fn full(nrows: usize, ncols: usize, rank_tol: f64) -> Self {
        let mut basis = Vec::with_capacity(nrows * ncols);
        for r in 0..nrows {
            for c in 0..ncols {
                let mut e = EndoMatrix::zeros(nrows, ncols);
                e[(r, c)] = 1.0;
                basis.push(e);
            }
        }
        Self {
            basis,
            nrows,
            ncols,
            rank_tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn basis(&self) -> &[EndoMatrix] {
        &self.basis
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// Orthogonal projection of A onto the subspace: Σ ⟨A,bₖ⟩ bₖ.
    pub fn project(&self, a: &EndoMatrix) -> EndoMatrix {
        let mut out = EndoMatrix::zeros(self.nrows, self.ncols);
        for b in &self.basis {
            out += ip(a, b) * b;
        }
        out
    }

    /// Distance ‖A − project(A)‖; zero iff A lies in the span.
    pub fn residual(&self, a: &EndoMatrix) -> f64 {
        frob_norm(&(a - self.project(a)))
    }

    /// Orthogonal complement within the full matrix space of the same shape;
    /// dim(S) + dim(S⊥) = nrows·ncols.
    pub fn complement(&self) -> Subspace {
        let mut cands = Vec::with_capacity(self.nrows * self.ncols);
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                let mut e = EndoMatrix::zeros(self.nrows, self.ncols);
                e[(r, c)] = 1.0;
                let e = &e - self.project(&e);
                cands.push(e);
            }
        }
        let mut out = Subspace::from_span(&cands, self.rank_tol)
            .unwrap_or_else(|_| Subspace::empty(self.nrows, self.ncols, self.rank_tol));
        // One re-orthogonalization pass against self guards against drift.
        for b in out.basis.iter_mut() {
            let p = self.project(b);
            *b -= p;
            let n = frob_norm(b);
            if n > 0.0 {
                *b /= n;
            }
        }
        out
    }
}

/// Report of the multialgebra closure check K·Ψ(k)·K ⊆ K over a sample set.
#[derive(Debug, Clone)]
pub struct ClosureReport {
    pub max_residual: f64,
    pub pass: bool,
    pub tol: f64,
    /// (i, j, sample index) attaining the max residual.
    pub worst: Option<(usize, usize, usize)>,
    pub checks: usize,
}

/// For every basis pair (Bᵢ, Bⱼ) of K and every Ψ in `psi_samples`, measures
/// the residual of Bᵢ·Ψ·Bⱼ against K. Failure is a report outcome, not an
/// error.
pub fn closure_check(k: &Subspace, psi_samples: &[EndoMatrix], tol: f64) -> Result<ClosureReport> {
    if psi_samples.is_empty() {
        return Err(XrelError::Precondition(
            "closure_check needs at least one Ψ sample".into(),
        ));
    }
    let mut max_residual: f64 = 0.0;
    let mut worst = None;
    let mut checks = 0;
    for (i, bi) in k.basis().iter().enumerate() {
        for (j, bj) in k.basis().iter().enumerate() {
            for (s, psi) in psi_samples.iter().enumerate() {
                let prod = triple_product(bi, psi, bj);
                // Relative to the product scale so the verdict is unit-free.
                let scale = frob_norm(&prod).max(1.0);
                let r = k.residual(&prod) / scale;
                checks += 1;
                if r > max_residual {
                    max_residual = r;
                    worst = Some((i, j, s));
                }
            }
        }
    }
    Ok(ClosureReport {
        max_residual,
        pass: max_residual < tol,
        tol,
        worst,
        checks,
    })
}

/// Largest subspace S with Bᵢ·S ⊆ K for every basis element Bᵢ of K.
///
/// Assembles the linear constraints ⟨Bᵢ·S, Cⱼ⟩ = 0 over a basis {Cⱼ} of K⊥,
/// i.e. ⟨S, Bᵢᵀ·Cⱼ⟩ = 0, and returns the orthogonal complement of the span of
/// the Bᵢᵀ·Cⱼ. Empty K (vacuous constraint) yields the full space.
pub fn maximal_source_space(k: &Subspace, rank_tol: f64) -> Subspace {
    let (n, c) = k.shape();
    let kperp = k.complement();
    let mut constraints = Vec::new();
    for b in k.basis() {
        let bt = b.transpose();
        for cj in kperp.basis() {
            constraints.push(&bt * cj);
        }
    }
    if constraints.is_empty() {
        return Subspace::full(n, c, rank_tol);
    }
    match Subspace::from_span(&constraints, rank_tol) {
        Ok(span) => span.complement(),
        Err(_) => Subspace::full(n, c, rank_tol),
    }
}

/// Orthonormalized span of {bₖ·D} together with the condition number of D.
/// Errors if D is singular within tolerance.
pub fn right_multiply_space(s: &Subspace, d: &EndoMatrix) -> Result<(Subspace, f64)> {
    let svd = d.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-14 * smax {
        return Err(XrelError::Singular {
            context: "right_multiply_space: D".into(),
        });
    }
    let mats: Vec<EndoMatrix> = s.basis().iter().map(|b| b * d).collect();
    if mats.is_empty() {
        return Ok((
            Subspace::empty(s.shape().0, s.shape().1, s.rank_tol()),
            smax / smin,
        ));
    }
    let out = Subspace::from_span(&mats, s.rank_tol())?;
    Ok((out, smax / smin))
}

// ---------------------------------------------------------------------------
// Text serialization: one basis matrix per block, row-major, whitespace
// separated, `#` comments, blocks separated by blank lines.
// ---------------------------------------------------------------------------

/// Write matrices in the block text format.
pub fn write_matrices<W: std::io::Write>(
    w: &mut W,
    mats: &[EndoMatrix],
    comment: Option<&str>,
) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    for (i, m) in mats.iter().enumerate() {
        if i > 0 || comment.is_some() {
            writeln!(w)?;
        }
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

/// Parse matrices from the block text format.
pub fn read_matrices<R: std::io::BufRead>(r: R) -> Result<Vec<EndoMatrix>> {
    let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut cur: Vec<Vec<f64>> = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = match line.split_once('#') {
            Some((head, _)) => head.trim().to_string(),
            None => line.trim().to_string(),
        };
        if line.is_empty() {
            if !cur.is_empty() {
                blocks.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        match row {
            Ok(v) => cur.push(v),
            Err(e) => {
                return Err(XrelError::Config(format!(
                    "bad number in matrix block: {e} (line: {line:?})"
                )))
            }
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let nrows = b.len();
        let ncols = b[0].len();
        if b.iter().any(|r| r.len() != ncols) {
            return Err(XrelError::Config("ragged matrix block".into()));
        }
        out.push(EndoMatrix::from_fn(nrows, ncols, |r, c| b[r][c]));
    }
    Ok(out)
}

/// Serialize a subspace basis.
pub fn write_subspace<W: std::io::Write>(w: &mut W, s: &Subspace, comment: Option<&str>) -> Result<()> {
    write_matrices(w, s.basis(), comment)
}

/// Read a subspace from the block text format, re-orthonormalizing.
pub fn read_subspace<R: std::io::BufRead>(r: R, rank_tol: f64) -> Result<Subspace> {
    let mats = read_matrices(r)?;
    Subspace::from_span(&mats, rank_tol)
}
