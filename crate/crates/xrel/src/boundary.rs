//! Boundary field equalities: the two-phase congruence (rank-one flux) check
//! on a bounded finite-difference mesh, the embedding construction with an
//! exterior point source, flux-subspace membership for stacked divergence-free
//! fields, vector-potential reconstruction, and partial null-Lagrangian
//! surface identities (2-d path).

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

use crate::error::{Result, XrelError};
use crate::field::{CoefficientField, ExtendedField, FieldFlavor};
use crate::greens::{solve_point_source, DeltaSpec};
use crate::grid::Grid;
use crate::rng::SeededRng;
use crate::solver::{membership_report, MembershipReport, PolarizationSolver, SolveDiagnostics, SolveOptions};
use crate::tensor_space::{frob_norm, EndoMatrix, Subspace, TensorSpaceSpec};
use crate::transforms::ManifoldSpec;

// ---------------------------------------------------------------------------
// Two-phase congruence diagonalization and the finite-difference solve
// ---------------------------------------------------------------------------

/// Two SPD phase tensors plus a per-node phase indicator.
#[derive(Debug, Clone)]
pub struct TwoPhaseSpec {
    pub a1: EndoMatrix,
    pub a2: EndoMatrix,
    /// true = phase 1, per FD node, node-major (j*(nx+1)+i).
    pub phase: Vec<bool>,
}

fn check_spd(a: &EndoMatrix, name: &str) -> Result<()> {
    let scale = a.amax().max(1e-300);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return Err(XrelError::Precondition(format!("{name} is not symmetric")));
    }
    if a.clone().symmetric_eigen().eigenvalues.min() <= 0.0 {
        return Err(XrelError::Precondition(format!("{name} is not positive definite")));
    }
    Ok(())
}

impl TwoPhaseSpec {
    pub fn checkerboard(a1: EndoMatrix, a2: EndoMatrix, mesh: &FdMesh, tile: usize) -> Result<Self> {
        check_spd(&a1, "A1")?;
        check_spd(&a2, "A2")?;
        let tile = tile.max(1);
        let mut phase = Vec::with_capacity((mesh.nx + 1) * (mesh.ny + 1));
        for j in 0..=mesh.ny {
            for i in 0..=mesh.nx {
                phase.push(((i / tile) + (j / tile)) % 2 == 0);
            }
        }
        Ok(Self { a1, a2, phase })
    }
}

/// Inverse square root of an SPD matrix via its eigendecomposition.
fn spd_inv_sqrt(a: &EndoMatrix) -> EndoMatrix {
    let eig = a.clone().symmetric_eigen();
    let vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Congruence W with W·A2·Wᵀ = I and W·A1·Wᵀ = diag(σ):
/// W = Q·(A2)^{-1/2} with Q orthogonal diagonalizing (A2)^{-1/2}A1(A2)^{-1/2}.
pub fn congruence_diagonalize(a1: &EndoMatrix, a2: &EndoMatrix) -> Result<(EndoMatrix, Vec<f64>)> {
    check_spd(a1, "A1")?;
    check_spd(a2, "A2")?;
    let s = spd_inv_sqrt(a2);
    let b = &s * a1 * &s;
    let b = 0.5 * (&b + b.transpose());
    let eig = b.symmetric_eigen();
    let w = eig.eigenvectors.transpose() * s;
    Ok((w, eig.eigenvalues.iter().cloned().collect()))
}

/// Node-centered rectangular FD mesh for bounded Dirichlet solves.
#[derive(Debug, Clone, Copy)]
pub struct FdMesh {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
}

impl FdMesh {
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }
}

/// Outward conormal flux at one boundary face of the FD mesh.
#[derive(Debug, Clone)]
pub struct FdBoundaryFlux {
    pub node: (usize, usize),
    pub normal: [f64; 2],
    /// n·J, m components.
    pub value: Vec<f64>,
    pub ds: f64,
}

#[derive(Debug, Clone)]
pub struct FdSolution {
    /// Node-major potentials, m components per node (boundary nodes carry the
    /// Dirichlet data).
    pub u: Vec<f64>,
    pub flux: Vec<FdBoundaryFlux>,
    /// Σ n·J ds per component; zero to solver precision by discrete
    /// conservation.
    pub conservation: Vec<f64>,
}

/// Symmetric banded matrix stored by lower band; LLᵀ factorization + solve.
struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>, // band[r*(bw+1) + (r-c)] for r-bw <= c <= r
}

impl BandedSpd {
    fn new(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: f64) {
        // Symmetric: keep the lower triangle.
        if c > r {
            return;
        }
        debug_assert!(r - c <= self.bw);
        self.band[r * (self.bw + 1) + (r - c)] += v;
    }

    fn cholesky(&mut self) -> Result<()> {
        let bw = self.bw;
        for r in 0..self.n {
            let cmin = r.saturating_sub(bw);
            for c in cmin..=r {
                let kmin = cmin.max(c.saturating_sub(bw));
                let mut sum = self.band[r * (bw + 1) + (r - c)];
                for k in kmin..c {
                    sum -= self.band[r * (bw + 1) + (r - k)] * self.band[c * (bw + 1) + (c - k)];
                }
                if c == r {
                    if sum <= 0.0 {
                        return Err(XrelError::Singular {
                            context: format!("banded Cholesky pivot at row {r}"),
                        });
                    }
                    self.band[r * (bw + 1)] = sum.sqrt();
                } else {
                    self.band[r * (bw + 1) + (r - c)] = sum / self.band[c * (bw + 1)];
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let bw = self.bw;
        // forward: L y = b
        for r in 0..self.n {
            let cmin = r.saturating_sub(bw);
            let mut sum = b[r];
            for c in cmin..r {
                sum -= self.band[r * (bw + 1) + (r - c)] * b[c];
            }
            b[r] = sum / self.band[r * (bw + 1)];
        }
        // backward: Lᵀ x = y
        for r in (0..self.n).rev() {
            let mut sum = b[r];
            let cmax = (r + bw).min(self.n - 1);
            for c in r + 1..=cmax {
                sum -= self.band[c * (bw + 1) + (c - r)] * b[c];
            }
            b[r] = sum / self.band[r * (bw + 1)];
        }
    }
}

/// Solves the decoupled-form elliptic system ∇·(A(x)∇u) = 0 on the mesh with
/// Dirichlet data, using 5-point stencils with matrix harmonic averaging of A
/// at faces (which commutes with constant congruences and conserves the
/// discrete flux exactly). Returns interior potentials and the outward
/// conormal flux on the boundary.
pub fn fd_solve_dirichlet(
    mesh: &FdMesh,
    a_nodes: &[EndoMatrix],
    m: usize,
    u_boundary: &dyn Fn(usize, usize) -> Vec<f64>,
) -> Result<FdSolution> {
    let nx = mesh.nx;
    let ny = mesh.ny;
    if nx < 2 || ny < 2 {
        return Err(XrelError::Precondition("FD mesh needs at least 2 cells per axis".into()));
    }
    if a_nodes.len() != (nx + 1) * (ny + 1) {
        return Err(XrelError::ShapeMismatch {
            expected: format!("{} node tensors", (nx + 1) * (ny + 1)),
            got: format!("{}", a_nodes.len()),
        });
    }

    // Harmonic face mean cache keyed by unordered node pair tensors; with two
    // phases there are at most three distinct values, but a small map keeps
    // this general.
    let harm = |a: &EndoMatrix, b: &EndoMatrix| -> Result<EndoMatrix> {
        let ai = a.clone().lu().try_inverse().ok_or_else(|| XrelError::Singular {
            context: "fd face mean".into(),
        })?;
        let bi = b.clone().lu().try_inverse().ok_or_else(|| XrelError::Singular {
            context: "fd face mean".into(),
        })?;
        let s = ai + bi;
        Ok(2.0 * s.lu().try_inverse().ok_or_else(|| XrelError::Singular {
            context: "fd face mean".into(),
        })?)
    };

    // Unknown ordering: interior nodes by (j,i), m components each.
    let idx = |i: usize, j: usize| -> usize { ((j - 1) * (nx - 1) + (i - 1)) * m };
    let nun = (nx - 1) * (ny - 1) * m;
    let bw = m * (nx - 1) + m - 1;
    let mut sys = BandedSpd::new(nun, bw);
    let mut rhs = vec![0.0; nun];

    // Dirichlet data on all boundary nodes.
    let mut u = vec![0.0; (nx + 1) * (ny + 1) * m];
    for j in 0..=ny {
        for i in 0..=nx {
            if mesh.is_boundary(i, j) {
                let vals = u_boundary(i, j);
                if vals.len() != m {
                    return Err(XrelError::Precondition("boundary data has wrong arity".into()));
                }
                u[mesh.node(i, j) * m..mesh.node(i, j) * m + m].copy_from_slice(&vals);
            }
        }
    }

    let neighbors = |i: usize, j: usize| -> [(usize, usize); 4] {
        [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)]
    };

    // Assemble: at interior node c, Σ_f A_f (u_nb − u_c) = 0 (h² cancels).
    for j in 1..ny {
        for i in 1..nx {
            let c = idx(i, j);
            let ac = &a_nodes[mesh.node(i, j)];
            for (pi, pj) in neighbors(i, j) {
                let af = harm(ac, &a_nodes[mesh.node(pi, pj)])?;
                for r in 0..m {
                    for s in 0..m {
                        let v = af[(r, s)];
                        if v == 0.0 {
                            continue;
                        }
                        sys.add(c + r, c + s, v);
                        if mesh.is_boundary(pi, pj) {
                            rhs[c + r] += v * u[mesh.node(pi, pj) * m + s];
                        } else {
                            let p = idx(pi, pj);
                            sys.add(c + r, p + s, -v);
                        }
                    }
                }
            }
        }
    }

    sys.cholesky()?;
    sys.solve(&mut rhs);
    for j in 1..ny {
        for i in 1..nx {
            let c = idx(i, j);
            u[mesh.node(i, j) * m..mesh.node(i, j) * m + m].copy_from_slice(&rhs[c..c + m]);
        }
    }

    // Outward flux at boundary faces: n·J = A_f (u_b − u_c)/h, one face per
    // non-corner boundary node (its unique interior neighbor).
    let mut flux = Vec::new();
    let mut conservation = vec![0.0; m];
    let mut push_flux = |bi: usize, bj: usize, ci: usize, cj: usize, normal: [f64; 2]| -> Result<()> {
        let af = harm(&a_nodes[mesh.node(ci, cj)], &a_nodes[mesh.node(bi, bj)])?;
        let mut value = vec![0.0; m];
        for r in 0..m {
            let mut acc = 0.0;
            for s in 0..m {
                acc += af[(r, s)]
                    * (u[mesh.node(bi, bj) * m + s] - u[mesh.node(ci, cj) * m + s]);
            }
            value[r] = acc / mesh.h;
        }
        for r in 0..m {
            conservation[r] += value[r] * mesh.h;
        }
        flux.push(FdBoundaryFlux {
            node: (bi, bj),
            normal,
            value,
            ds: mesh.h,
        });
        Ok(())
    };
    for i in 1..nx {
        push_flux(i, 0, i, 1, [0.0, -1.0])?;
        push_flux(i, ny, i, ny - 1, [0.0, 1.0])?;
    }
    for j in 1..ny {
        push_flux(0, j, 1, j, [-1.0, 0.0])?;
        push_flux(nx, j, nx - 1, j, [1.0, 0.0])?;
    }

    Ok(FdSolution {
        u,
        flux,
        conservation,
    })
}

/// Outcome of the rank-one boundary flux experiment.
#[derive(Debug, Clone)]
pub struct MilgromReport {
    /// second/first singular value of the stacked boundary flux matrix.
    pub sv_ratio: f64,
    /// |sin ∠(recovered, predicted)| with predicted = W⁻¹ e_k.
    pub sin_angle: f64,
    pub recovered: Vec<f64>,
    pub predicted: Vec<f64>,
    pub conservation_max: f64,
    pub w: EndoMatrix,
    pub sigma: Vec<f64>,
}

/// Prescribes boundary data so that (Wᵀ)⁻¹u has only component k nonzero,
/// solves the two-phase system, and measures how far the boundary flux is
/// from rank one.
pub fn milgrom_flux_check(
    spec: &TwoPhaseSpec,
    mesh: &FdMesh,
    k: usize,
) -> Result<MilgromReport> {
    let m = spec.a1.nrows();
    if k >= m {
        return Err(XrelError::Precondition(format!("mode index {k} out of range")));
    }
    let (w, sigma) = congruence_diagonalize(&spec.a1, &spec.a2)?;
    let wt_col: Vec<f64> = (0..m).map(|r| w[(k, r)]).collect(); // (Wᵀ e_k)_r = W_{k,r}

    let a_nodes: Vec<EndoMatrix> = spec
        .phase
        .iter()
        .map(|&p| if p { spec.a1.clone() } else { spec.a2.clone() })
        .collect();

    // Smooth nontrivial scalar profile φ on the boundary; u = φ·(Wᵀ e_k).
    let lx = mesh.nx as f64 * mesh.h;
    let ly = mesh.ny as f64 * mesh.h;
    let profile = |i: usize, j: usize| -> f64 {
        let x = i as f64 * mesh.h / lx;
        let y = j as f64 * mesh.h / ly;
        (2.0 * std::f64::consts::PI * x).sin() + 0.7 * (2.0 * std::f64::consts::PI * y).cos()
            + 1.3 * x
            - 0.4 * y
    };
    let sol = fd_solve_dirichlet(mesh, &a_nodes, m, &|i, j| {
        let p = profile(i, j);
        wt_col.iter().map(|&c| c * p).collect()
    })?;

    // Stack the flux vectors and take the SVD.
    let rows = sol.flux.len();
    let fmat = DMatrix::from_fn(rows, m, |r, c| sol.flux[r].value[c]);
    let svd = fmat.svd(false, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sv_ratio = if sv[0] > 0.0 && m > 1 { sv[1] / sv[0] } else { 0.0 };
    let vt = svd.v_t.expect("svd with v_t");
    let recovered: Vec<f64> = (0..m).map(|c| vt[(0, c)]).collect();

    let w_inv = w.clone().lu().try_inverse().ok_or_else(|| XrelError::Singular {
        context: "milgrom: W".into(),
    })?;
    let mut predicted: Vec<f64> = (0..m).map(|r| w_inv[(r, k)]).collect();
    let pn: f64 = predicted.iter().map(|x| x * x).sum::<f64>().sqrt();
    for v in predicted.iter_mut() {
        *v /= pn;
    }
    // |sin θ| as the orthogonal-component norm; the identity √(1−cos²) floors
    // at √ε for nearly aligned vectors.
    let rn: f64 = recovered.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = recovered.iter().zip(&predicted).map(|(a, b)| a * b).sum::<f64>() / rn;
    let sin_angle = recovered
        .iter()
        .zip(&predicted)
        .map(|(r, p)| {
            let o = r / rn - dot * p;
            o * o
        })
        .sum::<f64>()
        .sqrt();
    let conservation_max = sol
        .conservation
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()));

    Ok(MilgromReport {
        sv_ratio,
        sin_angle,
        recovered,
        predicted,
        conservation_max,
        w,
        sigma,
    })
}

// ---------------------------------------------------------------------------
// Staircase domains on the periodic solver grid
// ---------------------------------------------------------------------------

/// One face of the staircase boundary, anchored at its inside cell.
#[derive(Debug, Clone)]
pub struct BoundaryFace {
    pub cell: usize,
    /// Outside neighbor cell.
    pub outside: usize,
    pub normal: [f64; 2],
    pub ds: f64,
    /// Lattice vertices (corner coordinates) ordered so v0→v1 is the
    /// clockwise tangent R⊥n.
    pub v0: [usize; 2],
    pub v1: [usize; 2],
}

/// Cell mask plus extracted staircase boundary with outward normals.
#[derive(Debug, Clone)]
pub struct Domain {
    grid: Grid,
    pub mask: Vec<bool>,
    pub boundary: Vec<BoundaryFace>,
}

impl Domain {
    /// Builds the boundary face list from a mask (d = 2 only). The mask must
    /// be nonempty and not full.
    pub fn from_mask(grid: &Grid, mask: Vec<bool>) -> Result<Self> {
        if grid.d() != 2 {
            return Err(XrelError::Precondition("staircase domains are 2-d".into()));
        }
        if mask.len() != grid.ncells() {
            return Err(XrelError::ShapeMismatch {
                expected: format!("{} cells", grid.ncells()),
                got: format!("{}", mask.len()),
            });
        }
        let inside = mask.iter().filter(|&&b| b).count();
        if inside == 0 || inside == grid.ncells() {
            return Err(XrelError::Precondition("mask must be nonempty and not full".into()));
        }
        let (n1, n2) = (grid.sizes()[0], grid.sizes()[1]);
        let (h1, h2) = (grid.cell_lengths()[0], grid.cell_lengths()[1]);
        let mut boundary = Vec::new();
        for a in 0..n1 {
            for b in 0..n2 {
                let cell = grid.index(&[a, b]);
                if !mask[cell] {
                    continue;
                }
                // +x
                let nb = grid.index(&[(a + 1) % n1, b]);
                if !mask[nb] {
                    boundary.push(BoundaryFace {
                        cell,
                        outside: nb,
                        normal: [1.0, 0.0],
                        ds: h2,
                        v0: [a + 1, b + 1],
                        v1: [a + 1, b],
                    });
                }
                // -x
                let nb = grid.index(&[(a + n1 - 1) % n1, b]);
                if !mask[nb] {
                    boundary.push(BoundaryFace {
                        cell,
                        outside: nb,
                        normal: [-1.0, 0.0],
                        ds: h2,
                        v0: [a, b],
                        v1: [a, b + 1],
                    });
                }
                // +y
                let nb = grid.index(&[a, (b + 1) % n2]);
                if !mask[nb] {
                    boundary.push(BoundaryFace {
                        cell,
                        outside: nb,
                        normal: [0.0, 1.0],
                        ds: h1,
                        v0: [a, b + 1],
                        v1: [a + 1, b + 1],
                    });
                }
                // -y
                let nb = grid.index(&[a, (b + n2 - 1) % n2]);
                if !mask[nb] {
                    boundary.push(BoundaryFace {
                        cell,
                        outside: nb,
                        normal: [0.0, -1.0],
                        ds: h1,
                        v0: [a + 1, b],
                        v1: [a, b],
                    });
                }
            }
        }
        Ok(Self {
            grid: grid.clone(),
            mask,
            boundary,
        })
    }

    /// Centered disk of the given radius in cells (default N/4).
    pub fn disk(grid: &Grid, radius_cells: Option<f64>) -> Result<Self> {
        let n1 = grid.sizes()[0] as f64;
        let r = radius_cells.unwrap_or(n1 / 4.0);
        let c1 = grid.sizes()[0] / 2;
        let c2 = grid.sizes()[1] / 2;
        let mask = (0..grid.ncells())
            .map(|cell| {
                let co = grid.coords(cell);
                let dx = co[0] as f64 - c1 as f64;
                let dy = co[1] as f64 - c2 as f64;
                (dx * dx + dy * dy).sqrt() < r
            })
            .collect();
        Self::from_mask(grid, mask)
    }

    /// Smooth radial blend weight for a centered disk: 1 in the bulk, easing
    /// to 0 at the boundary over `margin_cells` (C² smootherstep). Keeps
    /// embedded coefficient fields smooth through the staircase interface so
    /// the spectral solve is free of interface ringing.
    pub fn disk_blend(grid: &Grid, radius_cells: f64, margin_cells: f64) -> Vec<f64> {
        let c1 = grid.sizes()[0] as f64 / 2.0;
        let c2 = grid.sizes()[1] as f64 / 2.0;
        let w = margin_cells.max(1.0);
        (0..grid.ncells())
            .map(|cell| {
                let co = grid.coords(cell);
                let dx = co[0] as f64 - c1;
                let dy = co[1] as f64 - c2;
                let r = (dx * dx + dy * dy).sqrt();
                let t = ((radius_cells - r) / w).clamp(0.0, 1.0);
                t * t * t * (t * (6.0 * t - 15.0) + 10.0)
            })
            .collect()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ninside(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Physical position of a lattice vertex (cell corner).
    pub fn vertex_position(&self, v: [usize; 2]) -> [f64; 2] {
        let h = self.grid.cell_lengths();
        [(v[0] as f64 - 0.5) * h[0], (v[1] as f64 - 0.5) * h[1]]
    }

    /// Perimeter of the staircase boundary.
    pub fn perimeter(&self) -> f64 {
        self.boundary.iter().map(|f| f.ds).sum()
    }

    /// Orders the boundary faces into the closed clockwise chain v0→v1→…;
    /// errors when the boundary is open or not a single loop.
    pub fn boundary_chain(&self) -> Result<Vec<usize>> {
        let mut by_start: HashMap<[usize; 2], usize> = HashMap::new();
        for (i, f) in self.boundary.iter().enumerate() {
            if by_start.insert(f.v0, i).is_some() {
                return Err(XrelError::Precondition(
                    "boundary is not a simple loop (vertex pinch)".into(),
                ));
            }
        }
        let mut chain = Vec::with_capacity(self.boundary.len());
        let first = 0usize;
        let mut cur = first;
        loop {
            chain.push(cur);
            let end = self.boundary[cur].v1;
            match by_start.get(&end) {
                Some(&next) => {
                    if next == first {
                        break;
                    }
                    cur = next;
                }
                None => {
                    return Err(XrelError::Precondition("open boundary chain".into()));
                }
            }
            if chain.len() > self.boundary.len() {
                return Err(XrelError::Precondition(
                    "boundary has more than one loop".into(),
                ));
            }
        }
        if chain.len() != self.boundary.len() {
            return Err(XrelError::Precondition(
                "boundary has more than one loop".into(),
            ));
        }
        Ok(chain)
    }
}

// ---------------------------------------------------------------------------
// Flux subspace 𝒟 and its boundary contraction
// ---------------------------------------------------------------------------

/// Subspace 𝒟 of stacked pairs (𝕁, 𝕁̃) ∈ L(T)² with 𝕁 − L₀·R⊥·𝕁̃ ∈ K·D,
/// represented as q×2q matrices [𝕁 | 𝕁̃].
#[derive(Debug, Clone)]
pub struct FluxSubspace {
    pub spec: TensorSpaceSpec,
    /// Basis of 𝒟 in [A|B] form.
    pub pairs: Subspace,
    /// K·D target for the Z-condition.
    pub kd: Subspace,
    l0_rot: EndoMatrix,
}

impl FluxSubspace {
    /// dim 𝒟 = dim(K·D) + q².
    pub fn dim(&self) -> usize {
        self.pairs.dim()
    }

    /// Z = A − L₀R⊥B for a pair given as [A|B].
    pub fn z_of(&self, pair: &EndoMatrix) -> EndoMatrix {
        let q = self.spec.q();
        let a = pair.columns(0, q).into_owned();
        let b = pair.columns(q, q).into_owned();
        a - &self.l0_rot * b
    }

    /// Membership residual of a pair (relative to its norm).
    pub fn pair_residual(&self, pair: &EndoMatrix) -> f64 {
        self.pairs.residual(pair) / frob_norm(pair).max(1e-300)
    }

    /// Image n·𝒟 under contraction of the spatial index with a normal, as a
    /// subspace of m×2q matrices.
    pub fn contract(&self, normal: &[f64]) -> Subspace {
        let q = self.spec.q();
        let m = self.spec.m();
        let mats: Vec<EndoMatrix> = self
            .pairs
            .basis()
            .iter()
            .map(|p| contract_normal(&self.spec, p, normal))
            .collect();
        Subspace::from_span(&mats, self.pairs.rank_tol())
            .unwrap_or_else(|_| Subspace::empty(m, 2 * q, 1e-10))
    }
}

/// Contraction of the spatial index of a q×c matrix-of-T-columns with n:
/// out[(α, s)] = Σᵢ nᵢ·mat[(flat(i,α), s)].
pub fn contract_normal(spec: &TensorSpaceSpec, mat: &EndoMatrix, normal: &[f64]) -> EndoMatrix {
    let m = spec.m();
    let cols = mat.ncols();
    EndoMatrix::from_fn(m, cols, |alpha, s| {
        (0..spec.d())
            .map(|i| normal[i] * mat[(spec.flat(i, alpha), s)])
            .sum()
    })
}

/// Builds 𝒟 for a closure space image K·D (d = 2 only).
pub fn flux_subspace(
    spec: &TensorSpaceSpec,
    kd: &Subspace,
    l0: &EndoMatrix,
) -> Result<FluxSubspace> {
    if spec.d() != 2 {
        return Err(XrelError::Precondition("flux subspace is built on the 2-d path".into()));
    }
    let q = spec.q();
    let rot = spec.rotation_operator()?;
    let l0_rot = l0 * &rot;
    let mut span: Vec<EndoMatrix> = Vec::new();
    for z in kd.basis() {
        let mut p = EndoMatrix::zeros(q, 2 * q);
        p.view_mut((0, 0), (q, q)).copy_from(z);
        span.push(p);
    }
    for r in 0..q {
        for c in 0..q {
            let mut b = EndoMatrix::zeros(q, q);
            b[(r, c)] = 1.0;
            let a = &l0_rot * &b;
            let mut p = EndoMatrix::zeros(q, 2 * q);
            p.view_mut((0, 0), (q, q)).copy_from(&a);
            p.view_mut((0, q), (q, q)).copy_from(&b);
            span.push(p);
        }
    }
    let pairs = Subspace::from_span(&span, kd.rank_tol())?;
    Ok(FluxSubspace {
        spec: *spec,
        pairs,
        kd: kd.clone(),
        l0_rot,
    })
}

/// Per-face boundary data extracted from a converged solve.
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    /// Full pair values [𝕁|𝕁̃] at each face (average of the two adjacent
    /// cells).
    pub pairs: Vec<EndoMatrix>,
    /// Stacked flux rows [n·𝕁 | n·𝕁̃] per face as m×2q matrices.
    pub flux: Vec<EndoMatrix>,
    /// Potential values w at face midpoints (∂E side), when reconstructed.
    pub potential: Vec<Vec<f64>>,
}

/// Extracts the trace of (𝕁, 𝕁̃) on the domain boundary.
pub fn extract_trace(domain: &Domain, j: &ExtendedField, jt: &ExtendedField) -> BoundaryTrace {
    let q = j.q();
    let spec = *j.grid().spec();
    let mut pairs = Vec::with_capacity(domain.boundary.len());
    let mut flux = Vec::with_capacity(domain.boundary.len());
    for f in &domain.boundary {
        let avg = |field: &ExtendedField| -> EndoMatrix {
            0.5 * (field.get(f.cell) + field.get(f.outside))
        };
        let ja = avg(j);
        let jta = avg(jt);
        let mut p = EndoMatrix::zeros(q, 2 * q);
        p.view_mut((0, 0), (q, q)).copy_from(&ja);
        p.view_mut((0, q), (q, q)).copy_from(&jta);
        flux.push(contract_normal(&spec, &p, &f.normal));
        pairs.push(p);
    }
    BoundaryTrace {
        pairs,
        flux,
        potential: Vec::new(),
    }
}

/// Flux membership report: residual of each stacked flux row against n(x)·𝒟.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FluxMembershipReport {
    pub max_residual: f64,
    pub mean_residual: f64,
    pub faces: usize,
    pub tol: f64,
    pub pass: bool,
    /// dim of the contracted image vs its ambient space; equal dims mean the
    /// pointwise contracted check is vacuous for this manifold.
    pub image_dim: usize,
    pub ambient_dim: usize,
    pub degenerate: bool,
}

/// Residual of the per-face stacked flux vector against n(x)·𝒟.
pub fn flux_membership(
    trace: &BoundaryTrace,
    domain: &Domain,
    dspace: &FluxSubspace,
    tol: f64,
) -> FluxMembershipReport {
    // Axis-aligned normals: contract once per distinct normal.
    let mut images: HashMap<[i8; 2], Subspace> = HashMap::new();
    let key = |n: &[f64; 2]| [n[0].round() as i8, n[1].round() as i8];
    for f in &domain.boundary {
        images
            .entry(key(&f.normal))
            .or_insert_with(|| dspace.contract(&f.normal));
    }
    let m = dspace.spec.m();
    let q = dspace.spec.q();
    let ambient_dim = 2 * m * q;
    let image_dim = images.values().map(|s| s.dim()).max().unwrap_or(0);
    let mut max_res: f64 = 0.0;
    let mut sum = 0.0;
    for (f, row) in domain.boundary.iter().zip(&trace.flux) {
        let img = &images[&key(&f.normal)];
        let r = img.residual(row) / frob_norm(row).max(1e-300);
        max_res = max_res.max(r);
        sum += r;
    }
    let faces = trace.flux.len();
    FluxMembershipReport {
        max_residual: max_res,
        mean_residual: if faces > 0 { sum / faces as f64 } else { 0.0 },
        faces,
        tol,
        pass: max_res < tol,
        image_dim,
        ambient_dim,
        degenerate: image_dim == ambient_dim,
    }
}

/// Residual of the full boundary pairs against 𝒟 (the non-contracted
/// membership; codimension dim(K·D)⊥ within the Z-slot).
pub fn pair_membership(trace: &BoundaryTrace, dspace: &FluxSubspace) -> (f64, f64) {
    let mut max_res: f64 = 0.0;
    let mut sum = 0.0;
    for p in &trace.pairs {
        let r = dspace.pair_residual(p);
        max_res = max_res.max(r);
        sum += r;
    }
    let n = trace.pairs.len().max(1);
    (max_res, sum / n as f64)
}

// ---------------------------------------------------------------------------
// Vector potential reconstruction and the partial null-Lagrangian identities
// ---------------------------------------------------------------------------

/// w potential on the lattice vertices of Ω with t = 2·m·q components,
/// reconstructed from Q = [𝕁|𝕁̃] by line integration (∇w = −R⊥Q columnwise).
#[derive(Debug, Clone)]
pub struct WPotential {
    /// Vertex -> w values (t components).
    pub values: HashMap<[usize; 2], Vec<f64>>,
    pub t: usize,
    /// Max loop-closure error over cells of Ω.
    pub loop_closure: f64,
}

impl WPotential {
    pub fn at(&self, v: [usize; 2]) -> Option<&Vec<f64>> {
        self.values.get(&v)
    }

    /// Cell-average of the four corner vertices; None if any corner missing.
    pub fn cell_average(&self, coords: &[usize]) -> Option<Vec<f64>> {
        let (a, b) = (coords[0], coords[1]);
        let corners = [[a, b], [a + 1, b], [a, b + 1], [a + 1, b + 1]];
        let mut acc = vec![0.0; self.t];
        for c in corners {
            let v = self.values.get(&c)?;
            for (x, y) in acc.iter_mut().zip(v) {
                *x += 0.25 * y;
            }
        }
        Some(acc)
    }
}

/// The t-component column fields of Q = [𝕁 | 𝕁̃]: column κ = (c, α) maps to the
/// d-vector (Q[flat(i,α), c])ᵢ.
fn q_column(
    spec: &TensorSpaceSpec,
    j: &ExtendedField,
    jt: &ExtendedField,
    cell: usize,
    kappa: usize,
) -> [f64; 2] {
    let q = spec.q();
    let m = spec.m();
    let (c, alpha) = (kappa / m, kappa % m);
    let (field, col) = if c < q { (j, c) } else { (jt, c - q) };
    let data = field.cell(cell);
    [
        data[spec.flat(0, alpha) * q + col],
        data[spec.flat(1, alpha) * q + col],
    ]
}

/// ∇w value at a cell: ∂₁w_κ = −Q₂[κ], ∂₂w_κ = Q₁[κ].
pub fn grad_w_at_cell(
    spec: &TensorSpaceSpec,
    j: &ExtendedField,
    jt: &ExtendedField,
    cell: usize,
) -> EndoMatrix {
    let t = 2 * spec.m() * spec.q();
    EndoMatrix::from_fn(2, t, |i, kappa| {
        let qv = q_column(spec, j, jt, cell, kappa);
        if i == 0 {
            -qv[1]
        } else {
            qv[0]
        }
    })
}

/// Line-integrates −R⊥Q over a spanning tree of the vertices of Ω and reports
/// the loop-closure residual. Edge values use the average of the two adjacent
/// cells (one-sided at the boundary).
pub fn potential_from_q_2d(
    domain: &Domain,
    j: &ExtendedField,
    jt: &ExtendedField,
) -> Result<WPotential> {
    let grid = domain.grid();
    let spec = *grid.spec();
    let t = 2 * spec.m() * spec.q();
    let (n1, n2) = (grid.sizes()[0], grid.sizes()[1]);
    let (h1, h2) = (grid.cell_lengths()[0], grid.cell_lengths()[1]);

    let in_mask = |a: i64, b: i64| -> Option<usize> {
        if a < 0 || b < 0 || a >= n1 as i64 || b >= n2 as i64 {
            return None;
        }
        let cell = grid.index(&[a as usize, b as usize]);
        domain.mask[cell].then_some(cell)
    };

    // Edge increment Δw along +x from vertex (i,j) to (i+1,j): midpoint value
    // of ∂₁w from the two cells the edge separates ((i, j−1) and (i, j)), or a
    // second-order one-sided extrapolation 1.5·F(near) − 0.5·F(far) when only
    // one side lies in Ω (a plain one-sided value would bias the boundary
    // trace at O(h) after accumulation along the integration path).
    let grad_at = |cell: usize| grad_w_at_cell(&spec, j, jt, cell);
    let edge_value = |row: usize,
                      near: Option<usize>,
                      far_of_near: Option<usize>,
                      other: Option<usize>,
                      far_of_other: Option<usize>|
     -> Option<Vec<f64>> {
        let mut acc = vec![0.0; t];
        match (near, other) {
            (Some(a), Some(b)) => {
                let ga = grad_at(a);
                let gb = grad_at(b);
                for (kappa, v) in acc.iter_mut().enumerate() {
                    *v = 0.5 * (ga[(row, kappa)] + gb[(row, kappa)]);
                }
            }
            (Some(a), None) | (None, Some(a)) => {
                let far = if near.is_some() { far_of_near } else { far_of_other };
                let ga = grad_at(a);
                match far {
                    Some(f) => {
                        let gf = grad_at(f);
                        for (kappa, v) in acc.iter_mut().enumerate() {
                            *v = 1.5 * ga[(row, kappa)] - 0.5 * gf[(row, kappa)];
                        }
                    }
                    None => {
                        for (kappa, v) in acc.iter_mut().enumerate() {
                            *v = ga[(row, kappa)];
                        }
                    }
                }
            }
            (None, None) => return None,
        }
        Some(acc)
    };
    let edge_x = |i: usize, jv: usize| -> Option<Vec<f64>> {
        let below = in_mask(i as i64, jv as i64 - 1);
        let below2 = in_mask(i as i64, jv as i64 - 2);
        let above = in_mask(i as i64, jv as i64);
        let above2 = in_mask(i as i64, jv as i64 + 1);
        let acc = edge_value(0, below, below2, above, above2)?;
        Some(acc.iter().map(|v| v * h1).collect())
    };
    let edge_y = |i: usize, jv: usize| -> Option<Vec<f64>> {
        let left = in_mask(i as i64 - 1, jv as i64);
        let left2 = in_mask(i as i64 - 2, jv as i64);
        let right = in_mask(i as i64, jv as i64);
        let right2 = in_mask(i as i64 + 1, jv as i64);
        let acc = edge_value(1, left, left2, right, right2)?;
        Some(acc.iter().map(|v| v * h2).collect())
    };

    // Vertices of Ω: corners of masked cells.
    let mut vertices: Vec<[usize; 2]> = Vec::new();
    let mut seen: HashMap<[usize; 2], bool> = HashMap::new();
    for a in 0..n1 {
        for b in 0..n2 {
            if domain.mask[grid.index(&[a, b])] {
                for v in [[a, b], [a + 1, b], [a, b + 1], [a + 1, b + 1]] {
                    if seen.insert(v, true).is_none() {
                        vertices.push(v);
                    }
                }
            }
        }
    }
    vertices.sort();

    // BFS over vertex edges that touch Ω.
    let mut values: HashMap<[usize; 2], Vec<f64>> = HashMap::new();
    let root = vertices[0];
    values.insert(root, vec![0.0; t]);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(root);
    while let Some(v) = queue.pop_front() {
        let wv = values[&v].clone();
        // +x neighbor
        let mut try_edge = |to: [usize; 2], inc: Option<Vec<f64>>, sign: f64| {
            if let Some(inc) = inc {
                if seen.contains_key(&to) && !values.contains_key(&to) {
                    let wn: Vec<f64> = wv.iter().zip(&inc).map(|(a, d)| a + sign * d).collect();
                    values.insert(to, wn);
                    queue.push_back(to);
                }
            }
        };
        try_edge([v[0] + 1, v[1]], edge_x(v[0], v[1]), 1.0);
        if v[0] > 0 {
            try_edge([v[0] - 1, v[1]], edge_x(v[0] - 1, v[1]), -1.0);
        }
        try_edge([v[0], v[1] + 1], edge_y(v[0], v[1]), 1.0);
        if v[1] > 0 {
            try_edge([v[0], v[1] - 1], edge_y(v[0], v[1] - 1), -1.0);
        }
    }

    // Loop closure: circulation around every masked cell.
    let mut loop_closure: f64 = 0.0;
    for a in 0..n1 {
        for b in 0..n2 {
            if !domain.mask[grid.index(&[a, b])] {
                continue;
            }
            let ex0 = edge_x(a, b);
            let ex1 = edge_x(a, b + 1);
            let ey0 = edge_y(a, b);
            let ey1 = edge_y(a + 1, b);
            if let (Some(ex0), Some(ex1), Some(ey0), Some(ey1)) = (ex0, ex1, ey0, ey1) {
                for kappa in 0..t {
                    let circ = ex0[kappa] + ey1[kappa] - ex1[kappa] - ey0[kappa];
                    loop_closure = loop_closure.max(circ.abs());
                }
            }
        }
    }

    Ok(WPotential {
        values,
        t,
        loop_closure,
    })
}

/// ∮ n⊗w ds over the staircase boundary by the trapezoid rule (face value =
/// mean of the endpoint vertices); returns (integral, residual against C,
/// scale = ∮‖w‖ds).
pub fn surface_moment_check(
    domain: &Domain,
    w: &WPotential,
    c_space: &Subspace,
) -> Result<(EndoMatrix, f64, f64)> {
    domain.boundary_chain()?; // validates closedness
    let t = w.t;
    let mut integral = EndoMatrix::zeros(2, t);
    let mut scale = 0.0;
    for f in &domain.boundary {
        let w0 = w
            .at(f.v0)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let w1 = w
            .at(f.v1)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let mid: Vec<f64> = w0.iter().zip(w1).map(|(a, b)| 0.5 * (a + b)).collect();
        for (kappa, &v) in mid.iter().enumerate() {
            integral[(0, kappa)] += f.normal[0] * v * f.ds;
            integral[(1, kappa)] += f.normal[1] * v * f.ds;
        }
        scale += mid.iter().map(|v| v * v).sum::<f64>().sqrt() * f.ds;
    }
    let residual = c_space.residual(&integral);
    Ok((integral, residual, scale.max(1e-300)))
}

/// Volume/surface agreement for the partial null-Lagrangian F = [Nw]·∇w:
/// ∫_Ω [Nw]·∇w dx versus ∮ [n·Nw] w ds. Returns the two t-vectors and the
/// relative disagreement.
#[derive(Debug, Clone)]
pub struct NullLagrangianReport {
    pub volume: Vec<f64>,
    pub surface: Vec<f64>,
    pub residual: f64,
    pub scale: f64,
}

/// Validates that N is normal to C, then evaluates both sides by
/// midpoint/trapezoid quadrature.
pub fn null_lagrangian_check(
    domain: &Domain,
    w: &WPotential,
    j: &ExtendedField,
    jt: &ExtendedField,
    n_mat: &EndoMatrix,
    c_space: &Subspace,
) -> Result<NullLagrangianReport> {
    let grid = domain.grid();
    let spec = *grid.spec();
    let t = w.t;
    if n_mat.shape() != (2, t) {
        return Err(XrelError::ShapeMismatch {
            expected: format!("2x{t}"),
            got: format!("{:?}", n_mat.shape()),
        });
    }
    // Normality validation: ⟨N, C⟩ = 0 for every basis element.
    let nscale = frob_norm(n_mat).max(1e-300);
    for c in c_space.basis() {
        let ip: f64 = (0..2)
            .flat_map(|i| (0..t).map(move |k| (i, k)))
            .map(|(i, k)| n_mat[(i, k)] * c[(i, k)])
            .sum();
        if ip.abs() > 1e-10 * nscale {
            return Err(XrelError::Precondition(format!(
                "N is not normal to C: inner product {ip:.3e}"
            )));
        }
    }

    let vol_element = grid.cell_volume();
    let mut volume = vec![0.0; t];
    let mut vol_scale = 0.0;
    for cell in 0..grid.ncells() {
        if !domain.mask[cell] {
            continue;
        }
        let coords = grid.coords(cell);
        let wbar = match w.cell_average(&coords) {
            Some(v) => v,
            None => continue,
        };
        let grad = grad_w_at_cell(&spec, j, jt, cell);
        // (Nw)_i then F_β = Σ_i (Nw)_i ∂_i w_β.
        let mut nw = [0.0; 2];
        for i in 0..2 {
            nw[i] = (0..t).map(|k| n_mat[(i, k)] * wbar[k]).sum();
        }
        let mut cell_norm2 = 0.0;
        for beta in 0..t {
            let f = nw[0] * grad[(0, beta)] + nw[1] * grad[(1, beta)];
            volume[beta] += f * vol_element;
            cell_norm2 += f * f;
        }
        vol_scale += cell_norm2.sqrt() * vol_element;
    }

    let mut surface = vec![0.0; t];
    let mut surf_scale = 0.0;
    for f in &domain.boundary {
        let w0 = w
            .at(f.v0)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let w1 = w
            .at(f.v1)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let mid: Vec<f64> = w0.iter().zip(w1).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut nnw = 0.0;
        for i in 0..2 {
            let nwi: f64 = (0..t).map(|k| n_mat[(i, k)] * mid[k]).sum();
            nnw += f.normal[i] * nwi;
        }
        let mut face_norm2 = 0.0;
        for beta in 0..t {
            let g = nnw * mid[beta];
            surface[beta] += g * f.ds;
            face_norm2 += g * g;
        }
        surf_scale += face_norm2.sqrt() * f.ds;
    }

    // Scale: the L¹ size of the integrands (the quadrature-error
    // normalization); the integral values themselves can vanish by
    // oscillation and are not a scale.
    let scale = vol_scale.max(surf_scale).max(1e-300);
    let diff: f64 = volume
        .iter()
        .zip(&surface)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(NullLagrangianReport {
        volume,
        surface,
        residual: diff / scale,
        scale,
    })
}

/// The 2-d pair identity: with two normals N₁, N₂ to C, recovers the scalar
/// potential W₁ (R⊥N₁w = ∇W₁) by integrating its tangential derivative n·N₁w
/// along the boundary chain, and compares ∫_Ω [N₂w]·R⊥N₁w dx against
/// ∮ [n·N₂w] W₁ ds. Also returns the closure defect of the W₁ boundary
/// integration (a boundary field equality in itself).
#[derive(Debug, Clone)]
pub struct PairNullLagrangianReport {
    pub volume: f64,
    pub surface: f64,
    pub residual: f64,
    pub scale: f64,
    pub w1_closure: f64,
}

pub fn null_lagrangian_pair_check(
    domain: &Domain,
    w: &WPotential,
    n1: &EndoMatrix,
    n2: &EndoMatrix,
) -> Result<PairNullLagrangianReport> {
    let grid = domain.grid();
    let t = w.t;
    let chain = domain.boundary_chain()?;

    // W₁ at boundary vertices: walk the chain integrating (n·N₁ w̄) ds, the
    // tangential derivative along the clockwise tangent R⊥n.
    let mut w1: HashMap<[usize; 2], f64> = HashMap::new();
    let start = domain.boundary[chain[0]].v0;
    w1.insert(start, 0.0);
    let mut cur = 0.0;
    let mut total = 0.0;
    for &fi in &chain {
        let f = &domain.boundary[fi];
        let w0 = w
            .at(f.v0)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let wv1 = w
            .at(f.v1)
            .ok_or_else(|| XrelError::Internal("missing boundary vertex value".into()))?;
        let mid: Vec<f64> = w0.iter().zip(wv1).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut nnw = 0.0;
        for i in 0..2 {
            let nwi: f64 = (0..t).map(|k| n1[(i, k)] * mid[k]).sum();
            nnw += f.normal[i] * nwi;
        }
        let inc = nnw * f.ds;
        cur += inc;
        total += inc;
        w1.insert(f.v1, cur);
    }
    let w1_closure = total.abs();

    // Volume: ∫ [N₂w]·(R⊥N₁w) dx with cell-averaged w.
    let mut volume = 0.0;
    let mut vol_scale = 0.0;
    for cell in 0..grid.ncells() {
        if !domain.mask[cell] {
            continue;
        }
        let coords = grid.coords(cell);
        let wbar = match w.cell_average(&coords) {
            Some(v) => v,
            None => continue,
        };
        let mut n1w = [0.0; 2];
        let mut n2w = [0.0; 2];
        for i in 0..2 {
            n1w[i] = (0..t).map(|k| n1[(i, k)] * wbar[k]).sum();
            n2w[i] = (0..t).map(|k| n2[(i, k)] * wbar[k]).sum();
        }
        // R⊥(a,b) = (b, −a)
        let rot = [n1w[1], -n1w[0]];
        let f = n2w[0] * rot[0] + n2w[1] * rot[1];
        volume += f * grid.cell_volume();
        vol_scale += f.abs() * grid.cell_volume();
    }

    // Surface: ∮ [n·N₂w] W₁ ds with W₁ at face midpoints (endpoint average).
    let mut surface = 0.0;
    let mut surf_scale = 0.0;
    for &fi in &chain {
        let f = &domain.boundary[fi];
        let w0 = w.at(f.v0).unwrap();
        let wv1 = w.at(f.v1).unwrap();
        let mid: Vec<f64> = w0.iter().zip(wv1).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut nnw = 0.0;
        for i in 0..2 {
            let nwi: f64 = (0..t).map(|k| n2[(i, k)] * mid[k]).sum();
            nnw += f.normal[i] * nwi;
        }
        let w1mid = 0.5 * (w1[&f.v0] + w1[&f.v1]);
        surface += nnw * w1mid * f.ds;
        surf_scale += (nnw * w1mid).abs() * f.ds;
    }

    let scale = vol_scale.max(surf_scale).max(1e-300);
    Ok(PairNullLagrangianReport {
        volume,
        surface,
        residual: (volume - surface).abs() / scale,
        scale,
        w1_closure,
    })
}

/// Reindexes a pair [A|B] (q×2q, T-valued columns) into the d×t gradient
/// layout Q[i, κ] with κ = c·m + α.
pub fn pair_to_qmat(spec: &TensorSpaceSpec, pair: &EndoMatrix) -> EndoMatrix {
    let m = spec.m();
    let t = 2 * m * spec.q();
    EndoMatrix::from_fn(spec.d(), t, |i, kappa| {
        let (c, alpha) = (kappa / m, kappa % m);
        pair[(spec.flat(i, alpha), c)]
    })
}

/// The gradient-constraint subspace C = R⊥𝒟 in the d×t matrix space: the
/// values ∇w is confined to when Q = [𝕁|𝕁̃] conforms.
pub fn c_space(dspace: &FluxSubspace) -> Subspace {
    let spec = &dspace.spec;
    let mats: Vec<EndoMatrix> = dspace
        .pairs
        .basis()
        .iter()
        .map(|p| {
            let qm = pair_to_qmat(spec, p);
            // R⊥ on the two rows: (R⊥Q)[0] = Q[1], (R⊥Q)[1] = −Q[0].
            EndoMatrix::from_fn(2, qm.ncols(), |i, k| {
                if i == 0 {
                    qm[(1, k)]
                } else {
                    -qm[(0, k)]
                }
            })
        })
        .collect();
    Subspace::from_span(&mats, dspace.pairs.rank_tol())
        .unwrap_or_else(|_| Subspace::empty(2, 2 * spec.m() * spec.q(), 1e-10))
}

/// ∮ n·𝕁 ds per column over the staircase boundary (midpoint rule with
/// face-averaged values); the classical conservation baseline.
pub fn boundary_flux_integral(domain: &Domain, j: &ExtendedField) -> (EndoMatrix, f64) {
    let spec = *domain.grid().spec();
    let m = spec.m();
    let q = spec.q();
    let mut integral = EndoMatrix::zeros(m, q);
    let mut scale = 0.0;
    for f in &domain.boundary {
        let avg = 0.5 * (j.get(f.cell) + j.get(f.outside));
        let contracted = contract_normal(&spec, &avg, &f.normal);
        integral += &contracted * f.ds;
        scale += frob_norm(&contracted) * f.ds;
    }
    (integral, scale.max(1e-300))
}

// ---------------------------------------------------------------------------
// Embedding experiment
// ---------------------------------------------------------------------------

/// Inputs of the §-style embedding run: an on-manifold body in a matching
/// exterior with an exterior point source valued in S·D.
pub struct EmbeddingSetup<'a> {
    pub mspec: &'a ManifoldSpec,
    pub domain: &'a Domain,
    /// Coefficient field used inside Ω (typically a manifold field).
    pub interior: &'a CoefficientField,
    /// Exterior tensor; must pass manifold membership.
    pub exterior: EndoMatrix,
    /// Source location (grid coords), outside Ω with clearance ≥ 10ε.
    pub x0: Vec<usize>,
    /// Source amplitude S₀ ∈ S·D.
    pub s0: EndoMatrix,
    pub delta_width: f64,
    /// Membership target K·D.
    pub kd: Subspace,
}

pub struct EmbeddingOutcome {
    pub p: ExtendedField,
    pub e: ExtendedField,
    pub j: ExtendedField,
    pub jt: ExtendedField,
    pub diag: SolveDiagnostics,
    pub interior_membership: MembershipReport,
    pub trace: BoundaryTrace,
    pub flux_report: FluxMembershipReport,
    /// (max, mean) residual of the boundary pairs against 𝒟.
    pub pair_residual: (f64, f64),
    /// Same statistics for a random trace (negative control).
    pub negative_control_pair: f64,
    pub negative_control_flux: f64,
    pub dspace: FluxSubspace,
    pub lfield: CoefficientField,
}

/// Builds the embedded coefficient field (interior inside Ω, exterior
/// outside), solves the exterior point-source problem, and reports interior
/// and boundary membership plus negative controls.
pub fn embedding_experiment(
    setup: &EmbeddingSetup,
    membership_tol: f64,
    flux_tol: f64,
    opts: &SolveOptions,
    seed: u64,
) -> Result<EmbeddingOutcome> {
    let grid = setup.domain.grid().clone();
    let q = grid.q();
    let mspec = setup.mspec;

    let ext_res = mspec.membership(&setup.exterior)?;
    if ext_res > 1e-8 {
        return Err(XrelError::Precondition(format!(
            "exterior tensor off the manifold: residual {ext_res:.3e}"
        )));
    }
    let x0_idx = grid.index(&setup.x0);
    let mut min_dist = f64::INFINITY;
    for cell in 0..grid.ncells() {
        if setup.domain.mask[cell] {
            min_dist = min_dist.min(grid.torus_distance(cell, x0_idx));
        }
    }
    if min_dist < 10.0 * setup.delta_width {
        return Err(XrelError::Precondition(format!(
            "source clearance {min_dist:.3} below 10ε = {:.3}",
            10.0 * setup.delta_width
        )));
    }

    // Embedded coefficient field.
    let qq = q * q;
    let mut data = vec![0.0; grid.ncells() * qq];
    for cell in 0..grid.ncells() {
        let src: EndoMatrix = if setup.domain.mask[cell] {
            setup.interior.get(cell)
        } else {
            setup.exterior.clone()
        };
        for r in 0..q {
            for c in 0..q {
                data[cell * qq + r * q + c] = src[(r, c)];
            }
        }
    }
    let lfield = CoefficientField::new(&grid, data)?;

    let solver = PolarizationSolver::new(lfield.clone(), &mspec.l0, &mspec.m)?;
    let delta = DeltaSpec {
        center: setup.x0.clone(),
        width: setup.delta_width,
    };
    let (p, diag) = solve_point_source(&solver, &setup.s0, &delta, opts)?;
    let e = solver.ops().e_from_p(&p);
    let j = solver.ops().j_from_pe(&p, &e);
    // 𝕁̃ = (R⊥)⁻¹𝔼 so that 𝔼 = R⊥𝕁̃ columnwise.
    let rot = grid.spec().rotation_operator()?;
    let rot_inv = rot.transpose(); // R⊥ orthogonal
    let jt = e.left_mul(&rot_inv, FieldFlavor::JType);

    let interior_membership = membership_report(&p, &setup.kd, Some(&setup.domain.mask), membership_tol);

    let dspace = flux_subspace(grid.spec(), &setup.kd, mspec.l0.matrix())?;
    let trace = extract_trace(setup.domain, &j, &jt);
    let flux_report = flux_membership(&trace, setup.domain, &dspace, flux_tol);
    let pair_residual = pair_membership(&trace, &dspace);

    // Negative control: random trace of the same shape.
    let mut rng = SeededRng::from_seed(seed).stream(9);
    use rand::Rng;
    let mut neg_pairs = Vec::with_capacity(trace.pairs.len());
    let mut neg_flux = Vec::with_capacity(trace.flux.len());
    for _ in 0..trace.pairs.len() {
        neg_pairs.push(EndoMatrix::from_fn(q, 2 * q, |_, _| rng.gen::<f64>() - 0.5));
        neg_flux.push(EndoMatrix::from_fn(grid.spec().m(), 2 * q, |_, _| {
            rng.gen::<f64>() - 0.5
        }));
    }
    let neg_trace = BoundaryTrace {
        pairs: neg_pairs,
        flux: neg_flux,
        potential: Vec::new(),
    };
    let (negative_control_pair, _) = pair_membership(&neg_trace, &dspace);
    let neg_flux_rep = flux_membership(&neg_trace, setup.domain, &dspace, flux_tol);
    let negative_control_flux = neg_flux_rep.max_residual;

    Ok(EmbeddingOutcome {
        p,
        e,
        j,
        jt,
        diag,
        interior_membership,
        trace,
        flux_report,
        pair_residual,
        negative_control_pair,
        negative_control_flux,
        dspace,
        lfield,
    })
}
