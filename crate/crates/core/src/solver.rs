//! Sparse direct solves, the coarse Petrov-Galerkin system, standard FEM and
//! best approximation in the `V`-norm.

use std::io::Write;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use num_complex::Complex64;

use crate::assembly::{
    assemble_global, assemble_load, v_inner_products, CoarseField, ExactSolution, FormParts,
    ProblemData,
};
use crate::corrector::{build_cache, CorrectorCache, CorrectorSource, Oversampling, TestBasis};
use crate::error::{Error, Result};
use crate::grid::{write_vtk, DofMap, StructuredMesh};
use crate::interpolation::MeshPair;
use crate::sparse::{dot_h, norm2, ComplexCsr, CsrMatrix, RealCsr};

/// Relative residual above which a factorization is treated as singular.
const SINGULAR_RESIDUAL: f64 = 1e-6;

/// Sparse LU factorization of a complex square matrix.
pub struct Factorization {
    matrix: ComplexCsr,
    lu: faer::sparse::linalg::solvers::Lu<usize, Complex64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization")
            .field("n", &self.matrix.nrows())
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

/// Factorizes `a` with partial pivoting.
///
/// Structural singularity and non-finite or inaccurate solutions of a probe
/// system are reported as [`Error::Singular`]; the pivot is the first
/// unknown the probe failed to resolve.
pub fn factorize(a: &ComplexCsr) -> Result<Factorization> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cannot factorize a {}×{} matrix",
            n,
            a.ncols()
        )));
    }
    if a.data().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::DimensionMismatch("matrix has non-finite entries".into()));
    }
    // CSR of Aᵀ is CSC of A
    let t = a.transpose();
    let symbolic = SymbolicSparseColMat::new_checked(n, n, t.indptr().to_vec(), None, t.indices().to_vec());
    let csc = SparseColMat::new(symbolic, t.data().to_vec());
    let lu = csc.as_ref().sp_lu().map_err(|e| match e {
        faer::sparse::linalg::LuError::SymbolicSingular { index } => Error::Singular { pivot: index },
        faer::sparse::linalg::LuError::Generic(g) => Error::DimensionMismatch(format!("{g:?}")),
    })?;
    let f = Factorization {
        matrix: a.clone(),
        lu,
    };
    if n > 0 {
        let probe: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(1.0 + (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let x = f.solve_raw(std::slice::from_ref(&probe)).remove(0);
        if let Some(p) = x.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Singular { pivot: p });
        }
        let r = f.residual(&x, &probe);
        if norm2(&r) > SINGULAR_RESIDUAL * norm2(&probe) {
            let p = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .map_or(0, |(i, _)| i);
            return Err(Error::Singular { pivot: p });
        }
    }
    Ok(f)
}

impl Factorization {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &ComplexCsr {
        &self.matrix
    }

    fn to_mat(&self, rhs: &[Vec<Complex64>]) -> Mat<Complex64> {
        let n = self.n();
        for b in rhs {
            assert_eq!(b.len(), n, "right-hand side length");
        }
        Mat::from_fn(n, rhs.len(), |i, j| rhs[j][i])
    }

    fn from_mat(m: &Mat<Complex64>) -> Vec<Vec<Complex64>> {
        (0..m.ncols())
            .map(|j| (0..m.nrows()).map(|i| m[(i, j)]).collect())
            .collect()
    }

    fn solve_raw(&self, rhs: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let mut m = self.to_mat(rhs);
        self.lu.solve_in_place(m.as_mut());
        Self::from_mat(&m)
    }

    fn residual(&self, x: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
        let ax = self.matrix.matvec(x);
        b.iter().zip(&ax).map(|(b, a)| b - a).collect()
    }

    /// Solves for several right-hand sides with one step of iterative refinement.
    pub fn solve_many(&self, rhs: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        if rhs.is_empty() {
            return Vec::new();
        }
        let mut xs = self.solve_raw(rhs);
        let res: Vec<Vec<Complex64>> = xs.iter().zip(rhs).map(|(x, b)| self.residual(x, b)).collect();
        let corr = self.solve_raw(&res);
        for (x, d) in xs.iter_mut().zip(corr) {
            for (xi, di) in x.iter_mut().zip(d) {
                *xi += di;
            }
        }
        xs
    }

    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        self.solve_many(&[rhs.to_vec()]).remove(0)
    }

    /// Solves `A^H x = b`.
    pub fn solve_adjoint(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let mut m = self.to_mat(&[rhs.to_vec()]);
        self.lu.solve_adjoint_in_place(m.as_mut());
        Self::from_mat(&m).remove(0)
    }

    /// Relative residual `‖A x − b‖ / ‖b‖`.
    pub fn relative_residual(&self, x: &[Complex64], b: &[Complex64]) -> f64 {
        let nb = norm2(b);
        let nr = norm2(&self.residual(x, b));
        if nb == 0.0 {
            nr
        } else {
            nr / nb
        }
    }

    /// Estimate of the smallest singular value by inverse iteration on `A^H A`.
    pub fn smallest_singular_value(&self, iterations: usize) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        let mut x: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(1.0 + (i as f64 * 0.61).sin(), 0.0))
            .collect();
        let mut est = 0.0;
        for _ in 0..iterations.max(1) {
            let nx = norm2(&x);
            for v in x.iter_mut() {
                *v /= nx;
            }
            let y = self.solve_raw(&[x.clone()]).remove(0);
            let w = self.solve_adjoint(&y);
            est = norm2(&w);
            x = w;
        }
        if est > 0.0 {
            1.0 / est.sqrt()
        } else {
            f64::INFINITY
        }
    }
}

/// Solver for the block system `[[A, Cᵀ], [C, 0]] [x; μ] = [b; 0]`.
///
/// Uses the Schur complement `S = C A⁻¹ Cᵀ` on a factorization of `A`;
/// the dense constraint rows would otherwise fill the sparse factors.
/// Falls back to a factorization of the whole block matrix when `A` is
/// singular or the Schur solve is inaccurate.
pub struct ConstrainedSolver {
    a: ComplexCsr,
    c: RealCsr,
    kind: ConstrainedKind,
}

enum ConstrainedKind {
    Schur {
        lu: Factorization,
        /// `A⁻¹ Cᵀ`, `n × k`.
        x: Mat<Complex64>,
        s: faer::linalg::solvers::PartialPivLu<Complex64>,
    },
    Full(Factorization),
}

impl std::fmt::Debug for ConstrainedSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstrainedSolver")
            .field("n", &self.a.nrows())
            .field("constraints", &self.c.nrows())
            .field("schur", &matches!(self.kind, ConstrainedKind::Schur { .. }))
            .finish()
    }
}

/// Relative residual of the block system accepted from the Schur path.
const SCHUR_ACCEPT: f64 = 1e-11;

/// Factorizes the block system with constraint matrix `c` (`k × n`).
pub fn factorize_constrained(a: &ComplexCsr, c: &RealCsr) -> Result<ConstrainedSolver> {
    let n = a.nrows();
    if a.ncols() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "block system with A {}×{} and C {}×{}",
            n,
            a.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    if let Some(solver) = schur_solver(a, c) {
        return Ok(solver);
    }
    let k = c.nrows();
    let mut triplets: Vec<(usize, usize, Complex64)> = a.triplets().collect();
    for (i, j, v) in c.triplets() {
        triplets.push((n + i, j, Complex64::new(v, 0.0)));
        triplets.push((j, n + i, Complex64::new(v, 0.0)));
    }
    let block = CsrMatrix::from_triplets(n + k, n + k, &triplets);
    Ok(ConstrainedSolver {
        a: a.clone(),
        c: c.clone(),
        kind: ConstrainedKind::Full(factorize(&block)?),
    })
}

fn schur_solver(a: &ComplexCsr, c: &RealCsr) -> Option<ConstrainedSolver> {
    let n = a.nrows();
    let k = c.nrows();
    let lu = factorize(a).ok()?;
    let ct = c.transpose();
    let mut x = Mat::from_fn(n, k, |_, _| Complex64::new(0.0, 0.0));
    for i in 0..n {
        let (cols, vals) = ct.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            x[(i, j)] = Complex64::new(v, 0.0);
        }
    }
    lu.lu.solve_in_place(x.as_mut());
    let mut s = Mat::from_fn(k, k, |_, _| Complex64::new(0.0, 0.0));
    for i in 0..k {
        let (cols, vals) = c.row(i);
        for j in 0..k {
            let mut acc = Complex64::new(0.0, 0.0);
            for (&l, &v) in cols.iter().zip(vals) {
                acc += x[(l, j)] * v;
            }
            s[(i, j)] = acc;
        }
    }
    let solver = ConstrainedSolver {
        a: a.clone(),
        c: c.clone(),
        kind: ConstrainedKind::Schur {
            lu,
            x,
            s: s.partial_piv_lu(),
        },
    };
    let probe: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new((i as f64 * 0.73).sin(), 1.0 + (i as f64 * 0.29).cos()))
        .collect();
    let (x, mu) = solver.solve_block(std::slice::from_ref(&probe));
    let r = solver.block_residual(&x[0], &mu[0], &probe);
    let ok = r.is_finite() && r <= SCHUR_ACCEPT * norm2(&probe);
    ok.then_some(solver)
}

impl ConstrainedSolver {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn uses_schur_complement(&self) -> bool {
        matches!(self.kind, ConstrainedKind::Schur { .. })
    }

    /// `‖(b − A x − Cᵀ μ, −C x)‖`.
    fn block_residual(&self, x: &[Complex64], mu: &[Complex64], b: &[Complex64]) -> f64 {
        let (r1, r2) = self.residual_parts(x, mu, b);
        (norm2(&r1).powi(2) + norm2(&r2).powi(2)).sqrt()
    }

    fn residual_parts(
        &self,
        x: &[Complex64],
        mu: &[Complex64],
        b: &[Complex64],
    ) -> (Vec<Complex64>, Vec<Complex64>) {
        let ax = self.a.matvec(x);
        let ctmu = self.c.transpose().matvec(mu);
        let r1 = b
            .iter()
            .zip(&ax)
            .zip(&ctmu)
            .map(|((b, a), c)| b - a - c)
            .collect();
        let r2 = self.c.matvec(x).iter().map(|v| -v).collect();
        (r1, r2)
    }

    /// Schur-complement solve of `[[A, Cᵀ], [C, 0]] [x; μ] = [b; g]`.
    fn schur_apply(
        lu: &Factorization,
        x: &Mat<Complex64>,
        s: &faer::linalg::solvers::PartialPivLu<Complex64>,
        c: &RealCsr,
        b: &[Vec<Complex64>],
        g: &[Vec<Complex64>],
    ) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let n = x.nrows();
        let k = x.ncols();
        let mut y = lu.to_mat(b);
        lu.lu.solve_in_place(y.as_mut());
        let mut mu = Mat::from_fn(k, b.len(), |i, j| {
            let (cols, vals) = c.row(i);
            let cy: Complex64 = cols.iter().zip(vals).map(|(&l, &v)| y[(l, j)] * v).sum();
            cy - g[j][i]
        });
        s.solve_in_place(mu.as_mut());
        let xmu = x * &mu;
        let sol = (0..b.len())
            .map(|j| (0..n).map(|i| y[(i, j)] - xmu[(i, j)]).collect())
            .collect();
        (sol, Factorization::from_mat(&mu))
    }

    fn solve_block(&self, rhs: &[Vec<Complex64>]) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let n = self.n();
        let k = self.c.nrows();
        match &self.kind {
            ConstrainedKind::Schur { lu, x, s } => {
                let zero = vec![vec![Complex64::new(0.0, 0.0); k]; rhs.len()];
                let (mut xs, mut mus) = Self::schur_apply(lu, x, s, &self.c, rhs, &zero);
                let (r1, r2): (Vec<_>, Vec<_>) = xs
                    .iter()
                    .zip(&mus)
                    .zip(rhs)
                    .map(|((x, mu), b)| self.residual_parts(x, mu, b))
                    .unzip();
                let (dx, dmu) = Self::schur_apply(lu, x, s, &self.c, &r1, &r2);
                for (x, d) in xs.iter_mut().zip(dx) {
                    x.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                for (m, d) in mus.iter_mut().zip(dmu) {
                    m.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                (xs, mus)
            }
            ConstrainedKind::Full(lu) => {
                let padded: Vec<Vec<Complex64>> = rhs
                    .iter()
                    .map(|b| {
                        let mut v = b.clone();
                        v.resize(n + k, Complex64::new(0.0, 0.0));
                        v
                    })
                    .collect();
                lu.solve_many(&padded)
                    .into_iter()
                    .map(|mut v| {
                        let mu = v.split_off(n);
                        (v, mu)
                    })
                    .unzip()
            }
        }
    }

    /// Solves `[[A, Cᵀ], [C, 0]] [x; μ] = [b; 0]` for each `b` and returns `x`.
    pub fn solve_many(&self, rhs: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        if rhs.is_empty() {
            return Vec::new();
        }
        self.solve_block(rhs).0
    }
}

/// Explicit Petrov-Galerkin system `K_ij = Λ̃_i^H A_h P e_j`, `F_i = Λ̃_i^H F_h`.
pub fn assemble_pg_system(
    basis: &TestBasis,
    a_fine: &ComplexCsr,
    pair: &MeshPair,
    f_fine: &[Complex64],
) -> Result<(ComplexCsr, Vec<Complex64>)> {
    let nf = pair.fine_dofs.len();
    if basis.matrix.ncols() != nf || a_fine.nrows() != nf || f_fine.len() != nf {
        return Err(Error::DimensionMismatch(
            "test basis, fine matrix and fine load must share the fine dof map".into(),
        ));
    }
    let ap = a_fine.matmul(&pair.prolongation.to_complex());
    let conj_basis = basis.matrix.conj();
    let k = conj_basis.matmul(&ap);
    let f = conj_basis.matvec(f_fine);
    Ok((k, f))
}

/// Petrov-Galerkin system from element correctors without forming the test
/// basis: `K = A_H − Σ_T Σ_z e_z r_{z,T}ᵀ` and `F = Pᵀ F_h − Σ_T Σ_z e_z λ_{z,T}^H F_h`.
pub fn assemble_pg_system_from_correctors(
    pair: &MeshPair,
    source: CorrectorSource<'_>,
    a_coarse: &ComplexCsr,
    f_fine: &[Complex64],
) -> Result<(ComplexCsr, Vec<Complex64>)> {
    let nc = pair.coarse_dofs.len();
    if a_coarse.nrows() != nc || f_fine.len() != pair.fine_dofs.len() {
        return Err(Error::DimensionMismatch(
            "coarse matrix or fine load does not match the mesh pair".into(),
        ));
    }
    let mut triplets: Vec<(usize, usize, Complex64)> = a_coarse.triplets().collect();
    let mut f = pair.prolongation.transpose().matvec(f_fine);
    let load_is_zero = f_fine.iter().all(|v| *v == Complex64::new(0.0, 0.0));
    for &t in pair.coarse.active_cells() {
        let ec = source.corrector(pair, t)?;
        for (k, &z) in pair.coarse.cell_vertices(t).as_slice().iter().enumerate() {
            let Some(zd) = pair.coarse_dofs.dof(z) else { continue };
            let row = ec.coarse_rows[k].as_ref().expect("free vertex has a corrector");
            for &(j, v) in row {
                triplets.push((zd, j, -v));
            }
            if !load_is_zero {
                let vals = ec.values[k].as_ref().expect("free vertex has a corrector");
                let s: Complex64 = ec.dofs.iter().zip(vals).map(|(&d, l)| l.conj() * f_fine[d]).sum();
                f[zd] -= s;
            }
        }
    }
    Ok((CsrMatrix::from_triplets(nc, nc, &triplets), f))
}

/// Settings of one multiscale solve.
#[derive(Debug, Clone, Copy)]
pub struct PgOptions<'a> {
    pub quadrature: usize,
    /// Reuse an existing cache (must match `m` and `κ`).
    pub cache: Option<&'a CorrectorCache>,
    /// Solve configuration classes in parallel.
    pub parallel: bool,
    /// Solve every cell instead of one cell per configuration class.
    pub reuse: bool,
}

impl Default for PgOptions<'_> {
    fn default() -> Self {
        Self {
            quadrature: crate::assembly::DEFAULT_QUADRATURE,
            cache: None,
            parallel: true,
            reuse: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PgDiagnostics {
    pub n_classes: usize,
    pub n_corrector_solves: usize,
    pub max_kernel_residual: f64,
    pub corrector_seconds: f64,
    pub assembly_seconds: f64,
    pub solve_seconds: f64,
    /// `‖K u − F‖ / ‖F‖` of the coarse system.
    pub coarse_residual: f64,
}

#[derive(Debug, Clone)]
pub struct PgSolution {
    pub u: CoarseField,
    pub diagnostics: PgDiagnostics,
}

/// The multiscale Petrov-Galerkin approximation `u_H ∈ V_H` with
/// `a(u_H, Λ̃_z) = F(Λ̃_z)` for every free coarse vertex `z`.
pub fn solve_mspgfem(
    pair: &MeshPair,
    kappa: f64,
    oversampling: Oversampling,
    data: &ProblemData,
    options: PgOptions<'_>,
) -> Result<PgSolution> {
    let mut diag = PgDiagnostics::default();
    let start = Instant::now();
    let owned;
    let source = match (oversampling, options.cache) {
        (Oversampling::Layers(m), Some(cache)) => {
            if cache.key.m != m || cache.key.kappa != kappa {
                return Err(Error::DimensionMismatch(
                    "cache was built for a different m or κ".into(),
                ));
            }
            CorrectorSource::Cache(cache)
        }
        (Oversampling::Layers(m), None) if options.reuse => {
            owned = build_cache(pair, m, kappa, options.parallel)?;
            CorrectorSource::Cache(&owned)
        }
        _ => CorrectorSource::Direct {
            oversampling,
            kappa,
        },
    };
    match source {
        CorrectorSource::Cache(c) => {
            diag.n_classes = c.classes.len();
            diag.n_corrector_solves = c.n_solves();
            diag.max_kernel_residual = c.max_kernel_residual();
        }
        CorrectorSource::Direct { .. } => {
            diag.n_classes = pair.coarse.active_cells().len();
            diag.n_corrector_solves = pair.coarse.active_cells().len();
        }
    }
    diag.corrector_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let a_coarse = assemble_global(&pair.coarse, &pair.coarse_dofs, kappa).system_matrix();
    let f_fine = assemble_load(pair.fine(), &pair.fine_dofs, data, options.quadrature);
    let (k, f) = assemble_pg_system_from_correctors(pair, source, &a_coarse, &f_fine)?;
    diag.assembly_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let lu = factorize(&k).map_err(|e| match e {
        Error::Singular { pivot } => Error::SingularCoarseSystem { pivot },
        other => other,
    })?;
    let u = lu.solve(&f);
    diag.coarse_residual = lu.relative_residual(&u, &f);
    diag.solve_seconds = start.elapsed().as_secs_f64();
    Ok(PgSolution {
        u: CoarseField(u),
        diagnostics: diag,
    })
}

/// Standard Galerkin `Q1` FEM on one mesh.
pub fn solve_standard_fem(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    data: &ProblemData,
    quadrature: usize,
) -> Result<Vec<Complex64>> {
    let a = assemble_global(mesh, dofs, kappa).system_matrix();
    let f = assemble_load(mesh, dofs, data, quadrature);
    let lu = factorize(&a)?;
    Ok(lu.solve(&f))
}

/// `V`-orthogonal projection of an exact solution onto `Q1` on `mesh`.
pub fn best_approximation(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    exact: &ExactSolution,
    quadrature: usize,
) -> Result<Vec<Complex64>> {
    let rhs = v_inner_products(mesh, dofs, kappa, exact, quadrature)?;
    let v = assemble_global(mesh, dofs, kappa).v_matrix().to_complex();
    Ok(factorize(&v)?.solve(&rhs))
}

/// `V`-orthogonal projection of a fine field onto the coarse space.
pub fn best_approximation_of_fine(
    pair: &MeshPair,
    fine_parts: &FormParts,
    target: &[Complex64],
) -> Result<CoarseField> {
    let kappa = fine_parts.kappa;
    let vt = fine_parts.v_matrix().matvec(target);
    let rhs = pair.prolongation.transpose().matvec(&vt);
    let v = assemble_global(&pair.coarse, &pair.coarse_dofs, kappa)
        .v_matrix()
        .to_complex();
    Ok(CoarseField(factorize(&v)?.solve(&rhs)))
}

/// `V`-inner product `⟨v, w⟩_V = w^H (S + κ²M) v`.
pub fn v_inner(parts: &FormParts, v: &[Complex64], w: &[Complex64]) -> Complex64 {
    dot_h(w, &parts.v_matrix().matvec(v))
}

/// Expands dof values to all mesh vertices (zero on Dirichlet and hole vertices).
pub fn vertex_values(mesh: &StructuredMesh, dofs: &DofMap, field: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); mesh.n_vertices()];
    for (i, &v) in dofs.free_nodes.iter().enumerate() {
        out[v] = field[i];
    }
    out
}

/// Node table: one line `x y z re im abs` per mesh vertex.
pub fn write_node_table<W: Write>(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    field: &[Complex64],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "# x y z re im abs")?;
    for (v, u) in vertex_values(mesh, dofs, field).iter().enumerate() {
        if !mesh.is_mesh_vertex(v) {
            continue;
        }
        let p = mesh.vertex_point(v);
        writeln!(out, "{} {} {} {:e} {:e} {:e}", p[0], p[1], p[2], u.re, u.im, u.norm())?;
    }
    Ok(())
}

/// Legacy VTK file with real part, imaginary part and modulus as point data.
pub fn write_solution_vtk<W: Write>(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    field: &[Complex64],
    out: W,
) -> std::io::Result<()> {
    let vals = vertex_values(mesh, dofs, field);
    let re: Vec<f64> = vals.iter().map(|v| v.re).collect();
    let im: Vec<f64> = vals.iter().map(|v| v.im).collect();
    let abs: Vec<f64> = vals.iter().map(|v| v.norm()).collect();
    write_vtk(mesh, &[("re", &re), ("im", &im), ("abs", &abs)], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_solve() {
        let lu = factorize(&ComplexCsr::identity(5)).unwrap();
        let b: Vec<Complex64> = (0..5).map(|i| c(i as f64, -1.0)).collect();
        assert_eq!(lu.solve(&b), b);
    }

    #[test]
    fn complex_symmetric_2x2() {
        let a = CsrMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(2.0, 0.0)), (0, 1, c(0.0, 1.0)), (1, 0, c(0.0, 1.0)), (1, 1, c(1.0, 0.0))],
        );
        let lu = factorize(&a).unwrap();
        let b = vec![c(1.0, 0.0), c(0.0, 0.0)];
        let x = lu.solve(&b);
        // Cramer's rule: det = 2 − i² = 3, x = (1/3, −i/3)
        assert!((x[0] - c(1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((x[1] - c(0.0, -1.0 / 3.0)).norm() < 1e-15);
        assert!(lu.relative_residual(&x, &b) < 1e-12);
    }

    #[test]
    fn singular_matrices_are_reported() {
        let ones = CsrMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(1.0, 0.0)), (0, 1, c(1.0, 0.0)), (1, 0, c(1.0, 0.0)), (1, 1, c(1.0, 0.0))],
        );
        assert!(matches!(factorize(&ones), Err(Error::Singular { .. })));
        let empty_row = CsrMatrix::from_triplets(2, 2, &[(0, 0, c(1.0, 0.0)), (1, 0, c(1.0, 0.0))]);
        assert!(matches!(factorize(&empty_row), Err(Error::Singular { .. })));
    }

    #[test]
    fn adjoint_solve_and_singular_value() {
        let a = CsrMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(3.0, 0.0)), (0, 1, c(0.0, 1.0)), (1, 1, c(0.5, 0.0))],
        );
        let lu = factorize(&a).unwrap();
        let b = vec![c(1.0, 2.0), c(-1.0, 0.5)];
        let x = lu.solve_adjoint(&b);
        // A^H x = b checked directly
        let ah = a.conj().transpose();
        let r: Vec<Complex64> = ah.matvec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) < 1e-14);
        let smin = lu.smallest_singular_value(50);
        // singular values of [[3, i],[0, 0.5]]: product = |det| = 1.5
        let fro2: f64 = 9.0 + 1.0 + 0.25;
        let smax2 = (fro2 + (fro2 * fro2 - 4.0 * 2.25).sqrt()) / 2.0;
        assert!((smin - 1.5 / smax2.sqrt()).abs() < 1e-10);
    }
}
