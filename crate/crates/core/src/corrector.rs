//! Localized corrector problems and the corrected test basis.
//!
//! For a coarse cell `T`, a free coarse vertex `z` of `T` and the patch
//! `Ω_T = N^m(T)`, the corrector `λ_{z,T}` lies in
//! `W_h(Ω_T) = {w ∈ V_h(Ω_T) : I_H w = 0}` and solves
//!
//! ```text
//! a_{Ω_T}(w, λ_{z,T}) = a_T(w, Λ_z)   for all w ∈ W_h(Ω_T).
//! ```
//!
//! The unknown sits in the conjugate-linear slot, so with `A` the patch
//! matrix the discrete problem is the saddle point system
//! `[[conj(A), Cᵀ], [C, 0]] [λ; μ] = [conj(b); 0]` with `b = A_T p_z` and
//! `C` the rows of `I_H` on the patch. The test functions are
//! `Λ̃_z = Λ_z − Σ_{T ∋ z} λ_{z,T}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use log::{info, warn};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::{assemble_parts_with, gradient_norm_sq};
use crate::error::{Error, Result};
use crate::grid::{classify_patches, patch, PatchClasses, StructuredMesh};
use crate::interpolation::{kernel_constraints, MeshPair, DEFAULT_APPROXIMATION_CONSTANT};
use crate::solver::factorize_constrained;
use crate::sparse::{ComplexCsr, CsrMatrix};

/// Size of the corrector domain `Ω_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Oversampling {
    /// `Ω_T = N^m(T)`.
    Layers(usize),
    /// `Ω_T = Ω` (the idealized corrector).
    Global,
}

/// Correctors `λ_{z,T}` of one coarse cell for all its local vertices.
#[derive(Debug, Clone)]
pub struct ElementCorrector {
    pub cell: usize,
    pub oversampling: Oversampling,
    /// Fine free dofs in the interior of `Ω_T`, sorted.
    pub dofs: Vec<usize>,
    /// Values on `dofs` per local vertex of the cell; `None` for coarse
    /// Dirichlet vertices, which carry no basis function.
    pub values: Vec<Option<Vec<Complex64>>>,
    /// Per local vertex: `j ↦ a(PΛ_j, λ_{z,T})` over coarse free dofs `j`.
    pub coarse_rows: Vec<Option<Vec<(usize, Complex64)>>>,
    /// `max_z ‖C λ_{z,T}‖_∞ / ‖λ_{z,T}‖_∞`.
    pub kernel_residual: f64,
}

/// Fine vertices of the patch closure and the patch interior.
struct PatchDofs {
    fine_cells: Vec<usize>,
    /// Non-Dirichlet fine vertices in the closure of `Ω_T`, sorted.
    closure: Vec<usize>,
    /// Indices into `closure` of vertices whose cells all lie in `Ω_T`.
    interior: Vec<usize>,
}

fn patch_dofs(pair: &MeshPair, cell: usize, oversampling: Oversampling) -> PatchDofs {
    let coarse = &pair.coarse;
    let fine = pair.fine();
    let cells = match oversampling {
        Oversampling::Layers(m) => patch(coarse, cell, m),
        Oversampling::Global => coarse.active_cells().to_vec(),
    };
    let mut fine_cells: Vec<usize> = cells
        .iter()
        .flat_map(|&c| pair.refinement.children(coarse, c))
        .collect();
    fine_cells.sort_unstable();
    let mut closure: Vec<usize> = fine_cells
        .iter()
        .flat_map(|&f| fine.cell_vertices(f).as_slice().to_vec())
        .filter(|&v| pair.fine_dofs.dof(v).is_some())
        .collect();
    closure.sort_unstable();
    closure.dedup();
    let interior = match oversampling {
        Oversampling::Global => (0..closure.len()).collect(),
        Oversampling::Layers(_) => closure
            .iter()
            .enumerate()
            .filter(|(_, &v)| {
                fine.cells_around_vertex(v)
                    .iter()
                    .all(|&f| cells.binary_search(&pair.refinement.parent[f]).is_ok())
            })
            .map(|(i, _)| i)
            .collect(),
    };
    PatchDofs {
        fine_cells,
        closure,
        interior,
    }
}

/// Rows of `m` restricted to `rows`, all columns kept.
fn take_rows(m: &ComplexCsr, rows: &[usize]) -> ComplexCsr {
    let out = rows
        .iter()
        .map(|&i| {
            let (c, v) = m.row(i);
            c.iter().copied().zip(v.iter().copied()).collect()
        })
        .collect();
    CsrMatrix::from_rows(m.ncols(), out)
}

/// Solves the corrector problems of `cell` for all its free local vertices.
pub fn solve_element_corrector(
    pair: &MeshPair,
    cell: usize,
    oversampling: Oversampling,
    kappa: f64,
) -> Result<ElementCorrector> {
    let coarse = &pair.coarse;
    if cell >= coarse.n_cells() || !coarse.is_active(cell) {
        return Err(Error::InactiveCell(cell));
    }
    let fine = pair.fine();
    let pd = patch_dofs(pair, cell, oversampling);
    if pd.interior.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let n_closure = pd.closure.len();
    let index = |v: usize| pd.closure.binary_search(&v).ok();

    let a_closure =
        assemble_parts_with(fine, &pd.fine_cells, n_closure, index, |_, _| true, kappa).system_matrix();
    let children = pair.refinement.children(coarse, cell);
    let a_cell =
        assemble_parts_with(fine, &children, n_closure, index, |_, _| true, kappa).system_matrix();
    let a_rect = take_rows(&a_closure, &pd.interior);
    let a_patch = a_closure.submatrix(&pd.interior, &pd.interior);
    let a_cell_rect = take_rows(&a_cell, &pd.interior);

    let global: Vec<usize> = pd
        .interior
        .iter()
        .map(|&i| pair.fine_dofs.dof(pd.closure[i]).expect("closure vertices are free"))
        .collect();
    let constraints = kernel_constraints(&pair.interpolator, &global)?;

    let a_hat = a_patch.conj();
    let lu = factorize_constrained(&a_hat, &constraints.matrix).map_err(|e| match e {
        Error::Singular { pivot } => Error::SingularCorrector { cell, pivot },
        other => other,
    })?;

    // P restricted to the closure: closure index -> (coarse dof, weight)
    let p_rows: Vec<(&[usize], &[f64])> = pd
        .closure
        .iter()
        .map(|&v| pair.prolongation.row(pair.fine_dofs.dof(v).expect("free")))
        .collect();

    let verts = coarse.cell_vertices(cell);
    let mut values = Vec::with_capacity(verts.as_slice().len());
    let mut coarse_rows = Vec::with_capacity(verts.as_slice().len());
    let mut kernel_residual: f64 = 0.0;
    let mut rhs_list = Vec::new();
    let mut slots = Vec::new();
    for &z in verts.as_slice() {
        let Some(zd) = pair.coarse_dofs.dof(z) else {
            slots.push(None);
            continue;
        };
        let p: Vec<Complex64> = p_rows
            .iter()
            .map(|(cols, vals)| match cols.binary_search(&zd) {
                Ok(k) => Complex64::new(vals[k], 0.0),
                Err(_) => Complex64::new(0.0, 0.0),
            })
            .collect();
        let b = a_cell_rect.matvec(&p);
        let rhs: Vec<Complex64> = b.iter().map(|x| x.conj()).collect();
        slots.push(Some(rhs_list.len()));
        rhs_list.push(rhs);
    }
    let solutions = lu.solve_many(&rhs_list);

    for slot in slots {
        let Some(s) = slot else {
            values.push(None);
            coarse_rows.push(None);
            continue;
        };
        let lambda: Vec<Complex64> = solutions[s].clone();
        let c_lambda = constraints.matrix.matvec(&lambda);
        let num = c_lambda.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let den = lambda.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if den > 0.0 {
            kernel_residual = kernel_residual.max(num / den);
        }
        // y = A_rectᵀ conj(λ), then r = P_locᵀ y
        let mut y = vec![Complex64::new(0.0, 0.0); n_closure];
        for (l, lam) in lambda.iter().enumerate() {
            let (cols, vals) = a_rect.row(l);
            let cl = lam.conj();
            for (&c, &a) in cols.iter().zip(vals) {
                y[c] += cl * a;
            }
        }
        let mut row: BTreeMap<usize, Complex64> = BTreeMap::new();
        for (c, yc) in y.iter().enumerate() {
            if *yc == Complex64::new(0.0, 0.0) {
                continue;
            }
            let (cols, vals) = p_rows[c];
            for (&j, &w) in cols.iter().zip(vals) {
                *row.entry(j).or_insert(Complex64::new(0.0, 0.0)) += yc * w;
            }
        }
        values.push(Some(lambda));
        coarse_rows.push(Some(row.into_iter().collect()));
    }
    Ok(ElementCorrector {
        cell,
        oversampling,
        dofs: global,
        values,
        coarse_rows,
        kernel_residual,
    })
}

/// The idealized corrector with `Ω_T = Ω`.
pub fn solve_ideal_corrector(pair: &MeshPair, cell: usize, kappa: f64) -> Result<ElementCorrector> {
    solve_element_corrector(pair, cell, Oversampling::Global, kappa)
}

/// Largest `κH` allowed by the resolution condition with the given
/// approximation constant and the overlap of first-order patches.
pub fn resolution_limit(dim: usize, approximation_constant: f64) -> f64 {
    let overlap = 3f64.powi(dim as i32);
    std::f64::consts::FRAC_1_SQRT_2 / (approximation_constant * overlap.sqrt())
}

/// Logs a warning when `κH` exceeds [`resolution_limit`]. Returns whether it holds.
pub fn check_resolution(coarse: &StructuredMesh, kappa: f64) -> bool {
    let limit = resolution_limit(coarse.dim(), DEFAULT_APPROXIMATION_CONSTANT);
    let kh = kappa * coarse.mesh_size();
    if kh > limit {
        warn!(
            "κH = {kh:.3} exceeds the resolution limit {limit:.3}; corrector problems may be \
             indefinite"
        );
        false
    } else {
        true
    }
}

/// Corrector of a class representative stored relative to its cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedCorrector {
    pub representative: usize,
    /// Fine vertex offsets from the cell's lowest fine vertex.
    pub fine_offsets: Vec<[i64; 3]>,
    pub values: Vec<Option<Vec<Complex64>>>,
    /// Coarse vertex offsets from the cell's lowest coarse vertex, per local vertex.
    pub coarse_rows: Vec<Option<Vec<([i64; 3], Complex64)>>>,
    pub kernel_residual: f64,
}

/// Identifies the discretization a cache was computed for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheKey {
    pub domain: u64,
    pub cells_per_axis: [usize; 3],
    pub levels: usize,
    pub kappa: f64,
    pub m: usize,
}

impl CacheKey {
    pub fn of(pair: &MeshPair, m: usize, kappa: f64) -> Self {
        Self {
            domain: pair.coarse.domain().fingerprint(),
            cells_per_axis: pair.coarse.cells_per_axis(),
            levels: pair.refinement.levels,
            kappa,
            m,
        }
    }
}

/// One solved corrector per patch configuration class.
#[derive(Debug, Clone)]
pub struct CorrectorCache {
    pub key: CacheKey,
    pub classes: PatchClasses,
    pub entries: Vec<CachedCorrector>,
}

fn offset(a: [usize; 3], origin: [usize; 3]) -> [i64; 3] {
    [
        a[0] as i64 - origin[0] as i64,
        a[1] as i64 - origin[1] as i64,
        a[2] as i64 - origin[2] as i64,
    ]
}

fn shift(origin: [usize; 3], off: [i64; 3]) -> [usize; 3] {
    [
        (origin[0] as i64 + off[0]) as usize,
        (origin[1] as i64 + off[1]) as usize,
        (origin[2] as i64 + off[2]) as usize,
    ]
}

fn fine_origin(pair: &MeshPair, cell: usize) -> [usize; 3] {
    let c = pair.coarse.cell_coords(cell);
    let r = pair.ratio();
    let dim = pair.coarse.dim();
    let mut o = [0; 3];
    for a in 0..dim {
        o[a] = c[a] * r;
    }
    o
}

impl CachedCorrector {
    fn from_element(pair: &MeshPair, ec: &ElementCorrector) -> Self {
        let fo = fine_origin(pair, ec.cell);
        let co = pair.coarse.cell_coords(ec.cell);
        let fine = pair.fine();
        let fine_offsets = ec
            .dofs
            .iter()
            .map(|&d| offset(fine.vertex_coords(pair.fine_dofs.free_nodes[d]), fo))
            .collect();
        let coarse_rows = ec
            .coarse_rows
            .iter()
            .map(|row| {
                row.as_ref().map(|r| {
                    r.iter()
                        .map(|&(j, v)| {
                            let z = pair.coarse_dofs.free_nodes[j];
                            (offset(pair.coarse.vertex_coords(z), co), v)
                        })
                        .collect()
                })
            })
            .collect();
        Self {
            representative: ec.cell,
            fine_offsets,
            values: ec.values.clone(),
            coarse_rows,
            kernel_residual: ec.kernel_residual,
        }
    }

    /// Fine free dofs of this corrector translated to `cell`.
    pub fn translated_dofs(&self, pair: &MeshPair, cell: usize) -> Vec<usize> {
        let fo = fine_origin(pair, cell);
        let fine = pair.fine();
        self.fine_offsets
            .iter()
            .map(|&off| {
                pair.fine_dofs
                    .dof(fine.vertex_index(shift(fo, off)))
                    .expect("translated patch vertex is free")
            })
            .collect()
    }

    /// The corrector translated to another member of the class.
    pub fn translate(&self, pair: &MeshPair, cell: usize, oversampling: Oversampling) -> ElementCorrector {
        let co = pair.coarse.cell_coords(cell);
        let coarse_rows = self
            .coarse_rows
            .iter()
            .map(|row| {
                row.as_ref().map(|r| {
                    let mut out: Vec<(usize, Complex64)> = r
                        .iter()
                        .map(|&(off, v)| {
                            let z = pair.coarse.vertex_index(shift(co, off));
                            (pair.coarse_dofs.dof(z).expect("translated coarse vertex is free"), v)
                        })
                        .collect();
                    out.sort_unstable_by_key(|e| e.0);
                    out
                })
            })
            .collect();
        ElementCorrector {
            cell,
            oversampling,
            dofs: self.translated_dofs(pair, cell),
            values: self.values.clone(),
            coarse_rows,
            kernel_residual: self.kernel_residual,
        }
    }
}

impl CorrectorCache {
    pub fn m(&self) -> usize {
        self.key.m
    }

    pub fn n_solves(&self) -> usize {
        self.entries.len()
    }

    pub fn entry_of(&self, cell: usize) -> Option<&CachedCorrector> {
        self.classes.class_of[cell].map(|k| &self.entries[k])
    }

    /// The corrector of any active cell, by translation.
    pub fn corrector(&self, pair: &MeshPair, cell: usize) -> Result<ElementCorrector> {
        let entry = self.entry_of(cell).ok_or(Error::InactiveCell(cell))?;
        Ok(entry.translate(pair, cell, Oversampling::Layers(self.key.m)))
    }

    pub fn max_kernel_residual(&self) -> f64 {
        self.entries.iter().map(|e| e.kernel_residual).fold(0.0, f64::max)
    }
}

/// Solves one corrector problem per configuration class.
pub fn build_cache(pair: &MeshPair, m: usize, kappa: f64, parallel: bool) -> Result<CorrectorCache> {
    check_resolution(&pair.coarse, kappa);
    let classes = classify_patches(&pair.coarse, m);
    info!(
        "solving {} corrector classes for {} cells (m = {m})",
        classes.len(),
        classes.n_cells()
    );
    let solve = |rep: usize| -> Result<CachedCorrector> {
        let ec = solve_element_corrector(pair, rep, Oversampling::Layers(m), kappa)?;
        Ok(CachedCorrector::from_element(pair, &ec))
    };
    let reps: Vec<usize> = classes.classes.iter().map(|c| c.representative).collect();
    let entries: Result<Vec<CachedCorrector>> = if parallel {
        reps.par_iter().map(|&r| solve(r)).collect()
    } else {
        reps.iter().map(|&r| solve(r)).collect()
    };
    Ok(CorrectorCache {
        key: CacheKey::of(pair, m, kappa),
        classes,
        entries: entries?,
    })
}

/// Where element correctors come from.
#[derive(Debug, Clone, Copy)]
pub enum CorrectorSource<'a> {
    Cache(&'a CorrectorCache),
    /// Solve every cell directly (no reuse).
    Direct { oversampling: Oversampling, kappa: f64 },
}

impl CorrectorSource<'_> {
    pub fn corrector(&self, pair: &MeshPair, cell: usize) -> Result<ElementCorrector> {
        match self {
            CorrectorSource::Cache(c) => c.corrector(pair, cell),
            CorrectorSource::Direct { oversampling, kappa } => {
                solve_element_corrector(pair, cell, *oversampling, *kappa)
            }
        }
    }
}

/// The test functions `Λ̃_z` as rows of a `coarse free × fine free` matrix.
#[derive(Debug, Clone)]
pub struct TestBasis {
    pub matrix: ComplexCsr,
}

impl TestBasis {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn function(&self, z: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.matrix.ncols()];
        let (c, v) = self.matrix.row(z);
        for (&j, &x) in c.iter().zip(v) {
            out[j] = x;
        }
        out
    }
}

/// Assembles `Λ̃_z = PΛ_z − Σ_{T ∋ z} λ_{z,T}` for every free coarse vertex.
pub fn build_test_basis(pair: &MeshPair, source: CorrectorSource<'_>) -> Result<TestBasis> {
    let mut triplets: Vec<(usize, usize, Complex64)> = pair
        .prolongation
        .triplets()
        .map(|(f, z, w)| (z, f, Complex64::new(w, 0.0)))
        .collect();
    for &t in pair.coarse.active_cells() {
        let ec = source.corrector(pair, t)?;
        for (k, &z) in pair.coarse.cell_vertices(t).as_slice().iter().enumerate() {
            let (Some(zd), Some(vals)) = (pair.coarse_dofs.dof(z), &ec.values[k]) else {
                continue;
            };
            for (&d, &v) in ec.dofs.iter().zip(vals) {
                triplets.push((zd, d, -v));
            }
        }
    }
    Ok(TestBasis {
        matrix: CsrMatrix::from_triplets(pair.coarse_dofs.len(), pair.fine_dofs.len(), &triplets),
    })
}

/// Decay of the idealized corrector of one cell away from the cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRow {
    pub m: usize,
    /// `(Σ_z ‖∇λ^∞_{z,T}‖²_{Ω∖N^m(T)})^{1/2}`.
    pub tail: f64,
    /// `(Σ_z ‖∇(λ^∞_{z,T} − λ^m_{z,T})‖²_Ω)^{1/2}`.
    pub localization_error: f64,
}

fn scatter(n: usize, dofs: &[usize], vals: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (&d, &v) in dofs.iter().zip(vals) {
        out[d] = v;
    }
    out
}

/// Tail energies and localization errors of the correctors of `cell` for each `m`.
pub fn corrector_decay(pair: &MeshPair, cell: usize, kappa: f64, ms: &[usize]) -> Result<Vec<DecayRow>> {
    let fine = pair.fine();
    let nf = pair.fine_dofs.len();
    let ideal = solve_ideal_corrector(pair, cell, kappa)?;
    let ideal_fields: Vec<Option<Vec<Complex64>>> = ideal
        .values
        .iter()
        .map(|v| v.as_ref().map(|v| scatter(nf, &ideal.dofs, v)))
        .collect();
    let all = fine.active_cells();
    ms.iter()
        .map(|&m| {
            let cells = patch(&pair.coarse, cell, m);
            let outside: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&f| cells.binary_search(&pair.refinement.parent[f]).is_err())
                .collect();
            let local = solve_element_corrector(pair, cell, Oversampling::Layers(m), kappa)?;
            let mut tail = 0.0;
            let mut loc = 0.0;
            for (k, field) in ideal_fields.iter().enumerate() {
                let Some(field) = field else { continue };
                tail += gradient_norm_sq(fine, &pair.fine_dofs, field, &outside);
                let lm = scatter(nf, &local.dofs, local.values[k].as_ref().expect("same vertex set"));
                let diff: Vec<Complex64> = field.iter().zip(&lm).map(|(a, b)| a - b).collect();
                loc += gradient_norm_sq(fine, &pair.fine_dofs, &diff, all);
            }
            Ok(DecayRow {
                m,
                tail: tail.sqrt(),
                localization_error: loc.sqrt(),
            })
        })
        .collect()
}

/// Geometric ratio `β̂` from a least-squares fit of `log(values)` against `ms`.
pub fn fit_decay_ratio(ms: &[usize], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = ms
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&m, &v)| (m as f64, v.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxy / sxx).exp()
}

const CACHE_MAGIC: &[u8; 8] = b"MSPGCORR";
const CACHE_VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, x: f64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_offset<W: Write>(w: &mut W, o: [i64; 3]) -> std::io::Result<()> {
    for x in o {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_offset<R: Read>(r: &mut R) -> Result<[i64; 3]> {
    let mut o = [0i64; 3];
    for x in o.iter_mut() {
        *x = get_u64(r)? as i64;
    }
    Ok(o)
}

fn get_len<R: Read>(r: &mut R, limit: usize) -> Result<usize> {
    let n = get_u64(r)? as usize;
    if n > limit {
        return Err(Error::CacheFormat(format!("length {n} exceeds {limit}")));
    }
    Ok(n)
}

impl CorrectorCache {
    /// Writes the solved correctors; class membership is recomputed on load.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        put_u64(&mut w, self.key.domain)?;
        for n in self.key.cells_per_axis {
            put_u64(&mut w, n as u64)?;
        }
        put_u64(&mut w, self.key.levels as u64)?;
        put_f64(&mut w, self.key.kappa)?;
        put_u64(&mut w, self.key.m as u64)?;
        put_u64(&mut w, self.entries.len() as u64)?;
        for e in &self.entries {
            put_u64(&mut w, e.representative as u64)?;
            put_f64(&mut w, e.kernel_residual)?;
            put_u64(&mut w, e.fine_offsets.len() as u64)?;
            for &o in &e.fine_offsets {
                put_offset(&mut w, o)?;
            }
            put_u64(&mut w, e.values.len() as u64)?;
            for (vals, row) in e.values.iter().zip(&e.coarse_rows) {
                match (vals, row) {
                    (Some(vals), Some(row)) => {
                        w.write_all(&[1])?;
                        for v in vals {
                            put_f64(&mut w, v.re)?;
                            put_f64(&mut w, v.im)?;
                        }
                        put_u64(&mut w, row.len() as u64)?;
                        for &(o, v) in row {
                            put_offset(&mut w, o)?;
                            put_f64(&mut w, v.re)?;
                            put_f64(&mut w, v.im)?;
                        }
                    }
                    _ => w.write_all(&[0])?,
                }
            }
        }
        Ok(())
    }

    /// Reads a cache written by [`CorrectorCache::write_to`]; fails unless it
    /// was computed for exactly this mesh pair, `m` and `κ`.
    pub fn read_from<R: Read>(mut r: R, pair: &MeshPair, m: usize, kappa: f64) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::CacheFormat("not a corrector cache".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != CACHE_VERSION {
            return Err(Error::CacheFormat(format!(
                "unsupported version {}",
                u32::from_le_bytes(ver)
            )));
        }
        let domain = get_u64(&mut r)?;
        let mut cells_per_axis = [0usize; 3];
        for n in cells_per_axis.iter_mut() {
            *n = get_u64(&mut r)? as usize;
        }
        let key = CacheKey {
            domain,
            cells_per_axis,
            levels: get_u64(&mut r)? as usize,
            kappa: get_f64(&mut r)?,
            m: get_u64(&mut r)? as usize,
        };
        let expected = CacheKey::of(pair, m, kappa);
        if key != expected {
            return Err(Error::CacheFormat(format!(
                "cache key {key:?} does not match {expected:?}"
            )));
        }
        let classes = classify_patches(&pair.coarse, m);
        let n = get_len(&mut r, classes.len())?;
        if n != classes.len() {
            return Err(Error::CacheFormat(format!(
                "{n} entries for {} classes",
                classes.len()
            )));
        }
        let limit = pair.fine_dofs.len().max(1);
        let mut entries = Vec::with_capacity(n);
        for class in &classes.classes {
            let representative = get_u64(&mut r)? as usize;
            if representative != class.representative {
                return Err(Error::CacheFormat("class order mismatch".into()));
            }
            let kernel_residual = get_f64(&mut r)?;
            let nd = get_len(&mut r, limit)?;
            let fine_offsets = (0..nd).map(|_| get_offset(&mut r)).collect::<Result<Vec<_>>>()?;
            let nv = get_len(&mut r, 8)?;
            let mut values = Vec::with_capacity(nv);
            let mut coarse_rows = Vec::with_capacity(nv);
            for _ in 0..nv {
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                if flag[0] == 0 {
                    values.push(None);
                    coarse_rows.push(None);
                    continue;
                }
                let vals = (0..nd)
                    .map(|_| Ok(Complex64::new(get_f64(&mut r)?, get_f64(&mut r)?)))
                    .collect::<Result<Vec<_>>>()?;
                let nr = get_len(&mut r, pair.coarse_dofs.len().max(1))?;
                let row = (0..nr)
                    .map(|_| {
                        let o = get_offset(&mut r)?;
                        Ok((o, Complex64::new(get_f64(&mut r)?, get_f64(&mut r)?)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                values.push(Some(vals));
                coarse_rows.push(Some(row));
            }
            entries.push(CachedCorrector {
                representative,
                fine_offsets,
                values,
                coarse_rows,
                kernel_residual,
            });
        }
        Ok(Self {
            key,
            classes,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_mesh, BoxDomain};

    fn pair(n: usize, levels: usize) -> MeshPair {
        MeshPair::new(build_mesh(&BoxDomain::unit(2), &[n, n]).unwrap(), levels).unwrap()
    }

    #[test]
    fn correctors_lie_in_the_kernel() {
        let p = pair(6, 2);
        for &t in &[0, 7, 14, 35] {
            let ec = solve_element_corrector(&p, t, Oversampling::Layers(1), 3.0).unwrap();
            assert!(ec.kernel_residual < 1e-10, "cell {t}: {}", ec.kernel_residual);
            assert_eq!(ec.values.len(), 4);
        }
    }

    #[test]
    fn cache_matches_direct_solves() {
        let p = pair(7, 1);
        let cache = build_cache(&p, 1, 2.0, true).unwrap();
        assert_eq!(cache.n_solves(), 25);
        for &t in p.coarse.active_cells() {
            let cached = cache.corrector(&p, t).unwrap();
            let direct = solve_element_corrector(&p, t, Oversampling::Layers(1), 2.0).unwrap();
            assert_eq!(cached.dofs, direct.dofs);
            for (a, b) in cached.values.iter().zip(&direct.values) {
                let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
                let scale = b.iter().map(|x| x.norm()).fold(0.0, f64::max);
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
                assert!(diff <= 1e-12 * scale);
            }
            assert_eq!(cached.coarse_rows.len(), direct.coarse_rows.len());
        }
    }

    #[test]
    fn cache_round_trip() {
        let p = pair(5, 1);
        let cache = build_cache(&p, 1, 2.0, false).unwrap();
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        let back = CorrectorCache::read_from(buf.as_slice(), &p, 1, 2.0).unwrap();
        assert_eq!(back.entries, cache.entries);
        assert!(matches!(
            CorrectorCache::read_from(buf.as_slice(), &p, 1, 3.0),
            Err(Error::CacheFormat(_))
        ));
        assert!(matches!(
            CorrectorCache::read_from(&b"garbage-data"[..], &p, 1, 2.0),
            Err(Error::CacheFormat(_))
        ));
    }

    #[test]
    fn fit_recovers_exact_ratio() {
        let ms = [1, 2, 3, 4];
        let vals: Vec<f64> = ms.iter().map(|&m| 3.0 * 0.4f64.powi(m as i32)).collect();
        assert!((fit_decay_ratio(&ms, &vals) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn resolution_limit_positive() {
        assert!(resolution_limit(2, 0.5) > 0.0);
        assert!(resolution_limit(3, 0.5) < resolution_limit(2, 0.5));
    }
}
