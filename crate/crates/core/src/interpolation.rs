//! Quasi-interpolation `I_H = E_H ∘ Π_H` from fine to coarse `Q1` fields.
//!
//! `Π_H` is the cellwise `L²` projection onto (discontinuous) `Q1` on each
//! coarse cell, `E_H` averages the cell values at every free coarse vertex
//! over the active cells containing it. Coarse Dirichlet vertices carry no
//! dof, which realises `E_H(v) = 0` on `Γ_D`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble_global, gradient_norm_sq, l2_norm_sq};
use crate::error::{Error, Result};
use crate::grid::{free_nodes, patch, refine_uniform, DofMap, Refinement, StructuredMesh};
use crate::sparse::{CsrMatrix, RealCsr};

/// Value `C_{I_H}` used by the resolution advisory: the largest ratio
/// observed by [`measure_approximation_constant`] on 8² and 16² coarse
/// squares (100 fields, three refinement levels), rounded up.
pub const DEFAULT_APPROXIMATION_CONSTANT: f64 = 0.08;

/// Checks that `fine` is a uniform refinement of `coarse`.
pub fn check_nested(coarse: &StructuredMesh, refinement: &Refinement) -> Result<()> {
    let r = refinement.ratio();
    let fine = &refinement.fine;
    if coarse.dim() != fine.dim() || coarse.domain() != fine.domain() {
        return Err(Error::NotNested("meshes cover different domains".into()));
    }
    let (nc, nf) = (coarse.cells_per_axis(), fine.cells_per_axis());
    for a in 0..coarse.dim() {
        if nc[a] * r != nf[a] {
            return Err(Error::NotNested(format!(
                "axis {a}: {} coarse cells do not refine to {} fine cells",
                nc[a], nf[a]
            )));
        }
    }
    if refinement.parent.len() != fine.n_cells() {
        return Err(Error::NotNested("parent map has the wrong length".into()));
    }
    Ok(())
}

/// Coarse-to-fine prolongation of `Q1` fields (nodal interpolation of the
/// coarse hats), as a `fine free × coarse free` matrix.
pub fn prolongation(
    coarse: &StructuredMesh,
    coarse_dofs: &DofMap,
    refinement: &Refinement,
    fine_dofs: &DofMap,
) -> RealCsr {
    let fine = &refinement.fine;
    let r = refinement.ratio();
    let dim = coarse.dim();
    let rows = fine_dofs
        .free_nodes
        .iter()
        .map(|&v| {
            let fc = fine.vertex_coords(v);
            let mut entries = Vec::with_capacity(1 << dim);
            for k in 0..(1usize << dim) {
                let mut cc = [0usize; 3];
                let mut w = 1.0;
                for a in 0..dim {
                    let (q, t) = (fc[a] / r, fc[a] % r);
                    let s = t as f64 / r as f64;
                    if (k >> a) & 1 == 0 {
                        cc[a] = q;
                        w *= 1.0 - s;
                    } else {
                        cc[a] = q + 1;
                        w *= s;
                    }
                }
                if w == 0.0 {
                    continue;
                }
                if let Some(j) = coarse_dofs.dof(coarse.vertex_index(cc)) {
                    entries.push((j, w));
                }
            }
            entries.sort_unstable_by_key(|e| e.0);
            entries
        })
        .collect();
    CsrMatrix::from_rows(coarse_dofs.len(), rows)
}

/// 1D cellwise projection: row `b` holds the weights of the fine vertex
/// values `0..=r` in the projected value at coarse endpoint `b`.
fn projection_1d(r: usize) -> [Vec<f64>; 2] {
    let h = 1.0 / r as f64;
    // P^T M_h: projection of fine values against the two coarse hats
    let mut rhs = [vec![0.0; r + 1], vec![0.0; r + 1]];
    for i in 0..r {
        for (b, row) in rhs.iter_mut().enumerate() {
            // coarse hat b at fine nodes i, i+1
            let hat = |x: f64| if b == 0 { 1.0 - x } else { x };
            let (p0, p1) = (hat(i as f64 * h), hat((i + 1) as f64 * h));
            row[i] += h / 6.0 * (2.0 * p0 + p1);
            row[i + 1] += h / 6.0 * (p0 + 2.0 * p1);
        }
    }
    // coarse mass on the unit interval is [[1/3, 1/6], [1/6, 1/3]]
    let inv = [[4.0, -2.0], [-2.0, 4.0]];
    let mut out = [vec![0.0; r + 1], vec![0.0; r + 1]];
    for (b, row) in out.iter_mut().enumerate() {
        for (i, x) in row.iter_mut().enumerate() {
            *x = inv[b][0] * rhs[0][i] + inv[b][1] * rhs[1][i];
        }
    }
    out
}

/// Reference `Π_H` map of one coarse cell: `2^dim × (r+1)^dim`, fine
/// vertices of the cell ordered lexicographically (x fastest), coarse
/// corners in bit order.
pub fn cell_projection(dim: usize, r: usize) -> Vec<Vec<f64>> {
    let p1 = projection_1d(r);
    let nf = (r + 1).pow(dim as u32);
    (0..(1usize << dim))
        .map(|k| {
            (0..nf)
                .map(|f| {
                    let mut rest = f;
                    let mut w = 1.0;
                    for a in 0..dim {
                        w *= p1[(k >> a) & 1][rest % (r + 1)];
                        rest /= r + 1;
                    }
                    w
                })
                .collect()
        })
        .collect()
}

/// Fine vertices in the closure of a coarse cell, lexicographic (x fastest).
pub(crate) fn cell_fine_vertices(
    coarse: &StructuredMesh,
    fine: &StructuredMesh,
    r: usize,
    cell: usize,
) -> Vec<usize> {
    let c = coarse.cell_coords(cell);
    let dim = coarse.dim();
    let ext = |a: usize| if a < dim { r + 1 } else { 1 };
    let mut out = Vec::with_capacity(ext(0) * ext(1) * ext(2));
    for k in 0..ext(2) {
        for j in 0..ext(1) {
            for i in 0..ext(0) {
                let mut f = [i, j, k];
                for (a, x) in f.iter_mut().enumerate().take(dim) {
                    *x += c[a] * r;
                }
                out.push(fine.vertex_index(f));
            }
        }
    }
    out
}

/// `Π_H` as a map from fine free dofs to discontinuous cell coefficients,
/// row `2^dim · t + k` for the `t`-th active coarse cell and corner `k`.
pub fn build_pi_h(
    coarse: &StructuredMesh,
    refinement: &Refinement,
    fine_dofs: &DofMap,
) -> Result<RealCsr> {
    check_nested(coarse, refinement)?;
    let r = refinement.ratio();
    let dim = coarse.dim();
    let proj = cell_projection(dim, r);
    let nl = 1usize << dim;
    let mut rows = Vec::with_capacity(coarse.active_cells().len() * nl);
    for &t in coarse.active_cells() {
        let verts = cell_fine_vertices(coarse, &refinement.fine, r, t);
        for pk in &proj {
            let mut row: Vec<(usize, f64)> = verts
                .iter()
                .zip(pk)
                .filter_map(|(&v, &w)| fine_dofs.dof(v).map(|d| (d, w)))
                .collect();
            row.sort_unstable_by_key(|e| e.0);
            rows.push(row);
        }
    }
    Ok(CsrMatrix::from_rows(fine_dofs.len(), rows))
}

/// Number of active coarse cells containing each vertex.
fn vertex_cell_counts(coarse: &StructuredMesh) -> Vec<u8> {
    let mut counts = vec![0u8; coarse.n_vertices()];
    for &t in coarse.active_cells() {
        for &v in coarse.cell_vertices(t).as_slice() {
            counts[v] += 1;
        }
    }
    counts
}

/// `E_H` as a map from the discontinuous cell coefficients of
/// [`build_pi_h`] to values at the free coarse vertices.
pub fn build_e_h(coarse: &StructuredMesh, coarse_dofs: &DofMap) -> RealCsr {
    let counts = vertex_cell_counts(coarse);
    let nl = coarse.n_local();
    let mut triplets = Vec::new();
    for (t_idx, &t) in coarse.active_cells().iter().enumerate() {
        for (k, &v) in coarse.cell_vertices(t).as_slice().iter().enumerate() {
            if let Some(z) = coarse_dofs.dof(v) {
                triplets.push((z, nl * t_idx + k, 1.0 / counts[v] as f64));
            }
        }
    }
    CsrMatrix::from_triplets(coarse_dofs.len(), nl * coarse.active_cells().len(), &triplets)
}

/// The operator `I_H` between fixed coarse and fine dof maps.
#[derive(Debug, Clone)]
pub struct QuasiInterpolator {
    /// `coarse free × fine free`.
    pub matrix: RealCsr,
    /// Transpose of `matrix`, for column access.
    pub transpose: RealCsr,
}

impl QuasiInterpolator {
    pub fn apply(&self, fine: &[Complex64]) -> Vec<Complex64> {
        self.matrix.matvec(fine)
    }

    pub fn n_coarse(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_fine(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Builds `I_H = E_H ∘ Π_H` directly, without forming the discontinuous space.
pub fn build_i_h(
    coarse: &StructuredMesh,
    coarse_dofs: &DofMap,
    refinement: &Refinement,
    fine_dofs: &DofMap,
) -> Result<QuasiInterpolator> {
    check_nested(coarse, refinement)?;
    let r = refinement.ratio();
    let proj = cell_projection(coarse.dim(), r);
    let counts = vertex_cell_counts(coarse);
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coarse_dofs.len()];
    for &t in coarse.active_cells() {
        let verts = cell_fine_vertices(coarse, &refinement.fine, r, t);
        for (k, &v) in coarse.cell_vertices(t).as_slice().iter().enumerate() {
            let Some(z) = coarse_dofs.dof(v) else { continue };
            let scale = 1.0 / counts[v] as f64;
            for (&fv, &w) in verts.iter().zip(&proj[k]) {
                if let Some(d) = fine_dofs.dof(fv) {
                    rows[z].push((d, scale * w));
                }
            }
        }
    }
    for row in rows.iter_mut() {
        row.sort_unstable_by_key(|e| e.0);
        row.dedup_by(|later, kept| {
            if later.0 == kept.0 {
                kept.1 += later.1;
                true
            } else {
                false
            }
        });
    }
    let matrix = CsrMatrix::from_rows(fine_dofs.len(), rows);
    let transpose = matrix.transpose();
    Ok(QuasiInterpolator { matrix, transpose })
}

/// A coarse mesh, its uniform refinement, both dof maps and the transfer
/// operators between them. Built once and shared read-only.
#[derive(Debug, Clone)]
pub struct MeshPair {
    pub coarse: StructuredMesh,
    pub coarse_dofs: DofMap,
    pub refinement: Refinement,
    pub fine_dofs: DofMap,
    pub interpolator: QuasiInterpolator,
    /// `fine free × coarse free`.
    pub prolongation: RealCsr,
}

impl MeshPair {
    pub fn new(coarse: StructuredMesh, levels: usize) -> Result<Self> {
        let refinement = refine_uniform(&coarse, levels)?;
        let coarse_dofs = free_nodes(&coarse);
        let fine_dofs = free_nodes(&refinement.fine);
        let interpolator = build_i_h(&coarse, &coarse_dofs, &refinement, &fine_dofs)?;
        let prolongation = prolongation(&coarse, &coarse_dofs, &refinement, &fine_dofs);
        Ok(Self {
            coarse,
            coarse_dofs,
            refinement,
            fine_dofs,
            interpolator,
            prolongation,
        })
    }

    pub fn fine(&self) -> &StructuredMesh {
        &self.refinement.fine
    }

    pub fn ratio(&self) -> usize {
        self.refinement.ratio()
    }

    pub fn prolong(&self, coarse: &[Complex64]) -> Vec<Complex64> {
        self.prolongation.matvec(coarse)
    }
}

/// Rows of `I_H` restricted to the dofs of one patch.
#[derive(Debug, Clone)]
pub struct KernelConstraints {
    /// Coarse free dofs whose `I_H` row meets the patch.
    pub rows: Vec<usize>,
    /// `rows.len() × patch dofs`, columns in the order of the patch dofs.
    pub matrix: RealCsr,
}

/// Constraint matrix of `{w supported on the patch : I_H w = 0}`.
///
/// `patch_dofs` are fine free dof indices, `w` is extended by zero outside.
/// Rows that vanish on the patch are dropped.
pub fn kernel_constraints(ih: &QuasiInterpolator, patch_dofs: &[usize]) -> Result<KernelConstraints> {
    if patch_dofs.is_empty() {
        return Err(Error::EmptyPatch);
    }
    let mut local = std::collections::HashMap::with_capacity(patch_dofs.len());
    for (l, &d) in patch_dofs.iter().enumerate() {
        local.insert(d, l);
    }
    let mut rows: Vec<usize> = Vec::new();
    for &d in patch_dofs {
        let (cols, vals) = ih.transpose.row(d);
        for (&z, &w) in cols.iter().zip(vals) {
            if w != 0.0 {
                rows.push(z);
            }
        }
    }
    rows.sort_unstable();
    rows.dedup();
    let entries = rows
        .iter()
        .map(|&z| {
            let (cols, vals) = ih.matrix.row(z);
            let mut row: Vec<(usize, f64)> = cols
                .iter()
                .zip(vals)
                .filter_map(|(c, &w)| local.get(c).map(|&l| (l, w)))
                .collect();
            row.sort_unstable_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(KernelConstraints {
        matrix: CsrMatrix::from_rows(patch_dofs.len(), entries),
        rows,
    })
}

/// Nodal values of `Σ_j c_j exp(i ω_j·x)` with eight random complex
/// amplitudes and wave-vector components of random sign and log-uniform
/// magnitude in `[1, π/h]`.
pub fn random_field(mesh: &StructuredMesh, dofs: &DofMap, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let dim = mesh.dim();
    let h = mesh.spacing();
    let modes: Vec<(Complex64, [f64; 3])> = (0..8)
        .map(|_| {
            let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut w = [0.0; 3];
            for a in 0..dim {
                let top = (std::f64::consts::PI / h[a]).ln().max(0.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                w[a] = sign * rng.gen_range(0.0..=top).exp();
            }
            (c, w)
        })
        .collect();
    dofs.free_nodes
        .iter()
        .map(|&v| {
            let x = mesh.vertex_point(v);
            modes
                .iter()
                .map(|(c, w)| c * Complex64::from_polar(1.0, w[0] * x[0] + w[1] * x[1] + w[2] * x[2]))
                .sum()
        })
        .collect()
}

/// Largest observed `‖v − I_H v‖_{L²(T)} / (H ‖∇v‖_{L²(N(T))})` over all
/// coarse cells `T` and `samples` seeded random fine fields.
#[allow(clippy::too_many_arguments)]
pub fn measure_approximation_constant(
    coarse: &StructuredMesh,
    coarse_dofs: &DofMap,
    refinement: &Refinement,
    fine_dofs: &DofMap,
    ih: &QuasiInterpolator,
    samples: usize,
    seed: u64,
) -> f64 {
    let fine = &refinement.fine;
    let p = prolongation(coarse, coarse_dofs, refinement, fine_dofs);
    let children: Vec<Vec<usize>> = coarse
        .active_cells()
        .iter()
        .map(|&t| refinement.children(coarse, t))
        .collect();
    let neighbourhoods: Vec<Vec<usize>> = coarse
        .active_cells()
        .iter()
        .map(|&t| {
            patch(coarse, t, 1)
                .into_iter()
                .flat_map(|k| refinement.children(coarse, k))
                .collect()
        })
        .collect();
    let h_coarse = coarse.mesh_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = random_field(fine, fine_dofs, &mut rng);
        let pv = p.matvec(&ih.apply(&v));
        let diff: Vec<Complex64> = v.iter().zip(&pv).map(|(a, b)| a - b).collect();
        for (kids, nbh) in children.iter().zip(&neighbourhoods) {
            let num = l2_norm_sq(fine, fine_dofs, &diff, kids).sqrt();
            let den = h_coarse * gradient_norm_sq(fine, fine_dofs, &v, nbh).sqrt();
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
    }
    worst
}

/// Largest observed `‖I_H v‖_V / ‖v‖_V` over `samples` seeded random fine fields.
pub fn measure_v_stability_constant(pair: &MeshPair, kappa: f64, samples: usize, seed: u64) -> f64 {
    let fine_parts = assemble_global(pair.fine(), &pair.fine_dofs, kappa);
    let coarse_parts = assemble_global(&pair.coarse, &pair.coarse_dofs, kappa);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = random_field(pair.fine(), &pair.fine_dofs, &mut rng);
        let den = fine_parts.v_norm(&v);
        if den > 0.0 {
            worst = worst.max(coarse_parts.v_norm(&pair.interpolator.apply(&v)) / den);
        }
    }
    worst
}
