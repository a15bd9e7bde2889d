//! `Q1` element matrices and assembly of the Helmholtz sesquilinear form
//!
//! ```text
//! a(v, w) = (∇v, ∇w) − κ² (v, w) − iκ (v, w)_{Γ_R}
//! ```
//!
//! with `(v, w) = ∫ v·conj(w)`. Matrices store `a(φ_j, φ_i)` at entry
//! `(i, j)`, so `a(v, w) = w^H A v` for coefficient vectors `v`, `w`.
//! Since the basis is real, `A = S − κ²M − iκB` is complex symmetric.

use std::ops::Deref;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BoundaryTag, DofMap, Face, StructuredMesh};
use crate::quadrature::TensorRule;
use crate::sparse::{ComplexCsr, CsrMatrix, RealCsr};

/// Gauss points per axis used for loads and error integrals.
pub const DEFAULT_QUADRATURE: usize = 5;

const CHUNK: usize = 2048;

pub type ScalarFn = Arc<dyn Fn(&[f64; 3]) -> Complex64 + Send + Sync>;
/// Boundary datum; receives the point and the outward unit normal.
pub type BoundaryFn = Arc<dyn Fn(&[f64; 3], &[f64; 3]) -> Complex64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64; 3]) -> [Complex64; 3] + Send + Sync>;

#[derive(Clone)]
pub struct ExactSolution {
    pub value: ScalarFn,
    pub gradient: Option<GradientFn>,
}

/// Right-hand side data of the weak problem; `None` means identically zero.
#[derive(Clone, Default)]
pub struct ProblemData {
    pub source: Option<ScalarFn>,
    pub robin: Option<BoundaryFn>,
    pub exact: Option<ExactSolution>,
}

impl ProblemData {
    pub fn is_zero(&self) -> bool {
        self.source.is_none() && self.robin.is_none()
    }
}

impl std::fmt::Debug for ProblemData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemData")
            .field("source", &self.source.is_some())
            .field("robin", &self.robin.is_some())
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

macro_rules! field_newtype {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Vec<Complex64>);

        impl Deref for $name {
            type Target = [Complex64];
            fn deref(&self) -> &[Complex64] {
                &self.0
            }
        }

        impl From<Vec<Complex64>> for $name {
            fn from(v: Vec<Complex64>) -> Self {
                Self(v)
            }
        }
    };
}

field_newtype!(CoarseField, "Coefficients over the free coarse vertices (the space `V_H`).");
field_newtype!(FineField, "Coefficients over the free fine vertices (the space `V_h`).");

/// Exact `Q1` integrals on one axis-aligned box, local vertices in bit order.
#[derive(Debug, Clone)]
pub struct ElementMatrices {
    pub dim: usize,
    pub stiffness: Vec<f64>,
    pub mass: Vec<f64>,
    /// Boundary mass per facet, indexed by `2 * axis + side`.
    pub facet_mass: Vec<Vec<f64>>,
}

impl ElementMatrices {
    pub fn n(&self) -> usize {
        1 << self.dim
    }

    pub fn stiffness(&self, k: usize, l: usize) -> f64 {
        self.stiffness[k * self.n() + l]
    }

    pub fn mass(&self, k: usize, l: usize) -> f64 {
        self.mass[k * self.n() + l]
    }

    pub fn facet(&self, face: Face) -> &[f64] {
        &self.facet_mass[2 * face.axis + face.side]
    }
}

pub fn element_matrices(sides: &[f64]) -> Result<ElementMatrices> {
    let dim = sides.len();
    if !(1..=3).contains(&dim) || sides.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::DegenerateCell(sides.to_vec()));
    }
    let n = 1usize << dim;
    let k1 = |h: f64, a: usize, b: usize| if a == b { 1.0 / h } else { -1.0 / h };
    let m1 = |h: f64, a: usize, b: usize| if a == b { h / 3.0 } else { h / 6.0 };
    let bit = |k: usize, a: usize| (k >> a) & 1;

    let mut stiffness = vec![0.0; n * n];
    let mut mass = vec![0.0; n * n];
    let mut facet_mass = vec![vec![0.0; n * n]; 2 * dim];
    for k in 0..n {
        for l in 0..n {
            let mut m = 1.0;
            for (a, &h) in sides.iter().enumerate() {
                m *= m1(h, bit(k, a), bit(l, a));
            }
            mass[k * n + l] = m;
            let mut s = 0.0;
            for (a, &ha) in sides.iter().enumerate() {
                let mut term = k1(ha, bit(k, a), bit(l, a));
                for (b, &hb) in sides.iter().enumerate() {
                    if b != a {
                        term *= m1(hb, bit(k, b), bit(l, b));
                    }
                }
                s += term;
            }
            stiffness[k * n + l] = s;
            for axis in 0..dim {
                for side in 0..2 {
                    if bit(k, axis) != side || bit(l, axis) != side {
                        continue;
                    }
                    let mut f = 1.0;
                    for (b, &hb) in sides.iter().enumerate() {
                        if b != axis {
                            f *= m1(hb, bit(k, b), bit(l, b));
                        }
                    }
                    facet_mass[2 * axis + side][k * n + l] = f;
                }
            }
        }
    }
    Ok(ElementMatrices {
        dim,
        stiffness,
        mass,
        facet_mass,
    })
}

/// Element matrices of the (congruent) cells of a mesh.
pub fn mesh_element_matrices(mesh: &StructuredMesh) -> ElementMatrices {
    element_matrices(&mesh.spacing()[..mesh.dim()]).expect("mesh cells are non-degenerate")
}

/// Real parts of the form: `A = S − κ²M − iκB`.
#[derive(Debug, Clone)]
pub struct FormParts {
    pub stiffness: RealCsr,
    pub mass: RealCsr,
    pub boundary: RealCsr,
    pub kappa: f64,
}

impl FormParts {
    pub fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    /// The system matrix `S − κ²M − iκB`.
    pub fn system_matrix(&self) -> ComplexCsr {
        let k2 = self.kappa * self.kappa;
        let n = self.dim();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let (sc, sv) = self.stiffness.row(i);
            let (mc, mv) = self.mass.row(i);
            let (bc, bv) = self.boundary.row(i);
            let mut row: Vec<(usize, Complex64)> = Vec::with_capacity(sc.len().max(mc.len()));
            let mut push = |j: usize, v: Complex64| match row.last_mut() {
                Some((lj, lv)) if *lj == j => *lv += v,
                _ => row.push((j, v)),
            };
            // three-way merge of sorted rows
            let (mut a, mut b, mut c) = (0, 0, 0);
            loop {
                let next = [sc.get(a), mc.get(b), bc.get(c)]
                    .into_iter()
                    .flatten()
                    .min()
                    .copied();
                let Some(j) = next else { break };
                if sc.get(a) == Some(&j) {
                    push(j, Complex64::new(sv[a], 0.0));
                    a += 1;
                }
                if mc.get(b) == Some(&j) {
                    push(j, Complex64::new(-k2 * mv[b], 0.0));
                    b += 1;
                }
                if bc.get(c) == Some(&j) {
                    push(j, Complex64::new(0.0, -self.kappa * bv[c]));
                    c += 1;
                }
            }
            rows.push(row);
        }
        CsrMatrix::from_rows(n, rows)
    }

    /// The real symmetric `V`-inner-product matrix `S + κ²M`.
    pub fn v_matrix(&self) -> RealCsr {
        self.stiffness.scaled_add(self.kappa * self.kappa, &self.mass)
    }

    /// `a(v, w) = w^H A v`.
    pub fn form(&self, v: &[Complex64], w: &[Complex64]) -> Complex64 {
        let k2 = self.kappa * self.kappa;
        let s = crate::sparse::dot_h(w, &self.stiffness.matvec(v));
        let m = crate::sparse::dot_h(w, &self.mass.matvec(v));
        let b = crate::sparse::dot_h(w, &self.boundary.matvec(v));
        s - k2 * m - Complex64::i() * self.kappa * b
    }

    /// `‖v‖_V = sqrt(v^H (κ²M + S) v)`.
    pub fn v_norm(&self, v: &[Complex64]) -> f64 {
        let k2 = self.kappa * self.kappa;
        let s = crate::sparse::dot_h(v, &self.stiffness.matvec(v)).re;
        let m = crate::sparse::dot_h(v, &self.mass.matvec(v)).re;
        (s + k2 * m).max(0.0).sqrt()
    }
}

/// Sparsity pattern plus value arrays for a set of cells on a structured mesh.
struct CellAssembler {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl CellAssembler {
    fn new(n: usize, cell_dofs: &[[Option<usize>; 8]], n_local: usize) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for dofs in cell_dofs {
            for k in 0..n_local {
                let Some(i) = dofs[k] else { continue };
                for dl in dofs.iter().take(n_local) {
                    if let Some(j) = dl {
                        rows[i].push(*j);
                    }
                }
            }
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            indices.extend(r);
            indptr.push(indices.len());
        }
        Self { n, indptr, indices }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        lo + self.indices[lo..hi]
            .binary_search(&j)
            .expect("entry in sparsity pattern")
    }

    fn finish(&self, data: Vec<f64>) -> RealCsr {
        let rows = (0..self.n)
            .map(|i| {
                (self.indptr[i]..self.indptr[i + 1])
                    .map(|k| (self.indices[k], data[k]))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(self.n, rows)
    }
}

/// Assembles `S`, `M` and `B` over `cells`, numbering vertices through `index`.
///
/// `robin` selects which cell facets contribute to `B`.
pub(crate) fn assemble_parts_with(
    mesh: &StructuredMesh,
    cells: &[usize],
    n: usize,
    index: impl Fn(usize) -> Option<usize>,
    robin: impl Fn(usize, Face) -> bool,
    kappa: f64,
) -> FormParts {
    let elem = mesh_element_matrices(mesh);
    let nl = mesh.n_local();
    let cell_dofs: Vec<[Option<usize>; 8]> = cells
        .iter()
        .map(|&c| {
            let mut d = [None; 8];
            for (k, &v) in mesh.cell_vertices(c).as_slice().iter().enumerate() {
                d[k] = index(v);
            }
            d
        })
        .collect();
    let pattern = CellAssembler::new(n, &cell_dofs, nl);
    let mut s = vec![0.0; pattern.indices.len()];
    let mut m = vec![0.0; pattern.indices.len()];
    let mut b_triplets = Vec::new();
    for (&c, dofs) in cells.iter().zip(&cell_dofs) {
        for k in 0..nl {
            let Some(i) = dofs[k] else { continue };
            for l in 0..nl {
                let Some(j) = dofs[l] else { continue };
                let slot = pattern.slot(i, j);
                s[slot] += elem.stiffness(k, l);
                m[slot] += elem.mass(k, l);
            }
        }
        for axis in 0..mesh.dim() {
            for side in 0..2 {
                let face = Face { axis, side };
                if mesh.facet_tag(c, face) != Some(BoundaryTag::Robin) || !robin(c, face) {
                    continue;
                }
                let fm = elem.facet(face);
                for k in 0..nl {
                    let Some(i) = dofs[k] else { continue };
                    for l in 0..nl {
                        let Some(j) = dofs[l] else { continue };
                        let v = fm[k * nl + l];
                        if v != 0.0 {
                            b_triplets.push((i, j, v));
                        }
                    }
                }
            }
        }
    }
    FormParts {
        stiffness: pattern.finish(s),
        mass: pattern.finish(m),
        boundary: RealCsr::from_triplets(n, n, &b_triplets),
        kappa,
    }
}

/// Assembles the form over `region` (active cells) in the ambient numbering
/// of `dofs`. With `robin` the boundary term covers the facets of region
/// cells lying on the global Robin boundary.
pub fn assemble_form(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    region: &[usize],
    robin: bool,
) -> Result<FormParts> {
    if let Some(&bad) = region.iter().find(|&&c| c >= mesh.n_cells() || !mesh.is_active(c)) {
        return Err(Error::InactiveCell(bad));
    }
    Ok(assemble_parts_with(
        mesh,
        region,
        dofs.len(),
        |v| dofs.dof(v),
        |_, _| robin,
        kappa,
    ))
}

/// Form over the whole mesh including the Robin term.
pub fn assemble_global(mesh: &StructuredMesh, dofs: &DofMap, kappa: f64) -> FormParts {
    assemble_parts_with(
        mesh,
        mesh.active_cells(),
        dofs.len(),
        |v| dofs.dof(v),
        |_, _| true,
        kappa,
    )
}

/// Values of the `2^dim` local `Q1` basis functions and their reference
/// gradients at the points of a rule.
struct BasisTable {
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<[f64; 3]>>,
}

impl BasisTable {
    fn new(dim: usize, rule: &TensorRule) -> Self {
        let n = 1 << dim;
        let mut values = Vec::with_capacity(rule.len());
        let mut grads = Vec::with_capacity(rule.len());
        for p in &rule.points {
            let mut v = vec![0.0; n];
            let mut g = vec![[0.0; 3]; n];
            for k in 0..n {
                let f = |a: usize| if (k >> a) & 1 == 1 { p[a] } else { 1.0 - p[a] };
                let df = |a: usize| if (k >> a) & 1 == 1 { 1.0 } else { -1.0 };
                v[k] = (0..dim).map(f).product();
                for (a, ga) in g[k].iter_mut().enumerate().take(dim) {
                    *ga = (0..dim).map(|b| if b == a { df(b) } else { f(b) }).product();
                }
            }
            values.push(v);
            grads.push(g);
        }
        Self { values, grads }
    }
}

fn outward_normal(face: Face) -> [f64; 3] {
    let mut n = [0.0; 3];
    n[face.axis] = if face.side == 0 { -1.0 } else { 1.0 };
    n
}

/// Load vector `F_i = (f, φ_i) + (g, φ_i)_{Γ_R}` by tensor Gauss quadrature
/// with `order` points per axis on every cell and Robin facet.
pub fn assemble_load(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    data: &ProblemData,
    order: usize,
) -> Vec<Complex64> {
    let dim = mesh.dim();
    let nl = mesh.n_local();
    let h = mesh.spacing();
    let mut load = vec![Complex64::new(0.0, 0.0); dofs.len()];

    if let Some(f) = &data.source {
        let rule = TensorRule::new(dim, order);
        let table = BasisTable::new(dim, &rule);
        let vol: f64 = h[..dim].iter().product();
        let cells = mesh.active_cells();
        let locals: Vec<Vec<[Complex64; 8]>> = cells
            .par_chunks(CHUNK)
            .map(|block| {
                block
                    .iter()
                    .map(|&c| {
                        let o = mesh.cell_origin(c);
                        let mut loc = [Complex64::new(0.0, 0.0); 8];
                        for (q, p) in rule.points.iter().enumerate() {
                            let mut x = [0.0; 3];
                            for a in 0..dim {
                                x[a] = o[a] + p[a] * h[a];
                            }
                            let fx = f(&x) * (rule.weights[q] * vol);
                            for (k, lk) in loc.iter_mut().enumerate().take(nl) {
                                *lk += fx * table.values[q][k];
                            }
                        }
                        loc
                    })
                    .collect()
            })
            .collect();
        for (&c, loc) in cells.iter().zip(locals.iter().flatten()) {
            for (k, &v) in mesh.cell_vertices(c).as_slice().iter().enumerate() {
                if let Some(i) = dofs.dof(v) {
                    load[i] += loc[k];
                }
            }
        }
    }

    if let Some(g) = &data.robin {
        let frule = TensorRule::new(dim - 1, order);
        for bf in mesh.boundary_facets() {
            if bf.tag != BoundaryTag::Robin {
                continue;
            }
            let face = bf.face;
            let normal = outward_normal(face);
            let o = mesh.cell_origin(bf.cell);
            let tangential: Vec<usize> = (0..dim).filter(|&a| a != face.axis).collect();
            let area: f64 = tangential.iter().map(|&a| h[a]).product();
            let verts = mesh.cell_vertices(bf.cell);
            for (q, p) in frule.points.iter().enumerate() {
                let mut xi = [0.0; 3];
                xi[face.axis] = face.side as f64;
                for (t, &a) in tangential.iter().enumerate() {
                    xi[a] = p[t];
                }
                let mut x = [0.0; 3];
                for a in 0..dim {
                    x[a] = o[a] + xi[a] * h[a];
                }
                let gx = g(&x, &normal) * (frule.weights[q] * area);
                for (k, &v) in verts.as_slice().iter().enumerate() {
                    if (k >> face.axis) & 1 != face.side {
                        continue;
                    }
                    let phi: f64 = tangential
                        .iter()
                        .map(|&a| if (k >> a) & 1 == 1 { xi[a] } else { 1.0 - xi[a] })
                        .product();
                    if let Some(i) = dofs.dof(v) {
                        load[i] += gx * phi;
                    }
                }
            }
        }
    }
    load
}

/// Per-cell energy `κ²‖v‖² + ‖∇v‖²` of a discrete field, summed over `region`.
fn field_energy(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    field: &[Complex64],
    region: &[usize],
) -> f64 {
    let elem = mesh_element_matrices(mesh);
    let nl = mesh.n_local();
    let k2 = kappa * kappa;
    let partial: Vec<f64> = region
        .par_chunks(CHUNK)
        .map(|block| {
            let mut acc = 0.0;
            for &c in block {
                let mut loc = [Complex64::new(0.0, 0.0); 8];
                for (k, &v) in mesh.cell_vertices(c).as_slice().iter().enumerate() {
                    if let Some(i) = dofs.dof(v) {
                        loc[k] = field[i];
                    }
                }
                for k in 0..nl {
                    for l in 0..nl {
                        let w = elem.stiffness(k, l) + k2 * elem.mass(k, l);
                        acc += w * (loc[k].conj() * loc[l]).re;
                    }
                }
            }
            acc
        })
        .collect();
    partial.iter().sum()
}

/// `‖v‖_V` of a discrete field over the whole mesh.
pub fn v_norm(mesh: &StructuredMesh, dofs: &DofMap, kappa: f64, field: &[Complex64]) -> f64 {
    v_norm_region(mesh, dofs, kappa, field, mesh.active_cells())
}

/// `‖v‖_{V,ω}` over a union of active cells `ω`.
pub fn v_norm_region(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    field: &[Complex64],
    region: &[usize],
) -> f64 {
    assert_eq!(field.len(), dofs.len(), "field does not match the dof map");
    field_energy(mesh, dofs, kappa, field, region).max(0.0).sqrt()
}

/// Squared `L²` norm of the gradient of a discrete field over `region`.
pub fn gradient_norm_sq(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    field: &[Complex64],
    region: &[usize],
) -> f64 {
    field_energy(mesh, dofs, 0.0, field, region)
}

/// Squared `L²` norm of a discrete field over `region`.
pub fn l2_norm_sq(mesh: &StructuredMesh, dofs: &DofMap, field: &[Complex64], region: &[usize]) -> f64 {
    let elem = mesh_element_matrices(mesh);
    let nl = mesh.n_local();
    let mut acc = 0.0;
    for &c in region {
        let mut loc = [Complex64::new(0.0, 0.0); 8];
        for (k, &v) in mesh.cell_vertices(c).as_slice().iter().enumerate() {
            if let Some(i) = dofs.dof(v) {
                loc[k] = field[i];
            }
        }
        for k in 0..nl {
            for l in 0..nl {
                acc += elem.mass(k, l) * (loc[k].conj() * loc[l]).re;
            }
        }
    }
    acc
}

/// Discrete field whose error against an exact solution is measured on a fine mesh.
#[derive(Debug, Clone, Copy)]
pub enum FieldOn<'a> {
    Fine(&'a [Complex64]),
    /// Coarse coefficients and the coarse-to-fine prolongation matrix.
    Coarse {
        values: &'a [Complex64],
        prolongation: &'a RealCsr,
    },
}

/// `‖u − u_h‖_V` over the active cells of `fine`, by tensor Gauss
/// quadrature with `order` points per axis on every fine cell.
pub fn v_norm_error(
    fine: &StructuredMesh,
    fine_dofs: &DofMap,
    kappa: f64,
    exact: &ExactSolution,
    field: FieldOn<'_>,
    order: usize,
) -> Result<f64> {
    let gradient = exact.gradient.as_ref().ok_or(Error::MissingGradient)?;
    let prolonged;
    let values: &[Complex64] = match field {
        FieldOn::Fine(v) => v,
        FieldOn::Coarse {
            values,
            prolongation,
        } => {
            if prolongation.ncols() != values.len() {
                return Err(Error::DimensionMismatch(
                    "coarse field does not match the prolongation".into(),
                ));
            }
            prolonged = prolongation.matvec(values);
            &prolonged
        }
    };
    if values.len() != fine_dofs.len() {
        return Err(Error::DimensionMismatch(format!(
            "fine field has {} entries, dof map {}",
            values.len(),
            fine_dofs.len()
        )));
    }
    let dim = fine.dim();
    let nl = fine.n_local();
    let h = fine.spacing();
    let vol: f64 = h[..dim].iter().product();
    let rule = TensorRule::new(dim, order);
    let table = BasisTable::new(dim, &rule);
    let k2 = kappa * kappa;
    let partial: Vec<f64> = fine
        .active_cells()
        .par_chunks(CHUNK)
        .map(|block| {
            let mut acc = 0.0;
            for &c in block {
                let mut loc = [Complex64::new(0.0, 0.0); 8];
                for (k, &v) in fine.cell_vertices(c).as_slice().iter().enumerate() {
                    if let Some(i) = fine_dofs.dof(v) {
                        loc[k] = values[i];
                    }
                }
                let o = fine.cell_origin(c);
                for (q, p) in rule.points.iter().enumerate() {
                    let mut x = [0.0; 3];
                    for a in 0..dim {
                        x[a] = o[a] + p[a] * h[a];
                    }
                    let mut uh = Complex64::new(0.0, 0.0);
                    let mut guh = [Complex64::new(0.0, 0.0); 3];
                    for k in 0..nl {
                        uh += loc[k] * table.values[q][k];
                        for a in 0..dim {
                            guh[a] += loc[k] * (table.grads[q][k][a] / h[a]);
                        }
                    }
                    let u = (exact.value)(&x);
                    let gu = gradient(&x);
                    let mut e = k2 * (u - uh).norm_sqr();
                    for a in 0..dim {
                        e += (gu[a] - guh[a]).norm_sqr();
                    }
                    acc += e * rule.weights[q] * vol;
                }
            }
            acc
        })
        .collect();
    Ok(partial.iter().sum::<f64>().sqrt())
}

/// `(u, φ_i)_V = κ²(u, φ_i) + (∇u, ∇φ_i)` for every free vertex, by quadrature.
pub fn v_inner_products(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    kappa: f64,
    exact: &ExactSolution,
    order: usize,
) -> Result<Vec<Complex64>> {
    let gradient = exact.gradient.as_ref().ok_or(Error::MissingGradient)?;
    let dim = mesh.dim();
    let nl = mesh.n_local();
    let h = mesh.spacing();
    let vol: f64 = h[..dim].iter().product();
    let rule = TensorRule::new(dim, order);
    let table = BasisTable::new(dim, &rule);
    let k2 = kappa * kappa;
    let cells = mesh.active_cells();
    let locals: Vec<Vec<[Complex64; 8]>> = cells
        .par_chunks(CHUNK)
        .map(|block| {
            block
                .iter()
                .map(|&c| {
                    let o = mesh.cell_origin(c);
                    let mut loc = [Complex64::new(0.0, 0.0); 8];
                    for (q, p) in rule.points.iter().enumerate() {
                        let mut x = [0.0; 3];
                        for a in 0..dim {
                            x[a] = o[a] + p[a] * h[a];
                        }
                        let w = rule.weights[q] * vol;
                        let u = (exact.value)(&x);
                        let gu = gradient(&x);
                        for (k, lk) in loc.iter_mut().enumerate().take(nl) {
                            let mut v = u * (k2 * table.values[q][k]);
                            for a in 0..dim {
                                v += gu[a] * (table.grads[q][k][a] / h[a]);
                            }
                            *lk += v * w;
                        }
                    }
                    loc
                })
                .collect()
        })
        .collect();
    let mut out = vec![Complex64::new(0.0, 0.0); dofs.len()];
    for (&c, loc) in cells.iter().zip(locals.iter().flatten()) {
        for (k, &v) in mesh.cell_vertices(c).as_slice().iter().enumerate() {
            if let Some(i) = dofs.dof(v) {
                out[i] += loc[k];
            }
        }
    }
    Ok(out)
}

/// Nodal interpolant of a function on the free vertices.
pub fn nodal_interpolant(
    mesh: &StructuredMesh,
    dofs: &DofMap,
    f: impl Fn(&[f64; 3]) -> Complex64,
) -> Vec<Complex64> {
    dofs.free_nodes.iter().map(|&v| f(&mesh.vertex_point(v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_mesh, free_nodes, BoxDomain};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn element_matrices_1d_closed_form() {
        let h = 0.3;
        let e = element_matrices(&[h]).unwrap();
        assert!((e.stiffness(0, 0) - 1.0 / h).abs() < 1e-15);
        assert!((e.stiffness(0, 1) + 1.0 / h).abs() < 1e-15);
        assert!((e.mass(0, 0) - 2.0 * h / 6.0).abs() < 1e-15);
        assert!((e.mass(0, 1) - h / 6.0).abs() < 1e-15);
        assert_eq!(e.facet(Face { axis: 0, side: 1 }), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn element_matrices_2d_unit_square() {
        let e = element_matrices(&[1.0, 1.0]).unwrap();
        for k in 0..4 {
            assert!((e.stiffness(k, k) - 2.0 / 3.0).abs() < 1e-15);
        }
        // analytic oracle: ∫∫ ∇φ0·∇φ3 over the unit square = -1/3
        assert!((e.stiffness(0, 3) + 1.0 / 3.0).abs() < 1e-15);
        assert!((e.mass(0, 0) - 1.0 / 9.0).abs() < 1e-15);
        assert!((e.mass(0, 3) - 1.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn stiffness_rows_sum_to_zero() {
        for sides in [vec![0.5], vec![0.3, 0.7], vec![0.2, 0.4, 1.1]] {
            let e = element_matrices(&sides).unwrap();
            for k in 0..e.n() {
                let s: f64 = (0..e.n()).map(|l| e.stiffness(k, l)).sum();
                assert!(s.abs() < 1e-13);
            }
            let vol: f64 = sides.iter().product();
            assert!((e.mass.iter().sum::<f64>() - vol).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_cell_rejected() {
        assert!(element_matrices(&[1.0, 0.0]).is_err());
        assert!(element_matrices(&[]).is_err());
    }

    #[test]
    fn robin_free_kappa_zero_is_pure_stiffness() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[4, 4]).unwrap();
        let dofs = free_nodes(&mesh);
        let parts = assemble_form(&mesh, &dofs, 0.0, mesh.active_cells(), false).unwrap();
        assert_eq!(parts.boundary.nnz(), 0);
        let a = parts.system_matrix();
        let ones = vec![c(1.0); dofs.len()];
        assert!(a.matvec(&ones).iter().all(|v| v.norm() < 1e-13));
    }

    #[test]
    fn single_interior_cell_has_no_boundary_term() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[4, 4]).unwrap();
        let dofs = free_nodes(&mesh);
        let t = mesh.cell_index([1, 1, 0]);
        let parts = assemble_form(&mesh, &dofs, 3.0, &[t], true).unwrap();
        assert_eq!(parts.boundary.nnz(), 0);
        let corner = assemble_form(&mesh, &dofs, 3.0, &[0], true).unwrap();
        assert!(corner.boundary.nnz() > 0);
    }

    #[test]
    fn inactive_region_rejected() {
        let d = BoxDomain::unit(2).with_hole(&[0.25, 0.25], &[0.5, 0.5]).unwrap();
        let mesh = build_mesh(&d, &[4, 4]).unwrap();
        let dofs = free_nodes(&mesh);
        let hole_cell = mesh.cell_index([1, 1, 0]);
        assert!(matches!(
            assemble_form(&mesh, &dofs, 1.0, &[hole_cell], true),
            Err(Error::InactiveCell(_))
        ));
    }

    #[test]
    fn load_partition_of_unity() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[8, 8]).unwrap();
        let dofs = free_nodes(&mesh);
        let volume = ProblemData {
            source: Some(Arc::new(|_| Complex64::new(1.0, 0.0))),
            ..Default::default()
        };
        let f = assemble_load(&mesh, &dofs, &volume, 5);
        assert!((f.iter().sum::<Complex64>() - c(1.0)).norm() < 1e-13);

        let boundary = ProblemData {
            robin: Some(Arc::new(|_, _| Complex64::new(1.0, 0.0))),
            ..Default::default()
        };
        let g = assemble_load(&mesh, &dofs, &boundary, 5);
        assert!((g.iter().sum::<Complex64>() - c(4.0)).norm() < 1e-13);
    }

    #[test]
    fn v_norm_of_constant() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap();
        let dofs = free_nodes(&mesh);
        let ones = vec![c(1.0); dofs.len()];
        assert!((v_norm(&mesh, &dofs, 2.0, &ones) - 2.0).abs() < 1e-13);
        let parts = assemble_global(&mesh, &dofs, 2.0);
        assert!((parts.v_norm(&ones) - 2.0).abs() < 1e-13);
        let zero = vec![c(0.0); dofs.len()];
        assert_eq!(v_norm(&mesh, &dofs, 2.0, &zero), 0.0);
    }

    #[test]
    fn v_norm_of_sine_interpolant_converges() {
        // ‖sin(πx)‖_V² = 1/2 + π²/2 for κ = 1 on (0,1)
        let exact = (0.5 + std::f64::consts::PI.powi(2) / 2.0).sqrt();
        let mut errs = Vec::new();
        for n in [16, 32, 64, 128] {
            let mesh = build_mesh(&BoxDomain::unit(1), &[n]).unwrap();
            let dofs = free_nodes(&mesh);
            let v = nodal_interpolant(&mesh, &dofs, |x| c((std::f64::consts::PI * x[0]).sin()));
            errs.push((v_norm(&mesh, &dofs, 1.0, &v) - exact).abs());
        }
        assert!(errs[3] < 1e-3);
        for w in errs.windows(2) {
            assert!(w[1] < 0.3 * w[0]);
        }
    }

    #[test]
    fn error_of_constant_is_zero() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[4, 4]).unwrap();
        let dofs = free_nodes(&mesh);
        let exact = ExactSolution {
            value: Arc::new(|_| Complex64::new(2.0, -1.0)),
            gradient: Some(Arc::new(|_| [Complex64::new(0.0, 0.0); 3])),
        };
        let field = vec![Complex64::new(2.0, -1.0); dofs.len()];
        let e = v_norm_error(&mesh, &dofs, 5.0, &exact, FieldOn::Fine(&field), 5).unwrap();
        assert!(e < 1e-12);
        let no_grad = ExactSolution {
            value: exact.value.clone(),
            gradient: None,
        };
        assert!(matches!(
            v_norm_error(&mesh, &dofs, 5.0, &no_grad, FieldOn::Fine(&field), 5),
            Err(Error::MissingGradient)
        ));
    }
}
