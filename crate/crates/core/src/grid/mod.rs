//! Structured tensor-product grids over boxes with rectangular holes.
//!
//! Cells, vertices and facets are numbered lexicographically with the
//! x index running fastest. Unused axes (for `dim < 3`) carry a single
//! cell layer and a single vertex layer, so every index is a 3-vector
//! internally.

mod classify;
mod export;

pub use classify::{classify_patches, patch_description, patch_signature, PatchClass, PatchClasses, PatchDescription, PatchSignature};
pub use export::{write_text, write_vtk};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when snapping hole faces to grid planes.
const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Dirichlet,
    Robin,
}

/// Closed axis-aligned box; only the first `dim` components are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl AxisBox {
    pub fn new(lower: &[f64], upper: &[f64]) -> Self {
        let mut b = AxisBox {
            lower: [0.0; 3],
            upper: [1.0; 3],
        };
        b.lower[..lower.len()].copy_from_slice(lower);
        b.upper[..upper.len()].copy_from_slice(upper);
        b
    }

    fn contains_box(&self, other: &AxisBox, dim: usize) -> bool {
        (0..dim).all(|a| other.lower[a] >= self.lower[a] && other.upper[a] <= self.upper[a])
    }

    fn intersects_closed(&self, other: &AxisBox, dim: usize) -> bool {
        (0..dim).all(|a| self.lower[a] <= other.upper[a] && other.lower[a] <= self.upper[a])
    }

    fn contains_point(&self, p: &[f64; 3], dim: usize) -> bool {
        (0..dim).all(|a| p[a] >= self.lower[a] && p[a] <= self.upper[a])
    }
}

/// A box `Ω₀ ⊂ R^dim` minus a list of closed boxes (sound-soft scatterers).
///
/// Hole boundaries are always Dirichlet; each outer face carries its own tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub dim: usize,
    pub extent: AxisBox,
    pub holes: Vec<AxisBox>,
    /// `outer[axis][side]`, side 0 = low face, 1 = high face.
    pub outer: [[BoundaryTag; 2]; 3],
}

impl BoxDomain {
    pub fn new(dim: usize, lower: &[f64], upper: &[f64]) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidDomain(format!("dimension {dim} not in 1..=3")));
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(Error::InvalidDomain("extent does not match dimension".into()));
        }
        if (0..dim).any(|a| !(upper[a] > lower[a])) {
            return Err(Error::InvalidDomain("empty extent".into()));
        }
        Ok(Self {
            dim,
            extent: AxisBox::new(lower, upper),
            holes: Vec::new(),
            outer: [[BoundaryTag::Robin; 2]; 3],
        })
    }

    /// `(0,1)^dim` with pure Robin boundary.
    pub fn unit(dim: usize) -> Self {
        Self::new(dim, &vec![0.0; dim], &vec![1.0; dim]).expect("unit box is valid")
    }

    pub fn with_outer_tag(mut self, axis: usize, side: usize, tag: BoundaryTag) -> Self {
        self.outer[axis][side] = tag;
        self
    }

    pub fn with_all_outer(mut self, tag: BoundaryTag) -> Self {
        self.outer = [[tag; 2]; 3];
        self
    }

    pub fn with_hole(mut self, lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != self.dim || upper.len() != self.dim {
            return Err(Error::InvalidDomain("hole does not match dimension".into()));
        }
        let hole = AxisBox::new(lower, upper);
        let idx = self.holes.len();
        if (0..self.dim).any(|a| !(hole.upper[a] > hole.lower[a])) {
            return Err(Error::InvalidDomain(format!("hole {idx} is empty")));
        }
        if !self.extent.contains_box(&hole, self.dim) {
            return Err(Error::InvalidDomain(format!("hole {idx} leaves the extent")));
        }
        if let Some(k) = self.holes.iter().position(|h| h.intersects_closed(&hole, self.dim)) {
            return Err(Error::InvalidDomain(format!("holes {k} and {idx} intersect")));
        }
        self.holes.push(hole);
        Ok(self)
    }

    /// True when the outer boundary is purely Robin and there are no holes.
    pub fn is_pure_robin(&self) -> bool {
        self.holes.is_empty()
            && (0..self.dim).all(|a| self.outer[a].iter().all(|&t| t == BoundaryTag::Robin))
    }

    /// Stable 64-bit fingerprint of the domain description (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("domain serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Position of a facet on its cell: normal axis and low/high side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Face {
    pub axis: usize,
    pub side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundaryFacet {
    pub cell: usize,
    pub face: Face,
    pub tag: BoundaryTag,
}

/// Uniform tensor grid over a [`BoxDomain`]; cells inside holes are inactive.
#[derive(Debug, Clone)]
pub struct StructuredMesh {
    domain: BoxDomain,
    dim: usize,
    /// Number of uniform refinements relative to the mesh it was built from.
    level: usize,
    cells: [usize; 3],
    spacing: [f64; 3],
    active: Vec<bool>,
    active_cells: Vec<usize>,
    vertex_active: Vec<bool>,
    dirichlet_vertex: Vec<bool>,
    boundary_facets: Vec<BoundaryFacet>,
    diameter: f64,
}

/// Builds the coarse grid with `n_per_axis` cells along each axis.
pub fn build_mesh(domain: &BoxDomain, n_per_axis: &[usize]) -> Result<StructuredMesh> {
    StructuredMesh::new(domain, n_per_axis, 0)
}

impl StructuredMesh {
    fn new(domain: &BoxDomain, n_per_axis: &[usize], level: usize) -> Result<Self> {
        let dim = domain.dim;
        if n_per_axis.len() != dim {
            return Err(Error::InvalidDomain(format!(
                "expected {dim} cell counts, got {}",
                n_per_axis.len()
            )));
        }
        if n_per_axis.iter().any(|&n| n == 0) {
            return Err(Error::InvalidDomain("cell count must be at least 1".into()));
        }
        let mut cells = [1usize; 3];
        let mut spacing = [1.0; 3];
        for a in 0..dim {
            cells[a] = n_per_axis[a];
            spacing[a] = (domain.extent.upper[a] - domain.extent.lower[a]) / cells[a] as f64;
        }

        // hole faces must lie on grid planes
        let mut hole_ranges = Vec::with_capacity(domain.holes.len());
        for (k, hole) in domain.holes.iter().enumerate() {
            let mut range = [(0usize, 1usize); 3];
            for a in 0..dim {
                let snap = |x: f64| -> Option<usize> {
                    let t = (x - domain.extent.lower[a]) / spacing[a];
                    let r = t.round();
                    ((t - r).abs() <= ALIGN_TOL * cells[a].max(1) as f64).then_some(r as usize)
                };
                match (snap(hole.lower[a]), snap(hole.upper[a])) {
                    (Some(lo), Some(hi)) => range[a] = (lo, hi),
                    _ => return Err(Error::MisalignedHole { hole: k, axis: a }),
                }
            }
            hole_ranges.push(range);
        }

        let n_cells = cells[0] * cells[1] * cells[2];
        let mut active = vec![true; n_cells];
        for range in &hole_ranges {
            for k in range[2].0..range[2].1 {
                for j in range[1].0..range[1].1 {
                    for i in range[0].0..range[0].1 {
                        active[i + cells[0] * (j + cells[1] * k)] = false;
                    }
                }
            }
        }
        let active_cells: Vec<usize> = (0..n_cells).filter(|&c| active[c]).collect();

        let diameter = (0..dim).map(|a| spacing[a] * spacing[a]).sum::<f64>().sqrt();
        let mut mesh = StructuredMesh {
            domain: domain.clone(),
            dim,
            level,
            cells,
            spacing,
            active,
            active_cells,
            vertex_active: Vec::new(),
            dirichlet_vertex: Vec::new(),
            boundary_facets: Vec::new(),
            diameter,
        };

        let n_vertices = mesh.n_vertices();
        let mut vertex_active = vec![false; n_vertices];
        let mut dirichlet_vertex = vec![false; n_vertices];
        let mut boundary_facets = Vec::new();
        for &c in &mesh.active_cells {
            for &v in mesh.cell_vertices(c).as_slice() {
                vertex_active[v] = true;
            }
            for axis in 0..dim {
                for side in 0..2 {
                    if let Some(tag) = mesh.facet_tag(c, Face { axis, side }) {
                        boundary_facets.push(BoundaryFacet {
                            cell: c,
                            face: Face { axis, side },
                            tag,
                        });
                        if tag == BoundaryTag::Dirichlet {
                            for v in mesh.facet_vertices(c, Face { axis, side }) {
                                dirichlet_vertex[v] = true;
                            }
                        }
                    }
                }
            }
        }
        mesh.vertex_active = vertex_active;
        mesh.dirichlet_vertex = dirichlet_vertex;
        mesh.boundary_facets = boundary_facets;
        Ok(mesh)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Cells per axis (1 on unused axes).
    pub fn cells_per_axis(&self) -> [usize; 3] {
        self.cells
    }

    pub fn vertices_per_axis(&self) -> [usize; 3] {
        let mut v = [1usize; 3];
        for a in 0..self.dim {
            v[a] = self.cells[a] + 1;
        }
        v
    }

    /// Cell side lengths.
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Mesh size `H`, the maximal cell diameter.
    pub fn mesh_size(&self) -> f64 {
        self.diameter
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1] * self.cells[2]
    }

    pub fn n_vertices(&self) -> usize {
        let v = self.vertices_per_axis();
        v[0] * v[1] * v[2]
    }

    /// Number of vertices per cell, `2^dim`.
    pub fn n_local(&self) -> usize {
        1 << self.dim
    }

    pub fn is_active(&self, cell: usize) -> bool {
        self.active[cell]
    }

    pub fn active_cells(&self) -> &[usize] {
        &self.active_cells
    }

    pub fn boundary_facets(&self) -> &[BoundaryFacet] {
        &self.boundary_facets
    }

    /// Vertices touched by at least one active cell.
    pub fn is_mesh_vertex(&self, v: usize) -> bool {
        self.vertex_active[v]
    }

    /// Vertex lies on the closed Dirichlet boundary.
    pub fn is_dirichlet_vertex(&self, v: usize) -> bool {
        self.dirichlet_vertex[v]
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let [nx, ny, _] = self.cells;
        [cell % nx, (cell / nx) % ny, cell / (nx * ny)]
    }

    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.cells[0] * (c[1] + self.cells[1] * c[2])
    }

    /// Cell index for signed coordinates, `None` outside the grid.
    pub fn cell_at(&self, c: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.cells[a] as i64 {
                return None;
            }
        }
        Some(self.cell_index([c[0] as usize, c[1] as usize, c[2] as usize]))
    }

    pub fn vertex_coords(&self, v: usize) -> [usize; 3] {
        let [vx, vy, _] = self.vertices_per_axis();
        [v % vx, (v / vx) % vy, v / (vx * vy)]
    }

    pub fn vertex_index(&self, c: [usize; 3]) -> usize {
        let [vx, vy, _] = self.vertices_per_axis();
        c[0] + vx * (c[1] + vy * c[2])
    }

    pub fn vertex_point(&self, v: usize) -> [f64; 3] {
        let c = self.vertex_coords(v);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.domain.extent.lower[a] + c[a] as f64 * self.spacing[a];
        }
        p
    }

    /// Lower corner of a cell.
    pub fn cell_origin(&self, cell: usize) -> [f64; 3] {
        let c = self.cell_coords(cell);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.domain.extent.lower[a] + c[a] as f64 * self.spacing[a];
        }
        p
    }

    /// Vertices of a cell; local vertex `k` sits at offset bit `a` of `k` along axis `a`.
    pub fn cell_vertices(&self, cell: usize) -> LocalVertices {
        let c = self.cell_coords(cell);
        let mut out = LocalVertices {
            ids: [0; 8],
            len: self.n_local(),
        };
        for k in 0..out.len {
            let mut vc = c;
            for (a, coord) in vc.iter_mut().enumerate().take(self.dim) {
                *coord += (k >> a) & 1;
            }
            out.ids[k] = self.vertex_index(vc);
        }
        out
    }

    /// Vertices on one facet of a cell.
    pub fn facet_vertices(&self, cell: usize, face: Face) -> impl Iterator<Item = usize> + '_ {
        let verts = self.cell_vertices(cell);
        (0..self.n_local())
            .filter(move |k| (k >> face.axis) & 1 == face.side)
            .map(move |k| verts.ids[k])
    }

    /// Neighbouring cell across a facet, `None` outside the grid.
    pub fn neighbor(&self, cell: usize, face: Face) -> Option<usize> {
        let c = self.cell_coords(cell);
        let mut n = [c[0] as i64, c[1] as i64, c[2] as i64];
        n[face.axis] += if face.side == 0 { -1 } else { 1 };
        self.cell_at(n)
    }

    /// Boundary tag of a facet of an active cell, `None` for interior facets.
    pub fn facet_tag(&self, cell: usize, face: Face) -> Option<BoundaryTag> {
        match self.neighbor(cell, face) {
            None => Some(self.domain.outer[face.axis][face.side]),
            Some(n) if !self.active[n] => Some(BoundaryTag::Dirichlet),
            Some(_) => None,
        }
    }

    /// Active cells containing a vertex.
    pub fn cells_around_vertex(&self, v: usize) -> Vec<usize> {
        let vc = self.vertex_coords(v);
        let mut out = Vec::with_capacity(self.n_local());
        for k in 0..self.n_local() {
            let mut c = [vc[0] as i64, vc[1] as i64, vc[2] as i64];
            for (a, coord) in c.iter_mut().enumerate().take(self.dim) {
                *coord -= ((k >> a) & 1) as i64;
            }
            if let Some(cell) = self.cell_at(c) {
                if self.active[cell] {
                    out.push(cell);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Local index of vertex `v` within `cell`, if it is one of its corners.
    pub fn local_vertex(&self, cell: usize, v: usize) -> Option<usize> {
        self.cell_vertices(cell).as_slice().iter().position(|&w| w == v)
    }

    /// True if a point lies inside one of the holes (closed).
    pub fn in_hole(&self, p: &[f64; 3]) -> bool {
        self.domain.holes.iter().any(|h| h.contains_point(p, self.dim))
    }
}

/// Corner vertex ids of a cell (`2^dim` of them).
#[derive(Debug, Clone, Copy)]
pub struct LocalVertices {
    ids: [usize; 8],
    len: usize,
}

impl LocalVertices {
    pub fn as_slice(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// Fine mesh of a uniform refinement together with its parent map.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub fine: StructuredMesh,
    pub levels: usize,
    /// Coarse parent of every fine cell (total over all fine cells).
    pub parent: Vec<usize>,
}

impl Refinement {
    /// Fine cells per coarse cell per axis, `2^levels`.
    pub fn ratio(&self) -> usize {
        1 << self.levels
    }

    /// Active fine cells inside a coarse cell.
    pub fn children(&self, coarse: &StructuredMesh, cell: usize) -> Vec<usize> {
        let r = self.ratio();
        let c = coarse.cell_coords(cell);
        let dim = coarse.dim();
        let mut out = Vec::with_capacity(r.pow(dim as u32));
        let ext = |a: usize| if a < dim { r } else { 1 };
        for k in 0..ext(2) {
            for j in 0..ext(1) {
                for i in 0..ext(0) {
                    let f = [
                        c[0] * ext(0) + i,
                        c[1] * ext(1) + j,
                        c[2] * ext(2) + k,
                    ];
                    let id = self.fine.cell_index(f);
                    if self.fine.is_active(id) {
                        out.push(id);
                    }
                }
            }
        }
        out
    }
}

/// Uniform refinement: every active cell splits into `2^(levels·dim)` children.
pub fn refine_uniform(mesh: &StructuredMesh, levels: usize) -> Result<Refinement> {
    let r = 1usize << levels;
    let dim = mesh.dim();
    let n: Vec<usize> = (0..dim).map(|a| mesh.cells[a] * r).collect();
    let fine = StructuredMesh::new(&mesh.domain, &n, mesh.level + levels)?;
    let parent = (0..fine.n_cells())
        .map(|f| {
            let c = fine.cell_coords(f);
            let mut p = [0usize; 3];
            for a in 0..3 {
                p[a] = if a < dim { c[a] / r } else { 0 };
            }
            mesh.cell_index(p)
        })
        .collect();
    Ok(Refinement {
        fine,
        levels,
        parent,
    })
}

/// Numbering of the free vertices (mesh vertices off the closed Dirichlet boundary).
#[derive(Debug, Clone)]
pub struct DofMap {
    pub free_nodes: Vec<usize>,
    pub node_index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn len(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free_nodes.is_empty()
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.node_index[vertex]
    }
}

pub fn free_nodes(mesh: &StructuredMesh) -> DofMap {
    let mut node_index = vec![None; mesh.n_vertices()];
    let mut free = Vec::new();
    for (v, slot) in node_index.iter_mut().enumerate() {
        if mesh.is_mesh_vertex(v) && !mesh.is_dirichlet_vertex(v) {
            *slot = Some(free.len());
            free.push(v);
        }
    }
    DofMap {
        free_nodes: free,
        node_index,
    }
}

/// The `m`-th order patch `N^m(T)`: active cells reachable by `m` steps of
/// vertex adjacency, returned sorted.
pub fn patch(mesh: &StructuredMesh, cell: usize, m: usize) -> Vec<usize> {
    let window = PatchWindow::new(mesh, cell, m);
    let mut out: Vec<usize> = window.cells().collect();
    out.sort_unstable();
    out
}

/// Dense membership mask of `N^m(T)` on the `(2m+1)^dim` box around `T`.
pub(crate) struct PatchWindow<'a> {
    mesh: &'a StructuredMesh,
    pub(crate) center: [i64; 3],
    side: [i64; 3],
    pub(crate) inside: Vec<bool>,
}

impl<'a> PatchWindow<'a> {
    pub(crate) fn new(mesh: &'a StructuredMesh, cell: usize, m: usize) -> Self {
        let dim = mesh.dim();
        let c = mesh.cell_coords(cell);
        let center = [c[0] as i64, c[1] as i64, c[2] as i64];
        let radius = m as i64;
        let mut side = [1i64; 3];
        for s in side.iter_mut().take(dim) {
            *s = 2 * radius + 1;
        }
        let mut w = PatchWindow {
            mesh,
            center,
            side,
            inside: vec![false; (side[0] * side[1] * side[2]) as usize],
        };
        let origin = w.slot([0, 0, 0]).expect("center in window");
        w.inside[origin] = true;
        let mut frontier = vec![[0i64; 3]];
        for _ in 0..m {
            let mut next = Vec::new();
            for rel in &frontier {
                for off in neighbor_offsets(dim) {
                    let r = [rel[0] + off[0], rel[1] + off[1], rel[2] + off[2]];
                    let Some(slot) = w.slot(r) else { continue };
                    if w.inside[slot] {
                        continue;
                    }
                    if let Some(g) = w.global(r) {
                        if mesh.is_active(g) {
                            w.inside[slot] = true;
                            next.push(r);
                        }
                    }
                }
            }
            frontier.extend(next);
        }
        w
    }

    fn slot(&self, rel: [i64; 3]) -> Option<usize> {
        let mut idx = 0i64;
        let mut stride = 1i64;
        for a in 0..3 {
            let half = (self.side[a] - 1) / 2;
            let x = rel[a] + half;
            if x < 0 || x >= self.side[a] {
                return None;
            }
            idx += x * stride;
            stride *= self.side[a];
        }
        Some(idx as usize)
    }

    fn global(&self, rel: [i64; 3]) -> Option<usize> {
        self.mesh.cell_at([
            self.center[0] + rel[0],
            self.center[1] + rel[1],
            self.center[2] + rel[2],
        ])
    }

    /// Relative offsets of the patch cells, in window order.
    pub(crate) fn rel_cells(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        let side = self.side;
        self.inside.iter().enumerate().filter(|(_, &b)| b).map(move |(s, _)| {
            let s = s as i64;
            let x = s % side[0];
            let y = (s / side[0]) % side[1];
            let z = s / (side[0] * side[1]);
            [
                x - (side[0] - 1) / 2,
                y - (side[1] - 1) / 2,
                z - (side[2] - 1) / 2,
            ]
        })
    }

    pub(crate) fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.rel_cells().map(|r| self.global(r).expect("patch cell in grid"))
    }
}

/// All offsets in `{-1,0,1}^dim` (including zero), padded to 3D.
pub(crate) fn neighbor_offsets(dim: usize) -> impl Iterator<Item = [i64; 3]> {
    let n = 3usize.pow(dim as u32);
    (0..n).map(move |k| {
        let mut off = [0i64; 3];
        let mut r = k;
        for o in off.iter_mut().take(dim) {
            *o = (r % 3) as i64 - 1;
            r /= 3;
        }
        off
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scatterer_domain() -> BoxDomain {
        BoxDomain::unit(2)
            .with_hole(&[5.0 / 16.0, 5.0 / 16.0], &[7.0 / 16.0, 7.0 / 16.0])
            .unwrap()
            .with_hole(&[10.0 / 16.0, 8.0 / 16.0], &[12.0 / 16.0, 10.0 / 16.0])
            .unwrap()
            .with_hole(&[4.0 / 16.0, 10.0 / 16.0], &[6.0 / 16.0, 13.0 / 16.0])
            .unwrap()
    }

    #[test]
    fn unit_square_counts() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap();
        assert_eq!(mesh.active_cells().len(), 256);
        assert_eq!(mesh.boundary_facets().len(), 64);
        assert!(mesh.boundary_facets().iter().all(|f| f.tag == BoundaryTag::Robin));
        assert!((mesh.mesh_size() - 2f64.sqrt() / 16.0).abs() < 1e-15);
    }

    #[test]
    fn unit_cube_counts() {
        let mesh = build_mesh(&BoxDomain::unit(3), &[4, 4, 4]).unwrap();
        assert_eq!(mesh.active_cells().len(), 64);
        assert_eq!(mesh.boundary_facets().len(), 96);
    }

    #[test]
    fn scatterer_mesh_counts() {
        let mesh = build_mesh(&scatterer_domain(), &[16, 16]).unwrap();
        assert_eq!(mesh.active_cells().len(), 242);
        let dirichlet = mesh
            .boundary_facets()
            .iter()
            .filter(|f| f.tag == BoundaryTag::Dirichlet)
            .count();
        // perimeters in coarse edges: 8 + 8 + 10
        assert_eq!(dirichlet, 26);
    }

    #[test]
    fn misaligned_hole_is_reported() {
        let d = BoxDomain::unit(2).with_hole(&[0.25, 0.3], &[0.5, 0.5]).unwrap();
        match build_mesh(&d, &[4, 4]) {
            Err(Error::MisalignedHole { hole: 0, axis: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_mesh(&d, &[4, 10]).is_ok());
    }

    #[test]
    fn invalid_holes_rejected() {
        assert!(BoxDomain::unit(2).with_hole(&[0.5, 0.5], &[1.5, 0.7]).is_err());
        let d = BoxDomain::unit(2).with_hole(&[0.25, 0.25], &[0.5, 0.5]).unwrap();
        assert!(d.with_hole(&[0.5, 0.5], &[0.75, 0.75]).is_err());
        assert!(BoxDomain::new(4, &[0.0; 4], &[1.0; 4]).is_err());
    }

    #[test]
    fn refinement_counts_and_parents() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap();
        let r = refine_uniform(&mesh, 3).unwrap();
        assert_eq!(r.fine.cells_per_axis()[..2], [128, 128]);
        assert_eq!(r.fine.active_cells().len(), 16384);

        let same = refine_uniform(&mesh, 0).unwrap();
        assert_eq!(same.fine.active_cells(), mesh.active_cells());
        assert!(same.parent.iter().enumerate().all(|(f, &p)| f == p));
    }

    #[test]
    fn refined_scatterer_mesh_parent_counts() {
        let mesh = build_mesh(&scatterer_domain(), &[16, 16]).unwrap();
        let r = refine_uniform(&mesh, 1).unwrap();
        // oracle: count active fine cells by their parent
        let mut per_parent = vec![0usize; mesh.n_cells()];
        for &f in r.fine.active_cells() {
            per_parent[r.parent[f]] += 1;
        }
        for c in 0..mesh.n_cells() {
            let expected = if mesh.is_active(c) { 4 } else { 0 };
            assert_eq!(per_parent[c], expected);
        }
        assert_eq!(r.fine.active_cells().len(), 968);
    }

    #[test]
    fn free_node_counts() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap();
        assert_eq!(free_nodes(&mesh).len(), 289);

        let d = BoxDomain::unit(1).with_outer_tag(0, 0, BoundaryTag::Dirichlet);
        let mesh = build_mesh(&d, &[8]).unwrap();
        let dofs = free_nodes(&mesh);
        assert_eq!(dofs.len(), 8);
        assert_eq!(dofs.dof(0), None);
    }

    #[test]
    fn scatterer_free_nodes_match_vertex_set_arithmetic() {
        let mesh = build_mesh(&scatterer_domain(), &[16, 16]).unwrap();
        // oracle: vertices of active cells minus vertices on hole boundaries,
        // counted from the hole geometry directly
        let mut used = std::collections::BTreeSet::new();
        for &c in mesh.active_cells() {
            used.extend(mesh.cell_vertices(c).as_slice().iter().copied());
        }
        let holes = [((5, 5), (7, 7)), ((10, 8), (12, 10)), ((4, 10), (6, 13))];
        let mut on_hole = std::collections::BTreeSet::new();
        for ((x0, y0), (x1, y1)) in holes {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if x == x0 || x == x1 || y == y0 || y == y1 {
                        on_hole.insert(mesh.vertex_index([x, y, 0]));
                    }
                }
            }
        }
        let expected = used.difference(&on_hole).count();
        assert_eq!(free_nodes(&mesh).len(), expected);
        // 289 vertices minus interior hole vertices (1 + 1 + 2) minus hole
        // boundary vertices (8 + 8 + 10)
        assert_eq!(expected, 289 - 4 - 26);
    }

    #[test]
    fn patch_sizes() {
        let mesh = build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap();
        let interior = mesh.cell_index([8, 8, 0]);
        assert_eq!(patch(&mesh, interior, 1).len(), 9);
        assert_eq!(patch(&mesh, interior, 2).len(), 25);
        assert_eq!(patch(&mesh, 0, 1).len(), 4);

        let cube = build_mesh(&BoxDomain::unit(3), &[8, 8, 8]).unwrap();
        assert_eq!(patch(&cube, cube.cell_index([4, 4, 4]), 2).len(), 125);
    }

    #[test]
    fn patch_blocked_by_hole() {
        // hole occupying cell (1,1) of a 4x4 grid: the path from (2,2)
        // towards (0,0) through the hole is cut
        let d = BoxDomain::unit(2).with_hole(&[0.25, 0.25], &[0.5, 0.5]).unwrap();
        let mesh = build_mesh(&d, &[4, 4]).unwrap();
        let t = mesh.cell_index([2, 2, 0]);
        let p1 = patch(&mesh, t, 1);
        assert_eq!(p1.len(), 8);
        assert!(!p1.contains(&mesh.cell_index([1, 1, 0])));
        let p2 = patch(&mesh, t, 2);
        assert!(p2.contains(&mesh.cell_index([0, 1, 0])));
        assert!(p2.contains(&mesh.cell_index([1, 0, 0])));
        assert!(!p2.contains(&mesh.cell_index([0, 0, 0])));
        assert_eq!(p2.len(), 14);
    }
}
