//! Grouping of cells whose `m`-th order patches are translates of each other.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{BoundaryTag, Face, PatchWindow, StructuredMesh};

const ACTIVE: u8 = 0;
const HOLE: u8 = 1;
const OUTSIDE_GRID: u8 = 2;

/// Translation-invariant description of a patch configuration.
///
/// `mask` records, for every cell of the `(2m+3)^dim` box around the cell,
/// whether it is active, a hole cell or outside the grid. The box covers
/// the patch plus one layer, so it fixes the patch geometry, the boundary
/// tags on every patch facet and the Dirichlet status and neighbour count
/// of every patch vertex.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchSignature {
    pub m: usize,
    /// Per axis: patch layers cut off by the outer boundary (low, high).
    pub clip_offsets: [[u8; 2]; 3],
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct PatchClass {
    pub signature: PatchSignature,
    /// Smallest member cell index.
    pub representative: usize,
    /// Sorted member cells.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PatchClasses {
    pub m: usize,
    pub classes: Vec<PatchClass>,
    /// Class id of each cell (`None` for inactive cells).
    pub class_of: Vec<Option<usize>>,
}

impl PatchClasses {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.classes.iter().map(|c| c.members.len()).sum()
    }
}

pub fn patch_signature(mesh: &StructuredMesh, cell: usize, m: usize) -> PatchSignature {
    let mut mask = Vec::new();
    fill_mask(mesh, cell, m, &mut mask);
    PatchSignature {
        m,
        clip_offsets: clip_offsets(mesh, cell, m),
        mask,
    }
}

fn clip_offsets(mesh: &StructuredMesh, cell: usize, m: usize) -> [[u8; 2]; 3] {
    let c = mesh.cell_coords(cell);
    let n = mesh.cells_per_axis();
    let mut clip = [[0u8; 2]; 3];
    for a in 0..mesh.dim() {
        clip[a][0] = m.saturating_sub(c[a]) as u8;
        clip[a][1] = m.saturating_sub(n[a] - 1 - c[a]) as u8;
    }
    clip
}

fn fill_mask(mesh: &StructuredMesh, cell: usize, m: usize, mask: &mut Vec<u8>) {
    let dim = mesh.dim();
    let r = m as i64 + 1;
    let side = 2 * r + 1;
    let c = mesh.cell_coords(cell);
    mask.clear();
    let ext = |a: usize| if a < dim { side } else { 1 };
    let off = |a: usize| if a < dim { r } else { 0 };
    for z in 0..ext(2) {
        for y in 0..ext(1) {
            for x in 0..ext(0) {
                let g = [
                    c[0] as i64 + x - off(0),
                    c[1] as i64 + y - off(1),
                    c[2] as i64 + z - off(2),
                ];
                mask.push(match mesh.cell_at(g) {
                    None => OUTSIDE_GRID,
                    Some(id) if mesh.is_active(id) => ACTIVE,
                    Some(_) => HOLE,
                });
            }
        }
    }
}

/// Partitions the active cells into patch configuration classes.
///
/// Classes are ordered by their representative (smallest member).
pub fn classify_patches(mesh: &StructuredMesh, m: usize) -> PatchClasses {
    let cells = mesh.active_cells();
    let blocked = BlockedCounts::new(mesh);
    let reach = m + 1;
    let chunk = 4096;
    let partial: Vec<(HashMap<PatchSignature, Vec<usize>>, Vec<usize>)> = cells
        .par_chunks(chunk)
        .map(|block| {
            let mut local: HashMap<PatchSignature, Vec<usize>> = HashMap::new();
            let mut interior = Vec::new();
            let mut mask = Vec::new();
            for &cell in block {
                if blocked.window_is_clear(mesh.cell_coords(cell), reach) {
                    interior.push(cell);
                    continue;
                }
                fill_mask(mesh, cell, m, &mut mask);
                let sig = PatchSignature {
                    m,
                    clip_offsets: clip_offsets(mesh, cell, m),
                    mask: mask.clone(),
                };
                local.entry(sig).or_default().push(cell);
            }
            (local, interior)
        })
        .collect();

    let mut merged: HashMap<PatchSignature, Vec<usize>> = HashMap::new();
    for (part, interior) in partial {
        if let Some(&first) = interior.first() {
            // every clear window yields the same signature
            merged
                .entry(patch_signature(mesh, first, m))
                .or_default()
                .extend(interior);
        }
        for (sig, members) in part {
            merged.entry(sig).or_default().extend(members);
        }
    }
    let mut classes: Vec<PatchClass> = merged
        .into_iter()
        .map(|(signature, mut members)| {
            members.sort_unstable();
            PatchClass {
                signature,
                representative: members[0],
                members,
            }
        })
        .collect();
    classes.sort_by_key(|c| c.representative);

    let mut class_of = vec![None; mesh.n_cells()];
    for (k, class) in classes.iter().enumerate() {
        for &c in &class.members {
            class_of[c] = Some(k);
        }
    }
    PatchClasses {
        m,
        classes,
        class_of,
    }
}

/// Summed-area table of cells that are inactive, used to detect cells whose
/// neighbourhood is free of holes and of the outer boundary.
struct BlockedCounts {
    dim: usize,
    cells: [usize; 3],
    sums: Vec<u32>,
}

impl BlockedCounts {
    fn new(mesh: &StructuredMesh) -> Self {
        let dim = mesh.dim();
        let cells = mesh.cells_per_axis();
        let ext = [cells[0] + 1, cells[1] + 1, cells[2] + 1];
        let mut sums = vec![0u32; ext[0] * ext[1] * ext[2]];
        let at = |i: usize, j: usize, k: usize| i + ext[0] * (j + ext[1] * k);
        for k in 0..cells[2] {
            for j in 0..cells[1] {
                for i in 0..cells[0] {
                    let id = mesh.cell_index([i, j, k]);
                    let v = u32::from(!mesh.is_active(id));
                    sums[at(i + 1, j + 1, k + 1)] = v
                        + sums[at(i, j + 1, k + 1)]
                        + sums[at(i + 1, j, k + 1)]
                        + sums[at(i + 1, j + 1, k)]
                        + sums[at(i, j, k)]
                        - sums[at(i, j, k + 1)]
                        - sums[at(i, j + 1, k)]
                        - sums[at(i + 1, j, k)];
                }
            }
        }
        Self { dim, cells, sums }
    }

    /// True if the box of half-width `reach` around `c` lies inside the grid
    /// and contains only active cells.
    fn window_is_clear(&self, c: [usize; 3], reach: usize) -> bool {
        let mut lo = [0usize; 3];
        let mut hi = [1usize; 3];
        for a in 0..self.dim {
            if c[a] < reach || c[a] + reach >= self.cells[a] {
                return false;
            }
            lo[a] = c[a] - reach;
            hi[a] = c[a] + reach + 1;
        }
        let ext = [self.cells[0] + 1, self.cells[1] + 1];
        let s = |i: usize, j: usize, k: usize| self.sums[i + ext[0] * (j + ext[1] * k)] as i64;
        let total = s(hi[0], hi[1], hi[2]) - s(lo[0], hi[1], hi[2]) - s(hi[0], lo[1], hi[2])
            - s(hi[0], hi[1], lo[2])
            + s(lo[0], lo[1], hi[2])
            + s(lo[0], hi[1], lo[2])
            + s(hi[0], lo[1], lo[2])
            - s(lo[0], lo[1], lo[2]);
        total == 0
    }
}

/// Patch cells and boundary facets relative to the patch's own cell.
///
/// Two cells in one class must produce equal descriptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchDescription {
    pub cells: Vec<[i64; 3]>,
    pub dirichlet_facets: Vec<([i64; 3], Face)>,
    pub robin_facets: Vec<([i64; 3], Face)>,
    pub dirichlet_vertices: Vec<[i64; 3]>,
}

pub fn patch_description(mesh: &StructuredMesh, cell: usize, m: usize) -> PatchDescription {
    let window = PatchWindow::new(mesh, cell, m);
    let origin = mesh.cell_coords(cell);
    let rel = |c: [usize; 3]| -> [i64; 3] {
        [
            c[0] as i64 - origin[0] as i64,
            c[1] as i64 - origin[1] as i64,
            c[2] as i64 - origin[2] as i64,
        ]
    };
    let mut desc = PatchDescription {
        cells: Vec::new(),
        dirichlet_facets: Vec::new(),
        robin_facets: Vec::new(),
        dirichlet_vertices: Vec::new(),
    };
    for c in window.cells() {
        let rc = rel(mesh.cell_coords(c));
        desc.cells.push(rc);
        for axis in 0..mesh.dim() {
            for side in 0..2 {
                let face = Face { axis, side };
                match mesh.facet_tag(c, face) {
                    Some(BoundaryTag::Dirichlet) => desc.dirichlet_facets.push((rc, face)),
                    Some(BoundaryTag::Robin) => desc.robin_facets.push((rc, face)),
                    None => {}
                }
            }
        }
        for &v in mesh.cell_vertices(c).as_slice() {
            if mesh.is_dirichlet_vertex(v) {
                desc.dirichlet_vertices.push(rel(mesh.vertex_coords(v)));
            }
        }
    }
    desc.cells.sort_unstable();
    desc.dirichlet_facets.sort_unstable();
    desc.robin_facets.sort_unstable();
    desc.dirichlet_vertices.sort_unstable();
    desc.dirichlet_vertices.dedup();
    desc
}
