//! Debug exports: a plain-text listing and a legacy VTK unstructured grid.

use std::io::{self, Write};

use super::{BoundaryTag, StructuredMesh};

/// Plain-text dump: header, vertex coordinates, active cells and boundary facets.
pub fn write_text<W: Write>(mesh: &StructuredMesh, mut out: W) -> io::Result<()> {
    let n = mesh.cells_per_axis();
    writeln!(out, "# structured mesh")?;
    writeln!(out, "dim {}", mesh.dim())?;
    writeln!(out, "cells_per_axis {}", fmt_list(&n[..mesh.dim()]))?;
    writeln!(out, "active_cells {}", mesh.active_cells().len())?;
    writeln!(out, "mesh_size {:e}", mesh.mesh_size())?;
    writeln!(out, "vertices {}", mesh.n_vertices())?;
    for v in 0..mesh.n_vertices() {
        let p = mesh.vertex_point(v);
        writeln!(out, "{v} {}", fmt_list(&p[..mesh.dim()]))?;
    }
    writeln!(out, "cells {}", mesh.active_cells().len())?;
    for &c in mesh.active_cells() {
        writeln!(out, "{c} {}", fmt_list(mesh.cell_vertices(c).as_slice()))?;
    }
    writeln!(out, "boundary_facets {}", mesh.boundary_facets().len())?;
    for f in mesh.boundary_facets() {
        let tag = match f.tag {
            BoundaryTag::Dirichlet => "dirichlet",
            BoundaryTag::Robin => "robin",
        };
        writeln!(out, "{} {} {} {tag}", f.cell, f.face.axis, f.face.side)?;
    }
    Ok(())
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Legacy ASCII VTK file. Active cells and boundary facets are written as
/// cells with a `tag` cell field (0 volume cell, 1 Dirichlet facet, 2 Robin
/// facet). Optional per-vertex fields are appended as point data.
pub fn write_vtk<W: Write>(
    mesh: &StructuredMesh,
    point_fields: &[(&str, &[f64])],
    mut out: W,
) -> io::Result<()> {
    let dim = mesh.dim();
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "structured mesh")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", mesh.n_vertices())?;
    for v in 0..mesh.n_vertices() {
        let p = mesh.vertex_point(v);
        writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
    }

    // VTK corner order for quads and hexahedra differs from the bit order
    let order: &[usize] = match dim {
        1 => &[0, 1],
        2 => &[0, 1, 3, 2],
        _ => &[0, 1, 3, 2, 4, 5, 7, 6],
    };
    let facet_order: &[usize] = match dim {
        1 => &[0],
        2 => &[0, 1],
        _ => &[0, 1, 3, 2],
    };
    let (cell_type, facet_type) = match dim {
        1 => (3, 1),
        2 => (9, 3),
        _ => (12, 9),
    };
    let cells = mesh.active_cells();
    let facets = mesh.boundary_facets();
    let n_items = cells.len() + facets.len();
    let size = cells.len() * (order.len() + 1) + facets.len() * (facet_order.len() + 1);
    writeln!(out, "CELLS {n_items} {size}")?;
    for &c in cells {
        let verts = mesh.cell_vertices(c);
        let ids: Vec<usize> = order.iter().map(|&k| verts.as_slice()[k]).collect();
        writeln!(out, "{} {}", ids.len(), fmt_list(&ids))?;
    }
    for f in facets {
        let verts: Vec<usize> = mesh.facet_vertices(f.cell, f.face).collect();
        let ids: Vec<usize> = facet_order.iter().map(|&k| verts[k]).collect();
        writeln!(out, "{} {}", ids.len(), fmt_list(&ids))?;
    }
    writeln!(out, "CELL_TYPES {n_items}")?;
    for _ in cells {
        writeln!(out, "{cell_type}")?;
    }
    for _ in facets {
        writeln!(out, "{facet_type}")?;
    }
    writeln!(out, "CELL_DATA {n_items}")?;
    writeln!(out, "SCALARS tag int 1")?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for _ in cells {
        writeln!(out, "0")?;
    }
    for f in facets {
        writeln!(out, "{}", if f.tag == BoundaryTag::Dirichlet { 1 } else { 2 })?;
    }
    if !point_fields.is_empty() {
        writeln!(out, "POINT_DATA {}", mesh.n_vertices())?;
        for (name, values) in point_fields {
            assert_eq!(values.len(), mesh.n_vertices(), "point field {name} has wrong length");
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in values.iter() {
                writeln!(out, "{v:e}")?;
            }
        }
    }
    Ok(())
}
