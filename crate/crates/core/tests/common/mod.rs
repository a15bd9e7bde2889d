//! Invariant checks shared by the property tests and the acceptance run.
//! Each check returns the largest observed defect.

#![allow(dead_code)]

use std::sync::Arc;

use mspg::assembly::{assemble_global, assemble_load, v_inner_products, ProblemData};
use mspg::corrector::{
    build_cache, build_test_basis, solve_element_corrector, CorrectorSource, Oversampling,
};
use mspg::grid::{build_mesh, free_nodes, BoundaryTag, BoxDomain, StructuredMesh};
use mspg::harness::{plane_wave, plane_wave_robin};
use mspg::interpolation::{random_field, MeshPair};
use mspg::solver::{
    assemble_pg_system, assemble_pg_system_from_correctors, best_approximation, factorize,
    solve_mspgfem, solve_standard_fem, PgOptions,
};
use mspg::sparse::{norm2, ComplexCsr};
use mspg::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn max_abs(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

pub fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

/// Smoke meshes: 1D interval, 2D square with a hole and a Dirichlet side, 3D cube.
pub fn smoke_pair(dim: usize) -> MeshPair {
    let (domain, n, levels) = match dim {
        1 => (BoxDomain::unit(1), 8, 2),
        2 => (
            BoxDomain::unit(2)
                .with_outer_tag(1, 0, BoundaryTag::Dirichlet)
                .with_hole(&[2.0 / 6.0, 3.0 / 6.0], &[3.0 / 6.0, 4.0 / 6.0])
                .unwrap(),
            6,
            2,
        ),
        _ => (BoxDomain::unit(3), 4, 1),
    };
    let coarse = build_mesh(&domain, &vec![n; dim]).unwrap();
    MeshPair::new(coarse, levels).unwrap()
}

/// Wave number with `κ H_axis = 1/4`.
pub fn smoke_kappa(pair: &MeshPair) -> f64 {
    0.25 / pair.coarse.spacing()[0]
}

pub fn plane_wave_data(dim: usize, kappa: f64) -> ProblemData {
    let d: Vec<f64> = match dim {
        1 => vec![1.0],
        2 => vec![0.6, 0.8],
        _ => mspg::harness::unit_direction_3d().to_vec(),
    };
    ProblemData {
        source: Some(Arc::new(|x: &[f64; 3]| Complex64::new(1.0 + x[0], -x[1]))),
        robin: Some(plane_wave_robin(&d, kappa)),
        exact: Some(plane_wave(&d, kappa)),
    }
}

/// `A − Aᵀ` for the system matrix and row sums of the stiffness matrix on
/// a mesh without Dirichlet vertices, relative to the largest entry.
pub fn assembly_symmetry_defect(mesh: &StructuredMesh, kappa: f64) -> f64 {
    let dofs = free_nodes(mesh);
    let parts = assemble_global(mesh, &dofs, kappa);
    let a = parts.system_matrix();
    let scale = a.data().iter().map(|x| x.norm()).fold(0.0, f64::max);
    let at = a.transpose();
    let mut worst: f64 = 0.0;
    for (i, j, v) in a.triplets() {
        worst = worst.max((v - at.get(i, j)).norm());
    }
    for m in [&parts.stiffness, &parts.mass, &parts.boundary] {
        let t = m.transpose();
        for (i, j, v) in m.triplets() {
            worst = worst.max((v - t.get(i, j)).abs());
        }
    }
    let mut rel = worst / scale;
    if dofs.len() == mesh.n_vertices() {
        let ones = vec![1.0; dofs.len()];
        let rs = parts.stiffness.matvec(&ones);
        let s_scale = parts.stiffness.data().iter().map(|x| x.abs()).fold(0.0, f64::max);
        rel = rel.max(rs.iter().map(|x| x.abs()).fold(0.0, f64::max) / s_scale);
    }
    rel
}

/// `‖I_H P v_H − v_H‖_∞ / ‖v_H‖_∞` for seeded random coarse vectors.
pub fn idempotence_defect(pair: &MeshPair, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let v: Vec<Complex64> = (0..pair.coarse_dofs.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let back = pair.interpolator.apply(&pair.prolong(&v));
        worst = worst.max(max_diff(&back, &v) / max_abs(&v));
    }
    worst
}

/// Free coarse dofs outside `cell` reached by `I_H` of a fine field supported
/// strictly inside `cell`; must be empty.
pub fn locality_violations(pair: &MeshPair, cell: usize) -> usize {
    let fine = pair.fine();
    let children = pair.refinement.children(&pair.coarse, cell);
    let mut v = vec![Complex64::new(0.0, 0.0); pair.fine_dofs.len()];
    for &f in &children {
        for &x in fine.cell_vertices(f).as_slice() {
            let inside = fine
                .cells_around_vertex(x)
                .iter()
                .all(|&g| pair.refinement.parent[g] == cell);
            if let (true, Some(d)) = (inside, pair.fine_dofs.dof(x)) {
                v[d] = Complex64::new(1.0 + d as f64 * 1e-3, 0.5);
            }
        }
    }
    let own: Vec<usize> = pair
        .coarse
        .cell_vertices(cell)
        .as_slice()
        .iter()
        .filter_map(|&z| pair.coarse_dofs.dof(z))
        .collect();
    pair.interpolator
        .apply(&v)
        .iter()
        .enumerate()
        .filter(|(z, x)| x.norm() > 0.0 && !own.contains(z))
        .count()
}

/// Largest `‖C λ‖_∞ / ‖λ‖_∞` over all cached correctors.
pub fn kernel_defect(pair: &MeshPair, m: usize, kappa: f64) -> f64 {
    build_cache(pair, m, kappa, true).unwrap().max_kernel_residual()
}

/// Cached-and-translated against directly solved correctors, every cell.
pub fn cache_direct_defect(pair: &MeshPair, m: usize, kappa: f64) -> f64 {
    let cache = build_cache(pair, m, kappa, true).unwrap();
    let mut worst: f64 = 0.0;
    for &t in pair.coarse.active_cells() {
        let cached = cache.corrector(pair, t).unwrap();
        let direct = solve_element_corrector(pair, t, Oversampling::Layers(m), kappa).unwrap();
        assert_eq!(cached.dofs, direct.dofs, "cell {t}");
        for (a, b) in cached.values.iter().zip(&direct.values) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    let s = max_abs(b).max(f64::MIN_POSITIVE);
                    worst = worst.max(max_diff(a, b) / s);
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

/// Relative residual `a(u_h − u_H, Λ̃_z)` of the Petrov-Galerkin solution
/// against every test function, with `u_h` the fine FEM solution.
pub fn galerkin_defect(pair: &MeshPair, m: usize, kappa: f64, data: &ProblemData) -> f64 {
    let sol = solve_mspgfem(pair, kappa, Oversampling::Layers(m), data, PgOptions::default()).unwrap();
    let uh = solve_standard_fem(pair.fine(), &pair.fine_dofs, kappa, data, 5).unwrap();
    let cache = build_cache(pair, m, kappa, true).unwrap();
    let basis = build_test_basis(pair, CorrectorSource::Cache(&cache)).unwrap();
    let a = assemble_global(pair.fine(), &pair.fine_dofs, kappa).system_matrix();
    let tb = basis.matrix.conj();
    let diff: Vec<Complex64> = uh.iter().zip(pair.prolong(&sol.u)).map(|(p, q)| p - q).collect();
    let r = tb.matvec(&a.matvec(&diff));
    let scale = tb.matvec(&a.matvec(&uh));
    max_abs(&r) / max_abs(&scale)
}

/// Explicit `K, F` from the test basis against the corrector-row assembly.
pub fn pg_assembly_defect(pair: &MeshPair, m: usize, kappa: f64, data: &ProblemData) -> f64 {
    let cache = build_cache(pair, m, kappa, true).unwrap();
    let basis = build_test_basis(pair, CorrectorSource::Cache(&cache)).unwrap();
    let a_fine = assemble_global(pair.fine(), &pair.fine_dofs, kappa).system_matrix();
    let a_coarse = assemble_global(&pair.coarse, &pair.coarse_dofs, kappa).system_matrix();
    let f_fine = assemble_load(pair.fine(), &pair.fine_dofs, data, 5);
    let (k1, f1) = assemble_pg_system(&basis, &a_fine, pair, &f_fine).unwrap();
    let (k2, f2) =
        assemble_pg_system_from_correctors(pair, CorrectorSource::Cache(&cache), &a_coarse, &f_fine)
            .unwrap();
    matrix_rel_diff(&k1, &k2).max(max_diff(&f1, &f2) / max_abs(&f1))
}

pub fn matrix_rel_diff(a: &ComplexCsr, b: &ComplexCsr) -> f64 {
    let scale = a.data().iter().map(|x| x.norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for (i, j, v) in a.triplets() {
        worst = worst.max((v - b.get(i, j)).norm());
    }
    for (i, j, v) in b.triplets() {
        worst = worst.max((v - a.get(i, j)).norm());
    }
    worst / scale
}

/// `|⟨u − v_H, φ_j⟩_V|` of the best approximation, relative to `max_j |⟨u, φ_j⟩_V|`.
pub fn best_approximation_defect(mesh: &StructuredMesh, kappa: f64, data: &ProblemData) -> f64 {
    let dofs = free_nodes(mesh);
    let exact = data.exact.as_ref().unwrap();
    let v = best_approximation(mesh, &dofs, kappa, exact, 5).unwrap();
    let rhs = v_inner_products(mesh, &dofs, kappa, exact, 5).unwrap();
    let vm = assemble_global(mesh, &dofs, kappa).v_matrix();
    let r: Vec<Complex64> = rhs.iter().zip(vm.matvec(&v)).map(|(p, q)| p - q).collect();
    max_abs(&r) / max_abs(&rhs)
}

/// Smallest `Re a(w, w) / ‖∇w‖²` over random `w = v − P I_H v`.
pub fn kernel_coercivity(pair: &MeshPair, kappa: f64, samples: usize, seed: u64) -> f64 {
    let parts = assemble_global(pair.fine(), &pair.fine_dofs, kappa);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let v = random_field(pair.fine(), &pair.fine_dofs, &mut rng);
        let pv = pair.prolong(&pair.interpolator.apply(&v));
        let w: Vec<Complex64> = v.iter().zip(&pv).map(|(a, b)| a - b).collect();
        let a = parts.form(&w, &w).re;
        let sw = parts.stiffness.matvec(&w);
        let grad2: f64 = w.iter().zip(&sw).map(|(x, y)| (x.conj() * y).re).sum();
        if grad2 > 0.0 {
            worst = worst.min(a / grad2);
        }
    }
    worst
}

/// Relative residual of a direct solve.
pub fn solver_residual(a: &ComplexCsr, b: &[Complex64]) -> f64 {
    let x = factorize(a).unwrap().solve(b);
    let ax = a.matvec(&x);
    let r: Vec<Complex64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    norm2(&r) / norm2(b)
}
