//! Cross-checks against independent dense computations.

use mspg::assembly::{assemble_form, assemble_global, assemble_load, ProblemData};
use mspg::corrector::{solve_element_corrector, solve_ideal_corrector, Oversampling};
use mspg::grid::{build_mesh, free_nodes, refine_uniform, BoundaryTag, BoxDomain};
use mspg::interpolation::{build_pi_h, kernel_constraints, MeshPair};
use mspg::solver::{factorize, solve_standard_fem};
use mspg::sparse::CsrMatrix;
use mspg::Complex64;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn dense_complex(m: &CsrMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplets() {
        d[(i, j)] += v;
    }
    d
}

fn dense_real(m: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplets() {
        d[(i, j)] += v;
    }
    d
}

#[test]
fn two_by_two_complex_symmetric_solve() {
    let a = CsrMatrix::from_triplets(
        2,
        2,
        &[(0, 0, c(2.0, 0.0)), (0, 1, c(0.0, 1.0)), (1, 0, c(0.0, 1.0)), (1, 1, c(1.0, 0.0))],
    );
    let b = [c(1.0, 0.0), c(0.0, 0.0)];
    let x = factorize(&a).unwrap().solve(&b);
    let oracle = dense_complex(&a).lu().solve(&DVector::from_column_slice(&b)).unwrap();
    for i in 0..2 {
        assert!((x[i] - oracle[i]).norm() < 1e-14);
    }
    let ax = a.matvec(&x);
    let res: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
    assert!(res <= 1e-12);
}

#[test]
fn random_sparse_system_matches_dense_lu() {
    let n = 40;
    let mut trip = Vec::new();
    for i in 0..n {
        trip.push((i, i, c(4.0 + (i as f64).sin(), 0.3)));
        for j in [i + 1, i + 7] {
            if j < n {
                let v = c((i * j) as f64 % 3.0 - 1.0, ((i + j) as f64).cos());
                trip.push((i, j, v));
                trip.push((j, i, v));
            }
        }
    }
    let a = CsrMatrix::from_triplets(n, n, &trip);
    let b: Vec<Complex64> = (0..n).map(|i| c(i as f64, 1.0)).collect();
    let x = factorize(&a).unwrap().solve(&b);
    let oracle = dense_complex(&a).lu().solve(&DVector::from_column_slice(&b)).unwrap();
    let diff: f64 = x.iter().zip(oracle.iter()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn poisson_on_four_by_four_dirichlet_square() {
    let domain = BoxDomain::unit(2).with_all_outer(BoundaryTag::Dirichlet);
    let mesh = build_mesh(&domain, &[4, 4]).unwrap();
    let dofs = free_nodes(&mesh);
    assert_eq!(dofs.len(), 9);
    let data = ProblemData {
        source: Some(Arc::new(|_| c(1.0, 0.0))),
        ..ProblemData::default()
    };
    let u = solve_standard_fem(&mesh, &dofs, 0.0, &data, 5).unwrap();

    // Q1 stiffness on a square grid: 8/3 on the diagonal, -1/3 for the eight neighbours
    let h = 0.25;
    let mut k = DMatrix::<f64>::zeros(9, 9);
    let idx = |i: i64, j: i64| ((i - 1) * 3 + (j - 1)) as usize;
    for i in 1..=3i64 {
        for j in 1..=3i64 {
            k[(idx(i, j), idx(i, j))] = 8.0 / 3.0;
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    let (p, q) = (i + di, j + dj);
                    if (di, dj) != (0, 0) && (1..=3).contains(&p) && (1..=3).contains(&q) {
                        k[(idx(i, j), idx(p, q))] = -1.0 / 3.0;
                    }
                }
            }
        }
    }
    let f = DVector::from_element(9, h * h);
    let oracle = k.lu().solve(&f).unwrap();
    for v in 0..9 {
        let p = mesh.vertex_point(dofs.free_nodes[v]);
        let (i, j) = ((p[0] / h).round() as i64, (p[1] / h).round() as i64);
        let o = oracle[idx(i, j)];
        assert!((u[v] - c(o, 0.0)).norm() < 1e-10, "vertex {v}: {} vs {o}", u[v]);
    }
}

#[test]
fn pi_h_is_local_l2_projection() {
    let coarse = build_mesh(&BoxDomain::unit(2), &[2, 2]).unwrap();
    let refinement = refine_uniform(&coarse, 2).unwrap();
    let fine = &refinement.fine;
    let fd = free_nodes(fine);
    let cd = free_nodes(&coarse);
    let pi = build_pi_h(&coarse, &refinement, &fd).unwrap();
    let p = mspg::interpolation::prolongation(&coarse, &cd, &refinement, &fd);
    let v: Vec<f64> = (0..fd.len()).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let pi_v = pi.matvec(&v);

    for (t_idx, &t) in coarse.active_cells().iter().enumerate() {
        let children = refinement.children(&coarse, t);
        let mass = assemble_form(fine, &fd, 0.0, &children, false).unwrap().mass;
        let mut local: Vec<usize> = children
            .iter()
            .flat_map(|&f| fine.cell_vertices(f).as_slice().to_vec())
            .map(|v| fd.dof(v).unwrap())
            .collect();
        local.sort_unstable();
        local.dedup();
        let m = dense_real(&mass.submatrix(&local, &local));
        let corners: Vec<usize> = coarse
            .cell_vertices(t)
            .as_slice()
            .iter()
            .map(|&z| cd.dof(z).unwrap())
            .collect();
        let b = DMatrix::from_fn(local.len(), corners.len(), |i, k| p.get(local[i], corners[k]));
        let vl = DVector::from_iterator(local.len(), local.iter().map(|&d| v[d]));
        let lhs = b.transpose() * &m * &b;
        let rhs = b.transpose() * &m * vl;
        let q = lhs.lu().solve(&rhs).unwrap();
        for k in 0..corners.len() {
            let got = pi_v[4 * t_idx + k];
            assert!((got - q[k]).abs() < 1e-12, "cell {t} corner {k}: {got} vs {}", q[k]);
        }
    }
}

#[test]
fn constraint_rows_have_full_rank() {
    let pair = MeshPair::new(build_mesh(&BoxDomain::unit(2), &[16, 16]).unwrap(), 2).unwrap();
    let cell = pair.coarse.cell_index([7, 8, 0]);
    let ec = solve_element_corrector(&pair, cell, Oversampling::Layers(2), 4.0).unwrap();
    let kc = kernel_constraints(&pair.interpolator, &ec.dofs).unwrap();
    let d = dense_real(&kc.matrix);
    let sv = d.clone().svd(false, false).singular_values;
    let tol = sv.max() * 1e-10 * d.ncols() as f64;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    assert_eq!(rank, kc.rows.len());
    assert!(kc.rows.len() > 0);
}

/// Corrector from a dense null-space basis of `C`:
/// `λ = Z y` with `Z^H conj(A) Z y = Z^H conj(b)`.
fn null_space_corrector(
    pair: &MeshPair,
    cell: usize,
    dofs: &[usize],
    kappa: f64,
) -> Vec<Vec<Complex64>> {
    let fine = pair.fine();
    let a = assemble_global(fine, &pair.fine_dofs, kappa).system_matrix();
    let a_patch = dense_complex(&a.submatrix(dofs, dofs));
    let children = pair.refinement.children(&pair.coarse, cell);
    let a_t = assemble_form(fine, &pair.fine_dofs, kappa, &children, true)
        .unwrap()
        .system_matrix();
    let kc = kernel_constraints(&pair.interpolator, dofs).unwrap();
    let cmat = dense_real(&kc.matrix);
    let svd = cmat.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12).count();
    let n = dofs.len();
    // orthogonal complement of the row space by Gram-Schmidt on unit vectors
    let row_space = vt.rows(0, rank).transpose();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for e in 0..n {
        let mut v = DVector::<f64>::zeros(n);
        v[e] = 1.0;
        for k in 0..rank {
            let r = row_space.column(k);
            let d = r.dot(&v);
            v -= r * d;
        }
        for b in &basis {
            let d = b.dot(&v);
            v -= b * d;
        }
        let nv = v.norm();
        if nv > 1e-8 {
            basis.push(v / nv);
        }
        if basis.len() == n - rank {
            break;
        }
    }
    let z = DMatrix::from_fn(n, basis.len(), |i, j| c(basis[j][i], 0.0));
    let lhs = z.adjoint() * a_patch.map(|v| v.conj()) * &z;
    let lu = lhs.lu();
    pair.coarse
        .cell_vertices(cell)
        .as_slice()
        .iter()
        .filter_map(|&zv| pair.coarse_dofs.dof(zv))
        .map(|zd| {
            let pz: Vec<Complex64> = (0..pair.fine_dofs.len())
                .map(|f| c(pair.prolongation.get(f, zd), 0.0))
                .collect();
            let b_full = a_t.matvec(&pz);
            let b = DVector::from_iterator(n, dofs.iter().map(|&d| b_full[d].conj()));
            let y = lu.solve(&(z.adjoint() * b)).unwrap();
            (z.clone() * y).iter().copied().collect()
        })
        .collect()
}

#[test]
fn kappa_zero_corrector_matches_null_space_solve() {
    let pair = MeshPair::new(build_mesh(&BoxDomain::unit(2), &[8, 8]).unwrap(), 2).unwrap();
    let cell = pair.coarse.cell_index([3, 4, 0]);
    let ec = solve_element_corrector(&pair, cell, Oversampling::Layers(1), 0.0).unwrap();
    let oracle = null_space_corrector(&pair, cell, &ec.dofs, 0.0);
    let ours: Vec<&Vec<Complex64>> = ec.values.iter().flatten().collect();
    assert_eq!(ours.len(), oracle.len());
    for (a, b) in ours.iter().zip(&oracle) {
        let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let diff = a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(diff <= 1e-10 * scale.max(1.0), "diff {diff}");
    }
}

#[test]
fn helmholtz_corrector_matches_null_space_solve_near_robin_corner() {
    let pair = MeshPair::new(build_mesh(&BoxDomain::unit(2), &[8, 8]).unwrap(), 2).unwrap();
    let cell = pair.coarse.cell_index([0, 1, 0]);
    let ec = solve_element_corrector(&pair, cell, Oversampling::Layers(1), 6.0).unwrap();
    let oracle = null_space_corrector(&pair, cell, &ec.dofs, 6.0);
    for (a, b) in ec.values.iter().flatten().zip(&oracle) {
        let scale = b.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let diff = a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(diff <= 1e-10 * scale.max(1.0), "diff {diff}");
    }
}

#[test]
fn large_patch_equals_ideal_corrector() {
    let pair = MeshPair::new(build_mesh(&BoxDomain::unit(2), &[4, 4]).unwrap(), 2).unwrap();
    let cell = pair.coarse.cell_index([1, 2, 0]);
    let local = solve_element_corrector(&pair, cell, Oversampling::Layers(4), 3.0).unwrap();
    let ideal = solve_ideal_corrector(&pair, cell, 3.0).unwrap();
    assert_eq!(local.dofs, ideal.dofs);
    for (a, b) in local.values.iter().flatten().zip(ideal.values.iter().flatten()) {
        let diff = a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn load_of_constant_source_is_cell_volume() {
    let mesh = build_mesh(&BoxDomain::unit(2), &[5, 5]).unwrap();
    let dofs = free_nodes(&mesh);
    let data = ProblemData {
        source: Some(Arc::new(|_| c(1.0, 0.0))),
        ..ProblemData::default()
    };
    let f = assemble_load(&mesh, &dofs, &data, 5);
    let total: Complex64 = f.iter().sum();
    assert!((total - c(1.0, 0.0)).norm() < 1e-13);
}
