//! Cross-checks of the solvers against slow, independent reference
//! computations.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector3};

use trapscape::corrugation::{quasi_static_slide, two_string_crystal, SlideOptions, TwoStringOptions};
use trapscape::crystal::{solve_equilibrium, SolveOptions};
use trapscape::dc_control::{example_nine_electrode_basis, solve_dc_voltages, DcConstraintSet};
use trapscape::fields::{DriveConfig, IonSpecies, TrapModel};
use trapscape::geometry::{canonical_geometry, rect_potential, strip_potential, ElectrodeRole, RectElectrode};
use trapscape::nodes::{find_nodes, ratio_for_separation, wells_at_nodes, Topology};
use trapscape::units::{angular, coulomb_constant, um, ELEMENTARY_CHARGE};

fn model(v_rf: f64, r: f64) -> TrapModel {
    TrapModel::new(
        canonical_geometry(),
        DriveConfig::from_mhz(v_rf, r, 27.2).unwrap(),
        IonSpecies::calcium40(),
        vec![],
    )
    .unwrap()
}

/// Downhill simplex, standard coefficients.
fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, iters: usize) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    for _ in 0..iters {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let towards = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = towards(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = towards(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = towards(0.5);
            let fc = f(&xc);
            if fc < vals[n] {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                let best = simplex[0].clone();
                for k in 1..=n {
                    simplex[k] = (0..n).map(|j| best[j] + 0.5 * (simplex[k][j] - best[j])).collect();
                    vals[k] = f(&simplex[k]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    simplex[best].clone()
}

/// Direct quadrature of the Poisson integral for a surface patch, with the
/// `z'` integral done in closed form.
fn rect_quadrature(r: &RectElectrode, p: &Vector3<f64>) -> f64 {
    let n = 20_000;
    let h = (r.x_max - r.x_min) / n as f64;
    let y = p.y;
    let inner = |xs: f64| {
        let rho2 = (xs - p.x).powi(2) + y * y;
        let g = |zs: f64| {
            let dz = zs - p.z;
            dz / (rho2 * (rho2 + dz * dz).sqrt())
        };
        g(r.z_max) - g(r.z_min)
    };
    let mut acc = inner(r.x_min) + inner(r.x_max);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * inner(r.x_min + i as f64 * h);
    }
    y / (2.0 * PI) * acc * h / 3.0
}

#[test]
fn rect_potential_matches_poisson_quadrature() {
    let r = RectElectrode::new(um(-40.0), um(25.0), um(-60.0), um(90.0), "pad").unwrap();
    for p in [
        Vector3::new(um(0.0), um(50.0), um(0.0)),
        Vector3::new(um(-70.0), um(20.0), um(30.0)),
        Vector3::new(um(10.0), um(5.0), um(-59.0)),
        Vector3::new(um(200.0), um(150.0), um(-300.0)),
    ] {
        let exact = rect_potential(&r, 1.0, &p).unwrap();
        let quad = rect_quadrature(&r, &p);
        assert!((exact - quad).abs() < 1e-8, "{p:?}: {exact} vs {quad}");
    }
}

/// Squared RF field from finite differences of the strip potentials.
fn field_sqr_fd(m: &TrapModel, x: f64, y: f64) -> f64 {
    let v = m.drive().v_rf;
    let r = m.drive().ratio_r;
    let phi = |x: f64, y: f64| -> f64 {
        m.geometry()
            .effective_strips()
            .iter()
            .map(|s| {
                let volts = match s.role {
                    ElectrodeRole::Rf => v,
                    ElectrodeRole::CenterRf => r * v,
                    _ => 0.0,
                };
                strip_potential(s, volts, x, y).unwrap()
            })
            .sum()
    };
    let h = 1e-9;
    let ex = (phi(x + h, y) - phi(x - h, y)) / (2.0 * h);
    let ey = (phi(x, y + h) - phi(x, y - h)) / (2.0 * h);
    ex * ex + ey * ey
}

#[test]
fn nodes_match_brute_force_field_minimum() {
    for r in [0.9, 1.2] {
        let m = model(85.0, r);
        let set = find_nodes(&m).unwrap();
        assert_eq!(set.topology, Topology::HorizontalPair);
        // coarse grid over the right half plane, then simplex polish
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for ix in 1..150 {
            for iy in 5..200 {
                let (x, y) = (ix as f64, iy as f64);
                let e = field_sqr_fd(&m, um(x), um(y));
                if e < best.0 {
                    best = (e, x, y);
                }
            }
        }
        let sol = nelder_mead(|p| field_sqr_fd(&m, um(p[0]), um(p[1])), &[best.1, best.2], 0.5, 400);
        let node = set.nodes.iter().find(|n| n[0] > 0.0).unwrap();
        assert!((um(sol[0]) - node[0]).abs() < um(0.01), "x {} vs {}", sol[0], node[0] / 1e-6);
        assert!((um(sol[1]) - node[1]).abs() < um(0.01), "y {} vs {}", sol[1], node[1] / 1e-6);
    }
}

#[test]
fn short_chains_match_simplex_minimization() {
    let m = model(85.0, 0.0);
    let set = find_nodes(&m).unwrap();
    let wz = angular(0.19e6);
    let m = m.with_wells(wells_at_nodes(&set, wz, 0.0).unwrap()).unwrap();
    let k = coulomb_constant(ELEMENTARY_CHARGE, ELEMENTARY_CHARGE);
    let mass = m.species().mass;
    let l = (k / (mass * wz * wz)).cbrt();
    for n in 2..=5 {
        let s = solve_equilibrium(&m, &vec![0; n], &SolveOptions::default()).unwrap();
        let mut got: Vec<f64> = s.positions.iter().map(|p| p.z / l).collect();
        got.sort_by(f64::total_cmp);
        // dimensionless axial energy sum z^2/2 + sum 1/|zi - zj|
        let energy = |z: &[f64]| {
            let mut e: f64 = z.iter().map(|v| 0.5 * v * v).sum();
            for i in 0..z.len() {
                for j in i + 1..z.len() {
                    e += 1.0 / (z[i] - z[j]).abs().max(1e-9);
                }
            }
            e
        };
        let x0: Vec<f64> = (0..n).map(|i| i as f64 - 0.5 * (n - 1) as f64).collect();
        let mut want = nelder_mead(energy, &x0, 0.3, 20_000);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-4, "n = {n}: {got:?} vs {want:?}");
        }
        // chain stays on the node axis
        for p in &s.positions {
            assert!((p.x - set.nodes[0][0]).abs() < um(1e-3));
            assert!((p.y - set.nodes[0][1]).abs() < um(1e-3));
        }
    }
}

#[test]
fn dc_solution_matches_null_space_oracle() {
    let basis = example_nine_electrode_basis(&canonical_geometry()).unwrap();
    let p = [um(12.0), um(80.0), um(5.0)];
    let q = [um(-30.0), um(70.0), um(-10.0)];
    let c = DcConstraintSet::new()
        .null_point(p)
        .curvature(p, [0.0, 0.0, 1.0], 2e7)
        .potential(q, 0.3);
    let sol = solve_dc_voltages(&basis, &c).unwrap();
    assert!(sol.feasible);
    let (a, b) = c.system(&basis).unwrap();

    // v = v_p + N w with A v_p = b and N spanning ker A; the minimum norm
    // solution has no component along N
    let svd = a.clone().svd(true, true);
    let vt = svd.v_t.unwrap();
    let u = svd.u.unwrap();
    let tol = 1e-12 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut oracle = DVector::zeros(a.ncols());
    for i in 0..rank {
        let coef = u.column(i).dot(&b) / svd.singular_values[i];
        oracle += vt.row(i).transpose() * coef;
    }
    let v = DVector::from_vec(sol.voltages.clone());
    // v must lie in the row space of A
    let at = a.transpose();
    let y = at.clone().svd(true, true).solve(&v, 1e-14).unwrap();
    assert!((&at * y - &v).norm() < 1e-8 * v.norm());
    assert!((&v - &oracle).norm() < 1e-7 * oracle.norm(), "{v} vs {oracle}");
}

fn slide_setup(d_um: f64, ions: usize) -> (TrapModel, trapscape::crystal::CrystalState) {
    let base = model(120.0, 0.9);
    let r = ratio_for_separation(&base, um(d_um), 1e-7).unwrap();
    let opts = TwoStringOptions {
        ions_per_string: ions,
        ..Default::default()
    };
    let (m, s, _) = two_string_crystal(&base.with_ratio(r).unwrap(), &opts).unwrap();
    (m, s)
}

#[test]
fn strongly_coupled_strings_lock() {
    let (m, s) = slide_setup(25.0, 7);
    let offsets: Vec<f64> = (0..=30).map(|i| um(i as f64)).collect();
    let rep = quasi_static_slide(&m, &s, &offsets, &SlideOptions::default()).unwrap();
    assert!(rep.error.is_none(), "{:?}", rep.error);
    assert_eq!(rep.slip_count(), 0);
    assert!(rep.hysteresis < um(1e-3), "{}", rep.hysteresis);
    // the stationary string follows the moved one
    let last = &rep.forward.last().unwrap().positions;
    let drag: f64 = s.string(0).iter().map(|&i| last[i].z - s.positions[i].z).sum::<f64>() / 7.0;
    assert!(drag > um(10.0), "drag {drag}");
}

#[test]
fn weakly_coupled_strings_slip() {
    let (m, s) = slide_setup(40.0, 7);
    let offsets: Vec<f64> = (0..=150).map(|i| um(i as f64)).collect();
    let rep = quasi_static_slide(&m, &s, &offsets, &SlideOptions::default()).unwrap();
    assert!(rep.error.is_none(), "{:?}", rep.error);
    assert!(rep.slip_count() > 0);
    assert!(rep.hysteresis > um(1.0));
}
