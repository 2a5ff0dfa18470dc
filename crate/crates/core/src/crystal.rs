//! Coulomb crystals of ions held in one or more axial wells.
//!
//! The energy is the sum of each ion's single-particle potential (pseudo-
//! potential plus the axial well it belongs to) and the pairwise Coulomb
//! repulsion. Equilibria are found with L-BFGS and, when the Hessian is
//! positive definite, polished with a few Newton steps.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::fields::TrapModel;
use crate::minimize::{lbfgs, max_block_norm, MinimizeOptions};
use crate::units::{coulomb_constant, um};
use crate::{Error, Result};

/// Ions closer than this are treated as coincident.
pub const SINGULAR_DISTANCE: f64 = 1e-12;

/// Distance below which a minimizer step is rejected outright.
const STEP_GUARD: f64 = 0.5e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitStrategy {
    /// Evenly spaced strings along each well axis with small transverse
    /// offsets. `spacing = None` uses the harmonic-chain estimate.
    StringSeed { spacing: Option<f64> },
    /// `restarts` randomly perturbed string seeds; the lowest energy wins.
    RandomRestart { restarts: usize, seed: u64 },
    Explicit(Vec<Vector3<f64>>),
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::StringSeed { spacing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Convergence threshold on the largest net force on any ion (N).
    pub force_tol: f64,
    pub max_evaluations: usize,
    pub init: InitStrategy,
    /// Newton refinement with the analytic Hessian after L-BFGS.
    pub polish: bool,
    /// Reject stationary points with a negative Hessian eigenvalue.
    pub reject_saddles: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            force_tol: 1e-25,
            max_evaluations: 100_000,
            init: InitStrategy::default(),
            polish: true,
            reject_saddles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrystalState {
    pub positions: Vec<Vector3<f64>>,
    /// Well index of each ion.
    pub wells: Vec<usize>,
    /// Index of the well whose axis is nearest to each ion.
    pub string_labels: Vec<usize>,
    pub energy: f64,
    pub max_force: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Smallest Hessian eigenvalue divided by the ion mass (s^-2).
    pub min_curvature: f64,
}

impl CrystalState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Indices of the ions in string `label`, sorted by `z`.
    pub fn string(&self, label: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.string_labels[i] == label).collect();
        idx.sort_by(|&a, &b| self.positions[a].z.total_cmp(&self.positions[b].z));
        idx
    }

    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min((self.positions[i] - self.positions[j]).norm());
            }
        }
        best
    }
}

/// Well assignment for `counts[k]` ions in well `k`.
pub fn assign_ions(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect()
}

fn check_inputs(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> Result<()> {
    if positions.len() != wells.len() {
        return Err(Error::Domain(format!(
            "{} positions but {} well assignments",
            positions.len(),
            wells.len()
        )));
    }
    for &w in wells {
        model.axial_well(w)?;
    }
    for p in positions {
        if !(p.y > 0.0) || !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!(
                "ion position ({:e}, {:e}, {:e}) is not above the electrode plane",
                p.x, p.y, p.z
            )));
        }
    }
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            if (positions[i] - positions[j]).norm() < SINGULAR_DISTANCE {
                return Err(Error::Singularity(i, j));
            }
        }
    }
    Ok(())
}

fn coulomb_k(model: &TrapModel) -> f64 {
    let q = model.species().charge;
    coulomb_constant(q, q)
}

/// Energy and gradient without input checks.
fn energy_and_gradient(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> (f64, Vec<Vector3<f64>>) {
    let k = coulomb_k(model);
    let mut e = 0.0;
    let mut grad = Vec::with_capacity(positions.len());
    for (p, &w) in positions.iter().zip(wells) {
        let d = model.total_derivs_unchecked(p, &model.axial_wells()[w]);
        e += d.value;
        grad.push(d.gradient);
    }
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let r = positions[i] - positions[j];
            let d = r.norm();
            e += k / d;
            let f = r * (k / (d * d * d));
            grad[i] -= f;
            grad[j] += f;
        }
    }
    (e, grad)
}

pub fn total_energy(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> Result<f64> {
    check_inputs(model, positions, wells)?;
    Ok(energy_and_gradient(model, positions, wells).0)
}

pub fn energy_gradient(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> Result<Vec<Vector3<f64>>> {
    check_inputs(model, positions, wells)?;
    Ok(energy_and_gradient(model, positions, wells).1)
}

/// Coulomb Hessian block `d^2 (k / |r|) / dr^2`.
pub fn coulomb_block(k: f64, r: &Vector3<f64>) -> Matrix3<f64> {
    let r2 = r.norm_squared();
    let r5 = r2 * r2 * r2.sqrt();
    (r * r.transpose() * 3.0 - Matrix3::identity() * r2) * (k / r5)
}

/// Full `3N x 3N` Hessian of the crystal energy.
pub fn energy_hessian(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> Result<DMatrix<f64>> {
    check_inputs(model, positions, wells)?;
    Ok(hessian_unchecked(model, positions, wells))
}

fn hessian_unchecked(model: &TrapModel, positions: &[Vector3<f64>], wells: &[usize]) -> DMatrix<f64> {
    let n = positions.len();
    let k = coulomb_k(model);
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    for (i, (p, &w)) in positions.iter().zip(wells).enumerate() {
        let d = model.total_derivs_unchecked(p, &model.axial_wells()[w]);
        h.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&d.hessian);
    }
    for i in 0..n {
        for j in i + 1..n {
            let b = coulomb_block(k, &(positions[i] - positions[j]));
            let mut ii = h.fixed_view_mut::<3, 3>(3 * i, 3 * i);
            ii += b;
            let mut jj = h.fixed_view_mut::<3, 3>(3 * j, 3 * j);
            jj += b;
            h.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&(-b));
            h.fixed_view_mut::<3, 3>(3 * j, 3 * i).copy_from(&(-b));
        }
    }
    h
}

fn flatten(p: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * p.len(), p.iter().flat_map(|v| v.iter().copied()))
}

fn unflatten(x: &DVector<f64>) -> Vec<Vector3<f64>> {
    x.as_slice().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Ion spacing near the center of an `n`-ion harmonic chain.
pub fn chain_spacing(model: &TrapModel, omega_z: f64, n: usize) -> f64 {
    let l = (coulomb_k(model) / (model.species().mass * omega_z * omega_z)).cbrt();
    if n < 2 {
        l
    } else {
        2.018 * l / (n as f64).powf(0.559)
    }
}

fn string_seed(model: &TrapModel, wells: &[usize], spacing: Option<f64>) -> Vec<Vector3<f64>> {
    let n_wells = model.axial_wells().len().max(1);
    let mut out = vec![Vector3::zeros(); wells.len()];
    for (w, well) in model.axial_wells().iter().enumerate() {
        let members: Vec<usize> = (0..wells.len()).filter(|&i| wells[i] == w).collect();
        let n = members.len();
        let s = spacing.unwrap_or_else(|| chain_spacing(model, well.omega_z.max(1.0), n));
        let stagger = s * w as f64 / (2.0 * n_wells as f64);
        for (k, &i) in members.iter().enumerate() {
            let z = well.center_z + (k as f64 - 0.5 * (n as f64 - 1.0)) * s + stagger;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            out[i] = Vector3::new(well.center_xy[0] + sign * um(0.01), well.center_xy[1] + sign * um(0.01), z);
        }
    }
    out
}

fn labels(model: &TrapModel, positions: &[Vector3<f64>]) -> Vec<usize> {
    positions
        .iter()
        .map(|p| {
            model
                .axial_wells()
                .iter()
                .enumerate()
                .map(|(k, w)| (k, (p.x - w.center_xy[0]).hypot(p.y - w.center_xy[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        })
        .collect()
}

/// Relaxes the crystal from `start`.
pub fn relax(model: &TrapModel, start: Vec<Vector3<f64>>, wells: &[usize], opts: &SolveOptions) -> Result<CrystalState> {
    check_inputs(model, &start, wells)?;
    let n = start.len();
    if n == 0 {
        return Err(Error::Domain("crystal has no ions".into()));
    }
    let objective = |x: &DVector<f64>| {
        let p = unflatten(x);
        if p.iter().any(|v| !(v.y > 0.0)) {
            return None;
        }
        for i in 0..n {
            for j in i + 1..n {
                if (p[i] - p[j]).norm() < STEP_GUARD {
                    return None;
                }
            }
        }
        let (e, g) = energy_and_gradient(model, &p, wells);
        Some((e, flatten(&g)))
    };
    let mopts = MinimizeOptions {
        grad_tol: opts.force_tol,
        block_size: 3,
        max_evaluations: opts.max_evaluations,
        history: 12,
        max_step: um(2.0),
    };
    let res = lbfgs(objective, flatten(&start), &mopts)
        .ok_or_else(|| Error::Domain("initial configuration is outside the energy domain".into()))?;
    let mut x = res.x;
    let mut fmax = res.max_block_grad;
    let mut evaluations = res.evaluations;

    if opts.polish && fmax >= opts.force_tol {
        for _ in 0..20 {
            let p = unflatten(&x);
            let (_, g) = energy_and_gradient(model, &p, wells);
            let h = hessian_unchecked(model, &p, wells);
            let Some(chol) = h.cholesky() else { break };
            let step = chol.solve(&(-flatten(&g)));
            let trial = &x + step;
            evaluations += 1;
            match objective(&trial) {
                Some((_, gt)) => {
                    let ft = max_block_norm(&gt, 3);
                    if ft < fmax {
                        x = trial;
                        fmax = ft;
                    } else {
                        break;
                    }
                }
                None => break,
            }
            if fmax < opts.force_tol {
                break;
            }
        }
    }

    let positions = unflatten(&x);
    if fmax >= opts.force_tol {
        return Err(Error::NoConvergence {
            evaluations,
            residual: fmax,
            message: format!("crystal of {n} ions did not reach max force {:e} N", opts.force_tol),
        });
    }
    let (energy, _) = energy_and_gradient(model, &positions, wells);
    let h = hessian_unchecked(model, &positions, wells);
    let eig = SymmetricEigen::new(h).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    let mass = model.species().mass;
    if opts.reject_saddles && lo < -1e-9 * hi.abs() {
        return Err(Error::Saddle {
            min_eigenvalue: lo / mass,
            max_eigenvalue: hi / mass,
        });
    }
    Ok(CrystalState {
        string_labels: labels(model, &positions),
        positions,
        wells: wells.to_vec(),
        energy,
        max_force: fmax,
        evaluations,
        converged: true,
        min_curvature: lo / mass,
    })
}

/// Equilibrium of ions assigned to wells by `wells` (see [`assign_ions`]).
pub fn solve_equilibrium(model: &TrapModel, wells: &[usize], opts: &SolveOptions) -> Result<CrystalState> {
    if wells.is_empty() {
        return Err(Error::Domain("crystal has no ions".into()));
    }
    if model.axial_wells().is_empty() {
        return Err(Error::Domain("crystal needs at least one axial well".into()));
    }
    match &opts.init {
        InitStrategy::StringSeed { spacing } => relax(model, string_seed(model, wells, *spacing), wells, opts),
        InitStrategy::Explicit(p) => relax(model, p.clone(), wells, opts),
        InitStrategy::RandomRestart { restarts, seed } => {
            if *restarts == 0 {
                return Err(Error::Domain("random restart needs at least one restart".into()));
            }
            let base = string_seed(model, wells, None);
            let spacing = model
                .axial_wells()
                .iter()
                .map(|w| chain_spacing(model, w.omega_z.max(1.0), wells.len()))
                .fold(f64::INFINITY, f64::min);
            let results: Vec<Result<CrystalState>> = (0..*restarts)
                .into_par_iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                    let start: Vec<Vector3<f64>> = if k == 0 {
                        base.clone()
                    } else {
                        base.iter()
                            .map(|p| {
                                p + Vector3::new(
                                    rng.random_range(-1.0..1.0) * um(1.0),
                                    rng.random_range(-1.0..1.0) * um(1.0),
                                    rng.random_range(-0.3..0.3) * spacing,
                                )
                            })
                            .collect()
                    };
                    relax(model, start, wells, opts)
                })
                .collect();
            let mut best: Option<CrystalState> = None;
            let mut last_err = None;
            for r in results {
                match r {
                    Ok(s) => {
                        if best.as_ref().is_none_or(|b| s.energy < b.energy) {
                            best = Some(s);
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.expect("at least one restart ran"))
        }
    }
}
