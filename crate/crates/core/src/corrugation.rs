//! Two parallel ion strings as a Frenkel-Kontorova emulator.
//!
//! One string, frozen at equilibrium, imposes a periodic Coulomb corrugation
//! on the line of the other. Its curvature at the central minimum gives
//! `omega_int`; the curvature felt by the central ion from its own string
//! gives `omega_0`; `eta = (omega_int / omega_0)^2`.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use crate::crystal::{assign_ions, relax, solve_equilibrium, CrystalState, InitStrategy, SolveOptions};
use crate::fields::TrapModel;
use crate::nodes::{find_nodes, wells_at_nodes, NodeSet, Topology};
use crate::units::{angular, coulomb_constant};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrugationSample {
    pub z: f64,
    /// Total, J.
    pub u: f64,
    pub u_coulomb: f64,
    pub u_trap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrugationProfile {
    pub target_string: usize,
    /// `(x, y)` of the line the profile is sampled along.
    pub line: [f64; 2],
    pub samples: Vec<CorrugationSample>,
}

impl CorrugationProfile {
    /// Peak-to-peak size of the Coulomb part after removing its best
    /// quadratic fit.
    pub fn modulation_depth(&self) -> f64 {
        let n = self.samples.len() as f64;
        let zs: Vec<f64> = self.samples.iter().map(|s| s.z).collect();
        let zc = zs.iter().sum::<f64>() / n;
        let scale = zs.iter().map(|z| (z - zc).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        // least squares fit of a + b t + c t^2 with t = (z - zc) / scale
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Vector3::<f64>::zeros();
        for s in &self.samples {
            let t = (s.z - zc) / scale;
            let row = nalgebra::Vector3::new(1.0, t, t * t);
            ata += row * row.transpose();
            atb += row * s.u_coulomb;
        }
        let Some(c) = ata.lu().solve(&atb) else { return 0.0 };
        let resid: Vec<f64> = self
            .samples
            .iter()
            .map(|s| {
                let t = (s.z - zc) / scale;
                s.u_coulomb - (c[0] + c[1] * t + c[2] * t * t)
            })
            .collect();
        let hi = resid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = resid.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaZeroVariant {
    /// Same-string Coulomb curvature plus the axial well.
    #[default]
    WithTrap,
    CoulombOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrugationReport {
    pub target_string: usize,
    pub sample_line: Vec<CorrugationSample>,
    pub omega_int: f64,
    pub omega_zero: f64,
    pub omega_zero_coulomb_only: f64,
    pub eta: f64,
    /// Pseudopotential barrier between the two wells, J.
    pub barrier: f64,
    pub node_separation: f64,
}

fn string_count(state: &CrystalState) -> usize {
    let mut labels: Vec<usize> = state.string_labels.clone();
    labels.sort_unstable();
    labels.dedup();
    labels.len()
}

fn require_two_strings(state: &CrystalState, target: usize) -> Result<()> {
    if string_count(state) < 2 {
        return Err(Error::State(format!(
            "corrugation needs two ion strings, found {}",
            string_count(state)
        )));
    }
    if state.string(target).is_empty() {
        return Err(Error::Domain(format!("string {target} has no ions")));
    }
    Ok(())
}

fn mean_spacing(state: &CrystalState, members: &[usize]) -> Option<f64> {
    if members.len() < 2 {
        return None;
    }
    let first = state.positions[members[0]].z;
    let last = state.positions[members[members.len() - 1]].z;
    Some((last - first) / (members.len() - 1) as f64)
}

/// Coulomb plus axial trapping potential along the node line of
/// `target_string`, with every other ion frozen.
pub fn corrugation_potential(
    model: &TrapModel,
    state: &CrystalState,
    target_string: usize,
    n_samples: usize,
) -> Result<CorrugationProfile> {
    require_two_strings(state, target_string)?;
    if n_samples < 3 {
        return Err(Error::Domain(format!("need at least 3 samples, got {n_samples}")));
    }
    let well = *model.axial_well(target_string)?;
    let members = state.string(target_string);
    let spacing = mean_spacing(state, &members)
        .or_else(|| {
            (0..string_count(state))
                .filter_map(|s| mean_spacing(state, &state.string(s)))
                .next()
        })
        .ok_or_else(|| Error::State("no string with two ions to set the sampling window".into()))?;
    let zmin = state.positions[members[0]].z - spacing;
    let zmax = state.positions[members[members.len() - 1]].z + spacing;
    let line = well.center_xy;
    let k = coulomb_constant(model.species().charge, model.species().charge);
    let others: Vec<Vector3<f64>> = (0..state.len())
        .filter(|&i| state.string_labels[i] != target_string)
        .map(|i| state.positions[i])
        .collect();
    let samples = (0..n_samples)
        .map(|i| {
            let z = zmin + (zmax - zmin) * i as f64 / (n_samples - 1) as f64;
            let p = Vector3::new(line[0], line[1], z);
            let u_coulomb: f64 = others.iter().map(|o| k / (p - o).norm()).sum();
            let u_trap = model.total_derivs_unchecked(&p, &well).value;
            CorrugationSample {
                z,
                u: u_coulomb + u_trap,
                u_coulomb,
                u_trap,
            }
        })
        .collect();
    Ok(CorrugationProfile {
        target_string,
        line,
        samples,
    })
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-12 * (a.abs() + b.abs()).max(1e-18) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Local minimum of `u` closest to `center` on `n` samples over `range`,
/// refined by golden section; returns `(z_min, u''(z_min))` with the second
/// derivative from a central difference of width `step`.
pub fn central_minimum_curvature(
    u: &dyn Fn(f64) -> f64,
    range: (f64, f64),
    n: usize,
    center: f64,
    step: f64,
) -> Result<(f64, f64)> {
    if n < 3 || !(range.0 < range.1) || !(step > 0.0) {
        return Err(Error::Domain("invalid sampling for curvature extraction".into()));
    }
    let zs: Vec<f64> = (0..n)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64)
        .collect();
    let us: Vec<f64> = zs.iter().map(|&z| u(z)).collect();
    let best = (1..n - 1)
        .filter(|&i| us[i] <= us[i - 1] && us[i] <= us[i + 1])
        .min_by(|&a, &b| (zs[a] - center).abs().total_cmp(&(zs[b] - center).abs()))
        .ok_or_else(|| Error::State("corrugation is washed out: no local minimum near the well center".into()))?;
    let z0 = golden_min(u, zs[best - 1], zs[best + 1]);
    let curv = (u(z0 + step) - 2.0 * u(z0) + u(z0 - step)) / (step * step);
    if !(curv > 0.0) {
        return Err(Error::State(format!("non-positive curvature {curv:e} at the central minimum")));
    }
    Ok((z0, curv))
}

/// Harmonic frequency of the corrugation well nearest the target well center.
pub fn omega_int(model: &TrapModel, state: &CrystalState, target_string: usize) -> Result<f64> {
    let profile = corrugation_potential(model, state, target_string, 2001)?;
    omega_int_from_profile(model, state, &profile)
}

fn omega_int_from_profile(model: &TrapModel, state: &CrystalState, profile: &CorrugationProfile) -> Result<f64> {
    let target = profile.target_string;
    let well = *model.axial_well(target)?;
    let k = coulomb_constant(model.species().charge, model.species().charge);
    let others: Vec<Vector3<f64>> = (0..state.len())
        .filter(|&i| state.string_labels[i] != target)
        .map(|i| state.positions[i])
        .collect();
    let spacing = {
        let other = (0..string_count(state)).find(|&s| s != target).unwrap_or(0);
        mean_spacing(state, &state.string(target))
            .or_else(|| mean_spacing(state, &state.string(other)))
            .unwrap_or(1e-6)
    };
    let line = profile.line;
    let u = move |z: f64| {
        let p = Vector3::new(line[0], line[1], z);
        others.iter().map(|o| k / (p - o).norm()).sum::<f64>() + model.total_derivs_unchecked(&p, &well).value
    };
    let first = profile.samples.first().expect("samples").z;
    let last = profile.samples.last().expect("samples").z;
    let (_, curv) = central_minimum_curvature(&u, (first, last), profile.samples.len(), well.center_z, spacing / 100.0)?;
    Ok((curv / model.species().mass).sqrt())
}

/// Index of the ion nearest the well center; ties go to negative `z`.
fn center_ion(state: &CrystalState, members: &[usize], center_z: f64) -> usize {
    let mut best = members[0];
    for &i in members {
        let d = (state.positions[i].z - center_z).abs();
        let db = (state.positions[best].z - center_z).abs();
        if d < db || (d == db && state.positions[i].z < state.positions[best].z) {
            best = i;
        }
    }
    best
}

/// Axial curvature frequency at the central ion from its own string.
pub fn omega_zero(model: &TrapModel, state: &CrystalState, target_string: usize, variant: OmegaZeroVariant) -> Result<f64> {
    let members = state.string(target_string);
    if members.len() < 2 {
        return Err(Error::State(format!(
            "string {target_string} has {} ion(s); omega_0 needs at least 2",
            members.len()
        )));
    }
    let well = model.axial_well(target_string)?;
    let c = center_ion(state, &members, well.center_z);
    let k = coulomb_constant(model.species().charge, model.species().charge);
    let p = state.positions[c];
    let mut curv = 0.0;
    for &j in &members {
        if j == c {
            continue;
        }
        let r = p - state.positions[j];
        let r2 = r.norm_squared();
        curv += k * (3.0 * r.z * r.z - r2) / (r2 * r2 * r2.sqrt());
    }
    if variant == OmegaZeroVariant::WithTrap {
        curv += model.total_derivs_unchecked(&p, well).hessian[(2, 2)];
    }
    if !(curv > 0.0) {
        return Err(Error::State(format!("non-positive same-string curvature {curv:e}")));
    }
    Ok((curv / model.species().mass).sqrt())
}

/// Full report for `target_string`, using `nodes` for the barrier and the
/// node separation.
pub fn corrugation_parameter(model: &TrapModel, state: &CrystalState, target_string: usize) -> Result<CorrugationReport> {
    let nodes = find_nodes(model)?;
    corrugation_report_with_nodes(model, state, target_string, &nodes)
}

fn corrugation_report_with_nodes(
    model: &TrapModel,
    state: &CrystalState,
    target_string: usize,
    nodes: &NodeSet,
) -> Result<CorrugationReport> {
    let profile = corrugation_potential(model, state, target_string, 2001)?;
    let omega_int = omega_int_from_profile(model, state, &profile)?;
    let omega_zero = omega_zero(model, state, target_string, OmegaZeroVariant::WithTrap)?;
    let omega_zero_coulomb_only = omega_zero_fn(model, state, target_string)?;
    let ratio = omega_int / omega_zero;
    Ok(CorrugationReport {
        target_string,
        sample_line: profile.samples,
        omega_int,
        omega_zero,
        omega_zero_coulomb_only,
        eta: ratio * ratio,
        barrier: nodes.barrier.unwrap_or(0.0),
        node_separation: nodes.separation().unwrap_or(0.0),
    })
}

fn omega_zero_fn(model: &TrapModel, state: &CrystalState, target: usize) -> Result<f64> {
    omega_zero(model, state, target, OmegaZeroVariant::CoulombOnly)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoStringOptions {
    pub ions_per_string: usize,
    pub omega_z: f64,
    pub target_string: usize,
}

impl Default for TwoStringOptions {
    fn default() -> Self {
        TwoStringOptions {
            ions_per_string: 7,
            omega_z: angular(15e3),
            target_string: 0,
        }
    }
}

/// Wells at the two nodes of `model` and the equilibrium crystal in them.
pub fn two_string_crystal(model: &TrapModel, opts: &TwoStringOptions) -> Result<(TrapModel, CrystalState, NodeSet)> {
    let nodes = find_nodes(model)?;
    if nodes.topology != Topology::HorizontalPair {
        return Err(Error::State(format!(
            "two parallel strings need a horizontal_pair topology, found {}",
            nodes.topology
        )));
    }
    let m = model.with_wells(wells_at_nodes(&nodes, opts.omega_z, 0.0)?)?;
    let wells = assign_ions(&[opts.ions_per_string, opts.ions_per_string]);
    let state = solve_equilibrium(&m, &wells, &SolveOptions::default())?;
    Ok((m, state, nodes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaPoint {
    pub r: f64,
    pub separation: Option<f64>,
    pub eta: Option<f64>,
    pub omega_int: Option<f64>,
    pub omega_zero: Option<f64>,
    pub barrier: Option<f64>,
    pub error: Option<String>,
}

pub fn eta_sweep(model: &TrapModel, r_values: &[f64], opts: &TwoStringOptions) -> Vec<EtaPoint> {
    r_values
        .par_iter()
        .map(|&r| {
            let res = model.with_ratio(r).and_then(|m| {
                let (m, state, nodes) = two_string_crystal(&m, opts)?;
                corrugation_report_with_nodes(&m, &state, opts.target_string, &nodes)
            });
            match res {
                Ok(rep) => EtaPoint {
                    r,
                    separation: Some(rep.node_separation),
                    eta: Some(rep.eta),
                    omega_int: Some(rep.omega_int),
                    omega_zero: Some(rep.omega_zero),
                    barrier: Some(rep.barrier),
                    error: None,
                },
                Err(e) => EtaPoint {
                    r,
                    separation: None,
                    eta: None,
                    omega_int: None,
                    omega_zero: None,
                    barrier: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideStep {
    pub offset: f64,
    pub positions: Vec<Vector3<f64>>,
    pub energy: f64,
    /// Largest single-ion displacement since the previous step.
    pub max_displacement: f64,
    pub slip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideReport {
    pub moved_well: usize,
    /// Displacement above which a step counts as a slip.
    pub slip_threshold: f64,
    pub forward: Vec<SlideStep>,
    pub backward: Vec<SlideStep>,
    /// Largest position difference between the two sweeps at equal offsets.
    pub hysteresis: f64,
    pub error: Option<String>,
}

impl SlideReport {
    pub fn slip_count(&self) -> usize {
        self.forward.iter().chain(&self.backward).filter(|s| s.slip).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlideOptions {
    pub moved_well: usize,
    /// Slip threshold as a fraction of the mean inter-ion spacing.
    pub slip_fraction: f64,
}

impl Default for SlideOptions {
    fn default() -> Self {
        SlideOptions {
            moved_well: 1,
            slip_fraction: 0.1,
        }
    }
}

fn max_disp(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

/// Moves the axial center of one well through `offsets` and back, relaxing
/// the crystal from the previous step each time.
///
/// `model` carries the wells at zero offset and `initial` is an equilibrium
/// of it. A failed relaxation truncates the trajectory and sets `error`.
pub fn quasi_static_slide(
    model: &TrapModel,
    initial: &CrystalState,
    offsets: &[f64],
    opts: &SlideOptions,
) -> Result<SlideReport> {
    let base_z = model.axial_well(opts.moved_well)?.center_z;
    if offsets.is_empty() {
        return Err(Error::Domain("slide needs at least one offset".into()));
    }
    if !(opts.slip_fraction > 0.0) {
        return Err(Error::Domain("slip fraction must be > 0".into()));
    }
    let spacing = {
        let s: Vec<f64> = (0..string_count(initial))
            .filter_map(|k| mean_spacing(initial, &initial.string(k)))
            .collect();
        if s.is_empty() {
            return Err(Error::State("slide needs a string with at least two ions".into()));
        }
        s.iter().sum::<f64>() / s.len() as f64
    };
    let threshold = opts.slip_fraction * spacing;
    let solve_opts = SolveOptions {
        init: InitStrategy::Explicit(Vec::new()),
        ..SolveOptions::default()
    };

    let mut error = None;
    let mut pass = |order: &mut dyn Iterator<Item = f64>, start: Vec<Vector3<f64>>, out: &mut Vec<SlideStep>| {
        let mut prev = start;
        for off in order {
            let step = model
                .with_well_center_z(opts.moved_well, base_z + off)
                .and_then(|m| relax(&m, prev.clone(), &initial.wells, &solve_opts));
            match step {
                Ok(s) => {
                    let d = max_disp(&s.positions, &prev);
                    out.push(SlideStep {
                        offset: off,
                        energy: s.energy,
                        max_displacement: d,
                        slip: d > threshold,
                        positions: s.positions.clone(),
                    });
                    prev = s.positions;
                }
                Err(e) => {
                    error = Some(format!("offset {off:e} m: {e}"));
                    return false;
                }
            }
        }
        true
    };

    let mut forward = Vec::with_capacity(offsets.len());
    let mut backward = Vec::with_capacity(offsets.len());
    let ok = pass(&mut offsets.iter().copied(), initial.positions.clone(), &mut forward);
    if ok {
        let start = forward.last().map(|s| s.positions.clone()).unwrap_or_default();
        pass(&mut offsets.iter().rev().copied(), start, &mut backward);
    }
    backward.reverse();
    let hysteresis = if backward.len() == forward.len() {
        forward
            .iter()
            .zip(&backward)
            .map(|(f, b)| max_disp(&f.positions, &b.positions))
            .fold(0.0, f64::max)
    } else {
        f64::NAN
    };
    Ok(SlideReport {
        moved_well: opts.moved_well,
        slip_threshold: threshold,
        forward,
        backward,
        hysteresis,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{DriveConfig, IonSpecies};
    use crate::geometry::canonical_geometry;
    use crate::nodes::ratio_for_separation;
    use crate::units::{hertz, um};

    fn base() -> TrapModel {
        TrapModel::new(
            canonical_geometry(),
            DriveConfig::from_mhz(120.0, 0.9, 27.2).unwrap(),
            IonSpecies::calcium40(),
            vec![],
        )
        .unwrap()
    }

    fn at_separation(d_um: f64, per_string: usize) -> (TrapModel, CrystalState) {
        let b = base();
        let r = ratio_for_separation(&b, um(d_um), 1e-6).unwrap();
        let opts = TwoStringOptions {
            ions_per_string: per_string,
            ..Default::default()
        };
        let (m, s, _) = two_string_crystal(&b.with_ratio(r).unwrap(), &opts).unwrap();
        (m, s)
    }

    #[test]
    fn harmonic_profile_returns_input_frequency() {
        let m = 6.6e-26;
        let w = angular(42.1e3);
        let u = move |z: f64| 0.5 * m * w * w * (z - 3e-7) * (z - 3e-7);
        let (z0, c) = central_minimum_curvature(&u, (-5e-5, 5e-5), 501, 0.0, 2e-7).unwrap();
        assert!((z0 - 3e-7).abs() < 1e-12);
        assert!(((c / m).sqrt() - w).abs() < 1e-9 * w);
        let flat = |z: f64| -z * z;
        assert!(central_minimum_curvature(&flat, (-1.0, 1.0), 11, 0.0, 1e-3).is_err());
    }

    #[test]
    fn two_ion_coulomb_only_curvature() {
        let (m, s) = at_separation(40.0, 2);
        let w = omega_zero(&m, &s, 0, OmegaZeroVariant::CoulombOnly).unwrap();
        let members = s.string(0);
        let d = (s.positions[members[0]] - s.positions[members[1]]).norm();
        let k = coulomb_constant(m.species().charge, m.species().charge);
        let expected = (2.0 * k / (d * d * d) / m.species().mass).sqrt();
        assert!((w - expected).abs() < 1e-9 * expected);
        let mut single = s.clone();
        single.string_labels = vec![0, 1, 1, 1];
        assert!(omega_zero(&m, &single, 0, OmegaZeroVariant::WithTrap).is_err());
    }

    #[test]
    fn report_and_symmetry() {
        let (m, s) = at_separation(30.0, 7);
        assert_eq!(s.string(0).len(), 7);
        assert_eq!(s.string(1).len(), 7);
        let rep = corrugation_parameter(&m, &s, 0).unwrap();
        let ratio = rep.omega_int / rep.omega_zero;
        assert_eq!(rep.eta, ratio * ratio);
        assert!(rep.omega_zero > rep.omega_zero_coulomb_only);
        assert!((hertz(rep.omega_int) / 1e3) > 20.0, "{}", hertz(rep.omega_int));

        // the crystal is symmetric under (x, z) -> (-x, -z), so both strings
        // see the same corrugation
        let other = corrugation_parameter(&m, &s, 1).unwrap();
        assert!((other.eta - rep.eta).abs() < 1e-4 * rep.eta);
    }

    #[test]
    fn modulation_decays_with_distance() {
        let depths: Vec<f64> = [30.0, 45.0, 60.0]
            .iter()
            .map(|&d| {
                let (m, s) = at_separation(d, 7);
                corrugation_potential(&m, &s, 0, 801).unwrap().modulation_depth()
            })
            .collect();
        assert!(depths[0] > depths[1] && depths[1] > depths[2], "{depths:?}");
    }

    #[test]
    fn zero_offset_slide_is_a_fixpoint() {
        let (m, s) = at_separation(40.0, 3);
        let rep = quasi_static_slide(&m, &s, &[0.0; 5], &SlideOptions::default()).unwrap();
        assert!(rep.error.is_none());
        assert_eq!(rep.slip_count(), 0);
        for step in rep.forward.iter().chain(&rep.backward) {
            assert_eq!(step.positions, s.positions);
            assert_eq!(step.max_displacement, 0.0);
        }
        assert_eq!(rep.hysteresis, 0.0);
    }

    #[test]
    fn single_string_state_is_rejected() {
        let (m, mut s) = at_separation(40.0, 2);
        s.string_labels = vec![0; 4];
        assert!(corrugation_potential(&m, &s, 0, 101).is_err());
    }
}
