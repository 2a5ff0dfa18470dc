//! Small-oscillation normal modes about a crystal equilibrium.
//!
//! All ions share one mass, so the mass-weighted Hessian is `H / m` and the
//! eigenvectors are plain displacement patterns. Modes are labelled by their
//! dominant axis and by overlap with per-string center-of-mass and stretch
//! templates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::crystal::{assign_ions, energy_hessian, solve_equilibrium, CrystalState, SolveOptions};
use crate::fields::TrapModel;
use crate::nodes::{find_nodes, wells_at_nodes, Topology};
use crate::units::angular;
use crate::{Error, Result};

/// Template overlap required for a `com` or `stretch` label.
pub const LABEL_OVERLAP: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Com,
    Stretch,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    #[serde(rename = "in")]
    In,
    #[serde(rename = "out")]
    Out,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeLabel {
    pub axis: Axis,
    pub pattern: Pattern,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSpectrum {
    /// Angular frequencies, ascending.
    pub frequencies: Vec<f64>,
    /// Column `k` is the normalized eigenvector of mode `k`, laid out as
    /// `(x0, y0, z0, x1, ...)`.
    pub eigenvectors: DMatrix<f64>,
    pub labels: Vec<ModeLabel>,
    /// Eigenvalues of `H / m` (s^-2), ascending.
    pub eigenvalues: Vec<f64>,
}

fn require_converged(state: &CrystalState) -> Result<()> {
    if !state.converged {
        return Err(Error::State("normal modes need a converged crystal".into()));
    }
    Ok(())
}

/// Hessian of the crystal energy at the equilibrium (J/m^2).
pub fn hessian(model: &TrapModel, state: &CrystalState) -> Result<DMatrix<f64>> {
    require_converged(state)?;
    energy_hessian(model, &state.positions, &state.wells)
}

pub fn normal_modes(model: &TrapModel, state: &CrystalState) -> Result<ModeSpectrum> {
    let h = hessian(model, state)?;
    let mass = model.species().mass;
    let eig = SymmetricEigen::new(h / mass);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let lo = eigenvalues[0];
    let hi = *eigenvalues.last().expect("non-empty crystal");
    if lo < -1e-6 * hi.abs() {
        return Err(Error::Saddle {
            min_eigenvalue: lo,
            max_eigenvalue: hi,
        });
    }
    let n = eigenvalues.len();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    let strings = string_members(state);
    let labels = (0..n)
        .map(|k| classify(&vectors.column(k).into_owned(), &strings))
        .collect();
    Ok(ModeSpectrum {
        frequencies: eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect(),
        eigenvectors: vectors,
        labels,
        eigenvalues,
    })
}

/// Ion indices of each string, sorted by `z`.
fn string_members(state: &CrystalState) -> Vec<Vec<usize>> {
    let n_strings = state.string_labels.iter().copied().max().map_or(0, |m| m + 1);
    (0..n_strings).map(|s| state.string(s)).filter(|v| !v.is_empty()).collect()
}

fn normalized(mut t: Vec<f64>) -> Vec<f64> {
    let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        t.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn com_template(n: usize) -> Vec<f64> {
    normalized(vec![1.0; n])
}

fn stretch_template(n: usize) -> Vec<f64> {
    let c = 0.5 * (n as f64 - 1.0);
    normalized((0..n).map(|i| i as f64 - c).collect())
}

fn classify(v: &DVector<f64>, strings: &[Vec<usize>]) -> ModeLabel {
    let weights: Vec<f64> = (0..3)
        .map(|a| (0..v.len() / 3).map(|i| v[3 * i + a].powi(2)).sum())
        .collect();
    let a = (0..3).max_by(|&i, &j| weights[i].total_cmp(&weights[j])).unwrap_or(2);
    let axis = [Axis::X, Axis::Y, Axis::Z][a];
    let total: f64 = weights.iter().sum();

    let amplitudes = |template: fn(usize) -> Vec<f64>| -> Vec<f64> {
        strings
            .iter()
            .map(|members| {
                let t = template(members.len());
                members.iter().zip(&t).map(|(&i, w)| v[3 * i + a] * w).sum()
            })
            .collect()
    };
    let com = amplitudes(com_template);
    let stretch: Vec<f64> = amplitudes(stretch_template);
    let score = |amps: &[f64]| amps.iter().map(|x| x * x).sum::<f64>() / total;
    let stretch_ok = strings.iter().any(|m| m.len() > 1);
    let (pattern, amps) = if score(&com) > LABEL_OVERLAP {
        (Pattern::Com, com)
    } else if stretch_ok && score(&stretch) > LABEL_OVERLAP {
        (Pattern::Stretch, stretch)
    } else {
        (Pattern::Other, Vec::new())
    };
    let phase = if amps.len() == 2 {
        let sq = amps[0] * amps[0] + amps[1] * amps[1];
        // both strings must take part
        if amps[0].powi(2) > 0.1 * sq && amps[1].powi(2) > 0.1 * sq {
            if amps[0] * amps[1] > 0.0 {
                Phase::In
            } else {
                Phase::Out
            }
        } else {
            Phase::NotApplicable
        }
    } else {
        Phase::NotApplicable
    };
    ModeLabel { axis, pattern, phase }
}

/// Axial-mode templates for two strings: `[com in, com out, stretch in,
/// stretch out]`, as `3N` displacement vectors.
fn two_string_templates(strings: &[Vec<usize>], n_ions: usize) -> [DVector<f64>; 4] {
    let build = |pattern: fn(usize) -> Vec<f64>, sign: f64| {
        let mut v = DVector::zeros(3 * n_ions);
        for (s, members) in strings.iter().enumerate() {
            let t = pattern(members.len());
            let f = if s == 0 { 1.0 } else { sign };
            for (&i, w) in members.iter().zip(&t) {
                v[3 * i + 2] = f * w;
            }
        }
        v.normalize()
    };
    [
        build(com_template, 1.0),
        build(com_template, -1.0),
        build(stretch_template, 1.0),
        build(stretch_template, -1.0),
    ]
}

/// Mode index and squared overlap best matching each template, assigning
/// each mode at most once.
fn match_templates(spec: &ModeSpectrum, templates: &[DVector<f64>]) -> Vec<(usize, f64)> {
    let n = spec.frequencies.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, tv) in templates.iter().enumerate() {
        for k in 0..n {
            let o = spec.eigenvectors.column(k).dot(tv).powi(2);
            pairs.push((o, t, k));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![(usize::MAX, 0.0); templates.len()];
    let mut used = vec![false; n];
    for (o, t, k) in pairs {
        if out[t].0 == usize::MAX && !used[k] {
            out[t] = (k, o);
            used[k] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegeneracyOptions {
    pub omega_z: f64,
    pub ions_per_string: usize,
}

impl Default for DegeneracyOptions {
    fn default() -> Self {
        DegeneracyOptions {
            omega_z: angular(0.19e6),
            ions_per_string: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegeneracyPoint {
    pub r: f64,
    pub separation: Option<f64>,
    /// Axial frequencies over `omega_z`: com in, com out, stretch in,
    /// stretch out.
    pub normalized: Option<[f64; 4]>,
    /// Squared overlap of each matched mode with its template.
    pub overlaps: Option<[f64; 4]>,
    pub error: Option<String>,
}

impl DegeneracyPoint {
    /// Relative in/out-of-phase splitting of the com and stretch pairs.
    pub fn splitting(&self) -> Option<[f64; 2]> {
        self.normalized
            .map(|f| [(f[1] - f[0]).abs() / f[0], (f[3] - f[2]).abs() / f[2]])
    }
}

/// Axial spectrum of two parallel strings for a single ratio.
pub fn two_string_axial_modes(model: &TrapModel, opts: &DegeneracyOptions) -> Result<(f64, [f64; 4], [f64; 4])> {
    let set = find_nodes(model)?;
    if set.topology != Topology::HorizontalPair {
        return Err(Error::State(format!(
            "two parallel strings need a horizontal_pair topology, found {}",
            set.topology
        )));
    }
    let d = set.separation().expect("pair");
    let m = model.with_wells(wells_at_nodes(&set, opts.omega_z, 0.0)?)?;
    let wells = assign_ions(&[opts.ions_per_string, opts.ions_per_string]);
    let state = solve_equilibrium(&m, &wells, &SolveOptions::default())?;
    let spec = normal_modes(&m, &state)?;
    let strings = string_members(&state);
    if strings.len() != 2 {
        return Err(Error::State(format!("expected two strings, found {}", strings.len())));
    }
    let templates = two_string_templates(&strings, state.len());
    let matched = match_templates(&spec, &templates);
    let mut freq = [0.0; 4];
    let mut over = [0.0; 4];
    for (t, (k, o)) in matched.into_iter().enumerate() {
        freq[t] = spec.frequencies[k] / opts.omega_z;
        over[t] = o;
    }
    Ok((d, freq, over))
}

/// Normalized axial frequencies of a two-string crystal across ratios.
pub fn degeneracy_sweep(model: &TrapModel, r_values: &[f64], opts: &DegeneracyOptions) -> Vec<DegeneracyPoint> {
    r_values
        .par_iter()
        .map(|&r| {
            let res = model.with_ratio(r).and_then(|m| two_string_axial_modes(&m, opts));
            match res {
                Ok((d, f, o)) => DegeneracyPoint {
                    r,
                    separation: Some(d),
                    normalized: Some(f),
                    overlaps: Some(o),
                    error: None,
                },
                Err(e) => DegeneracyPoint {
                    r,
                    separation: None,
                    normalized: None,
                    overlaps: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{DriveConfig, IonSpecies};
    use crate::geometry::canonical_geometry;

    fn base(r: f64) -> TrapModel {
        TrapModel::new(
            canonical_geometry(),
            DriveConfig::from_mhz(85.0, r, 27.2).unwrap(),
            IonSpecies::calcium40(),
            vec![],
        )
        .unwrap()
    }

    fn single_well(n: usize) -> (TrapModel, CrystalState) {
        let m = base(0.0);
        let set = find_nodes(&m).unwrap();
        let m = m.with_wells(wells_at_nodes(&set, angular(0.19e6), 0.0).unwrap()).unwrap();
        let s = solve_equilibrium(&m, &vec![0; n], &SolveOptions::default()).unwrap();
        (m, s)
    }

    #[test]
    fn one_ion_axial_entry() {
        let m = base(0.0);
        let set = find_nodes(&m).unwrap();
        let w = wells_at_nodes(&set, angular(0.19e6), 0.0).unwrap()[0].without_deconfinement();
        let m = m.with_wells(vec![w]).unwrap();
        let s = solve_equilibrium(&m, &[0], &SolveOptions::default()).unwrap();
        let h = hessian(&m, &s).unwrap();
        let expected = m.species().mass * angular(0.19e6).powi(2);
        assert!((h[(2, 2)] - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn three_ion_axial_ratios() {
        let (m, s) = single_well(3);
        let spec = normal_modes(&m, &s).unwrap();
        let z: Vec<f64> = spec
            .labels
            .iter()
            .zip(&spec.frequencies)
            .filter(|(l, _)| l.axis == Axis::Z)
            .map(|(_, f)| *f)
            .collect();
        assert_eq!(z.len(), 3);
        let w = angular(0.19e6);
        assert!((z[0] / w - 1.0).abs() < 1e-9);
        assert!((z[1] / w - 3f64.sqrt()).abs() < 1e-4);
        assert!((z[2] / w - (29.0f64 / 5.0).sqrt()).abs() < 1e-4);
        let zl: Vec<_> = spec.labels.iter().filter(|l| l.axis == Axis::Z).collect();
        assert_eq!(zl[0].pattern, Pattern::Com);
        assert_eq!(zl[1].pattern, Pattern::Stretch);
        assert_eq!(zl[2].pattern, Pattern::Other);
    }

    #[test]
    fn trace_identity_and_residuals() {
        let (m, s) = single_well(4);
        let spec = normal_modes(&m, &s).unwrap();
        let mass = m.species().mass;
        let sum: f64 = spec.eigenvalues.iter().sum();
        let ext: f64 = s
            .positions
            .iter()
            .zip(&s.wells)
            .map(|(p, &w)| m.total_potential_derivatives(p, w).unwrap().hessian.trace())
            .sum::<f64>()
            / mass;
        assert!((sum - ext).abs() < 1e-8 * ext.abs(), "{sum} vs {ext}");

        let h = hessian(&m, &s).unwrap() / mass;
        let scale = spec.eigenvalues.last().unwrap().abs();
        for k in 0..spec.frequencies.len() {
            let v = spec.eigenvectors.column(k);
            let r = &h * v - v * spec.eigenvalues[k];
            assert!(r.norm() < 1e-8 * scale);
        }
        let vt = spec.eigenvectors.transpose() * &spec.eigenvectors;
        assert!((vt - DMatrix::identity(12, 12)).amax() < 1e-10);
    }

    #[test]
    fn relabeling_leaves_spectrum_unchanged() {
        let (m, s) = single_well(3);
        let a = normal_modes(&m, &s).unwrap();
        let mut t = s.clone();
        t.positions.reverse();
        t.wells.reverse();
        t.string_labels.reverse();
        let b = normal_modes(&m, &t).unwrap();
        for (x, y) in a.frequencies.iter().zip(&b.frequencies) {
            assert!((x - y).abs() < 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn unconverged_state_is_rejected() {
        let (m, mut s) = single_well(2);
        s.converged = false;
        assert!(hessian(&m, &s).is_err());
    }

    #[test]
    fn two_strings_com_in_phase_is_exact() {
        let (d, f, o) = two_string_axial_modes(&base(1.0), &DegeneracyOptions::default()).unwrap();
        assert!(d > 0.0);
        assert!((f[0] - 1.0).abs() < 1e-9, "{f:?}");
        assert!(o.iter().all(|&x| x > LABEL_OVERLAP), "{o:?}");
        // the neighbouring string softens every axial mode except the
        // uniform translation, so stretch frequencies sit just below sqrt(3)
        let s3 = 3f64.sqrt();
        assert!(f[1] < 1.0, "{f:?}");
        assert!(f[2] < s3 && f[3] < s3 && f[2] > 0.95 * s3 && f[3] > 0.95 * s3, "{f:?}");
    }
}
