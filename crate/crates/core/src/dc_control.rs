//! DC electrode voltages from linear constraints on the DC potential.
//!
//! Every constraint (potential, a field component, or a directional second
//! derivative at a point) is linear in the electrode voltages, `A v = b`.
//! Among all solutions the one with the smallest `|v|` is returned, via the
//! KKT system when `A` has full row rank and via the SVD pseudo-inverse
//! otherwise.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    rect_derivatives, strip_derivatives, PotentialDerivatives, RectElectrode, StripElectrode, TrapGeometry,
};
use crate::units::um;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DcElectrode {
    Rect(RectElectrode),
    /// Strip infinite along `z`, such as a DC offset on the center-RF
    /// electrode.
    Strip { strip: StripElectrode, label: String },
}

impl DcElectrode {
    pub fn label(&self) -> &str {
        match self {
            DcElectrode::Rect(r) => &r.label,
            DcElectrode::Strip { label, .. } => label,
        }
    }

    /// Unit-voltage potential, gradient and Hessian at `p`.
    pub fn derivatives(&self, p: &Vector3<f64>) -> Result<PotentialDerivatives> {
        match self {
            DcElectrode::Rect(r) => rect_derivatives(r, p),
            DcElectrode::Strip { strip, .. } => strip_derivatives(strip, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcBasis {
    pub electrodes: Vec<DcElectrode>,
}

impl DcBasis {
    pub fn new(electrodes: Vec<DcElectrode>) -> Result<Self> {
        if electrodes.is_empty() {
            return Err(Error::Domain("DC basis has no electrodes".into()));
        }
        Ok(DcBasis { electrodes })
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    /// Potential, gradient and Hessian of the basis driven at `voltages`.
    pub fn evaluate(&self, voltages: &[f64], p: &Vector3<f64>) -> Result<PotentialDerivatives> {
        if voltages.len() != self.len() {
            return Err(Error::Domain(format!(
                "{} voltages for {} electrodes",
                voltages.len(),
                self.len()
            )));
        }
        let mut acc = PotentialDerivatives {
            potential: 0.0,
            gradient: Vector3::zeros(),
            hessian: nalgebra::Matrix3::zeros(),
        };
        for (e, &v) in self.electrodes.iter().zip(voltages) {
            let d = e.derivatives(p)?.scaled(v);
            acc.potential += d.potential;
            acc.gradient += d.gradient;
            acc.hessian += d.hessian;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DcConstraint {
    /// `phi(point) = value` (V).
    Potential { point: [f64; 3], value: f64 },
    /// `d phi / d x_axis (point) = value` (V/m).
    Gradient { point: [f64; 3], axis: usize, value: f64 },
    /// `d^2 phi / ds^2 (point) = value` along the unit `direction` (V/m^2).
    Curvature {
        point: [f64; 3],
        direction: [f64; 3],
        value: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DcConstraintSet {
    pub constraints: Vec<DcConstraint>,
    /// Uniform stray field (V/m) the DC electrodes have to compensate.
    #[serde(default)]
    pub stray_field: Option<[f64; 3]>,
}

impl DcConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero DC field (all three components) at `point`.
    pub fn null_point(mut self, point: [f64; 3]) -> Self {
        for axis in 0..3 {
            self.constraints.push(DcConstraint::Gradient { point, axis, value: 0.0 });
        }
        self
    }

    pub fn curvature(mut self, point: [f64; 3], direction: [f64; 3], value: f64) -> Self {
        self.constraints.push(DcConstraint::Curvature { point, direction, value });
        self
    }

    pub fn potential(mut self, point: [f64; 3], value: f64) -> Self {
        self.constraints.push(DcConstraint::Potential { point, value });
        self
    }

    pub fn with_stray_field(mut self, field: [f64; 3]) -> Self {
        self.stray_field = Some(field);
        self
    }

    /// Rows of `A` and entries of `b`.
    pub fn system(&self, basis: &DcBasis) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let m = self.constraints.len();
        let n = basis.len();
        let stray = Vector3::from(self.stray_field.unwrap_or([0.0; 3]));
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for (i, c) in self.constraints.iter().enumerate() {
            let point = match c {
                DcConstraint::Potential { point, .. }
                | DcConstraint::Gradient { point, .. }
                | DcConstraint::Curvature { point, .. } => Vector3::from(*point),
            };
            let derivs: Vec<PotentialDerivatives> = basis
                .electrodes
                .iter()
                .map(|e| e.derivatives(&point))
                .collect::<Result<_>>()?;
            // the stray field adds phi_s = -E_s . r to the DC potential
            match c {
                DcConstraint::Potential { value, .. } => {
                    for (k, d) in derivs.iter().enumerate() {
                        a[(i, k)] = d.potential;
                    }
                    b[i] = value + stray.dot(&point);
                }
                DcConstraint::Gradient { axis, value, .. } => {
                    if *axis > 2 {
                        return Err(Error::Domain(format!("gradient axis must be 0, 1 or 2, got {axis}")));
                    }
                    for (k, d) in derivs.iter().enumerate() {
                        a[(i, k)] = d.gradient[*axis];
                    }
                    b[i] = value + stray[*axis];
                }
                DcConstraint::Curvature { direction, value, .. } => {
                    let u = Vector3::from(*direction);
                    let norm = u.norm();
                    if !(norm > 0.0) {
                        return Err(Error::Domain("curvature direction must be non-zero".into()));
                    }
                    let u = u / norm;
                    for (k, d) in derivs.iter().enumerate() {
                        a[(i, k)] = (u.transpose() * d.hessian * u)[0];
                    }
                    b[i] = *value;
                }
            }
        }
        Ok((a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DcMethod {
    Kkt,
    PseudoInverse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcSolution {
    pub voltages: Vec<f64>,
    /// `A v - b` per constraint, in the constraint's own units.
    pub residuals: Vec<f64>,
    pub feasible: bool,
    /// Constraints that could not be met.
    pub infeasible: Vec<usize>,
    pub rank: usize,
    pub method: DcMethod,
}

/// Relative residual above which a constraint counts as violated.
pub const FEASIBILITY_TOL: f64 = 1e-6;

pub fn solve_dc_voltages(basis: &DcBasis, constraints: &DcConstraintSet) -> Result<DcSolution> {
    if basis.is_empty() {
        return Err(Error::Domain("DC basis has no electrodes".into()));
    }
    if constraints.constraints.is_empty() {
        return Err(Error::Domain("no DC constraints given".into()));
    }
    let (a, b) = constraints.system(basis)?;
    let (m, n) = a.shape();

    // rows in wildly different units (V, V/m, V/m^2): normalize
    let norms: Vec<f64> = (0..m).map(|i| a.row(i).norm()).collect();
    let mut an = a.clone();
    let mut bn = b.clone();
    for i in 0..m {
        if norms[i] > 0.0 {
            an.row_mut(i).scale_mut(1.0 / norms[i]);
            bn[i] /= norms[i];
        }
    }
    let svd = an.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE) * (m.max(n) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();

    let (v, method) = if rank == m && m <= n {
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).fill_with_identity();
        kkt.view_mut((0, n), (n, m)).copy_from(&an.transpose());
        kkt.view_mut((n, 0), (m, n)).copy_from(&an);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(n, m).copy_from(&bn);
        match kkt.lu().solve(&rhs) {
            Some(sol) => (sol.rows(0, n).into_owned(), DcMethod::Kkt),
            None => (svd.solve(&bn, tol).map_err(|e| Error::State(e.to_string()))?, DcMethod::PseudoInverse),
        }
    } else {
        (svd.solve(&bn, tol).map_err(|e| Error::State(e.to_string()))?, DcMethod::PseudoInverse)
    };

    let residual = &a * &v - &b;
    let vnorm = v.norm();
    let infeasible: Vec<usize> = (0..m)
        .filter(|&i| {
            let scale = norms[i] * vnorm + b[i].abs();
            residual[i].abs() > FEASIBILITY_TOL * scale.max(f64::MIN_POSITIVE)
                && !(scale == 0.0 && residual[i] == 0.0)
        })
        .collect();
    if !infeasible.is_empty() {
        log::warn!("{} DC constraint(s) cannot be met: {infeasible:?}", infeasible.len());
    }
    Ok(DcSolution {
        voltages: v.iter().copied().collect(),
        residuals: residual.iter().copied().collect(),
        feasible: infeasible.is_empty(),
        infeasible,
        rank,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcFieldPoint {
    pub point: [f64; 3],
    pub potential: f64,
    /// `grad phi` (V/m); the field is its negative.
    pub gradient: [f64; 3],
    /// Hessian of `phi` (V/m^2), row-major.
    pub hessian: [[f64; 3]; 3],
}

pub fn dc_field_check(basis: &DcBasis, voltages: &[f64], points: &[[f64; 3]]) -> Result<Vec<DcFieldPoint>> {
    points
        .iter()
        .map(|p| {
            let d = basis.evaluate(voltages, &Vector3::from(*p))?;
            let h = d.hessian;
            Ok(DcFieldPoint {
                point: *p,
                potential: d.potential,
                gradient: [d.gradient.x, d.gradient.y, d.gradient.z],
                hessian: [
                    [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
                    [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
                    [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
                ],
            })
        })
        .collect()
}

/// Illustrative nine-electrode DC layout for a strip geometry: the side DC
/// strips split into two end segments and one middle segment each, two wide
/// outer pads beyond the RF strips, and a DC offset on the center-RF strip.
///
/// The segment lengths are placeholders, not a measured layout.
pub fn example_nine_electrode_basis(geometry: &TrapGeometry) -> Result<DcBasis> {
    use crate::geometry::ElectrodeRole;
    let sides: Vec<&StripElectrode> = geometry.strips_with_role(ElectrodeRole::SideDc).collect();
    let center = geometry
        .strips_with_role(ElectrodeRole::CenterRf)
        .next()
        .ok_or_else(|| Error::Domain("geometry has no center-RF strip".into()))?;
    let rf_outer = geometry
        .strips_with_role(ElectrodeRole::Rf)
        .map(|s| s.x_max.abs().max(s.x_min.abs()))
        .fold(0.0, f64::max);
    if sides.len() != 2 || rf_outer == 0.0 {
        return Err(Error::Domain("example layout needs two side DC strips and outer RF strips".into()));
    }
    let (mid, end) = (um(250.0), um(1500.0));
    let mut e = Vec::new();
    for (tag, s) in [("left", sides[0]), ("right", sides[1])] {
        e.push(DcElectrode::Rect(RectElectrode::new(s.x_min, s.x_max, -end, -mid, format!("end_{tag}_neg"))?));
        e.push(DcElectrode::Rect(RectElectrode::new(s.x_min, s.x_max, mid, end, format!("end_{tag}_pos"))?));
        e.push(DcElectrode::Rect(RectElectrode::new(s.x_min, s.x_max, -mid, mid, format!("middle_{tag}"))?));
    }
    let pad = um(500.0);
    let gap = geometry.gap;
    e.push(DcElectrode::Rect(RectElectrode::new(-rf_outer - gap - pad, -rf_outer - gap, -end, end, "side_left")?));
    e.push(DcElectrode::Rect(RectElectrode::new(rf_outer + gap, rf_outer + gap + pad, -end, end, "side_right")?));
    e.push(DcElectrode::Strip {
        strip: *center,
        label: "center_rf".into(),
    });
    DcBasis::new(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonical_geometry;

    fn basis() -> DcBasis {
        example_nine_electrode_basis(&canonical_geometry()).unwrap()
    }

    #[test]
    fn single_unknown() {
        let r = RectElectrode::new(-1e-4, 1e-4, -1e-4, 1e-4, "a").unwrap();
        let b = DcBasis::new(vec![DcElectrode::Rect(r.clone())]).unwrap();
        let p = [1e-5, 5e-5, 2e-5];
        let phi1 = rect_derivatives(&r, &Vector3::from(p)).unwrap().potential;
        let c = DcConstraintSet::new().potential(p, 5.0 * phi1);
        let s = solve_dc_voltages(&b, &c).unwrap();
        assert!((s.voltages[0] - 5.0).abs() < 1e-12);
        assert!(s.feasible);
    }

    #[test]
    fn symmetric_constraints_give_symmetric_voltages() {
        let b = basis();
        let (x, y) = (um(20.0), um(80.9));
        let c = DcConstraintSet::new()
            .null_point([-x, y, 0.0])
            .null_point([x, y, 0.0])
            .curvature([-x, y, 0.0], [0.0, 0.0, 1.0], 1e7)
            .curvature([x, y, 0.0], [0.0, 0.0, 1.0], 1e7);
        let s = solve_dc_voltages(&b, &c).unwrap();
        let v = &s.voltages;
        assert!(v.iter().any(|x| x.abs() > 1e-3));
        // left/right partners: (0, 3), (1, 4), (2, 5), (6, 7)
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (l, r) in [(0, 3), (1, 4), (2, 5), (6, 7)] {
            assert!((v[l] - v[r]).abs() < 1e-8 * scale, "{l}/{r}: {} {}", v[l], v[r]);
        }
        let check = dc_field_check(&b, v, &[[-x, y, 0.0], [x, y, 0.0]]).unwrap();
        for p in &check {
            assert!(p.gradient.iter().all(|g| g.abs() < 1e-6), "{:?}", p.gradient);
            assert!((p.hessian[2][2] - 1e7).abs() < 1e-9 * 1e7);
        }
    }

    #[test]
    fn duplicated_rows_change_nothing() {
        let b = basis();
        let p = [um(20.0), um(80.9), 0.0];
        let c = DcConstraintSet::new().null_point(p).curvature(p, [0.0, 0.0, 1.0], 2e7);
        let mut dup = c.clone();
        dup.constraints.extend(c.constraints.clone());
        let s1 = solve_dc_voltages(&b, &c).unwrap();
        let s2 = solve_dc_voltages(&b, &dup).unwrap();
        assert_eq!(s1.method, DcMethod::Kkt);
        assert_eq!(s2.method, DcMethod::PseudoInverse);
        assert!(s2.feasible);
        for (a, b) in s1.voltages.iter().zip(&s2.voltages) {
            assert!((a - b).abs() < 1e-9 * a.abs().max(1e-6), "{a} {b}");
        }
    }

    #[test]
    fn contradictory_rows_are_flagged() {
        let b = basis();
        let p = [0.0, um(80.0), 0.0];
        let c = DcConstraintSet::new().potential(p, 1.0).potential(p, 2.0);
        let s = solve_dc_voltages(&b, &c).unwrap();
        assert!(!s.feasible);
        assert_eq!(s.infeasible, vec![0, 1]);
    }

    #[test]
    fn stray_field_is_compensated() {
        let b = basis();
        let p = [0.0, um(80.0), 0.0];
        let stray = [30.0, -12.0, 0.0];
        let c = DcConstraintSet::new().null_point(p).with_stray_field(stray);
        let s = solve_dc_voltages(&b, &c).unwrap();
        let chk = dc_field_check(&b, &s.voltages, &[p]).unwrap();
        // electrode gradient equals the stray field, so the net field is zero
        for k in 0..3 {
            assert!((chk[0].gradient[k] - stray[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_in_targets() {
        let b = basis();
        let p = [um(20.0), um(80.9), 0.0];
        let c = DcConstraintSet::new().null_point(p).curvature(p, [0.0, 0.0, 1.0], 2e7);
        let c3 = DcConstraintSet::new().null_point(p).curvature(p, [0.0, 0.0, 1.0], 6e7);
        let s1 = solve_dc_voltages(&b, &c).unwrap();
        let s3 = solve_dc_voltages(&b, &c3).unwrap();
        for (a, b) in s1.voltages.iter().zip(&s3.voltages) {
            assert!((3.0 * a - b).abs() < 1e-9 * b.abs().max(1e-9));
        }
    }

    #[test]
    fn field_check_matches_finite_differences() {
        let b = basis();
        let v: Vec<f64> = (0..b.len()).map(|k| (k as f64 - 4.0) * 0.7).collect();
        let p = [um(13.0), um(60.0), um(-40.0)];
        let d = dc_field_check(&b, &v, &[p]).unwrap()[0].clone();
        let h = 1e-9;
        let phi = |q: [f64; 3]| b.evaluate(&v, &Vector3::from(q)).unwrap().potential;
        for k in 0..3 {
            let mut a = p;
            let mut c = p;
            a[k] += h;
            c[k] -= h;
            let fd = (phi(a) - phi(c)) / (2.0 * h);
            let scale = d.gradient.iter().map(|g| g.abs()).fold(0.0, f64::max);
            assert!((fd - d.gradient[k]).abs() < 1e-6 * scale);
        }
        let zero = dc_field_check(&b, &vec![0.0; b.len()], &[p]).unwrap();
        assert!(zero[0].gradient.iter().all(|&g| g == 0.0));
        assert!(dc_field_check(&b, &[1.0], &[p]).is_err());
    }

    #[test]
    fn rejects_empty_inputs() {
        assert!(DcBasis::new(vec![]).is_err());
        assert!(solve_dc_voltages(&basis(), &DcConstraintSet::new()).is_err());
    }
}
