//! RF field, ponderomotive pseudopotential and the static single-ion
//! potential energy landscape (pseudopotential plus harmonic axial wells).
//!
//! The RF potential in the cross-section is the imaginary part of an analytic
//! function of `w = x + i y`, so the field, its Jacobian and the pseudopotential
//! Hessian all follow from the complex derivatives `G = F'`, `G'`, `G''` of the
//! summed strip kernels. With `kappa = q^2 / (4 m Omega^2)`:
//!
//! ```text
//! Phi      = kappa |G|^2
//! Phi_x    =  2 kappa Re(conj(G) G')      Phi_y  = -2 kappa Im(conj(G) G')
//! Phi_xx   =  2 kappa (|G'|^2 + Re(conj(G) G''))
//! Phi_yy   =  2 kappa (|G'|^2 - Re(conj(G) G''))
//! Phi_xy   = -2 kappa Im(conj(G) G'')
//! ```

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{strip_kernel, ElectrodeRole, TrapGeometry};
use crate::units::{angular, mev_to_joule, ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};
use crate::{Error, Result};

/// Upper bound on the RF voltage ratio accepted by [`DriveConfig`].
pub const MAX_RATIO: f64 = 3.0;

/// Mathieu-q proxy above which the pseudopotential approximation is flagged.
pub const STABILITY_Q_WARN: f64 = 0.3;

/// Relative phase of the center-RF drive. Only in-phase drive is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RfPhase {
    #[default]
    InPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    /// RF amplitude on the outer RF electrodes (V).
    pub v_rf: f64,
    /// `V_cRF / V_RF`.
    pub ratio_r: f64,
    /// Angular drive frequency (rad/s).
    pub omega_rf: f64,
    #[serde(default)]
    pub phase: RfPhase,
}

impl DriveConfig {
    pub fn new(v_rf: f64, ratio_r: f64, omega_rf: f64) -> Result<Self> {
        let d = DriveConfig {
            v_rf,
            ratio_r,
            omega_rf,
            phase: RfPhase::InPhase,
        };
        d.validate()?;
        Ok(d)
    }

    /// Drive given the ordinary frequency in MHz.
    pub fn from_mhz(v_rf: f64, ratio_r: f64, f_mhz: f64) -> Result<Self> {
        Self::new(v_rf, ratio_r, angular(f_mhz * 1e6))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_rf > 0.0 && self.v_rf.is_finite()) {
            return Err(Error::Domain(format!("v_rf must be > 0, got {}", self.v_rf)));
        }
        if !(self.omega_rf > 0.0 && self.omega_rf.is_finite()) {
            return Err(Error::Domain(format!("omega_rf must be > 0, got {}", self.omega_rf)));
        }
        if !(0.0..=MAX_RATIO).contains(&self.ratio_r) {
            return Err(Error::Domain(format!(
                "ratio R must lie in [0, {MAX_RATIO}], got {}",
                self.ratio_r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub mass: f64,
    pub charge: f64,
}

impl IonSpecies {
    pub fn new(mass: f64, charge: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Domain(format!("ion mass must be > 0, got {mass:e}")));
        }
        if charge == 0.0 || !charge.is_finite() {
            return Err(Error::Domain("ion charge must be non-zero".into()));
        }
        Ok(IonSpecies { mass, charge })
    }

    /// 40Ca+ with the integer mass number.
    pub fn calcium40() -> Self {
        IonSpecies {
            mass: 40.0 * ATOMIC_MASS_UNIT,
            charge: ELEMENTARY_CHARGE,
        }
    }
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::calcium40()
    }
}

/// Ideal harmonic DC well along `z`, centred on one RF node.
///
/// The DC potential energy is
/// `m wz^2 / 2 * [(z - cz)^2 - alpha (x - cx)^2 - beta (y - cy)^2]`; with
/// `alpha + beta = 1` it satisfies Laplace's equation. `(0, 0)` disables the
/// radial part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxialConfinement {
    pub omega_z: f64,
    pub center_z: f64,
    pub center_xy: [f64; 2],
    pub deconfinement: [f64; 2],
}

impl AxialConfinement {
    pub fn new(omega_z: f64, center_xy: [f64; 2], center_z: f64) -> Result<Self> {
        let w = AxialConfinement {
            omega_z,
            center_z,
            center_xy,
            deconfinement: [0.5, 0.5],
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_deconfinement(mut self, alpha: f64, beta: f64) -> Result<Self> {
        self.deconfinement = [alpha, beta];
        self.validate()?;
        Ok(self)
    }

    pub fn without_deconfinement(mut self) -> Self {
        self.deconfinement = [0.0, 0.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_z >= 0.0 && self.omega_z.is_finite()) {
            return Err(Error::Domain(format!("omega_z must be >= 0, got {}", self.omega_z)));
        }
        let [a, b] = self.deconfinement;
        let disabled = a == 0.0 && b == 0.0;
        if a < 0.0 || b < 0.0 || !(disabled || (a + b - 1.0).abs() < 1e-12) {
            return Err(Error::Domain(format!(
                "radial deconfinement split must be non-negative and sum to 1 (or be (0, 0)), got ({a}, {b})"
            )));
        }
        Ok(())
    }

    /// Energy, gradient and Hessian of the well at `p` for an ion of mass `m`.
    pub fn derivatives(&self, mass: f64, p: &Vector3<f64>) -> (f64, Vector3<f64>, Matrix3<f64>) {
        let k = mass * self.omega_z * self.omega_z;
        let [a, b] = self.deconfinement;
        let dx = p.x - self.center_xy[0];
        let dy = p.y - self.center_xy[1];
        let dz = p.z - self.center_z;
        let e = 0.5 * k * (dz * dz - a * dx * dx - b * dy * dy);
        let g = Vector3::new(-k * a * dx, -k * b * dy, k * dz);
        let h = Matrix3::from_diagonal(&Vector3::new(-k * a, -k * b, k));
        (e, g, h)
    }
}

/// Value, gradient and Hessian of a scalar field in the `(x, y)` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarDerivatives {
    pub value: f64,
    pub gradient: [f64; 2],
    pub hessian: [[f64; 2]; 2],
}

/// Value, gradient and Hessian in 3D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDerivatives {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

/// Effective RF strip: extent and voltage relative to `v_rf`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RfStrip {
    a: f64,
    b: f64,
    rel: f64,
}

/// The complete single-ion potential energy landscape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapModel {
    geometry: TrapGeometry,
    drive: DriveConfig,
    species: IonSpecies,
    axial_wells: Vec<AxialConfinement>,
    rf_strips: Vec<RfStrip>,
}

impl TrapModel {
    pub fn new(
        geometry: TrapGeometry,
        drive: DriveConfig,
        species: IonSpecies,
        axial_wells: Vec<AxialConfinement>,
    ) -> Result<Self> {
        drive.validate()?;
        IonSpecies::new(species.mass, species.charge)?;
        for w in &axial_wells {
            w.validate()?;
        }
        let mut m = TrapModel {
            geometry,
            drive,
            species,
            axial_wells,
            rf_strips: Vec::new(),
        };
        m.rebuild();
        Ok(m)
    }

    fn rebuild(&mut self) {
        let r = self.drive.ratio_r;
        self.rf_strips = self
            .geometry
            .effective_strips()
            .into_iter()
            .filter_map(|s| {
                let rel = match s.role {
                    ElectrodeRole::Rf => 1.0,
                    ElectrodeRole::CenterRf => r,
                    ElectrodeRole::SideDc | ElectrodeRole::Ground => 0.0,
                };
                (rel != 0.0).then_some(RfStrip {
                    a: s.x_min,
                    b: s.x_max,
                    rel,
                })
            })
            .collect();
    }

    pub fn geometry(&self) -> &TrapGeometry {
        &self.geometry
    }

    pub fn drive(&self) -> &DriveConfig {
        &self.drive
    }

    pub fn species(&self) -> &IonSpecies {
        &self.species
    }

    pub fn axial_wells(&self) -> &[AxialConfinement] {
        &self.axial_wells
    }

    pub fn axial_well(&self, index: usize) -> Result<&AxialConfinement> {
        self.axial_wells.get(index).ok_or_else(|| {
            Error::Domain(format!(
                "well index {index} out of range ({} wells defined)",
                self.axial_wells.len()
            ))
        })
    }

    pub fn with_drive(&self, drive: DriveConfig) -> Result<Self> {
        drive.validate()?;
        let mut m = self.clone();
        m.drive = drive;
        m.rebuild();
        Ok(m)
    }

    pub fn with_ratio(&self, ratio_r: f64) -> Result<Self> {
        self.with_drive(DriveConfig {
            ratio_r,
            ..self.drive
        })
    }

    pub fn with_v_rf(&self, v_rf: f64) -> Result<Self> {
        self.with_drive(DriveConfig { v_rf, ..self.drive })
    }

    pub fn with_wells(&self, wells: Vec<AxialConfinement>) -> Result<Self> {
        for w in &wells {
            w.validate()?;
        }
        let mut m = self.clone();
        m.axial_wells = wells;
        Ok(m)
    }

    /// Moves the axial center of one well.
    pub fn with_well_center_z(&self, index: usize, center_z: f64) -> Result<Self> {
        self.axial_well(index)?;
        let mut m = self.clone();
        m.axial_wells[index].center_z = center_z;
        Ok(m)
    }

    /// `q^2 / (4 m Omega^2)`.
    pub fn pseudo_prefactor(&self) -> f64 {
        let q = self.species.charge;
        q * q / (4.0 * self.species.mass * self.drive.omega_rf * self.drive.omega_rf)
    }

    /// `[G, G', G'']` of the total RF potential at `w`, in volts. No domain
    /// check.
    #[inline]
    pub(crate) fn rf_complex(&self, w: Complex64) -> [Complex64; 3] {
        let mut acc = [Complex64::new(0.0, 0.0); 3];
        for s in &self.rf_strips {
            let k = strip_kernel(s.a, s.b, w);
            for i in 0..3 {
                acc[i] += k[i] * s.rel;
            }
        }
        let v = self.drive.v_rf;
        [acc[0] * v, acc[1] * v, acc[2] * v]
    }

    /// `|E|^2` of the RF amplitude at `(x, y)` without domain checks.
    #[inline]
    pub(crate) fn field_norm_sqr(&self, x: f64, y: f64) -> f64 {
        self.rf_complex(Complex64::new(x, y))[0].norm_sqr()
    }

    /// RF field amplitude `E = -grad phi_RF` at `(x, y)`.
    pub fn rf_field(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        check_y(y)?;
        let g = self.rf_complex(Complex64::new(x, y))[0];
        Ok([-g.im, -g.re])
    }

    /// Jacobian `dE_i / dx_j` of the RF field amplitude.
    pub fn rf_field_jacobian(&self, x: f64, y: f64) -> Result<[[f64; 2]; 2]> {
        check_y(y)?;
        let g1 = self.rf_complex(Complex64::new(x, y))[1];
        Ok([[-g1.im, -g1.re], [-g1.re, g1.im]])
    }

    /// Ponderomotive pseudopotential `q^2 |E|^2 / (4 m Omega^2)` in joules.
    pub fn pseudopotential(&self, x: f64, y: f64) -> Result<f64> {
        check_y(y)?;
        Ok(self.pseudo_prefactor() * self.field_norm_sqr(x, y))
    }

    /// Pseudopotential with analytic gradient and Hessian.
    pub fn pseudopotential_derivatives(&self, x: f64, y: f64) -> Result<PlanarDerivatives> {
        check_y(y)?;
        Ok(self.pseudo_derivs_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn pseudo_derivs_unchecked(&self, x: f64, y: f64) -> PlanarDerivatives {
        let kappa = self.pseudo_prefactor();
        let [g, g1, g2] = self.rf_complex(Complex64::new(x, y));
        let gc = g.conj();
        let a = gc * g1;
        let b = gc * g2;
        let g1n = g1.norm_sqr();
        let hxy = -2.0 * kappa * b.im;
        PlanarDerivatives {
            value: kappa * g.norm_sqr(),
            gradient: [2.0 * kappa * a.re, -2.0 * kappa * a.im],
            hessian: [
                [2.0 * kappa * (g1n + b.re), hxy],
                [hxy, 2.0 * kappa * (g1n - b.re)],
            ],
        }
    }

    /// Mathieu-q proxy `2 |q| |dE/dr| / (m Omega^2)` at `(x, y)`.
    pub fn stability_q(&self, x: f64, y: f64) -> Result<f64> {
        check_y(y)?;
        let g1 = self.rf_complex(Complex64::new(x, y))[1];
        let w = self.drive.omega_rf;
        Ok(2.0 * self.species.charge.abs() * g1.norm() / (self.species.mass * w * w))
    }

    /// Total static potential energy of one ion in well `well_index`.
    pub fn total_potential(&self, p: &Vector3<f64>, well_index: usize) -> Result<f64> {
        Ok(self.total_potential_derivatives(p, well_index)?.value)
    }

    pub fn total_potential_derivatives(&self, p: &Vector3<f64>, well_index: usize) -> Result<SpatialDerivatives> {
        check_y(p.y)?;
        let well = self.axial_well(well_index)?;
        Ok(self.total_derivs_unchecked(p, well))
    }

    #[inline]
    pub(crate) fn total_derivs_unchecked(&self, p: &Vector3<f64>, well: &AxialConfinement) -> SpatialDerivatives {
        let ps = self.pseudo_derivs_unchecked(p.x, p.y);
        let (e, g, h) = well.derivatives(self.species.mass, p);
        let mut hess = h;
        hess[(0, 0)] += ps.hessian[0][0];
        hess[(0, 1)] += ps.hessian[0][1];
        hess[(1, 0)] += ps.hessian[1][0];
        hess[(1, 1)] += ps.hessian[1][1];
        SpatialDerivatives {
            value: ps.value + e,
            gradient: g + Vector3::new(ps.gradient[0], ps.gradient[1], 0.0),
            hessian: hess,
        }
    }
}

fn check_y(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "field is only defined above the electrode plane (y > 0), got y = {y:e}"
        )))
    }
}

/// Default clip level of [`pseudopotential_grid`] plots (0.1 eV).
pub fn default_clip_threshold() -> f64 {
    mev_to_joule(100.0)
}

/// Pseudopotential sampled on a regular `(x, y)` grid, row-major with `x`
/// varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[iy * xs.len() + ix]`, joules.
    pub values: Vec<f64>,
    pub clip_threshold: f64,
}

impl PotentialGrid {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.xs.len() + ix]
    }

    pub fn is_clipped(&self, ix: usize, iy: usize) -> bool {
        self.value(ix, iy) > self.clip_threshold
    }

    /// Grid points that are strict minima of their 8-neighbourhood.
    pub fn local_minima(&self) -> Vec<(usize, usize)> {
        let (nx, ny) = (self.xs.len(), self.ys.len());
        let mut out = Vec::new();
        for iy in 1..ny.saturating_sub(1) {
            for ix in 1..nx.saturating_sub(1) {
                let v = self.value(ix, iy);
                let mut is_min = true;
                'nb: for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let u = self.value((ix as i64 + dx) as usize, (iy as i64 + dy) as usize);
                        if u <= v {
                            is_min = false;
                            break 'nb;
                        }
                    }
                }
                if is_min {
                    out.push((ix, iy));
                }
            }
        }
        out
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect()
}

pub fn pseudopotential_grid(
    model: &TrapModel,
    x_range: (f64, f64),
    y_range: (f64, f64),
    n_x: usize,
    n_y: usize,
    clip_threshold: f64,
) -> Result<PotentialGrid> {
    if n_x < 2 || n_y < 2 {
        return Err(Error::Domain(format!("grid needs at least 2x2 points, got {n_x}x{n_y}")));
    }
    if !(x_range.0 < x_range.1) || !(y_range.0 < y_range.1) || !(y_range.0 > 0.0) {
        return Err(Error::Domain(format!(
            "invalid grid ranges x {x_range:?}, y {y_range:?} (need increasing ranges and y > 0)"
        )));
    }
    let xs = linspace(x_range.0, x_range.1, n_x);
    let ys = linspace(y_range.0, y_range.1, n_y);
    let kappa = model.pseudo_prefactor();
    let values: Vec<f64> = ys
        .par_iter()
        .flat_map_iter(|&y| xs.iter().map(move |&x| kappa * model.field_norm_sqr(x, y)))
        .collect();
    Ok(PotentialGrid {
        xs,
        ys,
        values,
        clip_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonical_geometry;
    use crate::units::um;

    fn model(r: f64) -> TrapModel {
        TrapModel::new(
            canonical_geometry(),
            DriveConfig::from_mhz(85.0, r, 27.2).unwrap(),
            IonSpecies::calcium40(),
            vec![],
        )
        .unwrap()
    }

    fn axis_node(m: &TrapModel) -> f64 {
        // upper zero of E_y on the symmetry axis by bisection
        let f = |y: f64| m.rf_field(0.0, y).unwrap()[1];
        let (mut lo, mut hi) = (um(120.0), um(260.0));
        assert!(f(lo) * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn validation() {
        assert!(DriveConfig::new(0.0, 0.5, 1.0).is_err());
        assert!(DriveConfig::new(1.0, -0.1, 1.0).is_err());
        assert!(DriveConfig::new(1.0, 0.5, 0.0).is_err());
        assert!(IonSpecies::new(-1.0, 1.0).is_err());
        assert!(IonSpecies::new(1.0, 0.0).is_err());
        let w = AxialConfinement::new(1.0, [0.0, 1e-4], 0.0).unwrap();
        assert!(w.with_deconfinement(0.3, 0.3).is_err());
        assert!(w.with_deconfinement(0.0, 0.0).is_ok());
        assert!(w.with_deconfinement(1.0, 0.0).is_ok());
    }

    #[test]
    fn field_on_axis_has_no_x_component() {
        for r in [0.0, 0.5, 0.9, 1.3] {
            let m = model(r);
            for y in [5.0, 40.0, 77.0, 150.0] {
                let e = m.rf_field(0.0, um(y)).unwrap();
                assert!(e[0].abs() <= 1e-9 * e[1].abs().max(1.0), "R={r} y={y}: {e:?}");
            }
        }
        assert!(model(0.0).rf_field(0.0, 0.0).is_err());
    }

    #[test]
    fn single_node_has_zero_field_and_zero_pseudopotential() {
        let m = model(0.0);
        let y = axis_node(&m);
        let e = m.rf_field(0.0, y).unwrap();
        assert!(e[0].hypot(e[1]) < 1e-4);
        assert!(m.pseudopotential(0.0, y).unwrap() < 1e-30);
    }

    #[test]
    fn center_rf_reduces_field_below_original_node() {
        let m0 = model(0.0);
        let m5 = model(0.5);
        let y0 = axis_node(&m0);
        let y = um(20.0);
        assert!(y < y0);
        let e0 = m0.rf_field(0.0, y).unwrap()[1].abs();
        let e5 = m5.rf_field(0.0, y).unwrap()[1].abs();
        assert!(e5 < e0, "{e5} !< {e0}");
        // and lowers the node
        let y5 = axis_node(&m5);
        assert!(y5 < y0);
    }

    #[test]
    fn voltage_scaling_is_quadratic() {
        let a = model(0.9);
        let b = a.with_v_rf(85.0 * 3.0).unwrap();
        for &(x, y) in &[(10.0, 30.0), (-80.0, 100.0), (0.0, 77.0)] {
            let pa = a.pseudopotential(um(x), um(y)).unwrap();
            let pb = b.pseudopotential(um(x), um(y)).unwrap();
            assert!((pb - 9.0 * pa).abs() <= 1e-12 * pb);
        }
    }

    #[test]
    fn pseudopotential_derivatives_match_finite_differences() {
        let m = model(0.9);
        let h = 1e-9;
        for &(x, y) in &[(10.0, 30.0), (-80.0, 100.0), (25.0, 70.0), (120.0, 15.0)] {
            let (x, y) = (um(x), um(y));
            let d = m.pseudopotential_derivatives(x, y).unwrap();
            let p = |x: f64, y: f64| m.pseudopotential(x, y).unwrap();
            let gx = (p(x + h, y) - p(x - h, y)) / (2.0 * h);
            let gy = (p(x, y + h) - p(x, y - h)) / (2.0 * h);
            let gs = d.gradient[0].hypot(d.gradient[1]);
            assert!((d.gradient[0] - gx).abs() < 1e-6 * gs);
            assert!((d.gradient[1] - gy).abs() < 1e-6 * gs);
            let g = |x: f64, y: f64| m.pseudopotential_derivatives(x, y).unwrap().gradient;
            let hx = [(g(x + h, y)[0] - g(x - h, y)[0]) / (2.0 * h), (g(x + h, y)[1] - g(x - h, y)[1]) / (2.0 * h)];
            let hy = [(g(x, y + h)[0] - g(x, y - h)[0]) / (2.0 * h), (g(x, y + h)[1] - g(x, y - h)[1]) / (2.0 * h)];
            let hs = d.hessian[0][0].abs() + d.hessian[1][1].abs() + d.hessian[0][1].abs();
            assert!((d.hessian[0][0] - hx[0]).abs() < 1e-6 * hs);
            assert!((d.hessian[1][0] - hx[1]).abs() < 1e-6 * hs);
            assert!((d.hessian[0][1] - hy[0]).abs() < 1e-6 * hs);
            assert!((d.hessian[1][1] - hy[1]).abs() < 1e-6 * hs);
        }
    }

    #[test]
    fn field_jacobian_matches_finite_differences() {
        let m = model(0.7);
        let h = 1e-9;
        let (x, y) = (um(13.0), um(55.0));
        let j = m.rf_field_jacobian(x, y).unwrap();
        let e = |x: f64, y: f64| m.rf_field(x, y).unwrap();
        let s = j[0][0].abs() + j[0][1].abs();
        for i in 0..2 {
            let dx = (e(x + h, y)[i] - e(x - h, y)[i]) / (2.0 * h);
            let dy = (e(x, y + h)[i] - e(x, y - h)[i]) / (2.0 * h);
            assert!((j[i][0] - dx).abs() < 1e-6 * s);
            assert!((j[i][1] - dy).abs() < 1e-6 * s);
        }
        // curl-free and divergence-free
        assert!((j[0][1] - j[1][0]).abs() < 1e-12 * s);
        assert!((j[0][0] + j[1][1]).abs() < 1e-12 * s);
    }

    #[test]
    fn total_potential_axial_part() {
        let m = model(0.0);
        let y0 = axis_node(&m);
        let wz = angular(190e3);
        let well = AxialConfinement::new(wz, [0.0, y0], 0.0).unwrap().without_deconfinement();
        let m = m.with_wells(vec![well]).unwrap();
        let at_center = m.total_potential(&Vector3::new(0.0, y0, 0.0), 0).unwrap();
        assert!(at_center.abs() < 1e-30);
        let delta = um(3.0);
        let e = m.total_potential(&Vector3::new(0.0, y0, delta), 0).unwrap();
        let expected = 0.5 * m.species().mass * wz * wz * delta * delta;
        assert!((e - expected).abs() < 1e-9 * expected);
        assert!(m.total_potential(&Vector3::new(0.0, y0, 0.0), 1).is_err());
        // curvature along z by finite differences
        let h = 1e-9;
        let f = |z: f64| m.total_potential(&Vector3::new(0.0, y0, z), 0).unwrap();
        let curv = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        let w2 = curv / m.species().mass;
        assert!((w2 - wz * wz).abs() < 1e-6 * wz * wz, "{w2} vs {}", wz * wz);
        let d = m.total_potential_derivatives(&Vector3::new(0.0, y0, 0.0), 0).unwrap();
        assert!((d.hessian[(2, 2)] / m.species().mass - wz * wz).abs() < 1e-9 * wz * wz);
    }

    #[test]
    fn grid_matches_direct_evaluation_and_is_symmetric() {
        let m = model(0.9);
        let g = pseudopotential_grid(&m, (um(-100.0), um(100.0)), (um(20.0), um(140.0)), 41, 25, default_clip_threshold()).unwrap();
        for iy in 0..g.ys.len() {
            for ix in 0..g.xs.len() {
                let direct = m.pseudopotential(g.xs[ix], g.ys[iy]).unwrap();
                assert_eq!(g.value(ix, iy), direct);
                let mirror = g.value(g.xs.len() - 1 - ix, iy);
                assert!((mirror - direct).abs() <= 1e-9 * direct.abs() + 1e-40);
            }
        }
        assert!(pseudopotential_grid(&m, (0.0, 1.0), (0.0, 1.0), 4, 4, 1.0).is_err());
        assert!(pseudopotential_grid(&m, (0.0, 1.0), (1.0, 2.0), 1, 4, 1.0).is_err());
    }

    #[test]
    fn grid_minima_single_and_double_well() {
        let single = pseudopotential_grid(&model(0.0), (um(-150.0), um(150.0)), (um(100.0), um(250.0)), 151, 151, 1.0).unwrap();
        let mins = single.local_minima();
        assert_eq!(mins.len(), 1);
        assert!(single.xs[mins[0].0].abs() < 1e-12);

        let double = pseudopotential_grid(&model(0.9), (um(-150.0), um(150.0)), (um(30.0), um(200.0)), 301, 171, 1.0).unwrap();
        let mins = double.local_minima();
        assert_eq!(mins.len(), 2, "{mins:?}");
        let (xa, xb) = (double.xs[mins[0].0], double.xs[mins[1].0]);
        assert!((xa + xb).abs() < 1e-9);
        assert_eq!(mins[0].1, mins[1].1);
    }

    #[test]
    fn stability_proxy_is_small_for_reference_drive() {
        let m = model(0.9);
        let q = m.stability_q(um(20.0), um(80.0)).unwrap();
        assert!(q > 0.0 && q < STABILITY_Q_WARN, "{q}");
    }
}
