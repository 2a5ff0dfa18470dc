//! Planar electrode layouts and their electrostatics in the gapless-plane
//! approximation: the trap surface is the plane `y = 0`, every electrode is a
//! patch of that plane held at a fixed potential, and the rest of the plane is
//! grounded.
//!
//! Strips are infinite along `z` and give the 2D cross-section used for all RF
//! calculations. Rectangles are finite patches used for DC electrodes.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::units::um;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectrodeRole {
    /// Outer RF electrode, driven at `v_rf`.
    Rf,
    /// Center RF electrode, driven at `R * v_rf`.
    CenterRf,
    /// DC electrode between the RF and center-RF electrodes (RF ground).
    SideDc,
    Ground,
}

/// Strip electrode occupying `x_min..x_max` on the surface, infinite along `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripElectrode {
    pub x_min: f64,
    pub x_max: f64,
    pub role: ElectrodeRole,
}

impl StripElectrode {
    pub fn new(x_min: f64, x_max: f64, role: ElectrodeRole) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::Domain(format!(
                "strip requires x_min < x_max, got [{x_min:e}, {x_max:e}]"
            )));
        }
        Ok(StripElectrode { x_min, x_max, role })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn mirrored(&self) -> Self {
        StripElectrode {
            x_min: -self.x_max,
            x_max: -self.x_min,
            role: self.role,
        }
    }
}

/// Rectangular surface electrode `[x_min, x_max] x [z_min, z_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectElectrode {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub label: String,
}

impl RectElectrode {
    pub fn new(x_min: f64, x_max: f64, z_min: f64, z_max: f64, label: impl Into<String>) -> Result<Self> {
        if !(x_min < x_max) || !(z_min < z_max) {
            return Err(Error::Domain(format!(
                "rectangle requires x_min < x_max and z_min < z_max, got x [{x_min:e}, {x_max:e}] z [{z_min:e}, {z_max:e}]"
            )));
        }
        Ok(RectElectrode {
            x_min,
            x_max,
            z_min,
            z_max,
            label: label.into(),
        })
    }
}

/// How the insulating gaps between neighbouring strips are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapModel {
    /// Gaps are closed: each strip is widened by half the gap toward each
    /// neighbouring strip, so the layout tiles without holes.
    Expanded,
    /// Strips keep their metal widths; the gaps are grounded surface.
    #[default]
    Grounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapGeometry {
    /// Strips ordered by `x`, non-overlapping.
    pub strips: Vec<StripElectrode>,
    pub gap: f64,
    pub gap_model: GapModel,
    #[serde(default)]
    pub dc_rects: Vec<RectElectrode>,
}

/// Tolerance for deciding that two strip edges are neighbours.
const EDGE_TOL: f64 = 1e-12;

impl TrapGeometry {
    pub fn new(mut strips: Vec<StripElectrode>, gap: f64, gap_model: GapModel) -> Result<Self> {
        if !(gap >= 0.0) {
            return Err(Error::Domain(format!("gap must be >= 0, got {gap:e}")));
        }
        if strips.is_empty() {
            return Err(Error::Domain("geometry has no strips".into()));
        }
        for s in &strips {
            StripElectrode::new(s.x_min, s.x_max, s.role)?;
        }
        strips.sort_by(|a, b| a.x_min.total_cmp(&b.x_min));
        for pair in strips.windows(2) {
            if pair[0].x_max > pair[1].x_min + EDGE_TOL {
                return Err(Error::Domain(format!(
                    "strips overlap: [{:e}, {:e}] and [{:e}, {:e}]",
                    pair[0].x_min, pair[0].x_max, pair[1].x_min, pair[1].x_max
                )));
            }
        }
        Ok(TrapGeometry {
            strips,
            gap,
            gap_model,
            dc_rects: Vec::new(),
        })
    }

    pub fn with_dc_rects(mut self, rects: Vec<RectElectrode>) -> Self {
        self.dc_rects = rects;
        self
    }

    pub fn with_gap_model(mut self, gap_model: GapModel) -> Self {
        self.gap_model = gap_model;
        self
    }

    /// Strips as seen by the field solver.
    ///
    /// With [`GapModel::Expanded`] a strip edge facing another strip within
    /// `gap` is moved to the midpoint of the spacing, so neighbours meet
    /// exactly. Edges without a neighbour are left untouched.
    pub fn effective_strips(&self) -> Vec<StripElectrode> {
        match self.gap_model {
            GapModel::Grounded => self.strips.clone(),
            GapModel::Expanded => {
                let n = self.strips.len();
                let mut out = self.strips.clone();
                for i in 0..n.saturating_sub(1) {
                    let spacing = self.strips[i + 1].x_min - self.strips[i].x_max;
                    if spacing <= self.gap + EDGE_TOL {
                        let mid = self.strips[i].x_max + 0.5 * spacing;
                        out[i].x_max = mid;
                        out[i + 1].x_min = mid;
                    }
                }
                out
            }
        }
    }

    /// Whether reflecting every strip about `x = 0` reproduces the layout.
    pub fn is_mirror_symmetric(&self) -> bool {
        let tol = 1e-12;
        self.strips.iter().all(|s| {
            let m = s.mirrored();
            self.strips.iter().any(|o| {
                o.role == m.role && (o.x_min - m.x_min).abs() < tol && (o.x_max - m.x_max).abs() < tol
            })
        })
    }

    pub fn mirrored(&self) -> Self {
        let mut strips: Vec<_> = self.strips.iter().map(StripElectrode::mirrored).collect();
        strips.sort_by(|a, b| a.x_min.total_cmp(&b.x_min));
        TrapGeometry {
            strips,
            gap: self.gap,
            gap_model: self.gap_model,
            dc_rects: self.dc_rects.clone(),
        }
    }

    pub fn strips_with_role(&self, role: ElectrodeRole) -> impl Iterator<Item = &StripElectrode> {
        self.strips.iter().filter(move |s| s.role == role)
    }
}

/// Metal widths of the canonical layout, in µm.
pub const CANONICAL_CENTER_RF_WIDTH_UM: f64 = 78.0;
pub const CANONICAL_SIDE_WIDTH_UM: f64 = 26.0;
pub const CANONICAL_RF_WIDTH_UM: f64 = 409.0;
pub const CANONICAL_GAP_UM: f64 = 4.0;

/// The 78 / 26 / 409 µm layout: a center-RF strip centred on `x = 0`, a side DC
/// strip on each side of it, and an outer RF strip beyond each side strip,
/// separated by 4 µm gaps. Everything else is grounded plane.
pub fn canonical_geometry() -> TrapGeometry {
    let c = 0.5 * CANONICAL_CENTER_RF_WIDTH_UM;
    let g = CANONICAL_GAP_UM;
    let side_in = c + g;
    let side_out = side_in + CANONICAL_SIDE_WIDTH_UM;
    let rf_in = side_out + g;
    let rf_out = rf_in + CANONICAL_RF_WIDTH_UM;
    let s = |a: f64, b: f64, role| StripElectrode {
        x_min: um(a),
        x_max: um(b),
        role,
    };
    let strips = vec![
        s(-rf_out, -rf_in, ElectrodeRole::Rf),
        s(-side_out, -side_in, ElectrodeRole::SideDc),
        s(-c, c, ElectrodeRole::CenterRf),
        s(side_in, side_out, ElectrodeRole::SideDc),
        s(rf_in, rf_out, ElectrodeRole::Rf),
    ];
    TrapGeometry::new(strips, um(g), GapModel::default()).expect("canonical layout is valid")
}

fn require_above_plane(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "field is only defined above the electrode plane (y > 0), got y = {y:e}"
        )))
    }
}

/// Potential of a strip at voltage `v` at the point `(x, y)`.
pub fn strip_potential(strip: &StripElectrode, v: f64, x: f64, y: f64) -> Result<f64> {
    require_above_plane(y)?;
    Ok(v / PI * (((strip.x_max - x) / y).atan() - ((strip.x_min - x) / y).atan()))
}

/// Complex derivatives of the unit strip potential.
///
/// With `w = x + i y` the unit potential of the strip `[a, b]` is
/// `phi = Im F(w)`, `F = (ln(w - b) - ln(w - a)) / pi`. Returns
/// `[F', F'', F''']`; by Cauchy-Riemann `phi_x = Im F'`, `phi_y = Re F'`.
#[inline]
pub fn strip_kernel(a: f64, b: f64, w: Complex64) -> [Complex64; 3] {
    let ib = (w - b).inv();
    let ia = (w - a).inv();
    let ib2 = ib * ib;
    let ia2 = ia * ia;
    [
        (ib - ia) / PI,
        (ia2 - ib2) / PI,
        (ib2 * ib - ia2 * ia) * (2.0 / PI),
    ]
}

/// Gradient of a strip's potential at voltage `v`, as `(d/dx, d/dy)`.
pub fn strip_gradient(strip: &StripElectrode, v: f64, x: f64, y: f64) -> Result<[f64; 2]> {
    require_above_plane(y)?;
    let d = strip_kernel(strip.x_min, strip.x_max, Complex64::new(x, y))[0] * v;
    Ok([d.im, d.re])
}

/// Potential, gradient and Hessian of a unit-voltage electrode at a 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialDerivatives {
    pub potential: f64,
    pub gradient: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

impl PotentialDerivatives {
    pub fn scaled(&self, v: f64) -> Self {
        PotentialDerivatives {
            potential: self.potential * v,
            gradient: self.gradient * v,
            hessian: self.hessian * v,
        }
    }
}

/// Unit-voltage derivatives of a strip treated as a 3D electrode (no `z`
/// dependence).
pub fn strip_derivatives(strip: &StripElectrode, p: &Vector3<f64>) -> Result<PotentialDerivatives> {
    let potential = strip_potential(strip, 1.0, p.x, p.y)?;
    let [d1, d2, _] = strip_kernel(strip.x_min, strip.x_max, Complex64::new(p.x, p.y));
    let (pxx, pxy) = (d2.im, d2.re);
    Ok(PotentialDerivatives {
        potential,
        gradient: Vector3::new(d1.im, d1.re, 0.0),
        hessian: Matrix3::new(pxx, pxy, 0.0, pxy, -pxx, 0.0, 0.0, 0.0, 0.0),
    })
}

/// Potential of a rectangle at voltage `v` at the point `p = (x, y, z)`.
///
/// Four-corner arctangent solution: each corner contributes the solid angle of
/// the quadrant it bounds.
pub fn rect_potential(rect: &RectElectrode, v: f64, p: &Vector3<f64>) -> Result<f64> {
    require_above_plane(p.y)?;
    let y = p.y;
    let mut acc = 0.0;
    for (sx, xi) in [(-1.0, rect.x_min), (1.0, rect.x_max)] {
        for (sz, zj) in [(-1.0, rect.z_min), (1.0, rect.z_max)] {
            let dx = xi - p.x;
            let dz = zj - p.z;
            let r = (dx * dx + y * y + dz * dz).sqrt();
            acc += sx * sz * (dx * dz / (y * r)).atan();
        }
    }
    Ok(v * acc / (2.0 * PI))
}

/// Unit-voltage potential, gradient and Hessian of a rectangle, analytic.
pub fn rect_derivatives(rect: &RectElectrode, p: &Vector3<f64>) -> Result<PotentialDerivatives> {
    require_above_plane(p.y)?;
    let y = p.y;
    let y2 = y * y;
    let mut phi = 0.0;
    let mut g = Vector3::zeros();
    let mut h = Matrix3::zeros();
    for (sx, xi) in [(-1.0, rect.x_min), (1.0, rect.x_max)] {
        for (sz, zj) in [(-1.0, rect.z_min), (1.0, rect.z_max)] {
            let s = sx * sz;
            // corner term f(X, Z, y) = atan(X Z / (y R)), X = xi - x, Z = zj - z
            let cx = xi - p.x;
            let cz = zj - p.z;
            let r2 = cx * cx + cz * cz + y2;
            let r = r2.sqrt();
            let r3 = r2 * r;
            let ax = cx * cx + y2;
            let az = cz * cz + y2;

            let f = (cx * cz / (y * r)).atan();
            let f_x = y * cz / (ax * r);
            let f_z = y * cx / (az * r);
            let f_y = -cx * cz * (r2 + y2) / (ax * az * r);

            let f_xx = -y * cz * cx * (2.0 / (ax * ax * r) + 1.0 / (ax * r3));
            let f_zz = -y * cx * cz * (2.0 / (az * az * r) + 1.0 / (az * r3));
            let f_yy = -f_xx - f_zz;
            let f_xz = y / r3;
            let f_xy = cz * (1.0 / (ax * r) - 2.0 * y2 / (ax * ax * r) - y2 / (ax * r3));
            let f_zy = cx * (1.0 / (az * r) - 2.0 * y2 / (az * az * r) - y2 / (az * r3));

            phi += s * f;
            // d/dx = -d/dX, d/dz = -d/dZ
            g += s * Vector3::new(-f_x, f_y, -f_z);
            h += s * Matrix3::new(
                f_xx, -f_xy, f_xz, //
                -f_xy, f_yy, -f_zy, //
                f_xz, -f_zy, f_zz,
            );
        }
    }
    let k = 1.0 / (2.0 * PI);
    Ok(PotentialDerivatives {
        potential: phi * k,
        gradient: g * k,
        hessian: h * k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::to_um;

    fn center_strip() -> StripElectrode {
        StripElectrode::new(um(-39.0), um(39.0), ElectrodeRole::CenterRf).unwrap()
    }

    #[test]
    fn canonical_layout_widths_and_positions() {
        let g = canonical_geometry();
        let c: Vec<_> = g.strips_with_role(ElectrodeRole::CenterRf).collect();
        assert_eq!(c.len(), 1);
        assert!((to_um(c[0].x_min) + 39.0).abs() < 1e-9);
        assert!((to_um(c[0].x_max) - 39.0).abs() < 1e-9);
        let rf: Vec<_> = g.strips_with_role(ElectrodeRole::Rf).collect();
        assert_eq!(rf.len(), 2);
        for s in rf {
            assert!((to_um(s.width()) - 409.0).abs() < 1e-9);
        }
        for s in g.strips_with_role(ElectrodeRole::SideDc) {
            assert!((to_um(s.width()) - 26.0).abs() < 1e-9);
        }
        assert!((to_um(g.gap) - 4.0).abs() < 1e-12);
        assert!(g.is_mirror_symmetric());
        assert_eq!(g.mirrored(), g);
    }

    #[test]
    fn expanded_strips_tile() {
        let g = canonical_geometry().with_gap_model(GapModel::Expanded);
        let e = g.effective_strips();
        for pair in e.windows(2) {
            assert_eq!(pair[0].x_max, pair[1].x_min);
        }
        // outermost edges have no neighbour
        assert_eq!(e[0].x_min, g.strips[0].x_min);
        let c = e.iter().find(|s| s.role == ElectrodeRole::CenterRf).unwrap();
        assert!((to_um(c.width()) - 82.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_strips() {
        assert!(StripElectrode::new(1.0, 0.0, ElectrodeRole::Rf).is_err());
        let a = StripElectrode::new(0.0, 2.0, ElectrodeRole::Rf).unwrap();
        let b = StripElectrode::new(1.0, 3.0, ElectrodeRole::Rf).unwrap();
        assert!(TrapGeometry::new(vec![a, b], 0.0, GapModel::Grounded).is_err());
        assert!(TrapGeometry::new(vec![a], -1.0, GapModel::Grounded).is_err());
        assert!(RectElectrode::new(0.0, 1.0, 1.0, 1.0, "x").is_err());
    }

    #[test]
    fn strip_potential_examples() {
        let s = center_strip();
        let near = strip_potential(&s, 1.0, 0.0, 1e-12).unwrap();
        assert!((near - 1.0).abs() < 1e-6);
        let half = strip_potential(&s, 1.0, 0.0, um(39.0)).unwrap();
        assert!((half - 0.5).abs() < 1e-14);
        let far = strip_potential(&s, 1.0, 0.0, 1e-2).unwrap();
        assert!(far < 0.003 && far > 0.0);
        assert!(strip_potential(&s, 1.0, 0.0, 0.0).is_err());
        assert!(strip_potential(&s, 1.0, 0.0, -1e-6).is_err());
    }

    #[test]
    fn split_strip_reproduces_wide_strip() {
        let a = StripElectrode::new(um(-50.0), um(3.0), ElectrodeRole::Rf).unwrap();
        let b = StripElectrode::new(um(3.0), um(70.0), ElectrodeRole::Rf).unwrap();
        let w = StripElectrode::new(um(-50.0), um(70.0), ElectrodeRole::Rf).unwrap();
        for &(x, y) in &[(0.0, 10.0), (-80.0, 5.0), (120.0, 150.0), (3.0, 0.5)] {
            let (x, y) = (um(x), um(y));
            let sum = strip_potential(&a, 2.0, x, y).unwrap() + strip_potential(&b, 2.0, x, y).unwrap();
            let one = strip_potential(&w, 2.0, x, y).unwrap();
            assert!((sum - one).abs() <= 1e-12 * one.abs(), "{sum} vs {one}");
        }
    }

    #[test]
    fn strip_gradient_matches_finite_difference() {
        let s = center_strip();
        let h = 1e-9;
        for &(x, y) in &[(0.0, 20.0), (30.0, 60.0), (-75.0, 5.0), (200.0, 180.0)] {
            let (x, y) = (um(x), um(y));
            let g = strip_gradient(&s, 1.0, x, y).unwrap();
            let fx = (strip_potential(&s, 1.0, x + h, y).unwrap() - strip_potential(&s, 1.0, x - h, y).unwrap()) / (2.0 * h);
            let fy = (strip_potential(&s, 1.0, x, y + h).unwrap() - strip_potential(&s, 1.0, x, y - h).unwrap()) / (2.0 * h);
            let scale = g[0].hypot(g[1]);
            assert!((g[0] - fx).abs() < 1e-6 * scale, "{} {}", g[0], fx);
            assert!((g[1] - fy).abs() < 1e-6 * scale, "{} {}", g[1], fy);
        }
    }

    #[test]
    fn rect_potential_limits() {
        let r = RectElectrode::new(um(-40.0), um(40.0), um(-40.0), um(40.0), "sq").unwrap();
        let near = rect_potential(&r, 1.0, &Vector3::new(0.0, 1e-12, 0.0)).unwrap();
        assert!((near - 1.0).abs() < 1e-6, "{near}");
        let far = rect_potential(&r, 1.0, &Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!(far.abs() < 1e-8);
        // outside the footprint, at the surface, the plane is grounded
        let off = rect_potential(&r, 1.0, &Vector3::new(um(100.0), 1e-12, 0.0)).unwrap();
        assert!(off.abs() < 1e-6);
        assert!(rect_potential(&r, 1.0, &Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn long_rect_approaches_strip() {
        let r = RectElectrode::new(um(-39.0), um(39.0), -1.0, 1.0, "long").unwrap();
        let s = center_strip();
        let p = Vector3::new(um(12.0), um(50.0), 0.0);
        let a = rect_potential(&r, 1.0, &p).unwrap();
        let b = strip_potential(&s, 1.0, p.x, p.y).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} {b}");
        let d = rect_derivatives(&r, &p).unwrap();
        let e = strip_derivatives(&s, &p).unwrap();
        assert!((d.gradient - e.gradient).norm() < 1e-6 * e.gradient.norm());
        assert!((d.hessian - e.hessian).norm() < 1e-6 * e.hessian.norm());
    }

    #[test]
    fn rect_derivatives_match_finite_differences() {
        let r = RectElectrode::new(um(-20.0), um(65.0), um(-10.0), um(130.0), "r").unwrap();
        let h = 1e-9;
        for &(x, y, z) in &[(0.0, 30.0, 0.0), (80.0, 15.0, -40.0), (-60.0, 120.0, 200.0), (10.0, 5.0, 128.0)] {
            let p = Vector3::new(um(x), um(y), um(z));
            let d = rect_derivatives(&r, &p).unwrap();
            assert!((d.potential - rect_potential(&r, 1.0, &p).unwrap()).abs() < 1e-14);
            let gscale = d.gradient.norm();
            let hscale = d.hessian.norm();
            for i in 0..3 {
                let mut e = Vector3::zeros();
                e[i] = h;
                let fd = (rect_potential(&r, 1.0, &(p + e)).unwrap() - rect_potential(&r, 1.0, &(p - e)).unwrap()) / (2.0 * h);
                assert!((d.gradient[i] - fd).abs() < 1e-6 * gscale, "grad {i}: {} vs {fd}", d.gradient[i]);
                let gp = rect_derivatives(&r, &(p + e)).unwrap().gradient;
                let gm = rect_derivatives(&r, &(p - e)).unwrap().gradient;
                let col = (gp - gm) / (2.0 * h);
                for j in 0..3 {
                    assert!(
                        (d.hessian[(j, i)] - col[j]).abs() < 1e-6 * hscale,
                        "hess ({j},{i}): {} vs {}",
                        d.hessian[(j, i)],
                        col[j]
                    );
                }
            }
            assert!(d.hessian.trace().abs() < 1e-9 * hscale);
        }
    }
}
