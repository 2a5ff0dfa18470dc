//! Physical constants (CODATA 2018) and unit conversions used at the
//! reporting boundary.

use std::f64::consts::PI;

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
pub const BOLTZMANN: f64 = 1.380_649e-23;

pub const MICRON: f64 = 1e-6;

/// Coulomb coupling `q1 q2 / (4 pi eps0)` in J·m.
pub fn coulomb_constant(q1: f64, q2: f64) -> f64 {
    q1 * q2 / (4.0 * PI * VACUUM_PERMITTIVITY)
}

pub fn um(x: f64) -> f64 {
    x * MICRON
}

pub fn to_um(x: f64) -> f64 {
    x / MICRON
}

pub fn joule_to_mev(e: f64) -> f64 {
    e / ELEMENTARY_CHARGE * 1e3
}

pub fn mev_to_joule(e: f64) -> f64 {
    e * 1e-3 * ELEMENTARY_CHARGE
}

pub fn joule_to_kelvin(e: f64) -> f64 {
    e / BOLTZMANN
}

/// Angular frequency from an ordinary frequency in Hz.
pub fn angular(f_hz: f64) -> f64 {
    2.0 * PI * f_hz
}

/// Ordinary frequency (Hz) from an angular frequency.
pub fn hertz(omega: f64) -> f64 {
    omega / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_ion_coulomb_energy_at_17um() {
        let k = coulomb_constant(ELEMENTARY_CHARGE, ELEMENTARY_CHARGE);
        let e = k / um(17.0);
        assert!((e - 1.357e-23).abs() / 1.357e-23 < 1e-3, "{e}");
        assert!((joule_to_mev(e) * 1e3 - 84.7).abs() < 0.05);
    }

    #[test]
    fn barrier_in_kelvin() {
        let t = joule_to_kelvin(mev_to_joule(0.6));
        assert!((t - 6.96).abs() < 0.01, "{t}");
    }
}
