//! Run configuration in lab units (µm, V, MHz for the drive, Hz for wells).
//!
//! Every section is optional and defaults to the canonical 40Ca+ setup. The
//! resolved configuration is echoed in each artifact header; feeding that
//! JSON back through `--config` reproduces the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use trapscape::dc_control::{example_nine_electrode_basis, DcBasis, DcConstraint, DcConstraintSet, DcElectrode};
use trapscape::fields::{AxialConfinement, DriveConfig, IonSpecies, TrapModel};
use trapscape::geometry::{canonical_geometry, ElectrodeRole, GapModel, RectElectrode, StripElectrode, TrapGeometry};
use trapscape::nodes::{find_nodes, wells_at_nodes};
use trapscape::units::{angular, um, ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub drive: DriveSection,
    pub species: SpeciesSection,
    pub wells: WellsSection,
    pub potential_grid: PotentialGridSection,
    pub nodes: NodesSection,
    pub critical: CriticalSection,
    pub crystal: CrystalSection,
    pub modes_sweep: ModesSweepSection,
    pub corrugation: CorrugationSection,
    pub slide: SlideSection,
    pub dc: DcSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    #[default]
    Canonical,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripSpec {
    pub x_min_um: f64,
    pub x_max_um: f64,
    pub role: ElectrodeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub x_min_um: f64,
    pub x_max_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    pub label: String,
}

impl RectSpec {
    fn build(&self) -> trapscape::Result<RectElectrode> {
        RectElectrode::new(
            um(self.x_min_um),
            um(self.x_max_um),
            um(self.z_min_um),
            um(self.z_max_um),
            self.label.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub preset: GeometryPreset,
    pub gap_model: GapModel,
    /// Only used with `preset = "custom"`.
    pub gap_um: f64,
    pub strips: Vec<StripSpec>,
    pub dc_rects: Vec<RectSpec>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            preset: GeometryPreset::Canonical,
            gap_model: GapModel::default(),
            gap_um: 4.0,
            strips: Vec::new(),
            dc_rects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveSection {
    pub v_rf: f64,
    pub r: f64,
    pub f_rf_mhz: f64,
}

impl Default for DriveSection {
    fn default() -> Self {
        DriveSection {
            v_rf: 85.0,
            r: 0.9,
            f_rf_mhz: 27.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeciesSection {
    pub mass_amu: f64,
    pub charge_e: f64,
}

impl Default for SpeciesSection {
    fn default() -> Self {
        SpeciesSection {
            mass_amu: 40.0,
            charge_e: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellPlacement {
    /// One well on each RF node of the configured drive.
    #[default]
    Nodes,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub x_um: f64,
    pub y_um: f64,
    #[serde(default)]
    pub z_um: f64,
    pub f_z_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WellsSection {
    pub placement: WellPlacement,
    pub f_z_hz: f64,
    pub center_z_um: f64,
    /// Radial split `(alpha, beta)` of the DC deconfinement; `[0, 0]` turns
    /// it off.
    pub deconfinement: [f64; 2],
    pub explicit: Vec<WellSpec>,
}

impl Default for WellsSection {
    fn default() -> Self {
        WellsSection {
            placement: WellPlacement::Nodes,
            f_z_hz: 0.19e6,
            center_z_um: 0.0,
            deconfinement: [0.5, 0.5],
            explicit: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialGridSection {
    pub x_min_um: f64,
    pub x_max_um: f64,
    pub y_min_um: f64,
    pub y_max_um: f64,
    pub nx: usize,
    pub ny: usize,
    pub clip_mev: f64,
}

impl Default for PotentialGridSection {
    fn default() -> Self {
        PotentialGridSection {
            x_min_um: -150.0,
            x_max_um: 150.0,
            y_min_um: 2.0,
            y_max_um: 200.0,
            nx: 151,
            ny: 100,
            clip_mev: 100.0,
        }
    }
}

/// Inclusive `start..=stop` range walked in steps of `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl RangeSpec {
    /// Parses `start:stop:step`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got '{s}'"));
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("bad number '{p}': {e}"));
        Ok(RangeSpec {
            start: num(parts[0])?,
            stop: num(parts[1])?,
            step: num(parts[2])?,
        })
    }

    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(CliError::Config(format!(
                "range needs step > 0 and start <= stop, got {}:{}:{}",
                self.start, self.stop, self.step
            )));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        if n > 1_000_000 {
            return Err(CliError::Config(format!("range has {} points, limit is 1000000", n + 1)));
        }
        // trim float noise such as 0.9400000000000001 to 12 significant digits
        Ok((0..=n)
            .map(|i| {
                let v = self.start + i as f64 * self.step;
                format!("{v:.11e}").parse().expect("formatted float parses")
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodesSection {
    /// Ratio sweep; without it `nodes` reports the configured drive only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<RangeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticalSection {
    pub tol: f64,
}

impl Default for CriticalSection {
    fn default() -> Self {
        CriticalSection { tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    String,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalSection {
    /// Ions per well, in well order.
    pub ions: Vec<usize>,
    pub init: InitKind,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CrystalSection {
    fn default() -> Self {
        CrystalSection {
            ions: vec![2, 2],
            init: InitKind::String,
            restarts: 8,
            seed: 1,
        }
    }
}

/// Either explicit ratios or a node-separation range mapped to ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesSweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<RangeSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_um: Option<RangeSpec>,
    pub f_z_hz: f64,
    pub ions_per_string: usize,
    pub eigenvectors: bool,
}

impl Default for ModesSweepSection {
    fn default() -> Self {
        ModesSweepSection {
            r: None,
            d_um: Some(RangeSpec {
                start: 20.0,
                stop: 200.0,
                step: 10.0,
            }),
            f_z_hz: 0.19e6,
            ions_per_string: 2,
            eigenvectors: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrugationSection {
    /// Target node separation; the ratio is solved for it. Overrides
    /// `drive.r` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_um: Option<f64>,
    pub ions_per_string: usize,
    pub f_z_hz: f64,
    pub target_string: usize,
    pub samples: usize,
    /// Optional η sweep over node separations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_sweep_d_um: Option<RangeSpec>,
}

impl Default for CorrugationSection {
    fn default() -> Self {
        CorrugationSection {
            d_um: Some(30.0),
            ions_per_string: 7,
            f_z_hz: 15e3,
            target_string: 0,
            samples: 801,
            eta_sweep_d_um: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_um: Option<f64>,
    pub ions_per_string: usize,
    pub f_z_hz: f64,
    pub offsets_um: RangeSpec,
    pub moved_well: usize,
    pub slip_fraction: f64,
}

impl Default for SlideSection {
    fn default() -> Self {
        SlideSection {
            d_um: Some(40.0),
            ions_per_string: 7,
            f_z_hz: 15e3,
            offsets_um: RangeSpec {
                start: 0.0,
                stop: 100.0,
                step: 1.0,
            },
            moved_well: 1,
            slip_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcBasisKind {
    #[default]
    NineElectrode,
    /// The geometry's `dc_rects`.
    Rects,
}

/// A DC target in lab units: points in µm, potentials in V, gradients in
/// V/m, curvatures in V/m^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    NullPoint { point_um: [f64; 3] },
    Potential { point_um: [f64; 3], value: f64 },
    Gradient { point_um: [f64; 3], axis: usize, value: f64 },
    Curvature { point_um: [f64; 3], direction: [f64; 3], value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcSection {
    pub basis: DcBasisKind,
    pub constraints: Vec<ConstraintSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stray_field_v_per_m: Option<[f64; 3]>,
    /// Points at which the resulting DC field is reported.
    pub check_points_um: Vec<[f64; 3]>,
}

impl Default for DcSection {
    fn default() -> Self {
        let p = [0.0, 80.0, 0.0];
        DcSection {
            basis: DcBasisKind::NineElectrode,
            constraints: vec![
                ConstraintSpec::NullPoint { point_um: p },
                ConstraintSpec::Curvature {
                    point_um: p,
                    direction: [0.0, 0.0, 1.0],
                    value: 1e7,
                },
            ],
            stray_field_v_per_m: None,
            check_points_um: vec![p],
        }
    }
}

fn um3(p: [f64; 3]) -> [f64; 3] {
    p.map(um)
}

fn config_err(e: trapscape::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config '{}': {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if json {
            serde_json::from_str(&text).map_err(|e| {
                CliError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
            })?
        } else {
            toml::from_str(&text).map_err(|e| {
                let loc = e
                    .span()
                    .map(|s| {
                        let before = &text[..s.start.min(text.len())];
                        let line = before.matches('\n').count() + 1;
                        let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                        format!("line {line}, column {col}: ")
                    })
                    .unwrap_or_default();
                CliError::Config(format!("{}: {loc}{}", path.display(), e.message()))
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("species.mass_amu", self.species.mass_amu)?;
        positive("drive.f_rf_mhz", self.drive.f_rf_mhz)?;
        positive("wells.f_z_hz", self.wells.f_z_hz)?;
        positive("critical.tol", self.critical.tol)?;
        positive("modes_sweep.f_z_hz", self.modes_sweep.f_z_hz)?;
        positive("corrugation.f_z_hz", self.corrugation.f_z_hz)?;
        positive("slide.f_z_hz", self.slide.f_z_hz)?;
        positive("slide.slip_fraction", self.slide.slip_fraction)?;
        for w in &self.wells.explicit {
            positive("wells.explicit.f_z_hz", w.f_z_hz)?;
        }
        if let Some(d) = self.corrugation.d_um {
            positive("corrugation.d_um", d)?;
        }
        if let Some(d) = self.slide.d_um {
            positive("slide.d_um", d)?;
        }
        if self.modes_sweep.r.is_some() == self.modes_sweep.d_um.is_some() {
            return Err(CliError::Config("modes_sweep needs exactly one of 'r' or 'd_um'".into()));
        }
        if self.geometry.preset == GeometryPreset::Custom && self.geometry.strips.is_empty() {
            return Err(CliError::Config("geometry.preset = \"custom\" needs geometry.strips".into()));
        }
        if self.wells.placement == WellPlacement::Explicit && self.wells.explicit.is_empty() {
            return Err(CliError::Config("wells.placement = \"explicit\" needs wells.explicit".into()));
        }
        // catch model-level problems (drive limits, geometry overlaps) early
        self.base_model()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<TrapGeometry, CliError> {
        let g = &self.geometry;
        let base = match g.preset {
            GeometryPreset::Canonical => canonical_geometry().with_gap_model(g.gap_model),
            GeometryPreset::Custom => {
                let strips = g
                    .strips
                    .iter()
                    .map(|s| StripElectrode::new(um(s.x_min_um), um(s.x_max_um), s.role))
                    .collect::<trapscape::Result<Vec<_>>>()
                    .map_err(config_err)?;
                TrapGeometry::new(strips, um(g.gap_um), g.gap_model).map_err(config_err)?
            }
        };
        let rects = g
            .dc_rects
            .iter()
            .map(RectSpec::build)
            .collect::<trapscape::Result<Vec<_>>>()
            .map_err(config_err)?;
        Ok(base.with_dc_rects(rects))
    }

    pub fn species(&self) -> Result<IonSpecies, CliError> {
        IonSpecies::new(
            self.species.mass_amu * ATOMIC_MASS_UNIT,
            self.species.charge_e * ELEMENTARY_CHARGE,
        )
        .map_err(config_err)
    }

    /// Model without axial wells.
    pub fn base_model(&self) -> Result<TrapModel, CliError> {
        let drive = DriveConfig::from_mhz(self.drive.v_rf, self.drive.r, self.drive.f_rf_mhz).map_err(config_err)?;
        TrapModel::new(self.geometry()?, drive, self.species()?, vec![]).map_err(config_err)
    }

    /// Model with the wells of the `wells` section. Placing wells on nodes
    /// needs a node search, whose failure is numerical.
    pub fn model_with_wells(&self) -> Result<TrapModel, CliError> {
        let base = self.base_model()?;
        let w = &self.wells;
        let [a, b] = w.deconfinement;
        let wells = match w.placement {
            WellPlacement::Nodes => {
                let set = find_nodes(&base)?;
                wells_at_nodes(&set, angular(w.f_z_hz), um(w.center_z_um))?
            }
            WellPlacement::Explicit => w
                .explicit
                .iter()
                .map(|s| AxialConfinement::new(angular(s.f_z_hz), [um(s.x_um), um(s.y_um)], um(s.z_um)))
                .collect::<trapscape::Result<Vec<_>>>()
                .map_err(config_err)?,
        };
        let wells = wells
            .into_iter()
            .map(|c| {
                if a == 0.0 && b == 0.0 {
                    Ok(c.without_deconfinement())
                } else {
                    c.with_deconfinement(a, b)
                }
            })
            .collect::<trapscape::Result<Vec<_>>>()
            .map_err(config_err)?;
        base.with_wells(wells).map_err(config_err)
    }

    pub fn dc_basis(&self) -> Result<DcBasis, CliError> {
        let geometry = self.geometry()?;
        match self.dc.basis {
            DcBasisKind::NineElectrode => example_nine_electrode_basis(&geometry).map_err(config_err),
            DcBasisKind::Rects => {
                DcBasis::new(geometry.dc_rects.into_iter().map(DcElectrode::Rect).collect()).map_err(config_err)
            }
        }
    }

    pub fn dc_constraints(&self) -> Result<DcConstraintSet, CliError> {
        let mut set = DcConstraintSet::new();
        for c in &self.dc.constraints {
            set = match *c {
                ConstraintSpec::NullPoint { point_um } => set.null_point(um3(point_um)),
                ConstraintSpec::Potential { point_um, value } => set.potential(um3(point_um), value),
                ConstraintSpec::Gradient { point_um, axis, value } => {
                    if axis > 2 {
                        return Err(CliError::Config(format!("gradient axis must be 0, 1 or 2, got {axis}")));
                    }
                    set.constraints.push(DcConstraint::Gradient {
                        point: um3(point_um),
                        axis,
                        value,
                    });
                    set
                }
                ConstraintSpec::Curvature {
                    point_um,
                    direction,
                    value,
                } => set.curvature(um3(point_um), direction, value),
            };
        }
        if let Some(f) = self.dc.stray_field_v_per_m {
            set = set.with_stray_field(f);
        }
        Ok(set)
    }
}
