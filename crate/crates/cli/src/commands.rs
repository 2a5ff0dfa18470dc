use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use trapscape::corrugation::{
    corrugation_parameter, corrugation_potential, eta_sweep, quasi_static_slide, two_string_crystal, SlideOptions,
    TwoStringOptions,
};
use trapscape::crystal::{assign_ions, solve_equilibrium, InitStrategy, SolveOptions};
use trapscape::dc_control::{dc_field_check, solve_dc_voltages};
use trapscape::fields::{pseudopotential_grid, TrapModel};
use trapscape::modes::{degeneracy_sweep, normal_modes, DegeneracyOptions, ModeLabel};
use trapscape::nodes::{critical_ratio, find_nodes, ratio_for_separation, separation_sweep, wells_at_nodes};
use trapscape::units::{angular, hertz, joule_to_kelvin, joule_to_mev, mev_to_joule, to_um, um};
use trapscape::Error;

use crate::config::{InitKind, RunConfig};
use crate::output::{Cell, Outputs, Table};
use crate::CliError;

/// Tolerance on `R` when solving for a target node separation.
const RATIO_TOL: f64 = 1e-9;

fn khz(omega: f64) -> f64 {
    hertz(omega) / 1e3
}

fn um2(p: [f64; 2]) -> [f64; 2] {
    p.map(to_um)
}

pub fn potential_grid(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let g = &cfg.potential_grid;
    let model = cfg.base_model()?;
    let grid = pseudopotential_grid(
        &model,
        (um(g.x_min_um), um(g.x_max_um)),
        (um(g.y_min_um), um(g.y_max_um)),
        g.nx,
        g.ny,
        mev_to_joule(g.clip_mev),
    )
    .map_err(|e| match e {
        Error::Domain(m) => CliError::Config(m),
        e => e.into(),
    })?;
    let minima: Vec<[f64; 2]> = grid
        .local_minima()
        .into_iter()
        .map(|(ix, iy)| [to_um(grid.xs[ix]), to_um(grid.ys[iy])])
        .collect();
    info!("pseudopotential grid {}x{} with {} local minima", g.nx, g.ny, minima.len());
    let mut rows = Vec::with_capacity(grid.values.len());
    for (iy, &y) in grid.ys.iter().enumerate() {
        for (ix, &x) in grid.xs.iter().enumerate() {
            rows.push(vec![
                to_um(x).into(),
                to_um(y).into(),
                joule_to_mev(grid.value(ix, iy)).into(),
                grid.is_clipped(ix, iy).into(),
            ]);
        }
    }
    out.table(Table {
        name: "potential_grid",
        columns: &["x_um", "y_um", "phi_meV", "clipped"],
        rows,
    })?;
    out.report("potential_grid_minima", json!({ "minima_um": minima }))
}

pub fn nodes(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let model = cfg.base_model()?;
    if let Some(range) = cfg.nodes.sweep {
        let rs = range.values()?;
        let points = separation_sweep(&model, &rs)?;
        let mut rows = Vec::with_capacity(points.len());
        for p in &points {
            if let Some(e) = &p.error {
                warn!("R = {}: {e}", p.r);
            }
            rows.push(vec![
                p.r.into(),
                p.separation.map(to_um).into(),
                p.barrier.map(joule_to_mev).into(),
                p.topology.map_or(Cell::Text("error".into()), |t| t.as_str().into()),
            ]);
        }
        return out.table(Table {
            name: "nodes_sweep",
            columns: &["R", "d_um", "barrier_meV", "topology"],
            rows,
        });
    }
    let set = find_nodes(&model)?;
    let q: Vec<f64> = set
        .nodes
        .iter()
        .map(|n| model.stability_q(n[0], n[1]))
        .collect::<trapscape::Result<_>>()?;
    out.report(
        "nodes",
        json!({
            "r": cfg.drive.r,
            "topology": set.topology.as_str(),
            "nodes_um": set.nodes.iter().map(|n| um2(*n)).collect::<Vec<_>>(),
            "separation_um": set.separation().map(to_um),
            "barrier_meV": set.barrier.map(joule_to_mev),
            "barrier_K": set.barrier.map(joule_to_kelvin),
            "saddle_um": set.saddle.map(um2),
            "stability_q": q,
        }),
    )
}

pub fn critical(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let c = critical_ratio(&cfg.base_model()?, cfg.critical.tol)?;
    info!("critical ratio in [{}, {}]", c.r_lo, c.r_hi);
    out.report("critical", c)
}

#[derive(Serialize)]
struct CrystalReport {
    #[serde(rename = "energy_meV")]
    energy_mev: f64,
    max_force_n: f64,
    evaluations: usize,
    converged: bool,
    min_curvature: f64,
    min_separation_um: Option<f64>,
    wells: Vec<usize>,
    string_labels: Vec<usize>,
    positions_um: Vec<[f64; 3]>,
}

pub fn crystal(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let model = cfg.model_with_wells()?;
    let c = &cfg.crystal;
    let n_wells = model.axial_wells().len();
    if c.ions.len() != n_wells {
        return Err(CliError::Config(format!(
            "crystal.ions lists {} wells but the model has {n_wells}",
            c.ions.len()
        )));
    }
    let init = match c.init {
        InitKind::String => InitStrategy::StringSeed { spacing: None },
        InitKind::Random => InitStrategy::RandomRestart {
            restarts: c.restarts,
            seed: c.seed,
        },
    };
    let opts = SolveOptions {
        init,
        ..SolveOptions::default()
    };
    let s = solve_equilibrium(&model, &assign_ions(&c.ions), &opts)?;
    let positions: Vec<[f64; 3]> = s.positions.iter().map(|p| [to_um(p.x), to_um(p.y), to_um(p.z)]).collect();
    let rows = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                i.into(),
                s.wells[i].into(),
                s.string_labels[i].into(),
                p[0].into(),
                p[1].into(),
                p[2].into(),
            ]
        })
        .collect();
    out.report(
        "crystal",
        CrystalReport {
            energy_mev: joule_to_mev(s.energy),
            max_force_n: s.max_force,
            evaluations: s.evaluations,
            converged: s.converged,
            min_curvature: s.min_curvature,
            min_separation_um: Some(s.min_separation()).filter(|d| d.is_finite()).map(to_um),
            wells: s.wells.clone(),
            string_labels: s.string_labels.clone(),
            positions_um: positions,
        },
    )?;
    out.table(Table {
        name: "crystal_positions",
        columns: &["ion", "well", "string", "x_um", "y_um", "z_um"],
        rows,
    })
}

fn ratios_for_separations(model: &TrapModel, d_um: &[f64]) -> Result<Vec<f64>, CliError> {
    let mut rs = d_um
        .iter()
        .map(|&d| ratio_for_separation(model, um(d), RATIO_TOL))
        .collect::<trapscape::Result<Vec<f64>>>()?;
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    Ok(rs)
}

#[derive(Serialize)]
struct ModeDump {
    r: f64,
    frequencies_hz: Vec<f64>,
    labels: Vec<ModeLabel>,
    /// Column-major, one mode per inner vector.
    eigenvectors: Vec<Vec<f64>>,
}

pub fn modes_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let ms = &cfg.modes_sweep;
    let model = cfg.base_model()?;
    let rs = match (&ms.r, &ms.d_um) {
        (Some(r), _) => r.values()?,
        (None, Some(d)) => ratios_for_separations(&model, &d.values()?)?,
        (None, None) => unreachable!("validated"),
    };
    let opts = DegeneracyOptions {
        omega_z: angular(ms.f_z_hz),
        ions_per_string: ms.ions_per_string,
    };
    let points = degeneracy_sweep(&model, &rs, &opts);
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        if let Some(e) = &p.error {
            warn!("R = {}: {e}", p.r);
        }
        let f = |k: usize| p.normalized.map(|v| v[k]);
        rows.push(vec![
            p.r.into(),
            p.separation.map(to_um).into(),
            f(0).into(),
            f(1).into(),
            f(2).into(),
            f(3).into(),
        ]);
    }
    out.table(Table {
        name: "modes_sweep",
        columns: &["R", "d_um", "f_com_in", "f_com_out", "f_str_in", "f_str_out"],
        rows,
    })?;
    if ms.eigenvectors {
        let mut dumps = Vec::new();
        for &r in &rs {
            let m = model.with_ratio(r)?;
            let set = find_nodes(&m)?;
            let m = m.with_wells(wells_at_nodes(&set, opts.omega_z, 0.0)?)?;
            let counts = vec![ms.ions_per_string; set.nodes.len()];
            let s = solve_equilibrium(&m, &assign_ions(&counts), &SolveOptions::default())?;
            let spec = normal_modes(&m, &s)?;
            dumps.push(ModeDump {
                r,
                frequencies_hz: spec.frequencies.iter().map(|&w| hertz(w)).collect(),
                labels: spec.labels.clone(),
                eigenvectors: spec.eigenvectors.column_iter().map(|c| c.iter().copied().collect()).collect(),
            });
        }
        out.report("modes_eigenvectors", dumps)?;
    }
    Ok(())
}

/// Model at the configured or separation-derived ratio, plus that ratio.
fn two_string_model(cfg: &RunConfig, d_um: Option<f64>) -> Result<(TrapModel, f64), CliError> {
    let base = cfg.base_model()?;
    match d_um {
        Some(d) => {
            let r = ratio_for_separation(&base, um(d), RATIO_TOL)?;
            Ok((base.with_ratio(r)?, r))
        }
        None => Ok((base, cfg.drive.r)),
    }
}

pub fn corrugation(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let c = &cfg.corrugation;
    let (model, r) = two_string_model(cfg, c.d_um)?;
    let opts = TwoStringOptions {
        ions_per_string: c.ions_per_string,
        omega_z: angular(c.f_z_hz),
        target_string: c.target_string,
    };
    let (m, state, _) = two_string_crystal(&model, &opts)?;
    let rep = corrugation_parameter(&m, &state, c.target_string)?;
    let profile = corrugation_potential(&m, &state, c.target_string, c.samples)?;
    info!("eta = {:.4}", rep.eta);
    out.report(
        "corrugation",
        json!({
            "r": r,
            "d_um": to_um(rep.node_separation),
            "target_string": rep.target_string,
            "line_um": um2(profile.line),
            "omega_int_kHz": khz(rep.omega_int),
            "omega_0_kHz": khz(rep.omega_zero),
            "omega_0_coulomb_only_kHz": khz(rep.omega_zero_coulomb_only),
            "eta": rep.eta,
            "barrier_meV": joule_to_mev(rep.barrier),
            "barrier_K": joule_to_kelvin(rep.barrier),
            "modulation_depth_meV": joule_to_mev(profile.modulation_depth()),
        }),
    )?;
    let rows = profile
        .samples
        .iter()
        .map(|s| {
            vec![
                to_um(s.z).into(),
                joule_to_mev(s.u).into(),
                joule_to_mev(s.u_coulomb).into(),
                joule_to_mev(s.u_trap).into(),
            ]
        })
        .collect();
    out.table(Table {
        name: "corrugation_profile",
        columns: &["z_um", "U_meV", "U_coulomb_meV", "U_trap_meV"],
        rows,
    })?;

    if let Some(range) = c.eta_sweep_d_um {
        let rs = ratios_for_separations(&cfg.base_model()?, &range.values()?)?;
        let points = eta_sweep(&cfg.base_model()?, &rs, &opts);
        let mut rows = Vec::with_capacity(points.len());
        for p in &points {
            if let Some(e) = &p.error {
                warn!("R = {}: {e}", p.r);
            }
            rows.push(vec![
                p.r.into(),
                p.separation.map(to_um).into(),
                p.eta.into(),
                p.omega_int.map(khz).into(),
                p.omega_zero.map(khz).into(),
                p.barrier.map(joule_to_mev).into(),
            ]);
        }
        out.table(Table {
            name: "eta_sweep",
            columns: &["R", "d_um", "eta", "f_int_kHz", "f_0_kHz", "barrier_meV"],
            rows,
        })?;
    }
    Ok(())
}

pub fn slide(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = &cfg.slide;
    let (model, r) = two_string_model(cfg, s.d_um)?;
    let opts = TwoStringOptions {
        ions_per_string: s.ions_per_string,
        omega_z: angular(s.f_z_hz),
        target_string: 0,
    };
    let (m, state, nodes) = two_string_crystal(&model, &opts)?;
    let offsets: Vec<f64> = s.offsets_um.values()?.into_iter().map(um).collect();
    let rep = quasi_static_slide(
        &m,
        &state,
        &offsets,
        &SlideOptions {
            moved_well: s.moved_well,
            slip_fraction: s.slip_fraction,
        },
    )?;
    if let Some(e) = rep.error {
        return Err(CliError::Numerical(format!("slide aborted: {e}")));
    }
    info!("{} slips, hysteresis {:.3e} m", rep.slip_count(), rep.hysteresis);
    out.report(
        "slide",
        json!({
            "r": r,
            "d_um": nodes.separation().map(to_um),
            "moved_well": rep.moved_well,
            "slip_threshold_um": to_um(rep.slip_threshold),
            "slips": rep.slip_count(),
            "hysteresis_um": to_um(rep.hysteresis),
        }),
    )?;
    let mut rows = Vec::new();
    for (dir, steps) in [("forward", &rep.forward), ("backward", &rep.backward)] {
        for st in steps {
            rows.push(vec![
                dir.into(),
                to_um(st.offset).into(),
                to_um(st.max_displacement).into(),
                st.slip.into(),
                joule_to_mev(st.energy).into(),
            ]);
        }
    }
    out.table(Table {
        name: "slide",
        columns: &["direction", "offset_um", "max_disp_um", "slip_flag", "energy_meV"],
        rows,
    })
}

pub fn dc_solve(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let basis = cfg.dc_basis()?;
    let constraints = cfg.dc_constraints()?;
    let sol = solve_dc_voltages(&basis, &constraints)?;
    if !sol.feasible {
        return Err(CliError::Numerical(format!(
            "DC constraints {:?} cannot be met (rank {}, residuals {:?})",
            sol.infeasible, sol.rank, sol.residuals
        )));
    }
    let points: Vec<[f64; 3]> = cfg.dc.check_points_um.iter().map(|p| p.map(um)).collect();
    let check = dc_field_check(&basis, &sol.voltages, &points)?;
    let electrodes: Vec<_> = basis
        .electrodes
        .iter()
        .zip(&sol.voltages)
        .map(|(e, v)| json!({ "label": e.label(), "voltage": v }))
        .collect();
    let check: Vec<_> = check
        .iter()
        .map(|c| {
            json!({
                "point_um": c.point.map(to_um),
                "potential_V": c.potential,
                "gradient_V_per_m": c.gradient,
                "hessian_V_per_m2": c.hessian,
            })
        })
        .collect();
    out.report(
        "dc_solution",
        json!({
            "electrodes": electrodes,
            "residuals": sol.residuals,
            "rank": sol.rank,
            "method": sol.method,
            "field_check": check,
        }),
    )
}
