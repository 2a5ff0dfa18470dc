//! RF nodes in the cross-section and the single-well to double-well
//! bifurcation.
//!
//! Nodes are zeros of the analytic function `G(w)` (see [`crate::fields`]). A
//! coarse scan of `|G|^2` seeds Newton's method on `G` itself; nodes that
//! sit closer together than the scan pitch are recovered by deflated Newton
//! started next to each known node. Saddles of the pseudopotential away from
//! nodes are zeros of `G'`, which gives the inter-well barrier.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{AxialConfinement, TrapModel, MAX_RATIO};
use crate::units::um;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// No node inside the search window.
    None,
    Single,
    /// Two nodes stacked on the symmetry axis.
    VerticalPair,
    /// Two nodes side by side in a plane parallel to the surface.
    HorizontalPair,
}

impl Topology {
    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::None => "none",
            Topology::Single => "single",
            Topology::VerticalPair => "vertical_pair",
            Topology::HorizontalPair => "horizontal_pair",
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSet {
    /// Node positions `(x, y)`, sorted by `x` then `y`.
    pub nodes: Vec<[f64; 2]>,
    pub topology: Topology,
    /// Pseudopotential at the saddle between the two nodes (J).
    pub barrier: Option<f64>,
    pub saddle: Option<[f64; 2]>,
}

impl NodeSet {
    pub fn separation(&self) -> Option<f64> {
        match self.nodes.as_slice() {
            [a, b] => Some((a[0] - b[0]).hypot(a[1] - b[1])),
            _ => None,
        }
    }
}

/// Search window and tolerances of [`find_nodes_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSearch {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub pitch: f64,
    /// Convergence threshold on `|E|` (V/m).
    pub field_tol: f64,
    pub max_iter: usize,
    /// Refined nodes closer than this are the same node.
    pub merge_tol: f64,
    /// Pairs closer than this are reported as a single node.
    pub degenerate_tol: f64,
}

impl Default for NodeSearch {
    fn default() -> Self {
        NodeSearch {
            x_range: (um(-150.0), um(150.0)),
            y_range: (um(2.0), um(200.0)),
            pitch: um(2.0),
            field_tol: 1e-4,
            max_iter: 400,
            merge_tol: um(0.1),
            degenerate_tol: um(0.2),
        }
    }
}

impl NodeSearch {
    fn contains(&self, w: Complex64) -> bool {
        w.re >= self.x_range.0 && w.re <= self.x_range.1 && w.im >= self.y_range.0 && w.im <= self.y_range.1
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_range.0 < self.x_range.1) || !(self.y_range.0 < self.y_range.1) || !(self.y_range.0 > 0.0) {
            return Err(Error::Domain(format!(
                "invalid node search window x {:?} y {:?}",
                self.x_range, self.y_range
            )));
        }
        if !(self.pitch > 0.0) || !(self.field_tol > 0.0) {
            return Err(Error::Domain("node search pitch and tolerance must be positive".into()));
        }
        Ok(())
    }
}

enum Refined {
    Converged(Complex64),
    Diverged(Complex64, f64),
}

/// Damped Newton on `G(w) / prod(w - r_k)`.
fn newton_node(model: &TrapModel, start: Complex64, deflate: &[Complex64], search: &NodeSearch) -> Refined {
    let max_step = 10.0 * search.pitch;
    let deflated_norm = |w: Complex64, g: Complex64| {
        deflate.iter().fold(g.norm(), |acc, r| acc / (w - r).norm())
    };
    let mut w = start;
    let [mut g, mut g1, _] = model.rf_complex(w);
    for _ in 0..search.max_iter {
        if g.norm() < search.field_tol {
            return Refined::Converged(w);
        }
        let denom = g1 / g - deflate.iter().map(|r| (w - r).inv()).sum::<Complex64>();
        let mut step = -denom.inv();
        if !step.re.is_finite() || !step.im.is_finite() {
            return Refined::Diverged(w, g.norm());
        }
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        let current = deflated_norm(w, g);
        let mut accepted = false;
        for _ in 0..30 {
            let trial = w + step;
            let [tg, tg1, _] = model.rf_complex(trial);
            if deflated_norm(trial, tg) < current || tg.norm() < search.field_tol {
                w = trial;
                g = tg;
                g1 = tg1;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Stuck where G' vanishes between two close nodes: jump to the
            // quadratic estimate of either node, w + sqrt(-2 G / G'').
            let g2 = model.rf_complex(w)[2];
            let delta = (-2.0 * g / g2).sqrt();
            let best = [w + delta, w - delta]
                .into_iter()
                .map(|t| {
                    let tg = model.rf_complex(t);
                    (deflated_norm(t, tg[0]), t, tg)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match best {
                Some((n, t, tg)) if n < current && n.is_finite() => {
                    w = t;
                    g = tg[0];
                    g1 = tg[1];
                }
                _ => return Refined::Diverged(w, g.norm()),
            }
        }
    }
    if g.norm() < search.field_tol {
        Refined::Converged(w)
    } else {
        Refined::Diverged(w, g.norm())
    }
}

/// Newton on `G'` from `start`: a critical point of `|G|^2` that is not a node.
fn newton_saddle(model: &TrapModel, start: Complex64) -> Option<Complex64> {
    let mut w = start;
    let scale = start.norm().max(um(1.0));
    for _ in 0..100 {
        let [_, g1, g2] = model.rf_complex(w);
        let step = -g1 / g2;
        if !step.re.is_finite() || !step.im.is_finite() {
            return None;
        }
        w += step;
        if step.norm() < 1e-13 * scale {
            return Some(w);
        }
    }
    None
}

/// Saddle of the pseudopotential between two nodes: highest point on the
/// straight segment, refined to the true critical point. When the pass has
/// moved off the segment (large R) the lowest critical point near the pair
/// is used instead.
pub fn saddle_between(model: &TrapModel, a: [f64; 2], b: [f64; 2]) -> ([f64; 2], f64) {
    let kappa = model.pseudo_prefactor();
    let n = 200;
    let (mut best, mut best_v) = (Complex64::new(a[0], a[1]), f64::NEG_INFINITY);
    for i in 1..n {
        let t = i as f64 / n as f64;
        let w = Complex64::new(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        let v = model.rf_complex(w)[0].norm_sqr();
        if v > best_v {
            best_v = v;
            best = w;
        }
    }
    let len = (a[0] - b[0]).hypot(a[1] - b[1]);
    let refined = newton_saddle(model, best).filter(|s| (s - best).norm() < 0.5 * len && s.im > 0.0);
    if let Some(s) = refined {
        return ([s.re, s.im], kappa * model.rf_complex(s)[0].norm_sqr());
    }
    // At large ratios the pass leaves the segment (the on-axis saddle merges
    // with a second critical point and splits off-axis), so look for the
    // lowest critical point of |G|^2 around the pair instead.
    match lowest_saddle_near(model, a, b) {
        Some(s) => ([s.re, s.im], kappa * model.rf_complex(s)[0].norm_sqr()),
        None => {
            log::warn!("no saddle found near the nodes; using the highest point on the segment");
            ([best.re, best.im], kappa * best_v)
        }
    }
}

fn lowest_saddle_near(model: &TrapModel, a: [f64; 2], b: [f64; 2]) -> Option<Complex64> {
    let len = (a[0] - b[0]).hypot(a[1] - b[1]);
    let span = len.max(um(100.0));
    let (x0, x1) = (a[0].min(b[0]) - span, a[0].max(b[0]) + span);
    let y1 = a[1].max(b[1]) + 2.0 * span;
    let step = um(10.0);
    let nx = ((x1 - x0) / step).ceil() as usize;
    let ny = (y1 / step).ceil() as usize;
    let mut best: Option<(f64, Complex64)> = None;
    for i in 0..=nx {
        for j in 1..=ny {
            let start = Complex64::new(x0 + i as f64 * step, j as f64 * step);
            let Some(s) = newton_saddle(model, start) else { continue };
            if !(s.im > um(0.5)) || s.re < x0 || s.re > x1 || s.im > y1 {
                continue;
            }
            let v = model.rf_complex(s)[0].norm_sqr();
            if best.is_none_or(|(bv, _)| v < bv) {
                best = Some((v, s));
            }
        }
    }
    best.map(|(_, s)| s)
}

pub fn find_nodes(model: &TrapModel) -> Result<NodeSet> {
    find_nodes_with(model, &NodeSearch::default())
}

pub fn find_nodes_with(model: &TrapModel, search: &NodeSearch) -> Result<NodeSet> {
    search.validate()?;
    let nx = ((search.x_range.1 - search.x_range.0) / search.pitch).round() as usize + 1;
    let ny = ((search.y_range.1 - search.y_range.0) / search.pitch).round() as usize + 1;
    let xs = crate::fields::linspace(search.x_range.0, search.x_range.1, nx.max(3));
    let ys = crate::fields::linspace(search.y_range.0, search.y_range.1, ny.max(3));
    let (nx, ny) = (xs.len(), ys.len());
    let grid: Vec<f64> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| model.field_norm_sqr(x, y)))
        .collect();
    let at = |ix: usize, iy: usize| grid[iy * nx + ix];

    let mut candidates = Vec::new();
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let v = at(ix, iy);
            let is_min = (-1i64..=1).all(|dy| {
                (-1i64..=1).all(|dx| (dx == 0 && dy == 0) || at((ix as i64 + dx) as usize, (iy as i64 + dy) as usize) > v)
            });
            if is_min {
                candidates.push((v, Complex64::new(xs[ix], ys[iy])));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut roots: Vec<Complex64> = Vec::new();
    let push = |roots: &mut Vec<Complex64>, w: Complex64| {
        if search.contains(w) && roots.iter().all(|r| (r - w).norm() > search.merge_tol) {
            roots.push(w);
            true
        } else {
            false
        }
    };
    for &(_, start) in &candidates {
        match newton_node(model, start, &[], search) {
            Refined::Converged(w) => {
                push(&mut roots, w);
            }
            Refined::Diverged(w, residual) => {
                return Err(Error::NoConvergence {
                    evaluations: search.max_iter,
                    residual,
                    message: format!(
                        "node refinement from ({:.3} um, {:.3} um) stalled at ({:.3} um, {:.3} um)",
                        start.re / 1e-6,
                        start.im / 1e-6,
                        w.re / 1e-6,
                        w.im / 1e-6
                    ),
                });
            }
        }
    }

    // Nodes closer than the scan pitch share one grid minimum; look for a
    // partner next to every known node.
    let mut k = 0;
    while k < roots.len() {
        let r = roots[k];
        let offsets = [
            Complex64::new(1.0, 0.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.0, -1.0),
        ];
        for dir in offsets {
            let start = r + dir * (0.5 * search.pitch);
            if let Refined::Converged(w) = newton_node(model, start, &roots, search) {
                push(&mut roots, w);
            }
        }
        k += 1;
    }

    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut nodes: Vec<[f64; 2]> = roots.iter().map(|w| [w.re, w.im]).collect();

    let topology = match nodes.len() {
        0 => Topology::None,
        1 => Topology::Single,
        2 => {
            let (a, b) = (nodes[0], nodes[1]);
            let dx = (a[0] - b[0]).abs();
            let dy = (a[1] - b[1]).abs();
            if dx.hypot(dy) < search.degenerate_tol {
                nodes = vec![[0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]];
                Topology::Single
            } else if dx > dy {
                Topology::HorizontalPair
            } else {
                Topology::VerticalPair
            }
        }
        n => {
            let list: Vec<String> = nodes
                .iter()
                .map(|p| format!("({:.3}, {:.3}) um", p[0] / 1e-6, p[1] / 1e-6))
                .collect();
            return Err(Error::State(format!(
                "found {n} RF nodes in the search window, expected at most 2: {}",
                list.join(", ")
            )));
        }
    };
    if topology == Topology::VerticalPair {
        nodes.sort_by(|a, b| a[1].total_cmp(&b[1]));
    }

    let (saddle, barrier) = if nodes.len() == 2 {
        let (s, b) = saddle_between(model, nodes[0], nodes[1]);
        (Some(s), Some(b))
    } else {
        (None, None)
    };

    Ok(NodeSet {
        nodes,
        topology,
        barrier,
        saddle,
    })
}

/// Distance between the two wells of a horizontal pair.
pub fn node_separation(model: &TrapModel) -> Result<f64> {
    let set = find_nodes(model)?;
    separation_of(&set)
}

pub fn separation_of(set: &NodeSet) -> Result<f64> {
    if set.topology != Topology::HorizontalPair {
        return Err(Error::State(format!(
            "node separation needs a horizontal_pair topology, found {}",
            set.topology
        )));
    }
    Ok(set.separation().expect("pair has two nodes"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub r: f64,
    pub topology: Option<Topology>,
    /// Separation, only for horizontal pairs.
    pub separation: Option<f64>,
    pub barrier: Option<f64>,
    pub nodes: Vec<[f64; 2]>,
    pub error: Option<String>,
}

/// Node topology, separation and barrier for each ratio. Failures are
/// recorded per point.
pub fn separation_sweep(model: &TrapModel, r_values: &[f64]) -> Result<Vec<SweepPoint>> {
    separation_sweep_with(model, r_values, &NodeSearch::default())
}

pub fn separation_sweep_with(model: &TrapModel, r_values: &[f64], search: &NodeSearch) -> Result<Vec<SweepPoint>> {
    if r_values.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Domain("ratio values must be sorted ascending".into()));
    }
    Ok(r_values
        .par_iter()
        .map(|&r| {
            let result = model.with_ratio(r).and_then(|m| find_nodes_with(&m, search));
            match result {
                Ok(set) => SweepPoint {
                    r,
                    topology: Some(set.topology),
                    separation: (set.topology == Topology::HorizontalPair).then(|| set.separation()).flatten(),
                    barrier: set.barrier,
                    nodes: set.nodes,
                    error: None,
                },
                Err(e) => SweepPoint {
                    r,
                    topology: None,
                    separation: None,
                    barrier: None,
                    nodes: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalRatio {
    pub r_lo: f64,
    pub r_hi: f64,
    pub r_mid: f64,
}

fn is_horizontal(model: &TrapModel, r: f64) -> Result<bool> {
    Ok(find_nodes(&model.with_ratio(r)?)?.topology == Topology::HorizontalPair)
}

/// Ratio at which the vertical pair turns into a horizontal pair, bracketed
/// to a width of at most `tol`.
pub fn critical_ratio(model: &TrapModel, tol: f64) -> Result<CriticalRatio> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    let steps = 100;
    let coarse: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let flags: Vec<Result<bool>> = coarse.par_iter().map(|&r| is_horizontal(model, r)).collect();
    let mut prev: Option<f64> = None;
    let mut bracket = None;
    for (&r, flag) in coarse.iter().zip(flags) {
        if flag? {
            match prev {
                Some(lo) => {
                    bracket = Some((lo, r));
                    break;
                }
                None => {
                    return Err(Error::State("wells are already side by side at R = 0".into()));
                }
            }
        }
        prev = Some(r);
    }
    let (mut lo, mut hi) =
        bracket.ok_or_else(|| Error::State("no single-well to double-well transition for R in [0, 1]".into()))?;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if is_horizontal(model, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalRatio {
        r_lo: lo,
        r_hi: hi,
        r_mid: 0.5 * (lo + hi),
    })
}

/// Ratio above the transition at which the wells are `target` apart.
pub fn ratio_for_separation(model: &TrapModel, target: f64, tol: f64) -> Result<f64> {
    if !(target > 0.0) || !(tol > 0.0) {
        return Err(Error::Domain("target separation and tolerance must be positive".into()));
    }
    let crit = critical_ratio(model, 1e-3)?;
    let sep = |r: f64| -> Result<f64> {
        let set = find_nodes(&model.with_ratio(r)?)?;
        Ok(if set.topology == Topology::HorizontalPair {
            set.separation().unwrap_or(0.0)
        } else {
            0.0
        })
    };
    let mut lo = crit.r_lo;
    let mut hi = crit.r_hi;
    while sep(hi)? < target {
        lo = hi;
        hi = (hi + 0.1).min(MAX_RATIO);
        if lo >= MAX_RATIO {
            return Err(Error::Domain(format!(
                "separation {:.3} um is not reachable for R <= {MAX_RATIO}",
                target / 1e-6
            )));
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if sep(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Worst-case error of `R = V_cRF / V_RF` when both voltages carry an
/// independent relative error `eps`.
pub fn ratio_sensitivity(r: f64, voltage_rel_err: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&voltage_rel_err) {
        return Err(Error::Domain(format!(
            "relative voltage error must lie in [0, 0.5), got {voltage_rel_err}"
        )));
    }
    let e = voltage_rel_err;
    Ok(r * ((1.0 + e) / (1.0 - e) - 1.0))
}

/// One axial well per node, all with the same axial frequency.
pub fn wells_at_nodes(set: &NodeSet, omega_z: f64, center_z: f64) -> Result<Vec<AxialConfinement>> {
    set.nodes
        .iter()
        .map(|n| AxialConfinement::new(omega_z, *n, center_z))
        .collect()
}
