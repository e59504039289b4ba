//! Power allocation: uniform baselines, feasible-set projections, the
//! projected-ascent inner solvers, and the four successive lower-bound
//! optimizers (sum-rate and min-rate, downlink and uplink).
//!
//! Downlink optimizers work in radiated-power variables: the weight eta of a
//! link scales the precoder, so the watts an AP spends on it are
//! eta * tr(Q^H Q). Optimizing phi = eta * tr(Q^H Q) makes every AP budget a
//! plain capped simplex and keeps the uniform baseline exactly on it.
//!
//! Each block step maximizes a concave surrogate (tight at the anchor, with
//! matching gradient) and then re-checks the true objective before accepting
//! the move; the check makes the ascent monotone even where the surrogate's
//! lower-bound property degenerates (see the curvature notes in the rate
//! module tests).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate::{DlBlockContext, DlEffectiveChannels, DlPowers, UlEffectiveChannels};

/// Clamp scale for 1/sqrt(power) gradient factors, relative to the budget.
pub const SQRT_FLOOR_SCALE: f64 = 1e-12;

/// Knobs of the iterative solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative objective change that ends anchor refreshes and sweeps.
    pub outer_tol: f64,
    /// Projected-gradient sup-norm (in normalized variables) that ends the
    /// inner ascent.
    pub inner_tol: f64,
    /// Anchor refreshes per block solve.
    pub max_outer: usize,
    /// Inner ascent iterations per subproblem.
    pub max_inner: usize,
    /// Cyclic passes over the blocks.
    pub max_sweeps: usize,
    pub step_init: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            outer_tol: 1e-4,
            inner_tol: 1e-6,
            max_outer: 20,
            max_inner: 200,
            max_sweeps: 50,
            step_init: 1.0,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0 && self.step_init > 0.0) {
            return Err(Error::InvalidParameter(
                "solver tolerances and step size must be positive".into(),
            ));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.max_sweeps == 0 {
            return Err(Error::InvalidParameter(
                "solver iteration caps must be at least 1".into(),
            ));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidParameter(
                "armijo_c must lie strictly between 0 and 1".into(),
            ));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::InvalidParameter(
                "armijo_shrink must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

/// Granularity of the downlink sum-rate block sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// One block per AP (all that AP's link powers together).
    PerAp,
    /// Every link power in a single block.
    SingleBlock,
    /// One block per individual link power.
    PerScalar,
}

/// Objective history of one optimizer run. Values are in bit/s: the sum rate
/// or the minimum rate, recorded at the start and after every block solve.
#[derive(Debug, Clone, Serialize)]
pub struct OptimizationTrace {
    pub objective_per_iteration: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub constraint_violation_max: f64,
}

/// Euclidean projection onto {w >= 0, sum(w) <= budget}.
pub fn project_capped_simplex(v: &[f64], budget: f64) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= budget {
        return clipped;
    }
    // The cap binds: shift by the threshold that lands the sum on the budget.
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - budget) / (i + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn project_box(v: &[f64], caps: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(caps)
        .map(|(&x, &c)| x.clamp(0.0, c))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l_inf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn stepped(x: &[f64], step: f64, g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(&xi, &gi)| xi + step * gi).collect()
}

/// Projected gradient ascent with Armijo backtracking on a concave smooth
/// objective. Accepted steps never decrease the objective.
fn projected_ascent(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    project: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut x = project(start);
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::InvalidParameter(
            "objective is not finite at the starting point".into(),
        ));
    }
    for _ in 0..cfg.max_inner {
        let g = grad(&x)?;
        let probe = project(&stepped(&x, 1.0, &g));
        if l_inf_diff(&probe, &x) < cfg.inner_tol {
            break;
        }
        let mut step = cfg.step_init;
        let mut advanced = false;
        for _ in 0..80 {
            let cand = project(&stepped(&x, step, &g));
            let gain = dot(&g, &cand.iter().zip(&x).map(|(c, xi)| c - xi).collect::<Vec<_>>());
            let fc = f(&cand)?;
            if fc.is_finite() && fc >= fx + cfg.armijo_c * gain {
                if l_inf_diff(&cand, &x) < 1e-18 {
                    return Ok(x);
                }
                x = cand;
                fx = fc;
                advanced = true;
                break;
            }
            step *= cfg.armijo_shrink;
        }
        if !advanced {
            break;
        }
    }
    Ok(x)
}

/// Maximizes a concave objective over {w >= 0, sum(w) <= budget}. The
/// returned point is feasible and scores at least the starting objective.
pub fn solve_concave_block(
    objective: &dyn Fn(&[f64]) -> Result<f64>,
    gradient: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    budget: f64,
    start: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    if !(budget > 0.0) {
        return Err(Error::InvalidParameter("budget must be positive".into()));
    }
    projected_ascent(
        objective,
        gradient,
        &|v| project_capped_simplex(v, budget),
        start,
        cfg,
    )
}

/// Projected supergradient ascent with diminishing steps for concave
/// nonsmooth objectives (max-min). Tracks and returns the best iterate.
fn projected_supergradient(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    supergrad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    project: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut x = project(start);
    let mut best = x.clone();
    let mut f_best = f(&x)?;
    if !f_best.is_finite() {
        return Err(Error::InvalidParameter(
            "objective is not finite at the starting point".into(),
        ));
    }
    for t in 0..cfg.max_inner {
        let g = supergrad(&x)?;
        let norm = dot(&g, &g).sqrt();
        if norm < 1e-15 {
            break;
        }
        let alpha = cfg.step_init / ((t + 1) as f64).sqrt() / norm;
        x = project(&stepped(&x, alpha, &g));
        let fx = f(&x)?;
        if fx > f_best {
            f_best = fx;
            best = x.clone();
        }
    }
    Ok(best)
}

/// Uniform downlink weights: each AP splits its maximum power evenly across
/// the users it serves, normalized per link by the precoder trace so the AP
/// radiates exactly its budget. Returns the allocation and the count of
/// zero-trace links left unpowered.
pub fn uniform_dl(eff: &DlEffectiveChannels, p_max_ap: f64) -> Result<(DlPowers, usize)> {
    if !(p_max_ap > 0.0) {
        return Err(Error::InvalidParameter(
            "AP power budget must be positive".into(),
        ));
    }
    let mut eta = eff.zero_powers();
    let mut skipped = 0;
    for m in 0..eff.n_aps() {
        let served = eff.ap_slots[m].len();
        if served == 0 {
            continue;
        }
        let share = p_max_ap / served as f64;
        for &(k, i) in &eff.ap_slots[m] {
            let tr = eff.precoder_traces[k][i];
            if tr > 0.0 {
                eta[k][i] = share / tr;
            } else {
                skipped += 1;
            }
        }
    }
    Ok((eta, skipped))
}

/// Uniform uplink powers: every user transmits at full power, split across
/// its antennas.
pub fn uniform_ul(n_users: usize, n_ms_antennas: usize, p_max_ms: f64) -> Result<Vec<f64>> {
    if n_ms_antennas == 0 {
        return Err(Error::InvalidParameter(
            "need at least one MS antenna".into(),
        ));
    }
    if !(p_max_ms > 0.0) {
        return Err(Error::InvalidParameter(
            "MS power budget must be positive".into(),
        ));
    }
    Ok(vec![p_max_ms / n_ms_antennas as f64; n_users])
}

/// Shared state for one downlink block solve: variable mapping between the
/// normalized radiated powers x (unit capped simplex) and the link weights.
struct DlBlockVars {
    traces: Vec<f64>,
    usable: Vec<bool>,
    p_max: f64,
}

impl DlBlockVars {
    fn new(eff: &DlEffectiveChannels, vars: &[(usize, usize)], p_max: f64) -> Self {
        let traces: Vec<f64> = vars
            .iter()
            .map(|&(k, i)| eff.precoder_traces[k][i])
            .collect();
        let usable = traces.iter().map(|&t| t > 0.0).collect();
        DlBlockVars {
            traces,
            usable,
            p_max,
        }
    }

    fn x_from_eta(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(&self.traces)
            .map(|(&e, &t)| e * t / self.p_max)
            .collect()
    }

    fn eta_from_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.traces)
            .zip(&self.usable)
            .map(|((&xi, &t), &ok)| if ok { xi * self.p_max / t } else { 0.0 })
            .collect()
    }

    /// Chain rule d/dx from d/d(eta), with unusable coordinates masked out.
    fn grad_to_x(&self, grad_eta: &[f64]) -> Vec<f64> {
        grad_eta
            .iter()
            .zip(&self.traces)
            .zip(&self.usable)
            .map(|((&g, &t), &ok)| if ok { g * self.p_max / t } else { 0.0 })
            .collect()
    }

    fn mask(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.usable)
            .map(|(&x, &ok)| if ok { x } else { 0.0 })
            .collect()
    }
}

fn block_eta(vars: &[(usize, usize)], eta: &DlPowers) -> Vec<f64> {
    vars.iter().map(|&(k, i)| eta[k][i]).collect()
}

fn write_block(vars: &[(usize, usize)], values: &[f64], eta: &mut DlPowers) {
    for (v, &(k, i)) in vars.iter().enumerate() {
        eta[k][i] = values[v];
    }
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1.0)
}

/// Solves one downlink sum-rate block by successive concave surrogates.
/// Returns the block's weights after the anchor refreshes settle.
fn solve_dl_block_sum(
    ctx: &DlBlockContext,
    vars_map: &DlBlockVars,
    start_eta: &[f64],
    bandwidth_hz: f64,
    floor: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut x = vars_map.mask(&vars_map.x_from_eta(start_eta));
    let mut current = ctx.sum_rate(&vars_map.eta_from_x(&x))?;
    for _ in 0..cfg.max_outer {
        let anchor_eta = vars_map.eta_from_x(&x);
        let g2_anchor: f64 = ctx.g_values(&anchor_eta, false)?.iter().sum();
        let lin = ctx.g_gradient(&anchor_eta, false, None, floor)?;

        let f = |xc: &[f64]| -> Result<f64> {
            let eta = vars_map.eta_from_x(xc);
            let g1: f64 = ctx.g_values(&eta, true)?.iter().sum();
            let shift: f64 = lin
                .iter()
                .zip(eta.iter().zip(&anchor_eta))
                .map(|(l, (e, a))| l * (e - a))
                .sum();
            Ok((g1 - g2_anchor - shift) / bandwidth_hz)
        };
        let grad = |xc: &[f64]| -> Result<Vec<f64>> {
            let eta = vars_map.eta_from_x(xc);
            let g1 = ctx.g_gradient(&eta, true, None, floor)?;
            let diff: Vec<f64> = g1
                .iter()
                .zip(&lin)
                .map(|(a, b)| (a - b) / bandwidth_hz)
                .collect();
            Ok(vars_map.grad_to_x(&diff))
        };
        let project = |v: &[f64]| vars_map.mask(&project_capped_simplex(v, 1.0));

        x = projected_ascent(&f, &grad, &project, &x, cfg)?;
        let refreshed = ctx.sum_rate(&vars_map.eta_from_x(&x))?;
        let done = relative_change(refreshed, current) < cfg.outer_tol;
        current = refreshed;
        if done {
            break;
        }
    }
    Ok(vars_map.eta_from_x(&x))
}

/// Solves one downlink min-rate block: projected supergradient ascent on the
/// minimum of the per-user concave surrogates.
fn solve_dl_block_min(
    ctx: &DlBlockContext,
    vars_map: &DlBlockVars,
    start_eta: &[f64],
    active: &[bool],
    bandwidth_hz: f64,
    floor: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut x = vars_map.mask(&vars_map.x_from_eta(start_eta));
    let mut current = ctx.min_active_rate(&vars_map.eta_from_x(&x))?;
    let users: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
    if users.is_empty() {
        return Ok(vars_map.eta_from_x(&x));
    }
    for _ in 0..cfg.max_outer {
        let anchor_eta = vars_map.eta_from_x(&x);
        let g2_anchor = ctx.g_values(&anchor_eta, false)?;
        let mut lin = Vec::with_capacity(users.len());
        for &k in &users {
            lin.push(ctx.g_gradient(&anchor_eta, false, Some(k), floor)?);
        }

        let surrogates = |xc: &[f64]| -> Result<Vec<f64>> {
            let eta = vars_map.eta_from_x(xc);
            let g1 = ctx.g_values(&eta, true)?;
            let mut vals = Vec::with_capacity(users.len());
            for (u, &k) in users.iter().enumerate() {
                let shift: f64 = lin[u]
                    .iter()
                    .zip(eta.iter().zip(&anchor_eta))
                    .map(|(l, (e, a))| l * (e - a))
                    .sum();
                vals.push((g1[k] - g2_anchor[k] - shift) / bandwidth_hz);
            }
            Ok(vals)
        };
        let f = |xc: &[f64]| -> Result<f64> {
            Ok(surrogates(xc)?
                .into_iter()
                .fold(f64::INFINITY, f64::min))
        };
        let supergrad = |xc: &[f64]| -> Result<Vec<f64>> {
            let vals = surrogates(xc)?;
            let u_star = vals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(u, _)| u)
                .unwrap_or(0);
            let eta = vars_map.eta_from_x(xc);
            let g1 = ctx.g_gradient(&eta, true, Some(users[u_star]), floor)?;
            let diff: Vec<f64> = g1
                .iter()
                .zip(&lin[u_star])
                .map(|(a, b)| (a - b) / bandwidth_hz)
                .collect();
            Ok(vars_map.grad_to_x(&diff))
        };
        let project = |v: &[f64]| vars_map.mask(&project_capped_simplex(v, 1.0));

        x = projected_supergradient(&f, &supergrad, &project, &x, cfg)?;
        let refreshed = ctx.min_active_rate(&vars_map.eta_from_x(&x))?;
        let done = relative_change(refreshed, current) < cfg.outer_tol;
        current = refreshed;
        if done {
            break;
        }
    }
    Ok(vars_map.eta_from_x(&x))
}

fn dl_violation(eff: &DlEffectiveChannels, eta: &DlPowers, p_max_ap: f64) -> f64 {
    eff.budget_used(eta)
        .into_iter()
        .map(|u| (u - p_max_ap).max(0.0))
        .fold(0.0, f64::max)
}

/// Downlink sum-rate maximization: cyclic successive lower-bound ascent over
/// the chosen block partition, started from the uniform allocation.
pub fn slm_sum_rate_dl(
    eff: &DlEffectiveChannels,
    p_max_ap: f64,
    cfg: &SolverConfig,
    mode: BlockMode,
) -> Result<(DlPowers, OptimizationTrace)> {
    cfg.validate()?;
    let (mut eta, _) = uniform_dl(eff, p_max_ap)?;
    let floor = SQRT_FLOOR_SCALE * p_max_ap;
    let mut objective = eff.sum_rate(&eta)?;
    let mut trace = vec![objective];
    let mut sweeps = 0;
    let mut converged = !eff.active.iter().any(|&a| a);

    if !converged {
        'sweeps: for _ in 0..cfg.max_sweeps {
            let sweep_start = objective;
            sweeps += 1;
            match mode {
                BlockMode::PerAp | BlockMode::PerScalar => {
                    for ap in 0..eff.n_aps() {
                        if eff.ap_slots[ap].is_empty() {
                            continue;
                        }
                        let ctx = eff.block_context(ap, &eta);
                        let scalar_blocks: Vec<Vec<usize>> = match mode {
                            BlockMode::PerAp => vec![(0..ctx.vars().len()).collect()],
                            _ => (0..ctx.vars().len()).map(|v| vec![v]).collect(),
                        };
                        for block in scalar_blocks {
                            let vars: Vec<(usize, usize)> =
                                block.iter().map(|&v| ctx.vars()[v]).collect();
                            // Per-scalar blocks still solve inside the AP's
                            // full context; unchosen variables stay fixed by
                            // pinning them through the budget mapping below.
                            let candidate = solve_dl_subset(
                                eff, &ctx, &vars, &block, &eta, p_max_ap, floor, cfg,
                            )?;
                            let mut next = eta.clone();
                            write_block(&vars, &candidate, &mut next);
                            let next_obj = eff.sum_rate(&next)?;
                            if next_obj >= objective {
                                eta = next;
                                objective = next_obj;
                            }
                            trace.push(objective);
                        }
                    }
                }
                BlockMode::SingleBlock => {
                    let candidate = solve_dl_single_block_sum(eff, &eta, p_max_ap, floor, cfg)?;
                    let next_obj = eff.sum_rate(&candidate)?;
                    if next_obj >= objective {
                        eta = candidate;
                        objective = next_obj;
                    }
                    trace.push(objective);
                }
            }
            if relative_change(objective, sweep_start) < cfg.outer_tol {
                converged = true;
                break 'sweeps;
            }
        }
    }

    let violation = dl_violation(eff, &eta, p_max_ap);
    Ok((
        eta,
        OptimizationTrace {
            objective_per_iteration: trace,
            sweeps,
            converged,
            constraint_violation_max: violation,
        },
    ))
}

/// Solves a subset of one AP-block's variables (the whole block or a single
/// scalar) for the sum-rate objective, holding the rest of the block fixed.
/// The returned values align with `subset`.
#[allow(clippy::too_many_arguments)]
fn solve_dl_subset(
    eff: &DlEffectiveChannels,
    ctx: &DlBlockContext,
    vars: &[(usize, usize)],
    subset: &[usize],
    eta: &DlPowers,
    p_max_ap: f64,
    floor: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let all_vars = ctx.vars();
    let full_block = block_eta(all_vars, eta);
    if subset.len() == all_vars.len() {
        let vars_map = DlBlockVars::new(eff, all_vars, p_max_ap);
        return solve_dl_block_sum(ctx, &vars_map, &full_block, eff.bandwidth_hz, floor, cfg);
    }

    // Single-scalar subset: a box in the budget left over by the AP's other
    // links, still evaluated through the full block context.
    debug_assert_eq!(subset.len(), 1);
    let v = subset[0];
    let (k, i) = vars[0];
    let tr = eff.precoder_traces[k][i];
    if tr <= 0.0 {
        return Ok(vec![0.0]);
    }
    let others: f64 = all_vars
        .iter()
        .enumerate()
        .filter(|&(u, _)| u != v)
        .map(|(u, &(ku, iu))| full_block[u] * eff.precoder_traces[ku][iu])
        .sum();
    let cap_phi = (p_max_ap - others).max(0.0);
    let mut w = full_block.clone();
    let mut x = vec![w[v] * tr / p_max_ap];
    let cap_x = cap_phi / p_max_ap;
    let mut current = {
        w[v] = x[0] * p_max_ap / tr;
        ctx.sum_rate(&w)?
    };
    for _ in 0..cfg.max_outer {
        let mut anchor_w = w.clone();
        anchor_w[v] = x[0] * p_max_ap / tr;
        let g2_anchor: f64 = ctx.g_values(&anchor_w, false)?.iter().sum();
        let lin = ctx.g_gradient(&anchor_w, false, None, floor)?[v];
        let anchor_eta_v = anchor_w[v];

        let f = |xs: &[f64]| -> Result<f64> {
            let mut wc = anchor_w.clone();
            wc[v] = xs[0] * p_max_ap / tr;
            let g1: f64 = ctx.g_values(&wc, true)?.iter().sum();
            Ok((g1 - g2_anchor - lin * (wc[v] - anchor_eta_v)) / eff.bandwidth_hz)
        };
        let grad = |xs: &[f64]| -> Result<Vec<f64>> {
            let mut wc = anchor_w.clone();
            wc[v] = xs[0] * p_max_ap / tr;
            let g1 = ctx.g_gradient(&wc, true, None, floor)?[v];
            Ok(vec![(g1 - lin) / eff.bandwidth_hz * p_max_ap / tr])
        };
        let project = |xs: &[f64]| vec![xs[0].clamp(0.0, cap_x)];
        x = projected_ascent(&f, &grad, &project, &x, cfg)?;
        w[v] = x[0] * p_max_ap / tr;
        let refreshed = ctx.sum_rate(&w)?;
        let done = relative_change(refreshed, current) < cfg.outer_tol;
        current = refreshed;
        if done {
            break;
        }
    }
    Ok(vec![w[v]])
}

/// One-shot surrogate ascent over every downlink variable at once. The
/// feasible set is the product of the per-AP capped simplices, so the
/// projection splits per AP.
fn solve_dl_single_block_sum(
    eff: &DlEffectiveChannels,
    eta: &DlPowers,
    p_max_ap: f64,
    floor: f64,
    cfg: &SolverConfig,
) -> Result<DlPowers> {
    // Flatten variables as (user, slot) in user-major order.
    let vars: Vec<(usize, usize)> = (0..eff.n_users())
        .flat_map(|k| (0..eff.serving[k].len()).map(move |i| (k, i)))
        .collect();
    let traces: Vec<f64> = vars
        .iter()
        .map(|&(k, i)| eff.precoder_traces[k][i])
        .collect();
    let usable: Vec<bool> = traces.iter().map(|&t| t > 0.0).collect();
    // Per-AP index groups for the product projection.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); eff.n_aps()];
    for (v, &(k, i)) in vars.iter().enumerate() {
        groups[eff.serving[k][i]].push(v);
    }

    let eta_of = |x: &[f64]| -> DlPowers {
        let mut out = eff.zero_powers();
        for (v, &(k, i)) in vars.iter().enumerate() {
            if usable[v] {
                out[k][i] = x[v] * p_max_ap / traces[v];
            }
        }
        out
    };
    let x0: Vec<f64> = vars
        .iter()
        .enumerate()
        .map(|(v, &(k, i))| eta[k][i] * traces[v] / p_max_ap)
        .collect();

    let project = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for group in &groups {
            if group.is_empty() {
                continue;
            }
            let sub: Vec<f64> = group
                .iter()
                .map(|&u| if usable[u] { v[u] } else { 0.0 })
                .collect();
            let proj = project_capped_simplex(&sub, 1.0);
            for (slot, &u) in group.iter().enumerate() {
                out[u] = if usable[u] { proj[slot] } else { 0.0 };
            }
        }
        out
    };

    let mut x = project(&x0);
    let mut current = eff.sum_rate(&eta_of(&x))?;
    for _ in 0..cfg.max_outer {
        let anchor = eta_of(&x);
        let g2_anchor: f64 = eff.g_values(&anchor, false)?.iter().sum();
        let lin = eff.g_gradient(&anchor, false, None, floor)?;

        let f = |xc: &[f64]| -> Result<f64> {
            let e = eta_of(xc);
            let g1: f64 = eff.g_values(&e, true)?.iter().sum();
            let mut shift = 0.0;
            for &(k, i) in &vars {
                shift += lin[k][i] * (e[k][i] - anchor[k][i]);
            }
            Ok((g1 - g2_anchor - shift) / eff.bandwidth_hz)
        };
        let grad = |xc: &[f64]| -> Result<Vec<f64>> {
            let e = eta_of(xc);
            let g1 = eff.g_gradient(&e, true, None, floor)?;
            Ok(vars
                .iter()
                .enumerate()
                .map(|(v, &(k, i))| {
                    if usable[v] {
                        (g1[k][i] - lin[k][i]) / eff.bandwidth_hz * p_max_ap / traces[v]
                    } else {
                        0.0
                    }
                })
                .collect())
        };
        x = projected_ascent(&f, &grad, &project, &x, cfg)?;
        let refreshed = eff.sum_rate(&eta_of(&x))?;
        let done = relative_change(refreshed, current) < cfg.outer_tol;
        current = refreshed;
        if done {
            break;
        }
    }
    Ok(eta_of(&x))
}

/// Downlink min-rate maximization over per-AP blocks.
pub fn slm_min_rate_dl(
    eff: &DlEffectiveChannels,
    p_max_ap: f64,
    cfg: &SolverConfig,
) -> Result<(DlPowers, OptimizationTrace)> {
    cfg.validate()?;
    let (mut eta, _) = uniform_dl(eff, p_max_ap)?;
    let floor = SQRT_FLOOR_SCALE * p_max_ap;
    let mut objective = eff.min_active_rate(&eta)?;
    let mut trace = vec![objective];
    let mut sweeps = 0;
    let mut converged = !eff.active.iter().any(|&a| a);

    if !converged {
        'sweeps: for _ in 0..cfg.max_sweeps {
            let sweep_start = objective;
            sweeps += 1;
            for ap in 0..eff.n_aps() {
                if eff.ap_slots[ap].is_empty() {
                    continue;
                }
                let ctx = eff.block_context(ap, &eta);
                let vars = ctx.vars().to_vec();
                let vars_map = DlBlockVars::new(eff, &vars, p_max_ap);
                let start = block_eta(&vars, &eta);
                let candidate = solve_dl_block_min(
                    &ctx,
                    &vars_map,
                    &start,
                    &eff.active,
                    eff.bandwidth_hz,
                    floor,
                    cfg,
                )?;
                let mut next = eta.clone();
                write_block(&vars, &candidate, &mut next);
                let next_obj = eff.min_active_rate(&next)?;
                if next_obj >= objective {
                    eta = next;
                    objective = next_obj;
                }
                trace.push(objective);
            }
            if relative_change(objective, sweep_start) < cfg.outer_tol {
                converged = true;
                break 'sweeps;
            }
        }
    }

    let violation = dl_violation(eff, &eta, p_max_ap);
    Ok((
        eta,
        OptimizationTrace {
            objective_per_iteration: trace,
            sweeps,
            converged,
            constraint_violation_max: violation,
        },
    ))
}

/// Worst per-user budget violation in watts: radiated power is the weight
/// times the antenna count.
fn ul_violation(eta: &[f64], p_max: &[f64], n_ms_antennas: usize) -> f64 {
    eta.iter()
        .zip(p_max)
        .map(|(&e, &p)| (e * n_ms_antennas as f64 - p).max(0.0).max(-e.min(0.0)))
        .fold(0.0, f64::max)
}

/// Uplink sum-rate maximization: single-block successive surrogates over the
/// box of per-user powers, started from the uniform allocation.
pub fn slm_sum_rate_ul(
    eff: &UlEffectiveChannels,
    p_max: &[f64],
    n_ms_antennas: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, OptimizationTrace)> {
    cfg.validate()?;
    let n = eff.n_users();
    if n_ms_antennas == 0 {
        return Err(Error::InvalidParameter(
            "need at least one MS antenna".into(),
        ));
    }
    if p_max.len() != n || p_max.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidParameter(
            "need one positive power budget per user".into(),
        ));
    }
    // Per-user weight ceiling: the weight multiplies every antenna's stream,
    // so radiated power is eta * N_MS and the box top sits at P_max / N_MS.
    let ceil: Vec<f64> = p_max
        .iter()
        .map(|&p| p / n_ms_antennas as f64)
        .collect();
    let mut eta = ceil.clone();
    let mut objective = eff.sum_rate(&eta)?;
    let mut trace = vec![objective];
    let mut refreshes = 0;
    let mut converged = !eff.active.iter().any(|&a| a);

    if !converged {
        for _ in 0..cfg.max_outer {
            refreshes += 1;
            let anchor = eta.clone();
            let g2_anchor: f64 = eff.g_values(&anchor, false)?.iter().sum();
            let lin = eff.g_gradient(&anchor, false, None)?;

            let f = |x: &[f64]| -> Result<f64> {
                let e: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
                let g1: f64 = eff.g_values(&e, true)?.iter().sum();
                let shift: f64 = lin
                    .iter()
                    .zip(e.iter().zip(&anchor))
                    .map(|(l, (ei, a))| l * (ei - a))
                    .sum();
                Ok((g1 - g2_anchor - shift) / eff.bandwidth_hz)
            };
            let grad = |x: &[f64]| -> Result<Vec<f64>> {
                let e: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
                let g1 = eff.g_gradient(&e, true, None)?;
                Ok(g1
                    .iter()
                    .zip(&lin)
                    .zip(&ceil)
                    .map(|((a, b), &c)| (a - b) * c / eff.bandwidth_hz)
                    .collect())
            };
            let caps = vec![1.0; n];
            let project = |v: &[f64]| project_box(v, &caps);
            let x0: Vec<f64> = eta.iter().zip(&ceil).map(|(&e, &c)| e / c).collect();
            let x = projected_ascent(&f, &grad, &project, &x0, cfg)?;
            let candidate: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
            let next_obj = eff.sum_rate(&candidate)?;
            if next_obj >= objective {
                eta = candidate;
            }
            let accepted = eff.sum_rate(&eta)?;
            let done = relative_change(accepted, objective) < cfg.outer_tol;
            objective = accepted;
            trace.push(objective);
            if done {
                converged = true;
                break;
            }
        }
    }

    let violation = ul_violation(&eta, p_max, n_ms_antennas);
    Ok((
        eta,
        OptimizationTrace {
            objective_per_iteration: trace,
            sweeps: refreshes,
            converged,
            constraint_violation_max: violation,
        },
    ))
}

/// Uplink min-rate maximization: single-block supergradient ascent on the
/// minimum of the per-user surrogates.
pub fn slm_min_rate_ul(
    eff: &UlEffectiveChannels,
    p_max: &[f64],
    n_ms_antennas: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, OptimizationTrace)> {
    cfg.validate()?;
    let n = eff.n_users();
    if n_ms_antennas == 0 {
        return Err(Error::InvalidParameter(
            "need at least one MS antenna".into(),
        ));
    }
    if p_max.len() != n || p_max.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidParameter(
            "need one positive power budget per user".into(),
        ));
    }
    let ceil: Vec<f64> = p_max
        .iter()
        .map(|&p| p / n_ms_antennas as f64)
        .collect();
    let mut eta = ceil.clone();
    let users: Vec<usize> = (0..n).filter(|&k| eff.active[k]).collect();
    let mut objective = eff.min_active_rate(&eta)?;
    let mut trace = vec![objective];
    let mut refreshes = 0;
    let mut converged = users.is_empty();

    if !converged {
        for _ in 0..cfg.max_outer {
            refreshes += 1;
            let anchor = eta.clone();
            let g2_anchor = eff.g_values(&anchor, false)?;
            let mut lin = Vec::with_capacity(users.len());
            for &k in &users {
                lin.push(eff.g_gradient(&anchor, false, Some(k))?);
            }

            let surrogates = |x: &[f64]| -> Result<Vec<f64>> {
                let e: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
                let g1 = eff.g_values(&e, true)?;
                let mut vals = Vec::with_capacity(users.len());
                for (u, &k) in users.iter().enumerate() {
                    let shift: f64 = lin[u]
                        .iter()
                        .zip(e.iter().zip(&anchor))
                        .map(|(l, (ei, a))| l * (ei - a))
                        .sum();
                    vals.push((g1[k] - g2_anchor[k] - shift) / eff.bandwidth_hz);
                }
                Ok(vals)
            };
            let f = |x: &[f64]| -> Result<f64> {
                Ok(surrogates(x)?.into_iter().fold(f64::INFINITY, f64::min))
            };
            let supergrad = |x: &[f64]| -> Result<Vec<f64>> {
                let vals = surrogates(x)?;
                let u_star = vals
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(u, _)| u)
                    .unwrap_or(0);
                let e: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
                let g1 = eff.g_gradient(&e, true, Some(users[u_star]))?;
                Ok(g1
                    .iter()
                    .zip(&lin[u_star])
                    .zip(&ceil)
                    .map(|((a, b), &c)| (a - b) * c / eff.bandwidth_hz)
                    .collect())
            };
            let caps = vec![1.0; n];
            let project = |v: &[f64]| project_box(v, &caps);
            let x0: Vec<f64> = eta.iter().zip(&ceil).map(|(&e, &c)| e / c).collect();
            let x = projected_supergradient(&f, &supergrad, &project, &x0, cfg)?;
            let candidate: Vec<f64> = x.iter().zip(&ceil).map(|(&xi, &c)| xi * c).collect();
            let next_obj = eff.min_active_rate(&candidate)?;
            if next_obj >= objective {
                eta = candidate;
            }
            let accepted = eff.min_active_rate(&eta)?;
            let done = relative_change(accepted, objective) < cfg.outer_tol;
            objective = accepted;
            trace.push(objective);
            if done {
                converged = true;
                break;
            }
        }
    }

    let violation = ul_violation(&eta, p_max, n_ms_antennas);
    Ok((
        eta,
        OptimizationTrace {
            objective_per_iteration: trace,
            sweeps: refreshes,
            converged,
            constraint_violation_max: violation,
        },
    ))
}
