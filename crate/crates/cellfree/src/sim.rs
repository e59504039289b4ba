//! Monte Carlo campaign driver: builds random drops, runs every requested
//! (strategy, CSI mode, direction) combination through the power allocators,
//! and writes the result files.
//!
//! Determinism contract: every random stream is derived from (master seed,
//! drop index, stream id), and drop results are reduced in drop-index order,
//! so identical configs produce byte-identical outputs under any worker
//! count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::association::{build_association, build_combiners, build_precoders, spreading_matrix};
use crate::channel::{
    draw_channels, large_scale_gains, path_loss_matrix, shadowing_field, ChannelSet,
};
use crate::config::{CsiMode, Direction, SimulationConfig, Strategy};
use crate::error::{Error, Result};
use crate::geometry::{place_nodes, AntennaSetup};
use crate::power::{
    slm_min_rate_dl, slm_min_rate_ul, slm_sum_rate_dl, slm_sum_rate_ul, uniform_dl, uniform_ul,
    OptimizationTrace,
};
use crate::rate::{DlEffectiveChannels, UlEffectiveChannels};
use crate::seeds::derive_seed;
use crate::training::{estimate_all_channels, generate_pilots, NoiseModel};

// Per-drop random stream ids. CSI modes share the physical streams so the
// perfect and estimated variants of a drop see the same world.
const STREAM_TOPOLOGY: u64 = 0;
const STREAM_SHADOWING: u64 = 1;
const STREAM_CHANNELS: u64 = 2;
const STREAM_PILOTS: u64 = 3;
const STREAM_TRAINING: u64 = 4;

/// One drop's physical layer, ready for power allocation.
pub struct DropInstance {
    pub dl: DlEffectiveChannels,
    pub ul: UlEffectiveChannels,
    pub orphan_users: usize,
    pub regularized_inversions: usize,
}

/// Rates for one (strategy, CSI mode, direction) cell of a drop.
#[derive(Debug, Clone, Serialize)]
pub struct RateEntry {
    pub strategy: Strategy,
    pub csi: CsiMode,
    pub direction: Direction,
    /// Per-user rates in bit/s; unserved users get 0.
    pub rates: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<OptimizationTrace>,
}

impl RateEntry {
    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn min_rate(&self) -> f64 {
        self.rates.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DropDiagnostics {
    pub orphan_users: usize,
    pub regularized_inversions: usize,
    pub elapsed_s: f64,
    /// True when the drop ran past the configured wall-clock budget. The
    /// result is still emitted; the flag marks it for scrutiny.
    pub time_cap_exceeded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DropResult {
    pub drop: usize,
    pub entries: Vec<RateEntry>,
    pub diagnostics: DropDiagnostics,
}

/// Campaign outcome: successful drops in index order plus failure records.
pub struct RateReport {
    pub drops: Vec<DropResult>,
    pub failed: Vec<(usize, String)>,
    pub n_users: usize,
}

/// Builds the physical layer of one drop under the given CSI mode. The
/// serving sets, precoders, and combiners always come from the estimated
/// channels (a copy of the truth under perfect CSI); rates are always
/// evaluated against the true channels.
pub fn build_drop_instance(
    config: &SimulationConfig,
    drop: usize,
    csi: CsiMode,
) -> Result<DropInstance> {
    let g = &config.geometry;
    let seed = config.sim.seed;
    let drop = drop as u64;

    let antennas = AntennaSetup {
        n_ap_antennas: g.n_ap_antennas,
        n_ms_antennas: g.n_ms_antennas,
        multiplexing_order: g.multiplexing_order,
    };
    let top = place_nodes(
        g.side_m,
        g.n_aps,
        g.n_users,
        antennas,
        derive_seed(seed, drop, STREAM_TOPOLOGY),
    )?;
    let pl = path_loss_matrix(&top, &config.pathloss)?;
    let z = shadowing_field(&top, &config.pathloss, derive_seed(seed, drop, STREAM_SHADOWING))?;
    let gains = large_scale_gains(&pl, &z, config.pathloss.sigma_sh_db);
    let mut channels: ChannelSet =
        draw_channels(&gains, &top, derive_seed(seed, drop, STREAM_CHANNELS));

    let noise = NoiseModel::from_radio(
        config.radio.psd_dbm_hz,
        config.radio.bandwidth_hz,
        config.radio.noise_figure_db,
        config.radio.sigma2_z_w,
    )?;

    match csi {
        CsiMode::Perfect => {
            channels.estimated_channels = Some(channels.true_channels.clone());
        }
        CsiMode::Estimated => {
            let pilots = generate_pilots(
                g.n_users,
                g.n_ms_antennas,
                config.training.tau_p,
                config.training.train_power_w,
                derive_seed(seed, drop, STREAM_PILOTS),
            )?;
            estimate_all_channels(
                &mut channels,
                &pilots,
                noise.sigma2_w,
                derive_seed(seed, drop, STREAM_TRAINING),
            )?;
        }
    }
    let estimated = channels
        .estimated_channels
        .as_ref()
        .expect("estimates filled above");

    let l_mats: Vec<_> = (0..g.n_users)
        .map(|_| spreading_matrix(g.multiplexing_order, g.n_ms_antennas))
        .collect::<Result<_>>()?;
    let assoc = build_association(estimated, config.association_mode()?)?;
    let precoders = build_precoders(estimated, &assoc, &l_mats)?;
    let combiners = build_combiners(estimated, &assoc, &l_mats)?;
    let regularized = precoders.regularized + combiners.regularized;

    let dl = DlEffectiveChannels::build(
        &channels.true_channels,
        &precoders,
        &assoc,
        &l_mats,
        noise.sigma2_z,
        config.radio.bandwidth_hz,
    )?;
    let ul = UlEffectiveChannels::build(
        &channels.true_channels,
        &combiners,
        &assoc,
        &l_mats,
        noise.sigma2_w,
        config.radio.bandwidth_hz,
    )?;

    Ok(DropInstance {
        dl,
        ul,
        orphan_users: assoc.orphans().len(),
        regularized_inversions: regularized,
    })
}

fn dl_rates(
    inst: &DropInstance,
    config: &SimulationConfig,
    strategy: Strategy,
) -> Result<(Vec<f64>, Option<OptimizationTrace>)> {
    let p_max = config.power.p_max_ap_w;
    let (eta, trace) = match strategy {
        Strategy::Uniform => (uniform_dl(&inst.dl, p_max)?.0, None),
        Strategy::Srmax => {
            let (eta, tr) =
                slm_sum_rate_dl(&inst.dl, p_max, &config.solver, config.power.block_mode)?;
            (eta, Some(tr))
        }
        Strategy::Mrmax => {
            let (eta, tr) = slm_min_rate_dl(&inst.dl, p_max, &config.solver)?;
            (eta, Some(tr))
        }
    };
    let rates = (0..inst.dl.n_users())
        .map(|k| inst.dl.user_rate(k, &eta))
        .collect::<Result<_>>()?;
    Ok((rates, trace))
}

fn ul_rates(
    inst: &DropInstance,
    config: &SimulationConfig,
    strategy: Strategy,
) -> Result<(Vec<f64>, Option<OptimizationTrace>)> {
    let n_users = inst.ul.n_users();
    let n_ms = config.geometry.n_ms_antennas;
    let budgets = vec![config.power.p_max_ms_w; n_users];
    let (eta, trace) = match strategy {
        Strategy::Uniform => (
            uniform_ul(n_users, n_ms, config.power.p_max_ms_w)?,
            None,
        ),
        Strategy::Srmax => {
            let (eta, tr) = slm_sum_rate_ul(&inst.ul, &budgets, n_ms, &config.solver)?;
            (eta, Some(tr))
        }
        Strategy::Mrmax => {
            let (eta, tr) = slm_min_rate_ul(&inst.ul, &budgets, n_ms, &config.solver)?;
            (eta, Some(tr))
        }
    };
    let rates = (0..n_users)
        .map(|k| inst.ul.user_rate(k, &eta))
        .collect::<Result<_>>()?;
    Ok((rates, trace))
}

/// Runs one drop across the full strategy grid. The same (config, drop)
/// always produces the same numbers.
pub fn run_drop(config: &SimulationConfig, drop: usize) -> Result<DropResult> {
    let started = Instant::now();
    let mut entries = Vec::new();
    let mut orphan_users = 0;
    let mut regularized = 0;

    for &csi in &config.sim.csi_modes {
        let inst = build_drop_instance(config, drop, csi).map_err(|e| with_drop(e, drop))?;
        orphan_users = orphan_users.max(inst.orphan_users);
        regularized += inst.regularized_inversions;
        for &strategy in &config.sim.strategies {
            for direction in [Direction::Downlink, Direction::Uplink] {
                let (rates, trace) = match direction {
                    Direction::Downlink => dl_rates(&inst, config, strategy),
                    Direction::Uplink => ul_rates(&inst, config, strategy),
                }
                .map_err(|e| with_drop(e, drop))?;
                entries.push(RateEntry {
                    strategy,
                    csi,
                    direction,
                    rates,
                    trace: if config.sim.trace { trace } else { None },
                });
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    Ok(DropResult {
        drop,
        entries,
        diagnostics: DropDiagnostics {
            orphan_users,
            regularized_inversions: regularized,
            elapsed_s: elapsed,
            time_cap_exceeded: elapsed > config.sim.drop_time_cap_s,
        },
    })
}

fn with_drop(e: Error, drop: usize) -> Error {
    match e {
        Error::Io(io) => Error::Io(io),
        other => Error::Numerical(format!("drop {drop}: {other}")),
    }
}

/// Runs the whole campaign on a worker pool. `threads` of None uses the
/// default pool size; results are folded in drop order either way, and
/// failed drops are collected rather than aborting the run.
pub fn run_campaign(config: &SimulationConfig, threads: Option<usize>) -> Result<RateReport> {
    config.validate()?;
    let outcomes: Vec<std::result::Result<DropResult, String>> = match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| collect_drops(config))
        }
        None => collect_drops(config),
    };

    let mut drops = Vec::new();
    let mut failed = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(d) => drops.push(d),
            Err(msg) => failed.push((i, msg)),
        }
    }
    Ok(RateReport {
        drops,
        failed,
        n_users: config.geometry.n_users,
    })
}

fn collect_drops(config: &SimulationConfig) -> Vec<std::result::Result<DropResult, String>> {
    (0..config.sim.n_drops)
        .into_par_iter()
        .map(|d| run_drop(config, d).map_err(|e| e.to_string()))
        .collect()
}

/// Renders the per-user rate table. Row order: drop, then strategy and CSI
/// mode in config order, then downlink before uplink, then user index.
/// Values print in shortest-round-trip decimal, so parsing a row recovers
/// the exact f64.
pub fn render_rates_csv(report: &RateReport) -> String {
    let mut out = String::from("drop,strategy,csi,direction,user,rate_bps\n");
    for drop in &report.drops {
        for entry in &drop.entries {
            for (user, rate) in entry.rates.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    drop.drop,
                    entry.strategy.token(),
                    entry.csi.token(),
                    entry.direction.token(),
                    user,
                    rate
                ));
            }
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct CellSummary {
    mean_sum_rate_bps: f64,
    median_sum_rate_bps: f64,
    mean_min_rate_bps: f64,
    median_min_rate_bps: f64,
    p05_user_rate_bps: f64,
    n_user_samples: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    n_drops_requested: usize,
    n_drops_succeeded: usize,
    n_drops_failed: usize,
    failed_drops: Vec<FailedDrop>,
    n_drops_over_time_cap: usize,
    /// strategy -> csi -> direction -> statistics.
    strategies: BTreeMap<String, BTreeMap<String, BTreeMap<String, CellSummary>>>,
}

#[derive(Debug, Serialize)]
struct FailedDrop {
    drop: usize,
    error: String,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median with the even-count average convention.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Nearest-rank quantile: the smallest value with at least a `q` fraction of
/// the sample at or below it.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank.min(sorted.len()) - 1]
}

fn build_summary(report: &RateReport, config: &SimulationConfig) -> Summary {
    // Sum rates, min rates, and pooled user rates per (strategy, csi,
    // direction), keyed by output tokens so the JSON key order is stable.
    type CellSamples = (Vec<f64>, Vec<f64>, Vec<f64>);
    let mut keyed: BTreeMap<(String, String, String), CellSamples> = BTreeMap::new();
    for drop in &report.drops {
        for entry in &drop.entries {
            let key = (
                entry.strategy.token().to_string(),
                entry.csi.token().to_string(),
                entry.direction.token().to_string(),
            );
            let slot = keyed.entry(key).or_default();
            slot.0.push(entry.sum_rate());
            slot.1.push(entry.min_rate());
            slot.2.extend_from_slice(&entry.rates);
        }
    }

    let mut strategies: BTreeMap<String, BTreeMap<String, BTreeMap<String, CellSummary>>> =
        BTreeMap::new();
    for ((s, c, d), (sums, mins, users)) in keyed {
        strategies.entry(s).or_default().entry(c).or_default().insert(
            d,
            CellSummary {
                mean_sum_rate_bps: mean(&sums),
                median_sum_rate_bps: median(&sums),
                mean_min_rate_bps: mean(&mins),
                median_min_rate_bps: median(&mins),
                p05_user_rate_bps: quantile(&users, 0.05),
                n_user_samples: users.len(),
            },
        );
    }

    Summary {
        n_drops_requested: config.sim.n_drops,
        n_drops_succeeded: report.drops.len(),
        n_drops_failed: report.failed.len(),
        failed_drops: report
            .failed
            .iter()
            .map(|(drop, error)| FailedDrop {
                drop: *drop,
                error: error.clone(),
            })
            .collect(),
        n_drops_over_time_cap: report
            .drops
            .iter()
            .filter(|d| d.diagnostics.time_cap_exceeded)
            .count(),
        strategies,
    }
}

#[derive(Debug, Serialize)]
struct TraceFile<'a> {
    drop: usize,
    diagnostics: &'a DropDiagnostics,
    entries: Vec<TraceEntry<'a>>,
}

#[derive(Debug, Serialize)]
struct TraceEntry<'a> {
    strategy: &'static str,
    csi: &'static str,
    direction: &'static str,
    trace: &'a OptimizationTrace,
}

/// Writes rates.csv, summary.json, and config.echo.json (plus per-drop
/// solver traces when enabled) under `out_dir`. Returns the paths written.
pub fn emit_results(
    report: &RateReport,
    config: &SimulationConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    // Probe writability before emitting anything so failure leaves no
    // partial output behind.
    let probe = out_dir.join(".write_probe");
    std::fs::write(&probe, b"")?;
    std::fs::remove_file(&probe)?;

    let mut written = Vec::new();

    let csv_path = out_dir.join("rates.csv");
    std::fs::write(&csv_path, render_rates_csv(report))?;
    written.push(csv_path);

    let summary_path = out_dir.join("summary.json");
    let summary = build_summary(report, config);
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;
    written.push(summary_path);

    let echo_path = out_dir.join("config.echo.json");
    std::fs::write(
        &echo_path,
        serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;
    written.push(echo_path);

    if config.sim.trace {
        let trace_dir = out_dir.join("traces");
        std::fs::create_dir_all(&trace_dir)?;
        for drop in &report.drops {
            let entries: Vec<TraceEntry> = drop
                .entries
                .iter()
                .filter_map(|e| {
                    e.trace.as_ref().map(|t| TraceEntry {
                        strategy: e.strategy.token(),
                        csi: e.csi.token(),
                        direction: e.direction.token(),
                        trace: t,
                    })
                })
                .collect();
            let file = TraceFile {
                drop: drop.drop,
                diagnostics: &drop.diagnostics,
                entries,
            };
            let path = trace_dir.join(format!("drop_{:04}.json", drop.drop));
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))?
                    + "\n",
            )?;
            written.push(path);
        }
    }

    Ok(written)
}
