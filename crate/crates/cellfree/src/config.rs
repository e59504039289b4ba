//! Simulation configuration: a TOML document with dotted sections. Unknown
//! keys are rejected so typos fail loudly instead of silently falling back
//! to defaults. Two named presets ship with the crate.

use serde::{Deserialize, Serialize};

use crate::association::AssociationMode;
use crate::channel::PathLossParams;
use crate::error::{Error, Result};
use crate::power::{BlockMode, SolverConfig};

/// Dense deployment: many APs, many users, longer pilots.
pub const HIGH_DENSITY_TOML: &str = include_str!("../../../configs/high_density.toml");
/// Sparse deployment: fewer users and APs, short pilots.
pub const LOW_DENSITY_TOML: &str = include_str!("../../../configs/low_density.toml");

/// Resolves a preset name to its embedded TOML source.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "high_density" => Some(HIGH_DENSITY_TOML),
        "low_density" => Some(LOW_DENSITY_TOML),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub side_m: f64,
    pub n_aps: usize,
    pub n_users: usize,
    pub n_ap_antennas: usize,
    pub n_ms_antennas: usize,
    /// Data streams per user; must divide n_ms_antennas.
    pub multiplexing_order: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            side_m: 1000.0,
            n_aps: 20,
            n_users: 4,
            n_ap_antennas: 4,
            n_ms_antennas: 2,
            multiplexing_order: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioSection {
    pub bandwidth_hz: f64,
    pub psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    /// Optional override for the MS-side noise variance in watts; the AP
    /// value computed from the budget above is used when absent.
    pub sigma2_z_w: Option<f64>,
}

impl Default for RadioSection {
    fn default() -> Self {
        RadioSection {
            bandwidth_hz: 2.0e7,
            psd_dbm_hz: -174.0,
            noise_figure_db: 9.0,
            sigma2_z_w: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub tau_p: usize,
    pub train_power_w: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            tau_p: 8,
            train_power_w: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationSection {
    /// "cf", "topn:N", or "above_average".
    pub mode: String,
}

impl Default for AssociationSection {
    fn default() -> Self {
        AssociationSection { mode: "cf".into() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub p_max_ap_w: f64,
    pub p_max_ms_w: f64,
    pub block_mode: BlockMode,
}

impl Default for PowerSection {
    fn default() -> Self {
        PowerSection {
            p_max_ap_w: 0.2,
            p_max_ms_w: 0.1,
            block_mode: BlockMode::PerAp,
        }
    }
}

/// Power allocation strategies; the token doubles as the CSV label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Even power split, the unoptimized baseline.
    Uniform,
    /// Sum-rate maximization.
    Srmax,
    /// Minimum-rate (max-min) maximization.
    Mrmax,
}

impl Strategy {
    pub fn token(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Srmax => "srmax",
            Strategy::Mrmax => "mrmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "srmax" => Ok(Strategy::Srmax),
            "mrmax" => Ok(Strategy::Mrmax),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected uniform, srmax, or mrmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsiMode {
    Perfect,
    Estimated,
}

impl CsiMode {
    pub fn token(self) -> &'static str {
        match self {
            CsiMode::Perfect => "perfect",
            CsiMode::Estimated => "estimated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Downlink,
    Uplink,
}

impl Direction {
    pub fn token(self) -> &'static str {
        match self {
            Direction::Downlink => "downlink",
            Direction::Uplink => "uplink",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_drops: usize,
    pub seed: u64,
    pub strategies: Vec<Strategy>,
    pub csi_modes: Vec<CsiMode>,
    pub output_dir: String,
    /// Per-drop wall-clock budget; exceeding it only flags the drop.
    pub drop_time_cap_s: f64,
    /// Dump per-drop solver traces as JSON files.
    pub trace: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n_drops: 20,
            seed: 1,
            strategies: vec![Strategy::Uniform, Strategy::Srmax, Strategy::Mrmax],
            csi_modes: vec![CsiMode::Perfect],
            output_dir: "out".into(),
            drop_time_cap_s: 300.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub geometry: GeometrySection,
    pub pathloss: PathLossParams,
    pub radio: RadioSection,
    pub training: TrainingSection,
    pub association: AssociationSection,
    pub power: PowerSection,
    pub solver: SolverConfig,
    pub sim: SimSection,
}

/// Parses "cf", "topn:N", or "above_average".
pub fn parse_association(s: &str) -> Result<AssociationMode> {
    if s == "cf" {
        return Ok(AssociationMode::CellFree);
    }
    if s == "above_average" {
        return Ok(AssociationMode::AboveAverage);
    }
    if let Some(n) = s.strip_prefix("topn:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad top-N count in '{s}'")))?;
        if n == 0 {
            return Err(Error::Config("top-N association needs N >= 1".into()));
        }
        return Ok(AssociationMode::TopN(n));
    }
    Err(Error::Config(format!(
        "unknown association mode '{s}' (expected cf, topn:N, or above_average)"
    )))
}

pub fn association_token(mode: AssociationMode) -> String {
    match mode {
        AssociationMode::CellFree => "cf".into(),
        AssociationMode::TopN(n) => format!("topn:{n}"),
        AssociationMode::AboveAverage => "above_average".into(),
    }
}

impl SimulationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimulationConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a named preset or, failing that, the file at `arg`.
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(text) = preset(arg) {
            return Self::from_toml_str(text);
        }
        let text = std::fs::read_to_string(arg)?;
        Self::from_toml_str(&text)
    }

    pub fn association_mode(&self) -> Result<AssociationMode> {
        parse_association(&self.association.mode)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(g.side_m > 0.0) {
            return Err(Error::Config("geometry.side_m must be positive".into()));
        }
        if g.n_aps == 0 || g.n_users == 0 {
            return Err(Error::Config(
                "geometry needs at least one AP and one user".into(),
            ));
        }
        if g.n_ap_antennas == 0 || g.n_ms_antennas == 0 || g.multiplexing_order == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if !g.n_ms_antennas.is_multiple_of(g.multiplexing_order) {
            return Err(Error::Config(format!(
                "multiplexing_order {} must divide n_ms_antennas {}",
                g.multiplexing_order, g.n_ms_antennas
            )));
        }
        if g.n_ap_antennas < g.n_ms_antennas {
            return Err(Error::Config(
                "channel inversion needs n_ap_antennas >= n_ms_antennas".into(),
            ));
        }
        self.pathloss.validate().map_err(config_err)?;
        if !(self.radio.bandwidth_hz > 0.0) {
            return Err(Error::Config("radio.bandwidth_hz must be positive".into()));
        }
        if let Some(s) = self.radio.sigma2_z_w {
            if !(s > 0.0) {
                return Err(Error::Config("radio.sigma2_z_w must be positive".into()));
            }
        }
        if self.training.tau_p == 0 {
            return Err(Error::Config("training.tau_p must be at least 1".into()));
        }
        if !(self.training.train_power_w > 0.0) {
            return Err(Error::Config(
                "training.train_power_w must be positive".into(),
            ));
        }
        self.association_mode()?;
        if !(self.power.p_max_ap_w > 0.0) || !(self.power.p_max_ms_w > 0.0) {
            return Err(Error::Config("power budgets must be positive".into()));
        }
        self.solver.validate().map_err(config_err)?;
        let s = &self.sim;
        if s.n_drops == 0 {
            return Err(Error::Config("sim.n_drops must be at least 1".into()));
        }
        if s.strategies.is_empty() {
            return Err(Error::Config("sim.strategies must not be empty".into()));
        }
        if s.csi_modes.is_empty() {
            return Err(Error::Config("sim.csi_modes must not be empty".into()));
        }
        if has_duplicates(&s.strategies) {
            return Err(Error::Config("sim.strategies has duplicates".into()));
        }
        if has_duplicates(&s.csi_modes) {
            return Err(Error::Config("sim.csi_modes has duplicates".into()));
        }
        if !(s.drop_time_cap_s > 0.0) {
            return Err(Error::Config(
                "sim.drop_time_cap_s must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn config_err(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, x)| items[..i].contains(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = SimulationConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = SimulationConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.geometry.n_aps, cfg.geometry.n_aps);
        assert_eq!(back.sim.strategies, cfg.sim.strategies);
        assert_eq!(back.association.mode, "cf");
    }

    #[test]
    fn presets_parse_and_match_their_scenarios() {
        let hi = SimulationConfig::from_toml_str(HIGH_DENSITY_TOML).unwrap();
        assert_eq!(hi.geometry.n_aps, 80);
        assert_eq!(hi.geometry.n_users, 15);
        assert_eq!(hi.association.mode, "topn:6");
        assert_eq!(hi.training.tau_p, 16);

        let lo = SimulationConfig::from_toml_str(LOW_DENSITY_TOML).unwrap();
        assert_eq!(lo.geometry.n_aps, 50);
        assert_eq!(lo.geometry.n_users, 5);
        assert_eq!(lo.association.mode, "topn:2");
        assert_eq!(lo.training.tau_p, 8);

        for cfg in [hi, lo] {
            assert_eq!(cfg.geometry.n_ap_antennas, 4);
            assert_eq!(cfg.geometry.n_ms_antennas, 2);
            assert_eq!(cfg.geometry.multiplexing_order, 2);
            assert_eq!(cfg.power.p_max_ap_w, 0.2);
            assert_eq!(cfg.power.p_max_ms_w, 0.1);
            assert_eq!(cfg.sim.n_drops, 100);
        }

        assert!(preset("no_such_preset").is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[geometry]\nside_m = 500.0\nsid_m = 2.0\n";
        assert!(SimulationConfig::from_toml_str(text).is_err());
        let text = "[geomtry]\nside_m = 500.0\n";
        assert!(SimulationConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn partial_configs_fall_back_to_defaults() {
        let cfg = SimulationConfig::from_toml_str("[sim]\nn_drops = 3\n").unwrap();
        assert_eq!(cfg.sim.n_drops, 3);
        assert_eq!(cfg.geometry.n_aps, 20);
        assert_eq!(cfg.radio.bandwidth_hz, 2.0e7);
    }

    #[test]
    fn association_modes_parse_and_print() {
        assert_eq!(
            parse_association("cf").unwrap(),
            AssociationMode::CellFree
        );
        assert_eq!(
            parse_association("topn:3").unwrap(),
            AssociationMode::TopN(3)
        );
        assert_eq!(
            parse_association("above_average").unwrap(),
            AssociationMode::AboveAverage
        );
        assert!(parse_association("topn:0").is_err());
        assert!(parse_association("topn:x").is_err());
        assert!(parse_association("nearest").is_err());
        assert_eq!(association_token(AssociationMode::TopN(2)), "topn:2");
    }

    #[test]
    fn validation_rejects_inconsistent_sections() {
        let mut cfg = SimulationConfig::default();
        cfg.geometry.multiplexing_order = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default();
        cfg.sim.strategies = vec![Strategy::Uniform, Strategy::Uniform];
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default();
        cfg.sim.csi_modes.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default();
        cfg.association.mode = "bogus".into();
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default();
        cfg.solver.armijo_shrink = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = SimulationConfig::default();
        cfg.geometry.n_ap_antennas = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strategy_tokens_round_trip() {
        for s in [Strategy::Uniform, Strategy::Srmax, Strategy::Mrmax] {
            assert_eq!(Strategy::parse(s.token()).unwrap(), s);
        }
        assert!(Strategy::parse("maxmin").is_err());
    }
}
