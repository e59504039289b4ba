//! Node placement and wrap-around geometry for the square coverage area.
//! Opposite edges are identified, so every distance used downstream is the
//! torus distance; this removes boundary artifacts from uniform placement.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Antenna counts and per-user stream count shared by all nodes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaSetup {
    pub n_ap_antennas: usize,
    pub n_ms_antennas: usize,
    /// Data streams per user; must divide `n_ms_antennas`.
    pub multiplexing_order: usize,
}

/// AP and MS positions on a side_m x side_m square with wrap-around edges.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    pub side_m: f64,
    pub ap_positions: Vec<[f64; 2]>,
    pub ms_positions: Vec<[f64; 2]>,
    pub n_ap_antennas: usize,
    pub n_ms_antennas: usize,
    /// Per-user multiplexing order P_k.
    pub multiplexing_orders: Vec<usize>,
}

impl NetworkTopology {
    pub fn n_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn n_users(&self) -> usize {
        self.ms_positions.len()
    }
}

/// Drops `n_aps` AP positions and then `n_users` MS positions i.i.d.
/// uniformly over the square. The same seed reproduces the same layout.
pub fn place_nodes(
    side_m: f64,
    n_aps: usize,
    n_users: usize,
    antennas: AntennaSetup,
    seed: u64,
) -> Result<NetworkTopology> {
    if !(side_m > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "side_m must be positive, got {side_m}"
        )));
    }
    if n_aps == 0 || n_users == 0 {
        return Err(Error::InvalidParameter(
            "need at least one AP and one MS".into(),
        ));
    }
    if antennas.n_ap_antennas == 0 || antennas.n_ms_antennas == 0 {
        return Err(Error::InvalidParameter(
            "antenna counts must be positive".into(),
        ));
    }
    if antennas.multiplexing_order == 0
        || !antennas.n_ms_antennas.is_multiple_of(antennas.multiplexing_order)
    {
        return Err(Error::InvalidParameter(format!(
            "multiplexing order {} must divide the MS antenna count {}",
            antennas.multiplexing_order, antennas.n_ms_antennas
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_point = |rng: &mut ChaCha8Rng| -> [f64; 2] {
        let x: f64 = rng.random();
        let y: f64 = rng.random();
        [x * side_m, y * side_m]
    };
    let ap_positions = (0..n_aps).map(|_| draw_point(&mut rng)).collect();
    let ms_positions = (0..n_users).map(|_| draw_point(&mut rng)).collect();

    Ok(NetworkTopology {
        side_m,
        ap_positions,
        ms_positions,
        n_ap_antennas: antennas.n_ap_antennas,
        n_ms_antennas: antennas.n_ms_antennas,
        multiplexing_orders: vec![antennas.multiplexing_order; n_users],
    })
}

/// Shortest distance between two points of the square when opposite edges
/// are identified. Bounded by side_m * sqrt(2) / 2.
pub fn torus_distance(p: [f64; 2], q: [f64; 2], side_m: f64) -> f64 {
    let mut acc = 0.0;
    for axis in 0..2 {
        let d = (p[axis] - q[axis]).abs();
        let wrapped = d.min(side_m - d);
        acc += wrapped * wrapped;
    }
    acc.sqrt()
}
