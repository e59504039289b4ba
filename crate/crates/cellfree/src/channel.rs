//! Large-scale propagation and small-scale fading: three-slope path loss,
//! two-component correlated shadowing, and i.i.d. Rayleigh MIMO channels.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{torus_distance, NetworkTopology};
use crate::linalg::{complex_gaussian_matrix, CMat};

/// Lower bound applied to linear channel gains so downstream Gram matrices
/// stay numerically meaningful even for extreme shadowing draws.
pub const GAIN_FLOOR: f64 = 1e-30;

/// Propagation and shadowing parameters. Carrier frequency in MHz, heights
/// and distances in meters, shadowing deviation in dB.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathLossParams {
    pub carrier_mhz: f64,
    pub h_ap_m: f64,
    pub h_ms_m: f64,
    pub d0_m: f64,
    pub d1_m: f64,
    pub sigma_sh_db: f64,
    /// Weight of the per-AP shadowing component; in [0, 1].
    pub delta: f64,
    pub d_decorr_m: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        PathLossParams {
            carrier_mhz: 1900.0,
            h_ap_m: 15.0,
            h_ms_m: 1.65,
            d0_m: 10.0,
            d1_m: 50.0,
            sigma_sh_db: 8.0,
            delta: 0.5,
            d_decorr_m: 100.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_mhz > 0.0 && self.h_ap_m > 0.0 && self.h_ms_m > 0.0) {
            return Err(Error::InvalidParameter(
                "carrier frequency and antenna heights must be positive".into(),
            ));
        }
        if !(self.d0_m > 0.0 && self.d1_m > self.d0_m) {
            return Err(Error::InvalidParameter(format!(
                "breakpoints must satisfy 0 < d0 < d1, got d0 = {}, d1 = {}",
                self.d0_m, self.d1_m
            )));
        }
        if !(self.sigma_sh_db >= 0.0) {
            return Err(Error::InvalidParameter(
                "shadowing deviation must be nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        if !(self.d_decorr_m > 0.0) {
            return Err(Error::InvalidParameter(
                "decorrelation distance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frequency/height-dependent attenuation constant of the three-slope model,
/// in dB.
pub fn path_loss_constant(p: &PathLossParams) -> f64 {
    let lf = p.carrier_mhz.log10();
    46.3 + 33.9 * lf - 13.82 * p.h_ap_m.log10() - (1.11 * lf - 0.7) * p.h_ms_m + 1.56 * lf - 0.8
}

/// Three-slope path loss in dB at distance `d_m` > 0: 35 dB/decade beyond
/// d1, 20 dB/decade between d0 and d1, constant below d0. Continuous at both
/// breakpoints.
pub fn path_loss_db(d_m: f64, p: &PathLossParams) -> Result<f64> {
    if !(d_m > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance must be positive, got {d_m}"
        )));
    }
    let l = path_loss_constant(p);
    let value = if d_m > p.d1_m {
        -l - 35.0 * d_m.log10()
    } else if d_m > p.d0_m {
        -l - 10.0 * (p.d1_m.powf(1.5) * d_m * d_m).log10()
    } else {
        -l - 10.0 * (p.d1_m.powf(1.5) * p.d0_m * p.d0_m).log10()
    };
    Ok(value)
}

/// Path-loss matrix in dB indexed [user, ap]. Coincident nodes are treated
/// as being inside the inner breakpoint (the loss plateaus there anyway).
pub fn path_loss_matrix(top: &NetworkTopology, p: &PathLossParams) -> Result<DMatrix<f64>> {
    let mut pl = DMatrix::zeros(top.n_users(), top.n_aps());
    for k in 0..top.n_users() {
        for m in 0..top.n_aps() {
            let d = torus_distance(top.ms_positions[k], top.ap_positions[m], top.side_m)
                .max(f64::MIN_POSITIVE);
            pl[(k, m)] = path_loss_db(d, p)?;
        }
    }
    Ok(pl)
}

fn correlation_matrix(positions: &[[f64; 2]], side_m: f64, d_decorr_m: f64) -> DMatrix<f64> {
    let n = positions.len();
    DMatrix::from_fn(n, n, |i, j| {
        2.0f64.powf(-torus_distance(positions[i], positions[j], side_m) / d_decorr_m)
    })
}

/// Factor F of a real covariance matrix with F F^T = cov: Cholesky when it
/// exists, retried with diagonal jitter from 1e-10 (co-located nodes make
/// the matrix exactly singular), then an eigenvalue-clipped square root for
/// matrices that sit slightly outside the PSD cone.
fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let mut jitter = 1e-10;
    for _ in 0..8 {
        let mut j = cov.clone();
        for i in 0..cov.nrows() {
            j[(i, i)] += jitter;
        }
        if let Some(c) = j.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    // The wrap-around metric pushes the decay kernel outside the positive
    // semidefinite cone on dense layouts (it is only guaranteed PSD under a
    // straight-line metric). Project onto the cone by clipping the spectrum;
    // the sampled field then carries the nearest realizable covariance.
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "shadowing covariance could not be factored".into(),
        ));
    }
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = lambda.max(0.0).sqrt();
        for i in 0..factor.nrows() {
            factor[(i, j)] *= scale;
        }
    }
    Ok(factor)
}

/// Correlated shadowing field indexed [user, ap]:
/// z = sqrt(delta) a_m + sqrt(1 - delta) b_k, where the AP component a and
/// the MS component b are unit-variance Gaussians whose correlations decay
/// as 2^(-d / d_decorr) under the wrap-around metric.
pub fn shadowing_field(
    top: &NetworkTopology,
    p: &PathLossParams,
    seed: u64,
) -> Result<DMatrix<f64>> {
    p.validate()?;
    let n_aps = top.n_aps();
    let n_users = top.n_users();

    let factor_ap = covariance_factor(&correlation_matrix(&top.ap_positions, top.side_m, p.d_decorr_m))?;
    let factor_ms = covariance_factor(&correlation_matrix(&top.ms_positions, top.side_m, p.d_decorr_m))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = DVector::zeros(n_aps);
    for i in 0..n_aps {
        xi[i] = rng.sample(StandardNormal);
    }
    let mut zeta = DVector::zeros(n_users);
    for i in 0..n_users {
        zeta[i] = rng.sample(StandardNormal);
    }
    let a = factor_ap * xi;
    let b = factor_ms * zeta;

    let wa = p.delta.sqrt();
    let wb = (1.0 - p.delta).sqrt();
    Ok(DMatrix::from_fn(n_users, n_aps, |k, m| wa * a[m] + wb * b[k]))
}

/// Linear channel gains beta[k][m] = 10^((PL + sigma_sh z) / 10), floored at
/// [`GAIN_FLOOR`]. Shapes of the two inputs must agree.
pub fn large_scale_gains(
    pl_db: &DMatrix<f64>,
    z: &DMatrix<f64>,
    sigma_sh_db: f64,
) -> DMatrix<f64> {
    assert_eq!(pl_db.shape(), z.shape(), "path-loss and shadowing shapes differ");
    DMatrix::from_fn(pl_db.nrows(), pl_db.ncols(), |k, m| {
        let db = pl_db[(k, m)] + sigma_sh_db * z[(k, m)];
        10.0f64.powf(db / 10.0).max(GAIN_FLOOR)
    })
}

/// Per-link MIMO channels indexed [user][ap], each n_ap_antennas x
/// n_ms_antennas.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub true_channels: Vec<Vec<CMat>>,
    /// Filled by the training stage, or copied from `true_channels` under
    /// perfect CSI.
    pub estimated_channels: Option<Vec<Vec<CMat>>>,
}

/// Draws G[k][m] = sqrt(beta[k][m]) H with i.i.d. CN(0, 1) entries in H.
pub fn draw_channels(gains: &DMatrix<f64>, top: &NetworkTopology, seed: u64) -> ChannelSet {
    assert_eq!(
        gains.shape(),
        (top.n_users(), top.n_aps()),
        "gain matrix shape does not match the topology"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let true_channels = (0..top.n_users())
        .map(|k| {
            (0..top.n_aps())
                .map(|m| {
                    complex_gaussian_matrix(
                        top.n_ap_antennas,
                        top.n_ms_antennas,
                        gains[(k, m)],
                        &mut rng,
                    )
                })
                .collect()
        })
        .collect();
    ChannelSet {
        true_channels,
        estimated_channels: None,
    }
}
