//! Uplink training: pseudo-noise pilot books, the noisy block observation
//! each AP collects, and projection-matching channel estimation. Pilot
//! matrices have orthonormal rows per user, so the projection of the
//! observation onto a user's pilot recovers that user's channel plus
//! contamination from non-orthogonal users and scaled receiver noise.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelSet;
use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian_matrix, CMat};
use crate::seeds::derive_seed;

/// Receiver noise variances in watts: sigma2_w on the uplink (APs), sigma2_z
/// on the downlink (MSs). Both strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub sigma2_w: f64,
    pub sigma2_z: f64,
}

impl NoiseModel {
    /// Builds both variances from the receiver noise budget; the downlink
    /// variance defaults to the uplink one unless overridden.
    pub fn from_radio(
        psd_dbm_hz: f64,
        bandwidth_hz: f64,
        nf_db: f64,
        sigma2_z_override: Option<f64>,
    ) -> Result<Self> {
        if !(bandwidth_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "bandwidth must be positive".into(),
            ));
        }
        let sigma2_w = noise_variance(psd_dbm_hz, bandwidth_hz, nf_db);
        let sigma2_z = sigma2_z_override.unwrap_or(sigma2_w);
        if !(sigma2_w > 0.0 && sigma2_z > 0.0) {
            return Err(Error::InvalidParameter(
                "noise variances must be strictly positive".into(),
            ));
        }
        Ok(NoiseModel { sigma2_w, sigma2_z })
    }
}

/// Thermal noise power in watts over `bandwidth_hz`, from a power spectral
/// density in dBm/Hz and a noise figure in dB.
pub fn noise_variance(psd_dbm_hz: f64, bandwidth_hz: f64, nf_db: f64) -> f64 {
    10.0f64.powf((psd_dbm_hz - 30.0) / 10.0) * bandwidth_hz * 10.0f64.powf(nf_db / 10.0)
}

/// Feedback tap positions of maximal-length shift registers, indexed by the
/// register length n (valid for 2 <= n <= 16).
const LFSR_TAPS: [&[u32]; 17] = [
    &[],
    &[],
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 11, 10, 4],
    &[13, 12, 11, 8],
    &[14, 13, 12, 2],
    &[15, 14],
    &[16, 15, 13, 4],
];

/// One period (2^n - 1 chips) of a +/-1 maximal-length sequence. The seed
/// selects the initial register state; every nonzero state yields a cyclic
/// shift of the same sequence.
fn m_sequence(n: u32, seed: u64) -> Vec<f64> {
    assert!((2..=16).contains(&n), "register length {n} out of range");
    let period = (1u64 << n) - 1;
    let taps = LFSR_TAPS[n as usize];
    let mut state = (seed % period) + 1;
    let mut out = Vec::with_capacity(period as usize);
    for _ in 0..period {
        out.push(if state & 1 == 1 { -1.0 } else { 1.0 });
        let mut feedback = 0u64;
        for &t in taps {
            feedback ^= state >> (n - t);
        }
        state = (state >> 1) | ((feedback & 1) << (n - 1));
    }
    out
}

/// Per-user pilot matrices (n_ms x tau_p each) and training powers.
#[derive(Debug, Clone)]
pub struct PilotBook {
    pub tau_p: usize,
    pub pilots: Vec<CMat>,
    pub train_powers_w: Vec<f64>,
}

fn orthonormalize_rows(m: &mut CMat) -> Result<()> {
    let (rows, cols) = m.shape();
    for i in 0..rows {
        for j in 0..i {
            let mut dot = Complex64::new(0.0, 0.0);
            for c in 0..cols {
                dot += m[(j, c)].conj() * m[(i, c)];
            }
            for c in 0..cols {
                let v = m[(j, c)];
                m[(i, c)] -= dot * v;
            }
        }
        let norm = (0..cols).map(|c| m[(i, c)].norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numerical(
                "pilot rows are linearly dependent".into(),
            ));
        }
        for c in 0..cols {
            m[(i, c)] /= norm;
        }
    }
    Ok(())
}

fn validate_pilot_dims(k_users: usize, n_ms: usize, tau_p: usize, power: f64) -> Result<()> {
    if k_users == 0 || n_ms == 0 {
        return Err(Error::InvalidParameter(
            "need at least one user and one MS antenna".into(),
        ));
    }
    if tau_p < n_ms {
        return Err(Error::InvalidParameter(format!(
            "training length {tau_p} is shorter than the MS antenna count {n_ms}"
        )));
    }
    if !(power > 0.0) {
        return Err(Error::InvalidParameter(
            "training power must be positive".into(),
        ));
    }
    Ok(())
}

fn pn_register_length(tau_p: usize) -> u32 {
    let mut n = 2u32;
    while ((1usize << n) - 1) < tau_p {
        n += 1;
    }
    n
}

/// Pseudo-noise pilot book: user k's antenna-r row is the window of length
/// tau_p starting at cyclic shift k * n_ms + r of one m-sequence period,
/// then rows are re-orthonormalized within each user. Distinct users are not
/// mutually orthogonal in general, which is what creates pilot
/// contamination downstream.
pub fn generate_pilots(
    k_users: usize,
    n_ms: usize,
    tau_p: usize,
    train_power_w: f64,
    seed: u64,
) -> Result<PilotBook> {
    validate_pilot_dims(k_users, n_ms, tau_p, train_power_w)?;
    let seq = m_sequence(pn_register_length(tau_p), seed);
    let period = seq.len();
    let mut pilots = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let mut phi = CMat::zeros(n_ms, tau_p);
        for r in 0..n_ms {
            let shift = (k * n_ms + r) % period;
            for t in 0..tau_p {
                phi[(r, t)] = Complex64::new(seq[(shift + t) % period], 0.0);
            }
        }
        orthonormalize_rows(&mut phi)?;
        pilots.push(phi);
    }
    Ok(PilotBook {
        tau_p,
        pilots,
        train_powers_w: vec![train_power_w; k_users],
    })
}

/// Fully orthogonal pilot book for calibration runs: all k_users * n_ms rows
/// are orthonormalized jointly, so distinct users' pilots satisfy
/// phi_j phi_k^H = 0 exactly. Requires k_users * n_ms <= tau_p.
pub fn generate_orthogonal_pilots(
    k_users: usize,
    n_ms: usize,
    tau_p: usize,
    train_power_w: f64,
    seed: u64,
) -> Result<PilotBook> {
    validate_pilot_dims(k_users, n_ms, tau_p, train_power_w)?;
    if k_users * n_ms > tau_p {
        return Err(Error::InvalidParameter(format!(
            "orthogonal pilots need k_users * n_ms <= tau_p, got {} > {tau_p}",
            k_users * n_ms
        )));
    }
    let seq = m_sequence(pn_register_length(tau_p.max(k_users * n_ms)), seed);
    let period = seq.len();
    let mut stacked = CMat::zeros(k_users * n_ms, tau_p);
    for row in 0..k_users * n_ms {
        for t in 0..tau_p {
            stacked[(row, t)] = Complex64::new(seq[(row + t) % period], 0.0);
        }
    }
    orthonormalize_rows(&mut stacked)?;
    let pilots = (0..k_users)
        .map(|k| stacked.rows(k * n_ms, n_ms).clone_owned())
        .collect();
    Ok(PilotBook {
        tau_p,
        pilots,
        train_powers_w: vec![train_power_w; k_users],
    })
}

/// Block observation of AP `ap_index` over one training phase:
/// Y = sum_k sqrt(p_k) G_k Phi_k + W, with i.i.d. CN(0, sigma2_w) noise.
/// A given seed always produces the same noise block.
pub fn training_observation(
    channels: &ChannelSet,
    pilots: &PilotBook,
    sigma2_w: f64,
    ap_index: usize,
    seed: u64,
) -> Result<CMat> {
    let k_users = channels.true_channels.len();
    if k_users != pilots.pilots.len() {
        return Err(Error::InvalidParameter(format!(
            "channel set has {k_users} users but the pilot book has {}",
            pilots.pilots.len()
        )));
    }
    if !(sigma2_w >= 0.0) {
        return Err(Error::InvalidParameter(
            "noise variance must be nonnegative".into(),
        ));
    }
    let first = channels
        .true_channels
        .first()
        .and_then(|row| row.get(ap_index))
        .ok_or_else(|| Error::InvalidParameter(format!("no AP with index {ap_index}")))?;
    let n_ap = first.nrows();

    let mut y = CMat::zeros(n_ap, pilots.tau_p);
    for k in 0..k_users {
        let g = &channels.true_channels[k][ap_index];
        let phi = &pilots.pilots[k];
        if g.ncols() != phi.nrows() {
            return Err(Error::InvalidParameter(format!(
                "user {k}: channel has {} MS antennas but the pilot has {} rows",
                g.ncols(),
                phi.nrows()
            )));
        }
        let scale = pilots.train_powers_w[k].sqrt();
        y += (g * phi).map(|v| v * scale);
    }
    if sigma2_w > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        y += complex_gaussian_matrix(n_ap, pilots.tau_p, sigma2_w, &mut rng);
    }
    Ok(y)
}

/// Projection-matching estimate of user k's channel from an AP observation:
/// (1 / sqrt(p_k)) Y Phi_k^H. With orthonormal pilot rows this equals the
/// true channel plus contamination terms sqrt(p_j / p_k) G_j Phi_j Phi_k^H
/// and scaled noise.
pub fn pm_estimate(y: &CMat, pilots: &PilotBook, k: usize) -> Result<CMat> {
    let phi = pilots
        .pilots
        .get(k)
        .ok_or_else(|| Error::InvalidParameter(format!("no user with index {k}")))?;
    if y.ncols() != phi.ncols() {
        return Err(Error::InvalidParameter(format!(
            "observation spans {} symbols but pilots span {}",
            y.ncols(),
            phi.ncols()
        )));
    }
    let inv_scale = 1.0 / pilots.train_powers_w[k].sqrt();
    Ok((y * phi.adjoint()).map(|v| v * inv_scale))
}

/// Runs the training phase for every AP and fills
/// `channels.estimated_channels`. Per-AP noise seeds are derived from `seed`.
pub fn estimate_all_channels(
    channels: &mut ChannelSet,
    pilots: &PilotBook,
    sigma2_w: f64,
    seed: u64,
) -> Result<()> {
    let k_users = channels.true_channels.len();
    let n_aps = channels.true_channels.first().map_or(0, Vec::len);
    let mut estimated = vec![Vec::with_capacity(n_aps); k_users];
    for m in 0..n_aps {
        let y = training_observation(channels, pilots, sigma2_w, m, derive_seed(seed, m as u64, 0))?;
        for (k, row) in estimated.iter_mut().enumerate() {
            row.push(pm_estimate(&y, pilots, k)?);
        }
    }
    channels.estimated_channels = Some(estimated);
    Ok(())
}
