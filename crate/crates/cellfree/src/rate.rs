//! Effective channels after beamforming and the achievable-rate evaluators.
//!
//! Once precoders and combiners are fixed, each user's rate is a difference
//! of two log-determinants: one of the received covariance with the user's
//! own signal included, one without it. Both pieces are concave in the
//! transmit powers, which is what the successive lower-bound optimizers
//! exploit, so this module exposes the two pieces (`g` values and their
//! gradients) separately as well as the assembled rates.

use std::f64::consts::LN_2;

use num_complex::Complex64;

use crate::association::{AssociationMap, CombinerSet, PrecoderSet};
use crate::error::{Error, Result};
use crate::linalg::{hpd_cholesky, hpd_logdet2, CMat};

/// Downlink power allocation: `powers[k][i]` is the power AP
/// `serving[k][i]` spends on user k.
pub type DlPowers = Vec<Vec<f64>>;

/// Inner product of two allocations with the same shape.
pub fn dl_dot(a: &DlPowers, b: &DlPowers) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v))
        .sum()
}

/// Downlink effective channels for a fixed set of precoders. Everything the
/// power optimizers need is cached here: the per-AP cross-channel terms, the
/// post-combining noise covariances, and the precoder traces that convert
/// power weights into radiated power.
#[derive(Debug, Clone)]
pub struct DlEffectiveChannels {
    /// serving[k] lists the APs serving user k, ascending.
    pub serving: Vec<Vec<usize>>,
    /// ap_slots[m] lists (user k, index of m within serving[k]).
    pub ap_slots: Vec<Vec<(usize, usize)>>,
    /// a[k][j][i] is the cross term from AP serving[j][i]'s transmission for
    /// user j into user k's combined receive space.
    pub(crate) a: Vec<Vec<Vec<CMat>>>,
    /// noise[k] is the post-combining noise covariance at user k.
    pub(crate) noise: Vec<CMat>,
    /// precoder_traces[k][i] = tr(Q^H Q) for the precoder on link
    /// (k, serving[k][i]); radiated power for weight eta is eta * trace.
    pub precoder_traces: Vec<Vec<f64>>,
    pub p_orders: Vec<usize>,
    pub bandwidth_hz: f64,
    pub sigma2_z: f64,
    /// Users with at least one serving AP.
    pub active: Vec<bool>,
}

impl DlEffectiveChannels {
    /// Assembles the downlink terms from true channels indexed [user][ap],
    /// the precoder set, and the per-user spreading matrices.
    pub fn build(
        true_channels: &[Vec<CMat>],
        precoders: &PrecoderSet,
        assoc: &AssociationMap,
        l_mats: &[CMat],
        sigma2_z: f64,
        bandwidth_hz: f64,
    ) -> Result<Self> {
        let n_users = assoc.n_users();
        if true_channels.len() != n_users || l_mats.len() != n_users {
            return Err(Error::InvalidParameter(
                "channel grid and spreading matrices must cover every user".into(),
            ));
        }
        if !(sigma2_z > 0.0) || !(bandwidth_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "noise variance and bandwidth must be positive".into(),
            ));
        }
        let p_orders: Vec<usize> = l_mats.iter().map(|l| l.ncols()).collect();

        let mut a = vec![Vec::new(); n_users];
        for k in 0..n_users {
            let lk_adj = l_mats[k].adjoint();
            let mut row = Vec::with_capacity(n_users);
            for j in 0..n_users {
                let mut terms = Vec::with_capacity(assoc.serving_aps[j].len());
                for &m in &assoc.serving_aps[j] {
                    let q = precoders.precoders.get(&(j, m)).ok_or_else(|| {
                        Error::InvalidParameter(format!(
                            "missing precoder for user {j} at AP {m}"
                        ))
                    })?;
                    terms.push(&lk_adj * true_channels[k][m].adjoint() * q);
                }
                row.push(terms);
            }
            a[k] = row;
        }

        let noise: Vec<CMat> = l_mats
            .iter()
            .map(|l| (l.adjoint() * l).map(|v| v * sigma2_z))
            .collect();

        let mut precoder_traces = Vec::with_capacity(n_users);
        for k in 0..n_users {
            let mut traces = Vec::with_capacity(assoc.serving_aps[k].len());
            for &m in &assoc.serving_aps[k] {
                traces.push(precoders.precoders[&(k, m)].norm_squared());
            }
            precoder_traces.push(traces);
        }

        let mut ap_slots = vec![Vec::new(); assoc.n_aps()];
        for k in 0..n_users {
            for (i, &m) in assoc.serving_aps[k].iter().enumerate() {
                ap_slots[m].push((k, i));
            }
        }

        let active: Vec<bool> = assoc
            .serving_aps
            .iter()
            .map(|aps| !aps.is_empty())
            .collect();

        Ok(DlEffectiveChannels {
            serving: assoc.serving_aps.clone(),
            ap_slots,
            a,
            noise,
            precoder_traces,
            p_orders,
            bandwidth_hz,
            sigma2_z,
            active,
        })
    }

    pub fn n_users(&self) -> usize {
        self.serving.len()
    }

    pub fn n_aps(&self) -> usize {
        self.ap_slots.len()
    }

    /// All-zero allocation with the right shape.
    pub fn zero_powers(&self) -> DlPowers {
        self.serving.iter().map(|aps| vec![0.0; aps.len()]).collect()
    }

    /// Radiated power per AP under `eta`.
    pub fn budget_used(&self, eta: &DlPowers) -> Vec<f64> {
        self.ap_slots
            .iter()
            .map(|slots| {
                slots
                    .iter()
                    .map(|&(k, i)| eta[k][i] * self.precoder_traces[k][i])
                    .sum()
            })
            .collect()
    }

    /// Aggregate cross channel from user j's transmissions into user k's
    /// receive space under allocation `eta_j` for user j.
    fn cross_matrix(&self, k: usize, j: usize, eta_j: &[f64]) -> CMat {
        let mut acc = CMat::zeros(self.p_orders[k], self.p_orders[j]);
        for (i, term) in self.a[k][j].iter().enumerate() {
            let w = eta_j[i];
            if w > 0.0 {
                let s = Complex64::new(w.sqrt(), 0.0);
                acc += term.map(|v| v * s);
            }
        }
        acc
    }

    /// Received covariance at user k, optionally including the user's own
    /// signal. Always includes noise and the other users' interference.
    fn gram(&self, k: usize, eta: &DlPowers, include_self: bool) -> CMat {
        let mut x = self.noise[k].clone();
        for j in 0..self.n_users() {
            if j == k && !include_self {
                continue;
            }
            if self.serving[j].is_empty() {
                continue;
            }
            let a_kj = self.cross_matrix(k, j, &eta[j]);
            x += &a_kj * a_kj.adjoint();
        }
        x
    }

    /// Achievable rate of user k in bit/s. Zero for unserved users.
    pub fn user_rate(&self, k: usize, eta: &DlPowers) -> Result<f64> {
        if !self.active[k] {
            return Ok(0.0);
        }
        let x_excl = self.gram(k, eta, false);
        let a_kk = self.cross_matrix(k, k, &eta[k]);
        let x_full = &x_excl + &a_kk * a_kk.adjoint();
        let rate = self.bandwidth_hz * (hpd_logdet2(&x_full)? - hpd_logdet2(&x_excl)?);
        Ok(rate.max(0.0))
    }

    pub fn sum_rate(&self, eta: &DlPowers) -> Result<f64> {
        (0..self.n_users()).map(|k| self.user_rate(k, eta)).sum()
    }

    /// Smallest rate among served users; zero when nobody is served.
    pub fn min_active_rate(&self, eta: &DlPowers) -> Result<f64> {
        let mut best = f64::INFINITY;
        let mut any = false;
        for k in 0..self.n_users() {
            if self.active[k] {
                best = best.min(self.user_rate(k, eta)?);
                any = true;
            }
        }
        Ok(if any { best } else { 0.0 })
    }

    /// Per-user concave components W log2 det X_k; unserved users give zero.
    pub fn g_values(&self, eta: &DlPowers, include_self: bool) -> Result<Vec<f64>> {
        let mut vals = vec![0.0; self.n_users()];
        for k in 0..self.n_users() {
            if self.active[k] {
                vals[k] = self.bandwidth_hz * hpd_logdet2(&self.gram(k, eta, include_self))?;
            }
        }
        Ok(vals)
    }

    /// Gradient of the summed components with respect to every power weight.
    /// `user` restricts the sum to a single user's component; `floor` guards
    /// the 1/sqrt(eta) factor near zero power.
    pub fn g_gradient(
        &self,
        eta: &DlPowers,
        include_self: bool,
        user: Option<usize>,
        floor: f64,
    ) -> Result<DlPowers> {
        let mut grad = self.zero_powers();
        let users: Vec<usize> = match user {
            Some(k) => vec![k],
            None => (0..self.n_users()).collect(),
        };
        let scale = self.bandwidth_hz / LN_2;
        for &k in &users {
            if !self.active[k] {
                continue;
            }
            let chol = hpd_cholesky(&self.gram(k, eta, include_self))?;
            for j in 0..self.n_users() {
                if j == k && !include_self {
                    continue;
                }
                if self.serving[j].is_empty() {
                    continue;
                }
                let a_kj = self.cross_matrix(k, j, &eta[j]);
                let a_adj = a_kj.adjoint();
                for (i, term) in self.a[k][j].iter().enumerate() {
                    let solved = chol.solve(term);
                    let mut inner = (&solved * &a_adj).trace().re;
                    // Below the floor the amplitude itself is lifted to the
                    // floored power, otherwise the derivative of a link at
                    // exactly zero power collapses to zero and the link can
                    // never be powered back up.
                    let lift = floor.max(0.0).sqrt() - eta[j][i].max(0.0).sqrt();
                    if eta[j][i] < floor && lift > 0.0 {
                        inner += lift * (&solved * term.adjoint()).trace().re;
                    }
                    let denom = eta[j][i].max(floor).sqrt();
                    grad[j][i] += scale * inner / denom;
                }
            }
        }
        Ok(grad)
    }
}

/// Surrogate lower bound for user k's downlink rate around `anchor`: the
/// self-included concave component at `eta` minus the tangent-plane
/// linearization of the self-excluded component at `anchor`. Tight at the
/// anchor with matching gradient; a true lower bound wherever the
/// self-excluded component is concave (always when each user is served by a
/// single AP; see the curvature notes in the tests for the coupled case).
pub fn dl_surrogate(
    eff: &DlEffectiveChannels,
    eta: &DlPowers,
    anchor: &DlPowers,
    k: usize,
    floor: f64,
) -> Result<f64> {
    if !eff.active[k] {
        return Ok(0.0);
    }
    let g1 = eff.bandwidth_hz * hpd_logdet2(&eff.gram(k, eta, true))?;
    let g2_anchor = eff.bandwidth_hz * hpd_logdet2(&eff.gram(k, anchor, false))?;
    let grad = eff.g_gradient(anchor, false, Some(k), floor)?;
    let mut lin = 0.0;
    for j in 0..eff.n_users() {
        for i in 0..eff.serving[j].len() {
            lin += grad[j][i] * (eta[j][i] - anchor[j][i]);
        }
    }
    Ok(g1 - g2_anchor - lin)
}

/// Uplink counterpart of [`dl_surrogate`]. The uplink covariances are affine
/// in the powers, so here the bound is rigorous on every instance.
pub fn ul_surrogate(
    eff: &UlEffectiveChannels,
    eta: &[f64],
    anchor: &[f64],
    k: usize,
) -> Result<f64> {
    if !eff.active[k] {
        return Ok(0.0);
    }
    let g1 = eff.bandwidth_hz * hpd_logdet2(&eff.gram(k, eta, true))?;
    let g2_anchor = eff.bandwidth_hz * hpd_logdet2(&eff.gram(k, anchor, false))?;
    let grad = eff.g_gradient(anchor, false, Some(k))?;
    let lin: f64 = grad
        .iter()
        .zip(eta.iter().zip(anchor))
        .map(|(g, (e, a))| g * (e - a))
        .sum();
    Ok(g1 - g2_anchor - lin)
}

/// Cached view of the downlink problem when only one AP's powers vary.
/// Splits every cross channel into a part fixed by the other APs' powers and
/// the single variable term, so candidate evaluations inside a block solve
/// cost K x |block| small-matrix operations instead of touching every link.
#[derive(Debug, Clone)]
pub struct DlBlockContext {
    /// Block variables as (user, slot in serving[user]) pairs.
    vars: Vec<(usize, usize)>,
    /// Per receiver: noise plus the covariance of users whose powers are
    /// entirely outside the block.
    base_full: Vec<CMat>,
    /// Same, additionally excluding the receiver's own fixed covariance.
    base_excl: Vec<CMat>,
    /// fixed_cross[k][v]: the block user's cross channel contribution from
    /// its other serving APs, fixed during the block solve.
    fixed_cross: Vec<Vec<CMat>>,
    /// terms[k][v]: the variable term scaled by sqrt of the block power.
    terms: Vec<Vec<CMat>>,
    active: Vec<bool>,
    bandwidth_hz: f64,
}

impl DlEffectiveChannels {
    /// Builds the evaluation cache for AP `ap`'s block given the current
    /// powers of every other AP (the block entries of `eta` are ignored).
    pub fn block_context(&self, ap: usize, eta: &DlPowers) -> DlBlockContext {
        let n = self.n_users();
        let vars = self.ap_slots[ap].clone();
        let block_users: Vec<bool> = {
            let mut b = vec![false; n];
            for &(k, _) in &vars {
                b[k] = true;
            }
            b
        };

        let mut base_full = Vec::with_capacity(n);
        let mut base_excl = Vec::with_capacity(n);
        let mut fixed_cross = Vec::with_capacity(n);
        let mut terms = Vec::with_capacity(n);
        for k in 0..n {
            let mut full = self.noise[k].clone();
            let mut excl = self.noise[k].clone();
            for j in 0..n {
                if self.serving[j].is_empty() || block_users[j] {
                    continue;
                }
                let a = self.cross_matrix(k, j, &eta[j]);
                let cov = &a * a.adjoint();
                full += &cov;
                if j != k {
                    excl += cov;
                }
            }
            base_full.push(full);
            base_excl.push(excl);

            let mut fixed_k = Vec::with_capacity(vars.len());
            let mut terms_k = Vec::with_capacity(vars.len());
            for &(j, slot) in &vars {
                let mut f = CMat::zeros(self.p_orders[k], self.p_orders[j]);
                for (i, term) in self.a[k][j].iter().enumerate() {
                    if i == slot {
                        continue;
                    }
                    let w = eta[j][i];
                    if w > 0.0 {
                        let s = Complex64::new(w.sqrt(), 0.0);
                        f += term.map(|v| v * s);
                    }
                }
                fixed_k.push(f);
                terms_k.push(self.a[k][j][slot].clone());
            }
            fixed_cross.push(fixed_k);
            terms.push(terms_k);
        }

        DlBlockContext {
            vars,
            base_full,
            base_excl,
            fixed_cross,
            terms,
            active: self.active.clone(),
            bandwidth_hz: self.bandwidth_hz,
        }
    }
}

impl DlBlockContext {
    pub fn vars(&self) -> &[(usize, usize)] {
        &self.vars
    }

    pub fn n_users(&self) -> usize {
        self.active.len()
    }

    fn x_mat(&self, k: usize, w: &[f64], include_self: bool) -> CMat {
        let mut x = if include_self {
            self.base_full[k].clone()
        } else {
            self.base_excl[k].clone()
        };
        for (v, &(j, _)) in self.vars.iter().enumerate() {
            if j == k && !include_self {
                continue;
            }
            let mut a = self.fixed_cross[k][v].clone();
            if w[v] > 0.0 {
                let s = Complex64::new(w[v].sqrt(), 0.0);
                a += self.terms[k][v].map(|t| t * s);
            }
            x += &a * a.adjoint();
        }
        x
    }

    /// Per-user concave components under block powers `w`.
    pub fn g_values(&self, w: &[f64], include_self: bool) -> Result<Vec<f64>> {
        let mut vals = vec![0.0; self.n_users()];
        for k in 0..self.n_users() {
            if self.active[k] {
                vals[k] = self.bandwidth_hz * hpd_logdet2(&self.x_mat(k, w, include_self))?;
            }
        }
        Ok(vals)
    }

    /// Gradient of the summed components over the block variables.
    pub fn g_gradient(
        &self,
        w: &[f64],
        include_self: bool,
        user: Option<usize>,
        floor: f64,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.vars.len()];
        let users: Vec<usize> = match user {
            Some(k) => vec![k],
            None => (0..self.n_users()).collect(),
        };
        let scale = self.bandwidth_hz / LN_2;
        for &k in &users {
            if !self.active[k] {
                continue;
            }
            let chol = hpd_cholesky(&self.x_mat(k, w, include_self))?;
            for (v, &(j, _)) in self.vars.iter().enumerate() {
                if j == k && !include_self {
                    continue;
                }
                // Amplitude at the floored power: a link at exactly zero
                // keeps a positive derivative and can be powered back up.
                let w_eff = w[v].max(floor);
                let mut a = self.fixed_cross[k][v].clone();
                if w_eff > 0.0 {
                    let s = Complex64::new(w_eff.sqrt(), 0.0);
                    a += self.terms[k][v].map(|t| t * s);
                }
                let solved = chol.solve(&self.terms[k][v]);
                let inner = (&solved * a.adjoint()).trace().re;
                grad[v] += scale * inner / w_eff.max(1e-300).sqrt();
            }
        }
        Ok(grad)
    }

    /// User rates under block powers `w`, zero for unserved users.
    pub fn user_rate(&self, k: usize, w: &[f64]) -> Result<f64> {
        if !self.active[k] {
            return Ok(0.0);
        }
        let full = self.bandwidth_hz * hpd_logdet2(&self.x_mat(k, w, true))?;
        let excl = self.bandwidth_hz * hpd_logdet2(&self.x_mat(k, w, false))?;
        Ok((full - excl).max(0.0))
    }

    pub fn sum_rate(&self, w: &[f64]) -> Result<f64> {
        (0..self.n_users()).map(|k| self.user_rate(k, w)).sum()
    }

    pub fn min_active_rate(&self, w: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        let mut any = false;
        for k in 0..self.n_users() {
            if self.active[k] {
                best = best.min(self.user_rate(k, w)?);
                any = true;
            }
        }
        Ok(if any { best } else { 0.0 })
    }
}

/// Uplink effective channels for a fixed set of combiners. Powers live in a
/// plain per-user vector since each user transmits with a single weight.
#[derive(Debug, Clone)]
pub struct UlEffectiveChannels {
    /// bb[k][j] is the outer product of the combined channel from transmitter
    /// j into receiver k's stream space; empty row for unserved k.
    pub(crate) bb: Vec<Vec<CMat>>,
    /// noise_gram[k] is the combined noise covariance at user k's serving set.
    pub(crate) noise_gram: Vec<CMat>,
    pub p_orders: Vec<usize>,
    pub bandwidth_hz: f64,
    pub active: Vec<bool>,
}

impl UlEffectiveChannels {
    /// Assembles the uplink terms from true channels indexed [user][ap], the
    /// combiner set, and the per-user spreading matrices.
    pub fn build(
        true_channels: &[Vec<CMat>],
        combiners: &CombinerSet,
        assoc: &AssociationMap,
        l_mats: &[CMat],
        sigma2_w: f64,
        bandwidth_hz: f64,
    ) -> Result<Self> {
        let n_users = assoc.n_users();
        if true_channels.len() != n_users || l_mats.len() != n_users {
            return Err(Error::InvalidParameter(
                "channel grid and spreading matrices must cover every user".into(),
            ));
        }
        if !(sigma2_w > 0.0) || !(bandwidth_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "noise variance and bandwidth must be positive".into(),
            ));
        }
        let p_orders: Vec<usize> = l_mats.iter().map(|l| l.ncols()).collect();
        let active: Vec<bool> = assoc
            .serving_aps
            .iter()
            .map(|aps| !aps.is_empty())
            .collect();

        let mut bb = vec![Vec::new(); n_users];
        let mut noise_gram = Vec::with_capacity(n_users);
        for k in 0..n_users {
            let p_k = p_orders[k];
            if !active[k] {
                noise_gram.push(CMat::zeros(p_k, p_k));
                continue;
            }
            let mut gram = CMat::zeros(p_k, p_k);
            for &m in &assoc.serving_aps[k] {
                let w = combiners.combiners.get(&(k, m)).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "missing combiner for user {k} at AP {m}"
                    ))
                })?;
                gram += w * w.adjoint();
            }
            noise_gram.push(gram.map(|v| v * sigma2_w));

            let mut row = Vec::with_capacity(n_users);
            for j in 0..n_users {
                let mut b = CMat::zeros(p_k, p_orders[j]);
                for &m in &assoc.serving_aps[k] {
                    b += &combiners.combiners[&(k, m)] * &true_channels[j][m] * &l_mats[j];
                }
                row.push(&b * b.adjoint());
            }
            bb[k] = row;
        }

        Ok(UlEffectiveChannels {
            bb,
            noise_gram,
            p_orders,
            bandwidth_hz,
            active,
        })
    }

    pub fn n_users(&self) -> usize {
        self.active.len()
    }

    fn gram(&self, k: usize, eta: &[f64], include_self: bool) -> CMat {
        let mut x = self.noise_gram[k].clone();
        for j in 0..self.n_users() {
            if j == k && !include_self {
                continue;
            }
            let w = eta[j];
            if w > 0.0 {
                x += self.bb[k][j].map(|v| v * w);
            }
        }
        x
    }

    /// Achievable rate of user k in bit/s. Zero for unserved users.
    pub fn user_rate(&self, k: usize, eta: &[f64]) -> Result<f64> {
        if !self.active[k] {
            return Ok(0.0);
        }
        let x_excl = self.gram(k, eta, false);
        let x_full = &x_excl + self.bb[k][k].map(|v| v * eta[k]);
        let rate = self.bandwidth_hz * (hpd_logdet2(&x_full)? - hpd_logdet2(&x_excl)?);
        Ok(rate.max(0.0))
    }

    pub fn sum_rate(&self, eta: &[f64]) -> Result<f64> {
        (0..self.n_users()).map(|k| self.user_rate(k, eta)).sum()
    }

    pub fn min_active_rate(&self, eta: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        let mut any = false;
        for k in 0..self.n_users() {
            if self.active[k] {
                best = best.min(self.user_rate(k, eta)?);
                any = true;
            }
        }
        Ok(if any { best } else { 0.0 })
    }

    /// Per-user concave components W log2 det X_k; unserved users give zero.
    pub fn g_values(&self, eta: &[f64], include_self: bool) -> Result<Vec<f64>> {
        let mut vals = vec![0.0; self.n_users()];
        for k in 0..self.n_users() {
            if self.active[k] {
                vals[k] = self.bandwidth_hz * hpd_logdet2(&self.gram(k, eta, include_self))?;
            }
        }
        Ok(vals)
    }

    /// Gradient of the summed components; the uplink covariances are linear
    /// in the powers so no square-root guard is needed.
    pub fn g_gradient(
        &self,
        eta: &[f64],
        include_self: bool,
        user: Option<usize>,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_users()];
        let users: Vec<usize> = match user {
            Some(k) => vec![k],
            None => (0..self.n_users()).collect(),
        };
        let scale = self.bandwidth_hz / LN_2;
        for &k in &users {
            if !self.active[k] {
                continue;
            }
            let chol = hpd_cholesky(&self.gram(k, eta, include_self))?;
            for j in 0..self.n_users() {
                if j == k && !include_self {
                    continue;
                }
                let solved = chol.solve(&self.bb[k][j]);
                grad[j] += scale * solved.trace().re;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{
        build_association, build_combiners, build_precoders, spreading_matrix, AssociationMode,
    };
    use crate::linalg::{complex_gaussian_matrix, identity};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: f64 = 2.0e7;

    struct TestNet {
        channels: Vec<Vec<CMat>>,
        l_mats: Vec<CMat>,
        assoc: crate::association::AssociationMap,
        dl: DlEffectiveChannels,
        ul: UlEffectiveChannels,
    }

    /// Random unit-variance network with cell-free association, channel
    /// inversion on perfect CSI, and moderate noise so everything is well
    /// conditioned for finite differences.
    #[allow(clippy::too_many_arguments)]
    fn test_net(
        seed: u64,
        n_users: usize,
        n_aps: usize,
        n_ap_ant: usize,
        n_ms_ant: usize,
        p_k: usize,
        sigma2: f64,
        mode: AssociationMode,
    ) -> TestNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<Vec<CMat>> = (0..n_users)
            .map(|_| {
                (0..n_aps)
                    .map(|_| complex_gaussian_matrix(n_ap_ant, n_ms_ant, 1.0, &mut rng))
                    .collect()
            })
            .collect();
        let l_mats: Vec<CMat> = (0..n_users)
            .map(|_| spreading_matrix(p_k, n_ms_ant).unwrap())
            .collect();
        let assoc = build_association(&channels, mode).unwrap();
        let pre = build_precoders(&channels, &assoc, &l_mats).unwrap();
        let com = build_combiners(&channels, &assoc, &l_mats).unwrap();
        let dl = DlEffectiveChannels::build(&channels, &pre, &assoc, &l_mats, sigma2, W).unwrap();
        let ul = UlEffectiveChannels::build(&channels, &com, &assoc, &l_mats, sigma2, W).unwrap();
        TestNet {
            channels,
            l_mats,
            assoc,
            dl,
            ul,
        }
    }

    fn random_powers(shape: &DlPowers, lo: f64, hi: f64, seed: u64) -> DlPowers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shape
            .iter()
            .map(|row| row.iter().map(|_| rng.random_range(lo..hi)).collect())
            .collect()
    }

    #[test]
    fn single_user_downlink_matches_closed_form() {
        // One user, one AP, full multiplexing: channel inversion turns the
        // link into p parallel channels with gain eta / sigma2 each.
        let sigma2 = 0.05;
        let net = test_net(1, 1, 1, 4, 2, 2, sigma2, AssociationMode::CellFree);
        for eta in [0.0, 0.01, 0.3, 1.0] {
            let rate = net.dl.user_rate(0, &vec![vec![eta]]).unwrap();
            let expected = 2.0 * W * (1.0 + eta / sigma2).log2();
            assert!(
                (rate - expected).abs() <= 1e-9 * expected.max(1.0),
                "eta = {eta}: {rate} vs {expected}"
            );
        }
    }

    #[test]
    fn single_user_uplink_matches_closed_form() {
        // Identity channels at every serving AP make the combiner identity,
        // so p streams each see gain eta * n_aps / sigma2.
        let sigma2 = 0.1;
        let n_aps = 3;
        let channels = vec![(0..n_aps).map(|_| identity(2)).collect::<Vec<_>>()];
        let l_mats = vec![spreading_matrix(2, 2).unwrap()];
        let assoc = build_association(&channels, AssociationMode::CellFree).unwrap();
        let com = build_combiners(&channels, &assoc, &l_mats).unwrap();
        let ul =
            UlEffectiveChannels::build(&channels, &com, &assoc, &l_mats, sigma2, W).unwrap();
        for eta in [0.0, 0.05, 0.4] {
            let rate = ul.user_rate(0, &[eta]).unwrap();
            let expected = 2.0 * W * (1.0 + eta * n_aps as f64 / sigma2).log2();
            assert!(
                (rate - expected).abs() <= 1e-9 * expected.max(1.0),
                "eta = {eta}: {rate} vs {expected}"
            );
        }
    }

    /// Downlink oracle built independently from raw channels and precoders:
    /// explicit interference covariance inverse and a determinant identity.
    fn dl_rate_oracle(net: &TestNet, k: usize, eta: &DlPowers, sigma2: f64) -> f64 {
        let p_k = net.l_mats[k].ncols();
        let cross = |j: usize| -> CMat {
            let mut acc = CMat::zeros(p_k, net.l_mats[j].ncols());
            for (i, &m) in net.assoc.serving_aps[j].iter().enumerate() {
                let q = {
                    let pre = build_precoders(&net.channels, &net.assoc, &net.l_mats).unwrap();
                    pre.precoders[&(j, m)].clone()
                };
                let term = net.l_mats[k].adjoint() * net.channels[k][m].adjoint() * q;
                acc += term.map(|v| v * Complex64::new(eta[j][i].sqrt(), 0.0));
            }
            acc
        };
        let mut r = (net.l_mats[k].adjoint() * &net.l_mats[k]).map(|v| v * sigma2);
        for j in 0..net.assoc.n_users() {
            if j == k {
                continue;
            }
            let a = cross(j);
            r += &a * a.adjoint();
        }
        let a_kk = cross(k);
        let inner = identity(p_k) + r.clone().try_inverse().unwrap() * &a_kk * a_kk.adjoint();
        W * inner.determinant().re.log2()
    }

    #[test]
    fn downlink_rate_agrees_with_inverse_based_oracle() {
        let sigma2 = 0.2;
        for seed in 0..8 {
            let net = test_net(100 + seed, 3, 4, 4, 2, 2, sigma2, AssociationMode::CellFree);
            let eta = random_powers(&net.dl.zero_powers(), 0.01, 0.5, 900 + seed);
            for k in 0..3 {
                let fast = net.dl.user_rate(k, &eta).unwrap();
                let slow = dl_rate_oracle(&net, k, &eta, sigma2);
                assert!(
                    (fast - slow).abs() <= 1e-9 * slow.abs().max(1.0),
                    "seed {seed} user {k}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn uplink_rate_agrees_with_inverse_based_oracle() {
        let sigma2 = 0.2;
        for seed in 0..8 {
            let net = test_net(200 + seed, 3, 4, 4, 2, 2, sigma2, AssociationMode::CellFree);
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let eta: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.5)).collect();
            let com = build_combiners(&net.channels, &net.assoc, &net.l_mats).unwrap();
            for k in 0..3 {
                let p_k = net.l_mats[k].ncols();
                let b = |j: usize| -> CMat {
                    let mut acc = CMat::zeros(p_k, net.l_mats[j].ncols());
                    for &m in &net.assoc.serving_aps[k] {
                        acc += &com.combiners[&(k, m)] * &net.channels[j][m] * &net.l_mats[j];
                    }
                    acc
                };
                let mut r = CMat::zeros(p_k, p_k);
                for &m in &net.assoc.serving_aps[k] {
                    let w = &com.combiners[&(k, m)];
                    r += (w * w.adjoint()).map(|v| v * sigma2);
                }
                for j in 0..3 {
                    if j != k {
                        let bj = b(j);
                        r += (&bj * bj.adjoint()).map(|v| v * eta[j]);
                    }
                }
                let bk = b(k);
                let inner = identity(p_k)
                    + (r.clone().try_inverse().unwrap() * &bk * bk.adjoint())
                        .map(|v| v * eta[k]);
                let slow = W * inner.determinant().re.log2();
                let fast = net.ul.user_rate(k, &eta).unwrap();
                assert!(
                    (fast - slow).abs() <= 1e-9 * slow.abs().max(1.0),
                    "seed {seed} user {k}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn sum_and_min_rates_aggregate_user_rates() {
        let net = test_net(7, 3, 4, 4, 2, 2, 0.1, AssociationMode::CellFree);
        let eta = random_powers(&net.dl.zero_powers(), 0.01, 0.5, 77);
        let rates: Vec<f64> = (0..3).map(|k| net.dl.user_rate(k, &eta).unwrap()).collect();
        let sum: f64 = rates.iter().sum();
        assert!((net.dl.sum_rate(&eta).unwrap() - sum).abs() <= 1e-9 * sum);
        let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(net.dl.min_active_rate(&eta).unwrap(), min);

        // The rate equals the difference of the two concave components.
        let g1 = net.dl.g_values(&eta, true).unwrap();
        let g2 = net.dl.g_values(&eta, false).unwrap();
        for k in 0..3 {
            assert!((rates[k] - (g1[k] - g2[k])).abs() <= 1e-9 * rates[k].max(1.0));
        }
    }

    #[test]
    fn zero_power_means_zero_rate() {
        let net = test_net(11, 2, 3, 4, 2, 2, 0.1, AssociationMode::CellFree);
        let eta = net.dl.zero_powers();
        for k in 0..2 {
            assert_eq!(net.dl.user_rate(k, &eta).unwrap(), 0.0);
            assert_eq!(net.ul.user_rate(k, &[0.0, 0.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn downlink_gradient_matches_finite_differences() {
        let net = test_net(21, 3, 3, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let eta = random_powers(&net.dl.zero_powers(), 0.1, 0.6, 321);
        for include_self in [true, false] {
            let grad = net
                .dl
                .g_gradient(&eta, include_self, None, 1e-12)
                .unwrap();
            let h = 1e-6;
            for j in 0..3 {
                for i in 0..eta[j].len() {
                    let mut up = eta.clone();
                    up[j][i] += h;
                    let mut dn = eta.clone();
                    dn[j][i] -= h;
                    let f = |e: &DlPowers| -> f64 {
                        net.dl.g_values(e, include_self).unwrap().iter().sum()
                    };
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    let g = grad[j][i];
                    assert!(
                        (g - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                        "include_self = {include_self}, var ({j},{i}): {g} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn downlink_single_user_gradient_matches_finite_differences() {
        let net = test_net(22, 3, 3, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let eta = random_powers(&net.dl.zero_powers(), 0.1, 0.6, 322);
        let k = 1;
        let grad = net.dl.g_gradient(&eta, false, Some(k), 1e-12).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for i in 0..eta[j].len() {
                let mut up = eta.clone();
                up[j][i] += h;
                let mut dn = eta.clone();
                dn[j][i] -= h;
                let fd = (net.dl.g_values(&up, false).unwrap()[k]
                    - net.dl.g_values(&dn, false).unwrap()[k])
                    / (2.0 * h);
                assert!(
                    (grad[j][i] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                    "var ({j},{i}): {} vs {fd}",
                    grad[j][i]
                );
            }
        }
        // The own-signal weights cannot appear in the self-excluded component.
        for i in 0..eta[k].len() {
            assert_eq!(grad[k][i], 0.0);
        }
    }

    #[test]
    fn uplink_gradient_matches_finite_differences() {
        let net = test_net(23, 3, 3, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let mut rng = ChaCha8Rng::seed_from_u64(323);
        let eta: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..0.6)).collect();
        for include_self in [true, false] {
            let grad = net.ul.g_gradient(&eta, include_self, None).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut up = eta.clone();
                up[j] += h;
                let mut dn = eta.clone();
                dn[j] -= h;
                let f = |e: &[f64]| -> f64 {
                    net.ul.g_values(e, include_self).unwrap().iter().sum()
                };
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!(
                    (grad[j] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                    "include_self = {include_self}, var {j}: {} vs {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn sqrt_product_hessian_is_negative_semidefinite() {
        // The geometric mean sqrt(x*y), which couples the powers of two APs
        // serving the same user, is jointly concave: its Hessian has one
        // zero eigenvalue and one strictly negative one.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..200 {
            let x: f64 = rng.random_range(0.01..10.0);
            let y: f64 = rng.random_range(0.01..10.0);
            let hxx = -0.25 * (y / (x * x * x)).sqrt();
            let hyy = -0.25 * (x / (y * y * y)).sqrt();
            let hxy = 0.25 / (x * y).sqrt();
            let trace = hxx + hyy;
            let det = hxx * hyy - hxy * hxy;
            let disc = (trace * trace / 4.0 - det).max(0.0).sqrt();
            let eig_hi = trace / 2.0 + disc;
            let eig_lo = trace / 2.0 - disc;
            assert!(eig_hi <= 1e-12, "x={x}, y={y}: eig {eig_hi}");
            assert!(eig_lo <= 1e-12);
        }
    }

    fn midpoint_concavity_gap(f: impl Fn(&[f64]) -> f64, a: &[f64], b: &[f64]) -> f64 {
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        f(&mid) - 0.5 * (f(a) + f(b))
    }

    #[test]
    fn uplink_components_are_concave_along_segments() {
        // Uplink covariances are affine in the powers, so both components
        // are concave on every instance: midpoints never fall below chords.
        let net = test_net(32, 3, 4, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let mut rng = ChaCha8Rng::seed_from_u64(632);
        for include_self in [true, false] {
            let f = |eta: &[f64]| -> f64 {
                net.ul.g_values(eta, include_self).unwrap().iter().sum::<f64>() / W
            };
            for _ in 0..50 {
                let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let gap = midpoint_concavity_gap(f, &a, &b);
                assert!(gap >= -1e-9, "include_self = {include_self}: gap {gap}");
            }
        }
    }

    /// A network where each user is served by exactly one AP, so no power
    /// couples with another through a square root.
    fn separately_served_net(seed: u64, n: usize, sigma2: f64) -> TestNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels: Vec<Vec<CMat>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| complex_gaussian_matrix(4, 2, 1.0, &mut rng))
                    .collect()
            })
            .collect();
        let l_mats: Vec<CMat> = (0..n).map(|_| spreading_matrix(2, 2).unwrap()).collect();
        let assoc = crate::association::AssociationMap {
            served_by_ap: (0..n).map(|m| vec![m]).collect(),
            serving_aps: (0..n).map(|k| vec![k]).collect(),
        };
        let pre = build_precoders(&channels, &assoc, &l_mats).unwrap();
        let com = build_combiners(&channels, &assoc, &l_mats).unwrap();
        let dl = DlEffectiveChannels::build(&channels, &pre, &assoc, &l_mats, sigma2, W).unwrap();
        let ul = UlEffectiveChannels::build(&channels, &com, &assoc, &l_mats, sigma2, W).unwrap();
        TestNet {
            channels,
            l_mats,
            assoc,
            dl,
            ul,
        }
    }

    #[test]
    fn single_serving_downlink_components_are_concave() {
        // Without square-root couplings the downlink covariances are affine
        // in the powers as well, and concavity holds rigorously.
        let net = separately_served_net(33, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(633);
        for include_self in [true, false] {
            let f = |v: &[f64]| -> f64 {
                let eta: DlPowers = v.iter().map(|&x| vec![x]).collect();
                net.dl.g_values(&eta, include_self).unwrap().iter().sum::<f64>() / W
            };
            for _ in 0..50 {
                let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let gap = midpoint_concavity_gap(f, &a, &b);
                assert!(gap >= -1e-9, "include_self = {include_self}: gap {gap}");
            }
        }
    }

    #[test]
    fn coupled_downlink_components_can_curve_upward() {
        // When a user is served by several APs, the sign-indefinite cross
        // products between its per-AP terms can give the g components
        // regions of positive curvature, so their tangent planes are not
        // global over-estimators there. This is why the optimizers verify
        // the true objective before accepting a block update instead of
        // trusting the surrogate bound alone.
        let net = test_net(31, 2, 2, 4, 2, 2, 0.5, AssociationMode::CellFree);
        let f = |v: &[f64]| -> f64 {
            let eta: DlPowers = vec![vec![v[0], v[1]], vec![v[2], v[3]]];
            net.dl.g_values(&eta, false).unwrap().iter().sum::<f64>() / W
        };
        let mut rng = ChaCha8Rng::seed_from_u64(631);
        let mut worst = f64::INFINITY;
        for _ in 0..200 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            worst = worst.min(midpoint_concavity_gap(f, &a, &b));
        }
        assert!(
            worst < -1e-6,
            "expected a concavity violation on this instance, worst gap {worst}"
        );
    }

    #[test]
    fn surrogate_is_tight_and_gradient_matched_at_anchor() {
        let net = test_net(34, 3, 3, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let anchor = random_powers(&net.dl.zero_powers(), 0.1, 0.6, 634);
        for k in 0..3 {
            let rate = net.dl.user_rate(k, &anchor).unwrap();
            let sur = dl_surrogate(&net.dl, &anchor, &anchor, k, 1e-12).unwrap();
            assert!(
                (sur - rate).abs() <= 1e-9 * rate.max(1.0),
                "user {k}: surrogate {sur} vs rate {rate} at anchor"
            );

            // Gradient of the surrogate at the anchor: g1 gradient at the
            // anchor minus the frozen g2 gradient. Must match the true rate
            // gradient by finite differences.
            let g1 = net.dl.g_gradient(&anchor, true, Some(k), 1e-12).unwrap();
            let g2 = net.dl.g_gradient(&anchor, false, Some(k), 1e-12).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                for i in 0..anchor[j].len() {
                    let mut up = anchor.clone();
                    up[j][i] += h;
                    let mut dn = anchor.clone();
                    dn[j][i] -= h;
                    let fd = (net.dl.user_rate(k, &up).unwrap()
                        - net.dl.user_rate(k, &dn).unwrap())
                        / (2.0 * h);
                    let g = g1[j][i] - g2[j][i];
                    assert!(
                        (g - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                        "user {k}, var ({j},{i}): {g} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn uplink_surrogate_is_tight_and_bounds_the_rate() {
        let net = test_net(35, 3, 4, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let mut rng = ChaCha8Rng::seed_from_u64(635);
        for trial in 0..40 {
            let anchor: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let point: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            for k in 0..3 {
                let tight = ul_surrogate(&net.ul, &anchor, &anchor, k).unwrap();
                let at_anchor = net.ul.user_rate(k, &anchor).unwrap();
                assert!((tight - at_anchor).abs() <= 1e-9 * at_anchor.max(1.0));

                let bound = ul_surrogate(&net.ul, &point, &anchor, k).unwrap();
                let rate = net.ul.user_rate(k, &point).unwrap();
                assert!(
                    bound <= rate + 1e-9 * rate.abs().max(1.0),
                    "trial {trial} user {k}: surrogate {bound} above rate {rate}"
                );
            }
        }
    }

    #[test]
    fn downlink_surrogate_bounds_rate_without_couplings() {
        let net = separately_served_net(36, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(636);
        for trial in 0..40 {
            let draw = |rng: &mut ChaCha8Rng| -> DlPowers {
                (0..3).map(|_| vec![rng.random_range(0.0..1.0)]).collect()
            };
            let anchor = draw(&mut rng);
            let point = draw(&mut rng);
            for k in 0..3 {
                let bound = dl_surrogate(&net.dl, &point, &anchor, k, 1e-12).unwrap();
                let rate = net.dl.user_rate(k, &point).unwrap();
                assert!(
                    bound <= rate + 1e-9 * rate.abs().max(1.0),
                    "trial {trial} user {k}: surrogate {bound} above rate {rate}"
                );
            }
        }
    }

    #[test]
    fn single_user_surrogate_equals_rate_everywhere() {
        // With one user the self-excluded component is constant, so the
        // linearization is exact and the surrogate coincides with the rate.
        let net = test_net(37, 1, 3, 4, 2, 2, 0.1, AssociationMode::CellFree);
        let mut rng = ChaCha8Rng::seed_from_u64(637);
        for _ in 0..20 {
            let anchor = vec![(0..3).map(|_| rng.random_range(0.0..1.0)).collect()];
            let point = vec![(0..3).map(|_| rng.random_range(0.0..1.0)).collect()];
            let sur = dl_surrogate(&net.dl, &point, &anchor, 0, 1e-12).unwrap();
            let rate = net.dl.user_rate(0, &point).unwrap();
            assert!((sur - rate).abs() <= 1e-9 * rate.max(1.0));

            let ul_anchor = [rng.random_range(0.0..1.0)];
            let ul_point = [rng.random_range(0.0..1.0)];
            let sur = ul_surrogate(&net.ul, &ul_point, &ul_anchor, 0).unwrap();
            let rate = net.ul.user_rate(0, &ul_point).unwrap();
            assert!((sur - rate).abs() <= 1e-9 * rate.max(1.0));
        }
    }

    #[test]
    fn rates_grow_with_own_power() {
        // Uplink: the signal covariance grows in the positive-definite order
        // with the own power on any instance.
        let net = test_net(38, 3, 4, 4, 2, 2, 0.3, AssociationMode::CellFree);
        let mut last = -1.0;
        for step in 0..6 {
            let eta = [0.1 * step as f64, 0.3, 0.4];
            let r = net.ul.user_rate(0, &eta).unwrap();
            assert!(r >= last - 1e-9, "uplink rate fell from {last} to {r}");
            last = r;
        }

        // Downlink single user under channel inversion: every per-AP term
        // is the same positive matrix, so power only ever helps.
        let net = test_net(39, 1, 3, 4, 2, 2, 0.1, AssociationMode::CellFree);
        let mut last = -1.0;
        for step in 0..6 {
            let eta = vec![vec![0.05 * step as f64; 3]];
            let r = net.dl.user_rate(0, &eta).unwrap();
            assert!(r >= last - 1e-9, "downlink rate fell from {last} to {r}");
            last = r;
        }
    }

    #[test]
    fn block_context_matches_full_evaluators() {
        let net = test_net(40, 3, 4, 4, 2, 2, 0.3, AssociationMode::TopN(2));
        let eta = random_powers(&net.dl.zero_powers(), 0.05, 0.5, 640);
        let mut rng = ChaCha8Rng::seed_from_u64(641);
        for ap in 0..4 {
            let ctx = net.dl.block_context(ap, &eta);
            let w: Vec<f64> = ctx.vars().iter().map(|_| rng.random_range(0.0..0.7)).collect();
            let mut full_eta = eta.clone();
            for (v, &(k, i)) in ctx.vars().iter().enumerate() {
                full_eta[k][i] = w[v];
            }
            for include_self in [true, false] {
                let ctx_vals = ctx.g_values(&w, include_self).unwrap();
                let full_vals = net.dl.g_values(&full_eta, include_self).unwrap();
                for k in 0..3 {
                    assert!(
                        (ctx_vals[k] - full_vals[k]).abs() <= 1e-9 * full_vals[k].abs().max(1.0),
                        "ap {ap} user {k} include_self {include_self}"
                    );
                }
                let ctx_grad = ctx.g_gradient(&w, include_self, None, 1e-12).unwrap();
                let full_grad = net.dl.g_gradient(&full_eta, include_self, None, 1e-12).unwrap();
                for (v, &(k, i)) in ctx.vars().iter().enumerate() {
                    assert!(
                        (ctx_grad[v] - full_grad[k][i]).abs()
                            <= 1e-9 * full_grad[k][i].abs().max(1.0),
                        "ap {ap} var {v}"
                    );
                }
            }
            for k in 0..3 {
                let a = ctx.user_rate(k, &w).unwrap();
                let b = net.dl.user_rate(k, &full_eta).unwrap();
                assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
            let a = ctx.sum_rate(&w).unwrap();
            let b = net.dl.sum_rate(&full_eta).unwrap();
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            let a = ctx.min_active_rate(&w).unwrap();
            let b = net.dl.min_active_rate(&full_eta).unwrap();
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn unserved_users_get_zero_rate_and_no_gradient_rows() {
        // Equal norms under strict above-average association leave every
        // user unserved at one AP; craft a grid where user 0 ends orphaned.
        let mut net = test_net(41, 3, 2, 4, 2, 2, 0.1, AssociationMode::CellFree);
        // Rebuild with an association that orphans user 0.
        for m in 0..2 {
            net.channels[0][m] = net.channels[0][m].map(|v| v * 1e-3);
        }
        let assoc = build_association(&net.channels, AssociationMode::TopN(2)).unwrap();
        assert!(assoc.serving_aps[0].is_empty(), "user 0 should be orphaned");
        let pre = build_precoders(&net.channels, &assoc, &net.l_mats).unwrap();
        let com = build_combiners(&net.channels, &assoc, &net.l_mats).unwrap();
        let dl =
            DlEffectiveChannels::build(&net.channels, &pre, &assoc, &net.l_mats, 0.1, W).unwrap();
        let ul =
            UlEffectiveChannels::build(&net.channels, &com, &assoc, &net.l_mats, 0.1, W).unwrap();

        let eta = random_powers(&dl.zero_powers(), 0.05, 0.3, 641);
        assert_eq!(eta[0].len(), 0);
        assert_eq!(dl.user_rate(0, &eta).unwrap(), 0.0);
        assert!(dl.user_rate(1, &eta).unwrap() > 0.0);
        assert!(dl.min_active_rate(&eta).unwrap() > 0.0);

        let ul_eta = [0.2, 0.2, 0.2];
        assert_eq!(ul.user_rate(0, &ul_eta).unwrap(), 0.0);
        assert!(ul.user_rate(1, &ul_eta).unwrap() > 0.0);
        // The orphan still interferes: raising its power lowers the others.
        let quiet = [0.0, 0.2, 0.2];
        assert!(ul.user_rate(1, &quiet).unwrap() > ul.user_rate(1, &ul_eta).unwrap());

        // Gradients stay finite and the orphan's component contributes none.
        let g = dl.g_gradient(&eta, true, None, 1e-12).unwrap();
        assert!(g.iter().flatten().all(|v| v.is_finite()));
        let g0 = dl.g_gradient(&eta, true, Some(0), 1e-12).unwrap();
        assert!(g0.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn budget_accounting_follows_the_association() {
        let net = test_net(51, 3, 4, 4, 2, 2, 0.1, AssociationMode::TopN(2));
        let eta = random_powers(&net.dl.zero_powers(), 0.1, 0.2, 151);
        let used = net.dl.budget_used(&eta);
        assert_eq!(used.len(), 4);
        for m in 0..4 {
            let mut expected = 0.0;
            for k in 0..3 {
                if let Ok(i) = net.assoc.serving_aps[k].binary_search(&m) {
                    expected += eta[k][i] * net.dl.precoder_traces[k][i];
                }
            }
            assert!((used[m] - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }
}
