//! AP-MS association rules and the channel-inversion beamformers. An AP
//! ranks users by the Frobenius norm of their estimated channels; the
//! serving sets drive which precoders and combiners exist downstream.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{gram_solve, CMat};

/// How APs pick the users they serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationMode {
    /// Every AP serves every user.
    CellFree,
    /// Each AP serves its N strongest users by estimated channel norm; ties
    /// resolve toward the lower user index.
    TopN(usize),
    /// Each AP serves the users whose estimated channel norm is strictly
    /// above that AP's average norm.
    AboveAverage,
}

/// Serving sets in both directions. `served_by_ap[m]` lists K(m) and
/// `serving_aps[k]` lists M(k); both are ascending, and membership is dual:
/// k in K(m) iff m in M(k).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMap {
    pub served_by_ap: Vec<Vec<usize>>,
    pub serving_aps: Vec<Vec<usize>>,
}

impl AssociationMap {
    pub fn n_aps(&self) -> usize {
        self.served_by_ap.len()
    }

    pub fn n_users(&self) -> usize {
        self.serving_aps.len()
    }

    pub fn serves(&self, ap: usize, user: usize) -> bool {
        self.served_by_ap[ap].binary_search(&user).is_ok()
    }

    /// Users no AP serves.
    pub fn orphans(&self) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&k| self.serving_aps[k].is_empty())
            .collect()
    }
}

/// Builds the serving sets from estimated channels indexed [user][ap].
/// Only Frobenius norms matter, so any common rescaling of the estimates
/// leaves the result unchanged.
pub fn build_association(
    estimated: &[Vec<CMat>],
    mode: AssociationMode,
) -> Result<AssociationMap> {
    let n_users = estimated.len();
    if n_users == 0 {
        return Err(Error::InvalidParameter("no users to associate".into()));
    }
    let n_aps = estimated[0].len();
    if n_aps == 0 || estimated.iter().any(|row| row.len() != n_aps) {
        return Err(Error::InvalidParameter(
            "estimated channels must form a full user x AP grid".into(),
        ));
    }
    if let AssociationMode::TopN(0) = mode {
        return Err(Error::InvalidParameter(
            "top-N association needs N >= 1".into(),
        ));
    }

    let mut served_by_ap = Vec::with_capacity(n_aps);
    for m in 0..n_aps {
        let norms: Vec<f64> = (0..n_users).map(|k| estimated[k][m].norm()).collect();
        let mut served: Vec<usize> = match mode {
            AssociationMode::CellFree => (0..n_users).collect(),
            AssociationMode::TopN(n) => {
                let mut order: Vec<usize> = (0..n_users).collect();
                order.sort_by(|&a, &b| {
                    norms[b]
                        .partial_cmp(&norms[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                order.truncate(n.min(n_users));
                order
            }
            AssociationMode::AboveAverage => {
                let mean = norms.iter().sum::<f64>() / n_users as f64;
                (0..n_users).filter(|&k| norms[k] > mean).collect()
            }
        };
        served.sort_unstable();
        served_by_ap.push(served);
    }

    let mut serving_aps = vec![Vec::new(); n_users];
    for (m, served) in served_by_ap.iter().enumerate() {
        for &k in served {
            serving_aps[k].push(m);
        }
    }
    Ok(AssociationMap {
        served_by_ap,
        serving_aps,
    })
}

/// Spreading matrix mapping p_k data streams onto n_ms antenna ports: column
/// j carries ones on the j-th group of n_ms / p_k consecutive ports. Columns
/// are orthogonal with squared norm n_ms / p_k.
pub fn spreading_matrix(p_k: usize, n_ms: usize) -> Result<CMat> {
    if p_k == 0 || n_ms == 0 || !n_ms.is_multiple_of(p_k) {
        return Err(Error::InvalidParameter(format!(
            "stream count {p_k} must divide the antenna count {n_ms}"
        )));
    }
    let group = n_ms / p_k;
    let mut l = CMat::zeros(n_ms, p_k);
    for j in 0..p_k {
        for r in 0..group {
            l[(j * group + r, j)] = Complex64::new(1.0, 0.0);
        }
    }
    Ok(l)
}

/// Channel-inversion precoder Q = G_hat (G_hat^H G_hat)^-1 L, so that
/// G_hat^H Q = L. The flag reports whether the Gram solve needed a ridge.
pub fn downlink_precoder(g_hat: &CMat, l: &CMat) -> Result<(CMat, bool)> {
    if g_hat.nrows() < g_hat.ncols() {
        return Err(Error::InvalidParameter(format!(
            "inversion needs at least as many AP antennas as MS antennas, got {} < {}",
            g_hat.nrows(),
            g_hat.ncols()
        )));
    }
    if l.nrows() != g_hat.ncols() {
        return Err(Error::InvalidParameter(
            "spreading matrix height must match the MS antenna count".into(),
        ));
    }
    let gram = g_hat.adjoint() * g_hat;
    let (solved, regularized) = gram_solve(&gram, l)?;
    Ok((g_hat * solved, regularized))
}

/// Channel-inversion combiner W = (L^H G_hat^H G_hat L)^-1 L^H G_hat^H, so
/// that W G_hat L = I. The flag reports whether the Gram solve needed a
/// ridge.
pub fn uplink_combiner(g_hat: &CMat, l: &CMat) -> Result<(CMat, bool)> {
    if l.nrows() != g_hat.ncols() {
        return Err(Error::InvalidParameter(
            "spreading matrix height must match the MS antenna count".into(),
        ));
    }
    let gl = g_hat * l;
    let gram = gl.adjoint() * &gl;
    let (solved, regularized) = gram_solve(&gram, &gl.adjoint())?;
    Ok((solved, regularized))
}

/// Precoders for every (user, serving AP) pair, keyed (user, ap).
#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub precoders: BTreeMap<(usize, usize), CMat>,
    /// Links whose Gram solve needed regularization.
    pub regularized: usize,
}

/// Combiners for every (user, serving AP) pair, keyed (user, ap).
#[derive(Debug, Clone)]
pub struct CombinerSet {
    pub combiners: BTreeMap<(usize, usize), CMat>,
    pub regularized: usize,
}

/// Builds the downlink precoders for all association pairs from estimated
/// channels indexed [user][ap]. `l_mats[k]` is user k's spreading matrix.
pub fn build_precoders(
    estimated: &[Vec<CMat>],
    assoc: &AssociationMap,
    l_mats: &[CMat],
) -> Result<PrecoderSet> {
    let mut precoders = BTreeMap::new();
    let mut regularized = 0;
    for k in 0..assoc.n_users() {
        for &m in &assoc.serving_aps[k] {
            let (q, reg) = downlink_precoder(&estimated[k][m], &l_mats[k])?;
            regularized += reg as usize;
            precoders.insert((k, m), q);
        }
    }
    Ok(PrecoderSet {
        precoders,
        regularized,
    })
}

/// Builds the uplink combiners for all association pairs.
pub fn build_combiners(
    estimated: &[Vec<CMat>],
    assoc: &AssociationMap,
    l_mats: &[CMat],
) -> Result<CombinerSet> {
    let mut combiners = BTreeMap::new();
    let mut regularized = 0;
    for k in 0..assoc.n_users() {
        for &m in &assoc.serving_aps[k] {
            let (w, reg) = uplink_combiner(&estimated[k][m], &l_mats[k])?;
            regularized += reg as usize;
            combiners.insert((k, m), w);
        }
    }
    Ok(CombinerSet {
        combiners,
        regularized,
    })
}
