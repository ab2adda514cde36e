//! Per-examinee coordinate updates of the variational distribution.

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::Result;
use crate::fb::{self, ChainPotentials};
use crate::model::{row_normalize, EventSequence, ModelParams, Timing, VariationalState};
use crate::special::digamma;

/// Frailty posterior q(ξ) = Gamma(a_tilde, d_tilde) and its mean κ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frailty {
    pub a_tilde: f64,
    pub d_tilde: f64,
    pub kappa: f64,
}

/// γ^{k'} = r^{k'} + Σ_n φ̃_n^{(k', ·)}.
pub fn update_gamma(r: &Array2<f64>, phi_joint: &Array3<f64>) -> Array2<f64> {
    r + &phi_joint.sum_axis(Axis(0))
}

/// Row-normalised exp(Ψ(γ) − Ψ(Σγ)) together with the log of each row's
/// mass before normalisation.
pub fn update_trans(gamma: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let k = gamma.nrows();
    let mut trans = Array2::zeros((k, k));
    let mut log_mass = Array1::zeros(k);
    for (i, row) in gamma.outer_iter().enumerate() {
        let psi_total = digamma(row.sum());
        let elog: Vec<f64> = row.iter().map(|&x| digamma(x) - psi_total).collect();
        let m = elog.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = elog.iter().map(|&e| (e - m).exp()).sum();
        for (j, &e) in elog.iter().enumerate() {
            trans[[i, j]] = (e - m).exp() / s;
        }
        log_mass[i] = m + s.ln();
    }
    (trans, log_mass)
}

/// ã = N + a − 1, d̃ = d + Σ_n Σ_{k,l} φ̃_{n−1}^{(k,l)} e^{g_{k,l}} Δt_n, κ = ã/d̃.
pub fn update_frailty(
    seq: &EventSequence,
    params: &ModelParams,
    phi_joint: &Array3<f64>,
    timing: Timing,
) -> Frailty {
    let a_tilde = seq.len() as f64 + params.a - 1.0;
    let mut d_tilde = params.d;
    if timing.observed() {
        let rate = params.g.mapv(f64::exp);
        for (t, slice) in phi_joint.outer_iter().enumerate() {
            let expected_rate: f64 = slice.iter().zip(rate.iter()).map(|(p, h)| p * h).sum();
            d_tilde += expected_rate * seq.gap(t + 1);
        }
    }
    Frailty {
        a_tilde,
        d_tilde,
        kappa: a_tilde / d_tilde,
    }
}

/// State before the first sweep: γ = R, trans = norm(R), κ = a/d.
pub fn init_state(seq: &EventSequence, params: &ModelParams) -> VariationalState {
    let k = params.k();
    let n = seq.len();
    let a_tilde = n as f64 + params.a - 1.0;
    VariationalState {
        gamma: params.r.clone(),
        trans: row_normalize(&params.r),
        trans_log_mass: Array1::zeros(k),
        kappa: params.a / params.d,
        a_tilde,
        d_tilde: params.d,
        phi: Array2::from_elem((n, k), 1.0 / k as f64),
        phi_joint: Array3::from_elem((n.saturating_sub(1), k, k), 1.0 / (k * k) as f64),
        loglik_q: 0.0,
    }
}

/// One coordinate sweep: chain posteriors, then γ, then the transition
/// weights, then the frailty posterior.
pub fn run_estep(
    seq: &EventSequence,
    params: &ModelParams,
    state: &VariationalState,
    timing: Timing,
) -> Result<VariationalState> {
    let weights = state.transition_weights();
    let pot = ChainPotentials::new(seq, params, &weights, state.kappa, timing);
    let mut msgs = fb::forward(&pot)?;
    msgs.bwd = fb::backward(&pot, &msgs.scale)?;
    let (phi, phi_joint) = fb::posteriors_from(&pot, &msgs);

    let gamma = update_gamma(&params.r, &phi_joint);
    let (trans, trans_log_mass) = update_trans(&gamma);
    let frailty = update_frailty(seq, params, &phi_joint, timing);

    Ok(VariationalState {
        gamma,
        trans,
        trans_log_mass,
        kappa: frailty.kappa,
        a_tilde: frailty.a_tilde,
        d_tilde: frailty.d_tilde,
        phi,
        phi_joint,
        loglik_q: msgs.loglik_q,
    })
}
