//! Scaled forward-backward recursions over one examinee's topic chain.
//!
//! The chain weight of a topic path z is
//!
//! ```text
//! p0[z1] b[z1,e1] · Π_{n≥2} W[z(n-1),zn] · exp(g[z(n-1),zn] − κ·exp(g[z(n-1),zn])·Δt_n) · b[zn,en]
//! ```
//!
//! where `W` is the transition weight matrix handed in by the caller and
//! Δt_n = t_n − t_(n−1). The constant κ^(N−1) factor of the gap density is
//! omitted; it cancels from every posterior. Each step's log potentials are
//! shifted by their maximum before exponentiating, and the shifts are
//! added back into `loglik_q`.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{EventSequence, ModelParams, Timing};

/// Per-step transition potentials of one chain, exponentiated and shifted.
#[derive(Debug, Clone)]
pub struct ChainPotentials {
    k: usize,
    n: usize,
    id: String,
    init: Vec<f64>,
    /// (N−1)·K·K; block `t` holds the potential of the transition into event `t+1`.
    steps: Vec<f64>,
    log_shift: f64,
}

impl ChainPotentials {
    pub fn new(
        seq: &EventSequence,
        params: &ModelParams,
        trans: &Array2<f64>,
        kappa: f64,
        timing: Timing,
    ) -> Self {
        let k = params.k();
        let n = seq.len();
        let events = seq.events();

        let mut log_shift = 0.0;
        let mut init: Vec<f64> = (0..k)
            .map(|j| params.p0[j].ln() + params.emission(j, events[0]).ln())
            .collect();
        log_shift += exp_shifted(&mut init);

        let log_trans: Vec<f64> = trans.iter().map(|x| x.ln()).collect();
        let g: Vec<f64> = params.g.iter().copied().collect();
        let rate: Vec<f64> = g.iter().map(|x| x.exp()).collect();
        let mut log_b = vec![0.0; k];

        let mut steps = vec![0.0; n.saturating_sub(1) * k * k];
        for (t, block) in steps.chunks_exact_mut(k * k).enumerate() {
            let step = t + 1;
            for (j, lb) in log_b.iter_mut().enumerate() {
                *lb = params.emission(j, events[step]).ln();
            }
            match timing {
                Timing::Observed => {
                    let dt = seq.gap(step);
                    for (idx, out) in block.iter_mut().enumerate() {
                        *out = log_trans[idx] + g[idx] - kappa * rate[idx] * dt + log_b[idx % k];
                    }
                }
                Timing::Ignored => {
                    for (idx, out) in block.iter_mut().enumerate() {
                        *out = log_trans[idx] + log_b[idx % k];
                    }
                }
            }
            log_shift += exp_shifted(block);
        }

        Self {
            k,
            n,
            id: seq.id().to_string(),
            init,
            steps,
            log_shift,
        }
    }

    #[inline]
    fn step(&self, t: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.steps[(t - 1) * kk..t * kk]
    }
}

/// Replaces log values by exp(x − max) and returns the max.
fn exp_shifted(xs: &mut [f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
    }
    m
}

/// Scaled forward/backward quantities of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMessages {
    /// N×K, each row normalised to 1.
    pub fwd: Array2<f64>,
    /// N×K, last row all ones.
    pub bwd: Array2<f64>,
    /// Row sums of the forward recursion before normalisation.
    pub scale: Vec<f64>,
    /// ln of the chain normaliser, Σ ln c_n plus the potential shifts.
    pub loglik_q: f64,
}

pub fn forward(pot: &ChainPotentials) -> Result<ChainMessages> {
    let (k, n) = (pot.k, pot.n);
    let mut fwd = Array2::zeros((n, k));
    let mut scale = vec![0.0; n];
    let underflow = |step: usize| Error::Underflow {
        id: pot.id.clone(),
        step,
    };

    let c0: f64 = pot.init.iter().sum();
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(underflow(1));
    }
    scale[0] = c0;
    for (j, &x) in pot.init.iter().enumerate() {
        fwd[[0, j]] = x / c0;
    }

    let mut prev = vec![0.0; k];
    let mut cur = vec![0.0; k];
    for t in 1..n {
        prev.copy_from_slice(fwd.row(t - 1).as_slice().expect("row-major"));
        cur.iter_mut().for_each(|x| *x = 0.0);
        let block = pot.step(t);
        for (from, &f) in prev.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &block[from * k..(from + 1) * k];
            for (c, &w) in cur.iter_mut().zip(row) {
                *c += f * w;
            }
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(underflow(t + 1));
        }
        scale[t] = c;
        for (j, &x) in cur.iter().enumerate() {
            fwd[[t, j]] = x / c;
        }
    }

    let loglik_q = scale.iter().map(|c| c.ln()).sum::<f64>() + pot.log_shift;
    Ok(ChainMessages {
        fwd,
        bwd: Array2::ones((n, k)),
        scale,
        loglik_q,
    })
}

pub fn backward(pot: &ChainPotentials, scale: &[f64]) -> Result<Array2<f64>> {
    let (k, n) = (pot.k, pot.n);
    let mut bwd = Array2::ones((n, k));
    let mut next = vec![0.0; k];
    for t in (0..n.saturating_sub(1)).rev() {
        next.copy_from_slice(bwd.row(t + 1).as_slice().expect("row-major"));
        let block = pot.step(t + 1);
        let c = scale[t + 1];
        for from in 0..k {
            let row = &block[from * k..(from + 1) * k];
            let s: f64 = row.iter().zip(&next).map(|(w, b)| w * b).sum();
            let v = s / c;
            if !v.is_finite() {
                return Err(Error::Underflow {
                    id: pot.id.clone(),
                    step: t + 1,
                });
            }
            bwd[[t, from]] = v;
        }
    }
    Ok(bwd)
}

/// Marginal and pairwise posteriors from complete messages.
pub fn posteriors_from(pot: &ChainPotentials, msgs: &ChainMessages) -> (Array2<f64>, Array3<f64>) {
    let (k, n) = (pot.k, pot.n);
    let mut phi = &msgs.fwd * &msgs.bwd;
    for mut row in phi.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let mut joint = Array3::zeros((n.saturating_sub(1), k, k));
    for t in 0..n.saturating_sub(1) {
        let block = pot.step(t + 1);
        let mut slice = joint.index_axis_mut(ndarray::Axis(0), t);
        let out = slice.as_slice_mut().expect("row-major");
        let mut total = 0.0;
        for from in 0..k {
            let f = msgs.fwd[[t, from]];
            for to in 0..k {
                let v = f * block[from * k + to] * msgs.bwd[[t + 1, to]];
                out[from * k + to] = v;
                total += v;
            }
        }
        for x in out.iter_mut() {
            *x /= total;
        }
    }
    (phi, joint)
}

/// Forward recursion only; `bwd` is left at its all-ones initial value.
pub fn forward_pass(
    seq: &EventSequence,
    params: &ModelParams,
    trans: &Array2<f64>,
    kappa: f64,
    timing: Timing,
) -> Result<ChainMessages> {
    forward(&ChainPotentials::new(seq, params, trans, kappa, timing))
}

pub fn backward_pass(
    seq: &EventSequence,
    params: &ModelParams,
    trans: &Array2<f64>,
    kappa: f64,
    timing: Timing,
    scale: &[f64],
) -> Result<Array2<f64>> {
    backward(&ChainPotentials::new(seq, params, trans, kappa, timing), scale)
}

/// Runs the full recursion and returns messages with φ and φ̃.
pub fn smooth(
    seq: &EventSequence,
    params: &ModelParams,
    trans: &Array2<f64>,
    kappa: f64,
    timing: Timing,
) -> Result<(ChainMessages, Array2<f64>, Array3<f64>)> {
    let pot = ChainPotentials::new(seq, params, trans, kappa, timing);
    let mut msgs = forward(&pot)?;
    msgs.bwd = backward(&pot, &msgs.scale)?;
    let (phi, joint) = posteriors_from(&pot, &msgs);
    Ok((msgs, phi, joint))
}

/// Entropy of a Markov chain distribution from its marginals:
/// Σ_n H(z_n, z_n+1) − Σ_{interior n} H(z_n).
pub fn chain_entropy(phi: &Array2<f64>, phi_joint: &Array3<f64>) -> f64 {
    let plogp = |x: &f64| if *x > 0.0 { -x * x.ln() } else { 0.0 };
    let n = phi.nrows();
    if n == 1 {
        return phi.row(0).iter().map(plogp).sum();
    }
    let pair: f64 = phi_joint.iter().map(plogp).sum();
    let interior: f64 = (1..n - 1).map(|t| phi.row(t).iter().map(plogp).sum::<f64>()).sum();
    pair - interior
}
