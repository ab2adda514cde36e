//! The outer variational EM driver: initialisation, restarts, E/M
//! alternation, convergence and label alignment.

use log::{debug, info, warn};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estep::{init_state, run_estep};
use crate::fb::chain_entropy;
use crate::model::{EventSequence, ModelParams, Timing, VariationalState};
use crate::mstep::{mstep, SufficientStats};
use crate::seeds::{derive_seed, rng, with_pool};
use crate::special::{dirichlet_entropy, gamma_entropy};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Tolerance on |ΔQ| / |Q|.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
    pub timing: Timing,
    /// Starting point for restart 0; later restarts are random.
    pub init: Option<ModelParams>,
}

impl FitConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 1000,
            rel_tol: 1e-6,
            restarts: 20,
            seed: 0,
            threads: None,
            timing: Timing::Observed,
            init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be at least 1".into()));
        }
        if let Some(p) = &self.init {
            if p.k() != self.k {
                return Err(Error::InvalidConfig(format!(
                    "initial parameters have K = {}, expected {}",
                    p.k(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub q: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ModelParams,
    pub states: Vec<VariationalState>,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
    pub best_restart: usize,
    pub elbo: f64,
    /// Final ELBO per restart; `None` for restarts that failed.
    pub restart_elbos: Vec<Option<f64>>,
}

/// Entropy of q_i: Gamma (when timing is modelled), Dirichlet rows and the chain.
pub fn entropy(state: &VariationalState, timing: Timing) -> f64 {
    let mut h = chain_entropy(&state.phi, &state.phi_joint);
    for row in state.gamma.outer_iter() {
        h += dirichlet_entropy(row.as_slice().expect("row-major"));
    }
    if timing.observed() {
        h += gamma_entropy(state.a_tilde, state.d_tilde);
    }
    h
}

fn total_entropy(states: &[VariationalState], timing: Timing) -> f64 {
    let parts: Vec<f64> = states.par_iter().map(|s| entropy(s, timing)).collect();
    crate::mstep::tree_reduce(parts, &|a, b| a + b).unwrap_or(0.0)
}

/// Evidence lower bound: Q plus the entropy of every q_i.
pub fn elbo(
    seqs: &[EventSequence],
    states: &[VariationalState],
    params: &ModelParams,
    timing: Timing,
) -> f64 {
    let stats = SufficientStats::collect(seqs, states, params.v(), timing);
    stats.q(params, timing) + total_entropy(states, timing)
}

/// Largest event id + 1 over the corpus.
pub fn vocabulary_size(seqs: &[EventSequence]) -> usize {
    seqs.iter()
        .flat_map(|s| s.events().iter().copied())
        .max()
        .map_or(0, |v| v + 1)
}

/// Shift added to the diagonal of the starting G and spread negatively over
/// each row's other entries, so the row mean stays at the global log rate.
pub const PERSISTENCE_TILT: f64 = 1.0;

/// Random starting point: B rows mix a Dirichlet(1) draw with the empirical
/// event frequencies; G rows average the log of the global event rate, with
/// same-topic transitions tilted faster.
pub fn init_params(seqs: &[EventSequence], k: usize, v: usize, seed: u64) -> ModelParams {
    let mut freq = Array1::<f64>::zeros(v);
    for s in seqs {
        for &e in s.events() {
            freq[e] += 1.0;
        }
    }
    let total = freq.sum();
    if total > 0.0 {
        freq /= total;
    } else {
        freq.fill(1.0 / v as f64);
    }

    let mut r = rng(seed);
    let mut b = Array2::zeros((k, v));
    for mut row in b.outer_iter_mut() {
        let draw: Vec<f64> = (0..v).map(|_| Exp1.sample(&mut r)).collect();
        let s: f64 = draw.iter().sum();
        for (j, x) in row.iter_mut().enumerate() {
            *x = 0.5 * draw[j] / s + 0.5 * freq[j];
        }
        let s = row.sum();
        row /= s;
    }

    let transitions: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let elapsed: f64 = seqs
        .iter()
        .map(|s| if s.len() > 1 { s.times()[s.len() - 1] - s.times()[0] } else { 0.0 })
        .sum();
    let g0 = if transitions > 0 && elapsed > 0.0 {
        (transitions as f64 / elapsed).ln()
    } else {
        0.0
    };

    let off = if k > 1 { PERSISTENCE_TILT / (k - 1) as f64 } else { 0.0 };
    let g = Array2::from_shape_fn((k, k), |(i, j)| {
        if k == 1 {
            g0
        } else if i == j {
            g0 + PERSISTENCE_TILT
        } else {
            g0 - off
        }
    });

    ModelParams {
        b,
        g,
        p0: Array1::from_elem(k, 1.0 / k as f64),
        r: Array2::ones((k, k)),
        a: 1.0,
        d: 1.0,
    }
}

struct RunOutcome {
    params: ModelParams,
    states: Vec<VariationalState>,
    trace: Vec<TraceEntry>,
    converged: bool,
}

fn estep_all(
    seqs: &[EventSequence],
    params: &ModelParams,
    states: &[VariationalState],
    timing: Timing,
) -> Result<Vec<VariationalState>> {
    seqs.par_iter()
        .zip(states.par_iter())
        .map(|(s, q)| run_estep(s, params, q, timing))
        .collect()
}

fn run_once(
    seqs: &[EventSequence],
    init: ModelParams,
    config: &FitConfig,
) -> Result<RunOutcome> {
    let timing = config.timing;
    let mut params = init;
    let mut states: Vec<VariationalState> = seqs.iter().map(|s| init_state(s, &params)).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_q: Option<f64> = None;

    for iteration in 1..=config.max_iters {
        states = estep_all(seqs, &params, &states, timing)?;
        let stats = SufficientStats::collect(seqs, &states, params.v(), timing);
        params = mstep(&params, &stats, timing);
        let q = stats.q(&params, timing);
        let elbo = q + total_entropy(&states, timing);
        if !q.is_finite() || !elbo.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        trace.push(TraceEntry { iteration, q, elbo });
        debug!("iteration {iteration}: Q = {q:.10e}, ELBO = {elbo:.10e}");
        if let Some(p) = prev_q {
            if (q - p).abs() <= config.rel_tol * p.abs() {
                converged = true;
                break;
            }
        }
        prev_q = Some(q);
    }
    Ok(RunOutcome {
        params,
        states,
        trace,
        converged,
    })
}

/// Fits the model, keeping the restart with the highest final ELBO.
pub fn fit(seqs: &[EventSequence], config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(Error::InvalidConfig("no sequences to fit".into()));
    }
    let v = match &config.init {
        Some(p) => p.v(),
        None => vocabulary_size(seqs),
    };
    for s in seqs {
        s.check_vocabulary(v)?;
    }

    with_pool(config.threads, || {
        let mut best: Option<(usize, RunOutcome, f64)> = None;
        let mut restart_elbos = Vec::with_capacity(config.restarts);
        for restart in 0..config.restarts {
            let init = match (&config.init, restart) {
                (Some(p), 0) => p.clone(),
                _ => init_params(seqs, config.k, v, derive_seed(config.seed, restart as u64)),
            };
            match run_once(seqs, init, config) {
                Ok(out) => {
                    let e = out.trace.last().map_or(f64::NEG_INFINITY, |t| t.elbo);
                    info!(
                        "restart {}: {} iterations, ELBO = {e:.6e}",
                        restart + 1,
                        out.trace.len()
                    );
                    restart_elbos.push(Some(e));
                    if best.as_ref().is_none_or(|(_, _, be)| e > *be) {
                        best = Some((restart, out, e));
                    }
                }
                Err(err) => {
                    warn!("restart {} failed: {err}", restart + 1);
                    restart_elbos.push(None);
                }
            }
        }
        let (best_restart, mut out, elbo) = best.ok_or(Error::AllRestartsFailed(config.restarts))?;
        if config.timing.observed() {
            unit_frailty_mean(&mut out.params, &mut out.states);
        }
        Ok(FitReport {
            params: out.params,
            states: out.states,
            iterations: out.trace.len(),
            trace: out.trace,
            converged: out.converged,
            best_restart,
            elbo,
            restart_elbos,
        })
    })
}

/// Moves (G, d) along the direction that leaves the likelihood unchanged,
/// ξ → cξ with g → g − ln c, until E[ξ] = a/d = 1. States are rescaled to
/// match, so the ELBO is unchanged.
pub fn unit_frailty_mean(params: &mut ModelParams, states: &mut [VariationalState]) {
    let c = params.d / params.a;
    if !(c.is_finite() && c > 0.0) || c == 1.0 {
        return;
    }
    params.g.mapv_inplace(|g| g - c.ln());
    params.d = params.a;
    for s in states {
        s.kappa *= c;
        s.d_tilde /= c;
    }
}

/// Total-variation distance between two probability rows.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Minimum-cost assignment for a square cost matrix. Returns `col[i]`, the
/// column matched to row `i`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    // potentials and matching use 1-based sentinels at index 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Permutation `perm` with `fitted.permuted(&perm)` best matching
/// `reference`, by total variation between B rows.
pub fn align_labels(fitted: &ModelParams, reference: &ModelParams) -> Vec<usize> {
    let k = reference.k();
    let cost = Array2::from_shape_fn((k, k), |(i, j)| {
        tv_distance(
            reference.b.row(i).as_slice().expect("row-major"),
            fitted.b.row(j).as_slice().expect("row-major"),
        )
    });
    hungarian(&cost)
}

/// Relabels a report's parameters and states with `perm`.
pub fn permute_report(report: &FitReport, perm: &[usize]) -> FitReport {
    FitReport {
        params: report.params.permuted(perm),
        states: report.states.iter().map(|s| s.permuted(perm)).collect(),
        ..report.clone()
    }
}

/// Draws a random permutation of 0..k.
pub fn random_permutation(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
