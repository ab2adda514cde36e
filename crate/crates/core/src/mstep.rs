//! Global parameter updates that maximise Q(η | ζ).
//!
//! Everything Q needs from the variational side is first summarised into
//! [`SufficientStats`]; Q and each block update are then cheap functions of
//! those statistics and η.

use log::warn;
use ndarray::{Array1, Array2, Zip};
use rayon::prelude::*;

use crate::model::{EventSequence, ModelParams, Timing, VariationalState, PROB_FLOOR};
use crate::special::{digamma, ln_gamma, trigamma, xlogy};

/// G cells whose expected transition count falls below this keep their value.
pub const MIN_TRANSITION_MASS: f64 = 1e-8;

const R_GRAD_TOL: f64 = 1e-8;
const R_MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 50;
const A_MAX_STEPS: usize = 500;

/// Sums over examinees of every expectation Q depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub m: usize,
    /// Σ_i φ_{i,1}.
    pub first: Array1<f64>,
    /// K×V Σ_i Σ_n φ_{i,n}^{(k)} I{e_{i,n} = v}.
    pub emit: Array2<f64>,
    /// K×K Σ_i Σ_n φ̃_{i,n}.
    pub trans_mass: Array2<f64>,
    /// K×K Σ_i κ_i Σ_n φ̃_{i,n} Δt_{i,n+1}.
    pub trans_time: Array2<f64>,
    /// K×K Σ_i E_q[ln Λ_i].
    pub elog_lambda: Array2<f64>,
    /// Σ_i Σ φ̃_i ⊙ E_q[ln Λ_i].
    pub cross_elog: f64,
    /// Σ_i (Ψ(ã_i) − ln d̃_i).
    pub frailty_log: f64,
    /// Σ_i (N_i − 2)(Ψ(ã_i) − ln d̃_i).
    pub frailty_log_weighted: f64,
    /// Σ_i κ_i.
    pub kappa_sum: f64,
}

/// Per-examinee part of the statistics (everything except emissions).
#[derive(Debug, Clone)]
struct Partial {
    m: usize,
    first: Array1<f64>,
    trans_mass: Array2<f64>,
    trans_time: Array2<f64>,
    elog_lambda: Array2<f64>,
    cross_elog: f64,
    frailty_log: f64,
    frailty_log_weighted: f64,
    kappa_sum: f64,
}

impl Partial {
    fn of(seq: &EventSequence, state: &VariationalState, timing: Timing) -> Self {
        let k = state.k();
        let mut trans_mass = Array2::zeros((k, k));
        let mut trans_time = Array2::zeros((k, k));
        for (t, slice) in state.phi_joint.outer_iter().enumerate() {
            trans_mass += &slice;
            if timing.observed() {
                let dt = seq.gap(t + 1);
                Zip::from(&mut trans_time).and(&slice).for_each(|acc, &p| *acc += p * dt);
            }
        }
        trans_time *= state.kappa;
        let elog_lambda = expected_log_lambda(&state.gamma);
        let cross_elog = (&trans_mass * &elog_lambda).sum();
        let flog = digamma(state.a_tilde) - state.d_tilde.ln();
        Self {
            m: 1,
            first: state.phi.row(0).to_owned(),
            trans_mass,
            trans_time,
            elog_lambda,
            cross_elog,
            frailty_log: flog,
            frailty_log_weighted: (seq.len() as f64 - 2.0) * flog,
            kappa_sum: state.kappa,
        }
    }

    fn combine(mut self, other: Self) -> Self {
        self.m += other.m;
        self.first += &other.first;
        self.trans_mass += &other.trans_mass;
        self.trans_time += &other.trans_time;
        self.elog_lambda += &other.elog_lambda;
        self.cross_elog += other.cross_elog;
        self.frailty_log += other.frailty_log;
        self.frailty_log_weighted += other.frailty_log_weighted;
        self.kappa_sum += other.kappa_sum;
        self
    }
}

/// Ψ(γ) − Ψ(row sums of γ).
pub fn expected_log_lambda(gamma: &Array2<f64>) -> Array2<f64> {
    let mut out = gamma.mapv(digamma);
    for (mut row, g) in out.outer_iter_mut().zip(gamma.outer_iter()) {
        let psi_total = digamma(g.sum());
        row -= psi_total;
    }
    out
}

/// Reduces `items` with a balanced binary tree whose shape depends only on
/// the number of items.
pub fn tree_reduce<T>(mut items: Vec<T>, combine: &impl Fn(T, T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => items.pop(),
        n => {
            let right = items.split_off(n / 2);
            let l = tree_reduce(items, combine)?;
            let r = tree_reduce(right, combine)?;
            Some(combine(l, r))
        }
    }
}

impl SufficientStats {
    pub fn collect(
        seqs: &[EventSequence],
        states: &[VariationalState],
        v: usize,
        timing: Timing,
    ) -> Self {
        assert_eq!(seqs.len(), states.len());
        assert!(!seqs.is_empty(), "sufficient statistics need at least one examinee");
        let partials: Vec<Partial> = seqs
            .par_iter()
            .zip(states.par_iter())
            .map(|(s, q)| Partial::of(s, q, timing))
            .collect();
        let p = tree_reduce(partials, &Partial::combine).expect("non-empty");

        let k = states[0].k();
        let mut emit = Array2::zeros((k, v));
        for (seq, state) in seqs.iter().zip(states) {
            for (n, &e) in seq.events().iter().enumerate() {
                for j in 0..k {
                    emit[[j, e]] += state.phi[[n, j]];
                }
            }
        }

        Self {
            m: p.m,
            first: p.first,
            emit,
            trans_mass: p.trans_mass,
            trans_time: p.trans_time,
            elog_lambda: p.elog_lambda,
            cross_elog: p.cross_elog,
            frailty_log: p.frailty_log,
            frailty_log_weighted: p.frailty_log_weighted,
            kappa_sum: p.kappa_sum,
        }
    }

    fn m(&self) -> f64 {
        self.m as f64
    }

    pub fn q_emission(&self, b: &Array2<f64>) -> f64 {
        Zip::from(&self.emit)
            .and(b)
            .fold(0.0, |acc, &c, &p| acc + xlogy(c, p.max(PROB_FLOOR)))
    }

    pub fn q_initial(&self, p0: &Array1<f64>) -> f64 {
        self.first.iter().zip(p0).map(|(&f, &p)| xlogy(f, p)).sum()
    }

    pub fn q_gap(&self, g: &Array2<f64>) -> f64 {
        Zip::from(&self.trans_mass)
            .and(&self.trans_time)
            .and(g)
            .fold(0.0, |acc, &c, &t, &g| acc + c * g - t * g.exp())
    }

    pub fn q_frailty(&self, a: f64, d: f64) -> f64 {
        self.frailty_log_weighted + a * self.frailty_log + self.m() * (a * d.ln() - ln_gamma(a))
            - d * self.kappa_sum
    }

    /// Q restricted to one row of R, up to terms free of R.
    pub fn q_r_row(&self, row: usize, r: &[f64]) -> f64 {
        let s = self.elog_lambda.row(row);
        let total: f64 = r.iter().sum();
        r.iter().zip(s.iter()).map(|(&x, &e)| (x - 1.0) * e).sum::<f64>()
            + self.m() * (ln_gamma(total) - r.iter().map(|&x| ln_gamma(x)).sum::<f64>())
    }

    pub fn q_transition(&self, r: &Array2<f64>) -> f64 {
        self.cross_elog
            + (0..r.nrows())
                .map(|i| self.q_r_row(i, r.row(i).as_slice().expect("row-major")))
                .sum::<f64>()
    }

    /// Q(η | ζ).
    pub fn q(&self, params: &ModelParams, timing: Timing) -> f64 {
        let mut q = self.q_emission(&params.b) + self.q_initial(&params.p0) + self.q_transition(&params.r);
        if timing.observed() {
            q += self.q_gap(&params.g) + self.q_frailty(params.a, params.d);
        }
        q
    }

    /// ∂Q/∂g.
    pub fn grad_g(&self, g: &Array2<f64>) -> Array2<f64> {
        Zip::from(&self.trans_mass)
            .and(&self.trans_time)
            .and(g)
            .map_collect(|&c, &t, &g| c - t * g.exp())
    }

    /// ∂Q/∂a.
    pub fn grad_a(&self, a: f64, d: f64) -> f64 {
        self.frailty_log + self.m() * (d.ln() - digamma(a))
    }

    /// ∂Q/∂r for one row of R.
    pub fn grad_r_row(&self, row: usize, r: &[f64]) -> Vec<f64> {
        let psi_total = digamma(r.iter().sum());
        let m = self.m();
        r.iter()
            .zip(self.elog_lambda.row(row).iter())
            .map(|(&x, &e)| e + m * (psi_total - digamma(x)))
            .collect()
    }
}

/// b_{k,v} ∝ Σ φ I{e = v}, floored at ε and renormalised. A topic with no
/// posterior mass keeps its previous row.
pub fn update_b(stats: &SufficientStats, prev: &Array2<f64>) -> Array2<f64> {
    let mut b = stats.emit.clone();
    for (k, mut row) in b.outer_iter_mut().enumerate() {
        let total = row.sum();
        if !(total > 0.0) {
            warn!("topic {} received no posterior mass; keeping its emission row", k + 1);
            row.assign(&prev.row(k));
            continue;
        }
        row.mapv_inplace(|x| (x / total).max(PROB_FLOOR));
        let s = row.sum();
        row /= s;
    }
    b
}

/// g_{k',k} = ln(Σ φ̃ / Σ κ φ̃ Δt), frozen where the mass is negligible.
pub fn update_g(stats: &SufficientStats, prev: &Array2<f64>) -> Array2<f64> {
    Zip::from(&stats.trans_mass)
        .and(&stats.trans_time)
        .and(prev)
        .map_collect(|&c, &t, &old| {
            if c < MIN_TRANSITION_MASS || !(t > 0.0) {
                old
            } else {
                (c / t).ln()
            }
        })
}

/// p⁰ = Σ φ_{i,1} / m.
pub fn update_p0(stats: &SufficientStats) -> Array1<f64> {
    let mut p0 = &stats.first / stats.m();
    let s = p0.sum();
    p0 /= s;
    p0
}

/// d = m·a / Σ κ_i.
pub fn update_d(a: f64, stats: &SufficientStats) -> f64 {
    stats.m() * a / stats.kappa_sum
}

/// Gradient ascent on Q(a) with backtracking; initial step 1/m.
pub fn update_a(a_prev: f64, stats: &SufficientStats, d: f64) -> f64 {
    let m = stats.m();
    let objective = |a: f64| a * (stats.frailty_log + m * d.ln()) - m * ln_gamma(a);
    let mut a = a_prev;
    let mut fa = objective(a);
    for _ in 0..A_MAX_STEPS {
        let grad = stats.grad_a(a, d);
        if grad.abs() <= 1e-12 * m {
            break;
        }
        let mut step = 1.0 / m;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = a + step * grad;
            if cand > 0.0 {
                let fc = objective(cand);
                if fc >= fa {
                    accepted = fc > fa || cand != a;
                    a = cand;
                    fa = fc;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            if a == a_prev {
                warn!("line search for a failed; keeping a = {a_prev}");
            }
            break;
        }
    }
    a
}

/// H⁻¹g for H = m(D + c·11ᵀ), D = diag(−Ψ′(r)), c = Ψ′(Σr), via the matrix
/// inversion lemma.
pub fn newton_direction(r: &[f64], grad: &[f64], m: f64) -> Vec<f64> {
    let c = trigamma(r.iter().sum());
    let diag: Vec<f64> = r.iter().map(|&x| -trigamma(x)).collect();
    let num: f64 = grad.iter().zip(&diag).map(|(g, d)| g / d).sum();
    let den: f64 = 1.0 / c + diag.iter().map(|d| 1.0 / d).sum::<f64>();
    let c_tilde = num / den;
    grad.iter().zip(&diag).map(|(g, d)| (g - c_tilde) / (m * d)).collect()
}

fn newton_row(stats: &SufficientStats, row: usize, start: &[f64]) -> Vec<f64> {
    let m = stats.m();
    let mut r = start.to_vec();
    let mut fr = stats.q_r_row(row, &r);
    for _ in 0..R_MAX_NEWTON {
        let grad = stats.grad_r_row(row, &r);
        if grad.iter().all(|g| g.abs() < R_GRAD_TOL) {
            break;
        }
        let dir = newton_direction(&r, &grad, m);
        if dir.iter().any(|x| !x.is_finite()) {
            warn!("Newton step for row {} of R diverged; keeping previous row", row + 1);
            return start.to_vec();
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = r.iter().zip(&dir).map(|(x, s)| x - step * s).collect();
            if cand.iter().all(|&x| x > 0.0 && x.is_finite()) {
                let fc = stats.q_r_row(row, &cand);
                if fc >= fr {
                    moved = cand != r;
                    r = cand;
                    fr = fc;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    r
}

/// Newton–Raphson on each row of R.
pub fn update_r(r_prev: &Array2<f64>, stats: &SufficientStats) -> Array2<f64> {
    let mut r = r_prev.clone();
    for i in 0..r.nrows() {
        let start = r_prev.row(i).to_vec();
        let row = newton_row(stats, i, &start);
        r.row_mut(i).assign(&Array1::from(row));
    }
    r
}

/// Full M-step in the order B, G, p⁰, d, a, R.
pub fn mstep(params: &ModelParams, stats: &SufficientStats, timing: Timing) -> ModelParams {
    let b = update_b(stats, &params.b);
    let p0 = update_p0(stats);
    let (g, a, d) = if timing.observed() {
        let g = update_g(stats, &params.g);
        let d = update_d(params.a, stats);
        let a = update_a(params.a, stats, d);
        (g, a, d)
    } else {
        (params.g.clone(), params.a, params.d)
    };
    let r = update_r(&params.r, stats);
    ModelParams { b, g, p0, r, a, d }
}

/// Q(η | ζ) evaluated from per-examinee sequences and states.
pub fn qfunction(
    seqs: &[EventSequence],
    states: &[VariationalState],
    params: &ModelParams,
    timing: Timing,
) -> f64 {
    SufficientStats::collect(seqs, states, params.v(), timing).q(params, timing)
}
