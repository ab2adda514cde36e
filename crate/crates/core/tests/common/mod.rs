//! Independent oracles shared by the integration and acceptance tests. Each
//! `check_*` returns a one-line summary on success and the first violation
//! on failure.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use proctopic::estep::{init_state, run_estep};
use proctopic::fb::smooth;
use proctopic::fit::{elbo, fit, FitConfig};
use proctopic::mstep::{mstep, newton_direction, SufficientStats};
use proctopic::{EventSequence, ModelParams, Timing, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

pub type Check = Result<String, String>;

pub fn simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

pub fn random_params(rng: &mut impl Rng, k: usize, v: usize) -> ModelParams {
    let b: Vec<f64> = (0..k).flat_map(|_| simplex(rng, v)).collect();
    ModelParams::new(
        Array2::from_shape_vec((k, v), b).unwrap(),
        Array2::from_shape_fn((k, k), |_| rng.random_range(-1.0..1.0)),
        Array1::from(simplex(rng, k)),
        Array2::from_shape_fn((k, k), |_| rng.random_range(0.5..3.0)),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
    )
    .unwrap()
}

pub fn random_sequence(rng: &mut impl Rng, id: &str, n: usize, v: usize) -> EventSequence {
    let mut t = 0.0;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.random_range(0.1..2.0);
        times.push(t);
    }
    let events = (0..n).map(|_| rng.random_range(0..v)).collect();
    EventSequence::new(id, events, times).unwrap()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every path in {0..k}^n.
pub fn all_paths(k: usize, n: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut code| {
            let mut z = vec![0; n];
            for slot in z.iter_mut().rev() {
                *slot = code % k;
                code /= k;
            }
            z
        })
        .collect()
}

/// ln of the unnormalised chain weight of one path under fixed transition
/// probabilities and frailty mean.
pub fn path_log_weight(
    seq: &EventSequence,
    p: &ModelParams,
    trans: &Array2<f64>,
    kappa: f64,
    timing: Timing,
    z: &[usize],
) -> f64 {
    let e = seq.events();
    let t = seq.times();
    let mut w = p.p0[z[0]].ln() + p.b[[z[0], e[0]]].ln();
    for n in 1..z.len() {
        let (i, j) = (z[n - 1], z[n]);
        w += trans[[i, j]].ln() + p.b[[j, e[n]]].ln();
        if timing == Timing::Observed {
            let g = p.g[[i, j]];
            w += g - kappa * g.exp() * (t[n] - t[n - 1]);
        }
    }
    w
}

/// φ, φ̃ and the chain log normaliser from K^N path enumeration match the
/// forward-backward engine.
pub fn check_enumeration(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=3);
        let v = rng.random_range(2..=4);
        let n = rng.random_range(1..=8);
        let p = random_params(&mut rng, k, v);
        let seq = random_sequence(&mut rng, "x", n, v);
        let rows: Vec<f64> = (0..k).flat_map(|_| simplex(&mut rng, k)).collect();
        let trans = Array2::from_shape_vec((k, k), rows).unwrap();
        let kappa = rng.random_range(0.2..3.0);
        let timing = if seed % 4 == 3 { Timing::Ignored } else { Timing::Observed };

        let paths = all_paths(k, n);
        let logw: Vec<f64> = paths
            .iter()
            .map(|z| path_log_weight(&seq, &p, &trans, kappa, timing, z))
            .collect();
        let log_z = log_sum_exp(&logw);
        let mut phi = Array2::<f64>::zeros((n, k));
        let mut joint = Array3::<f64>::zeros((n.saturating_sub(1), k, k));
        for (z, lw) in paths.iter().zip(&logw) {
            let w = (lw - log_z).exp();
            for (step, &zk) in z.iter().enumerate() {
                phi[[step, zk]] += w;
            }
            for step in 1..n {
                joint[[step - 1, z[step - 1], z[step]]] += w;
            }
        }

        let (msgs, fb_phi, fb_joint) = smooth(&seq, &p, &trans, kappa, timing).map_err(|e| e.to_string())?;
        let dl = (msgs.loglik_q - log_z).abs();
        if dl > 1e-10 * log_z.abs().max(1.0) {
            return Err(format!("seed {seed}: loglik {} vs enumeration {log_z}", msgs.loglik_q));
        }
        for (a, b) in fb_phi.iter().zip(phi.iter()).chain(fb_joint.iter().zip(joint.iter())) {
            let d = (a - b).abs();
            if d > 1e-10 {
                return Err(format!("seed {seed}: posterior {a} vs enumeration {b}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("{instances} instances, max posterior deviation {worst:.1e}"))
}

/// Exact log marginal likelihood of one sequence: sum over topic paths of
/// the Dirichlet-multinomial and Gamma-frailty integrals.
pub fn log_marginal(seq: &EventSequence, p: &ModelParams, timing: Timing) -> f64 {
    let k = p.k();
    let n = seq.len();
    let e = seq.events();
    let t = seq.times();
    let ln_beta = |alpha: &[f64]| alpha.iter().map(|&x| ln_gamma(x)).sum::<f64>() - ln_gamma(alpha.iter().sum());
    let terms: Vec<f64> = all_paths(k, n)
        .iter()
        .map(|z| {
            let mut w = p.p0[z[0]].ln();
            for step in 0..n {
                w += p.b[[z[step], e[step]]].ln();
            }
            let mut counts = Array2::<f64>::zeros((k, k));
            let mut exposure = 0.0;
            let mut log_rate = 0.0;
            for step in 1..n {
                let (i, j) = (z[step - 1], z[step]);
                counts[[i, j]] += 1.0;
                log_rate += p.g[[i, j]];
                exposure += p.g[[i, j]].exp() * (t[step] - t[step - 1]);
            }
            for i in 0..k {
                let r: Vec<f64> = p.r.row(i).to_vec();
                let post: Vec<f64> = r.iter().zip(counts.row(i)).map(|(a, c)| a + c).collect();
                w += ln_beta(&post) - ln_beta(&r);
            }
            if timing == Timing::Observed {
                let shape = p.a + (n - 1) as f64;
                w += log_rate + p.a * p.d.ln() - ln_gamma(p.a) + ln_gamma(shape) - shape * (p.d + exposure).ln();
            }
            w
        })
        .collect();
    log_sum_exp(&terms)
}

pub fn sweep(seq: &EventSequence, p: &ModelParams, timing: Timing, sweeps: usize) -> VariationalState {
    let mut q = init_state(seq, p);
    for _ in 0..sweeps {
        q = run_estep(seq, p, &q, timing).unwrap();
    }
    q
}

fn single_elbo(seq: &EventSequence, q: &VariationalState, p: &ModelParams, timing: Timing) -> f64 {
    elbo(std::slice::from_ref(seq), std::slice::from_ref(q), p, timing)
}

/// ELBO ≤ exact log marginal on N ≤ 6, K = 2 instances after 1, 3 and 20
/// sweeps.
pub fn check_elbo_bound(instances: u64) -> Check {
    let mut min_gap = f64::INFINITY;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=6);
        let p = random_params(&mut rng, 2, 3);
        let seq = random_sequence(&mut rng, "x", n, 3);
        let timing = if seed % 5 == 4 { Timing::Ignored } else { Timing::Observed };
        let exact = log_marginal(&seq, &p, timing);
        for sweeps in [1, 3, 20] {
            let bound = single_elbo(&seq, &sweep(&seq, &p, timing, sweeps), &p, timing);
            if bound > exact + 1e-6 {
                return Err(format!("seed {seed}, {sweeps} sweeps: ELBO {bound} > log marginal {exact}"));
            }
            min_gap = min_gap.min(exact - bound);
        }
    }
    Ok(format!("{instances} instances, smallest slack {min_gap:.2e}"))
}

/// With one topic the variational family contains the exact posterior, so
/// the ELBO after one sweep equals the log marginal.
pub fn check_single_topic_exact(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n = rng.random_range(1..=12);
        let p = random_params(&mut rng, 1, 4);
        let seq = random_sequence(&mut rng, "x", n, 4);
        let bound = single_elbo(&seq, &sweep(&seq, &p, Timing::Observed, 1), &p, Timing::Observed);
        let exact = log_marginal(&seq, &p, Timing::Observed);
        let d = (bound - exact).abs();
        if d > 1e-8 {
            return Err(format!("seed {seed}: ELBO {bound} vs exact {exact}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("{instances} instances, max |ELBO − exact| {worst:.1e}"))
}

pub fn random_stats(seed: u64, k: usize) -> (SufficientStats, ModelParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = 4;
    let p = random_params(&mut rng, k, v);
    let seqs: Vec<EventSequence> = (0..6)
        .map(|i| {
            let n = rng.random_range(2..=10);
            random_sequence(&mut rng, &i.to_string(), n, v)
        })
        .collect();
    let states: Vec<VariationalState> = seqs.iter().map(|s| sweep(s, &p, Timing::Observed, 3)).collect();
    (SufficientStats::collect(&seqs, &states, v, Timing::Observed), p)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Analytic ∂Q/∂G, ∂Q/∂a and ∂Q/∂R against central differences of Q.
pub fn check_gradients(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let k = 1 + (seed % 3) as usize;
        let (stats, p) = random_stats(3000 + seed, k);
        let q = |params: &ModelParams| stats.q(params, Timing::Observed);
        let mut record = |what: String, analytic: f64, numeric: f64| -> Result<(), String> {
            let e = rel_err(analytic, numeric);
            worst = worst.max(e);
            if e > 1e-6 {
                Err(format!("seed {seed} {what}: analytic {analytic} vs numeric {numeric}"))
            } else {
                Ok(())
            }
        };

        let grad_g = stats.grad_g(&p.g);
        for i in 0..k {
            for j in 0..k {
                let num = central_diff(
                    |x| {
                        let mut pp = p.clone();
                        pp.g[[i, j]] = x;
                        q(&pp)
                    },
                    p.g[[i, j]],
                );
                record(format!("g[{i},{j}]"), grad_g[[i, j]], num)?;
            }
        }
        let num_a = central_diff(
            |x| {
                let mut pp = p.clone();
                pp.a = x;
                q(&pp)
            },
            p.a,
        );
        record("a".into(), stats.grad_a(p.a, p.d), num_a)?;
        for i in 0..k {
            let row = p.r.row(i).to_vec();
            let grad = stats.grad_r_row(i, &row);
            for (j, &gj) in grad.iter().enumerate() {
                let num = central_diff(
                    |x| {
                        let mut pp = p.clone();
                        pp.r[[i, j]] = x;
                        q(&pp)
                    },
                    row[j],
                );
                record(format!("r[{i},{j}]"), gj, num)?;
            }
        }
    }
    Ok(format!("{instances} instances, max relative error {worst:.1e}"))
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[[x, col]].abs().total_cmp(&a[[y, col]].abs())).unwrap();
        if piv != col {
            for j in 0..n {
                a.swap([col, j], [piv, j]);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for j in col..n {
                a[[row, j]] -= f * a[[col, j]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| a[[row, j]] * x[j]).sum();
        x[row] = (b[row] - s) / a[[row, row]];
    }
    x
}

/// The structured Newton direction for R agrees with a dense solve of the
/// Hessian m(ψ'(Σr)·11ᵀ − diag ψ'(r)), and with a finite-difference Hessian.
pub fn check_newton_solve(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let k = rng.random_range(1..=8);
        let m = rng.random_range(1..=500) as f64;
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..50.0)).collect();
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let total: f64 = r.iter().sum();
        let tri = series_trigamma;
        let hess = Array2::from_shape_fn((k, k), |(i, j)| {
            m * (tri(total) - if i == j { tri(r[i]) } else { 0.0 })
        });
        let dense = dense_solve(hess, g.clone());
        let fast = newton_direction(&r, &g, m);
        for (a, b) in fast.iter().zip(&dense) {
            let e = (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(e);
            if e > 1e-10 {
                return Err(format!("seed {seed} (K = {k}): {a} vs dense {b}"));
            }
        }
    }
    for seed in 0..instances.min(30) {
        let k = 2 + (seed % 3) as usize;
        let (stats, p) = random_stats(4000 + seed, k);
        for i in 0..k {
            let row = p.r.row(i).to_vec();
            let grad = stats.grad_r_row(i, &row);
            let mut hess = Array2::<f64>::zeros((k, k));
            for j in 0..k {
                let h = 1e-5 * row[j].max(1.0);
                let (mut up, mut dn) = (row.clone(), row.clone());
                up[j] += h;
                dn[j] -= h;
                let (gu, gd) = (stats.grad_r_row(i, &up), stats.grad_r_row(i, &dn));
                for l in 0..k {
                    hess[[l, j]] = (gu[l] - gd[l]) / (2.0 * h);
                }
            }
            let dir = newton_direction(&row, &grad, stats.m as f64);
            for l in 0..k {
                let hd: f64 = (0..k).map(|j| hess[[l, j]] * dir[j]).sum();
                if rel_err(hd, grad[l]) > 1e-6 {
                    return Err(format!("seed {seed} row {i}: H·d {hd} vs gradient {}", grad[l]));
                }
            }
        }
    }
    Ok(format!("{instances} systems with K ≤ 8, max relative deviation {worst:.1e}"))
}

/// Trigamma from the asymptotic series after upward recurrence; independent
/// of the library's implementation.
pub fn series_trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = x * x;
    acc + 1.0 / x + 1.0 / (2.0 * x2) + 1.0 / (6.0 * x2 * x) - 1.0 / (30.0 * x2 * x2 * x)
        + 1.0 / (42.0 * x2 * x2 * x2 * x)
        - 1.0 / (30.0 * x2 * x2 * x2 * x2 * x)
}

/// Q never falls along a fit's trace. The ELBO trace is checked on the
/// same fits and reported alongside.
pub fn check_q_trace(instances: u64) -> Check {
    let mut steps = 0;
    let mut q_falls = Vec::new();
    let mut elbo_falls = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let k = rng.random_range(2..=3);
        let v = 4;
        let truth = random_params(&mut rng, k, v);
        let seqs: Vec<EventSequence> = (0..8)
            .map(|i| {
                let n = rng.random_range(3..=15);
                random_sequence(&mut rng, &i.to_string(), n, v)
            })
            .collect();
        let mut config = FitConfig::new(k);
        config.restarts = 1;
        config.max_iters = 40;
        config.seed = seed;
        config.threads = Some(1);
        if seed % 2 == 0 {
            config.init = Some(truth);
        }
        if seed % 3 == 2 {
            config.timing = Timing::Ignored;
        }
        let report = fit(&seqs, &config).map_err(|e| e.to_string())?;
        for w in report.trace.windows(2) {
            steps += 1;
            if w[1].q < w[0].q - 1e-8 {
                q_falls.push(format!("seed {seed} iteration {}: {:.6} -> {:.6}", w[1].iteration, w[0].q, w[1].q));
            }
            if w[1].elbo < w[0].elbo - 1e-8 {
                elbo_falls += 1;
            }
        }
    }
    let elbo_note = format!("ELBO fell in {elbo_falls} of {steps} steps");
    if q_falls.is_empty() {
        Ok(format!("{instances} fits, {steps} steps, Q never fell; {elbo_note}"))
    } else {
        Err(format!("Q fell in {} of {steps} steps ({}); {elbo_note}", q_falls.len(), q_falls.join(", ")))
    }
}

/// Each M-step block, applied alone, does not lower Q.
pub fn check_block_ascent(instances: u64) -> Check {
    for seed in 0..instances {
        let k = 2 + (seed % 2) as usize;
        let (stats, p) = random_stats(6000 + seed, k);
        let full = mstep(&p, &stats, Timing::Observed);
        let q = |params: &ModelParams| stats.q(params, Timing::Observed);
        let base = q(&p);
        let mut blocks: Vec<(&str, ModelParams)> = Vec::new();
        let mut c = p.clone();
        c.b = full.b.clone();
        blocks.push(("B", c));
        let mut c = p.clone();
        c.g = full.g.clone();
        blocks.push(("G", c));
        let mut c = p.clone();
        c.p0 = full.p0.clone();
        blocks.push(("p0", c));
        let mut c = p.clone();
        c.r = full.r.clone();
        blocks.push(("R", c));
        let mut c = p.clone();
        c.d = full.d;
        blocks.push(("d", c.clone()));
        c.a = full.a;
        blocks.push(("a after d", c));
        blocks.push(("all", full.clone()));
        for (name, cand) in blocks {
            if q(&cand) < base - 1e-9 {
                return Err(format!("seed {seed}: block {name} lowered Q from {base} to {}", q(&cand)));
            }
        }
    }
    Ok(format!("{instances} instances, every block non-decreasing"))
}
