//! Post-fit analytics: clustering of examinees on their personal transition
//! profiles, membership consistency of emission matrices and parametric
//! bootstrap standard errors.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{align_labels, fit, FitConfig};
use crate::model::{EventSequence, ModelParams, VariationalState};
use crate::seeds::{derive_seed, rng, with_pool};
use crate::simulate::{simulate_with_templates, StopRule};

const LLOYD_MAX_ITERS: usize = 300;

/// Row i: the rows of γ_i, each divided by its sum, concatenated.
pub fn norm_gamma_features(states: &[VariationalState]) -> Array2<f64> {
    features_from_gammas(states.iter().map(|s| &s.gamma))
}

/// Concatenated row-normalised rows of each K×K matrix.
pub fn features_from_gammas<'a>(gammas: impl ExactSizeIterator<Item = &'a Array2<f64>>) -> Array2<f64> {
    let m = gammas.len();
    let mut out = Array2::zeros((0, 0));
    for (i, g) in gammas.enumerate() {
        let k = g.nrows();
        if i == 0 {
            out = Array2::zeros((m, k * k));
        }
        for (r, row) in g.outer_iter().enumerate() {
            let total = row.sum();
            for (j, &x) in row.iter().enumerate() {
                out[[i, r * k + j]] = x / total;
            }
        }
    }
    out
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// 0-based cluster per row.
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    /// Objective after every Lloyd iteration of the chosen restart.
    pub history: Vec<f64>,
}

fn plus_plus(x: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.outer_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, p) in x.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Array2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    x.outer_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.outer_iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(x: &Array2<f64>, k: usize, seed: u64) -> KMeansResult {
    let mut r = rng(seed);
    let mut centers = plus_plus(x, k, &mut r);
    let (mut labels, mut dist) = assign(x, &centers);
    let mut history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (p, &c) in x.outer_iter().zip(&labels) {
            let mut s = sums.row_mut(c);
            s += &p;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // reseed an empty cluster at the point farthest from its center
                let far = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i);
                centers.row_mut(c).assign(&x.row(far));
                dist[far] = 0.0;
            }
        }
        let (new_labels, new_dist) = assign(x, &centers);
        history.push(new_dist.iter().sum());
        let done = new_labels == labels;
        labels = new_labels;
        dist = new_dist;
        if done {
            break;
        }
    }
    KMeansResult {
        inertia: dist.iter().sum(),
        assignments: labels,
        centers,
        history,
    }
}

/// k-means++ seeding and Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans(features: &Array2<f64>, n_clusters: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if n_clusters == 0 {
        return Err(Error::InvalidConfig("n_clusters must be at least 1".into()));
    }
    if features.nrows() < n_clusters {
        return Err(Error::InvalidConfig(format!(
            "{} points cannot form {n_clusters} clusters",
            features.nrows()
        )));
    }
    let runs: Vec<KMeansResult> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(features, n_clusters, derive_seed(seed, r as u64)))
        .collect();
    let mut best = None::<KMeansResult>;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean silhouette width; points in singleton clusters score 0.
pub fn silhouette(features: &Array2<f64>, assignments: &[usize]) -> f64 {
    let n = features.nrows();
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if n == 0 || k < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let p = features.row(i);
            for (j, q) in features.outer_iter().enumerate() {
                if j != i {
                    sums[assignments[j]] += sq_dist(p, q).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    scores.iter().sum::<f64>() / n as f64
}

/// Silhouette of the k-means solution for each cluster count in `range`.
pub fn silhouette_range(
    features: &Array2<f64>,
    range: std::ops::RangeInclusive<usize>,
    seed: u64,
    restarts: usize,
) -> Result<Vec<(usize, f64)>> {
    range
        .filter(|&c| c <= features.nrows())
        .map(|c| {
            let km = kmeans(features, c, seed, restarts)?;
            Ok((c, silhouette(features, &km.assignments)))
        })
        .collect()
}

/// Fraction of cells whose membership (value ≥ cutoff) agrees.
pub fn cr_index(b_true: &Array2<f64>, b_hat: &Array2<f64>, cutoff: f64) -> Result<f64> {
    if b_true.dim() != b_hat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            b_true.dim(),
            b_hat.dim()
        )));
    }
    if b_true.is_empty() {
        return Err(Error::ShapeMismatch("empty matrices".into()));
    }
    let agree = b_true
        .iter()
        .zip(b_hat.iter())
        .filter(|(&t, &h)| (t >= cutoff) == (h >= cutoff))
        .count();
    Ok(agree as f64 / b_true.len() as f64)
}

/// One stop rule per observed examinee, reproducing its sequence length.
pub fn length_templates(seqs: &[EventSequence]) -> Vec<StopRule> {
    seqs.iter().map(|s| StopRule::max_events(s.len())).collect()
}

/// Elementwise standard errors of every global parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSe {
    pub b: Array2<f64>,
    pub g: Array2<f64>,
    pub p0: Array1<f64>,
    pub norm_r: Array2<f64>,
    pub a: f64,
    pub d: f64,
    pub succeeded: usize,
    pub failed: usize,
}

fn sample_sd(values: &[Array1<f64>]) -> Array1<f64> {
    let n = values.len() as f64;
    let stacked = ndarray::stack(Axis(0), &values.iter().map(|v| v.view()).collect::<Vec<_>>())
        .expect("equal lengths");
    let mean = stacked.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::zeros(mean.len());
    for row in stacked.outer_iter() {
        var += &(&row - &mean).mapv(|x| x * x);
    }
    (var / (n - 1.0)).mapv(f64::sqrt)
}

/// Parametric bootstrap: simulate `n_boot` corpora from `params` with one
/// template per examinee, refit each, align labels to `params`, and return
/// the sample standard deviation of each estimate.
pub fn bootstrap_se(
    params: &ModelParams,
    config: &FitConfig,
    n_boot: usize,
    templates: &[StopRule],
    seed: u64,
) -> Result<BootstrapSe> {
    if n_boot < 2 {
        return Err(Error::InvalidConfig("n_boot must be at least 2".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidConfig("bootstrap needs at least one examinee template".into()));
    }
    let mut inner = config.clone();
    inner.threads = None;
    let fits: Vec<Option<ModelParams>> = with_pool(config.threads, || {
        (0..n_boot)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = derive_seed(seed, rep as u64);
                let corpus = match simulate_with_templates(params, templates, rep_seed) {
                    Ok(c) => c,
                    Err(e) => {
                        warn!("bootstrap replicate {} simulation failed: {e}", rep + 1);
                        return None;
                    }
                };
                let seqs: Vec<EventSequence> = corpus.into_iter().map(|(s, _)| s).collect();
                let mut cfg = inner.clone();
                cfg.seed = derive_seed(rep_seed, u64::MAX);
                match fit(&seqs, &cfg) {
                    Ok(report) => {
                        let perm = align_labels(&report.params, params);
                        Some(report.params.permuted(&perm))
                    }
                    Err(e) => {
                        warn!("bootstrap replicate {} fit failed: {e}", rep + 1);
                        None
                    }
                }
            })
            .collect()
    });
    let ok: Vec<ModelParams> = fits.into_iter().flatten().collect();
    let succeeded = ok.len();
    if succeeded < 2 || (succeeded as f64) < 0.8 * n_boot as f64 {
        return Err(Error::BootstrapUnstable {
            succeeded,
            total: n_boot,
        });
    }

    let flat = |f: &dyn Fn(&ModelParams) -> Array1<f64>| -> Array1<f64> {
        sample_sd(&ok.iter().map(f).collect::<Vec<_>>())
    };
    let k = params.k();
    let v = params.v();
    let b = flat(&|p| p.b.iter().copied().collect()).into_shape_with_order((k, v)).expect("K×V");
    let g = flat(&|p| p.g.iter().copied().collect()).into_shape_with_order((k, k)).expect("K×K");
    let norm_r = flat(&|p| p.norm_r().iter().copied().collect())
        .into_shape_with_order((k, k))
        .expect("K×K");
    let p0 = flat(&|p| p.p0.clone());
    let ad = flat(&|p| Array1::from(vec![p.a, p.d]));
    Ok(BootstrapSe {
        b,
        g,
        p0,
        norm_r,
        a: ad[0],
        d: ad[1],
        succeeded,
        failed: n_boot - succeeded,
    })
}
