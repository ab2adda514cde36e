//! Synthetic examinee processes drawn from the generative model, plus the
//! designs of the three simulation studies.

use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, Gamma};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{EventSequence, LatentPath, ModelParams};
use crate::params_io;
use crate::seeds::{derive_seed, rng};

/// Hard cap on sequence length when no event limit is given.
pub const RUNAWAY_LIMIT: usize = 1_000_000;

const STUDY2_TOML: &str = include_str!("../presets/study2.toml");
const STUDY3_TOML: &str = include_str!("../presets/study3.toml");

/// When to stop a simulated process. The sequence ends as soon as any
/// configured condition fires; the event that fires it is kept.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StopRule {
    /// 0-based event id that ends the process.
    pub terminal_event: Option<usize>,
    pub max_events: Option<usize>,
    pub max_time: Option<f64>,
}

impl StopRule {
    pub fn terminal_event(v: usize) -> Self {
        Self {
            terminal_event: Some(v),
            ..Self::default()
        }
    }

    pub fn max_events(n: usize) -> Self {
        Self {
            max_events: Some(n),
            ..Self::default()
        }
    }

    pub fn max_time(t: f64) -> Self {
        Self {
            max_time: Some(t),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.terminal_event.is_none() && self.max_events.is_none() && self.max_time.is_none() {
            return Err(Error::InvalidConfig("stop rule has no condition".into()));
        }
        if self.max_events == Some(0) {
            return Err(Error::InvalidConfig("max_events must be at least 1".into()));
        }
        if self.max_time.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::InvalidConfig("max_time must be positive".into()));
        }
        Ok(())
    }

    fn fires(&self, n: usize, event: usize, time: f64) -> bool {
        self.terminal_event == Some(event)
            || self.max_events.is_some_and(|m| n >= m)
            || self.max_time.is_some_and(|t| time >= t)
    }
}

fn categorical(weights: impl IntoIterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| Error::InvalidConfig(format!("bad categorical weights: {e}")))
}

fn dirichlet(alpha: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut draw: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = draw.iter().sum();
    if s > 0.0 {
        draw.iter_mut().for_each(|x| *x /= s);
    } else {
        // every component underflowed; fall back to the largest concentration
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        draw.iter_mut().enumerate().for_each(|(i, x)| *x = f64::from(u8::from(i == best)));
    }
    draw
}

/// Draws one examinee from the full generative model.
///
/// The first event time is drawn like any later gap, using the diagonal
/// rate of the starting topic.
pub fn sample_examinee(
    params: &ModelParams,
    stop: &StopRule,
    id: &str,
    seed: u64,
) -> Result<(EventSequence, LatentPath)> {
    params.validate()?;
    stop.validate()?;
    let k = params.k();
    let mut r = rng(seed);

    let xi = Gamma::new(params.a, 1.0 / params.d)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .sample(&mut r);
    let mut lambda = Array2::zeros((k, k));
    for i in 0..k {
        let row = dirichlet(params.r.row(i).as_slice().expect("row-major"), &mut r);
        lambda.row_mut(i).assign(&Array1::from(row));
    }

    let initial = categorical(params.p0.iter().copied())?;
    let transitions = (0..k)
        .map(|i| categorical(lambda.row(i).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    let emissions = (0..k)
        .map(|i| categorical(params.b.row(i).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    let rates = params.g.mapv(|g| xi * g.exp());

    let mut topics = Vec::new();
    let mut events = Vec::new();
    let mut times = Vec::new();
    let mut z = initial.sample(&mut r);
    let mut t = 0.0;
    let mut prev = z;
    loop {
        let gap = Exp::new(rates[[prev, z]])
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(&mut r);
        let next_t = t + gap;
        t = if next_t > t { next_t } else { t.next_up() };
        let e = emissions[z].sample(&mut r);
        topics.push(z);
        events.push(e);
        times.push(t);
        if stop.fires(events.len(), e, t) {
            break;
        }
        if events.len() >= RUNAWAY_LIMIT {
            return Err(Error::RunawaySequence(RUNAWAY_LIMIT));
        }
        prev = z;
        z = transitions[z].sample(&mut r);
    }

    let seq = EventSequence::new(id, events, times)?;
    Ok((seq, LatentPath { topics, lambda, xi }))
}

/// Simulates `m` examinees with ids "1".."m" and per-examinee derived seeds.
pub fn simulate_corpus(
    params: &ModelParams,
    stop: &StopRule,
    m: usize,
    seed: u64,
) -> Result<Vec<(EventSequence, LatentPath)>> {
    (0..m)
        .into_par_iter()
        .map(|i| sample_examinee(params, stop, &(i + 1).to_string(), derive_seed(seed, i as u64)))
        .collect()
}

/// Like [`simulate_corpus`] with one stop rule per examinee.
pub fn simulate_with_templates(
    params: &ModelParams,
    stops: &[StopRule],
    seed: u64,
) -> Result<Vec<(EventSequence, LatentPath)>> {
    stops
        .par_iter()
        .enumerate()
        .map(|(i, stop)| sample_examinee(params, stop, &(i + 1).to_string(), derive_seed(seed, i as u64)))
        .collect()
}

/// Event labels of the Study 1 vocabulary, in id order.
pub const STUDY1_LABELS: [&str; 6] = ["A", "B", "C", "D", "E", "T"];
const STUDY1_PATTERNS: [&[usize]; 6] = [&[0, 1], &[0, 3], &[2, 1], &[2, 3], &[4], &[5]];
const STUDY1_WEIGHTS: [f64; 6] = [8.0, 8.0, 8.0, 8.0, 7.0, 1.0];

/// Study 1: i.i.d. event patterns AB, AD, CB, CD, E, T with probabilities
/// (8, 8, 8, 8, 7, 1)/40, concatenated until T; unit gaps.
pub fn study1_generator(m: usize, seed: u64) -> Result<Vec<EventSequence>> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    let patterns = categorical(STUDY1_WEIGHTS)?;
    (0..m)
        .map(|i| {
            let mut r = rng(derive_seed(seed, i as u64));
            let mut events = Vec::new();
            loop {
                let p = patterns.sample(&mut r);
                events.extend_from_slice(STUDY1_PATTERNS[p]);
                if p == 5 {
                    break;
                }
            }
            let times = (1..=events.len()).map(|n| n as f64).collect();
            EventSequence::new((i + 1).to_string(), events, times)
        })
        .collect()
}

/// Expected B and norm(R) of a Study 1 fit with K = 2 or 3 topics.
pub fn study1_expected(k: usize) -> Option<(Array2<f64>, Array2<f64>)> {
    match k {
        2 => Some((
            array![
                [0.00, 0.485, 0.00, 0.485, 0.03, 0.00],
                [0.41, 0.00, 0.41, 0.00, 0.15, 0.03]
            ],
            array![[0.00, 1.00], [0.87, 0.13]],
        )),
        3 => Some((
            array![
                [0.00, 0.50, 0.00, 0.50, 0.00, 0.00],
                [0.50, 0.00, 0.50, 0.00, 0.00, 0.00],
                [0.00, 0.00, 0.00, 0.00, 0.87, 0.13]
            ],
            array![[0.00, 0.80, 0.20], [1.00, 0.00, 0.00], [0.00, 0.80, 0.20]],
        )),
        _ => None,
    }
}

/// Study 2 truth (K = 4, V = 10).
pub fn study2_params() -> ModelParams {
    params_io::from_toml_str(STUDY2_TOML).expect("bundled preset is valid")
}

/// 0-based terminal event of Study 2.
pub const STUDY2_TERMINAL: usize = 9;

/// Study 2 RMSE tables: B (absolute), G, norm(R).
pub fn study2_rmse() -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let b = array![
        [2.1, 2.2, 1.2, 1.2, 2.1, 2.0, 1.5, 1.6, 0.089, 0.047],
        [2.1, 2.1, 2.0, 1.9, 0.27, 0.26, 0.11, 0.12, 0.065, 0.025],
        [0.34, 0.35, 1.2, 1.2, 1.0, 1.1, 0.28, 0.32, 0.077, 0.032],
        [0.12, 0.12, 0.14, 0.14, 0.21, 0.17, 0.27, 0.28, 0.067, 0.021]
    ] * 1e-2;
    let g = array![
        [0.59, 0.34, 0.37, 0.56],
        [0.48, 0.13, 0.16, 0.33],
        [0.33, 0.46, 0.12, 0.14],
        [0.47, 0.25, 0.74, 0.11]
    ];
    let r = array![
        [0.081, 0.017, 0.029, 0.048],
        [0.010, 0.026, 0.022, 0.013],
        [0.014, 0.014, 0.016, 0.017],
        [0.048, 0.048, 0.004, 0.007]
    ];
    (b, g, r)
}

/// Block layout of the Study 3 emission matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub stride: usize,
    pub block: Vec<f64>,
    pub background: f64,
    pub last: f64,
    pub a: f64,
    pub d: f64,
    pub p0: Vec<f64>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

impl BlockSpec {
    pub fn emission_matrix(&self) -> Result<Array2<f64>> {
        let mut b = Array2::from_elem((self.k, self.v), self.background);
        for k in 0..self.k {
            let start = self.stride * k;
            if start + self.block.len() > self.v - 1 {
                return Err(Error::InvalidBlock(format!("block of topic {} overruns V", k + 1)));
            }
            let prescribed: f64 = self.block.iter().sum::<f64>() + self.last;
            if prescribed > 1.0 {
                return Err(Error::InvalidBlock(format!(
                    "prescribed mass {prescribed} of topic {} exceeds 1",
                    k + 1
                )));
            }
            for (j, &x) in self.block.iter().enumerate() {
                b[[k, start + j]] = x;
            }
            b[[k, self.v - 1]] = self.last;
            let total = b.row(k).sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidBlock(format!("topic {} sums to {total}", k + 1)));
            }
        }
        Ok(b)
    }

    pub fn params(&self) -> Result<ModelParams> {
        let square = |rows: &[Vec<f64>], field: &'static str| -> Result<Array2<f64>> {
            if rows.len() != self.k || rows.iter().any(|r| r.len() != self.k) {
                return Err(Error::DimensionMismatch {
                    field,
                    detail: format!("expected {0}x{0}", self.k),
                });
            }
            Ok(Array2::from_shape_fn((self.k, self.k), |(i, j)| rows[i][j]))
        };
        ModelParams::new(
            self.emission_matrix()?,
            square(&self.g, "G")?,
            Array1::from(self.p0.clone()),
            square(&self.r, "R")?,
            self.a,
            self.d,
        )
    }
}

pub fn study3_spec() -> BlockSpec {
    toml::from_str(STUDY3_TOML).expect("bundled preset is valid")
}

/// Study 3 truth (K = 8, V = 1000). The construction is deterministic; the
/// seed is accepted for interface symmetry and unused.
pub fn study3_params(_seed: u64) -> Result<ModelParams> {
    study3_spec().params()
}

/// Scaled Study 3 stop rule: the last event type, or 100 events.
pub fn study3_stop() -> StopRule {
    StopRule {
        terminal_event: Some(999),
        max_events: Some(100),
        max_time: None,
    }
}
