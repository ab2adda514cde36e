//! Domain types shared by every stage of the pipeline.
//!
//! Indices are 0-based in memory. Event ids and topic numbers are 1-based
//! only at the file and CLI boundaries.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const STOCHASTIC_TOL: f64 = 1e-10;

/// Whether gap times enter the model. With [`Timing::Ignored`] every
/// timing-dependent term (gap densities, frailty, `G`, `a`, `d`) is dropped
/// and only the order of events is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    #[default]
    Observed,
    Ignored,
}

impl Timing {
    pub fn observed(self) -> bool {
        self == Timing::Observed
    }
}

/// One examinee's ordered events with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    id: String,
    events: Vec<usize>,
    times: Vec<f64>,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, events: Vec<usize>, times: Vec<f64>) -> Result<Self> {
        let id = id.into();
        let invalid = |detail: String| Error::InvalidSequence {
            id: id.clone(),
            detail,
        };
        if events.is_empty() {
            return Err(invalid("no events".into()));
        }
        if events.len() != times.len() {
            return Err(invalid(format!(
                "{} events but {} timestamps",
                events.len(),
                times.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t <= 0.0) {
            return Err(invalid(format!("timestamp {t} is not positive")));
        }
        if let Some(n) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "timestamps not strictly increasing at event {}",
                n + 2
            )));
        }
        Ok(Self { id, events, times })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// 0-based event ids.
    pub fn events(&self) -> &[usize] {
        &self.events
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Termination time, the last timestamp.
    pub fn tau(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Gap preceding event `n` (0-based, `n >= 1`).
    #[inline]
    pub fn gap(&self, n: usize) -> f64 {
        self.times[n] - self.times[n - 1]
    }

    /// Returns an error unless every event id is below `v`.
    pub fn check_vocabulary(&self, v: usize) -> Result<()> {
        match self.events.iter().find(|&&e| e >= v) {
            Some(&e) => Err(Error::IndexOutOfRange {
                what: "event",
                index: e + 1,
                bound: v,
            }),
            None => Ok(()),
        }
    }
}

/// Global model parameters η = (B, G, p⁰, R, a, d).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// K×V emission probabilities, rows sum to 1.
    pub b: Array2<f64>,
    /// K×K log baseline intensities; `g[[from, to]]`.
    pub g: Array2<f64>,
    /// Initial topic distribution.
    pub p0: Array1<f64>,
    /// K×K Dirichlet hyperparameters, one row per departure topic.
    pub r: Array2<f64>,
    /// Frailty shape.
    pub a: f64,
    /// Frailty rate.
    pub d: f64,
}

impl ModelParams {
    /// Builds and validates.
    pub fn new(
        b: Array2<f64>,
        g: Array2<f64>,
        p0: Array1<f64>,
        r: Array2<f64>,
        a: f64,
        d: f64,
    ) -> Result<Self> {
        let params = Self { b, g, p0, r, a, d };
        params.validate()?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.b.nrows()
    }

    pub fn v(&self) -> usize {
        self.b.ncols()
    }

    /// Checks every invariant and names the first offending field.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let v = self.v();
        if k == 0 || v == 0 {
            return Err(Error::DimensionMismatch {
                field: "B",
                detail: format!("{k}x{v} is empty"),
            });
        }
        for (field, shape) in [("G", self.g.dim()), ("R", self.r.dim())] {
            if shape != (k, k) {
                return Err(Error::DimensionMismatch {
                    field,
                    detail: format!("expected {k}x{k}, got {}x{}", shape.0, shape.1),
                });
            }
        }
        if self.p0.len() != k {
            return Err(Error::DimensionMismatch {
                field: "p0",
                detail: format!("expected length {k}, got {}", self.p0.len()),
            });
        }
        for (row_idx, row) in self.b.outer_iter().enumerate() {
            let ok = row.iter().all(|&x| x.is_finite() && (0.0..=1.0).contains(&x))
                && (row.sum() - 1.0).abs() <= STOCHASTIC_TOL;
            if !ok {
                return Err(Error::NotStochastic {
                    field: "B",
                    row: row_idx + 1,
                });
            }
        }
        if self.p0.iter().any(|&x| !x.is_finite() || x < 0.0)
            || (self.p0.sum() - 1.0).abs() > STOCHASTIC_TOL
        {
            return Err(Error::NotStochastic { field: "p0", row: 1 });
        }
        if self.g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("G"));
        }
        if self.r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::NonPositiveHyperparam("R"));
        }
        if !(self.a > 0.0) || !self.a.is_finite() {
            return Err(Error::NonPositiveHyperparam("a"));
        }
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::NonPositiveHyperparam("d"));
        }
        Ok(())
    }

    fn check_topic(&self, k: usize) -> Result<()> {
        if k >= self.k() {
            return Err(Error::IndexOutOfRange {
                what: "topic",
                index: k + 1,
                bound: self.k(),
            });
        }
        Ok(())
    }

    /// Floored emission probability, no bounds check.
    #[inline]
    pub fn emission(&self, k: usize, v: usize) -> f64 {
        self.b[[k, v]].max(PROB_FLOOR)
    }

    /// log max(b_{k,v}, ε).
    pub fn log_emission(&self, k: usize, v: usize) -> Result<f64> {
        self.check_topic(k)?;
        if v >= self.v() {
            return Err(Error::IndexOutOfRange {
                what: "event",
                index: v + 1,
                bound: self.v(),
            });
        }
        Ok(self.emission(k, v).ln())
    }

    /// Log density of an exponential gap `dt` with rate ξ·exp(g_{k_prev,k}).
    pub fn log_gap_density(&self, xi: f64, k_prev: usize, k: usize, dt: f64) -> Result<f64> {
        self.check_topic(k_prev)?;
        self.check_topic(k)?;
        if !(dt > 0.0) {
            return Err(Error::NonPositiveGap(dt));
        }
        if !(xi > 0.0) {
            return Err(Error::NonPositiveHyperparam("xi"));
        }
        let g = self.g[[k_prev, k]];
        let rate = xi * g.exp();
        Ok(xi.ln() + g - rate * dt)
    }

    /// Row-normalised R, i.e. the prior mean of each personal transition row.
    pub fn norm_r(&self) -> Array2<f64> {
        row_normalize(&self.r)
    }

    /// Relabels topics: topic `j` of the result is topic `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            b: permute_rows(&self.b, perm),
            g: permute_square(&self.g, perm),
            p0: Array1::from_iter(perm.iter().map(|&j| self.p0[j])),
            r: permute_square(&self.r, perm),
            a: self.a,
            d: self.d,
        }
    }
}

/// Per-examinee variational parameters and chain posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// K×K Dirichlet parameters of q(Λ), one row per departure topic.
    pub gamma: Array2<f64>,
    /// Row-stochastic variational transition matrix.
    pub trans: Array2<f64>,
    /// ln Σ_k exp(E[ln λ_k]) per row: the mass removed when normalising
    /// exp(E[ln Λ]) into `trans`.
    pub trans_log_mass: Array1<f64>,
    pub kappa: f64,
    pub a_tilde: f64,
    pub d_tilde: f64,
    /// N×K marginal topic posteriors.
    pub phi: Array2<f64>,
    /// (N−1)×K×K pairwise posteriors; slice `n` is (z_n, z_{n+1}).
    pub phi_joint: Array3<f64>,
    /// Log normaliser of the chain used to produce `phi`.
    pub loglik_q: f64,
}

impl VariationalState {
    pub fn k(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.nrows() == 0
    }

    /// Unnormalised exp(E_q[ln Λ]) used as the chain's transition weights.
    pub fn transition_weights(&self) -> Array2<f64> {
        let mut w = self.trans.clone();
        for (mut row, &m) in w.outer_iter_mut().zip(self.trans_log_mass.iter()) {
            row.mapv_inplace(|x| x * m.exp());
        }
        w
    }

    /// Relabels topics consistently with [`ModelParams::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = perm.len();
        let n = self.phi.nrows();
        let mut phi = Array2::zeros((n, k));
        for (j, &src) in perm.iter().enumerate() {
            phi.column_mut(j).assign(&self.phi.column(src));
        }
        let mut phi_joint = Array3::zeros(self.phi_joint.dim());
        for t in 0..self.phi_joint.dim().0 {
            for (a, &sa) in perm.iter().enumerate() {
                for (b, &sb) in perm.iter().enumerate() {
                    phi_joint[[t, a, b]] = self.phi_joint[[t, sa, sb]];
                }
            }
        }
        Self {
            gamma: permute_square(&self.gamma, perm),
            trans: permute_square(&self.trans, perm),
            trans_log_mass: Array1::from_iter(perm.iter().map(|&j| self.trans_log_mass[j])),
            kappa: self.kappa,
            a_tilde: self.a_tilde,
            d_tilde: self.d_tilde,
            phi,
            phi_joint,
            loglik_q: self.loglik_q,
        }
    }
}

/// Simulator ground truth for one examinee.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    /// 0-based topic per event.
    pub topics: Vec<usize>,
    /// Personal transition matrix Λ.
    pub lambda: Array2<f64>,
    /// Frailty ξ.
    pub xi: f64,
}

pub fn row_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

pub(crate) fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((perm.len(), m.ncols()));
    for (j, &src) in perm.iter().enumerate() {
        out.row_mut(j).assign(&m.row(src));
    }
    out
}

pub(crate) fn permute_square(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((perm.len(), perm.len()), |(i, j)| m[[perm[i], perm[j]]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn two_topic() -> ModelParams {
        ModelParams::new(
            array![[0.7, 0.3, 0.0], [0.2, 0.2, 0.6]],
            array![[0.0, 2f64.ln()], [-1.0, 0.5]],
            array![0.5, 0.5],
            array![[1.0, 2.0], [3.0, 1.0]],
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn valid_params_pass() {
        two_topic().validate().unwrap();
    }

    #[test]
    fn non_stochastic_b_row_is_named() {
        let mut p = two_topic();
        p.b[[0, 0]] = 0.6;
        match p.validate() {
            Err(Error::NotStochastic { field: "B", row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_hyperparameter_rejected() {
        let mut p = two_topic();
        p.r[[0, 1]] = 0.0;
        assert!(matches!(p.validate(), Err(Error::NonPositiveHyperparam("R"))));
        let mut p = two_topic();
        p.a = 0.0;
        assert!(matches!(p.validate(), Err(Error::NonPositiveHyperparam("a"))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut p = two_topic();
        p.p0 = array![1.0];
        assert!(matches!(
            p.validate(),
            Err(Error::DimensionMismatch { field: "p0", .. })
        ));
    }

    #[test]
    fn log_emission_floors_zero() {
        let p = two_topic();
        assert_eq!(p.log_emission(0, 1).unwrap(), 0.3f64.ln());
        assert_eq!(p.log_emission(0, 2).unwrap(), PROB_FLOOR.ln());
        assert!(matches!(
            p.log_emission(2, 0),
            Err(Error::IndexOutOfRange { what: "topic", .. })
        ));
    }

    #[test]
    fn log_gap_density_values() {
        let mut p = two_topic();
        p.g[[0, 0]] = 0.0;
        assert!((p.log_gap_density(1.0, 0, 0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((p.log_gap_density(1.0, 0, 1, 0.5).unwrap() - (2f64.ln() - 1.0)).abs() < 1e-15);
        p.g[[1, 0]] = -1.0;
        let want = (2.0 * (-1f64).exp()).ln() - 6.0 * (-1f64).exp();
        assert!((p.log_gap_density(2.0, 1, 0, 3.0).unwrap() - want).abs() < 1e-14);
        assert!(matches!(
            p.log_gap_density(1.0, 0, 0, 0.0),
            Err(Error::NonPositiveGap(_))
        ));
    }

    #[test]
    fn gap_density_integrates_to_one() {
        let p = two_topic();
        for &(xi, kp, k) in &[(1.0, 0, 0), (0.3, 0, 1), (2.5, 1, 0), (0.9, 1, 1)] {
            let rate = xi * p.g[[kp, k]].exp();
            let upper = 100.0 / rate;
            // composite Simpson on (0, upper]
            let n = 200_000;
            let h = upper / n as f64;
            let f = |t: f64| {
                if t <= 0.0 {
                    rate
                } else {
                    p.log_gap_density(xi, kp, k, t).unwrap().exp()
                }
            };
            let mut s = f(0.0) + f(upper);
            for i in 1..n {
                s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let integral = s * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
        }
    }

    #[test]
    fn sequence_invariants() {
        assert!(EventSequence::new("a", vec![0, 1], vec![1.0, 2.0]).is_ok());
        assert!(EventSequence::new("a", vec![], vec![]).is_err());
        assert!(EventSequence::new("a", vec![0, 1], vec![1.0]).is_err());
        assert!(EventSequence::new("a", vec![0, 1], vec![2.0, 2.0]).is_err());
        assert!(EventSequence::new("a", vec![0], vec![0.0]).is_err());
        let s = EventSequence::new("a", vec![0, 4], vec![1.0, 2.5]).unwrap();
        assert_eq!(s.tau(), 2.5);
        assert_eq!(s.gap(1), 1.5);
        assert!(s.check_vocabulary(5).is_ok());
        assert!(s.check_vocabulary(4).is_err());
    }

    #[test]
    fn permutation_round_trip() {
        let p = two_topic();
        let q = p.permuted(&[1, 0]);
        assert_eq!(q.b.row(0), p.b.row(1));
        assert_eq!(q.g[[0, 1]], p.g[[1, 0]]);
        assert_eq!(q.permuted(&[1, 0]), p);
    }
}
