//! Digamma, trigamma and log-gamma for positive real arguments.
//!
//! All three shift the argument upward with the functional recurrence until
//! it reaches [`ASYMPTOTIC_FROM`] and then evaluate the asymptotic (Stirling)
//! series, truncated where the next term drops below 1e-12.

const ASYMPTOTIC_FROM: f64 = 6.0;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Ψ(x) = d/dx ln Γ(x), for x > 0.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain is x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k x^{2k}), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Ψ′(x), for x > 0.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma domain is x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + sum_k B_{2k} / x^{2k+1}
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

/// ln Γ(x), for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma domain is x > 0, got {x}");
    let mut x = x;
    let mut prod = 1.0;
    while x < ASYMPTOTIC_FROM {
        prod *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2 * (1.0 / 1188.0 - inv2 * (691.0 / 360_360.0 - inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + HALF_LN_TWO_PI + series - prod.ln()
}

/// ln B(α) = Σ ln Γ(α_k) − ln Γ(Σ α_k).
pub fn ln_multivariate_beta(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(total)
}

/// Differential entropy of Dirichlet(α).
pub fn dirichlet_entropy(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let k = alpha.len() as f64;
    ln_multivariate_beta(alpha) + (total - k) * digamma(total)
        - alpha.iter().map(|&a| (a - 1.0) * digamma(a)).sum::<f64>()
}

/// Differential entropy of Gamma(shape, rate).
pub fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}

/// `x * ln(y)` with the convention 0·ln(0) = 0.
#[inline]
pub fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}
