//! Rényi DP of the sampled Gaussian mechanism.
//!
//! For sampling ratio `q` and noise multiplier `σ`, the order-`α` moment is
//! `A_α = E_{z∼N(0,σ²)}[(1 − q + q·exp((2z − 1)/(2σ²)))^α]` and
//! `RDP(α) = ln A_α / (α − 1)`. The expectation is integrated numerically in
//! log space with Simpson's rule, so fractional orders work too. RDP adds up
//! over steps and converts to `(ε, δ)` by
//! `ε = min_α τ·RDP(α) + ln(1/δ)/(α − 1)`.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln A_α` by Simpson integration over a window covering both the mass at
/// `0` and the shifted mass near `z = α`.
fn log_moment(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_1mq = (1.0 - q).ln();
    let log_q = q.ln();
    let lo = -14.0 * sigma - 1.0;
    let hi = alpha.max(1.0) + 14.0 * sigma + 1.0;
    let mut steps = (((hi - lo) / (sigma / 60.0)).ceil() as usize).max(2000);
    steps += steps % 2;
    let h = (hi - lo) / steps as f64;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let log_f = |z: f64| {
        let mix = log_add(log_1mq, log_q + (2.0 * z - 1.0) / (2.0 * s2));
        log_norm - z * z / (2.0 * s2) + alpha * mix
    };
    let terms: Vec<f64> = (0..=steps)
        .map(|k| {
            let w: f64 = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w.ln() + log_f(lo + k as f64 * h)
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() + (h / 3.0).ln()
}

/// RDP curve over a fixed set of orders, cached per `(q, σ)`.
#[derive(Debug)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    cache: Mutex<HashMap<(u64, u64), Vec<f64>>>,
}

impl Default for RdpAccountant {
    fn default() -> Self {
        let mut orders: Vec<f64> = (1..100).map(|x| 1.0 + x as f64 / 10.0).collect();
        orders.extend((12..64).map(f64::from));
        Self::with_orders(orders)
    }
}

impl RdpAccountant {
    pub fn with_orders(orders: Vec<f64>) -> Self {
        Self {
            orders,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    /// Per-step RDP at each order.
    pub fn rdp(&self, q: f64, sigma: f64) -> Vec<f64> {
        let key = (q.to_bits(), sigma.to_bits());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return v.clone();
        }
        let v: Vec<f64> = self
            .orders
            .iter()
            .map(|&a| {
                if q == 0.0 {
                    0.0
                } else if q == 1.0 {
                    a / (2.0 * sigma * sigma)
                } else {
                    (log_moment(q, sigma, a) / (a - 1.0)).max(0.0)
                }
            })
            .collect();
        self.cache.lock().expect("cache lock").insert(key, v.clone());
        v
    }

    /// ε after `steps` compositions.
    pub fn epsilon(&self, steps: u64, q: f64, sigma: f64, delta: f64) -> Result<f64> {
        check(q, sigma, delta)?;
        if steps == 0 {
            return Ok(0.0);
        }
        let rdp = self.rdp(q, sigma);
        let log_inv_delta = (1.0 / delta).ln();
        Ok(self
            .orders
            .iter()
            .zip(&rdp)
            .map(|(&a, &r)| steps as f64 * r + log_inv_delta / (a - 1.0))
            .fold(f64::INFINITY, f64::min))
    }
}

fn check(q: f64, sigma: f64, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("sampling ratio must lie in [0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise multiplier must be > 0, got {sigma}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// ε spent by `steps` subsampled Gaussian steps at ratio `r` and noise `σ`.
pub fn account(steps: u64, r: f64, sigma: f64, delta: f64) -> Result<f64> {
    RdpAccountant::default().epsilon(steps, r, sigma, delta)
}

/// Smallest `σ` (to bisection tolerance) whose ε after `steps` is at most
/// `target`.
pub fn calibrate_sigma(target: f64, steps: u64, r: f64, delta: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!("target ε must be > 0, got {target}")));
    }
    let acc = RdpAccountant::default();
    let (mut lo, mut hi) = (0.05f64, 200.0f64);
    if acc.epsilon(steps, r, hi, delta)? > target {
        return Err(Error::Config(format!(
            "ε = {target} is not reachable with σ <= {hi} over {steps} steps"
        )));
    }
    if acc.epsilon(steps, r, lo, delta)? <= target {
        return Ok(lo);
    }
    for _ in 0..50 {
        let mid = (lo * hi).sqrt();
        if acc.epsilon(steps, r, mid, delta)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    Ok(hi)
}

/// Running feature-DP budget of one client.
#[derive(Debug)]
pub struct FeatureAccountant {
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    steps: u64,
    inner: RdpAccountant,
}

impl FeatureAccountant {
    pub fn new(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        check(q, sigma, delta)?;
        Ok(Self {
            q,
            sigma,
            delta,
            steps: 0,
            inner: RdpAccountant::default(),
        })
    }

    pub fn record(&mut self, steps: u64) {
        self.steps += steps;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epsilon(&self) -> Result<f64> {
        self.inner.epsilon(self.steps, self.q, self.sigma, self.delta)
    }
}
