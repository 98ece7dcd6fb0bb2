//! Evaluation: unbiased MMD with an RBF kernel, prior-chain sample
//! generation through the decoder, parameter-error tracking, and MAP latent
//! reconstruction.

use crate::dynamics::ula_chain;
use crate::error::{Error, Result};
use crate::model::{Decoder, EnergyModel, Theta};
use crate::neural::{AdamConfig, AdamState};
use crate::rng::{NoiseKey, NoiseRole, NoiseStream};
use rayon::prelude::*;

/// RBF kernel settings: `k(x, y) = exp(-bandwidth ||x - y||^2)`.
///
/// The multiplier inside the exponent is called the bandwidth to match the
/// experiment convention; 0.1 is the Swiss-roll evaluation value.
#[derive(Clone, Copy, Debug)]
pub struct MmdConfig {
    pub bandwidth: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { bandwidth: 0.1 }
    }
}

#[inline(always)]
fn rbf(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        sq += d * d;
    }
    (-bandwidth * sq).exp()
}

/// Unbiased MMD^2 estimator between flat sample matrices `p` (m rows) and
/// `q` (n rows) of width `d`:
///
/// ```text
/// 1/(m(m-1)) sum_{i != j} k(p_i, p_j) + 1/(n(n-1)) sum_{i != j} k(q_i, q_j)
///   - 2/(mn) sum_{i,j} k(p_i, q_j)
/// ```
///
/// Both self-sums exclude the diagonal; the estimator can be negative.
pub fn mmd_unbiased(p: &[f64], q: &[f64], d: usize, cfg: &MmdConfig) -> Result<f64> {
    if cfg.bandwidth <= 0.0 {
        return Err(Error::Config("mmd: bandwidth must be positive".into()));
    }
    if d == 0 || p.len() % d != 0 || q.len() % d != 0 {
        return Err(Error::Config("mmd: sample width mismatch".into()));
    }
    let m = p.len() / d;
    let n = q.len() / d;
    if m < 2 || n < 2 {
        return Err(Error::Config(
            "mmd: the unbiased estimator needs at least 2 samples per side".into(),
        ));
    }
    let bw = cfg.bandwidth;
    fn row(s: &[f64], i: usize, d: usize) -> &[f64] {
        &s[i * d..(i + 1) * d]
    }
    // Per-row partial sums in index order, reduced sequentially, so the
    // result is independent of the worker count.
    let self_sum = |s: &[f64], rows: usize| -> f64 {
        (0..rows)
            .into_par_iter()
            .map(|i| {
                let a = row(s, i, d);
                let mut acc = 0.0;
                for j in (i + 1)..rows {
                    acc += rbf(a, row(s, j, d), bw);
                }
                acc
            })
            .collect::<Vec<_>>()
            .iter()
            .sum::<f64>()
            * 2.0
    };
    let cross: f64 = (0..m)
        .into_par_iter()
        .map(|i| {
            let a = row(p, i, d);
            let mut acc = 0.0;
            for j in 0..n {
                acc += rbf(a, row(q, j, d), bw);
            }
            acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(self_sum(p, m) / (m * (m - 1)) as f64 + self_sum(q, n) / (n * (n - 1)) as f64
        - 2.0 * cross / (m * n) as f64)
}

/// Draw `count` samples in data space: independent prior ULA chains from
/// `N(0, I)`, terminal states pushed through the generator. Decoder
/// observation noise is excluded by default (samples are generator means);
/// `add_observation_noise` adds `N(0, sigma^2 I)` for ablations.
#[allow(clippy::too_many_arguments)]
pub fn generate_samples(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    count: usize,
    prior_steps: usize,
    gamma: f64,
    stream: &NoiseStream,
    add_observation_noise: bool,
) -> Result<Vec<f64>> {
    if prior_steps < 1 {
        return Err(Error::Config("generate: prior_steps must be >= 1".into()));
    }
    let d_x = model.dim_x();
    let d_y = decoder.dim_y();
    let mut out = vec![0.0; count * d_y];
    out.par_chunks_mut(d_y)
        .enumerate()
        .try_for_each(|(c, y)| -> Result<()> {
            let mut x = vec![0.0; d_x];
            stream.fill_gaussian(NoiseKey::new(0, NoiseRole::GenerateInit, c as u64, 0), &mut x);
            ula_chain(
                model,
                &theta.alpha,
                &mut x,
                gamma,
                prior_steps,
                stream,
                NoiseKey::new(0, NoiseRole::Generate, c as u64, 0),
            )?;
            decoder.generate(&theta.beta, &x, y)?;
            if add_observation_noise {
                let mut eps = vec![0.0; d_y];
                stream.fill_gaussian(
                    NoiseKey::new(0, NoiseRole::GenerateObsNoise, c as u64, 0),
                    &mut eps,
                );
                for i in 0..d_y {
                    y[i] += decoder.sigma() * eps[i];
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Euclidean distance `||theta - theta_star||` over the concatenated
/// parameter vector. Multi-seed harnesses RMS-average the squares.
pub fn parameter_error(theta: &Theta, theta_star: &Theta) -> f64 {
    assert_eq!(theta.alpha.len(), theta_star.alpha.len());
    assert_eq!(theta.beta.len(), theta_star.beta.len());
    let mut sq = 0.0;
    for (a, b) in theta.alpha.iter().zip(&theta_star.alpha) {
        sq += (a - b) * (a - b);
    }
    for (a, b) in theta.beta.iter().zip(&theta_star.beta) {
        sq += (a - b) * (a - b);
    }
    sq.sqrt()
}

/// Settings for MAP latent reconstruction; the defaults mirror the
/// evaluation recipe (4 restarts of 50 Adam iterations).
#[derive(Clone, Debug)]
pub struct MapConfig {
    pub restarts: usize,
    pub iters: usize,
    pub adam: AdamConfig,
    pub init_std: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            iters: 50,
            adam: AdamConfig {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            init_std: 1.0,
        }
    }
}

/// Best-of-restarts Adam minimization of the MAP objective
/// `U_alpha(x) + ||y - g_beta(x)||^2 / (2 sigma^2)`.
/// Returns the minimizer and its objective value.
pub fn map_latent(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    y: &[f64],
    cfg: &MapConfig,
    stream: &NoiseStream,
) -> Result<(Vec<f64>, f64)> {
    if cfg.restarts < 1 {
        return Err(Error::Config("map_latent: restarts must be >= 1".into()));
    }
    let d = model.dim_x();
    let objective = |x: &[f64]| -> Result<f64> {
        Ok(model.energy(&theta.alpha, x)? + decoder.nll(&theta.beta, x, y)?)
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..cfg.restarts {
        let mut x = vec![0.0; d];
        stream.fill_gaussian(NoiseKey::new(0, NoiseRole::MapRestart, r as u64, 0), &mut x);
        for v in x.iter_mut() {
            *v *= cfg.init_std;
        }
        let mut adam = AdamState::new(d, cfg.adam);
        let mut gu = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let mut grad = vec![0.0; d];
        for _ in 0..cfg.iters {
            model.grad_x(&theta.alpha, &x, &mut gu)?;
            decoder.grad_x(&theta.beta, &x, y, &mut gv)?;
            for i in 0..d {
                grad[i] = gu[i] + gv[i];
            }
            adam.step(&mut x, &grad);
        }
        let obj = objective(&x)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                context: format!("map objective at restart {r}"),
            });
        }
        if best.as_ref().map(|(_, b)| obj < *b).unwrap_or(true) {
            best = Some((x, obj));
        }
    }
    Ok(best.unwrap())
}
