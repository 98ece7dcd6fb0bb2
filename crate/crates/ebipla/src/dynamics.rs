//! Langevin update kernels: the prior ULA chain, posterior particle sweeps,
//! and the exact/inexact parameter updates.
//!
//! One discretization step of the interacting system reads
//!
//! ```text
//! alpha' = alpha - (h/MN) sum_{m,n} grad_alpha U(X^{m,n})
//!                + h * E_{p_alpha}[grad_alpha U]          (or its ULA estimate)
//!                + sqrt(2h/MN) W^alpha
//! beta'  = beta  - (h/MN) sum_{m,n} grad_beta V(X^{m,n}, y_m) + sqrt(2h/MN) W^beta
//! X'     = X - h (grad_x U + grad_x V) + sqrt(2h) W^{m,n}
//! ```
//!
//! All randomness comes from a keyed [`NoiseStream`], so particle sweeps can
//! be parallelized over data rows without affecting the trajectory.

use crate::error::{Error, Result};
use crate::model::{Decoder, EnergyModel, Theta};
use crate::rng::{NoiseKey, NoiseRole, NoiseStream};
use rayon::prelude::*;

/// Langevin states beyond this norm abort the run instead of being clipped;
/// clipping would change the algorithm.
pub const DIVERGENCE_GUARD: f64 = 1e8;

/// `M x N x d_x` array of posterior particles, row-major in `(m, n, coord)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    data: Vec<f64>,
    m: usize,
    n: usize,
    d: usize,
}

impl ParticleCloud {
    pub fn zeros(m: usize, n: usize, d: usize) -> Self {
        assert!(m >= 1 && n >= 1 && d >= 1);
        Self {
            data: vec![0.0; m * n * d],
            m,
            n,
            d,
        }
    }

    /// Standard-normal initial cloud, keyed by `(seed, ParticleInit, m, n)`.
    pub fn standard_normal(m: usize, n: usize, d: usize, stream: &NoiseStream) -> Self {
        let mut cloud = Self::zeros(m, n, d);
        cloud
            .data
            .par_chunks_mut(n * d)
            .enumerate()
            .for_each(|(mi, row)| {
                for ni in 0..n {
                    let key = NoiseKey::new(0, NoiseRole::ParticleInit, mi as u64, ni as u64);
                    stream.fill_gaussian(key, &mut row[ni * d..(ni + 1) * d]);
                }
            });
        cloud
    }

    pub fn num_data(&self) -> usize {
        self.m
    }

    pub fn num_particles(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline(always)]
    pub fn particle(&self, m: usize, n: usize) -> &[f64] {
        let off = (m * self.n + n) * self.d;
        &self.data[off..off + self.d]
    }

    #[inline(always)]
    pub fn particle_mut(&mut self, m: usize, n: usize) -> &mut [f64] {
        let off = (m * self.n + n) * self.d;
        &mut self.data[off..off + self.d]
    }

    /// All particles for data row `m` as one `n * d` slice.
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.n * self.d..(m + 1) * self.n * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Warmup replication: each particle copied `n_new / n` times, so the
    /// cloud shape transitions `(M, N', d) -> (M, N, d)` with every new
    /// particle bitwise equal to its source.
    pub fn replicate_to(&self, n_new: usize) -> Result<Self> {
        if n_new % self.n != 0 {
            return Err(Error::Config(format!(
                "replication target N = {n_new} is not a multiple of N' = {}",
                self.n
            )));
        }
        let factor = n_new / self.n;
        let mut out = Self::zeros(self.m, n_new, self.d);
        for m in 0..self.m {
            for n in 0..self.n {
                let src = self.particle(m, n);
                for j in 0..factor {
                    out.particle_mut(m, n * factor + j).copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: "particle cloud".into(),
            })
        }
    }
}

#[inline]
fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn guard(x: &[f64], iter: u64, m: usize, n: usize) -> Result<()> {
    let ns = norm_sq(x);
    if !ns.is_finite() || ns > DIVERGENCE_GUARD * DIVERGENCE_GUARD {
        return Err(Error::Divergence {
            norm: ns.sqrt(),
            guard: DIVERGENCE_GUARD,
            iter,
            m,
            n,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Prior ULA chain
// ---------------------------------------------------------------------------

/// Advance one chain by `j_steps` ULA steps targeting `p_alpha`:
/// `x <- x - gamma grad_x U(x) + sqrt(2 gamma) W_j`.
///
/// Noise comes from `(key, counter = j*d + coord)`, so a chain is fully
/// determined by its key.
pub fn ula_chain(
    model: &dyn EnergyModel,
    alpha: &[f64],
    x: &mut [f64],
    gamma: f64,
    j_steps: usize,
    stream: &NoiseStream,
    key: NoiseKey,
) -> Result<()> {
    assert!(gamma > 0.0, "ula_chain: gamma must be positive");
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for j in 0..j_steps {
        model.grad_x(alpha, x, &mut grad)?;
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("prior gradient at chain step {j} (m={}, n={})", key.m, key.n),
            });
        }
        stream.fill_gaussian_from(key, (j * d) as u64, &mut noise);
        let sc = (2.0 * gamma).sqrt();
        for i in 0..d {
            x[i] += -gamma * grad[i] + sc * noise[i];
        }
        guard(x, key.iter, key.m as usize, key.n as usize)?;
    }
    Ok(())
}

/// Fresh short-run prior chains for the selected data indices: each chain is
/// initialized from `N(0, I)` and evolved for `j_steps`. Returns an
/// `indices.len() x 1 x d_x` cloud of terminal states.
pub fn ula_prior_sample(
    model: &dyn EnergyModel,
    alpha: &[f64],
    indices: &[usize],
    gamma: f64,
    j_steps: usize,
    stream: &NoiseStream,
    iter: u64,
) -> Result<ParticleCloud> {
    assert!(gamma > 0.0, "ula_prior_sample: gamma must be positive");
    assert!(j_steps >= 1, "ula_prior_sample: J must be >= 1");
    let d = model.dim_x();
    let mut out = ParticleCloud::zeros(indices.len(), 1, d);
    out.data
        .par_chunks_mut(d)
        .zip(indices.par_iter())
        .try_for_each(|(x, &m)| -> Result<()> {
            stream.fill_gaussian(NoiseKey::new(iter, NoiseRole::PriorInit, m as u64, 0), x);
            ula_chain(
                model,
                alpha,
                x,
                gamma,
                j_steps,
                stream,
                NoiseKey::new(iter, NoiseRole::PriorChain, m as u64, 0),
            )
        })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Posterior particle updates
// ---------------------------------------------------------------------------

/// Move the selected rows' particles by the joint drift, optionally plus
/// `noise_scale * W^{m,n}` under the given role. Unselected rows are
/// untouched (their mini-batch era noise is the trainer's separate
/// noise-addition op).
#[allow(clippy::too_many_arguments)]
fn posterior_sweep(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &mut ParticleCloud,
    data: &crate::data::Dataset,
    h: f64,
    selected: &[usize],
    noise: Option<(&NoiseStream, u64, NoiseRole, f64)>,
) -> Result<()> {
    assert!(h > 0.0, "posterior step: h must be positive");
    if data.len() != cloud.num_data() {
        return Err(Error::Dimension {
            axis: "data_rows",
            expected: cloud.num_data(),
            got: data.len(),
        });
    }
    let (n, d) = (cloud.num_particles(), cloud.dim());
    let mut mask = vec![false; cloud.num_data()];
    for &m in selected {
        mask[m] = true;
    }
    cloud
        .data
        .par_chunks_mut(n * d)
        .enumerate()
        .filter(|(m, _)| mask[*m])
        .try_for_each(|(m, row)| -> Result<()> {
            let y = data.row(m);
            let mut gu = vec![0.0; d];
            let mut gv = vec![0.0; d];
            let mut xi = vec![0.0; d];
            for nn in 0..n {
                let x = &mut row[nn * d..(nn + 1) * d];
                model.grad_x(&theta.alpha, x, &mut gu)?;
                decoder.grad_x(&theta.beta, x, y, &mut gv)?;
                let iter = noise.map(|(_, k, _, _)| k).unwrap_or(0);
                for i in 0..d {
                    let g = gu[i] + gv[i];
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!(
                                "posterior gradient at iteration {iter}, m={m}, n={nn}"
                            ),
                        });
                    }
                    x[i] -= h * g;
                }
                if let Some((stream, k, role, scale)) = noise {
                    stream.fill_gaussian(NoiseKey::new(k, role, m as u64, nn as u64), &mut xi);
                    for i in 0..d {
                        x[i] += scale * xi[i];
                    }
                    guard(x, k, m, nn)?;
                } else {
                    guard(x, 0, m, nn)?;
                }
            }
            Ok(())
        })
}

/// Full-path particle update: drift plus `sqrt(2h) W^{m,n}` on the selected rows.
pub fn posterior_particle_step(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &mut ParticleCloud,
    data: &crate::data::Dataset,
    h: f64,
    stream: &NoiseStream,
    iter: u64,
    selected: &[usize],
) -> Result<()> {
    posterior_sweep(
        model,
        decoder,
        theta,
        cloud,
        data,
        h,
        selected,
        Some((stream, iter, NoiseRole::Particle, (2.0 * h).sqrt())),
    )
}

/// Mini-batch era particle update: drift only; noise is added to the whole
/// cloud separately.
pub fn posterior_gradient_step(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &mut ParticleCloud,
    data: &crate::data::Dataset,
    h: f64,
    selected: &[usize],
) -> Result<()> {
    posterior_sweep(model, decoder, theta, cloud, data, h, selected, None)
}

// ---------------------------------------------------------------------------
// Parameter updates
// ---------------------------------------------------------------------------

/// Drift of the parameter update at the current state, shared by the exact
/// and inexact variants: `(drift_alpha, drift_beta)` where
/// `alpha' = alpha - h * drift_alpha + noise`.
fn theta_drift(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &ParticleCloud,
    data: &crate::data::Dataset,
    expectation: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mn = (cloud.num_data() * cloud.num_particles()) as f64;
    let scale = 1.0 / mn;
    let mut ga = vec![0.0; model.dim_alpha()];
    let mut gb = vec![0.0; decoder.dim_beta()];
    for m in 0..cloud.num_data() {
        let y = data.row(m);
        for n in 0..cloud.num_particles() {
            let x = cloud.particle(m, n);
            model.add_grad_alpha(&theta.alpha, x, scale, &mut ga)?;
            decoder.add_grad_beta(&theta.beta, x, y, scale, &mut gb)?;
        }
    }
    for (g, e) in ga.iter_mut().zip(expectation) {
        *g -= e;
    }
    Ok((ga, gb))
}

fn apply_theta_update(
    theta: &Theta,
    drift_alpha: &[f64],
    drift_beta: &[f64],
    h: f64,
    mn: f64,
    stream: &NoiseStream,
    iter: u64,
) -> Result<Theta> {
    let noise_scale = (2.0 * h / mn).sqrt();
    let mut alpha = theta.alpha.clone();
    let mut beta = theta.beta.clone();
    let mut xi = vec![0.0; alpha.len().max(beta.len())];
    stream.fill_gaussian(
        NoiseKey::new(iter, NoiseRole::ThetaAlpha, 0, 0),
        &mut xi[..alpha.len()],
    );
    for i in 0..alpha.len() {
        alpha[i] += -h * drift_alpha[i] + noise_scale * xi[i];
    }
    if !beta.is_empty() {
        stream.fill_gaussian(
            NoiseKey::new(iter, NoiseRole::ThetaBeta, 0, 0),
            &mut xi[..beta.len()],
        );
        for i in 0..beta.len() {
            beta[i] += -h * drift_beta[i] + noise_scale * xi[i];
        }
    }
    let out = Theta { alpha, beta };
    out.check_finite()?;
    Ok(out)
}

/// Full-batch Euler-Maruyama parameter update using the model's analytic
/// prior expectation.
#[allow(clippy::too_many_arguments)]
pub fn theta_step_exact(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &ParticleCloud,
    data: &crate::data::Dataset,
    h: f64,
    stream: &NoiseStream,
    iter: u64,
) -> Result<Theta> {
    let expectation = model.prior_expectation(&theta.alpha).ok_or_else(|| {
        Error::MissingCapability(
            "exact parameter update requires an analytic prior expectation".into(),
        )
    })?;
    let (ga, gb) = theta_drift(model, decoder, theta, cloud, data, &expectation)?;
    let mn = (cloud.num_data() * cloud.num_particles()) as f64;
    apply_theta_update(theta, &ga, &gb, h, mn, stream, iter)
}

/// As [`theta_step_exact`] but with the prior expectation replaced by
/// `g_k = (1/M) sum_m grad_alpha U(X_hat^m_J)` over the supplied terminal
/// prior-chain states (one per data point).
#[allow(clippy::too_many_arguments)]
pub fn theta_step_inexact(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    cloud: &ParticleCloud,
    data: &crate::data::Dataset,
    h: f64,
    prior_samples: &ParticleCloud,
    stream: &NoiseStream,
    iter: u64,
) -> Result<Theta> {
    if prior_samples.num_data() != data.len() {
        return Err(Error::Dimension {
            axis: "prior_samples",
            expected: data.len(),
            got: prior_samples.num_data(),
        });
    }
    let g = prior_grad_estimate(model, &theta.alpha, prior_samples)?;
    let (ga, gb) = theta_drift(model, decoder, theta, cloud, data, &g)?;
    let mn = (cloud.num_data() * cloud.num_particles()) as f64;
    apply_theta_update(theta, &ga, &gb, h, mn, stream, iter)
}

/// `g_k = (1/M) sum_m grad_alpha U(X_hat^m)`.
pub fn prior_grad_estimate(
    model: &dyn EnergyModel,
    alpha: &[f64],
    prior_samples: &ParticleCloud,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; model.dim_alpha()];
    let count = (prior_samples.num_data() * prior_samples.num_particles()) as f64;
    for m in 0..prior_samples.num_data() {
        for n in 0..prior_samples.num_particles() {
            model.add_grad_alpha(alpha, prior_samples.particle(m, n), 1.0 / count, &mut g)?;
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Prior-estimate bias diagnostics (Assumption 3)
// ---------------------------------------------------------------------------

/// Monte Carlo estimates of the prior-gradient estimator error
/// `zeta = E_{p_alpha}[grad_alpha U] - g` over independent replications:
/// `bias_norm = ||mean zeta||` and `variance = mean ||zeta - mean zeta||^2`.
#[derive(Clone, Debug)]
pub struct ZetaBiasStats {
    pub bias_norm: f64,
    pub variance: f64,
    pub mean: Vec<f64>,
}

/// Measure the ULA prior-estimate bias for a testbed with an analytic
/// expectation. Each replication averages `chains` fresh `J`-step chains
/// (the role `M` plays in the training loop). `j_steps = 0` measures the
/// initialization-only estimator (`N(0, I)` draws).
pub fn measure_zeta_bias(
    model: &dyn EnergyModel,
    alpha: &[f64],
    gamma: f64,
    j_steps: usize,
    chains: usize,
    replications: usize,
    stream: &NoiseStream,
) -> Result<ZetaBiasStats> {
    if replications < 2 {
        return Err(Error::Config(
            "measure_zeta_bias requires replications >= 2 for the variance estimate".into(),
        ));
    }
    let expectation = model.prior_expectation(alpha).ok_or_else(|| {
        Error::MissingCapability("zeta bias measurement requires an analytic expectation".into())
    })?;
    let d = model.dim_x();
    let da = model.dim_alpha();
    let zetas: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut g = vec![0.0; da];
            let mut x = vec![0.0; d];
            for c in 0..chains {
                let init = NoiseKey::new(r as u64, NoiseRole::PriorInit, c as u64, 1);
                stream.fill_gaussian(init, &mut x);
                if j_steps > 0 {
                    ula_chain(
                        model,
                        alpha,
                        &mut x,
                        gamma,
                        j_steps,
                        stream,
                        NoiseKey::new(r as u64, NoiseRole::PriorChain, c as u64, 1),
                    )?;
                }
                model.add_grad_alpha(alpha, &x, 1.0 / chains as f64, &mut g)?;
            }
            Ok(expectation.iter().zip(&g).map(|(e, gi)| e - gi).collect())
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; da];
    for z in &zetas {
        for i in 0..da {
            mean[i] += z[i] / replications as f64;
        }
    }
    let mut variance = 0.0;
    for z in &zetas {
        variance += z
            .iter()
            .zip(&mean)
            .map(|(zi, mi)| (zi - mi) * (zi - mi))
            .sum::<f64>()
            / replications as f64;
    }
    Ok(ZetaBiasStats {
        bias_norm: norm_sq(&mean).sqrt(),
        variance,
        mean,
    })
}
