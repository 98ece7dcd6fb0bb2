//! Non-asymptotic convergence bounds and their empirical verification on the
//! analytic testbeds.
//!
//! The parameter-error bound for the full algorithm with exact prior
//! expectation is
//!
//! ```text
//! E[||theta_k - theta*||^2]^(1/2)
//!   <= (1 - mu h)^k W2_init + C1 sqrt(h) + C2 / sqrt(MN)
//! C1 = 1.65 (L/mu) sqrt((d_theta + M N d_x) / (MN)),  C2 = sqrt(d_theta / mu)
//! ```
//!
//! valid for `0 < h <= 2/(mu + L)`. The ULA-estimated variant adds bias terms
//! controlled by `(delta, sigma_bias)`:
//!
//! ```text
//! C1~ = C1 + sigma^2 / (1.65 L (MN)^(3/2) sqrt(d_theta + MN d_x) + sigma MN sqrt(mu))
//! C2~ = delta / mu + sqrt(d_theta / mu)
//! ```
//!
//! The module also hosts the rescaling-equivalence harness: the interacting
//! system and its `X = sqrt(MN) Z` rescaling driven by shared noise must
//! produce identical parameter trajectories.

use crate::data::Dataset;
use crate::dynamics::{posterior_particle_step, theta_step_exact, ParticleCloud};
use crate::error::{Error, Result};
use crate::eval::parameter_error;
use crate::model::{Decoder, EnergyModel, GaussianLocationModel, IdentityDecoder, Theta};
use crate::rng::{NoiseKey, NoiseRole, NoiseStream};
use crate::trainer::{run, Algorithm, RunConfig, TrainContext};
use serde::{Deserialize, Serialize};

/// Strong-convexity / smoothness constants of the joint negative
/// log-likelihood, plus the problem sizes entering the bounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConvexityProfile {
    pub mu: f64,
    pub l_smooth: f64,
    pub d_theta: usize,
    pub d_x: usize,
    pub m: usize,
    pub n: usize,
}

impl ConvexityProfile {
    pub fn new(mu: f64, l_smooth: f64, d_theta: usize, d_x: usize, m: usize, n: usize) -> Result<Self> {
        if !(mu > 0.0) || !(l_smooth >= mu) {
            return Err(Error::Config(format!(
                "convexity profile needs 0 < mu <= L, got mu = {mu}, L = {l_smooth}"
            )));
        }
        Ok(Self {
            mu,
            l_smooth,
            d_theta,
            d_x,
            m,
            n,
        })
    }

    /// Admissible step bound `2/(mu + L)`.
    pub fn h_max(&self) -> f64 {
        2.0 / (self.mu + self.l_smooth)
    }

    pub fn validate_step(&self, h: f64) -> Result<()> {
        if h > 0.0 && h <= self.h_max() {
            Ok(())
        } else {
            Err(Error::StepRestriction {
                h,
                h_max: self.h_max(),
            })
        }
    }

    fn mn(&self) -> f64 {
        (self.m * self.n) as f64
    }

    fn c1(&self) -> f64 {
        1.65 * (self.l_smooth / self.mu)
            * ((self.d_theta as f64 + self.mn() * self.d_x as f64) / self.mn()).sqrt()
    }

    fn c2(&self) -> f64 {
        (self.d_theta as f64 / self.mu).sqrt()
    }
}

/// Bias (`delta`) and deviation (`sigma_bias`) of the ULA prior-gradient
/// estimator. Named to disambiguate from the decoder noise std.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BiasProfile {
    pub delta: f64,
    pub sigma_bias: f64,
}

/// Exact-expectation bound at iteration `k` from initial distance `w2_init`.
pub fn bound_exact(p: &ConvexityProfile, h: f64, k: u64, w2_init: f64) -> Result<f64> {
    p.validate_step(h)?;
    Ok((1.0 - p.mu * h).powf(k as f64) * w2_init + p.c1() * h.sqrt() + p.c2() / p.mn().sqrt())
}

/// ULA-estimated-expectation bound; reduces bitwise to [`bound_exact`] at
/// `delta = sigma_bias = 0`.
pub fn bound_inexact(
    p: &ConvexityProfile,
    b: &BiasProfile,
    h: f64,
    k: u64,
    w2_init: f64,
) -> Result<f64> {
    p.validate_step(h)?;
    let mn = p.mn();
    let extra = b.sigma_bias * b.sigma_bias
        / (1.65 * p.l_smooth * mn.powf(1.5) * (p.d_theta as f64 + mn * p.d_x as f64).sqrt()
            + b.sigma_bias * mn * p.mu.sqrt());
    let c1 = p.c1() + extra;
    let c2 = b.delta / p.mu + p.c2();
    Ok((1.0 - p.mu * h).powf(k as f64) * w2_init + c1 * h.sqrt() + c2 / mn.sqrt())
}

/// `(mu, L)` for the Gaussian location testbed: extreme eigenvalues of the
/// per-coordinate joint Hessian
/// `[[1/vp, -1/vp], [-1/vp, 1/vp + 1/vl]]`
/// (independent of the dimension; for unit variances `(3 -+ sqrt 5)/2`).
pub fn gaussian_location_profile(
    d_x: usize,
    prior_var: f64,
    lik_var: f64,
    m: usize,
    n: usize,
) -> Result<ConvexityProfile> {
    if prior_var <= 0.0 || lik_var <= 0.0 {
        return Err(Error::Config("variances must be positive".into()));
    }
    let tr = 2.0 / prior_var + 1.0 / lik_var;
    let det = 1.0 / (prior_var * lik_var);
    let disc = (tr * tr - 4.0 * det).sqrt();
    ConvexityProfile::new((tr - disc) / 2.0, (tr + disc) / 2.0, d_x, d_x, m, n)
}

/// Closed-form maximizer of the marginal likelihood for the location
/// testbed: `p_alpha(y) = N(y; alpha, (vp + vl) I)`, so `alpha* = mean(y)`.
pub fn gaussian_location_theta_star(data: &Dataset) -> Theta {
    Theta {
        alpha: data.mean(),
        beta: Vec::new(),
    }
}

/// Over-estimate of the initial Wasserstein distance used when checking the
/// bound empirically: any over-estimate keeps the inequality valid.
/// `||theta0 - theta*|| + sqrt(d_theta/(mu MN)) + sqrt(d_x) + posterior-mode radius`,
/// where `sqrt(d_x)` bounds the rescaled `N(0, I)` cloud radius.
pub fn location_w2_overestimate(
    theta0: &Theta,
    theta_star: &Theta,
    p: &ConvexityProfile,
    data: &Dataset,
    decoder_sigma: f64,
) -> f64 {
    let s2 = decoder_sigma * decoder_sigma;
    let mut mode_sq = 0.0;
    for m in 0..data.len() {
        for (yi, ai) in data.row(m).iter().zip(&theta_star.alpha) {
            let mode = (yi / s2 + ai) / (1.0 + 1.0 / s2);
            mode_sq += mode * mode / data.len() as f64;
        }
    }
    parameter_error(theta0, theta_star)
        + (p.d_theta as f64 / (p.mu * p.mn())).sqrt()
        + (p.d_x as f64).sqrt()
        + mode_sq.sqrt()
}

// ---------------------------------------------------------------------------
// Rescaling equivalence
// ---------------------------------------------------------------------------

/// Simulate the interacting system and its `X = sqrt(MN) Z` rescaling with
/// shared noise keys; returns the max parameter divergence over `steps`.
/// `desync` deliberately shifts the scaled system's particle-noise keys, as a
/// sensitivity control for the harness itself.
#[allow(clippy::too_many_arguments)]
pub fn rescaling_equivalence_check(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    data: &Dataset,
    n_particles: usize,
    h: f64,
    steps: u64,
    seed: u64,
    theta0: &Theta,
    desync: bool,
) -> Result<f64> {
    let stream = NoiseStream::new(seed);
    let m = data.len();
    let n = n_particles;
    let d = model.dim_x();
    let da = model.dim_alpha();
    let db = decoder.dim_beta();
    let mn = (m * n) as f64;
    let scale = mn.sqrt();
    let all: Vec<usize> = (0..m).collect();
    let desync_offset = if desync { 1 << 40 } else { 0 };

    let mut theta_a = theta0.clone();
    let mut cloud_a = ParticleCloud::standard_normal(m, n, d, &stream);
    let mut theta_b = theta0.clone();
    let mut z = cloud_a.clone();
    for v in z.as_mut_slice() {
        *v /= scale;
    }

    let mut worst = 0.0f64;
    let mut x_buf = vec![0.0; d];
    let mut xi = vec![0.0; da.max(db).max(d)];
    for k in 0..steps {
        // Original system, library kernels.
        let next_a =
            theta_step_exact(model, decoder, &theta_a, &cloud_a, data, h, &stream, k)?;
        posterior_particle_step(
            model, decoder, &theta_a, &mut cloud_a, data, h, &stream, k, &all,
        )?;
        theta_a = next_a;

        // Scaled system, same noise keys, evaluated at X = sqrt(MN) Z.
        let expectation = model.prior_expectation(&theta_b.alpha).ok_or_else(|| {
            Error::MissingCapability("rescaling check needs an analytic expectation".into())
        })?;
        let mut ga = vec![0.0; da];
        let mut gb = vec![0.0; db];
        for mi in 0..m {
            let y = data.row(mi);
            for ni in 0..n {
                let zp = z.particle(mi, ni);
                for i in 0..d {
                    x_buf[i] = scale * zp[i];
                }
                model.add_grad_alpha(&theta_b.alpha, &x_buf, 1.0 / mn, &mut ga)?;
                decoder.add_grad_beta(&theta_b.beta, &x_buf, y, 1.0 / mn, &mut gb)?;
            }
        }
        for (g, e) in ga.iter_mut().zip(&expectation) {
            *g -= e;
        }
        let noise_scale = (2.0 * h / mn).sqrt();
        let mut next_b = theta_b.clone();
        stream.fill_gaussian(NoiseKey::new(k, NoiseRole::ThetaAlpha, 0, 0), &mut xi[..da]);
        for i in 0..da {
            next_b.alpha[i] += -h * ga[i] + noise_scale * xi[i];
        }
        if db > 0 {
            stream.fill_gaussian(NoiseKey::new(k, NoiseRole::ThetaBeta, 0, 0), &mut xi[..db]);
            for i in 0..db {
                next_b.beta[i] += -h * gb[i] + noise_scale * xi[i];
            }
        }
        let mut gu = vec![0.0; d];
        let mut gv = vec![0.0; d];
        let h_over_s = h / scale;
        for mi in 0..m {
            let y = data.row(mi);
            for ni in 0..n {
                let zp = z.particle_mut(mi, ni);
                for i in 0..d {
                    x_buf[i] = scale * zp[i];
                }
                model.grad_x(&theta_b.alpha, &x_buf, &mut gu)?;
                decoder.grad_x(&theta_b.beta, &x_buf, y, &mut gv)?;
                for i in 0..d {
                    let g = gu[i] + gv[i];
                    zp[i] -= h_over_s * g;
                }
                stream.fill_gaussian(
                    NoiseKey::new(k + desync_offset, NoiseRole::Particle, mi as u64, ni as u64),
                    &mut xi[..d],
                );
                for i in 0..d {
                    zp[i] += noise_scale * xi[i];
                }
            }
        }
        theta_b = next_b;

        let div = theta_a
            .alpha
            .iter()
            .chain(theta_a.beta.iter())
            .zip(theta_b.alpha.iter().chain(theta_b.beta.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(div);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Stationary concentration check
// ---------------------------------------------------------------------------

/// Grid settings for the long-run concentration check on the location
/// testbed.
#[derive(Clone, Debug)]
pub struct ConcentrationConfig {
    pub n_values: Vec<usize>,
    pub h_values: Vec<f64>,
    pub iterations: u64,
    pub burn_in: u64,
    /// Post-burn-in sampling stride for the RMS estimate.
    pub metric_cadence: u64,
    pub seeds: Vec<u64>,
    /// Initial alpha, every coordinate (far starts exercise the transient term).
    pub theta0_alpha: f64,
    pub decoder_sigma: f64,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            n_values: vec![1, 4, 16, 64],
            h_values: vec![0.05, 0.1],
            iterations: 2000,
            burn_in: 1000,
            metric_cadence: 5,
            seeds: (0..20).collect(),
            theta0_alpha: 3.0,
            decoder_sigma: 1.0,
        }
    }
}

/// One grid cell: empirical post-burn-in RMS parameter error against the
/// concentration envelope `sqrt(d_theta/(mu MN))` and the full bound.
#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationCell {
    pub n: usize,
    pub h: f64,
    pub rms_error: f64,
    pub envelope: f64,
    pub bound: f64,
    pub w2_init: f64,
}

/// Long-run sampling of the full exact algorithm on the unit-variance
/// location testbed over an `(N, h)` grid. The RMS pools post-burn-in
/// iterates across seeds; the bound is evaluated at the burn-in iteration
/// with the over-estimated initial distance, so `rms <= bound` is a valid
/// check of the inequality at every later iterate.
pub fn concentration_check(
    data: &Dataset,
    cfg: &ConcentrationConfig,
) -> Result<Vec<ConcentrationCell>> {
    let d = data.dim();
    let model = GaussianLocationModel::new(d);
    let decoder = IdentityDecoder::new(d, cfg.decoder_sigma);
    let theta_star = gaussian_location_theta_star(data);
    let theta0 = Theta::new(vec![cfg.theta0_alpha; d], Vec::new())?;
    let mut cells = Vec::new();
    for &n in &cfg.n_values {
        for &h in &cfg.h_values {
            let profile = gaussian_location_profile(
                d,
                1.0,
                cfg.decoder_sigma * cfg.decoder_sigma,
                data.len(),
                n,
            )?;
            profile.validate_step(h)?;
            let mut sq = 0.0;
            let mut count = 0usize;
            for &seed in &cfg.seeds {
                let rc = RunConfig {
                    algorithm: Algorithm::FullExact,
                    n_particles: n,
                    iterations: cfg.iterations,
                    prior_steps: 1,
                    h,
                    gamma: 0.1,
                    batch_size: 0,
                    posterior_steps: 0,
                    warmup: None,
                    seed,
                    metric_cadence: cfg.metric_cadence.max(1),
                    mmd_eval: None,
                    alpha_optimizer: Default::default(),
                    beta_optimizer: Default::default(),
                    zero_noise: false,
                };
                let ctx = TrainContext {
                    model: &model,
                    decoder: &decoder,
                    data,
                    theta_star: Some(theta_star.clone()),
                };
                let out = run(&rc, &ctx, theta0.clone())?;
                for rec in &out.metrics {
                    if rec.iteration > cfg.burn_in {
                        let e = rec.param_error.expect("testbed runs track theta_star");
                        sq += e * e;
                        count += 1;
                    }
                }
            }
            let rms = (sq / count as f64).sqrt();
            let envelope = (profile.d_theta as f64 / (profile.mu * profile.mn())).sqrt();
            let w2_init =
                location_w2_overestimate(&theta0, &theta_star, &profile, data, cfg.decoder_sigma);
            let bound = bound_exact(&profile, h, cfg.burn_in, w2_init)?;
            cells.push(ConcentrationCell {
                n,
                h,
                rms_error: rms,
                envelope,
                bound,
                w2_init,
            });
        }
    }
    Ok(cells)
}

/// Fixed dataset for the location testbed: `y ~ N(center, (vp + vl) I)`
/// drawn once per seed.
pub fn location_testbed_data(m: usize, d: usize, center: f64, seed: u64) -> Dataset {
    let stream = NoiseStream::new(seed);
    let mut rows = Vec::with_capacity(m);
    let total_sd = 2.0f64.sqrt();
    let mut buf = vec![0.0; d];
    for i in 0..m {
        stream.fill_gaussian(NoiseKey::new(0, NoiseRole::Diagnostic, i as u64, 7), &mut buf);
        rows.push(buf.iter().map(|z| center + total_sd * z).collect());
    }
    Dataset::from_rows(rows).expect("testbed data")
}
