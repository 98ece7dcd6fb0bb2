//! Latent energy-based model abstraction: energy prior, Gaussian decoder, and
//! the joint negative log-likelihood gradients.
//!
//! The model is `p_theta(x, y) = p_alpha(x) p_beta(y|x)` with an unnormalized
//! energy prior `p_alpha(x) ∝ exp(-U_alpha(x))` and an isotropic Gaussian
//! decoder `p_beta(y|x) = N(y; g_beta(x), sigma^2 I)`. Writing
//! `phi_y(theta, x) = -log p_theta(x, y)` (additive constants dropped), the
//! gradients used by every algorithm in this crate are
//!
//! ```text
//! grad_alpha phi = grad_alpha U(x) - E_{p_alpha}[grad_alpha U]
//! grad_beta  phi = grad_beta V(x, y),   V = ||y - g_beta(x)||^2 / (2 sigma^2)
//! grad_x     phi = grad_x U(x) + grad_x V(x, y)
//! ```
//!
//! The prior expectation comes from the normalizing constant `Z_alpha`; models
//! with a closed form expose it through [`EnergyModel::prior_expectation`].

use crate::dynamics::ParticleCloud;
use crate::error::{Error, Result};

/// Parameter pair `theta = (alpha, beta)` as two flat vectors.
///
/// `alpha` is never empty; `beta` may be empty for decoders with no trainable
/// parameters (the identity-decoder testbeds).
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("theta: alpha must have dimension >= 1".into()));
        }
        let t = Self { alpha, beta };
        t.check_finite()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.alpha.iter().chain(self.beta.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: "theta".into(),
            })
        }
    }
}

/// Energy prior `U_alpha` with gradient oracles.
///
/// Gradient methods accumulate (`out += scale * grad`) or overwrite in place so
/// hot loops never allocate parameter-sized temporaries.
pub trait EnergyModel: Sync {
    fn dim_alpha(&self) -> usize;
    fn dim_x(&self) -> usize;

    /// `U_alpha(x)`.
    fn energy(&self, alpha: &[f64], x: &[f64]) -> Result<f64>;

    /// `out += scale * grad_alpha U_alpha(x)`.
    fn add_grad_alpha(&self, alpha: &[f64], x: &[f64], scale: f64, out: &mut [f64]) -> Result<()>;

    /// `out = grad_x U_alpha(x)`.
    fn grad_x(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `E_{p_alpha}[grad_alpha U_alpha(X)]` in closed form, when available.
    fn prior_expectation(&self, alpha: &[f64]) -> Option<Vec<f64>>;

    fn grad_alpha_vec(&self, alpha: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_alpha()];
        self.add_grad_alpha(alpha, x, 1.0, &mut out)?;
        Ok(out)
    }

    fn grad_x_vec(&self, alpha: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_x()];
        self.grad_x(alpha, x, &mut out)?;
        Ok(out)
    }
}

/// Gaussian decoder `p_beta(y|x) = N(y; g_beta(x), sigma^2 I)` through its
/// negative log-likelihood `V_beta(x, y) = ||y - g_beta(x)||^2 / (2 sigma^2)`
/// (the log-normalizer constant is dropped; only gradients matter).
pub trait Decoder: Sync {
    fn dim_beta(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    /// Decoder noise standard deviation.
    fn sigma(&self) -> f64;

    /// `out = g_beta(x)`.
    fn generate(&self, beta: &[f64], x: &[f64], out: &mut [f64]) -> Result<()>;

    /// `out += scale * grad_beta V_beta(x, y)`.
    fn add_grad_beta(
        &self,
        beta: &[f64],
        x: &[f64],
        y: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()>;

    /// `out = grad_x V_beta(x, y)`.
    fn grad_x(&self, beta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()>;

    /// `V_beta(x, y)`.
    fn nll(&self, beta: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.dim_y()];
        self.generate(beta, x, &mut g)?;
        let s2 = self.sigma() * self.sigma();
        let sq: f64 = g.iter().zip(y).map(|(gi, yi)| (yi - gi) * (yi - gi)).sum();
        Ok(sq / (2.0 * s2))
    }

    fn grad_beta_vec(&self, beta: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_beta()];
        self.add_grad_beta(beta, x, y, 1.0, &mut out)?;
        Ok(out)
    }

    fn grad_x_vec(&self, beta: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_x()];
        self.grad_x(beta, x, y, &mut out)?;
        Ok(out)
    }
}

fn check_dim(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            axis,
            expected,
            got,
        })
    }
}

// ---------------------------------------------------------------------------
// Analytic testbeds
// ---------------------------------------------------------------------------

/// Quadratic location prior `U_alpha(x) = ||x - alpha||^2 / 2` with
/// `d_alpha = d_x`. `Z_alpha` does not depend on `alpha`, so the prior
/// expectation is identically zero.
#[derive(Clone, Debug)]
pub struct GaussianLocationModel {
    pub dim: usize,
}

impl GaussianLocationModel {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        Self { dim }
    }
}

impl EnergyModel for GaussianLocationModel {
    fn dim_alpha(&self) -> usize {
        self.dim
    }

    fn dim_x(&self) -> usize {
        self.dim
    }

    fn energy(&self, alpha: &[f64], x: &[f64]) -> Result<f64> {
        check_dim("alpha", self.dim, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        Ok(x.iter()
            .zip(alpha)
            .map(|(xi, ai)| (xi - ai) * (xi - ai))
            .sum::<f64>()
            / 2.0)
    }

    fn add_grad_alpha(&self, alpha: &[f64], x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_dim("alpha", self.dim, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        check_dim("grad_alpha", self.dim, out.len())?;
        for i in 0..self.dim {
            out[i] += scale * (alpha[i] - x[i]);
        }
        Ok(())
    }

    fn grad_x(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("alpha", self.dim, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        check_dim("grad_x", self.dim, out.len())?;
        for i in 0..self.dim {
            out[i] = x[i] - alpha[i];
        }
        Ok(())
    }

    fn prior_expectation(&self, _alpha: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dim])
    }
}

/// Scale prior `U_a(x) = a ||x||^2 / 2` with a single parameter stored as
/// `alpha = log a`, so unconstrained Langevin updates cannot reach `a <= 0`.
/// All alpha-gradients carry the chain-rule factor `a`.
#[derive(Clone, Debug)]
pub struct GaussianScaleModel {
    pub dim: usize,
}

impl GaussianScaleModel {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        Self { dim }
    }

    /// `E_{p_a}[dU/da] = E[||X||^2]/2 = d/(2a)` in the raw scale coordinate.
    pub fn expected_grad_wrt_scale(a: f64, dim: usize) -> f64 {
        dim as f64 / (2.0 * a)
    }
}

impl EnergyModel for GaussianScaleModel {
    fn dim_alpha(&self) -> usize {
        1
    }

    fn dim_x(&self) -> usize {
        self.dim
    }

    fn energy(&self, alpha: &[f64], x: &[f64]) -> Result<f64> {
        check_dim("alpha", 1, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        let a = alpha[0].exp();
        Ok(a * x.iter().map(|v| v * v).sum::<f64>() / 2.0)
    }

    fn add_grad_alpha(&self, alpha: &[f64], x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        check_dim("alpha", 1, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        check_dim("grad_alpha", 1, out.len())?;
        let a = alpha[0].exp();
        out[0] += scale * a * x.iter().map(|v| v * v).sum::<f64>() / 2.0;
        Ok(())
    }

    fn grad_x(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("alpha", 1, alpha.len())?;
        check_dim("x", self.dim, x.len())?;
        check_dim("grad_x", self.dim, out.len())?;
        let a = alpha[0].exp();
        for i in 0..self.dim {
            out[i] = a * x[i];
        }
        Ok(())
    }

    fn prior_expectation(&self, alpha: &[f64]) -> Option<Vec<f64>> {
        // Chain rule: E[dU/d alpha] = a * d/(2a) = d/2, independent of a.
        let _ = alpha;
        Some(vec![self.dim as f64 / 2.0])
    }
}

/// Decoder `g(x) = x` with no trainable parameters (`d_beta = 0`).
#[derive(Clone, Debug)]
pub struct IdentityDecoder {
    pub dim: usize,
    pub sigma: f64,
}

impl IdentityDecoder {
    pub fn new(dim: usize, sigma: f64) -> Self {
        assert!(dim >= 1 && sigma > 0.0);
        Self { dim, sigma }
    }
}

impl Decoder for IdentityDecoder {
    fn dim_beta(&self) -> usize {
        0
    }

    fn dim_x(&self) -> usize {
        self.dim
    }

    fn dim_y(&self) -> usize {
        self.dim
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn generate(&self, _beta: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("x", self.dim, x.len())?;
        check_dim("y", self.dim, out.len())?;
        out.copy_from_slice(x);
        Ok(())
    }

    fn add_grad_beta(
        &self,
        _beta: &[f64],
        _x: &[f64],
        _y: &[f64],
        _scale: f64,
        _out: &mut [f64],
    ) -> Result<()> {
        Ok(())
    }

    fn grad_x(&self, _beta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("x", self.dim, x.len())?;
        check_dim("y", self.dim, y.len())?;
        let s2 = self.sigma * self.sigma;
        for i in 0..self.dim {
            out[i] = (x[i] - y[i]) / s2;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Joint log-likelihood gradients over a particle cloud
// ---------------------------------------------------------------------------

/// `(1/MN) sum_{m,n} grad_alpha U(X^{m,n}) - prior_expectation_estimate`.
pub fn phi_grad_alpha(
    model: &dyn EnergyModel,
    alpha: &[f64],
    particles: &ParticleCloud,
    prior_expectation_estimate: &[f64],
) -> Result<Vec<f64>> {
    check_dim("alpha", model.dim_alpha(), alpha.len())?;
    check_dim("particle_dim", model.dim_x(), particles.dim())?;
    check_dim(
        "prior_expectation",
        model.dim_alpha(),
        prior_expectation_estimate.len(),
    )?;
    if !prior_expectation_estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "prior expectation estimate".into(),
        });
    }
    let mut out = vec![0.0; model.dim_alpha()];
    let scale = 1.0 / (particles.num_data() * particles.num_particles()) as f64;
    for m in 0..particles.num_data() {
        for n in 0..particles.num_particles() {
            model.add_grad_alpha(alpha, particles.particle(m, n), scale, &mut out)?;
        }
    }
    for (o, e) in out.iter_mut().zip(prior_expectation_estimate) {
        *o -= e;
    }
    Ok(out)
}

/// `(1/MN) sum_{m,n} grad_beta V(X^{m,n}, y_m)`.
pub fn phi_grad_beta(
    decoder: &dyn Decoder,
    beta: &[f64],
    particles: &ParticleCloud,
    data: &crate::data::Dataset,
) -> Result<Vec<f64>> {
    check_dim("beta", decoder.dim_beta(), beta.len())?;
    check_dim("data_rows", particles.num_data(), data.len())?;
    check_dim("particle_dim", decoder.dim_x(), particles.dim())?;
    let mut out = vec![0.0; decoder.dim_beta()];
    let scale = 1.0 / (particles.num_data() * particles.num_particles()) as f64;
    for m in 0..particles.num_data() {
        let y = data.row(m);
        for n in 0..particles.num_particles() {
            decoder.add_grad_beta(beta, particles.particle(m, n), y, scale, &mut out)?;
        }
    }
    Ok(out)
}

/// `grad_x U_alpha(x) + grad_x V_beta(x, y)`.
pub fn phi_grad_x(
    model: &dyn EnergyModel,
    decoder: &dyn Decoder,
    theta: &Theta,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.dim_x()];
    let mut dec = vec![0.0; decoder.dim_x()];
    model.grad_x(&theta.alpha, x, &mut out)?;
    decoder.grad_x(&theta.beta, x, y, &mut dec)?;
    for (o, d) in out.iter_mut().zip(&dec) {
        *o += d;
    }
    Ok(out)
}

/// Max over coordinates of `|central difference - grad| / max(1, |grad|)`.
///
/// The central difference of `f` at `point` with the given `step` is the
/// independent oracle every analytic gradient in this crate is checked
/// against.
pub fn finite_diff_check<F>(
    f: F,
    grad: &[f64],
    point: &[f64],
    step: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite_diff_check: step must be positive");
    check_dim("grad", point.len(), grad.len())?;
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite difference probe at coordinate {i}"),
            });
        }
        let fd = (up - down) / (2.0 * step);
        let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::dynamics::ParticleCloud;
    use crate::rng::{NoiseKey, NoiseRole, NoiseStream};

    fn cloud_from(points: &[&[f64]], m: usize, n: usize) -> ParticleCloud {
        let d = points[0].len();
        let mut c = ParticleCloud::zeros(m, n, d);
        let mut idx = 0;
        for mm in 0..m {
            for nn in 0..n {
                c.particle_mut(mm, nn).copy_from_slice(points[idx]);
                idx += 1;
            }
        }
        c
    }

    #[test]
    fn location_grad_alpha_single_particle() {
        // alpha = 0, one particle at x = 2, analytic expectation 0 -> -2.
        let model = GaussianLocationModel::new(1);
        let cloud = cloud_from(&[&[2.0]], 1, 1);
        let g = phi_grad_alpha(&model, &[0.0], &cloud, &[0.0]).unwrap();
        assert_eq!(g, vec![-2.0]);
    }

    #[test]
    fn location_grad_alpha_vanishes_at_mode() {
        let model = GaussianLocationModel::new(2);
        let cloud = cloud_from(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]], 3, 1);
        let g = phi_grad_alpha(&model, &[0.3, -1.0], &cloud, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn location_grad_alpha_is_alpha_minus_mean() {
        // With the analytic expectation, the estimate is exactly
        // -(mean of particles - alpha).
        let model = GaussianLocationModel::new(1);
        let pts: Vec<Vec<f64>> = vec![vec![0.5], vec![-1.5], vec![2.0], vec![4.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let cloud = cloud_from(&refs, 2, 2);
        let alpha = [0.7];
        let g = phi_grad_alpha(&model, &alpha, &cloud, &[0.0]).unwrap();
        let mean = (0.5 - 1.5 + 2.0 + 4.0) / 4.0;
        assert!((g[0] - (alpha[0] - mean)).abs() < 1e-15);
    }

    #[test]
    fn scale_grad_alpha_second_moment_identity() {
        // a = 1, d = 2, particles with ||x||^2 = 2, expectation d/2 = 1 -> 0.
        let model = GaussianScaleModel::new(2);
        let cloud = cloud_from(&[&[1.0, 1.0], &[-1.0, 1.0]], 1, 2);
        let expectation = model.prior_expectation(&[0.0]).unwrap();
        assert_eq!(expectation, vec![1.0]);
        let g = phi_grad_alpha(&model, &[0.0], &cloud, &expectation).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn scale_expected_grad_matches_identity() {
        for &a in &[0.5, 1.0, 2.0] {
            for &d in &[1usize, 2, 5] {
                let want = d as f64 / (2.0 * a);
                assert!((GaussianScaleModel::expected_grad_wrt_scale(a, d) - want).abs() < 1e-15);
                // Chain-ruled trait expectation is a * d/(2a) = d/2.
                let model = GaussianScaleModel::new(d);
                let e = model.prior_expectation(&[a.ln()]).unwrap();
                assert!((e[0] - a * want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_beta_examples() {
        use crate::neural::LinearDecoder;
        // Scalar linear decoder g(x) = beta * x, sigma = 1.
        let dec = LinearDecoder::new(1, 1, 1.0, false);
        // beta = 0, x = 1, y = 1 -> grad = -(y - beta x) x = -1.
        let cloud = cloud_from(&[&[1.0]], 1, 1);
        let data = Dataset::from_rows(vec![vec![1.0]]).unwrap();
        let g = phi_grad_beta(&dec, &[0.0], &cloud, &data).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15);

        // Perfect reconstruction -> zero gradient.
        let g0 = phi_grad_beta(&dec, &[1.0], &cloud, &data).unwrap();
        assert!(g0[0].abs() < 1e-15);

        // Two particles x in {1, 2}, y = 0, beta = 1 -> average x^2 = 2.5.
        let cloud2 = cloud_from(&[&[1.0], &[2.0]], 1, 2);
        let data0 = Dataset::from_rows(vec![vec![0.0]]).unwrap();
        let g2 = phi_grad_beta(&dec, &[1.0], &cloud2, &data0).unwrap();
        assert!((g2[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn grad_x_joint_mode() {
        let model = GaussianLocationModel::new(1);
        let dec = IdentityDecoder::new(1, 1.0);
        let theta = Theta::new(vec![0.0], vec![]).unwrap();
        // x = 0, y = 1: grad_x U = 0, grad_x V = x - y = -1.
        let g = phi_grad_x(&model, &dec, &theta, &[0.0], &[1.0]).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15);
        // At the joint mode both pieces vanish.
        let theta2 = Theta::new(vec![0.5], vec![]).unwrap();
        let g2 = phi_grad_x(&model, &dec, &theta2, &[0.5], &[0.5]).unwrap();
        assert!(g2[0].abs() < 1e-15);
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        let model = GaussianScaleModel::new(3);
        let dec = IdentityDecoder::new(3, 0.7);
        let theta = Theta::new(vec![0.3], vec![]).unwrap();
        let stream = NoiseStream::new(11);
        let key = NoiseKey::new(0, NoiseRole::Diagnostic, 0, 0);
        for trial in 0..20u64 {
            let mut x = vec![0.0; 3];
            let mut y = vec![0.0; 3];
            stream.fill_gaussian(NoiseKey::new(trial, NoiseRole::Diagnostic, 0, 0), &mut x);
            stream.fill_gaussian(NoiseKey::new(trial, NoiseRole::Diagnostic, 1, 0), &mut y);
            let g = phi_grad_x(&model, &dec, &theta, &x, &y).unwrap();
            let f = |p: &[f64]| {
                model.energy(&theta.alpha, p).unwrap() + dec.nll(&theta.beta, p, &y).unwrap()
            };
            let err = finite_diff_check(f, &g, &x, 1e-5).unwrap();
            assert!(err < 1e-5, "trial {trial}: err = {err}");
        }
        let _ = key;
    }

    #[test]
    fn finite_diff_check_examples() {
        // Quadratic: central differences are exact up to rounding.
        let err = finite_diff_check(|p| p[0] * p[0] / 2.0, &[1.0], &[1.0], 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
        // Constant function, zero gradient.
        let err0 = finite_diff_check(|_| 3.5, &[0.0, 0.0], &[1.0, -2.0], 1e-4).unwrap();
        assert_eq!(err0, 0.0);
        // Non-finite probe is an error.
        assert!(finite_diff_check(|p| p[0].ln(), &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn dimension_errors_name_the_axis() {
        let model = GaussianLocationModel::new(2);
        let cloud = ParticleCloud::zeros(1, 1, 3);
        let err = phi_grad_alpha(&model, &[0.0, 0.0], &cloud, &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("particle_dim"), "message: {msg}");
    }

    #[test]
    fn gradient_averages_are_permutation_invariant() {
        // Averages over (m, n) do not depend on particle order within the
        // cloud up to exact reassociation of identical summands.
        let model = GaussianScaleModel::new(2);
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![0.3 * i as f64 - 0.7, 0.1 * i as f64])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let cloud = cloud_from(&refs, 1, 6);
        let mut rev: Vec<&[f64]> = refs.clone();
        rev.reverse();
        let cloud_rev = cloud_from(&rev, 1, 6);
        let e = model.prior_expectation(&[0.0]).unwrap();
        let a = phi_grad_alpha(&model, &[0.0], &cloud, &e).unwrap();
        let b = phi_grad_alpha(&model, &[0.0], &cloud_rev, &e).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
    }
}
