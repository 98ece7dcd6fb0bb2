//! Minimal neural components: an MLP energy network with hand-written
//! forward/backward passes, the linear generator, and the Adam optimizer.
//!
//! No autodiff framework: the energy is a scalar, so reverse mode is a single
//! delta sweep. Parameters live in one flat vector with a fixed layout
//! (per layer: weight matrix row-major `n_out x n_in`, then bias `n_out`),
//! which is also the `alpha` vector the Langevin updates act on.

use crate::error::{Error, Result};
use crate::model::{Decoder, EnergyModel};
use crate::rng::{NoiseKey, NoiseRole, NoiseStream};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "silu")]
    SiLU,
    #[serde(rename = "relu")]
    ReLU,
}

impl Activation {
    #[inline(always)]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => z * sigmoid(z),
            Activation::ReLU => z.max(0.0),
        }
    }
}

#[inline(always)]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU'(z) = sigma(z) (1 + z (1 - sigma(z))), with sigma(z) precomputed.
#[inline(always)]
fn silu_deriv(z: f64, sig: f64) -> f64 {
    sig * (1.0 + z * (1.0 - sig))
}

/// ReLU'(0) is defined as 0.
#[inline(always)]
fn relu_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Architecture of a scalar energy network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[d_in, hidden..., 1]`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Config(
                "mlp spec needs at least one hidden layer".into(),
            ));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config("mlp output dimension must be 1".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("mlp layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    /// The paper's synthetic-experiment energy net: three hidden layers of
    /// `width` units, SiLU, on a `d_in`-dimensional latent.
    pub fn three_hidden(d_in: usize, width: usize, activation: Activation) -> Self {
        Self::new(vec![d_in, width, width, width, 1], activation).unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `sum (n_in + 1) * n_out` over layers.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().map(|(i, o)| (i + 1) * o).sum()
    }

    /// `(n_in, n_out)` per layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// Byte offsets of `(weights, biases)` for layer `l` in the flat vector.
    fn layer_offset(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for (l, (n_in, n_out)) in self.layer_shapes().enumerate() {
            if l == layer {
                return (off, off + n_in * n_out);
            }
            off += (n_in + 1) * n_out;
        }
        panic!("layer index {layer} out of range");
    }
}

/// Flat parameter vector plus a revision counter; mutation invalidates any
/// tape recorded against an older revision.
#[derive(Clone, Debug)]
pub struct MlpParams {
    values: Vec<f64>,
    revision: u64,
}

impl MlpParams {
    pub fn new(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Dimension {
                axis: "mlp_params",
                expected: spec.param_count(),
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            revision: 0,
        })
    }

    /// Fan-based uniform init `U(-sqrt(6/(n_in+n_out)), +...)`, biases zero.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        Self {
            values: init_mlp_values(spec, seed),
            revision: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.values
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Structured per-layer view `(weights row-major, biases)`.
    pub fn to_layers(&self, spec: &MlpSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::with_capacity(spec.num_layers());
        for (l, (n_in, n_out)) in spec.layer_shapes().enumerate() {
            let (w_off, b_off) = spec.layer_offset(l);
            out.push((
                self.values[w_off..w_off + n_in * n_out].to_vec(),
                self.values[b_off..b_off + n_out].to_vec(),
            ));
        }
        out
    }

    /// Inverse of [`MlpParams::to_layers`]; round-trips bitwise.
    pub fn from_layers(spec: &MlpSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.param_count());
        if layers.len() != spec.num_layers() {
            return Err(Error::Dimension {
                axis: "mlp_layers",
                expected: spec.num_layers(),
                got: layers.len(),
            });
        }
        for ((n_in, n_out), (w, b)) in spec.layer_shapes().zip(layers) {
            if w.len() != n_in * n_out || b.len() != n_out {
                return Err(Error::Dimension {
                    axis: "mlp_layer_shape",
                    expected: n_in * n_out,
                    got: w.len(),
                });
            }
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        Self::new(spec, values)
    }
}

pub fn init_mlp_values(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let stream = NoiseStream::new(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (l, (n_in, n_out)) in spec.layer_shapes().enumerate() {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let key = NoiseKey::new(l as u64, NoiseRole::WeightInit, 0, 0);
        for i in 0..n_in * n_out {
            let u = stream.uniform(key, i as u64);
            values.push((2.0 * u - 1.0) * bound);
        }
        values.extend(std::iter::repeat(0.0).take(n_out));
    }
    values
}

/// Activation record from one forward pass; sufficient for both the
/// input-gradient and parameter-gradient sweeps.
#[derive(Clone, Debug)]
pub struct Tape {
    x: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    sig: Vec<Vec<f64>>,
    energy: f64,
    revision: u64,
}

impl Tape {
    pub fn energy(&self) -> f64 {
        self.energy
    }
}

fn check_revision(params: &MlpParams, tape: &Tape) -> Result<()> {
    if params.revision == tape.revision {
        Ok(())
    } else {
        Err(Error::StaleTape {
            tape: tape.revision,
            params: params.revision,
        })
    }
}

// ---------------------------------------------------------------------------
// Core passes over raw slices (shared by the tape API and the hot path)
// ---------------------------------------------------------------------------

fn forward_core(
    spec: &MlpSpec,
    values: &[f64],
    x: &[f64],
    pre: &mut [Vec<f64>],
    act: &mut [Vec<f64>],
    sig: &mut [Vec<f64>],
) -> Result<f64> {
    let layers = spec.num_layers();
    for l in 0..layers {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w_off, b_off) = spec.layer_offset(l);
        let w = &values[w_off..w_off + n_in * n_out];
        let b = &values[b_off..b_off + n_out];
        let input: &[f64] = if l == 0 { x } else { &act[l - 1] };
        let z = &mut pre[l];
        z.resize(n_out, 0.0);
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            let mut s = b[r];
            for c in 0..n_in {
                s += row[c] * input[c];
            }
            z[r] = s;
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("mlp forward pre-activation at layer {l}"),
            });
        }
        if l + 1 < layers {
            let a = &mut act[l];
            a.resize(n_out, 0.0);
            match spec.activation {
                Activation::SiLU => {
                    let sg = &mut sig[l];
                    sg.resize(n_out, 0.0);
                    for r in 0..n_out {
                        let s = sigmoid(z[r]);
                        sg[r] = s;
                        a[r] = z[r] * s;
                    }
                }
                Activation::ReLU => {
                    for r in 0..n_out {
                        a[r] = z[r].max(0.0);
                    }
                }
            }
        }
    }
    Ok(pre[layers - 1][0])
}

/// Shared delta sweep. Runs from the output down to layer 0; at each layer the
/// caller-provided hook sees `(layer, delta_z)` before the transpose product,
/// and `grad_x_out` (when given) receives `W_0^T delta_z_0`.
fn backward_core(
    spec: &MlpSpec,
    values: &[f64],
    pre: &[Vec<f64>],
    sig: &[Vec<f64>],
    delta: &mut Vec<f64>,
    delta_prev: &mut Vec<f64>,
    mut on_layer: impl FnMut(usize, &[f64]),
    mut grad_x_out: Option<&mut [f64]>,
) {
    let layers = spec.num_layers();
    delta.clear();
    delta.push(1.0);
    for l in (0..layers).rev() {
        on_layer(l, delta);
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w_off, _) = spec.layer_offset(l);
        let w = &values[w_off..w_off + n_in * n_out];
        if l == 0 {
            if let Some(out) = grad_x_out.as_deref_mut() {
                out.fill(0.0);
                for r in 0..n_out {
                    let d = delta[r];
                    if d != 0.0 {
                        let row = &w[r * n_in..(r + 1) * n_in];
                        for c in 0..n_in {
                            out[c] += row[c] * d;
                        }
                    }
                }
            }
            return;
        }
        delta_prev.clear();
        delta_prev.resize(n_in, 0.0);
        for r in 0..n_out {
            let d = delta[r];
            if d != 0.0 {
                let row = &w[r * n_in..(r + 1) * n_in];
                for c in 0..n_in {
                    delta_prev[c] += row[c] * d;
                }
            }
        }
        // delta_prev currently holds dE/d a_{l-1}; convert to dE/d z_{l-1}.
        let zs = &pre[l - 1];
        match spec.activation {
            Activation::SiLU => {
                let sg = &sig[l - 1];
                for c in 0..n_in {
                    delta_prev[c] *= silu_deriv(zs[c], sg[c]);
                }
            }
            Activation::ReLU => {
                for c in 0..n_in {
                    delta_prev[c] *= relu_deriv(zs[c]);
                }
            }
        }
        std::mem::swap(delta, delta_prev);
    }
}

// ---------------------------------------------------------------------------
// Tape API
// ---------------------------------------------------------------------------

/// Forward pass recording a [`Tape`].
pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, x: &[f64]) -> Result<(f64, Tape)> {
    if x.len() != spec.input_dim() {
        return Err(Error::Dimension {
            axis: "x",
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    let layers = spec.num_layers();
    let mut pre = vec![Vec::new(); layers];
    let mut act = vec![Vec::new(); layers.saturating_sub(1)];
    let mut sig = vec![Vec::new(); layers.saturating_sub(1)];
    let energy = forward_core(spec, &params.values, x, &mut pre, &mut act, &mut sig)?;
    Ok((
        energy,
        Tape {
            x: x.to_vec(),
            pre,
            act,
            sig,
            energy,
            revision: params.revision,
        },
    ))
}

/// Exact reverse-mode gradient of the energy w.r.t. the input.
pub fn mlp_backward_x(spec: &MlpSpec, params: &MlpParams, tape: &Tape) -> Result<Vec<f64>> {
    check_revision(params, tape)?;
    let mut out = vec![0.0; spec.input_dim()];
    let mut delta = Vec::new();
    let mut delta_prev = Vec::new();
    backward_core(
        spec,
        &params.values,
        &tape.pre,
        &tape.sig,
        &mut delta,
        &mut delta_prev,
        |_, _| {},
        Some(&mut out),
    );
    Ok(out)
}

/// Exact reverse-mode gradient of the energy w.r.t. the flat parameters.
pub fn mlp_backward_params(spec: &MlpSpec, params: &MlpParams, tape: &Tape) -> Result<Vec<f64>> {
    check_revision(params, tape)?;
    let mut out = vec![0.0; spec.param_count()];
    accumulate_param_grad(spec, &params.values, &tape.x, &tape.pre, &tape.act, &tape.sig, 1.0, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_param_grad(
    spec: &MlpSpec,
    values: &[f64],
    x: &[f64],
    pre: &[Vec<f64>],
    act: &[Vec<f64>],
    sig: &[Vec<f64>],
    scale: f64,
    out: &mut [f64],
) {
    let mut delta = Vec::new();
    let mut delta_prev = Vec::new();
    backward_core(
        spec,
        values,
        pre,
        sig,
        &mut delta,
        &mut delta_prev,
        |l, delta_z| {
            let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let (w_off, b_off) = spec.layer_offset(l);
            let input: &[f64] = if l == 0 { x } else { &act[l - 1] };
            for r in 0..n_out {
                let d = scale * delta_z[r];
                out[b_off + r] += d;
                if d != 0.0 {
                    let row = &mut out[w_off + r * n_in..w_off + (r + 1) * n_in];
                    for c in 0..n_in {
                        row[c] += d * input[c];
                    }
                }
            }
        },
        None,
    );
}

// ---------------------------------------------------------------------------
// EnergyModel adapter (hot path, thread-local scratch)
// ---------------------------------------------------------------------------

#[derive(Default)]
struct MlpScratch {
    x: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    sig: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<MlpScratch> = RefCell::new(MlpScratch::default());
}

/// MLP energy prior `U_alpha(x)`; `alpha` is the flat parameter vector.
#[derive(Clone, Debug)]
pub struct MlpEnergy {
    spec: MlpSpec,
}

impl MlpEnergy {
    pub fn new(spec: MlpSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn with_forward<R>(
        &self,
        alpha: &[f64],
        x: &[f64],
        f: impl FnOnce(&MlpSpec, &mut MlpScratch) -> R,
    ) -> Result<R> {
        if alpha.len() != self.spec.param_count() {
            return Err(Error::Dimension {
                axis: "alpha",
                expected: self.spec.param_count(),
                got: alpha.len(),
            });
        }
        if x.len() != self.spec.input_dim() {
            return Err(Error::Dimension {
                axis: "x",
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        SCRATCH.with(|s| {
            let scratch = &mut *s.borrow_mut();
            let layers = self.spec.num_layers();
            scratch.pre.resize(layers, Vec::new());
            scratch.act.resize(layers.saturating_sub(1), Vec::new());
            scratch.sig.resize(layers.saturating_sub(1), Vec::new());
            scratch.x.clear();
            scratch.x.extend_from_slice(x);
            forward_core(
                &self.spec,
                alpha,
                x,
                &mut scratch.pre,
                &mut scratch.act,
                &mut scratch.sig,
            )?;
            Ok(f(&self.spec, scratch))
        })
    }
}

impl EnergyModel for MlpEnergy {
    fn dim_alpha(&self) -> usize {
        self.spec.param_count()
    }

    fn dim_x(&self) -> usize {
        self.spec.input_dim()
    }

    fn energy(&self, alpha: &[f64], x: &[f64]) -> Result<f64> {
        self.with_forward(alpha, x, |spec, s| s.pre[spec.num_layers() - 1][0])
    }

    fn add_grad_alpha(&self, alpha: &[f64], x: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.spec.param_count() {
            return Err(Error::Dimension {
                axis: "grad_alpha",
                expected: self.spec.param_count(),
                got: out.len(),
            });
        }
        self.with_forward(alpha, x, |spec, s| {
            accumulate_param_grad(spec, alpha, &s.x, &s.pre, &s.act, &s.sig, scale, out);
        })
    }

    fn grad_x(&self, alpha: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        if out.len() != self.spec.input_dim() {
            return Err(Error::Dimension {
                axis: "grad_x",
                expected: self.spec.input_dim(),
                got: out.len(),
            });
        }
        self.with_forward(alpha, x, |spec, s| {
            backward_core(
                spec,
                alpha,
                &s.pre,
                &s.sig,
                &mut s.delta,
                &mut s.delta_prev,
                |_, _| {},
                Some(out),
            );
        })
    }

    fn prior_expectation(&self, _alpha: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

// ---------------------------------------------------------------------------
// Linear generator
// ---------------------------------------------------------------------------

/// Single linear layer `g_beta(x) = W x (+ b)` with isotropic Gaussian
/// observation noise; `beta` is `[W row-major, b]`.
#[derive(Clone, Debug)]
pub struct LinearDecoder {
    d_x: usize,
    d_y: usize,
    sigma: f64,
    bias: bool,
}

impl LinearDecoder {
    pub fn new(d_x: usize, d_y: usize, sigma: f64, bias: bool) -> Self {
        assert!(d_x >= 1 && d_y >= 1 && sigma > 0.0);
        Self {
            d_x,
            d_y,
            sigma,
            bias,
        }
    }

    /// Near-zero weight init, biases zero. The posterior step size is large
    /// relative to the decoder curvature `||W||^2 / sigma^2`, so the
    /// generator must start inside the stable region; training sets its
    /// scale from there.
    pub fn init_beta(&self, seed: u64) -> Vec<f64> {
        let stream = NoiseStream::new(seed);
        let bound = 0.01 * (6.0 / (self.d_x + self.d_y) as f64).sqrt();
        let key = NoiseKey::new(u64::MAX, NoiseRole::WeightInit, 0, 0);
        let mut beta: Vec<f64> = (0..self.d_x * self.d_y)
            .map(|i| (2.0 * stream.uniform(key, i as u64) - 1.0) * bound)
            .collect();
        if self.bias {
            beta.extend(std::iter::repeat(0.0).take(self.d_y));
        }
        beta
    }

    fn check(&self, beta: &[f64], x: &[f64], y: Option<&[f64]>) -> Result<()> {
        if beta.len() != self.dim_beta() {
            return Err(Error::Dimension {
                axis: "beta",
                expected: self.dim_beta(),
                got: beta.len(),
            });
        }
        if x.len() != self.d_x {
            return Err(Error::Dimension {
                axis: "x",
                expected: self.d_x,
                got: x.len(),
            });
        }
        if let Some(y) = y {
            if y.len() != self.d_y {
                return Err(Error::Dimension {
                    axis: "y",
                    expected: self.d_y,
                    got: y.len(),
                });
            }
        }
        Ok(())
    }

    /// Residual `(g(x) - y) / sigma^2` written into `out`.
    fn residual(&self, beta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        for r in 0..self.d_y {
            let row = &beta[r * self.d_x..(r + 1) * self.d_x];
            let mut g = if self.bias {
                beta[self.d_y * self.d_x + r]
            } else {
                0.0
            };
            for c in 0..self.d_x {
                g += row[c] * x[c];
            }
            out[r] = (g - y[r]) / s2;
        }
    }
}

impl Decoder for LinearDecoder {
    fn dim_beta(&self) -> usize {
        self.d_y * self.d_x + if self.bias { self.d_y } else { 0 }
    }

    fn dim_x(&self) -> usize {
        self.d_x
    }

    fn dim_y(&self) -> usize {
        self.d_y
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn generate(&self, beta: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(beta, x, None)?;
        for r in 0..self.d_y {
            let row = &beta[r * self.d_x..(r + 1) * self.d_x];
            let mut g = if self.bias {
                beta[self.d_y * self.d_x + r]
            } else {
                0.0
            };
            for c in 0..self.d_x {
                g += row[c] * x[c];
            }
            out[r] = g;
        }
        Ok(())
    }

    fn add_grad_beta(
        &self,
        beta: &[f64],
        x: &[f64],
        y: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check(beta, x, Some(y))?;
        let mut res = vec![0.0; self.d_y];
        self.residual(beta, x, y, &mut res);
        for r in 0..self.d_y {
            let d = scale * res[r];
            let row = &mut out[r * self.d_x..(r + 1) * self.d_x];
            for c in 0..self.d_x {
                row[c] += d * x[c];
            }
            if self.bias {
                out[self.d_y * self.d_x + r] += d;
            }
        }
        Ok(())
    }

    fn grad_x(&self, beta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(beta, x, Some(y))?;
        let mut res = vec![0.0; self.d_y];
        self.residual(beta, x, y, &mut res);
        out.fill(0.0);
        for r in 0..self.d_y {
            let d = res[r];
            let row = &beta[r * self.d_x..(r + 1) * self.d_x];
            for c in 0..self.d_x {
                out[c] += row[c] * d;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// The synthetic-experiment settings: lr 1e-2, beta1 0.5, beta2 0.999.
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. With `eps = 0` the `v_hat = 0` case (zero gradients
/// so far) yields a zero update, which makes the constant-gradient update
/// magnitude exactly `lr`.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(dim: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let update = if c.eps == 0.0 {
                let denom = v_hat.sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    c.lr * m_hat / denom
                }
            } else {
                c.lr * m_hat / (v_hat.sqrt() + c.eps)
            };
            params[i] -= update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::finite_diff_check;

    fn spec(sizes: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), act).unwrap()
    }

    #[test]
    fn zero_network_energy_is_zero() {
        let sp = spec(&[2, 4, 1], Activation::SiLU);
        let params = MlpParams::new(&sp, vec![0.0; sp.param_count()]).unwrap();
        for x in [[0.0, 0.0], [1.0, -3.0], [100.0, 0.5]] {
            let (e, _) = mlp_forward(&sp, &params, &x).unwrap();
            assert_eq!(e, 0.0);
        }
    }

    #[test]
    fn hand_computed_relu_net() {
        // 2-2-1 ReLU net: W0 = I, b0 = 0, W1 = [1, 2], b1 = 0.5.
        // For nonnegative input (x0, x1): energy = x0 + 2 x1 + 0.5.
        let sp = spec(&[2, 2, 1], Activation::ReLU);
        let params = MlpParams::new(
            &sp,
            vec![
                1.0, 0.0, 0.0, 1.0, // W0
                0.0, 0.0, // b0
                1.0, 2.0, // W1
                0.5, // b1
            ],
        )
        .unwrap();
        let (e, _) = mlp_forward(&sp, &params, &[0.3, 0.7]).unwrap();
        assert!((e - (0.3 + 2.0 * 0.7 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn silu_of_zero_is_zero() {
        assert_eq!(Activation::SiLU.apply(0.0), 0.0);
        let sp = spec(&[3, 5, 1], Activation::SiLU);
        // Zero biases, nonzero weights: zero input stays zero through every layer.
        let mut vals = vec![0.7; sp.param_count()];
        // Zero out bias slots.
        let params_template = MlpParams::new(&sp, vals.clone()).unwrap();
        let mut layers = params_template.to_layers(&sp);
        for (_, b) in layers.iter_mut() {
            b.fill(0.0);
        }
        let rebuilt = MlpParams::from_layers(&sp, &layers).unwrap();
        vals = rebuilt.values().to_vec();
        let params = MlpParams::new(&sp, vals).unwrap();
        let (e, _) = mlp_forward(&sp, &params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn zero_network_gradients() {
        let sp = spec(&[2, 3, 1], Activation::SiLU);
        let params = MlpParams::new(&sp, vec![0.0; sp.param_count()]).unwrap();
        let (_, tape) = mlp_forward(&sp, &params, &[1.0, 2.0]).unwrap();
        let gx = mlp_backward_x(&sp, &params, &tape).unwrap();
        assert!(gx.iter().all(|&v| v == 0.0));
        let gp = mlp_backward_params(&sp, &params, &tape).unwrap();
        // Output bias sees the upstream delta (1.0) directly.
        assert_eq!(*gp.last().unwrap(), 1.0);
    }

    #[test]
    fn linear_region_grad_x_is_weight_product() {
        // ReLU with all pre-activations positive: grad_x = W1 * W0.
        let sp = spec(&[2, 2, 1], Activation::ReLU);
        let params = MlpParams::new(
            &sp,
            vec![
                0.5, 0.25, 0.1, 0.9, // W0
                1.0, 1.0, // b0 keeps pre-activations positive
                2.0, -3.0, // W1
                0.0,
            ],
        )
        .unwrap();
        let (_, tape) = mlp_forward(&sp, &params, &[0.2, 0.3]).unwrap();
        let gx = mlp_backward_x(&sp, &params, &tape).unwrap();
        // Composed product: [2, -3] * [[0.5, 0.25], [0.1, 0.9]].
        let want = [2.0 * 0.5 - 3.0 * 0.1, 2.0 * 0.25 - 3.0 * 0.9];
        assert!((gx[0] - want[0]).abs() < 1e-15);
        assert!((gx[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_small_random_nets() {
        for &act in &[Activation::SiLU, Activation::ReLU] {
            for trial in 0..20u64 {
                let sp = spec(&[3, 8, 5, 1], act);
                let params = MlpParams::init(&sp, 1000 + trial);
                let stream = NoiseStream::new(77 + trial);
                let mut x = vec![0.0; 3];
                stream.fill_gaussian(NoiseKey::new(trial, NoiseRole::Diagnostic, 0, 0), &mut x);
                let (_, tape) = mlp_forward(&sp, &params, &x).unwrap();
                let gx = mlp_backward_x(&sp, &params, &tape).unwrap();
                let fx =
                    |p: &[f64]| mlp_forward(&sp, &params, p).map(|(e, _)| e).unwrap();
                let ex = finite_diff_check(fx, &gx, &x, 1e-5).unwrap();
                assert!(ex < 1e-5, "{act:?} trial {trial}: grad_x err {ex}");

                let gp = mlp_backward_params(&sp, &params, &tape).unwrap();
                let fp = |v: &[f64]| {
                    let p = MlpParams::new(&sp, v.to_vec()).unwrap();
                    mlp_forward(&sp, &p, &x).map(|(e, _)| e).unwrap()
                };
                let ep = finite_diff_check(fp, &gp, params.values(), 1e-5).unwrap();
                assert!(ep < 1e-5, "{act:?} trial {trial}: grad_params err {ep}");
            }
        }
    }

    #[test]
    fn energy_model_adapter_matches_tape_api() {
        let sp = spec(&[2, 6, 6, 1], Activation::SiLU);
        let params = MlpParams::init(&sp, 5);
        let energy = MlpEnergy::new(sp.clone());
        use crate::model::EnergyModel;
        let x = [0.4, -1.2];
        let (e, tape) = mlp_forward(&sp, &params, &x).unwrap();
        assert_eq!(
            e.to_bits(),
            energy.energy(params.values(), &x).unwrap().to_bits()
        );
        let gx_tape = mlp_backward_x(&sp, &params, &tape).unwrap();
        let gx = energy.grad_x_vec(params.values(), &x).unwrap();
        assert_eq!(gx_tape, gx);
        let gp_tape = mlp_backward_params(&sp, &params, &tape).unwrap();
        let gp = energy.grad_alpha_vec(params.values(), &x).unwrap();
        assert_eq!(gp_tape, gp);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let sp = spec(&[4, 16, 1], Activation::SiLU);
        let params = MlpParams::init(&sp, 3);
        let x = [0.1, 0.2, -0.3, 0.4];
        let (a, _) = mlp_forward(&sp, &params, &x).unwrap();
        let (b, _) = mlp_forward(&sp, &params, &x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let sp = spec(&[2, 3, 1], Activation::SiLU);
        let mut params = MlpParams::init(&sp, 9);
        let (_, tape) = mlp_forward(&sp, &params, &[1.0, 1.0]).unwrap();
        params.values_mut()[0] += 1.0;
        match mlp_backward_x(&sp, &params, &tape) {
            Err(Error::StaleTape { .. }) => {}
            other => panic!("expected StaleTape, got {other:?}"),
        }
    }

    #[test]
    fn overflow_is_a_structured_error() {
        let sp = spec(&[1, 2, 1], Activation::ReLU);
        let params = MlpParams::new(&sp, vec![1e308, 1e308, 0.0, 0.0, 1e308, 1e308, 0.0]).unwrap();
        match mlp_forward(&sp, &params, &[1e10]) {
            Err(Error::NonFinite { context }) => assert!(context.contains("layer")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn layer_roundtrip_is_bitwise() {
        let sp = spec(&[3, 7, 4, 1], Activation::ReLU);
        let params = MlpParams::init(&sp, 21);
        let layers = params.to_layers(&sp);
        let rebuilt = MlpParams::from_layers(&sp, &layers).unwrap();
        assert_eq!(params.values(), rebuilt.values());
        assert_eq!(
            sp.param_count(),
            layers.iter().map(|(w, b)| w.len() + b.len()).sum::<usize>()
        );
    }

    #[test]
    fn param_count_formula() {
        let sp = spec(&[2, 128, 128, 128, 1], Activation::SiLU);
        assert_eq!(sp.param_count(), 3 * 128 + 129 * 128 * 2 + 129);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // g = 1, lr = 0.01, beta1 = 0.5, beta2 = 0.999: m_hat = v_hat = 1.
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0]);
        assert!((p[0] + 0.01).abs() < 1e-9, "p = {}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        for _ in 0..50 {
            st.step(&mut p, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_constant_gradient_update_is_exactly_lr_at_zero_eps() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            eps: 0.0,
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        let mut prev = p[0];
        for t in 1..=10 {
            st.step(&mut p, &[3.7]);
            let update = prev - p[0];
            assert!(
                (update - 0.01).abs() < 1e-12,
                "t = {t}: update = {update}"
            );
            prev = p[0];
        }
    }

    #[test]
    fn linear_decoder_gradients_match_finite_differences() {
        let dec = LinearDecoder::new(3, 2, 0.5, true);
        let beta = dec.init_beta(4);
        let x = [0.3, -0.8, 1.1];
        let y = [0.9, -0.1];
        use crate::model::Decoder;
        let gb = dec.grad_beta_vec(&beta, &x, &y).unwrap();
        let fb = |b: &[f64]| dec.nll(b, &x, &y).unwrap();
        assert!(finite_diff_check(fb, &gb, &beta, 1e-6).unwrap() < 1e-7);
        let gx = Decoder::grad_x_vec(&dec, &beta, &x, &y).unwrap();
        let fx = |p: &[f64]| dec.nll(&beta, p, &y).unwrap();
        assert!(finite_diff_check(fx, &gx, &x, 1e-6).unwrap() < 1e-7);
    }
}
