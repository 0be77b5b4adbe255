//! Deterministic latent-diffusion engine.
//!
//! The forward (noising) process maps a clean latent to timestep `t` in one
//! shot:
//!
//! ```text
//! z_t = sqrt(abar_t) * z_in + sqrt(1 - abar_t) * eps
//! ```
//!
//! and the deterministic reverse step reconstructs the previous latent from
//! the predicted noise `e = predictor(z_t, t, P, M)`:
//!
//! ```text
//! z_{t-1} = sqrt(abar_{t-1}) * (z_t - sqrt(1 - abar_t) * e) / sqrt(abar_t)
//!           + sqrt(1 - abar_{t-1}) * e
//! ```
//!
//! with `abar_0 = 1`, so a predictor that returns the exact noise used in
//! the forward pass inverts it exactly. Every operation is linear given the
//! predictor outputs, which makes reverse-mode sweeps through the whole
//! sampler straightforward; [`denoise_vjp`] implements that sweep.

pub mod backends;
pub mod external;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

pub use backends::{IdentityVae, LinearPredictor, ToyUnet, ToyVae};
pub use external::ExternalDiffusion;

/// The per-step alphas and their running products.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    /// Build directly from per-step alphas in `(0, 1]`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidBetaRange {
                start: f64::NAN,
                end: f64::NAN,
            });
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(VarianceSchedule { alphas, alpha_bars })
    }

    pub fn horizon(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product `abar_t` for `t` in `0..=T`; `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear beta schedule: `alpha_t = 1 - beta_t` with `beta` interpolated
/// from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange { t: 0, max: 0 });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidBetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let alphas = (0..t)
        .map(|i| {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            1.0 - (beta_start + (beta_end - beta_start) * frac)
        })
        .collect();
    VarianceSchedule::from_alphas(alphas)
}

/// A latent tensor tagged with its diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn clean(values: Array3<f64>) -> Self {
        Latent {
            values,
            timestep: 0,
        }
    }
}

/// Conditioning features from the diffusion-side text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeatures {
    pub values: Array1<f64>,
}

impl PromptFeatures {
    pub fn new(values: Array1<f64>) -> Self {
        PromptFeatures { values }
    }

    /// Unconditioned generation.
    pub fn null(dim: usize) -> Self {
        PromptFeatures {
            values: Array1::zeros(dim),
        }
    }
}

/// Spatial 0/1 inpainting mask; all ones means regenerate everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintMask {
    values: Array2<f64>,
}

impl InpaintMask {
    pub fn ones(height: usize, width: usize) -> Self {
        InpaintMask {
            values: Array2::ones((height, width)),
        }
    }

    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 1],
                got: vec![],
                context: "mask entries must be 0 or 1",
            });
        }
        Ok(InpaintMask { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Noise predictor `e(z_t, t, P, M)`; the only nonlinear piece of a
/// denoising step.
pub trait NoisePredictor: Send + Sync {
    fn predict(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
    ) -> Result<Array3<f64>>;

    /// Cotangent with respect to `z`: maps `dL/d predict` to `dL/dz`.
    fn vjp(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
        cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>>;

    fn is_differentiable(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str;
}

/// Latent encoder/decoder pair.
pub trait Vae: Send + Sync {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>>;
    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>>;

    /// Cotangent through `decode`: maps `dL/d image` to `dL/d latent`.
    fn decode_vjp(&self, latent: &Array3<f64>, cotangent: &Array3<f64>) -> Result<Array3<f64>>;

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> (usize, usize, usize);

    /// Declared mean-absolute reconstruction bound on in-domain images.
    fn reconstruction_bound(&self) -> f64;

    fn is_differentiable(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str;
}

fn check_shape(a: &Array3<f64>, b: &Array3<f64>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        let (x, y, z) = a.dim();
        let (u, v, w) = b.dim();
        return Err(Error::ShapeMismatch {
            expected: vec![x, y, z],
            got: vec![u, v, w],
            context,
        });
    }
    Ok(())
}

fn check_timestep(t: usize, schedule: &VarianceSchedule) -> Result<()> {
    if t == 0 || t > schedule.horizon() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.horizon(),
        });
    }
    Ok(())
}

/// Forward noising to timestep `t`:
/// `sqrt(abar_t) * z_in + sqrt(1 - abar_t) * eps`.
pub fn diffuse(
    z_in: &Latent,
    schedule: &VarianceSchedule,
    t: usize,
    eps: &Array3<f64>,
) -> Result<Latent> {
    check_timestep(t, schedule)?;
    check_shape(&z_in.values, eps, "diffuse noise")?;
    let abar = schedule.alpha_bar(t);
    let values = &z_in.values * abar.sqrt() + eps * (1.0 - abar).sqrt();
    Ok(Latent { values, timestep: t })
}

/// Coefficients of one deterministic reverse step:
/// `z_{t-1} = k_carry * z_t + k_noise * e`.
fn step_coefficients(schedule: &VarianceSchedule, t: usize) -> (f64, f64) {
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let k_carry = (abar_prev / abar_t).sqrt();
    let k_noise = (1.0 - abar_prev).sqrt() - k_carry * (1.0 - abar_t).sqrt();
    (k_carry, k_noise)
}

/// One deterministic reverse step from `t` to `t - 1`.
pub fn denoise_step(
    z_t: &Latent,
    t: usize,
    prompt: &PromptFeatures,
    mask: &InpaintMask,
    schedule: &VarianceSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    check_timestep(t, schedule)?;
    let e = predictor.predict(&z_t.values, t, prompt, mask)?;
    check_shape(&z_t.values, &e, "predictor output")?;
    let (k_carry, k_noise) = step_coefficients(schedule, t);
    let values = &z_t.values * k_carry + &e * k_noise;
    Ok(Latent {
        values,
        timestep: t - 1,
    })
}

/// Full reverse pass from `t_start` down to 0.
pub fn denoise_full(
    z_start: &Latent,
    t_start: usize,
    prompt: &PromptFeatures,
    mask: &InpaintMask,
    schedule: &VarianceSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Latent> {
    Ok(denoise_full_with_tape(z_start, t_start, prompt, mask, schedule, predictor)?.0)
}

/// Saved forward states for the reverse-mode sweep: `states[i]` is the
/// latent at timestep `t_start - i`.
#[derive(Debug, Clone)]
pub struct DenoiseTape {
    pub t_start: usize,
    pub states: Vec<Array3<f64>>,
}

/// Reverse pass that also records every intermediate latent.
pub fn denoise_full_with_tape(
    z_start: &Latent,
    t_start: usize,
    prompt: &PromptFeatures,
    mask: &InpaintMask,
    schedule: &VarianceSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<(Latent, DenoiseTape)> {
    check_timestep(t_start, schedule)?;
    let mut states = Vec::with_capacity(t_start + 1);
    states.push(z_start.values.clone());
    let mut current = Latent {
        values: z_start.values.clone(),
        timestep: t_start,
    };
    for t in (1..=t_start).rev() {
        current = denoise_step(&current, t, prompt, mask, schedule, predictor)?;
        states.push(current.values.clone());
    }
    Ok((current, DenoiseTape { t_start, states }))
}

/// Reverse-mode sweep through the recorded sampler chain: maps a cotangent
/// on `z_0` to the cotangent on `z_{t_start}`.
pub fn denoise_vjp(
    tape: &DenoiseTape,
    prompt: &PromptFeatures,
    mask: &InpaintMask,
    schedule: &VarianceSchedule,
    predictor: &dyn NoisePredictor,
    cotangent_z0: &Array3<f64>,
) -> Result<Array3<f64>> {
    if !predictor.is_differentiable() {
        return Err(Error::UnsupportedBackend(predictor.name().into()));
    }
    let mut grad = cotangent_z0.clone();
    // Forward visited t = t_start, t_start-1, ..., 1; walk back up.
    for t in 1..=tape.t_start {
        let z_t = &tape.states[tape.t_start - t];
        let (k_carry, k_noise) = step_coefficients(schedule, t);
        let through_predictor = predictor.vjp(z_t, t, prompt, mask, &(&grad * k_noise))?;
        grad = &grad * k_carry + &through_predictor;
    }
    Ok(grad)
}
