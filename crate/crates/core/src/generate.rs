//! Near-boundary OOD image generator.
//!
//! Each source image is diffused with a learnable noise tensor, denoised
//! under its contextual prompt, decoded, and scored by the recognition
//! model's energy loss. The gradient of that loss with respect to the noise
//! is either back-propagated through the whole sampler chain
//! ([`full_noise_gradient`]) or approximated by skipping the sampler
//! Jacobian ([`skip_noise_gradient`]); the noise then takes a plain
//! gradient step. A few iterations pull the decoded image toward the
//! detector's decision boundary.

use ndarray::Array3;

use crate::clip::ImageEncoder;
use crate::config::RunConfig;
use crate::diffusion::{
    denoise_full_with_tape, denoise_vjp, diffuse, InpaintMask, Latent, NoisePredictor,
    PromptFeatures, Vae, VarianceSchedule,
};
use crate::embedding::LabelSpace;
use crate::error::{Error, Result};
use crate::nn::randn3;
use crate::prompt::ContextPrompt;
use crate::recognition::Recognizer;
use crate::scoring::{energy_loss, energy_loss_grad, LabelBank};
use crate::seeding::sample_rng;

/// Backend bundle for one generation run.
pub struct GenerationBackends<'a> {
    pub vae: &'a dyn Vae,
    pub predictor: &'a dyn NoisePredictor,
    pub recognizer: &'a dyn Recognizer,
}

/// How the noise gradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Reverse mode through the exact forward chain.
    Full,
    /// Decoder-only backward pass, sampler Jacobian replaced by identity.
    Skip,
}

/// Mutable state of one refinement loop.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub epsilon: Array3<f64>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    pub z_in: Latent,
    pub prompt: PromptFeatures,
    pub mask: InpaintMask,
}

/// A finished synthetic sample.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Array3<f64>,
    pub source_image_id: String,
    pub context: ContextPrompt,
    pub final_loss: f64,
    pub assigned_neg_label: Option<String>,
}

/// Energy loss of the recognition model on a decoded image.
pub fn generation_loss(
    x_syn: &Array3<f64>,
    recognizer: &dyn Recognizer,
    m_out: f64,
    tau: f64,
) -> Result<f64> {
    let logits = recognizer.logits(x_syn)?;
    energy_loss(&logits, m_out, tau)
}

struct ForwardPass {
    z0: Array3<f64>,
    x_syn: Array3<f64>,
    loss: f64,
    tape: crate::diffusion::DenoiseTape,
}

fn forward_chain(
    state: &GenerationState,
    backends: &GenerationBackends<'_>,
    schedule: &VarianceSchedule,
    t_start: usize,
    m_out: f64,
    tau: f64,
) -> Result<ForwardPass> {
    let z_t = diffuse(&state.z_in, schedule, t_start, &state.epsilon)?;
    let (z0, tape) = denoise_full_with_tape(
        &z_t,
        t_start,
        &state.prompt,
        &state.mask,
        schedule,
        backends.predictor,
    )?;
    let x_syn = backends.vae.decode(&z0.values)?;
    let loss = generation_loss(&x_syn, backends.recognizer, m_out, tau)?;
    Ok(ForwardPass {
        z0: z0.values,
        x_syn,
        loss,
        tape,
    })
}

/// Cotangent of the loss at the decoded image.
fn image_cotangent(
    x_syn: &Array3<f64>,
    recognizer: &dyn Recognizer,
    tau: f64,
) -> Result<Array3<f64>> {
    let logits = recognizer.logits(x_syn)?;
    let dlogits = energy_loss_grad(&logits, tau)?;
    recognizer.vjp(x_syn, &dlogits)
}

fn require_differentiable(backends: &GenerationBackends<'_>, full_chain: bool) -> Result<()> {
    if !backends.vae.is_differentiable() {
        return Err(Error::UnsupportedBackend(backends.vae.name().into()));
    }
    if !backends.recognizer.is_differentiable() {
        return Err(Error::UnsupportedBackend(backends.recognizer.name().into()));
    }
    if full_chain && !backends.predictor.is_differentiable() {
        return Err(Error::UnsupportedBackend(backends.predictor.name().into()));
    }
    Ok(())
}

/// Exact noise gradient: reverse mode through diffuse, the whole sampler,
/// the decoder, and the recognition model.
pub fn full_noise_gradient(
    state: &GenerationState,
    backends: &GenerationBackends<'_>,
    schedule: &VarianceSchedule,
    t_start: usize,
    m_out: f64,
    tau: f64,
) -> Result<Array3<f64>> {
    require_differentiable(backends, true)?;
    let pass = forward_chain(state, backends, schedule, t_start, m_out, tau)?;
    let dx = image_cotangent(&pass.x_syn, backends.recognizer, tau)?;
    let dz0 = backends.vae.decode_vjp(&pass.z0, &dx)?;
    let dz_start = denoise_vjp(
        &pass.tape,
        &state.prompt,
        &state.mask,
        schedule,
        backends.predictor,
        &dz0,
    )?;
    Ok(dz_start * (1.0 - schedule.alpha_bar(t_start)).sqrt())
}

/// Skip-gradient approximation: the loss gradient at the decoded image is
/// pulled back through the decoder only (landing in latent shape), scaled by
/// `rho`; the sampler chain is treated as the identity.
pub fn skip_noise_gradient(
    state: &GenerationState,
    backends: &GenerationBackends<'_>,
    schedule: &VarianceSchedule,
    t_start: usize,
    m_out: f64,
    tau: f64,
    rho: f64,
) -> Result<Array3<f64>> {
    require_differentiable(backends, false)?;
    let pass = forward_chain(state, backends, schedule, t_start, m_out, tau)?;
    let dx = image_cotangent(&pass.x_syn, backends.recognizer, tau)?;
    let dz0 = backends.vae.decode_vjp(&pass.z0, &dx)?;
    Ok(dz0 * rho)
}

/// Run the iterative refinement loop for one source image.
///
/// The noise starts from the seeded unit Gaussian stream for
/// `(seed, source_id)` and takes `K` update steps; in skip mode the
/// configured `noise_step` is the combined `r * rho` scalar, in full mode it
/// is the plain learning rate.
pub fn refine(
    source_id: &str,
    context: ContextPrompt,
    z_in: Latent,
    prompt: PromptFeatures,
    config: &RunConfig,
    schedule: &VarianceSchedule,
    backends: &GenerationBackends<'_>,
    mode: GradientMode,
) -> Result<(SyntheticSample, GenerationState)> {
    let t_start = config.start_timestep();
    let (c, h, w) = z_in.values.dim();
    let mask = InpaintMask::ones(h, w);
    let mut rng = sample_rng(config.seed, "refine-noise", source_id);
    let mut state = GenerationState {
        epsilon: randn3((c, h, w), 1.0, &mut rng),
        iteration: 0,
        loss_history: Vec::with_capacity(config.refine_iters),
        z_in,
        prompt,
        mask,
    };

    let mut last_image: Option<Array3<f64>> = None;
    for k in 0..config.refine_iters {
        let pass = forward_chain(
            &state,
            backends,
            schedule,
            t_start,
            config.energy_margin,
            config.energy_tau,
        )?;
        if !pass.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: k });
        }
        state.loss_history.push(pass.loss);
        state.iteration = k + 1;

        let grad = match mode {
            GradientMode::Full => full_noise_gradient(
                &state,
                backends,
                schedule,
                t_start,
                config.energy_margin,
                config.energy_tau,
            )?,
            GradientMode::Skip => skip_noise_gradient(
                &state,
                backends,
                schedule,
                t_start,
                config.energy_margin,
                config.energy_tau,
                1.0,
            )?,
        };
        state.epsilon = &state.epsilon - &(grad * config.noise_step);
        last_image = Some(pass.x_syn);
    }

    let mut image = last_image.expect("refine_iters >= 1 is validated");
    // Quantize so the archived sample and the in-memory one are identical.
    image.mapv_inplace(|v| v as f32 as f64);
    let final_loss = *state.loss_history.last().expect("K >= 1");
    Ok((
        SyntheticSample {
            image,
            source_image_id: source_id.to_string(),
            context,
            final_loss,
            assigned_neg_label: None,
        },
        state,
    ))
}

/// Assign the nearest negative label to a synthetic sample by cosine
/// similarity; ties break to the lowest label index.
pub fn assign_negative_label(
    mut sample: SyntheticSample,
    labels: &LabelSpace,
    bank: &LabelBank,
    encoder: &dyn ImageEncoder,
) -> Result<SyntheticSample> {
    if labels.num_neg() == 0 {
        return Err(Error::EmptyLabelSet("neg"));
    }
    bank.check_against(labels)?;
    let embed = encoder.embed_image(&sample.image)?;
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, row) in bank.neg.rows().into_iter().enumerate() {
        let sim = row.dot(embed.values());
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    sample.assigned_neg_label = Some(labels.neg_labels[best].clone());
    Ok(sample)
}

/// Manifest row for one synthetic sample (JSON-lines).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticRecord {
    pub source_image_id: String,
    pub context_elements: Vec<String>,
    pub loss_history: Vec<f64>,
    pub assigned_neg_label: Option<String>,
    pub archive_path: String,
}
