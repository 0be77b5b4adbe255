//! Concrete diffusion backends.
//!
//! Two VAE implementations ship: [`IdentityVae`] keeps latent space equal to
//! pixel space so chain oracles are exact, and [`ToyVae`] is a trainable
//! block-linear autoencoder. [`ToyUnet`] is a two-layer convolutional noise
//! predictor conditioned on timestep and prompt features through per-channel
//! affine modulation. [`LinearPredictor`] exists for gradient oracles.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;

use super::{diffuse, InpaintMask, Latent, NoisePredictor, PromptFeatures, Vae, VarianceSchedule};

/// Latent space equals pixel space.
#[derive(Debug, Clone, Default)]
pub struct IdentityVae;

impl Vae for IdentityVae {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(latent.clone())
    }

    fn decode_vjp(&self, _latent: &Array3<f64>, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(cotangent.clone())
    }

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        image_shape
    }

    fn reconstruction_bound(&self) -> f64 {
        0.0
    }

    fn name(&self) -> &'static str {
        "identity-vae"
    }
}

/// Block-linear autoencoder: one shared `k x k` analysis kernel downsamples
/// every block to a single latent value per channel, one shared synthesis
/// kernel expands it back. Initialized at block-mean / replicate, trained by
/// gradient descent on reconstruction error.
#[derive(Debug, Clone)]
pub struct ToyVae {
    factor: usize,
    enc_w: Array2<f64>,
    dec_w: Array2<f64>,
}

impl ToyVae {
    pub fn new(factor: usize) -> Self {
        let norm = (factor * factor) as f64;
        ToyVae {
            factor,
            enc_w: Array2::from_elem((factor, factor), 1.0 / norm),
            dec_w: Array2::ones((factor, factor)),
        }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    fn check_divisible(&self, image: &Array3<f64>) -> Result<()> {
        let (_, h, w) = image.dim();
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.factor],
                got: vec![h, w],
                context: "image dims must divide the VAE block factor",
            });
        }
        Ok(())
    }

    /// Mean absolute reconstruction error over a batch.
    pub fn reconstruction_mae(&self, images: &[Array3<f64>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for img in images {
            let recon = self.decode(&self.encode(img)?)?;
            total += (&recon - img).mapv(f64::abs).sum();
            count += img.len();
        }
        Ok(total / count as f64)
    }

    /// Gradient descent on mean squared reconstruction error.
    pub fn train(&mut self, images: &[Array3<f64>], epochs: usize, lr: f64) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::EmptyTrainingSet("toy vae"));
        }
        let k = self.factor;
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut epoch_loss = 0.0;
            for img in images {
                let z = self.encode(img)?;
                let recon = self.decode(&z)?;
                let resid = &recon - img;
                let n = img.len() as f64;
                epoch_loss += resid.mapv(|r| r * r).sum() / n;

                // d loss / d recon
                let dout = resid.mapv(|r| 2.0 * r / n);
                let (c, zh, zw) = z.dim();
                let mut d_dec: Array2<f64> = Array2::zeros((k, k));
                let mut dz: Array3<f64> = Array3::zeros((c, zh, zw));
                for ch in 0..c {
                    for i in 0..zh {
                        for j in 0..zw {
                            for u in 0..k {
                                for v in 0..k {
                                    let g = dout[[ch, k * i + u, k * j + v]];
                                    d_dec[[u, v]] += g * z[[ch, i, j]];
                                    dz[[ch, i, j]] += g * self.dec_w[[u, v]];
                                }
                            }
                        }
                    }
                }
                let mut d_enc: Array2<f64> = Array2::zeros((k, k));
                for ch in 0..c {
                    for i in 0..zh {
                        for j in 0..zw {
                            for u in 0..k {
                                for v in 0..k {
                                    d_enc[[u, v]] +=
                                        dz[[ch, i, j]] * img[[ch, k * i + u, k * j + v]];
                                }
                            }
                        }
                    }
                }
                self.dec_w = &self.dec_w - &(d_dec * lr);
                self.enc_w = &self.enc_w - &(d_enc * lr);
            }
            curve.push(epoch_loss / images.len() as f64);
        }
        Ok(curve)
    }
}

impl Vae for ToyVae {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_divisible(image)?;
        let k = self.factor;
        let (c, h, w) = image.dim();
        let mut z = Array3::zeros((c, h / k, w / k));
        for ch in 0..c {
            for i in 0..h / k {
                for j in 0..w / k {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            acc += self.enc_w[[u, v]] * image[[ch, k * i + u, k * j + v]];
                        }
                    }
                    z[[ch, i, j]] = acc;
                }
            }
        }
        Ok(z)
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let k = self.factor;
        let (c, zh, zw) = latent.dim();
        let mut img = Array3::zeros((c, zh * k, zw * k));
        for ch in 0..c {
            for i in 0..zh {
                for j in 0..zw {
                    for u in 0..k {
                        for v in 0..k {
                            img[[ch, k * i + u, k * j + v]] =
                                self.dec_w[[u, v]] * latent[[ch, i, j]];
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    fn decode_vjp(&self, latent: &Array3<f64>, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        let k = self.factor;
        let (c, zh, zw) = latent.dim();
        if cotangent.dim() != (c, zh * k, zw * k) {
            let (a, b, d) = cotangent.dim();
            return Err(Error::ShapeMismatch {
                expected: vec![c, zh * k, zw * k],
                got: vec![a, b, d],
                context: "decode cotangent",
            });
        }
        let mut dz = Array3::zeros((c, zh, zw));
        for ch in 0..c {
            for i in 0..zh {
                for j in 0..zw {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            acc += self.dec_w[[u, v]] * cotangent[[ch, k * i + u, k * j + v]];
                        }
                    }
                    dz[[ch, i, j]] = acc;
                }
            }
        }
        Ok(dz)
    }

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        (
            image_shape.0,
            image_shape.1 / self.factor,
            image_shape.2 / self.factor,
        )
    }

    fn reconstruction_bound(&self) -> f64 {
        0.1
    }

    fn name(&self) -> &'static str {
        "toy-vae"
    }
}

/// Affine test predictor `e(z) = gain * z + bias`.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub gain: f64,
    pub bias: Option<Array3<f64>>,
}

impl LinearPredictor {
    pub fn new(gain: f64, bias: Array3<f64>) -> Self {
        LinearPredictor {
            gain,
            bias: Some(bias),
        }
    }

    /// Always predicts the given tensor; the "cheating" inversion oracle.
    pub fn constant(bias: Array3<f64>) -> Self {
        LinearPredictor {
            gain: 0.0,
            bias: Some(bias),
        }
    }

    pub fn zero() -> Self {
        LinearPredictor {
            gain: 0.0,
            bias: None,
        }
    }
}

impl NoisePredictor for LinearPredictor {
    fn predict(
        &self,
        z: &Array3<f64>,
        _t: usize,
        _prompt: &PromptFeatures,
        _mask: &InpaintMask,
    ) -> Result<Array3<f64>> {
        let mut out = z * self.gain;
        if let Some(bias) = &self.bias {
            if bias.dim() != z.dim() {
                let (a, b, c) = bias.dim();
                return Err(Error::ShapeMismatch {
                    expected: vec![a, b, c],
                    got: z.shape().to_vec(),
                    context: "linear predictor bias",
                });
            }
            out += bias;
        }
        Ok(out)
    }

    fn vjp(
        &self,
        _z: &Array3<f64>,
        _t: usize,
        _prompt: &PromptFeatures,
        _mask: &InpaintMask,
        cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        Ok(cotangent * self.gain)
    }

    fn name(&self) -> &'static str {
        "linear-predictor"
    }
}

const TIME_EMBED_DIM: usize = 8;

/// Two-layer convolutional noise predictor. The inpainting mask enters as an
/// extra input channel; timestep and prompt condition the hidden layer via
/// per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct ToyUnet {
    latent_channels: usize,
    hidden: usize,
    prompt_dim: usize,
    conv1_w: Array4<f64>,
    conv1_b: Array1<f64>,
    film_scale: Array2<f64>,
    film_shift: Array2<f64>,
    conv2_w: Array4<f64>,
    conv2_b: Array1<f64>,
}

impl ToyUnet {
    pub fn new(latent_channels: usize, hidden: usize, prompt_dim: usize, rng: &mut impl Rng) -> Self {
        let cond_dim = TIME_EMBED_DIM + prompt_dim;
        let s1 = 0.4 / ((latent_channels + 1) as f64 * 9.0).sqrt();
        let s2 = 0.4 / (hidden as f64 * 9.0).sqrt();
        let sf = 0.2 / (cond_dim as f64).sqrt();
        ToyUnet {
            latent_channels,
            hidden,
            prompt_dim,
            conv1_w: nn::randn4((hidden, latent_channels + 1, 3, 3), s1, rng),
            conv1_b: nn::randn1(hidden, 0.01, rng),
            film_scale: nn::randn2((hidden, cond_dim), sf, rng),
            film_shift: nn::randn2((hidden, cond_dim), sf, rng),
            conv2_w: nn::randn4((latent_channels, hidden, 3, 3), s2, rng),
            conv2_b: nn::randn1(latent_channels, 0.01, rng),
        }
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    fn conditioning(&self, t: usize, prompt: &PromptFeatures) -> Result<Array1<f64>> {
        if prompt.values.len() != self.prompt_dim {
            return Err(Error::DimensionMismatch {
                expected: self.prompt_dim,
                got: prompt.values.len(),
                context: "prompt features",
            });
        }
        let mut cond = Array1::zeros(TIME_EMBED_DIM + self.prompt_dim);
        for i in 0..TIME_EMBED_DIM / 2 {
            let freq = 1.0 / 10f64.powf(2.0 * i as f64 / TIME_EMBED_DIM as f64);
            cond[2 * i] = (t as f64 * freq).sin();
            cond[2 * i + 1] = (t as f64 * freq).cos();
        }
        for (i, &p) in prompt.values.iter().enumerate() {
            cond[TIME_EMBED_DIM + i] = p;
        }
        Ok(cond)
    }

    fn augment_input(&self, z: &Array3<f64>, mask: &InpaintMask) -> Result<Array3<f64>> {
        let (c, h, w) = z.dim();
        if c != self.latent_channels {
            return Err(Error::DimensionMismatch {
                expected: self.latent_channels,
                got: c,
                context: "latent channels",
            });
        }
        if mask.values().dim() != (h, w) {
            let (mh, mw) = mask.values().dim();
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![mh, mw],
                context: "mask shape",
            });
        }
        let mut aug = Array3::zeros((c + 1, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    aug[[ch, y, x]] = z[[ch, y, x]];
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                aug[[c, y, x]] = mask.values()[[y, x]];
            }
        }
        Ok(aug)
    }

    /// Forward pass keeping intermediates for backward passes.
    fn forward_trace(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
    ) -> Result<UnetTrace> {
        let aug = self.augment_input(z, mask)?;
        let cond = self.conditioning(t, prompt)?;
        let h1 = nn::conv2d(&aug, &self.conv1_w, &self.conv1_b);
        let scale = self.film_scale.dot(&cond);
        let shift = self.film_shift.dot(&cond);
        let mut h2 = h1.clone();
        for ch in 0..self.hidden {
            let (s, b) = (1.0 + scale[ch], shift[ch]);
            h2.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v * s + b);
        }
        let h3 = nn::tanh(&h2);
        let out = nn::conv2d(&h3, &self.conv2_w, &self.conv2_b);
        Ok(UnetTrace {
            aug,
            cond,
            h1,
            scale,
            h3,
            out,
        })
    }

    /// Denoising-objective training: predict the injected noise at a random
    /// timestep and descend the squared error. Returns the per-step loss.
    pub fn train_denoise(
        &mut self,
        latents: &[Array3<f64>],
        prompts: &[PromptFeatures],
        schedule: &VarianceSchedule,
        steps: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if latents.is_empty() {
            return Err(Error::EmptyTrainingSet("toy unet"));
        }
        let (_, h, w) = latents[0].dim();
        let mask = InpaintMask::ones(h, w);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = rng.random_range(0..latents.len());
            let t = rng.random_range(1..=schedule.horizon());
            let eps = nn::randn3(latents[idx].dim(), 1.0, rng);
            let z_t = diffuse(&Latent::clean(latents[idx].clone()), schedule, t, &eps)?;
            let prompt = &prompts[idx % prompts.len()];
            let trace = self.forward_trace(&z_t.values, t, prompt, &mask)?;
            let resid = &trace.out - &eps;
            let n = resid.len() as f64;
            losses.push(resid.mapv(|r| r * r).sum() / n);
            let dout = resid.mapv(|r| 2.0 * r / n);
            self.backward_params(&trace, &dout, lr);
        }
        Ok(losses)
    }

    fn backward_params(&mut self, trace: &UnetTrace, dout: &Array3<f64>, lr: f64) {
        let (dw2, db2) = nn::conv2d_param_grad(&trace.h3, self.conv2_w.dim(), dout);
        let dh3 = nn::conv2d_input_grad(&self.conv2_w, dout);
        let dh2 = nn::tanh_grad(&trace.h3, &dh3);

        let mut dscale = Array1::zeros(self.hidden);
        let mut dshift = Array1::zeros(self.hidden);
        let mut dh1 = dh2.clone();
        for ch in 0..self.hidden {
            let s = 1.0 + trace.scale[ch];
            let d2 = dh2.index_axis(ndarray::Axis(0), ch);
            let h1c = trace.h1.index_axis(ndarray::Axis(0), ch);
            dscale[ch] = (&d2 * &h1c).sum();
            dshift[ch] = d2.sum();
            dh1.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v * s);
        }
        let dfilm_scale = outer(&dscale, &trace.cond);
        let dfilm_shift = outer(&dshift, &trace.cond);
        let (dw1, db1) = nn::conv2d_param_grad(&trace.aug, self.conv1_w.dim(), &dh1);

        self.conv2_w = &self.conv2_w - &(dw2 * lr);
        self.conv2_b = &self.conv2_b - &(db2 * lr);
        self.film_scale = &self.film_scale - &(dfilm_scale * lr);
        self.film_shift = &self.film_shift - &(dfilm_shift * lr);
        self.conv1_w = &self.conv1_w - &(dw1 * lr);
        self.conv1_b = &self.conv1_b - &(db1 * lr);
    }
}

struct UnetTrace {
    aug: Array3<f64>,
    cond: Array1<f64>,
    h1: Array3<f64>,
    scale: Array1<f64>,
    h3: Array3<f64>,
    out: Array3<f64>,
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

impl NoisePredictor for ToyUnet {
    fn predict(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
    ) -> Result<Array3<f64>> {
        Ok(self.forward_trace(z, t, prompt, mask)?.out)
    }

    fn vjp(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
        cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        let trace = self.forward_trace(z, t, prompt, mask)?;
        let dh3 = nn::conv2d_input_grad(&self.conv2_w, cotangent);
        let dh2 = nn::tanh_grad(&trace.h3, &dh3);
        let mut dh1 = dh2;
        for ch in 0..self.hidden {
            let s = 1.0 + trace.scale[ch];
            dh1.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v * s);
        }
        let daug = nn::conv2d_input_grad(&self.conv1_w, &dh1);
        let (c, h, w) = z.dim();
        let mut dz = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dz[[ch, y, x]] = daug[[ch, y, x]];
                }
            }
        }
        Ok(dz)
    }

    fn name(&self) -> &'static str {
        "toy-unet"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn3;
    use crate::seeding::module_rng;

    #[test]
    fn identity_vae_round_trip_exact() {
        let mut rng = module_rng(1, "backend-test");
        let img = randn3((3, 4, 4), 1.0, &mut rng);
        let vae = IdentityVae;
        assert_eq!(vae.decode(&vae.encode(&img).unwrap()).unwrap(), img);
    }

    fn blocky_images(n: usize, seed: u64) -> Vec<Array3<f64>> {
        // Piecewise-constant 8x8 images over 2x2 blocks, values in [0, 1].
        let mut rng = module_rng(seed, "backend-blocky");
        (0..n)
            .map(|_| {
                let mut img = Array3::zeros((3, 8, 8));
                for c in 0..3 {
                    for bi in 0..4 {
                        for bj in 0..4 {
                            let v: f64 = rng.random();
                            for u in 0..2 {
                                for w in 0..2 {
                                    img[[c, 2 * bi + u, 2 * bj + w]] = v;
                                }
                            }
                        }
                    }
                }
                img
            })
            .collect()
    }

    #[test]
    fn toy_vae_trains_below_declared_bound() {
        let train = blocky_images(24, 10);
        let held_out = blocky_images(8, 11);
        let mut vae = ToyVae::new(2);
        vae.train(&train, 20, 0.05).unwrap();
        let mae = vae.reconstruction_mae(&held_out).unwrap();
        assert!(mae < vae.reconstruction_bound(), "held-out MAE {mae}");
    }

    #[test]
    fn toy_vae_zero_image_within_bound() {
        let vae = ToyVae::new(2);
        let zero = Array3::zeros((3, 8, 8));
        let recon = vae.decode(&vae.encode(&zero).unwrap()).unwrap();
        let mae = (&recon - &zero).mapv(f64::abs).mean().unwrap();
        assert!(mae <= vae.reconstruction_bound());
    }

    #[test]
    fn toy_vae_decode_vjp_matches_fd() {
        let mut vae = ToyVae::new(2);
        let train = blocky_images(8, 12);
        vae.train(&train, 5, 0.05).unwrap();
        let mut rng = module_rng(13, "backend-test");
        let z = randn3((1, 2, 2), 1.0, &mut rng);
        let probe = randn3((1, 4, 4), 1.0, &mut rng);
        let grad = vae.decode_vjp(&z, &probe).unwrap();
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = ((&vae.decode(&plus).unwrap() * &probe).sum()
                - (&vae.decode(&minus).unwrap() * &probe).sum())
                / (2.0 * h);
            assert!((fd - grad.as_slice().unwrap()[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn toy_unet_vjp_matches_fd() {
        let mut rng = module_rng(3, "backend-test");
        let unet = ToyUnet::new(2, 4, 3, &mut rng);
        let z = randn3((2, 4, 4), 1.0, &mut rng);
        let prompt = PromptFeatures::new(ndarray::array![0.3, -0.2, 0.8]);
        let mask = InpaintMask::ones(4, 4);
        let probe = randn3((2, 4, 4), 1.0, &mut rng);
        let grad = unet.vjp(&z, 3, &prompt, &mask, &probe).unwrap();
        let h = 1e-5;
        for idx in 0..z.len() {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let up = (&unet.predict(&plus, 3, &prompt, &mask).unwrap() * &probe).sum();
            let down = (&unet.predict(&minus, 3, &prompt, &mask).unwrap() * &probe).sum();
            let fd = (up - down) / (2.0 * h);
            let g = grad.as_slice().unwrap()[idx];
            assert!(
                (fd - g).abs() < 1e-4 * fd.abs().max(1.0),
                "idx {idx}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn toy_unet_predictions_depend_on_prompt_and_time() {
        let mut rng = module_rng(4, "backend-test");
        let unet = ToyUnet::new(1, 4, 2, &mut rng);
        let z = randn3((1, 4, 4), 1.0, &mut rng);
        let mask = InpaintMask::ones(4, 4);
        let p1 = PromptFeatures::new(ndarray::array![1.0, 0.0]);
        let p2 = PromptFeatures::new(ndarray::array![0.0, 1.0]);
        let a = unet.predict(&z, 3, &p1, &mask).unwrap();
        let b = unet.predict(&z, 3, &p2, &mask).unwrap();
        let c = unet.predict(&z, 9, &p1, &mask).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_unet_denoise_training_reduces_loss() {
        let mut rng = module_rng(5, "backend-test");
        let latents: Vec<Array3<f64>> = (0..8).map(|_| randn3((1, 4, 4), 1.0, &mut rng)).collect();
        let prompts: Vec<PromptFeatures> = (0..8)
            .map(|i| PromptFeatures::new(ndarray::array![i as f64 / 8.0, 0.5]))
            .collect();
        let schedule = super::super::make_schedule(10, 1e-3, 0.2).unwrap();
        let mut unet = ToyUnet::new(1, 4, 2, &mut rng);
        let losses = unet
            .train_denoise(&latents, &prompts, &schedule, 400, 0.05, &mut rng)
            .unwrap();
        let early: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let late: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(late < early, "denoising loss {early} -> {late}");
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let mut r1 = module_rng(9, "backend-test");
        let mut r2 = module_rng(9, "backend-test");
        let a = ToyUnet::new(1, 4, 2, &mut r1);
        let b = ToyUnet::new(1, 4, 2, &mut r2);
        assert_eq!(a.conv1_w, b.conv1_w);
        assert_eq!(a.film_scale, b.film_scale);
    }
}
