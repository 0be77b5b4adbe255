//! Small dense numeric kernels: convolution, pooling, linear maps, and the
//! optimizers used by the toy backends and fine-tuning stages.
//!
//! Every forward kernel ships with the matching cotangent (reverse-mode)
//! kernels; the backward implementations mirror the forward loops by
//! scattering, so the pair is correct by construction and checked against
//! finite differences in the tests.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

/// Same-padding stride-1 2D convolution over a `[C, H, W]` tensor.
pub fn conv2d(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (c_in, h, w) = input.dim();
    let (c_out, c_in_w, k, _) = weight.dim();
    assert_eq!(c_in, c_in_w, "conv2d channel mismatch");
    let pad = k / 2;
    let mut out = Array3::zeros((c_out, h, w));
    for oc in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = bias[oc];
                for ic in 0..c_in {
                    for dy in 0..k {
                        let iy = oy + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = ox + dx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            acc += weight[[oc, ic, dy, dx]] * input[[ic, iy - pad, ix - pad]];
                        }
                    }
                }
                out[[oc, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Cotangent of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(weight: &Array4<f64>, cotangent: &Array3<f64>) -> Array3<f64> {
    let (c_out, c_in, k, _) = weight.dim();
    let (c_out_g, h, w) = cotangent.dim();
    assert_eq!(c_out, c_out_g, "conv2d cotangent channel mismatch");
    let pad = k / 2;
    let mut din = Array3::zeros((c_in, h, w));
    for oc in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let g = cotangent[[oc, oy, ox]];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..c_in {
                    for dy in 0..k {
                        let iy = oy + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = ox + dx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            din[[ic, iy - pad, ix - pad]] += g * weight[[oc, ic, dy, dx]];
                        }
                    }
                }
            }
        }
    }
    din
}

/// Cotangents of [`conv2d`] with respect to weight and bias.
pub fn conv2d_param_grad(
    input: &Array3<f64>,
    weight_shape: (usize, usize, usize, usize),
    cotangent: &Array3<f64>,
) -> (Array4<f64>, Array1<f64>) {
    let (c_out, c_in, k, _) = weight_shape;
    let (_, h, w) = input.dim();
    let pad = k / 2;
    let mut dw = Array4::zeros(weight_shape);
    let mut db = Array1::zeros(c_out);
    for oc in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let g = cotangent[[oc, oy, ox]];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for ic in 0..c_in {
                    for dy in 0..k {
                        let iy = oy + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = ox + dx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            dw[[oc, ic, dy, dx]] += g * input[[ic, iy - pad, ix - pad]];
                        }
                    }
                }
            }
        }
    }
    (dw, db)
}

/// Non-overlapping average pooling by `factor`.
pub fn avg_pool(input: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += input[[ch, y * factor + dy, x * factor + dx]];
                    }
                }
                out[[ch, y, x]] = acc / norm;
            }
        }
    }
    out
}

/// Cotangent of [`avg_pool`]: spread each pooled gradient evenly.
pub fn avg_pool_grad(cotangent: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, oh, ow) = cotangent.dim();
    let norm = (factor * factor) as f64;
    let mut din = Array3::zeros((c, oh * factor, ow * factor));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = cotangent[[ch, y, x]] / norm;
                for dy in 0..factor {
                    for dx in 0..factor {
                        din[[ch, y * factor + dy, x * factor + dx]] = g;
                    }
                }
            }
        }
    }
    din
}

pub fn tanh(input: &Array3<f64>) -> Array3<f64> {
    input.mapv(f64::tanh)
}

/// Cotangent of [`tanh`] given the forward *output*.
pub fn tanh_grad(output: &Array3<f64>, cotangent: &Array3<f64>) -> Array3<f64> {
    let mut din = cotangent.clone();
    din.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y);
    din
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy of `logits` against a class index, with its logit gradient.
pub fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(1e-300).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Gaussian array samplers for seeded initialization and diffusion noise.
pub fn randn3(shape: (usize, usize, usize), scale: f64, rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn randn4(shape: (usize, usize, usize, usize), scale: f64, rng: &mut impl Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn randn2(shape: (usize, usize), scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn randn1(len: usize, scale: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

/// Adam with decoupled weight decay over flat parameter slices.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. Parameter/gradient slice pairs must keep the same order
    /// and lengths across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Plain SGD update.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        for i in 0..p.len() {
            p[i] -= lr * g[i];
        }
    }
}
