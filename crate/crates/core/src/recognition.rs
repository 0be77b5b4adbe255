//! Recognition model `g`: the classifier whose energy drives generation.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;

/// Classifier over images with a reverse-mode input product.
pub trait Recognizer: Send + Sync {
    fn logits(&self, image: &Array3<f64>) -> Result<Array1<f64>>;

    /// Maps `dL/d logits` to `dL/d image`.
    fn vjp(&self, image: &Array3<f64>, cotangent: &Array1<f64>) -> Result<Array3<f64>>;

    fn num_classes(&self) -> usize;

    fn is_differentiable(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str;
}

/// Linear probe over flattened pixels; exact Jacobians for oracles.
#[derive(Debug, Clone)]
pub struct LinearRecognizer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    input_shape: (usize, usize, usize),
}

impl LinearRecognizer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, input_shape: (usize, usize, usize)) -> Self {
        assert_eq!(weight.ncols(), input_shape.0 * input_shape.1 * input_shape.2);
        assert_eq!(weight.nrows(), bias.len());
        LinearRecognizer {
            weight,
            bias,
            input_shape,
        }
    }

    pub fn seeded(
        classes: usize,
        input_shape: (usize, usize, usize),
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = input_shape.0 * input_shape.1 * input_shape.2;
        LinearRecognizer {
            weight: nn::randn2((classes, n), scale, rng),
            bias: Array1::zeros(classes),
            input_shape,
        }
    }

    /// All-zero weights: the loss becomes constant in the input.
    pub fn zeroed(classes: usize, input_shape: (usize, usize, usize)) -> Self {
        let n = input_shape.0 * input_shape.1 * input_shape.2;
        LinearRecognizer {
            weight: Array2::zeros((classes, n)),
            bias: Array1::zeros(classes),
            input_shape,
        }
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        if image.dim() != self.input_shape {
            let (a, b, c) = image.dim();
            let (x, y, z) = self.input_shape;
            return Err(Error::ShapeMismatch {
                expected: vec![x, y, z],
                got: vec![a, b, c],
                context: "recognizer input",
            });
        }
        Ok(())
    }
}

impl Recognizer for LinearRecognizer {
    fn logits(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_input(image)?;
        let flat = Array1::from_iter(image.iter().cloned());
        Ok(self.weight.dot(&flat) + &self.bias)
    }

    fn vjp(&self, image: &Array3<f64>, cotangent: &Array1<f64>) -> Result<Array3<f64>> {
        self.check_input(image)?;
        let flat = self.weight.t().dot(cotangent);
        Ok(Array3::from_shape_vec(self.input_shape, flat.to_vec())
            .expect("shape checked in constructor"))
    }

    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn name(&self) -> &'static str {
        "linear-recognizer"
    }
}

/// Small convolutional classifier: conv3x3 -> tanh -> avg-pool -> linear.
#[derive(Debug, Clone)]
pub struct ConvClassifier {
    conv_w: ndarray::Array4<f64>,
    conv_b: Array1<f64>,
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
    input_shape: (usize, usize, usize),
    pool: usize,
    hidden: usize,
}

impl ConvClassifier {
    pub fn new(
        classes: usize,
        input_shape: (usize, usize, usize),
        hidden: usize,
        pool: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (c, h, w) = input_shape;
        assert!(h % pool == 0 && w % pool == 0);
        let flat = hidden * (h / pool) * (w / pool);
        ConvClassifier {
            conv_w: nn::randn4((hidden, c, 3, 3), 0.25 / (c as f64 * 9.0).sqrt(), rng),
            conv_b: Array1::zeros(hidden),
            fc_w: nn::randn2((classes, flat), 0.5 / (flat as f64).sqrt(), rng),
            fc_b: Array1::zeros(classes),
            input_shape,
            pool,
            hidden,
        }
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        if image.dim() != self.input_shape {
            let (a, b, c) = image.dim();
            let (x, y, z) = self.input_shape;
            return Err(Error::ShapeMismatch {
                expected: vec![x, y, z],
                got: vec![a, b, c],
                context: "recognizer input",
            });
        }
        Ok(())
    }

    fn forward_trace(&self, image: &Array3<f64>) -> (Array3<f64>, Array3<f64>, Array1<f64>, Array1<f64>) {
        let act = nn::tanh(&nn::conv2d(image, &self.conv_w, &self.conv_b));
        let pooled = nn::avg_pool(&act, self.pool);
        let flat = Array1::from_iter(pooled.iter().cloned());
        let logits = self.fc_w.dot(&flat) + &self.fc_b;
        (act, pooled, flat, logits)
    }

    /// Supervised training with minibatch Adam; returns per-epoch accuracy.
    pub fn train(
        &mut self,
        images: &[Array3<f64>],
        targets: &[usize],
        epochs: usize,
        lr: f64,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::EmptyTrainingSet("recognizer"));
        }
        assert_eq!(images.len(), targets.len());
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut adam = nn::Adam::new(lr, 0.0);
        let mut accuracy = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let mut d_conv_w = ndarray::Array4::zeros(self.conv_w.dim());
                let mut d_conv_b = Array1::zeros(self.conv_b.len());
                let mut d_fc_w = Array2::zeros(self.fc_w.dim());
                let mut d_fc_b = Array1::zeros(self.fc_b.len());
                for &i in chunk {
                    let (act, _pooled, flat, logits) = self.forward_trace(&images[i]);
                    let (_, dlogits) = nn::cross_entropy(&logits, targets[i]);
                    for (r, &g) in dlogits.iter().enumerate() {
                        d_fc_b[r] += g;
                        for (cidx, &f) in flat.iter().enumerate() {
                            d_fc_w[[r, cidx]] += g * f;
                        }
                    }
                    let dflat = self.fc_w.t().dot(&dlogits);
                    let (c, h, w) = act.dim();
                    let dpool = Array3::from_shape_vec(
                        (c, h / self.pool, w / self.pool),
                        dflat.to_vec(),
                    )
                    .expect("pool shape");
                    let dact = nn::avg_pool_grad(&dpool, self.pool);
                    let dpre = nn::tanh_grad(&act, &dact);
                    let (dw, db) = nn::conv2d_param_grad(&images[i], self.conv_w.dim(), &dpre);
                    d_conv_w += &dw;
                    d_conv_b += &db;
                }
                let scale = 1.0 / chunk.len() as f64;
                d_conv_w *= scale;
                d_conv_b *= scale;
                d_fc_w *= scale;
                d_fc_b *= scale;
                adam.step(
                    &mut [
                        self.conv_w.as_slice_mut().unwrap(),
                        self.conv_b.as_slice_mut().unwrap(),
                        self.fc_w.as_slice_mut().unwrap(),
                        self.fc_b.as_slice_mut().unwrap(),
                    ],
                    &[
                        d_conv_w.as_slice().unwrap(),
                        d_conv_b.as_slice().unwrap(),
                        d_fc_w.as_slice().unwrap(),
                        d_fc_b.as_slice().unwrap(),
                    ],
                );
            }
            accuracy.push(self.accuracy(images, targets)?);
        }
        Ok(accuracy)
    }

    pub fn accuracy(&self, images: &[Array3<f64>], targets: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for (img, &t) in images.iter().zip(targets.iter()) {
            let logits = self.logits(img)?;
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == t {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

impl Recognizer for ConvClassifier {
    fn logits(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_input(image)?;
        Ok(self.forward_trace(image).3)
    }

    fn vjp(&self, image: &Array3<f64>, cotangent: &Array1<f64>) -> Result<Array3<f64>> {
        self.check_input(image)?;
        let (act, _pooled, _flat, _) = self.forward_trace(image);
        let dflat = self.fc_w.t().dot(cotangent);
        let (c, h, w) = act.dim();
        let dpool =
            Array3::from_shape_vec((c, h / self.pool, w / self.pool), dflat.to_vec())
                .expect("pool shape");
        let dact = nn::avg_pool_grad(&dpool, self.pool);
        let dpre = nn::tanh_grad(&act, &dact);
        Ok(nn::conv2d_input_grad(&self.conv_w, &dpre))
    }

    fn num_classes(&self) -> usize {
        self.fc_b.len()
    }

    fn name(&self) -> &'static str {
        "conv-classifier"
    }
}

impl ConvClassifier {
    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::module_rng;
    use crate::world;

    #[test]
    fn linear_recognizer_vjp_is_transpose() {
        let mut rng = module_rng(1, "recognition-test");
        let g = LinearRecognizer::seeded(3, (1, 2, 2), 0.5, &mut rng);
        let img = nn::randn3((1, 2, 2), 1.0, &mut rng);
        let cot = ndarray::array![0.3, -0.8, 1.1];
        let grad = g.vjp(&img, &cot).unwrap();
        let h = 1e-6;
        for idx in 0..img.len() {
            let mut plus = img.clone();
            let mut minus = img.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let up = g.logits(&plus).unwrap().dot(&cot);
            let down = g.logits(&minus).unwrap().dot(&cot);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_classifier_vjp_matches_fd() {
        let mut rng = module_rng(2, "recognition-test");
        let g = ConvClassifier::new(4, (3, 8, 8), 4, 2, &mut rng);
        let img = nn::randn3((3, 8, 8), 0.5, &mut rng);
        let cot = ndarray::array![0.2, -0.4, 0.9, -0.1];
        let grad = g.vjp(&img, &cot).unwrap();
        let h = 1e-5;
        for idx in (0..img.len()).step_by(7) {
            let mut plus = img.clone();
            let mut minus = img.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let up = g.logits(&plus).unwrap().dot(&cot);
            let down = g.logits(&minus).unwrap().dot(&cot);
            let fd = (up - down) / (2.0 * h);
            let gv = grad.as_slice().unwrap()[idx];
            assert!((fd - gv).abs() < 1e-4 * fd.abs().max(1.0), "{fd} vs {gv}");
        }
    }

    #[test]
    fn conv_classifier_learns_the_world() {
        let mut rng = module_rng(3, "recognition-test");
        let train = world::make_dataset(&world::IND_CLASSES, 12, 50, 32);
        let images: Vec<_> = train.iter().map(|i| i.pixels.clone()).collect();
        let targets: Vec<usize> = train
            .iter()
            .map(|i| world::IND_CLASSES.iter().position(|c| *c == i.class).unwrap())
            .collect();
        let mut g = ConvClassifier::new(10, (3, 32, 32), 6, 4, &mut rng);
        let acc = g.train(&images, &targets, 8, 2e-3, 16, &mut rng).unwrap();
        assert!(
            *acc.last().unwrap() > 0.8,
            "training accuracy {:?}",
            acc.last()
        );
    }
}
