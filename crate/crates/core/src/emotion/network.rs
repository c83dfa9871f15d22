//! Reference convolutional classifier.
//!
//! Layout: two blocks of `3x3 conv (same padding) -> ReLU -> 2x2 max-pool`,
//! global average pooling, a ReLU dense layer and a 4-way softmax. Everything
//! is computed in `f64` so finite-difference checks stay meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::label::{softmax, EmotionClass, EmotionProbabilities, NUM_CLASSES};
use super::ClassifierError;

const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const DENSE1_W: usize = 4;
pub const DENSE1_B: usize = 5;
pub const DENSE2_W: usize = 6;
pub const DENSE2_B: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden_units: usize,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_channels: 1,
            conv1_filters: 16,
            conv2_filters: 32,
            hidden_units: 64,
            classes: NUM_CLASSES,
        }
    }
}

impl Architecture {
    pub fn rgb() -> Self {
        Self {
            input_channels: 3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ClassifierError> {
        let dims = [
            self.input_channels,
            self.conv1_filters,
            self.conv2_filters,
            self.hidden_units,
        ];
        if dims.contains(&0) || self.classes != NUM_CLASSES {
            return Err(ClassifierError::ShapeMismatch(format!(
                "unsupported architecture {self:?}"
            )));
        }
        Ok(())
    }

    /// Tensor names and shapes in parameter order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, f1, f2, h, k) = (
            self.input_channels,
            self.conv1_filters,
            self.conv2_filters,
            self.hidden_units,
            self.classes,
        );
        vec![
            ("conv1.weight", vec![f1, c, KERNEL, KERNEL]),
            ("conv1.bias", vec![f1]),
            ("conv2.weight", vec![f2, f1, KERNEL, KERNEL]),
            ("conv2.bias", vec![f2]),
            ("dense1.weight", vec![h, f2]),
            ("dense1.bias", vec![h]),
            ("dense2.weight", vec![k, h]),
            ("dense2.bias", vec![k]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Weights of the reference network together with its descriptor and the
/// seed used to initialize it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub architecture: Architecture,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

/// Per-tensor gradients, aligned with [`ClassifierParams::tensors`].
pub type Gradients = Vec<Vec<f64>>;

impl ClassifierParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self, ClassifierError> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = architecture
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(name, shape);
                if t.shape.len() > 1 {
                    let receptive: usize = t.shape[2..].iter().product();
                    let fan_out = t.shape[0] * receptive;
                    let fan_in = t.shape[1] * receptive;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for w in &mut t.data {
                        *w = rng.random_range(-limit..limit);
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            architecture,
            seed,
            tensors,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_tensors(
        architecture: Architecture,
        seed: u64,
        tensors: Vec<Tensor>,
    ) -> Result<Self, ClassifierError> {
        architecture.validate()?;
        let expected = architecture.tensor_shapes();
        if tensors.len() != expected.len() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (t, (name, shape)) in tensors.iter().zip(&expected) {
            let n: usize = shape.iter().product();
            if t.name != *name || t.shape != *shape || t.data.len() != n {
                return Err(ClassifierError::ShapeMismatch(format!(
                    "tensor {} does not match {name} {shape:?}",
                    t.name
                )));
            }
        }
        let params = Self {
            architecture,
            seed,
            tensors,
        };
        if !params.is_finite() {
            return Err(ClassifierError::NonFiniteParameters);
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    fn check_input(&self, image: &ImageTensor) -> Result<usize, ClassifierError> {
        if image.channels() != self.architecture.input_channels {
            return Err(ClassifierError::ShapeMismatch(format!(
                "model expects {} channels, image has {}",
                self.architecture.input_channels,
                image.channels()
            )));
        }
        let side = image.side();
        if side < 4 || !side.is_multiple_of(4) {
            return Err(ClassifierError::ShapeMismatch(format!(
                "input side {side} must be a positive multiple of 4"
            )));
        }
        Ok(side)
    }

    pub fn logits(&self, image: &ImageTensor) -> Result<[f64; NUM_CLASSES], ClassifierError> {
        let side = self.check_input(image)?;
        Ok(self.forward(image.data(), side).logits)
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<EmotionProbabilities, ClassifierError> {
        Ok(EmotionProbabilities::from_logits(&self.logits(image)?))
    }

    /// Probabilities plus the piecewise-linear regime the input landed in:
    /// every ReLU gate and max-pool winner. Two evaluations with equal
    /// patterns lie on the same smooth piece of the loss surface.
    pub fn predict_with_pattern(
        &self,
        image: &ImageTensor,
    ) -> Result<(EmotionProbabilities, ActivationPattern), ClassifierError> {
        let side = self.check_input(image)?;
        let acts = self.forward(image.data(), side);
        let gates = acts
            .a1
            .iter()
            .chain(&acts.a2)
            .chain(&acts.hidden)
            .map(|&v| v > 0.0)
            .collect();
        let winners = acts.idx1.iter().chain(&acts.idx2).copied().collect();
        Ok((EmotionProbabilities::from_logits(&acts.logits), ActivationPattern { gates, winners }))
    }

    /// Mean cross-entropy over `batch`, its gradient with respect to every
    /// parameter, and the number of correctly classified items.
    pub fn loss_and_gradients(
        &self,
        batch: &[(&ImageTensor, EmotionClass)],
    ) -> Result<(f64, Gradients, usize), ClassifierError> {
        if batch.is_empty() {
            return Err(ClassifierError::EmptyDataset);
        }
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        let mut correct = 0;
        let scale = 1.0 / batch.len() as f64;
        for (image, label) in batch {
            let side = self.check_input(image)?;
            let acts = self.forward(image.data(), side);
            let probs = softmax(&acts.logits);
            loss += -probs[label.code()].max(super::PROB_FLOOR).ln();
            if EmotionProbabilities::from_logits(&acts.logits).argmax() == *label {
                correct += 1;
            }
            let mut dlogits = probs;
            dlogits[label.code()] -= 1.0;
            for d in &mut dlogits {
                *d *= scale;
            }
            self.backward(image.data(), side, &acts, &dlogits, &mut grads);
        }
        Ok((loss * scale, grads, correct))
    }

    fn forward(&self, input: &[f64], side: usize) -> Activations {
        let a = &self.architecture;
        let t = &self.tensors;
        let half = side / 2;
        let quarter = side / 4;

        let mut a1 = vec![0.0; a.conv1_filters * side * side];
        conv3x3_forward(input, a.input_channels, side, &t[CONV1_W].data, &t[CONV1_B].data, a.conv1_filters, &mut a1);
        relu_inplace(&mut a1);
        let (p1, idx1) = maxpool2(&a1, a.conv1_filters, side);

        let mut a2 = vec![0.0; a.conv2_filters * half * half];
        conv3x3_forward(&p1, a.conv1_filters, half, &t[CONV2_W].data, &t[CONV2_B].data, a.conv2_filters, &mut a2);
        relu_inplace(&mut a2);
        let (p2, idx2) = maxpool2(&a2, a.conv2_filters, half);

        let plane = quarter * quarter;
        let gap: Vec<f64> = p2
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();

        let mut hidden = dense_forward(&gap, &t[DENSE1_W].data, &t[DENSE1_B].data, a.hidden_units);
        relu_inplace(&mut hidden);
        let out = dense_forward(&hidden, &t[DENSE2_W].data, &t[DENSE2_B].data, a.classes);
        let mut logits = [0.0; NUM_CLASSES];
        logits.copy_from_slice(&out);

        Activations {
            a1,
            p1,
            idx1,
            a2,
            idx2,
            gap,
            hidden,
            logits,
        }
    }

    fn backward(&self, input: &[f64], side: usize, acts: &Activations, dlogits: &[f64], grads: &mut Gradients) {
        let a = &self.architecture;
        let t = &self.tensors;
        let half = side / 2;
        let quarter = side / 4;

        let mut dhidden = vec![0.0; a.hidden_units];
        dense_backward(&acts.hidden, &t[DENSE2_W].data, dlogits, grads, DENSE2_W, DENSE2_B, Some(&mut dhidden));
        for (d, h) in dhidden.iter_mut().zip(&acts.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dgap = vec![0.0; a.conv2_filters];
        dense_backward(&acts.gap, &t[DENSE1_W].data, &dhidden, grads, DENSE1_W, DENSE1_B, Some(&mut dgap));

        // GAP spreads each channel gradient evenly over its pooled plane; the
        // max-pool then routes it to the winning input position.
        let plane = quarter * quarter;
        let mut da2 = vec![0.0; acts.a2.len()];
        for (i, &src) in acts.idx2.iter().enumerate() {
            da2[src] = dgap[i / plane] / plane as f64;
        }
        relu_backward(&mut da2, &acts.a2);

        let mut dp1 = vec![0.0; acts.p1.len()];
        let (w_range, b_range) = split_two(grads, CONV2_W, CONV2_B);
        conv3x3_backward(&acts.p1, a.conv1_filters, half, &t[CONV2_W].data, a.conv2_filters, &da2, w_range, b_range, Some(&mut dp1));

        let mut da1 = vec![0.0; acts.a1.len()];
        for (i, &src) in acts.idx1.iter().enumerate() {
            da1[src] = dp1[i];
        }
        relu_backward(&mut da1, &acts.a1);
        let (w_range, b_range) = split_two(grads, CONV1_W, CONV1_B);
        conv3x3_backward(input, a.input_channels, side, &t[CONV1_W].data, a.conv1_filters, &da1, w_range, b_range, None);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    gates: Vec<bool>,
    winners: Vec<usize>,
}

struct Activations {
    a1: Vec<f64>,
    p1: Vec<f64>,
    idx1: Vec<usize>,
    a2: Vec<f64>,
    idx2: Vec<usize>,
    gap: Vec<f64>,
    hidden: Vec<f64>,
    logits: [f64; NUM_CLASSES],
}

fn split_two(grads: &mut Gradients, w: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w + 1, b);
    let (left, right) = grads.split_at_mut(b);
    (&mut left[w], &mut right[0])
}

fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid output column range and input offset for a kernel tap at `offset`.
#[inline]
fn tap_range(side: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = side - offset.max(0) as usize;
    (lo, hi)
}

fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    side: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let plane = side * side;
    for co in 0..cout {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let w = &weights[(co * cin + ci) * KK..(co * cin + ci + 1) * KK];
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(side, dy);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = tap_range(side, dx);
                    let wv = w[ky * KERNEL + kx];
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let sx = (xlo as isize + dx) as usize;
                        let o = &mut out_plane[y * side + xlo..y * side + xhi];
                        let i = &in_plane[sy * side + sx..sy * side + sx + (xhi - xlo)];
                        for (ov, iv) in o.iter_mut().zip(i) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    side: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let plane = side * side;
    for co in 0..cout {
        let g_plane = &dout[co * plane..(co + 1) * plane];
        dbias[co] += g_plane.iter().sum::<f64>();
        for ci in 0..cin {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            let base = (co * cin + ci) * KK;
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                let (ylo, yhi) = tap_range(side, dy);
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = tap_range(side, dx);
                    let wv = weights[base + ky * KERNEL + kx];
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let sx = (xlo as isize + dx) as usize;
                        let g = &g_plane[y * side + xlo..y * side + xhi];
                        let src = sy * side + sx..sy * side + sx + (xhi - xlo);
                        acc += g.iter().zip(&in_plane[src.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = dinput.as_deref_mut() {
                            let d = &mut din[ci * plane..(ci + 1) * plane][src];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    dweights[base + ky * KERNEL + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 max-pool with stride 2. Returns pooled values and, for each output, the
/// index of the winning input element (first maximum on ties).
fn maxpool2(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut idx = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], units: usize) -> Vec<f64> {
    (0..units)
        .map(|u| {
            let row = &weights[u * input.len()..(u + 1) * input.len()];
            bias[u] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    input: &[f64],
    weights: &[f64],
    dout: &[f64],
    grads: &mut Gradients,
    w_idx: usize,
    b_idx: usize,
    dinput: Option<&mut [f64]>,
) {
    let n = input.len();
    let (dw, db) = split_two(grads, w_idx, b_idx);
    for (u, &g) in dout.iter().enumerate() {
        db[u] += g;
        for (d, x) in dw[u * n..(u + 1) * n].iter_mut().zip(input) {
            *d += g * x;
        }
    }
    if let Some(din) = dinput {
        for (u, &g) in dout.iter().enumerate() {
            for (d, w) in din.iter_mut().zip(&weights[u * n..(u + 1) * n]) {
                *d += g * w;
            }
        }
    }
}
