//! Fully convolutional domain discriminators and the segmentation /
//! adversarial loss functions.
//!
//! The feature and scale discriminators share this architecture but never
//! share parameters. Losses are computed from logits in the numerically
//! stable form; the raster-level helpers exist for tests and evaluation and
//! agree with the graph-level versions used in training.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{Conv2dLayer, Params};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var, PROB_FLOOR};
use crate::nn::tensor::Tensor;
use crate::types::{DomainLabel, Prediction, Raster, SegMask, IGNORE};

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("prediction {ph}x{pw} does not match mask {mh}x{mw}")]
    ShapeMismatch { ph: usize, pw: usize, mh: usize, mw: usize },
    #[error("every pixel is ignored; segmentation loss undefined")]
    AllIgnored,
    #[error("discriminator input {h}x{w} is smaller than the minimum {min}x{min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("discriminator expects {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// Weights of the two adversarial terms in the generator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_f: 0.005, lambda_s: 0.005 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda_f < 0.0 || self.lambda_s < 0.0 {
            return Err(format!(
                "adversarial loss weights must be nonnegative, got ({}, {})",
                self.lambda_f, self.lambda_s
            ));
        }
        Ok(())
    }
}

pub const DISC_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1];
pub const DISC_MIN_INPUT: usize = 32;

/// Five 4x4 stride-2 convolutions with leaky-ReLU (slope 0.2) between them;
/// the final layer emits a raw logit map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet<F> {
    pub name: String,
    convs: Vec<Conv2dLayer<F>>,
}

impl<F: Scalar> DiscriminatorNet<F> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_channels: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in DISC_CHANNELS.iter().enumerate() {
            convs.push(Conv2dLayer::new(rng, &format!("{name}.c{i}"), cin, cout, 4, 2, 1, 1));
            cin = cout;
        }
        DiscriminatorNet { name: name.to_string(), convs }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].w.shape[1]
    }

    /// Logit map for an N x K x H x W batch already on the tape.
    pub fn forward_batch(&self, tape: &mut Tape<F>, x: Var, trainable: bool) -> Var {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(tape, y, trainable);
            if i < last {
                y = tape.leaky_relu(y, 0.2);
            }
        }
        y
    }

    /// Logit and sigmoid-probability maps for one prediction.
    pub fn forward(&self, pred: &Prediction) -> Result<(Raster, Raster), AdvError> {
        let p = &pred.probs;
        if p.channels != self.in_channels() {
            return Err(AdvError::ChannelMismatch { expected: self.in_channels(), got: p.channels });
        }
        if p.height < DISC_MIN_INPUT || p.width < DISC_MIN_INPUT {
            return Err(AdvError::InputTooSmall {
                h: p.height,
                w: p.width,
                min: DISC_MIN_INPUT,
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_raster(p));
        let logits_var = self.forward_batch(&mut tape, x, false);
        let logits = tape.value(logits_var).to_rasters().remove(0);
        let probs = Raster::new(
            logits.channels,
            logits.height,
            logits.width,
            logits.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        );
        Ok((logits, probs))
    }
}

impl<F: Scalar> Params<F> for DiscriminatorNet<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        for c in &self.convs {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
    }
}

/// Mean cross-entropy of the predicted probabilities at the true labels,
/// skipping IGNORE pixels. Probabilities are clamped to >= 1e-12 before the
/// logarithm.
pub fn seg_loss(pred: &Prediction, mask: &SegMask) -> Result<f64, AdvError> {
    let p = &pred.probs;
    if (p.height, p.width) != (mask.height, mask.width) {
        return Err(AdvError::ShapeMismatch {
            ph: p.height,
            pw: p.width,
            mh: mask.height,
            mw: mask.width,
        });
    }
    let mut total = 0.0f64;
    let mut scored = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            let label = mask.labels[y * mask.width + x];
            if label == IGNORE {
                continue;
            }
            let prob = p.at(label as usize, y, x) as f64;
            total += if prob.is_nan() { prob } else { -prob.max(PROB_FLOOR).ln() };
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(AdvError::AllIgnored);
    }
    Ok(total / scored as f64)
}

/// Mean binary cross-entropy of a probability map toward the constant
/// target z, with the same clamping as the training path.
pub fn bce_mean(probs: &[f64], z: f64) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -(z * p.ln() + (1.0 - z) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Discriminator loss toward the domain label z (Eq. 4 family).
pub fn disc_loss<F: Scalar>(
    d: &DiscriminatorNet<F>,
    pred: &Prediction,
    z: DomainLabel,
) -> Result<f64, AdvError> {
    let (_, probs) = d.forward(pred)?;
    Ok(bce_mean(&probs.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), z.z()))
}

/// Generator-side adversarial loss against the feature discriminator: the
/// generator wants the matched-scale target prediction classified as source.
pub fn adv_loss_feat<F: Scalar>(
    d_feat: &DiscriminatorNet<F>,
    pred_t_theta: &Prediction,
) -> Result<f64, AdvError> {
    disc_loss(d_feat, pred_t_theta, DomainLabel::Source)
}

/// Generator-side adversarial loss against the scale discriminator: the
/// generator wants the native-scale target prediction classified as
/// source-scale.
pub fn adv_loss_scale<F: Scalar>(
    d_scale: &DiscriminatorNet<F>,
    pred_t_sigma: &Prediction,
) -> Result<f64, AdvError> {
    disc_loss(d_scale, pred_t_sigma, DomainLabel::Source)
}

/// Total generator loss (Eq. 9).
pub fn total_gen_loss(l_seg: f64, l_feat: f64, l_scale: f64, w: &LossWeights) -> f64 {
    l_seg + w.lambda_f * l_feat + w.lambda_s * l_scale
}
