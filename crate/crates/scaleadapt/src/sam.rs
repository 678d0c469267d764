//! Scale-aware channel attention over the concatenated multi-scale feature
//! taps. Three 1x1 convolutions (alpha, beta, gamma) produce a row-stochastic
//! C x C attention matrix and a recombined feature map; there is no residual
//! path, so the output is exactly the attention-weighted mixture.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{Conv2dLayer, Params};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::segnet::FeatureTaps;
use crate::types::Raster;

/// Row-stochastic channel-mixing matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub channels: usize,
    /// Row-major C x C entries; row c holds the mixture weights that build
    /// output channel c.
    pub a: Vec<f32>,
}

impl AttentionMatrix {
    pub fn row_sums(&self) -> Vec<f32> {
        (0..self.channels)
            .map(|r| self.a[r * self.channels..(r + 1) * self.channels].iter().sum())
            .collect()
    }

    /// Total attention each source channel receives across all output
    /// channels (column sums).
    pub fn channel_mass(&self) -> Vec<f32> {
        let mut mass = vec![0.0f32; self.channels];
        for r in 0..self.channels {
            for c in 0..self.channels {
                mass[c] += self.a[r * self.channels + c];
            }
        }
        mass
    }

    /// Write the matrix and per-channel mass as a JSON report.
    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let doc = serde_json::json!({
            "channels": self.channels,
            "a": self.a,
            "channel_mass": self.channel_mass(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAttention<F> {
    pub alpha: Conv2dLayer<F>,
    pub beta: Conv2dLayer<F>,
    pub gamma: Conv2dLayer<F>,
}

impl<F: Scalar> ScaleAttention<F> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        ScaleAttention {
            alpha: Conv2dLayer::new(rng, &format!("{name}.alpha"), channels, channels, 1, 1, 0, 1),
            beta: Conv2dLayer::new(rng, &format!("{name}.beta"), channels, channels, 1, 1, 0, 1),
            gamma: Conv2dLayer::new(rng, &format!("{name}.gamma"), channels, channels, 1, 1, 0, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.w.shape[1]
    }

    /// Bring every tap to the smallest tap's spatial dims and concatenate
    /// along channels, in tap order.
    pub fn pool_and_concat(tape: &mut Tape<F>, taps: &[(Var, usize)]) -> Var {
        let dims: Vec<(usize, usize)> = taps
            .iter()
            .map(|&(v, _)| {
                let (_, _, h, w) = tape.value(v).dims4();
                (h, w)
            })
            .collect();
        let (ph, pw) = *dims.iter().min().expect("at least one tap");
        let pooled: Vec<Var> = taps
            .iter()
            .zip(&dims)
            .map(|(&(v, _), &(h, w))| {
                if (h, w) == (ph, pw) {
                    v
                } else if h >= ph && w >= pw {
                    tape.adaptive_avg_pool(v, ph, pw)
                } else {
                    tape.bilinear_resize(v, ph, pw)
                }
            })
            .collect();
        tape.concat_channels(&pooled)
    }

    /// Attention over a pooled B x C x Hp x Wp map. Returns the recombined
    /// map (same dims) and the B x C x C attention matrices.
    pub fn forward(&self, tape: &mut Tape<F>, f: Var, trainable: bool) -> (Var, Var) {
        let (b, c, hp, wp) = tape.value(f).dims4();
        let n = hp * wp;
        let a = self.alpha.forward(tape, f, trainable);
        let bq = self.beta.forward(tape, f, trainable);
        let g = self.gamma.forward(tape, f, trainable);
        let ar = tape.reshape(a, vec![b, c, n]);
        let br = tape.reshape(bq, vec![b, c, n]);
        let gr = tape.reshape(g, vec![b, c, n]);
        let m = tape.batch_matmul(ar, br, false, true);
        let att = tape.softmax_last(m);
        let o = tape.batch_matmul(att, gr, false, false);
        let o = tape.reshape(o, vec![b, c, hp, wp]);
        (o, att)
    }

    /// Attention matrix for a single pooled raster.
    pub fn attention(&self, f: &Raster) -> AttentionMatrix {
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_raster(f));
        let (_, att) = self.forward(&mut tape, fv, false);
        AttentionMatrix {
            channels: f.channels,
            a: tape.value(att).data.iter().map(|&v| Scalar::to_f32(v)).collect(),
        }
    }

    /// Recombined map for a single pooled raster.
    pub fn apply(&self, f: &Raster) -> Raster {
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::from_raster(f));
        let (o, _) = self.forward(&mut tape, fv, false);
        tape.value(o).to_rasters().remove(0)
    }
}

impl<F: Scalar> Params<F> for ScaleAttention<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.alpha.visit(f);
        self.beta.visit(f);
        self.gamma.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.alpha.visit_mut(f);
        self.beta.visit_mut(f);
        self.gamma.visit_mut(f);
    }
}

/// Pool every tap to `pool_dims` and concatenate, without any parameters.
pub fn pool_and_concat_taps(taps: &FeatureTaps, pool_dims: (usize, usize)) -> Raster {
    let mut tape: Tape<f32> = Tape::new();
    let vars: Vec<(Var, usize)> = taps
        .maps
        .iter()
        .zip(&taps.strides)
        .map(|(m, &s)| (tape.constant(Tensor::from_raster(m)), s))
        .collect();
    let (ph, pw) = pool_dims;
    let pooled: Vec<Var> = vars
        .iter()
        .map(|&(v, _)| {
            let (_, _, h, w) = tape.value(v).dims4();
            if (h, w) == (ph, pw) {
                v
            } else if h >= ph && w >= pw {
                tape.adaptive_avg_pool(v, ph, pw)
            } else {
                tape.bilinear_resize(v, ph, pw)
            }
        })
        .collect();
    let cat = tape.concat_channels(&pooled);
    tape.value(cat).to_rasters().remove(0)
}

/// O = A * g over the channel axis, for a precomputed attention matrix.
pub fn mix(a: &AttentionMatrix, g: &Raster) -> Raster {
    assert_eq!(a.channels, g.channels);
    let n = g.height * g.width;
    let mut out = vec![0.0f32; g.data.len()];
    for r in 0..a.channels {
        for c in 0..a.channels {
            let w = a.a[r * a.channels + c];
            for i in 0..n {
                out[r * n + i] += w * g.data[c * n + i];
            }
        }
    }
    Raster::new(g.channels, g.height, g.width, out)
}
