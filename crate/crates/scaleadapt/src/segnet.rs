//! Compact encoder-decoder segmentation network with multi-scale feature
//! taps and a dilated-convolution context head.
//!
//! The encoder is a stem conv followed by residual stages, each halving the
//! spatial dims. The tap list exposed to the attention module is the stem
//! output, every stage output except the last, and the context head output.
//! For the stock configuration that is five maps with channel counts
//! 16/32/64/128/128 at strides 2/4/8/16/32.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{he_normal, BatchNormLayer, Conv2dLayer, Params};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::sam::ScaleAttention;
use crate::types::{Prediction, Raster, Tile};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("input {h}x{w} is smaller than the minimum {min}x{min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint decode: {0}")]
    Decode(String),
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub head_channels: usize,
    pub use_sam: bool,
}

impl SegConfig {
    pub fn stock(num_classes: usize, use_sam: bool) -> Self {
        SegConfig {
            in_channels: 3,
            num_classes,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128, 128],
            head_channels: 128,
            use_sam,
        }
    }

    /// Small two-stage variant for gradient checks.
    pub fn mini(num_classes: usize, use_sam: bool) -> Self {
        SegConfig {
            in_channels: 3,
            num_classes,
            stem_channels: 4,
            stage_channels: vec![6, 8],
            head_channels: 8,
            use_sam,
        }
    }

    /// Overall encoder stride (stem and every stage halve the dims).
    pub fn stride(&self) -> usize {
        1 << (1 + self.stage_channels.len())
    }

    /// Strides of the exposed taps, outermost first.
    pub fn tap_strides(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..self.stage_channels.len()).map(|i| 2 << i).collect();
        s.push(self.stride());
        s
    }

    /// Channel counts of the exposed taps, matching `tap_strides` order.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = vec![self.stem_channels];
        c.extend_from_slice(&self.stage_channels[..self.stage_channels.len() - 1]);
        c.push(self.head_channels);
        c
    }

    pub fn total_tap_channels(&self) -> usize {
        self.tap_channels().iter().sum()
    }
}

/// Multi-scale feature maps captured during a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureTaps {
    pub maps: Vec<Raster>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResBlock<F> {
    conv1: Conv2dLayer<F>,
    bn1: BatchNormLayer<F>,
    conv2: Conv2dLayer<F>,
    bn2: BatchNormLayer<F>,
    skip: Conv2dLayer<F>,
    skip_bn: BatchNormLayer<F>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        ResBlock {
            conv1: Conv2dLayer::new(rng, &format!("{name}.conv1"), cin, cout, 3, 2, 1, 1),
            bn1: BatchNormLayer::new(&format!("{name}.bn1"), cout),
            conv2: Conv2dLayer::new(rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 1),
            bn2: BatchNormLayer::new(&format!("{name}.bn2"), cout),
            skip: Conv2dLayer::new(rng, &format!("{name}.skip"), cin, cout, 1, 2, 0, 1),
            skip_bn: BatchNormLayer::new(&format!("{name}.skip_bn"), cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape<F>, x: Var, training: bool, trainable: bool) -> Var {
        let y = self.conv1.forward(tape, x, trainable);
        let y = self.bn1.forward(tape, y, training, trainable);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y, trainable);
        let y = self.bn2.forward(tape, y, training, trainable);
        let s = self.skip.forward(tape, x, trainable);
        let s = self.skip_bn.forward(tape, s, training, trainable);
        let out = tape.add(y, s);
        tape.relu(out)
    }
}

impl<F: Scalar> Params<F> for ResBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.skip.visit(f);
        self.skip_bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        self.skip.visit_mut(f);
        self.skip_bn.visit_mut(f);
    }
}

/// Parallel dilated 3x3 convolutions (dilations 1, 2, 4) fused by a 1x1 conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ContextHead<F> {
    branches: Vec<Conv2dLayer<F>>,
    fuse: Conv2dLayer<F>,
    bn: BatchNormLayer<F>,
}

impl<F: Scalar> ContextHead<F> {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let branches = [1usize, 2, 4]
            .iter()
            .map(|&d| Conv2dLayer::new(rng, &format!("{name}.d{d}"), cin, cout, 3, 1, d, d))
            .collect();
        ContextHead {
            branches,
            fuse: Conv2dLayer::new(rng, &format!("{name}.fuse"), 3 * cout, cout, 1, 1, 0, 1),
            bn: BatchNormLayer::new(&format!("{name}.bn"), cout),
        }
    }

    fn forward(&mut self, tape: &mut Tape<F>, x: Var, training: bool, trainable: bool) -> Var {
        let outs: Vec<Var> = self.branches.iter().map(|b| b.forward(tape, x, trainable)).collect();
        let cat = tape.concat_channels(&outs);
        let y = self.fuse.forward(tape, cat, trainable);
        let y = self.bn.forward(tape, y, training, trainable);
        tape.relu(y)
    }
}

impl<F: Scalar> Params<F> for ContextHead<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        for b in &self.branches {
            b.visit(f);
        }
        self.fuse.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        for b in &mut self.branches {
            b.visit_mut(f);
        }
        self.fuse.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel<F> {
    pub config: SegConfig,
    stem_conv: Conv2dLayer<F>,
    stem_bn: BatchNormLayer<F>,
    stages: Vec<ResBlock<F>>,
    head: ContextHead<F>,
    pub sam: Option<ScaleAttention<F>>,
    sam_reduce: Option<Conv2dLayer<F>>,
    classifier: Conv2dLayer<F>,
}

/// Batched forward outputs kept as tape variables so callers can build
/// losses on top.
pub struct ForwardVars {
    /// Softmax probabilities, N x K x H x W at the original input dims.
    pub probs: Var,
    /// Pre-softmax logits at the original input dims.
    pub logits: Var,
    /// Taps with their strides, outermost first.
    pub taps: Vec<(Var, usize)>,
    /// The context-head tap (last entry of `taps`).
    pub head_tap: Var,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(config: SegConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv =
            Conv2dLayer::new(&mut rng, "seg.stem.conv", config.in_channels, config.stem_channels, 3, 2, 1, 1);
        let stem_bn = BatchNormLayer::new("seg.stem.bn", config.stem_channels);
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            stages.push(ResBlock::new(&mut rng, &format!("seg.s{i}"), cin, cout));
            cin = cout;
        }
        let head = ContextHead::new(&mut rng, "seg.head", cin, config.head_channels);
        let (sam, sam_reduce) = if config.use_sam {
            let c = config.total_tap_channels();
            (
                Some(ScaleAttention::new(&mut rng, "seg.sam", c)),
                Some(Conv2dLayer::new(&mut rng, "seg.sam.reduce", c, config.head_channels, 1, 1, 0, 1)),
            )
        } else {
            (None, None)
        };
        let classifier = Conv2dLayer {
            name: "seg.cls".to_string(),
            w: he_normal(&mut rng, vec![config.num_classes, config.head_channels, 1, 1]),
            b: Some(Tensor::zeros(vec![config.num_classes])),
            stride: 1,
            pad: 0,
            dilation: 1,
        };
        SegModel { config, stem_conv, stem_bn, stages, head, sam, sam_reduce, classifier }
    }

    /// Batched forward over an N x C x H x W input already on the tape.
    /// `training` selects batch-statistic normalization and updates running
    /// averages; `trainable` controls whether parameters receive gradients.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape<F>,
        x: Var,
        training: bool,
        trainable: bool,
    ) -> ForwardVars {
        let (_, _, h, w) = tape.value(x).dims4();
        let stride = self.config.stride();
        let ph = (stride - h % stride) % stride;
        let pw = (stride - w % stride) % stride;
        let x = if ph > 0 || pw > 0 { tape.pad_bottom_right(x, ph, pw) } else { x };

        let mut taps = Vec::new();
        let y = self.stem_conv.forward(tape, x, trainable);
        let y = self.stem_bn.forward(tape, y, training, trainable);
        let mut y = tape.relu(y);
        taps.push((y, 2));
        let n_stages = self.stages.len();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            y = stage.forward(tape, y, training, trainable);
            if i + 1 < n_stages {
                taps.push((y, 2 << (i + 1)));
            }
        }
        let head_tap = self.head.forward(tape, y, training, trainable);
        taps.push((head_tap, stride));

        let decoder_in = match (&self.sam, &self.sam_reduce) {
            (Some(sam), Some(reduce)) => {
                let f = ScaleAttention::pool_and_concat(tape, &taps);
                let (o, _a) = sam.forward(tape, f, trainable);
                reduce.forward(tape, o, trainable)
            }
            _ => head_tap,
        };
        let up = tape.bilinear_resize(decoder_in, h + ph, w + pw);
        let logits_full = self.classifier.forward(tape, up, trainable);
        let logits =
            if ph > 0 || pw > 0 { tape.crop_top_left(logits_full, h, w) } else { logits_full };
        let probs = tape.softmax_channels(logits);
        ForwardVars { probs, logits, taps, head_tap }
    }

    /// Single-tile eval-mode forward.
    pub fn forward(&self, tile: &Tile) -> Result<(Prediction, FeatureTaps), SegError> {
        let min = self.config.stride();
        let (h, w) = (tile.pixels.height, tile.pixels.width);
        if h < min || w < min {
            return Err(SegError::InputTooSmall { h, w, min });
        }
        // eval mode never touches running statistics, so the clone is only
        // there to satisfy the shared forward path's receiver
        let mut model = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_raster(&tile.pixels));
        let fwd = model.forward_batch(&mut tape, x, false, false);
        let probs = tape.value(fwd.probs).to_rasters().remove(0);
        let maps: Vec<Raster> =
            fwd.taps.iter().map(|&(v, _)| tape.value(v).to_rasters().remove(0)).collect();
        let strides = fwd.taps.iter().map(|&(_, s)| s).collect();
        Ok((
            Prediction { probs, source_tile_id: tile.id.clone() },
            FeatureTaps { maps, strides },
        ))
    }

    /// Spatially averaged context-head features, a fixed-length embedding of
    /// the tile.
    pub fn encode_embedding(&self, tile: &Tile) -> Result<Vec<f32>, SegError> {
        let min = self.config.stride();
        let (h, w) = (tile.pixels.height, tile.pixels.width);
        if h < min || w < min {
            return Err(SegError::InputTooSmall { h, w, min });
        }
        let mut model = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_raster(&tile.pixels));
        let fwd = model.forward_batch(&mut tape, x, false, false);
        let pooled = tape.global_avg_pool(fwd.head_tap);
        Ok(tape.value(pooled).data.iter().map(|&v| Scalar::to_f32(v)).collect())
    }

    /// Apply a closure to every batch-norm layer, in parameter order.
    pub fn for_each_bn(&self, f: &mut dyn FnMut(&BatchNormLayer<F>)) {
        f(&self.stem_bn);
        for s in &self.stages {
            f(&s.bn1);
            f(&s.bn2);
            f(&s.skip_bn);
        }
        f(&self.head.bn);
    }

    pub fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNormLayer<F>)) {
        f(&mut self.stem_bn);
        for s in &mut self.stages {
            f(&mut s.bn1);
            f(&mut s.bn2);
            f(&mut s.skip_bn);
        }
        f(&mut self.head.bn);
    }

    pub fn save(&self, path: &Path) -> Result<(), SegError> {
        let file = SegCheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: checkpoint_tensors(self),
        };
        let bytes = bincode::serialize(&file).map_err(|e| SegError::Decode(e.to_string()))?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SegError> {
        let bytes = fs::read(path)?;
        let file: SegCheckpointFile<F> =
            bincode::deserialize(&bytes).map_err(|e| SegError::Decode(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(SegError::VersionMismatch {
                found: file.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = SegModel::new(file.config, 0);
        let mut lookup: std::collections::HashMap<String, Tensor<F>> =
            file.tensors.into_iter().collect();
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match lookup.remove(name) {
                None => err = Some(SegError::MissingTensor(name.to_string())),
                Some(loaded) if loaded.shape != t.shape => {
                    err = Some(SegError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape.clone(),
                        found: loaded.shape,
                    })
                }
                Some(loaded) => *t = loaded,
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut stat_err = None;
        model.for_each_bn_mut(&mut |bn| {
            if stat_err.is_some() {
                return;
            }
            for (suffix, dst) in
                [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)]
            {
                let key = format!("{}.{suffix}", bn.name);
                match lookup.remove(&key) {
                    None => {
                        stat_err = Some(SegError::MissingTensor(key));
                        return;
                    }
                    Some(t) => *dst = t.data,
                }
            }
        });
        if let Some(e) = stat_err {
            return Err(e);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: serde::Serialize + serde::de::DeserializeOwned")]
struct SegCheckpointFile<F> {
    version: u32,
    config: SegConfig,
    tensors: Vec<(String, Tensor<F>)>,
}

fn checkpoint_tensors<F: Scalar>(
    model: &SegModel<F>,
) -> Vec<(String, Tensor<F>)> {
    let mut tensors = model.named_params();
    model.for_each_bn(&mut |bn| {
        tensors.push((
            format!("{}.running_mean", bn.name),
            Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone()),
        ));
        tensors.push((
            format!("{}.running_var", bn.name),
            Tensor::new(vec![bn.running_var.len()], bn.running_var.clone()),
        ));
    });
    tensors
}

impl<F: Scalar> Params<F> for SegModel<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        for s in &self.stages {
            s.visit(f);
        }
        self.head.visit(f);
        if let Some(sam) = &self.sam {
            sam.visit(f);
        }
        if let Some(r) = &self.sam_reduce {
            r.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.head.visit_mut(f);
        if let Some(sam) = &mut self.sam {
            sam.visit_mut(f);
        }
        if let Some(r) = &mut self.sam_reduce {
            r.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{sample_indices, GradCheckReport};
    use crate::types::{constant_tile, Location};
    use rand::Rng;

    fn random_tile(seed: u64, h: usize, w: usize, gsd: f64) -> Tile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tile {
            pixels: Raster::new(3, h, w, data),
            gsd_m: gsd,
            location: Location::Source,
            id: format!("t{seed}"),
        }
    }

    #[test]
    fn stock_taps_have_documented_shapes() {
        let model: SegModel<f32> = SegModel::new(SegConfig::stock(5, false), 7);
        let tile = random_tile(1, 64, 64, 0.09);
        let (pred, taps) = model.forward(&tile).unwrap();
        assert_eq!((pred.probs.channels, pred.probs.height, pred.probs.width), (5, 64, 64));
        assert_eq!(taps.strides, vec![2, 4, 8, 16, 32]);
        let dims: Vec<(usize, usize, usize)> =
            taps.maps.iter().map(|m| (m.channels, m.height, m.width)).collect();
        assert_eq!(dims, vec![(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4), (128, 2, 2)]);
        assert!(taps.maps.iter().all(|m| m.data.iter().all(|v| v.is_finite())));
        assert_eq!(model.config.total_tap_channels(), 368);
    }

    #[test]
    fn forward_is_deterministic() {
        let model: SegModel<f32> = SegModel::new(SegConfig::mini(3, false), 9);
        let tile = random_tile(2, 24, 24, 0.09);
        let (a, _) = model.forward(&tile).unwrap();
        let (b, _) = model.forward(&tile).unwrap();
        assert_eq!(a.probs.data, b.probs.data);
    }

    #[test]
    fn zero_input_gives_uniform_prediction() {
        let model: SegModel<f32> = SegModel::new(SegConfig::mini(4, false), 3);
        let tile = constant_tile("z", 16, 0.0, 0.09, Location::Source);
        let (pred, _) = model.forward(&tile).unwrap();
        for &p in &pred.probs.data {
            assert!((p - 0.25).abs() < 1e-6, "expected uniform prob, got {p}");
        }
    }

    #[test]
    fn output_dims_match_input_for_odd_sizes() {
        let model: SegModel<f32> = SegModel::new(SegConfig::mini(3, false), 11);
        for (h, w) in [(19, 33), (8, 8), (40, 21)] {
            let tile = random_tile(4, h, w, 0.09);
            let (pred, _) = model.forward(&tile).unwrap();
            assert_eq!((pred.probs.height, pred.probs.width), (h, w));
            for y in 0..h {
                for x in 0..w {
                    let s: f32 = (0..3).map(|c| pred.probs.at(c, y, x)).sum();
                    assert!((s - 1.0).abs() < 1e-5, "prob sum {s} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let model: SegModel<f32> = SegModel::new(SegConfig::stock(5, false), 1);
        let tile = random_tile(5, 16, 16, 0.09);
        assert!(matches!(model.forward(&tile), Err(SegError::InputTooSmall { min: 32, .. })));
    }

    #[test]
    fn fixed_seed_init_is_reproducible() {
        let a: SegModel<f32> = SegModel::new(SegConfig::mini(3, true), 42);
        let b: SegModel<f32> = SegModel::new(SegConfig::mini(3, true), 42);
        assert_eq!(a.named_params(), b.named_params());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model: SegModel<f32> = SegModel::new(SegConfig::mini(3, true), 13);
        // perturb running stats so the round trip covers them too
        model.for_each_bn_mut(&mut |bn| {
            for v in &mut bn.running_mean {
                *v += 0.25;
            }
        });
        model.save(&path).unwrap();
        let loaded = SegModel::<f32>::load(&path).unwrap();
        assert_eq!(model, loaded);
        let tile = random_tile(6, 16, 16, 0.09);
        assert_eq!(model.forward(&tile).unwrap().0.probs.data, loaded.forward(&tile).unwrap().0.probs.data);
    }

    #[test]
    fn load_reports_missing_tensor_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model: SegModel<f32> = SegModel::new(SegConfig::mini(3, false), 13);
        let mut file = SegCheckpointFile {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            tensors: checkpoint_tensors(&model),
        };
        file.tensors.retain(|(n, _)| n != "seg.s1.conv2.w");
        fs::write(&path, bincode::serialize(&file).unwrap()).unwrap();
        match SegModel::<f32>::load(&path) {
            Err(SegError::MissingTensor(n)) => assert_eq!(n, "seg.s1.conv2.w"),
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_version_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model: SegModel<f32> = SegModel::new(SegConfig::mini(3, false), 13);
        let mut file = SegCheckpointFile {
            version: CHECKPOINT_VERSION + 1,
            config: model.config.clone(),
            tensors: checkpoint_tensors(&model),
        };
        fs::write(&path, bincode::serialize(&file).unwrap()).unwrap();
        assert!(matches!(SegModel::<f32>::load(&path), Err(SegError::VersionMismatch { .. })));

        file.version = CHECKPOINT_VERSION;
        for (n, t) in &mut file.tensors {
            if n == "seg.cls.w" {
                *t = Tensor::zeros(vec![2, 2, 1, 1]);
            }
        }
        fs::write(&path, bincode::serialize(&file).unwrap()).unwrap();
        match SegModel::<f32>::load(&path) {
            Err(SegError::ShapeMismatch { name, .. }) => assert_eq!(name, "seg.cls.w"),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn embedding_is_fixed_length_and_input_sensitive() {
        let model: SegModel<f32> = SegModel::new(SegConfig::stock(5, false), 21);
        let a = random_tile(7, 64, 64, 0.09);
        let e1 = model.encode_embedding(&a).unwrap();
        let e2 = model.encode_embedding(&a).unwrap();
        assert_eq!(e1.len(), 128);
        assert!(e1.iter().all(|v| v.is_finite()));
        assert_eq!(e1, e2);
        let b = random_tile(8, 32, 32, 0.18);
        let eb = model.encode_embedding(&b).unwrap();
        assert_ne!(e1, eb);
    }

    #[test]
    fn sam_variant_changes_values_but_not_shape() {
        let with_sam: SegModel<f32> = SegModel::new(SegConfig::mini(3, true), 17);
        let mut without = with_sam.clone();
        without.sam = None;
        without.sam_reduce = None;
        let tile = random_tile(9, 16, 16, 0.09);
        let (p_sam, _) = with_sam.forward(&tile).unwrap();
        let (p_plain, _) = without.forward(&tile).unwrap();
        assert_eq!(
            (p_sam.probs.channels, p_sam.probs.height, p_sam.probs.width),
            (p_plain.probs.channels, p_plain.probs.height, p_plain.probs.width)
        );
        assert_ne!(p_sam.probs.data, p_plain.probs.data);
    }

    fn seg_loss_eval(model: &SegModel<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = m.forward_batch(&mut tape, xv, true, true);
        let loss = tape.nll_probs(fwd.probs, labels.to_vec());
        tape.value(loss).item()
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        for use_sam in [false, true] {
            let model: SegModel<f64> = SegModel::new(SegConfig::mini(3, use_sam), 5);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::new(
                vec![2, 3, 16, 16],
                (0..2 * 3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.gen_range(0..3u8)).collect();

            let mut m = model.clone();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let fwd = m.forward_batch(&mut tape, xv, true, true);
            let loss = tape.nll_probs(fwd.probs, labels.clone());
            let grads = tape.backward(loss);

            let h = 1e-5;
            let mut report = GradCheckReport::default();
            for (name, tensor) in model.named_params() {
                let v = tape.bound_var(&name).expect("param bound during forward");
                let g = grads.get(v).unwrap_or_else(|| panic!("no gradient for {name}"));
                for i in sample_indices(tensor.numel(), 2, 31) {
                    let perturb = |delta: f64| {
                        let mut m = model.clone();
                        m.visit_mut(&mut |n, t| {
                            if n == name {
                                t.data[i] += delta;
                            }
                        });
                        seg_loss_eval(&m, &x, &labels)
                    };
                    let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                    report.record(&name, i, g.data[i], numeric);
                }
            }
            report.assert_below(1e-4);
        }
    }
}
