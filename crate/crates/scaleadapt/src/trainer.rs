//! Alternating adversarial training loop: a generator phase followed by one
//! update each for the feature and scale discriminators, with the other
//! networks frozen in every phase.
//!
//! The loop is single-threaded and bit-exactly reproducible from a seed; the
//! full state (networks, optimizer moments, RNG) round-trips through the
//! resume checkpoint.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{DiscriminatorNet, LossWeights};
use crate::metrics::{evaluate_with, EvalReport};
use crate::nn::layers::Params;
use crate::nn::tape::{Gradients, Tape, Var};
use crate::nn::tensor::Tensor;
use crate::resample::match_scale;
use crate::segnet::{SegConfig, SegModel};
use crate::types::{Dataset, SegMask, Tile};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss term '{term}' is not finite at iteration {iter}")]
    NonFinite { term: String, iter: usize },
    #[error("freeze contract violated in {phase} phase: parameter '{param}' changed")]
    FreezeViolation { phase: String, param: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("segmentation model: {0}")]
    Seg(#[from] crate::segnet::SegError),
    #[error("resample: {0}")]
    Resample(#[from] crate::resample::ResampleError),
    #[error("metrics: {0}")]
    Metrics(#[from] crate::metrics::MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("state encode/decode: {0}")]
    Codec(String),
}

/// iter -> learning rate under polynomial decay.
pub fn lr_at(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    assert!(iter <= max_iter, "iter {iter} past max_iter {max_iter}");
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    /// Generator SGD.
    pub gen_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Discriminator Adam.
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Polynomial decay power shared by both schedules.
    pub power: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            gen_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            disc_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            power: 0.9,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("gen_lr", self.gen_lr),
            ("momentum", self.momentum),
            ("disc_lr", self.disc_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("power", self.power),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// SGD with Nesterov momentum. Weight decay applies to convolution kernels
/// (names ending in ".w") only, never to biases or normalization parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SgdState {
    velocity: HashMap<String, Vec<f32>>,
}

impl SgdState {
    pub fn step(
        &mut self,
        params: &mut dyn Params<f32>,
        grads: &HashMap<String, Tensor<f32>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let lr = lr as f32;
        let mu = momentum as f32;
        params.visit_mut(&mut |name, t| {
            let Some(g) = grads.get(name) else { return };
            let wd = if name.ends_with(".w") { weight_decay as f32 } else { 0.0 };
            let vel = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
            for i in 0..t.numel() {
                let d = g.data[i] + wd * t.data[i];
                vel[i] = mu * vel[i] + d;
                t.data[i] -= lr * (d + mu * vel[i]);
            }
        });
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn step(
        &mut self,
        params: &mut dyn Params<f32>,
        grads: &HashMap<String, Tensor<f32>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let step = lr * c2.sqrt() / c1;
        params.visit_mut(&mut |name, t| {
            let Some(g) = grads.get(name) else { return };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
            for i in 0..t.numel() {
                let gi = g.data[i] as f64;
                m[i] = (beta1 * m[i] as f64 + (1.0 - beta1) * gi) as f32;
                v[i] = (beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi) as f32;
                t.data[i] -= (step * m[i] as f64 / ((v[i] as f64).sqrt() + eps)) as f32;
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_iter: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub enable_d_feat: bool,
    pub enable_d_scale: bool,
    pub enable_sam: bool,
    pub eval_interval: usize,
    pub num_classes: usize,
    pub optim: OptimizerSpec,
    /// Verify the freeze contract with bit-exact parameter snapshots around
    /// every phase. Costs one extra parameter copy per phase.
    pub check_freeze: bool,
    /// Use the miniature network instead of the stock one (tests).
    pub mini_model: bool,
    /// Stop the loop early at this iteration while keeping the LR schedule
    /// pinned to `max_iter`; used to exercise resume.
    pub halt_iter: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iter: 3000,
            batch_size: 4,
            seed: 1,
            weights: LossWeights::default(),
            enable_d_feat: true,
            enable_d_scale: true,
            enable_sam: true,
            eval_interval: 100,
            num_classes: 5,
            optim: OptimizerSpec::default(),
            check_freeze: false,
            mini_model: false,
            halt_iter: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 for batch-statistic layers".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(TrainError::Config("num_classes must be >= 2".into()));
        }
        self.weights.validate().map_err(TrainError::Config)?;
        self.optim.validate()
    }
}

/// Per-iteration loss record, appended to the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iter: usize,
    pub l_seg: f64,
    pub l_adv_feat: f64,
    pub l_adv_scale: f64,
    pub l_d_feat: f64,
    pub l_d_scale: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// Complete resumable training state.
#[derive(Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub iter: usize,
    pub model: SegModel<f32>,
    pub d_feat: Option<DiscriminatorNet<f32>>,
    pub d_scale: Option<DiscriminatorNet<f32>>,
    pub opt_g: SgdState,
    pub opt_d_feat: AdamState,
    pub opt_d_scale: AdamState,
    pub rng: ChaCha8Rng,
    pub best_miou: Option<f64>,
}

impl TrainState {
    pub fn new(opts: &TrainOptions) -> Self {
        let config = if opts.mini_model {
            SegConfig::mini(opts.num_classes, opts.enable_sam)
        } else {
            SegConfig::stock(opts.num_classes, opts.enable_sam)
        };
        let model = SegModel::new(config, opts.seed);
        let mut d_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed_d15c));
        let d_feat = opts
            .enable_d_feat
            .then(|| DiscriminatorNet::new(&mut d_rng, "df", opts.num_classes));
        let d_scale = opts
            .enable_d_scale
            .then(|| DiscriminatorNet::new(&mut d_rng, "ds", opts.num_classes));
        TrainState {
            iter: 0,
            model,
            d_feat,
            d_scale,
            opt_g: SgdState::default(),
            opt_d_feat: AdamState::default(),
            opt_d_scale: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            best_miou: None,
        }
    }
}

fn named_grads(tape: &Tape<f32>, grads: &Gradients<f32>) -> HashMap<String, Tensor<f32>> {
    tape.bound_names()
        .iter()
        .filter_map(|n| {
            let v = tape.bound_var(n)?;
            grads.get(v).map(|g| (n.clone(), g.clone()))
        })
        .collect()
}

fn check_finite(tape: &Tape<f32>, v: Var, term: &str, iter: usize) -> Result<f64, TrainError> {
    let val = tape.value(v).item() as f64;
    if !val.is_finite() {
        return Err(TrainError::NonFinite { term: term.to_string(), iter });
    }
    Ok(val)
}

fn snapshot(p: &dyn Params<f32>) -> Vec<(String, Tensor<f32>)> {
    p.named_params()
}

fn assert_frozen(
    before: &[(String, Tensor<f32>)],
    after: &[(String, Tensor<f32>)],
    phase: &str,
) -> Result<(), TrainError> {
    for ((name, a), (_, b)) in before.iter().zip(after) {
        if a.data != b.data {
            return Err(TrainError::FreezeViolation {
                phase: phase.to_string(),
                param: name.clone(),
            });
        }
    }
    Ok(())
}

/// One alternating iteration: generator update, then each enabled
/// discriminator update on detached predictions.
pub fn train_step(
    state: &mut TrainState,
    opts: &TrainOptions,
    batch_s: &[(&Tile, &SegMask)],
    batch_t: &[&Tile],
) -> Result<IterationTrace, TrainError> {
    let iter = state.iter;
    let theta = batch_s[0].0.gsd_m;
    let lr_g = lr_at(opts.optim.gen_lr, iter, opts.max_iter, opts.optim.power);
    let lr_d = lr_at(opts.optim.disc_lr, iter, opts.max_iter, opts.optim.power);

    // matched-scale target derived per iteration from the native batch
    let tiles_t_theta: Vec<Tile> =
        batch_t.iter().map(|t| match_scale(t, theta)).collect::<Result<_, _>>()?;

    let need_t_theta = opts.enable_d_feat || opts.enable_d_scale;
    let need_t_sigma = opts.enable_d_scale;

    let frozen_df = (opts.check_freeze && opts.enable_d_feat)
        .then(|| snapshot(state.d_feat.as_ref().unwrap()));
    let frozen_ds = (opts.check_freeze && opts.enable_d_scale)
        .then(|| snapshot(state.d_scale.as_ref().unwrap()));

    // ---- generator phase (discriminators frozen) ----
    let mut tape: Tape<f32> = Tape::new();
    let xs_rasters: Vec<&crate::types::Raster> = batch_s.iter().map(|(t, _)| &t.pixels).collect();
    let xs = tape.constant(Tensor::from_rasters(&xs_rasters));
    let fwd_s = state.model.forward_batch(&mut tape, xs, true, true);
    let labels: Vec<u8> = batch_s.iter().flat_map(|(_, m)| m.labels.iter().copied()).collect();
    let l_seg_var = tape.nll_probs(fwd_s.probs, labels);
    let l_seg = check_finite(&tape, l_seg_var, "l_seg", iter)?;
    let mut terms = vec![(l_seg_var, 1.0)];

    let mut p_s = None;
    let mut p_t_theta = None;
    let mut p_t_sigma = None;
    let mut l_adv_feat = 0.0;
    let mut l_adv_scale = 0.0;

    let fwd_t_theta = need_t_theta.then(|| {
        let rs: Vec<&crate::types::Raster> = tiles_t_theta.iter().map(|t| &t.pixels).collect();
        let x = tape.constant(Tensor::from_rasters(&rs));
        state.model.forward_batch(&mut tape, x, true, true)
    });
    let fwd_t_sigma = need_t_sigma.then(|| {
        let rs: Vec<&crate::types::Raster> = batch_t.iter().map(|t| &t.pixels).collect();
        let x = tape.constant(Tensor::from_rasters(&rs));
        state.model.forward_batch(&mut tape, x, true, true)
    });

    if let (Some(d), Some(fwd)) = (&state.d_feat, &fwd_t_theta) {
        let logits = d.forward_batch(&mut tape, fwd.probs, false);
        let l = tape.bce_logits_mean(logits, 1.0);
        l_adv_feat = check_finite(&tape, l, "l_adv_feat", iter)?;
        terms.push((l, opts.weights.lambda_f));
    }
    if let (Some(d), Some(fwd)) = (&state.d_scale, &fwd_t_sigma) {
        let logits = d.forward_batch(&mut tape, fwd.probs, false);
        let l = tape.bce_logits_mean(logits, 1.0);
        l_adv_scale = check_finite(&tape, l, "l_adv_scale", iter)?;
        terms.push((l, opts.weights.lambda_s));
    }
    let total = tape.weighted_sum(&terms);
    check_finite(&tape, total, "l_total", iter)?;
    let grads = tape.backward(total);
    let g_grads = named_grads(&tape, &grads);
    if opts.enable_d_feat {
        p_s = Some(tape.value(fwd_s.probs).clone());
        p_t_theta = fwd_t_theta.as_ref().map(|f| tape.value(f.probs).clone());
    } else if opts.enable_d_scale {
        p_t_theta = fwd_t_theta.as_ref().map(|f| tape.value(f.probs).clone());
    }
    if opts.enable_d_scale {
        p_t_sigma = fwd_t_sigma.as_ref().map(|f| tape.value(f.probs).clone());
    }
    drop(tape);
    state.opt_g.step(&mut state.model, &g_grads, lr_g, opts.optim.momentum, opts.optim.weight_decay);

    if let Some(before) = &frozen_df {
        assert_frozen(before, &snapshot(state.d_feat.as_ref().unwrap()), "generator")?;
    }
    if let Some(before) = &frozen_ds {
        assert_frozen(before, &snapshot(state.d_scale.as_ref().unwrap()), "generator")?;
    }

    // ---- feature discriminator phase (generator frozen) ----
    let mut l_d_feat = 0.0;
    if let Some(d) = &state.d_feat {
        let frozen_g = opts.check_freeze.then(|| snapshot(&state.model));
        let frozen_ds2 = (opts.check_freeze && opts.enable_d_scale)
            .then(|| snapshot(state.d_scale.as_ref().unwrap()));
        let mut tape: Tape<f32> = Tape::new();
        let ps = tape.constant(p_s.clone().unwrap());
        let pt = tape.constant(p_t_theta.clone().unwrap());
        let logit_s = d.forward_batch(&mut tape, ps, true);
        let logit_t = d.forward_batch(&mut tape, pt, true);
        let ls = tape.bce_logits_mean(logit_s, 1.0);
        let lt = tape.bce_logits_mean(logit_t, 0.0);
        let l = tape.weighted_sum(&[(ls, 0.5), (lt, 0.5)]);
        l_d_feat = check_finite(&tape, l, "l_d_feat", iter)?;
        let grads = tape.backward(l);
        let d_grads = named_grads(&tape, &grads);
        drop(tape);
        state.opt_d_feat.step(
            state.d_feat.as_mut().unwrap(),
            &d_grads,
            lr_d,
            opts.optim.beta1,
            opts.optim.beta2,
            opts.optim.eps,
        );
        if let Some(before) = &frozen_g {
            assert_frozen(before, &snapshot(&state.model), "d_feat")?;
        }
        if let Some(before) = &frozen_ds2 {
            assert_frozen(before, &snapshot(state.d_scale.as_ref().unwrap()), "d_feat")?;
        }
    }

    // ---- scale discriminator phase (generator frozen) ----
    let mut l_d_scale = 0.0;
    if let Some(d) = &state.d_scale {
        let frozen_g = opts.check_freeze.then(|| snapshot(&state.model));
        let frozen_df2 = (opts.check_freeze && opts.enable_d_feat)
            .then(|| snapshot(state.d_feat.as_ref().unwrap()));
        let mut tape: Tape<f32> = Tape::new();
        // source-scale view of the target is the "real" sample here
        let pt_theta = tape.constant(p_t_theta.clone().unwrap());
        let pt_sigma = tape.constant(p_t_sigma.clone().unwrap());
        let logit_theta = d.forward_batch(&mut tape, pt_theta, true);
        let logit_sigma = d.forward_batch(&mut tape, pt_sigma, true);
        let ls = tape.bce_logits_mean(logit_theta, 1.0);
        let lt = tape.bce_logits_mean(logit_sigma, 0.0);
        let l = tape.weighted_sum(&[(ls, 0.5), (lt, 0.5)]);
        l_d_scale = check_finite(&tape, l, "l_d_scale", iter)?;
        let grads = tape.backward(l);
        let d_grads = named_grads(&tape, &grads);
        drop(tape);
        state.opt_d_scale.step(
            state.d_scale.as_mut().unwrap(),
            &d_grads,
            lr_d,
            opts.optim.beta1,
            opts.optim.beta2,
            opts.optim.eps,
        );
        if let Some(before) = &frozen_g {
            assert_frozen(before, &snapshot(&state.model), "d_scale")?;
        }
        if let Some(before) = &frozen_df2 {
            assert_frozen(before, &snapshot(state.d_feat.as_ref().unwrap()), "d_scale")?;
        }
    }

    state.iter += 1;
    Ok(IterationTrace { iter, l_seg, l_adv_feat, l_adv_scale, l_d_feat, l_d_scale, lr_g, lr_d })
}

/// Paths produced by a training run.
pub struct RunArtifacts {
    pub state_path: PathBuf,
    pub trace_path: PathBuf,
    pub best_model_path: PathBuf,
    pub final_model_path: PathBuf,
}

pub struct RunSummary {
    pub iters_run: usize,
    pub best_miou: Option<f64>,
    pub final_eval: Option<EvalReport>,
    pub artifacts: RunArtifacts,
}

fn save_state(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let bytes = bincode::serialize(state).map_err(|e| TrainError::Codec(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path)?;
    bincode::deserialize(&bytes).map_err(|e| TrainError::Codec(e.to_string()))
}

fn evaluate_model(model: &SegModel<f32>, eval_set: &Dataset) -> Result<EvalReport, TrainError> {
    Ok(evaluate_with(
        |tile| model.forward(tile).expect("eval tile accepted by model").0,
        eval_set,
    )?)
}

/// Run (or resume) training in `out_dir`. The source dataset must carry
/// masks; the target dataset's masks are never read. If `eval_set` is given
/// it drives best-checkpoint retention.
pub fn run(
    opts: &TrainOptions,
    source: &Dataset,
    target: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: &Path,
) -> Result<RunSummary, TrainError> {
    opts.validate()?;
    let masks = source
        .masks
        .as_ref()
        .ok_or_else(|| TrainError::Config("source dataset has no masks".into()))?;
    if source.tiles.is_empty() || target.tiles.is_empty() {
        return Err(TrainError::Config("datasets must be non-empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let artifacts = RunArtifacts {
        state_path: out_dir.join("state.bin"),
        trace_path: out_dir.join("trace.jsonl"),
        best_model_path: out_dir.join("best_model.bin"),
        final_model_path: out_dir.join("final_model.bin"),
    };

    let mut state = if artifacts.state_path.exists() {
        load_state(&artifacts.state_path)?
    } else {
        let s = TrainState::new(opts);
        save_state(&s, &artifacts.state_path)?;
        s
    };
    let start_iter = state.iter;

    let mut trace_file =
        fs::OpenOptions::new().create(true).append(true).open(&artifacts.trace_path)?;

    let stop = opts.halt_iter.map_or(opts.max_iter, |h| h.min(opts.max_iter));
    while state.iter < stop {
        let s_idx: Vec<usize> =
            (0..opts.batch_size).map(|_| state.rng.gen_range(0..source.tiles.len())).collect();
        let t_idx: Vec<usize> =
            (0..opts.batch_size).map(|_| state.rng.gen_range(0..target.tiles.len())).collect();
        let batch_s: Vec<(&Tile, &SegMask)> =
            s_idx.iter().map(|&i| (&source.tiles[i], &masks[i])).collect();
        let batch_t: Vec<&Tile> = t_idx.iter().map(|&i| &target.tiles[i]).collect();

        let trace = train_step(&mut state, opts, &batch_s, &batch_t)?;
        serde_json::to_writer(&mut trace_file, &trace)
            .map_err(|e| TrainError::Codec(e.to_string()))?;
        trace_file.write_all(b"\n")?;

        let at_interval = opts.eval_interval > 0 && state.iter % opts.eval_interval == 0;
        if at_interval || state.iter == opts.max_iter {
            if let Some(es) = eval_set {
                let report = evaluate_model(&state.model, es)?;
                let improved = state.best_miou.map_or(true, |b| report.miou > b);
                if improved {
                    state.best_miou = Some(report.miou);
                    state.model.save(&artifacts.best_model_path)?;
                }
                println!(
                    "iter {}: l_seg {:.4} miou {:.2}% (best {:.2}%)",
                    state.iter,
                    trace.l_seg,
                    report.miou * 100.0,
                    state.best_miou.unwrap_or(0.0) * 100.0
                );
            }
            save_state(&state, &artifacts.state_path)?;
        }
    }
    save_state(&state, &artifacts.state_path)?;
    if state.iter == opts.max_iter {
        state.model.save(&artifacts.final_model_path)?;
        if !artifacts.best_model_path.exists() {
            state.model.save(&artifacts.best_model_path)?;
        }
    }

    let final_eval = eval_set.map(|es| evaluate_model(&state.model, es)).transpose()?;
    Ok(RunSummary {
        iters_run: state.iter - start_iter,
        best_miou: state.best_miou,
        final_eval,
        artifacts,
    })
}
