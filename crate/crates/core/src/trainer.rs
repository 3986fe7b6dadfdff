//! Two-stage encoder training: masked-autoencoder pretraining (stage 1) and
//! supervised territory fine-tuning with a linear head (stage 2), both under
//! AdamW with a constant learning rate after a short linear warmup.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, LoadedCheckpoint};
use crate::data::TerritoryLabel;
use crate::encoder::{
    patchify, sample_mask, DecoderConfig, EncoderConfig, FeatureVector, MaskPlan, VitEncoder,
};
use crate::error::{Error, Result};
use crate::layers::{Linear, Trunk};
use crate::nn::{AdamW, Init, ParamId, ParamStore};
use crate::seeding::{derive_seed, stream_rng};
use crate::volume::Volume;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mae,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Visible fraction for MAE masking: |visible| = round(q*P).
    pub q: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fine-tuning only: freeze the encoder and train just the linear head.
    pub head_only: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale stage-1 preset: lr 6.4e-3, weight decay 0.05, 500 epochs,
    /// visible fraction 0.25.
    pub fn paper_mae() -> TrainConfig {
        TrainConfig {
            stage: Stage::Mae,
            lr: 6.4e-3,
            weight_decay: 0.05,
            epochs: 500,
            batch_size: 16,
            q: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            head_only: false,
            seed: 0,
        }
    }

    /// Full-scale stage-2 preset: lr 1e-3, weight decay 0.05, 1000 epochs.
    pub fn paper_finetune() -> TrainConfig {
        TrainConfig {
            stage: Stage::Finetune,
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 1000,
            batch_size: 16,
            q: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            head_only: false,
            seed: 0,
        }
    }

    /// CPU-scale stage-1 preset used by the default configuration.
    pub fn desk_mae() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            lr: 1.5e-3,
            ..TrainConfig::paper_mae()
        }
    }

    /// CPU-scale stage-2 preset used by the default configuration.
    pub fn desk_finetune() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            ..TrainConfig::paper_finetune()
        }
    }
}

/// Mean squared error over masked tokens only; visible tokens do not
/// contribute. `pred` and `target` hold all P tokens of one sample.
pub fn mae_loss(pred: &Array2<f64>, target: &Array2<f64>, plan: &MaskPlan) -> f64 {
    let denom = (plan.masked.len() * pred.ncols()) as f64;
    let mut sum = 0.0;
    for &p in &plan.masked {
        for j in 0..pred.ncols() {
            let d = pred[[p, j]] - target[[p, j]];
            sum += d * d;
        }
    }
    sum / denom
}

/// Loss plus its gradient w.r.t. `pred`; zero rows at visible positions.
pub fn mae_loss_grad(pred: &Array2<f64>, target: &Array2<f64>, plan: &MaskPlan) -> (f64, Array2<f64>) {
    let denom = (plan.masked.len() * pred.ncols()) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut sum = 0.0;
    for &p in &plan.masked {
        for j in 0..pred.ncols() {
            let d = pred[[p, j]] - target[[p, j]];
            sum += d * d;
            grad[[p, j]] = 2.0 * d / denom;
        }
    }
    (sum / denom, grad)
}

/// Numerically stable cross entropy, -log softmax(logits)[label].
pub fn cross_entropy(logits: &[f64], label: TerritoryLabel) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label.index()]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Lightweight reconstruction decoder: project encoder tokens down, fill
/// masked slots with a learned mask token, add decoder positions, run a
/// small trunk and predict the flattened patch values for every token.
#[derive(Debug, Clone)]
pub struct MaeDecoder {
    pub cfg: DecoderConfig,
    pub proj: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub trunk: Trunk,
    pub head: Linear,
}

pub struct DecoderCache {
    enc_out: Array2<f64>,
    plans: Vec<MaskPlan>,
    trunk_cache: crate::layers::TrunkCache,
    trunk_out: Array2<f64>,
    p_total: usize,
}

impl MaeDecoder {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        cfg: &DecoderConfig,
        enc_dim: usize,
        p_total: usize,
        token_dim: usize,
    ) -> MaeDecoder {
        let proj = Linear::new(store, rng, "decoder.proj", enc_dim, cfg.embed_dim);
        let mask_token = store.add("decoder.mask_token", &[cfg.embed_dim], Init::Normal(0.02), rng);
        let pos = store.add("decoder.pos", &[p_total, cfg.embed_dim], Init::Normal(0.02), rng);
        let trunk = Trunk::new(store, rng, "decoder", cfg.embed_dim, cfg.depth, cfg.heads, 4.0);
        let head = Linear::new(store, rng, "decoder.head", cfg.embed_dim, token_dim);
        MaeDecoder {
            cfg: *cfg,
            proj,
            mask_token,
            pos,
            trunk,
            head,
        }
    }

    /// `enc_out` is the packed visible-token output of the encoder, one
    /// block of `plans[s].visible.len()` rows per sample. Returns predicted
    /// patch values for all `p_total` tokens of every sample.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        enc_out: &Array2<f64>,
        plans: &[MaskPlan],
        p_total: usize,
    ) -> (Array2<f64>, DecoderCache) {
        let batch = plans.len();
        let d = self.cfg.embed_dim;
        let projected = self.proj.forward(store, enc_out);
        let mut full = Array2::zeros((batch * p_total, d));
        let mask_token = store.view1(self.mask_token).to_owned();
        let pos = store.view2(self.pos);
        let mut enc_row = 0usize;
        for (s, plan) in plans.iter().enumerate() {
            for &p in &plan.visible {
                full.row_mut(s * p_total + p).assign(&projected.row(enc_row));
                enc_row += 1;
            }
            for &p in &plan.masked {
                full.row_mut(s * p_total + p).assign(&mask_token);
            }
            for p in 0..p_total {
                let mut row = full.row_mut(s * p_total + p);
                row += &pos.row(p);
            }
        }
        let (trunk_out, trunk_cache) = self.trunk.forward(store, full, batch, p_total);
        let pred = self.head.forward(store, &trunk_out);
        (
            pred,
            DecoderCache {
                enc_out: enc_out.clone(),
                plans: plans.to_vec(),
                trunk_cache,
                trunk_out,
                p_total,
            },
        )
    }

    /// Accumulates decoder gradients and returns the gradient w.r.t. the
    /// encoder's packed visible output.
    pub fn backward_batch(
        &self,
        store: &mut ParamStore,
        cache: &DecoderCache,
        dpred: &Array2<f64>,
    ) -> Array2<f64> {
        let p_total = cache.p_total;
        let d = self.cfg.embed_dim;
        let dtrunk_out = self.head.backward(store, &cache.trunk_out, dpred);
        let dfull = self.trunk.backward(store, &cache.trunk_cache, &dtrunk_out);

        let mut dpos = Array2::<f64>::zeros((p_total, d));
        let mut dmask = vec![0.0; d];
        let n_vis: usize = cache.plans.iter().map(|p| p.visible.len()).sum();
        let mut dprojected = Array2::zeros((n_vis, d));
        let mut enc_row = 0usize;
        for (s, plan) in cache.plans.iter().enumerate() {
            for p in 0..p_total {
                let mut row = dpos.row_mut(p);
                row += &dfull.row(s * p_total + p);
            }
            for &p in &plan.visible {
                dprojected.row_mut(enc_row).assign(&dfull.row(s * p_total + p));
                enc_row += 1;
            }
            for &p in &plan.masked {
                for j in 0..d {
                    dmask[j] += dfull[[s * p_total + p, j]];
                }
            }
        }
        store.accum_grad(self.pos, dpos.as_slice().expect("contiguous"));
        store.accum_grad(self.mask_token, &dmask);
        self.proj.backward(store, &cache.enc_out, &dprojected)
    }
}

/// One full MAE forward pass over a batch; accumulates gradients when
/// `with_grads`. Returns the mean per-sample loss.
pub fn mae_batch_pass(
    store: &mut ParamStore,
    encoder: &VitEncoder,
    decoder: &MaeDecoder,
    volumes: &[&Volume],
    plans: &[MaskPlan],
    with_grads: bool,
) -> Result<f64> {
    let batch = volumes.len();
    let p_total = encoder.token_count();
    let token_dim = encoder.cfg.token_dim(encoder.channels);
    let t_vis = plans[0].visible.len();

    let mut targets = Vec::with_capacity(batch);
    let mut packed = Array2::zeros((batch * t_vis, token_dim));
    let mut positions = Vec::with_capacity(batch * t_vis);
    for (s, (v, plan)) in volumes.iter().zip(plans).enumerate() {
        debug_assert_eq!(plan.visible.len(), t_vis);
        let grid = patchify(v, &encoder.cfg)?;
        for (r, &p) in plan.visible.iter().enumerate() {
            packed.row_mut(s * t_vis + r).assign(&grid.tokens.row(p));
            positions.push(p);
        }
        targets.push(grid.tokens);
    }

    let (enc_out, enc_cache) = encoder.forward_tokens(store, packed, positions, batch, t_vis);
    let (pred, dec_cache) = decoder.forward_batch(store, &enc_out, plans, p_total);

    let mut total = 0.0;
    let mut dpred = Array2::zeros(pred.raw_dim());
    for (s, (target, plan)) in targets.iter().zip(plans).enumerate() {
        let block = pred.slice(ndarray::s![s * p_total..(s + 1) * p_total, ..]).to_owned();
        let (loss, grad) = mae_loss_grad(&block, target, plan);
        total += loss;
        if with_grads {
            let scaled = grad.mapv(|g| g / batch as f64);
            dpred
                .slice_mut(ndarray::s![s * p_total..(s + 1) * p_total, ..])
                .assign(&scaled);
        }
    }
    let mean = total / batch as f64;
    if with_grads {
        let denc = decoder.backward_batch(store, &dec_cache, &dpred);
        encoder.backward_tokens(store, &enc_cache, &denc);
    }
    Ok(mean)
}

/// One classification forward pass over a batch (full token grids, mean
/// pooling, linear head). Returns (mean loss, correct count) and accumulates
/// gradients when `with_grads`.
pub fn classifier_batch_pass(
    store: &mut ParamStore,
    encoder: &VitEncoder,
    head: &Linear,
    samples: &[(&Volume, TerritoryLabel)],
    with_grads: bool,
) -> Result<(f64, usize)> {
    let batch = samples.len();
    let p_total = encoder.token_count();
    let token_dim = encoder.cfg.token_dim(encoder.channels);
    let d = encoder.cfg.embed_dim;

    let mut packed = Array2::zeros((batch * p_total, token_dim));
    let mut positions = Vec::with_capacity(batch * p_total);
    for (s, (v, _)) in samples.iter().enumerate() {
        let grid = patchify(v, &encoder.cfg)?;
        for p in 0..p_total {
            packed.row_mut(s * p_total + p).assign(&grid.tokens.row(p));
            positions.push(p);
        }
    }
    let (enc_out, enc_cache) = encoder.forward_tokens(store, packed, positions, batch, p_total);

    let mut features = Array2::zeros((batch, d));
    for s in 0..batch {
        for p in 0..p_total {
            for j in 0..d {
                features[[s, j]] += enc_out[[s * p_total + p, j]];
            }
        }
    }
    features.mapv_inplace(|v| v / p_total as f64);
    let logits = head.forward(store, &features);

    let mut total = 0.0;
    let mut correct = 0usize;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for (s, (_, label)) in samples.iter().enumerate() {
        let row: Vec<f64> = logits.row(s).to_vec();
        total += cross_entropy(&row, *label);
        if argmax_lowest(&row) == label.index() {
            correct += 1;
        }
        if with_grads {
            let probs = softmax(&row);
            for j in 0..NUM_CLASSES {
                let onehot = if j == label.index() { 1.0 } else { 0.0 };
                dlogits[[s, j]] = (probs[j] - onehot) / batch as f64;
            }
        }
    }
    if with_grads {
        let dfeatures = head.backward(store, &features, &dlogits);
        let mut denc = Array2::zeros(enc_out.raw_dim());
        for s in 0..batch {
            for p in 0..p_total {
                for j in 0..d {
                    denc[[s * p_total + p, j]] = dfeatures[[s, j]] / p_total as f64;
                }
            }
        }
        encoder.backward_tokens(store, &enc_cache, &denc);
    }
    Ok((total / batch as f64, correct))
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Constant learning rate with a linear warmup over the first 5% of steps.
fn lr_at(base: f64, step: usize, total_steps: usize) -> f64 {
    let warmup = ((total_steps as f64 * 0.05).round() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

#[derive(Debug)]
pub struct MaeRun {
    pub store: ParamStore,
    pub encoder: VitEncoder,
    pub decoder: MaeDecoder,
    pub meta: CheckpointMeta,
    /// Mean per-sample reconstruction loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Stage-1 self-supervised pretraining. Deterministic per seed on the
/// single-threaded profile; epochs = 0 (or an empty dataset) returns the
/// seeded initialization untouched.
pub fn pretrain_mae(
    volumes: &[&Volume],
    dims: [usize; 3],
    channels: usize,
    enc_cfg: &EncoderConfig,
    dec_cfg: &DecoderConfig,
    cfg: &TrainConfig,
) -> Result<MaeRun> {
    for v in volumes {
        if v.dims() != dims || v.channels() != channels {
            return Err(Error::VolumeShape {
                context: format!("pretraining volume {:?} not on the {dims:?} grid", v.dims()),
            });
        }
    }
    let mut store = ParamStore::new();
    let mut rng = stream_rng(cfg.seed, "init", 0);
    let encoder = VitEncoder::build(&mut store, &mut rng, enc_cfg, dims, channels)?;
    let p_total = encoder.token_count();
    let decoder = MaeDecoder::build(
        &mut store,
        &mut rng,
        dec_cfg,
        enc_cfg.embed_dim,
        p_total,
        enc_cfg.token_dim(channels),
    );
    let meta = CheckpointMeta {
        stage: "mae".into(),
        encoder: *enc_cfg,
        decoder: Some(*dec_cfg),
        dims,
        channels,
    };

    let n = volumes.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    if n == 0 || cfg.epochs == 0 {
        return Ok(MaeRun {
            store,
            encoder,
            decoder,
            meta,
            epoch_losses,
            epoch_seconds,
        });
    }

    let mut opt = AdamW::new(store.len(), cfg.beta1, cfg.beta2, cfg.eps);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "epoch-order", epoch as u64));
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_volumes: Vec<&Volume> = chunk.iter().map(|&i| volumes[i]).collect();
            let plans: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| {
                    sample_mask(
                        p_total,
                        cfg.q,
                        derive_seed(cfg.seed, "mask", (epoch * n + i) as u64),
                    )
                })
                .collect::<Result<_>>()?;
            store.zero_grads();
            let loss = mae_batch_pass(&mut store, &encoder, &decoder, &batch_volumes, &plans, true)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    step,
                    context: format!("MAE loss became {loss}"),
                });
            }
            opt.step(&mut store, lr_at(cfg.lr, step, total_steps), cfg.weight_decay);
            loss_sum += loss * chunk.len() as f64;
            sample_count += chunk.len();
            step += 1;
        }
        epoch_losses.push(loss_sum / sample_count as f64);
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(MaeRun {
        store,
        encoder,
        decoder,
        meta,
        epoch_losses,
        epoch_seconds,
    })
}

#[derive(Debug)]
pub struct FinetuneRun {
    pub store: ParamStore,
    pub encoder: VitEncoder,
    pub head: Linear,
    pub meta: CheckpointMeta,
    pub epoch_losses: Vec<f64>,
    /// Training accuracy per epoch, measured on the pre-update forward pass.
    pub epoch_accs: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Stage-2 supervised fine-tuning: encoder plus a fresh linear head trained
/// end to end on cross entropy (or head-only when configured). `init` is a
/// stage-1 checkpoint; `None` trains from scratch.
pub fn finetune_classifier(
    samples: &[(&Volume, TerritoryLabel)],
    init: Option<&LoadedCheckpoint>,
    dims: [usize; 3],
    channels: usize,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<FinetuneRun> {
    for (v, _) in samples {
        if v.dims() != dims || v.channels() != channels {
            return Err(Error::VolumeShape {
                context: format!("training volume {:?} not on the {dims:?} grid", v.dims()),
            });
        }
    }
    let mut store = ParamStore::new();
    let mut rng = stream_rng(cfg.seed, "init", 0);
    let encoder = VitEncoder::build(&mut store, &mut rng, enc_cfg, dims, channels)?;
    let head_start = store.len();
    let head = Linear::new(&mut store, &mut rng, "head", enc_cfg.feature_dim(), NUM_CLASSES);
    if let Some(ckpt) = init {
        if ckpt.meta.encoder != *enc_cfg || ckpt.meta.dims != dims || ckpt.meta.channels != channels
        {
            return Err(Error::Config(format!(
                "checkpoint {} was built for a different architecture",
                ckpt.path.display()
            )));
        }
        ckpt.apply(&mut store, "encoder.")?;
    }
    let meta = CheckpointMeta {
        stage: "finetune".into(),
        encoder: *enc_cfg,
        decoder: None,
        dims,
        channels,
    };

    let n = samples.len();
    let mut epoch_losses = Vec::new();
    let mut epoch_accs = Vec::new();
    let mut epoch_seconds = Vec::new();
    if n == 0 || cfg.epochs == 0 {
        return Ok(FinetuneRun {
            store,
            encoder,
            head,
            meta,
            epoch_losses,
            epoch_accs,
            epoch_seconds,
        });
    }

    let mut opt = AdamW::new(store.len(), cfg.beta1, cfg.beta2, cfg.eps);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "epoch-order", epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Volume, TerritoryLabel)> =
                chunk.iter().map(|&i| samples[i]).collect();
            store.zero_grads();
            let (loss, c) = classifier_batch_pass(&mut store, &encoder, &head, &batch, true)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    step,
                    context: format!("cross-entropy loss became {loss}"),
                });
            }
            let lr = lr_at(cfg.lr, step, total_steps);
            if cfg.head_only {
                let end = store.len();
                opt.step_range(&mut store, lr, cfg.weight_decay, head_start..end);
            } else {
                opt.step(&mut store, lr, cfg.weight_decay);
            }
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            step += 1;
        }
        epoch_losses.push(loss_sum / n as f64);
        epoch_accs.push(correct as f64 / n as f64);
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(FinetuneRun {
        store,
        encoder,
        head,
        meta,
        epoch_losses,
        epoch_accs,
        epoch_seconds,
    })
}

/// A fine-tuned model loaded for inference.
#[derive(Debug)]
pub struct ClassifierModel {
    pub store: ParamStore,
    pub encoder: VitEncoder,
    pub head: Linear,
    pub meta: CheckpointMeta,
}

impl ClassifierModel {
    /// Rebuilds the architecture from checkpoint metadata and overwrites all
    /// tensors from the file.
    pub fn from_checkpoint(ckpt: &LoadedCheckpoint) -> Result<ClassifierModel> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, "init", 0);
        let encoder = VitEncoder::build(
            &mut store,
            &mut rng,
            &ckpt.meta.encoder,
            ckpt.meta.dims,
            ckpt.meta.channels,
        )?;
        let head = Linear::new(
            &mut store,
            &mut rng,
            "head",
            ckpt.meta.encoder.feature_dim(),
            NUM_CLASSES,
        );
        ckpt.apply(&mut store, "")?;
        Ok(ClassifierModel {
            store,
            encoder,
            head,
            meta: ckpt.meta.clone(),
        })
    }

    pub fn feature(&self, v: &Volume) -> Result<FeatureVector> {
        self.encoder.encode(&self.store, v)
    }

    /// Argmax prediction over the four class logits; ties resolve to the
    /// lowest class index.
    pub fn predict(&self, v: &Volume) -> Result<(TerritoryLabel, [f64; NUM_CLASSES])> {
        let feature = self.feature(v)?;
        Ok(predict_from_feature(&self.store, &self.head, &feature))
    }
}

pub fn predict_from_feature(
    store: &ParamStore,
    head: &Linear,
    feature: &FeatureVector,
) -> (TerritoryLabel, [f64; NUM_CLASSES]) {
    let x = Array2::from_shape_vec((1, feature.dim()), feature.0.clone()).expect("row vector");
    let logits_row = head.forward(store, &x);
    let mut logits = [0.0; NUM_CLASSES];
    for j in 0..NUM_CLASSES {
        logits[j] = logits_row[[0, j]];
    }
    let label = TerritoryLabel::from_index(argmax_lowest(&logits)).expect("4 classes");
    (label, logits)
}
