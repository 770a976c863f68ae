//! Feature shuffling `M(Z) = P_R·Z·P_C⁻¹`, its inverse, CutMix mixing, the
//! edge training loop, and model (de)authorisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edgemodel::{
    argmax, embed_backward, head_backward, head_forward, one_hot, patch_embed, soft_cross_entropy,
    EdgeGeometry, EdgeWeights, Image, Sample,
};
use crate::encoder::{conjugate_stack, init_blocks, BlockConfig, EncoderBlockWeights, TebVariant};
use crate::error::{Error, Result};
use crate::permutation::{Permutation, ShuffleKey};
use crate::proto::{Hello, RemoteCloud, Transport};
use crate::rngs;
use crate::tensor::{Activation, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    #[default]
    Vanilla,
    RowShuffle,
    RowColumnShuffle,
}

impl ShuffleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShuffleMode::Vanilla => "vanilla",
            ShuffleMode::RowShuffle => "row_shuffle",
            ShuffleMode::RowColumnShuffle => "row_column_shuffle",
        }
    }
}

/// `P_R·Z·P_C⁻¹`.
pub fn shuffle_feature(z: &Matrix, p_r: &Permutation, key: &ShuffleKey) -> Result<Matrix> {
    p_r.apply_rows(&key.p_col().apply_cols_inv(z)?)
}

/// `P_R⁻¹·Y·P_C`, the exact inverse of [`shuffle_feature`].
pub fn unshuffle_output(y: &Matrix, p_r: &Permutation, key: &ShuffleKey) -> Result<Matrix> {
    p_r.inverse().apply_rows(&key.p_col().apply_cols(y)?)
}

/// The upstream gradient `∂l/∂A₂` goes to the cloud shuffled like a feature.
pub fn shuffle_gradient(g: &Matrix, p_r: &Permutation, key: &ShuffleKey) -> Result<Matrix> {
    shuffle_feature(g, p_r, key)
}

/// The input gradient returned by the cloud is unshuffled like an output.
pub fn unshuffle_gradient(g: &Matrix, p_r: &Permutation, key: &ShuffleKey) -> Result<Matrix> {
    unshuffle_output(g, p_r, key)
}

/// Cut region, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSample {
    pub image: Image,
    pub soft_label: Vec<f64>,
    /// Fraction of the image still coming from the original sample.
    pub lambda: f64,
    pub rect: Option<Rect>,
    pub partner: Option<usize>,
    /// Label of the original sample, used for accuracy bookkeeping.
    pub label: usize,
}

impl MixedSample {
    pub fn unmixed(sample: &Sample, n_classes: usize) -> Self {
        Self {
            image: sample.image.clone(),
            soft_label: one_hot(sample.label, n_classes),
            lambda: 1.0,
            rect: None,
            partner: None,
            label: sample.label,
        }
    }
}

/// Pastes `rect` of `b` over `a` and mixes labels by area:
/// `ỹ = (1 − area/WH)·y_A + (area/WH)·y_B`.
pub fn cut_and_paste(a: &Sample, b: &Sample, rect: Rect, n_classes: usize) -> Result<MixedSample> {
    let (ia, ib) = (&a.image, &b.image);
    if (ia.channels, ia.height, ia.width) != (ib.channels, ib.height, ib.width) {
        return Err(Error::shape("cutmix", (ia.height, ia.width), (ib.height, ib.width)));
    }
    if rect.x + rect.w > ia.width || rect.y + rect.h > ia.height {
        return Err(Error::Domain(format!("cut region {rect:?} leaves the image")));
    }
    if a.label >= n_classes || b.label >= n_classes {
        return Err(Error::Domain("label out of range".into()));
    }
    let mut image = ia.clone();
    for c in 0..ia.channels {
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                image.set(c, y, x, ib.get(c, y, x));
            }
        }
    }
    let frac_b = rect.area() as f64 / (ia.width * ia.height) as f64;
    let lambda = 1.0 - frac_b;
    let mut soft_label = vec![0.0; n_classes];
    soft_label[a.label] += lambda;
    soft_label[b.label] += frac_b;
    Ok(MixedSample {
        image,
        soft_label,
        lambda,
        rect: Some(rect),
        partner: None,
        label: a.label,
    })
}

/// With probability `prob` per sample, pairs it with another batch member and
/// pastes a square of random side and position from the partner.
pub fn cutmix(batch: &[Sample], prob: f64, n_classes: usize, rng: &mut impl Rng) -> Result<Vec<MixedSample>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::config("mixup_prob", format!("{prob} is outside [0, 1]")));
    }
    if prob > 0.0 && batch.len() < 2 {
        return Err(Error::config("batch_size", "CutMix needs at least two samples per batch"));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, a) in batch.iter().enumerate() {
        let draw: f64 = rng.random();
        if prob == 0.0 || draw >= prob {
            out.push(MixedSample::unmixed(a, n_classes));
            continue;
        }
        let r = rng.random_range(0..batch.len() - 1);
        let j = if r >= i { r + 1 } else { r };
        let (h, w) = (a.image.height, a.image.width);
        let side = rng.random_range(0..=h.min(w));
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        let mut mixed = cut_and_paste(a, &batch[j], Rect { x, y, w: side, h: side }, n_classes)?;
        mixed.partner = Some(j);
        out.push(mixed);
    }
    Ok(out)
}

/// Everything the training loop needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ShuffleMode,
    pub mixup_prob: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub geometry: EdgeGeometry,
    pub n_layers: usize,
    pub n_heads: usize,
    pub teb_variant: TebVariant,
    pub activation: Activation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.mode == ShuffleMode::RowColumnShuffle && self.n_heads != 1 {
            return Err(Error::config("n_heads", "row_column_shuffle requires n_heads = 1"));
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return Err(Error::config("mixup_prob", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        self.block_config().validate(self.geometry.d)
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            variant: self.teb_variant,
            activation: self.activation,
            n_heads: self.n_heads,
            ln_eps: 1e-5,
            column_shuffle: self.mode == ShuffleMode::RowColumnShuffle,
        }
    }

    pub fn hello(&self) -> Hello {
        Hello {
            p: self.geometry.p() as u32,
            d: self.geometry.d as u32,
            n_layers: self.n_layers as u32,
            n_heads: self.n_heads as u32,
        }
    }

    /// The key actually used in this mode: none for vanilla, identity columns
    /// for row shuffle.
    pub fn effective_key(&self, key: &ShuffleKey) -> Option<ShuffleKey> {
        match self.mode {
            ShuffleMode::Vanilla => None,
            ShuffleMode::RowShuffle => Some(
                ShuffleKey::row_only(key.p(), key.d(), key.row_seed()).expect("dims already validated"),
            ),
            ShuffleMode::RowColumnShuffle => Some(key.clone()),
        }
    }
}

/// Initial edge weights and plain (unconjugated) cloud weights, each from its
/// own named stream of `cfg.seed`.
pub fn initial_models(cfg: &TrainConfig) -> Result<(EdgeWeights, Vec<EncoderBlockWeights>)> {
    cfg.validate()?;
    let edge = EdgeWeights::init(&cfg.geometry, &mut rngs::substream(cfg.seed, "edge-weights"))?;
    let cloud = init_blocks(
        cfg.n_layers,
        cfg.geometry.d,
        cfg.teb_variant,
        &mut rngs::substream(cfg.seed, "cloud-weights"),
    )?;
    Ok((edge, cloud))
}

/// Cloud weights as handed to the cloud in `cfg.mode`: conjugated by the key's
/// column permutation for row-column shuffling, plain otherwise.
pub fn cloud_weights_for_mode(
    cfg: &TrainConfig,
    plain: &[EncoderBlockWeights],
    key: &ShuffleKey,
) -> Result<Vec<EncoderBlockWeights>> {
    match cfg.mode {
        ShuffleMode::RowColumnShuffle => conjugate_stack(plain, &cfg.block_config(), key.p_col()),
        _ => Ok(plain.to_vec()),
    }
}

/// Re-keys a cloud stack with a new column permutation.
pub fn authorize(cloud: &[EncoderBlockWeights], cfg: &BlockConfig, p_new: &Permutation) -> Result<Vec<EncoderBlockWeights>> {
    conjugate_stack(cloud, cfg, p_new)
}

/// Strips the key's column permutation from a conjugated stack.
pub fn deauthorize(cloud: &[EncoderBlockWeights], cfg: &BlockConfig, key: &ShuffleKey) -> Result<Vec<EncoderBlockWeights>> {
    conjugate_stack(cloud, cfg, &key.p_col().inverse())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mode: ShuffleMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: Vec<StepMetrics>,
}

impl EpochMetrics {
    /// One JSON object per step, newline terminated.
    pub fn to_json_lines(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("metrics serialise") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
}

/// Epoch tag used for row permutations during evaluation.
pub const EVAL_EPOCH: u64 = u64::MAX;

/// Drives split training from the edge. The cloud is reached only through the
/// transport; the key never leaves this struct.
pub struct EdgeTrainer<T> {
    cfg: TrainConfig,
    edge: EdgeWeights,
    key: Option<ShuffleKey>,
    cloud: RemoteCloud<T>,
    epoch: usize,
    step: usize,
    partial: Option<EpochMetrics>,
}

impl<T: Transport> EdgeTrainer<T> {
    /// Validates the configuration and performs the HELLO handshake.
    pub fn connect(cfg: TrainConfig, edge: EdgeWeights, key: &ShuffleKey, transport: T) -> Result<Self> {
        cfg.validate()?;
        if key.d() != cfg.geometry.d || key.p() != cfg.geometry.p() {
            return Err(Error::config("key", "key dimensions do not match the model"));
        }
        let mut cloud = RemoteCloud::new(transport);
        cloud.handshake(cfg.hello())?;
        Ok(Self {
            key: cfg.effective_key(key),
            cfg,
            edge,
            cloud,
            epoch: 0,
            step: 0,
            partial: None,
        })
    }

    pub fn edge(&self) -> &EdgeWeights {
        &self.edge
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn transport(&self) -> &T {
        self.cloud.transport()
    }

    pub fn into_parts(self) -> (EdgeWeights, T) {
        (self.edge, self.cloud.into_transport())
    }

    /// Metrics gathered before the last failed epoch gave up.
    pub fn partial_metrics(&self) -> Option<&EpochMetrics> {
        self.partial.as_ref()
    }

    pub fn shutdown(&mut self) -> Result<()> {
        self.cloud.shutdown()
    }

    fn wrap(&self, e: Error) -> Error {
        match e {
            Error::RemoteShutdown { .. } => Error::RemoteShutdown { step: self.step },
            other => Error::Transport {
                step: self.step,
                source: Box::new(other),
            },
        }
    }

    /// One pass over `data`, in an order drawn from the data stream.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rngs::keyed(self.cfg.seed, "data-order", epoch as u64, 0));
        }
        let mut metrics = EpochMetrics {
            epoch,
            ..Default::default()
        };
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut position = 0u64;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut mix_rng = rngs::keyed(self.cfg.seed, "mixup", epoch as u64, b as u64);
            let n_classes = self.cfg.geometry.n_classes;
            // A trailing singleton batch has no partner to mix with.
            let mixed = if self.cfg.mixup_prob > 0.0 && batch.len() >= 2 {
                cutmix(&batch, self.cfg.mixup_prob, n_classes, &mut mix_rng)?
            } else {
                batch.iter().map(|s| MixedSample::unmixed(s, n_classes)).collect()
            };
            match self.train_batch(&mixed, epoch as u64, &mut position) {
                Ok((batch_loss, batch_correct)) => {
                    loss_sum += batch_loss * mixed.len() as f64;
                    correct += batch_correct;
                    metrics.steps.push(StepMetrics {
                        epoch,
                        step: self.step,
                        loss: batch_loss,
                        accuracy: batch_correct as f64 / mixed.len() as f64,
                        mode: self.cfg.mode,
                    });
                    self.step += 1;
                }
                Err(e) => {
                    let seen = metrics.steps.len() * self.cfg.batch_size;
                    metrics.mean_loss = loss_sum / seen.max(1) as f64;
                    metrics.accuracy = correct as f64 / seen.max(1) as f64;
                    self.partial = Some(metrics);
                    return Err(self.wrap(e));
                }
            }
        }
        metrics.mean_loss = loss_sum / data.len().max(1) as f64;
        metrics.accuracy = correct as f64 / data.len().max(1) as f64;
        self.epoch += 1;
        self.partial = None;
        Ok(metrics)
    }

    fn train_batch(&mut self, batch: &[MixedSample], epoch: u64, position: &mut u64) -> Result<(f64, usize)> {
        let scale = 1.0 / batch.len() as f64;
        let mut edge_grads = self.edge.zeros_like();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for sample in batch {
            let emb = patch_embed(&self.edge, &self.cfg.geometry, &sample.image)?;
            let p_r = self.key.as_ref().map(|k| k.row_perm(epoch, *position));
            *position += 1;

            let sent = match (&self.key, &p_r) {
                (Some(k), Some(p)) => shuffle_feature(&emb.z, p, k)?,
                _ => emb.z.clone(),
            };
            let received = self.cloud.forward(&sent)?;
            let a_final = match (&self.key, &p_r) {
                (Some(k), Some(p)) => unshuffle_output(&received, p, k)?,
                _ => received,
            };
            let logits = head_forward(&self.edge, &a_final)?;
            let (loss, mut d_logits) = soft_cross_entropy(&logits, &sample.soft_label)?;
            loss_sum += loss;
            if argmax(&logits) == sample.label {
                correct += 1;
            }
            d_logits.iter_mut().for_each(|g| *g *= scale);
            let d_a = head_backward(&self.edge, &a_final, &d_logits, &mut edge_grads)?;

            let g_sent = match (&self.key, &p_r) {
                (Some(k), Some(p)) => shuffle_gradient(&d_a, p, k)?,
                _ => d_a,
            };
            let dz_received = self.cloud.backward(&g_sent)?;
            let d_z = match (&self.key, &p_r) {
                (Some(k), Some(p)) => unshuffle_gradient(&dz_received, p, k)?,
                _ => dz_received,
            };
            embed_backward(&emb, &d_z, &mut edge_grads)?;
        }
        self.cloud.step()?;
        self.edge.sgd_step(&edge_grads, self.cfg.lr)?;
        Ok((loss_sum * scale, correct))
    }

    /// Forward-only pass through the split model, shuffled per the mode.
    pub fn evaluate(&mut self, data: &[Sample]) -> Result<EvalReport> {
        let mut report = EvalReport {
            accuracy: 0.0,
            predictions: Vec::with_capacity(data.len()),
            logits: Vec::with_capacity(data.len()),
        };
        let mut correct = 0;
        for (i, sample) in data.iter().enumerate() {
            let logits = self.infer(&sample.image, i as u64)?;
            let pred = argmax(&logits);
            correct += usize::from(pred == sample.label);
            report.predictions.push(pred);
            report.logits.push(logits);
        }
        report.accuracy = correct as f64 / data.len().max(1) as f64;
        Ok(report)
    }

    /// Logits for one image; `index` selects the evaluation row permutation.
    pub fn infer(&mut self, image: &Image, index: u64) -> Result<Vec<f64>> {
        let emb = patch_embed(&self.edge, &self.cfg.geometry, image)?;
        let a_final = match &self.key {
            Some(k) => {
                let p_r = k.row_perm(EVAL_EPOCH, index);
                let y = self.cloud.forward(&shuffle_feature(&emb.z, &p_r, k)?).map_err(|e| self.wrap(e))?;
                unshuffle_output(&y, &p_r, k)?
            }
            None => self.cloud.forward(&emb.z).map_err(|e| self.wrap(e))?,
        };
        head_forward(&self.edge, &a_final)
    }
}

/// Result of an in-process training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub edge: EdgeWeights,
    /// Cloud weights as held by the cloud (conjugated in row-column mode).
    pub cloud: Vec<EncoderBlockWeights>,
}

impl TrainOutcome {
    pub fn step_losses(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.steps.iter().map(|s| s.loss)).collect()
    }
}

/// Trains from `initial_models(cfg)` over a loopback transport.
pub fn train_loopback(cfg: &TrainConfig, key: &ShuffleKey, data: &[Sample]) -> Result<TrainOutcome> {
    let (edge, plain) = initial_models(cfg)?;
    let cloud = cloud_weights_for_mode(cfg, &plain, key)?;
    let server = crate::proto::CloudServer::new(cloud, cfg.block_config(), cfg.lr)?;
    let mut trainer = EdgeTrainer::connect(cfg.clone(), edge, key, crate::proto::LoopbackTransport::new(server))?;
    let epochs = (0..cfg.epochs)
        .map(|_| trainer.train_epoch(data))
        .collect::<Result<Vec<_>>>()?;
    let (edge, transport) = trainer.into_parts();
    Ok(TrainOutcome {
        epochs,
        edge,
        cloud: transport.into_server().into_blocks(),
    })
}

/// Evaluates without a transport. With a key, features are shuffled with the
/// evaluation row permutations and outputs unshuffled; without one the plain
/// feature goes straight into `cloud`.
pub fn evaluate_local(
    edge: &EdgeWeights,
    cloud: &[EncoderBlockWeights],
    cfg: &TrainConfig,
    key: Option<&ShuffleKey>,
    data: &[Sample],
) -> Result<EvalReport> {
    let bc = cfg.block_config();
    let mut report = EvalReport {
        accuracy: 0.0,
        predictions: Vec::with_capacity(data.len()),
        logits: Vec::with_capacity(data.len()),
    };
    let mut correct = 0;
    for (i, s) in data.iter().enumerate() {
        let z = patch_embed(edge, &cfg.geometry, &s.image)?.z;
        let a = match key {
            Some(k) => {
                let p_r = k.row_perm(EVAL_EPOCH, i as u64);
                let (y, _) = crate::encoder::stack_forward(cloud, &bc, &shuffle_feature(&z, &p_r, k)?)?;
                unshuffle_output(&y, &p_r, k)?
            }
            None => crate::encoder::stack_forward(cloud, &bc, &z)?.0,
        };
        let logits = head_forward(edge, &a)?;
        let pred = argmax(&logits);
        correct += usize::from(pred == s.label);
        report.predictions.push(pred);
        report.logits.push(logits);
    }
    report.accuracy = correct as f64 / data.len().max(1) as f64;
    Ok(report)
}

/// Monolithic in-process inference (no split, no shuffling).
pub fn infer_local(
    edge: &EdgeWeights,
    cloud: &[EncoderBlockWeights],
    cfg: &TrainConfig,
    image: &Image,
) -> Result<Vec<f64>> {
    let emb = patch_embed(edge, &cfg.geometry, image)?;
    let (y, _) = crate::encoder::stack_forward(cloud, &cfg.block_config(), &emb.z)?;
    head_forward(edge, &y)
}
