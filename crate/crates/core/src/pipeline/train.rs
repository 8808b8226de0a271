use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProbeConfig, SemisupConfig};
use crate::data::{AugmentConfig, BiasedDataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, stage1_loss, weighted_cross_entropy, UpweightSpec};
use crate::nn::{
    adam_step, argmax_rows, cosine_lr, sgd_momentum_step, Activation, AdamConfig, Dense,
    DenseGrads, DenseNet, LinearHead, OptimState, ScheduleConfig,
};
use crate::rng::{self, Rng};
use crate::spectral::{mean_effective_rank, rank_loss_with_grad, RANK_BATCH};

/// Features with a smaller spread than this are left unscaled by the probe.
const STD_FLOOR: f64 = 1e-12;

/// Rows used to monitor the training-set effective rank after each epoch.
const MONITOR_ROWS: usize = 1024;

/// Encoder plus linear classifier on its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: DenseNet,
    pub head: LinearHead,
}

impl Model {
    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder.predict(x)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.head.logits(self.features(x)?.view())?;
        Ok(argmax_rows(logits.view()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Effective rank of encoder outputs on the monitor rows after the epoch.
    pub eff_rank: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,eff_rank,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.epoch, r.loss, r.eff_rank, r.lr
            ));
        }
        out
    }
}

/// Output of contrastive pretraining. The projection head is kept only so
/// callers can inspect it; downstream stages use `encoder` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub encoder: DenseNet,
    pub projection: DenseNet,
    pub log: TrainLog,
}

/// Indices into `D_l` misclassified by the biased probe, with the probe's
/// predictions for every labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub indices: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl ErrorSet {
    pub fn from_predictions(predictions: Vec<usize>, labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(
                "error-set predictions",
                labels.len(),
                predictions.len(),
            ));
        }
        let indices = (0..labels.len())
            .filter(|&k| predictions[k] != labels[k])
            .collect();
        Ok(Self {
            indices,
            predictions,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            indices: Vec::new(),
            predictions: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks that the set indexes into a labeled set of size `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&k| k >= n) {
            return Err(Error::invalid(format!(
                "error-set index {bad} outside labeled set of {n}"
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "error-set indices must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// Shuffled mini-batches covering `0..n`; a trailing batch smaller than
/// `min_rows` is folded into the previous one.
fn batches(n: usize, size: usize, min_rows: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_rows) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn batch_count(n: usize, size: usize, min_rows: usize) -> usize {
    let full = n.div_ceil(size.max(1));
    if full > 1 && !n.is_multiple_of(size) && n % size < min_rows {
        full - 1
    } else {
        full
    }
}

/// Adam over several networks with one optimizer state each.
struct AdamGroup {
    states: Vec<OptimState>,
}

impl AdamGroup {
    fn new(nets: &[&DenseNet]) -> Self {
        Self {
            states: nets
                .iter()
                .map(|n| OptimState::adam(&n.param_lens()))
                .collect(),
        }
    }

    fn step(
        &mut self,
        nets: &mut [&mut DenseNet],
        grads: &[&DenseGrads],
        lr: f64,
        l2: f64,
    ) -> Result<()> {
        for ((net, g), state) in nets.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(
                &mut net.param_slices_mut(),
                &g.slices(),
                state,
                lr,
                l2,
                AdamConfig::default(),
            )?;
        }
        Ok(())
    }
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, step, loss })
    }
}

/// A loss that overflows on finite activations counts as divergence too.
fn diverged_if_nonfinite(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Rejects a forward pass that overflowed before the loss could turn NaN.
fn check_output(out: &Array2<f64>, epoch: usize, step: usize) -> Result<()> {
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        })
    }
}

fn schedule(cfg: &ExperimentConfig, steps_per_epoch: usize) -> Result<ScheduleConfig> {
    ScheduleConfig::new(
        cfg.base_lr,
        (cfg.warmup_epochs * steps_per_epoch) as u64,
        (cfg.epochs * steps_per_epoch) as u64,
    )
}

fn monitor_rank(encoder: &DenseNet, x: ArrayView2<'_, f64>) -> Result<f64> {
    let rows = x.nrows().min(MONITOR_ROWS);
    let z = encoder.predict(x.slice(ndarray::s![..rows, ..]))?;
    mean_effective_rank(z.view(), RANK_BATCH)
}

/// Supervised training of encoder and head on `ce + lambda_reg * rank_loss`
/// with the rank term on the encoder output.
pub fn erm_train(
    dl: &BiasedDataset,
    cfg: &ExperimentConfig,
    lambda_reg: f64,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_reg {lambda_reg} must be >= 0"
        )));
    }
    if dl.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 labeled samples, got {}",
            dl.len()
        )));
    }
    let x = dl.inputs();
    let labels = dl.targets();
    let mut init = rng::stream(seed, "init");
    let mut encoder = DenseNet::new(
        &cfg.encoder_dims(dl.input_dim()),
        Activation::Relu,
        &mut init,
    )?;
    let mut head = LinearHead::new(cfg.latent_dim, dl.num_classes(), &mut init)?;
    let steps_per_epoch = batch_count(dl.len(), cfg.batch_size, 2);
    let sched = schedule(cfg, steps_per_epoch)?;
    let mut opt = AdamGroup::new(&[&encoder, head.net()]);
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = rng::substream(seed, "batch", epoch as u64);
        let mut total = 0.0;
        let mut lr = 0.0;
        let plan = batches(dl.len(), cfg.batch_size, 2, &mut order);
        for (k, idx) in plan.iter().enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let enc = encoder.forward(xb.view())?;
            let hc = head.net().forward(enc.output().view())?;
            check_output(hc.output(), epoch, k)?;
            let ce = cross_entropy(hc.output().view(), &yb)?;
            let (head_grads, mut dfeat) = head.net().backward(&hc, ce.grad.view())?;
            let mut loss = ce.loss;
            if lambda_reg > 0.0 {
                let (rank, g) = rank_loss_with_grad(enc.output().view())
                    .map_err(|e| diverged_if_nonfinite(e, epoch, k))?;
                loss += lambda_reg * rank;
                dfeat.scaled_add(lambda_reg, &g);
            }
            check_loss(loss, epoch, k)?;
            let (enc_grads, _) = encoder.backward(&enc, dfeat.view())?;
            lr = cosine_lr(&sched, (step + 1).min(sched.total_steps))?;
            opt.step(
                &mut [&mut encoder, head.net_mut()],
                &[&enc_grads, &head_grads],
                lr,
                cfg.l2,
            )?;
            step += 1;
            total += loss;
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / plan.len() as f64,
            eff_rank: monitor_rank(&encoder, x)?,
            lr,
        });
    }
    Ok((Model { encoder, head }, log))
}

/// Contrastive pretraining on inputs only.
fn pretrain(
    inputs: ArrayView2<'_, f64>,
    augment: &AugmentConfig,
    cfg: &ExperimentConfig,
    lambda_reg: f64,
    seed: u64,
) -> Result<Pretrained> {
    let mut log = TrainLog::default();
    let (encoder, projection) =
        pretrain_with_log(inputs, augment, cfg, lambda_reg, seed, &mut log)?;
    Ok(Pretrained {
        encoder,
        projection,
        log,
    })
}

/// Contrastive pretraining with `lambda_reg` times the rank loss, appending
/// one record per finished epoch to `log`. On divergence `log` keeps the
/// epochs completed so far. Returns `(encoder, projection)`.
pub fn pretrain_with_log(
    inputs: ArrayView2<'_, f64>,
    augment: &AugmentConfig,
    cfg: &ExperimentConfig,
    lambda_reg: f64,
    seed: u64,
    log: &mut TrainLog,
) -> Result<(DenseNet, DenseNet)> {
    cfg.validate()?;
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_reg {lambda_reg} must be >= 0"
        )));
    }
    let n = inputs.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples to pretrain, got {n}"
        )));
    }
    let mut init = rng::stream(seed, "init");
    let mut encoder = DenseNet::new(
        &cfg.encoder_dims(inputs.ncols()),
        Activation::Relu,
        &mut init,
    )?;
    let mut projection = DenseNet::new(&cfg.projection_dims(), Activation::Identity, &mut init)?;
    let plan_len = batch_count(n, cfg.batch_size, 2);
    let sched = schedule(cfg, plan_len)?;
    let mut opt = AdamGroup::new(&[&encoder, &projection]);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = rng::substream(seed, "batch", epoch as u64);
        let mut aug_rng = rng::substream(seed, "augment", epoch as u64);
        let plan = batches(n, cfg.batch_size, 2, &mut order);
        let mut total = 0.0;
        let mut lr = 0.0;
        for (k, idx) in plan.iter().enumerate() {
            let xb = inputs.select(Axis(0), idx);
            let (v1, v2) = crate::data::augment_views(xb.view(), augment, &mut aug_rng)?;
            let views = concatenate(Axis(0), &[v1.view(), v2.view()]).expect("equal widths");
            let enc = encoder.forward(views.view())?;
            let pc = projection.forward(enc.output().view())?;
            check_output(pc.output(), epoch, k)?;
            let s1 = stage1_loss(
                enc.output().view(),
                pc.output().view(),
                cfg.temperature,
                lambda_reg,
            )
            .map_err(|e| diverged_if_nonfinite(e, epoch, k))?;
            check_loss(s1.loss, epoch, k)?;
            let (proj_grads, mut dfeat) = projection.backward(&pc, s1.grad_proj.view())?;
            if let Some(g) = &s1.grad_encoder {
                dfeat += g;
            }
            let (enc_grads, _) = encoder.backward(&enc, dfeat.view())?;
            lr = cosine_lr(&sched, (step + 1).min(sched.total_steps))?;
            opt.step(
                &mut [&mut encoder, &mut projection],
                &[&enc_grads, &proj_grads],
                lr,
                cfg.l2,
            )?;
            step += 1;
            total += s1.loss;
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / plan.len() as f64,
            eff_rank: monitor_rank(&encoder, inputs)?,
            lr,
        });
    }
    Ok((encoder, projection))
}

/// Biased encoder: contrastive loss plus `cfg.lambda_reg` times the rank loss.
/// Reads inputs only; labels never enter.
pub fn pretrain_biased(
    inputs: ArrayView2<'_, f64>,
    augment: &AugmentConfig,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Pretrained> {
    pretrain(inputs, augment, cfg, cfg.lambda_reg, seed)
}

/// Main encoder: contrastive loss only.
pub fn pretrain_main(
    inputs: ArrayView2<'_, f64>,
    augment: &AugmentConfig,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Pretrained> {
    pretrain(inputs, augment, cfg, 0.0, seed)
}

/// Trains a linear classifier on fixed features with per-sample weights.
/// Features are standardized with their own mean and spread during training.
pub fn fit_linear_head(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
    classes: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<LinearHead> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::invalid(
            "cannot fit a linear head on an empty labeled set",
        ));
    }
    if labels.len() != n || weights.len() != n {
        return Err(Error::shape(
            "probe labels/weights",
            n,
            labels.len().max(weights.len()),
        ));
    }
    // Train on standardized features, then fold the affine standardization
    // back into the head so it applies to raw features.
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let std = features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > STD_FLOOR { s } else { 1.0 });
    let features = &(&features - &mean) / &std;
    let features = features.view();
    let mut init = rng::stream(seed, "probe-init");
    let mut head = LinearHead::new(features.ncols(), classes, &mut init)?;
    let mut state = OptimState::adam(&head.net().param_lens());
    let mut epoch = 0u64;
    let mut plan: Vec<Vec<usize>> = Vec::new();
    for it in 0..probe.iterations {
        if plan.is_empty() {
            let mut order = rng::substream(seed, "probe-batch", epoch);
            plan = batches(n, probe.batch_size, 1, &mut order);
            plan.reverse();
            epoch += 1;
        }
        let idx = plan.pop().expect("refilled");
        let fb = features.select(Axis(0), &idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let wb: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let cache = head.net().forward(fb.view())?;
        let lg = weighted_cross_entropy(cache.output().view(), &yb, &wb)?;
        check_loss(lg.loss, epoch as usize, it)?;
        let (grads, _) = head.net().backward(&cache, lg.grad.view())?;
        adam_step(
            &mut head.net_mut().param_slices_mut(),
            &grads.slices(),
            &mut state,
            probe.lr,
            probe.l2,
            AdamConfig::default(),
        )?;
    }
    let weight = head.weight() / &std.view().insert_axis(Axis(1));
    let bias = head.bias() - &mean.dot(&weight);
    LinearHead::from_net(DenseNet::from_layers(
        vec![Dense { weight, bias }],
        Activation::Identity,
    )?)
}

/// Trains `W_b` on the frozen biased encoder and collects the samples of
/// `D_l` it misclassifies.
pub fn identify_error_set(
    biased_encoder: &DenseNet,
    dl: &BiasedDataset,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ErrorSet> {
    if dl.is_empty() {
        return Err(Error::invalid("labeled set is empty"));
    }
    let feats = biased_encoder.predict(dl.inputs())?;
    let ones = vec![1.0; dl.len()];
    let head = fit_linear_head(
        feats.view(),
        dl.targets(),
        &ones,
        dl.num_classes(),
        probe,
        seed,
    )?;
    let preds = argmax_rows(head.logits(feats.view())?.view());
    ErrorSet::from_predictions(preds, dl.targets())
}

/// Trains `W_m` on the frozen main encoder with the error set upweighted by
/// `lambda_up`. The encoder is copied, never modified.
pub fn debiased_linear_eval(
    main_encoder: &DenseNet,
    dl: &BiasedDataset,
    error_set: &ErrorSet,
    lambda_up: f64,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<Model> {
    error_set.validate(dl.len())?;
    let spec = UpweightSpec::new(error_set.indices.iter().copied(), lambda_up)?;
    let weights = spec.weights(dl.len())?;
    let feats = main_encoder.predict(dl.inputs())?;
    let head = fit_linear_head(
        feats.view(),
        dl.targets(),
        &weights,
        dl.num_classes(),
        probe,
        seed,
    )?;
    Ok(Model {
        encoder: main_encoder.clone(),
        head,
    })
}

/// Finetunes encoder and head together on the upweighted loss with
/// heavy-ball SGD.
pub fn finetune_semisup(
    model: &Model,
    dl: &BiasedDataset,
    error_set: &ErrorSet,
    lambda_up: f64,
    cfg: &SemisupConfig,
    seed: u64,
) -> Result<Model> {
    if dl.is_empty() {
        return Err(Error::invalid("labeled set is empty"));
    }
    error_set.validate(dl.len())?;
    let weights =
        UpweightSpec::new(error_set.indices.iter().copied(), lambda_up)?.weights(dl.len())?;
    let mut encoder = model.encoder.clone();
    let mut head = model.head.clone();
    let mut enc_state = OptimState::momentum(&encoder.param_lens());
    let mut head_state = OptimState::momentum(&head.net().param_lens());
    let x = dl.inputs();
    let labels = dl.targets();
    let mut epoch = 0u64;
    let mut plan: Vec<Vec<usize>> = Vec::new();
    for it in 0..cfg.iterations {
        if plan.is_empty() {
            let mut order = rng::substream(seed, "finetune-batch", epoch);
            plan = batches(dl.len(), cfg.batch_size, 1, &mut order);
            plan.reverse();
            epoch += 1;
        }
        let idx = plan.pop().expect("refilled");
        let xb = x.select(Axis(0), &idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let wb: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        let enc = encoder.forward(xb.view())?;
        let hc = head.net().forward(enc.output().view())?;
        check_output(hc.output(), epoch as usize, it)?;
        let lg = weighted_cross_entropy(hc.output().view(), &yb, &wb)?;
        check_loss(lg.loss, epoch as usize, it)?;
        let (head_grads, dfeat) = head.net().backward(&hc, lg.grad.view())?;
        let (enc_grads, _) = encoder.backward(&enc, dfeat.view())?;
        sgd_momentum_step(
            &mut encoder.param_slices_mut(),
            &enc_grads.slices(),
            &mut enc_state,
            cfg.lr,
            cfg.momentum,
            cfg.l2,
        )?;
        sgd_momentum_step(
            &mut head.net_mut().param_slices_mut(),
            &head_grads.slices(),
            &mut head_state,
            cfg.lr,
            cfg.momentum,
            cfg.l2,
        )?;
    }
    Ok(Model { encoder, head })
}
