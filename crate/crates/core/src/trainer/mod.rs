//! Feature learning: fixed-size and multi-size training, fine-tuning.

mod loss;
mod schedule;

pub use loss::{multitask_loss, LossBreakdown, LossOutput};
pub use schedule::{make_batches, round_robin_order, SizeIterator};

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::glorot_dense;
use crate::nn::{sgd_nesterov_step, LrSchedule, Mode, Model, OptimizerState};
use crate::rng::{self, tag};
use crate::sigproc::{default_max_pad, draw_pad, pad_image, random_crop, to_tensor, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One canvas, random crops to the network input.
    Fixed,
    /// Canvas groups visited round-robin, padding augmentation.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Forgery-loss weight; required exactly when the model has a forgery head.
    pub lambda: Option<f64>,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub protocol: Protocol,
    pub seed: u64,
    /// Padding bound `(rows, cols)`; `None` means 10% of each canvas.
    pub max_pad: Option<(usize, usize)>,
    /// Random-crop size for the fixed protocol; `None` means the model's
    /// nominal input (or no cropping for variable-size models).
    pub crop: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lambda: None,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            protocol: Protocol::Multi,
            seed: 0,
            max_pad: None,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model<f32>) -> Result<()> {
        match (model.forgery_head().is_some(), self.lambda) {
            (true, None) => return Err(Error::Config("lambda is required with a forgery head".into())),
            (false, Some(_)) => return Err(Error::Config("lambda given but the model has no forgery head".into())),
            (_, Some(l)) if !(0.0..=1.0).contains(&l) => {
                return Err(Error::Config(format!("lambda must be in [0, 1], got {l}")))
            }
            _ => {}
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self, model: &Model<f32>) -> Result<OptimizerState<f32>> {
        OptimizerState::new(model, self.schedule.base, self.momentum, self.weight_decay)
    }
}

/// A preprocessed image with its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Raster,
    /// Class index in `0..M`.
    pub user: usize,
    pub forgery: bool,
}

/// Training set laid out for one of the two protocols.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    /// All images on one canvas.
    Fixed(Vec<TrainSample>),
    /// One group per canvas id; images within a group share dimensions.
    Multi(Vec<Vec<TrainSample>>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Fixed(s) => s.len(),
            TrainData::Multi(g) => g.iter().map(Vec::len).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Box<dyn Iterator<Item = &TrainSample> + '_> {
        match self {
            TrainData::Fixed(s) => Box::new(s.iter()),
            TrainData::Multi(g) => Box::new(g.iter().flatten()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub user_loss: f64,
    pub forgery_loss: f64,
    pub batches: usize,
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Default)]
struct Accumulator {
    loss: f64,
    user: f64,
    forgery: f64,
    batches: usize,
    samples: usize,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown) {
        let n = b.per_sample.len() as f64;
        self.loss += b.total * n;
        self.user += b.user * n;
        self.forgery += b.forgery * n;
        self.batches += 1;
        self.samples += b.per_sample.len();
    }

    fn finish(self, epoch: usize, lr: f64, start: Instant) -> EpochStats {
        let n = self.samples.max(1) as f64;
        EpochStats {
            epoch,
            lr,
            loss: self.loss / n,
            user_loss: self.user / n,
            forgery_loss: self.forgery / n,
            batches: self.batches,
            samples: self.samples,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// One optimizer step on a homogeneous batch.
fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut OptimizerState<f32>,
    images: &[Raster],
    labels: &[usize],
    forged: &[bool],
    lambda: Option<f64>,
    location: &str,
) -> Result<LossBreakdown> {
    let refs: Vec<&Raster> = images.iter().collect();
    let input = to_tensor(&refs)?;
    let fwd = model.forward(&input, Mode::Train)?;
    let out = multitask_loss(&fwd.user_logits, fwd.forgery_logits.as_ref(), labels, forged, lambda)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::numeric(
            location,
            format!("loss is {} (user {}, forgery {})", out.breakdown.total, out.breakdown.user, out.breakdown.forgery),
        ));
    }
    let grads = model.backward(&fwd, &out.d_user, out.d_forgery.as_ref(), false)?;
    sgd_nesterov_step(model, &grads, optimizer).map_err(|e| match e {
        Error::Numeric { location: l, message } => Error::numeric(format!("{location}, {l}"), message),
        e => e,
    })?;
    model.update_running_stats(&fwd)?;
    Ok(out.breakdown)
}

fn targets(samples: &[&TrainSample]) -> (Vec<usize>, Vec<bool>) {
    (samples.iter().map(|s| s.user).collect(), samples.iter().map(|s| s.forgery).collect())
}

/// One pass over a single-canvas dataset in random order, each image
/// randomly cropped to the network's nominal input.
pub fn train_epoch_fixed(
    model: &mut Model<f32>,
    data: &[TrainSample],
    config: &TrainConfig,
    optimizer: &mut OptimizerState<f32>,
) -> Result<EpochStats> {
    config.validate(model)?;
    let start = Instant::now();
    let epoch = optimizer.epoch;
    let lr = config.schedule.at(epoch);
    optimizer.learning_rate = lr;
    let (ch, cw) =
        config.crop.or(model.spec().nominal_input).unwrap_or_else(|| data.first().map_or((1, 1), |s| s.image.dims()));
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]);
    let iter = SizeIterator::new(0, &ids, config.batch_size, &mut shuffle);
    if iter.is_exhausted() {
        return Err(Error::Data("training set has no complete mini-batch".into()));
    }
    let mut acc = Accumulator::default();
    for (b, batch) in iter.enumerate() {
        let mut aug = rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, b as u64]);
        let samples: Vec<&TrainSample> = batch.iter().map(|&i| &data[i]).collect();
        let images = samples.iter().map(|s| random_crop(&s.image, ch, cw, &mut aug)).collect::<Result<Vec<_>>>()?;
        let (labels, forged) = targets(&samples);
        let loc = format!("epoch {epoch}, batch {b}");
        let br = train_step(model, optimizer, &images, &labels, &forged, config.lambda, &loc)?;
        acc.add(&br);
    }
    optimizer.epoch += 1;
    Ok(acc.finish(epoch, lr, start))
}

/// Batches of one multi-size epoch in consumption order, as `(canvas id,
/// sample indices within the group)`. Each group is shuffled with its own
/// stream, then groups serve batches round-robin.
pub fn multisize_plan(group_sizes: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<(usize, Vec<usize>)> {
    let mut iters: Vec<SizeIterator> = group_sizes
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let ids: Vec<usize> = (0..n).collect();
            let mut shuffle = rng::stream(seed, &[tag::SHUFFLE, epoch as u64, g as u64]);
            SizeIterator::new(g, &ids, batch_size, &mut shuffle)
        })
        .collect();
    let counts: Vec<usize> = iters.iter().map(SizeIterator::remaining).collect();
    round_robin_order(&counts).into_iter().map(|g| (g, iters[g].next().expect("order respects batch counts"))).collect()
}

/// One pass over all canvas groups, one mini-batch per active group per
/// cycle. Each batch shares drawn pad amounts; each image gets its own offset.
pub fn train_epoch_multisize(
    model: &mut Model<f32>,
    groups: &[Vec<TrainSample>],
    config: &TrainConfig,
    optimizer: &mut OptimizerState<f32>,
) -> Result<EpochStats> {
    config.validate(model)?;
    let start = Instant::now();
    let epoch = optimizer.epoch;
    let lr = config.schedule.at(epoch);
    optimizer.learning_rate = lr;
    for (g, samples) in groups.iter().enumerate() {
        if let Some(s) = samples.iter().find(|s| s.image.dims() != samples[0].image.dims()) {
            return Err(Error::Data(format!(
                "canvas group {g} mixes sizes {:?} and {:?}",
                samples[0].image.dims(),
                s.image.dims()
            )));
        }
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let plan = multisize_plan(&sizes, config.batch_size, config.seed, epoch);
    if plan.is_empty() {
        return Err(Error::Data("every canvas group is empty".into()));
    }
    let mut acc = Accumulator::default();
    for (b, (g, batch)) in plan.into_iter().enumerate() {
        let samples: Vec<&TrainSample> = batch.iter().map(|&i| &groups[g][i]).collect();
        let mut aug = rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, b as u64]);
        let max_pad = config.max_pad.unwrap_or_else(|| default_max_pad(samples[0].image.dims()));
        let pad = draw_pad(max_pad, &mut aug);
        let images: Vec<Raster> = samples.iter().map(|s| pad_image(&s.image, pad, &mut aug)).collect();
        let (labels, forged) = targets(&samples);
        let loc = format!("epoch {epoch}, batch {b} (canvas {g})");
        let br = train_step(model, optimizer, &images, &labels, &forged, config.lambda, &loc)?;
        acc.add(&br);
    }
    optimizer.epoch += 1;
    Ok(acc.finish(epoch, lr, start))
}

pub fn train_epoch(
    model: &mut Model<f32>,
    data: &TrainData,
    config: &TrainConfig,
    optimizer: &mut OptimizerState<f32>,
) -> Result<EpochStats> {
    match data {
        TrainData::Fixed(s) => train_epoch_fixed(model, s, config, optimizer),
        TrainData::Multi(g) => train_epoch_multisize(model, g, config, optimizer),
    }
}

/// Runs epochs `optimizer.epoch .. config.epochs`, writing one JSON line per
/// epoch to `log` when given.
pub fn train(
    model: &mut Model<f32>,
    data: &TrainData,
    config: &TrainConfig,
    optimizer: &mut OptimizerState<f32>,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>> {
    let mut history = Vec::new();
    while optimizer.epoch < config.epochs {
        let stats = train_epoch(model, data, config, optimizer)?;
        log::info!(
            "epoch {} lr {:.1e} loss {:.4} (user {:.4}, forgery {:.4}) {:.1}s",
            stats.epoch,
            stats.lr,
            stats.loss,
            stats.user_loss,
            stats.forgery_loss,
            stats.seconds
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&stats).expect("stats serialize");
            writeln!(w, "{line}").map_err(|e| Error::Data(format!("epoch log: {e}")))?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Eval-mode user-head performance on the genuine training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of samples whose arg-max class is the true user.
    pub accuracy: f64,
    pub samples: usize,
}

/// Evaluates the user head over genuine samples, eval mode, no augmentation.
/// Fixed-protocol images are center-cropped to `crop` (default: the nominal
/// input).
pub fn evaluate_users(
    model: &Model<f32>,
    data: &TrainData,
    batch_size: usize,
    crop: Option<(usize, usize)>,
) -> Result<UserEval> {
    let groups: Vec<Vec<&TrainSample>> = match data {
        TrainData::Fixed(s) => vec![s.iter().collect()],
        TrainData::Multi(g) => g.iter().map(|g| g.iter().collect()).collect(),
    };
    let crop = match data {
        TrainData::Fixed(_) => crop.or(model.spec().nominal_input),
        TrainData::Multi(_) => None,
    };
    let (mut total, mut correct, mut count) = (0.0, 0usize, 0usize);
    for group in groups {
        let genuine: Vec<&TrainSample> = group.into_iter().filter(|s| !s.forgery).collect();
        for chunk in genuine.chunks(batch_size.max(1)) {
            let images: Vec<Raster> = chunk
                .iter()
                .map(|s| match crop {
                    Some((h, w)) => center_crop(&s.image, h, w),
                    None => Ok(s.image.clone()),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Raster> = images.iter().collect();
            let fwd = model.forward(&to_tensor(&refs)?, Mode::Eval)?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.user).collect();
            let out = multitask_loss(&fwd.user_logits, None, &labels, &vec![false; chunk.len()], None)?;
            total += out.breakdown.total * chunk.len() as f64;
            for (i, &label) in labels.iter().enumerate() {
                let row = fwd.user_logits.sample(i);
                let m = row.len();
                let best = (0..m).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == label);
            }
            count += chunk.len();
        }
    }
    if count == 0 {
        return Err(Error::Data("no genuine samples to evaluate".into()));
    }
    Ok(UserEval { loss: total / count as f64, accuracy: correct as f64 / count as f64, samples: count })
}

/// Mean user cross-entropy over genuine samples; see [`evaluate_users`].
pub fn evaluate_user_loss(model: &Model<f32>, data: &TrainData, batch_size: usize) -> Result<f64> {
    Ok(evaluate_users(model, data, batch_size, None)?.loss)
}

/// Central `h x w` window; errors when the image is smaller.
pub fn center_crop(image: &Raster, h: usize, w: usize) -> Result<Raster> {
    let (ih, iw) = image.dims();
    if ih < h || iw < w {
        return Err(Error::Data(format!("image {ih}x{iw} smaller than crop {h}x{w}")));
    }
    Ok(image.crop((ih - h) / 2, (iw - w) / 2, h, w))
}

/// Learning rate used when adapting a trained network to new users.
pub const FINETUNE_LR: f64 = 5e-4;

/// Default fine-tuning configuration: constant 5e-4, otherwise as `base`.
pub fn finetune_config(base: &TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, schedule: LrSchedule { base: FINETUNE_LR, drops: vec![], factor: 10.0 }, ..base.clone() }
}

/// Replaces the user head with a fresh Glorot-initialized `M2`-way head and
/// trains every layer on the target data.
pub fn finetune(
    source: &Model<f32>,
    data: &TrainData,
    users: usize,
    config: &TrainConfig,
) -> Result<(Model<f32>, Vec<EpochStats>)> {
    if users < 2 {
        return Err(Error::Config(format!("fine-tuning needs at least 2 users, got {users}")));
    }
    if let Some(bad) = data.samples().find(|s| s.user >= users) {
        return Err(Error::Data(format!("label {} out of range for {users} users", bad.user)));
    }
    let mut model = source.clone();
    let mut head_rng = rng::stream(config.seed, &[tag::HEAD]);
    model.replace_user_head(glorot_dense(model.feature_dim(), users, &mut head_rng))?;
    let mut optimizer = config.optimizer(&model)?;
    let history = train(&mut model, data, config, &mut optimizer, None)?;
    Ok((model, history))
}
