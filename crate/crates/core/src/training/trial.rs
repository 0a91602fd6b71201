use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    cross_entropy, l1_loss, lr_range_test, make_context_batches, make_mixed_batches,
    rotograd_update, Adadelta, Batch, EarlyStopper, LrSweep, TrainPlan, ROTOGRAD_ETA,
};
use crate::model::{Mode, ModelConfig, Strategy, Tensor, VelocityModel};
use crate::separation::{NoteFeatures, FEATURE_COLS, FEATURE_ROWS};
use crate::{Error, Result};

const EVAL_BATCH: usize = 256;
const LR_PROBE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub train_ce: Option<f64>,
    pub val_l1: f64,
    pub val_ema: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    /// Parameters at the epoch with the lowest smoothed validation loss.
    pub model: VelocityModel,
    pub history: Vec<EpochRecord>,
    pub lr: f64,
    pub lr_fell_back: bool,
    pub best_epoch: usize,
    pub best_ema: f64,
}

impl TrialOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_l1,train_ce,val_l1,val_ema,val_accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for r in &self.history {
            let _ = writeln!(
                s,
                "{},{:.9},{},{:.9},{:.9},{}",
                r.epoch,
                r.train_l1,
                opt(r.train_ce),
                r.val_l1,
                r.val_ema,
                opt(r.val_accuracy)
            );
        }
        s
    }
}

struct Prepared<'a> {
    items: &'a [NoteFeatures],
}

impl Prepared<'_> {
    fn tensor(&self, idx: &[usize]) -> Tensor {
        let samples: Vec<&[f64]> = idx.iter().map(|&i| self.items[i].mfcc.as_slice()).collect();
        Tensor::from_samples(&samples, FEATURE_ROWS, FEATURE_COLS)
    }

    fn targets(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .map(|&i| self.items[i].velocity_target as f64 / 127.0)
            .collect()
    }

    fn contexts(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .map(|&i| self.items[i].preset_id as usize)
            .collect()
    }
}

fn train_step(
    model: &mut VelocityModel,
    opt: &mut Adadelta,
    data: &Prepared,
    batch: &Batch,
    lr: f64,
) -> Result<(f64, Option<f64>)> {
    let x = data.tensor(&batch.indices);
    let targets = data.targets(&batch.indices);
    let contexts = data.contexts(&batch.indices);
    let out = model.forward(&x, &contexts, Mode::Train)?;
    let (l1, d_vel) = l1_loss(&out.velocity, &targets);
    let ce = out
        .class_probs
        .as_ref()
        .map(|p| cross_entropy(p, &contexts));
    if !l1.is_finite() || ce.as_ref().is_some_and(|(c, _)| !c.is_finite()) {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = model.zero_grads();
    let latent = model.backward(
        &out.cache,
        &d_vel,
        ce.as_ref().map(|(_, g)| g.as_slice()),
        &mut grads,
    );
    model.absorb_stats(&out.cache);
    if model.strategy.with_classifier() {
        rotograd_update(&mut model.rotations, &latent, ROTOGRAD_ETA);
    }
    let mut flat = model.params_flat();
    opt.step(&mut flat, &grads.flat(), lr)?;
    model.set_params_flat(&flat);
    Ok((l1, ce.map(|(c, _)| c)))
}

/// Evaluation-mode outputs for a set of notes.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Normalized velocity estimates (velocity / 127).
    pub velocity: Vec<f64>,
    /// Most probable context per note, for strategies with a classifier.
    pub context: Option<Vec<usize>>,
}

pub fn predict(model: &VelocityModel, items: &[NoteFeatures]) -> Result<Predictions> {
    let data = Prepared { items };
    let mut velocity = Vec::with_capacity(items.len());
    let mut context = model.strategy.with_classifier().then(Vec::new);
    let all: Vec<usize> = (0..items.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let contexts = data.contexts(chunk);
        let out = model.forward(&data.tensor(chunk), &contexts, Mode::Eval)?;
        velocity.extend_from_slice(&out.velocity);
        if let (Some(p), Some(ctx)) = (&out.class_probs, context.as_mut()) {
            ctx.extend(p.iter().map(|row| {
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap()
            }));
        }
    }
    Ok(Predictions { velocity, context })
}

/// Velocity L1 (normalized units) and context accuracy in evaluation mode.
pub fn evaluate_loss(model: &VelocityModel, items: &[NoteFeatures]) -> Result<(f64, Option<f64>)> {
    if items.is_empty() {
        return Err(Error::MissingData("nothing to evaluate".into()));
    }
    let pred = predict(model, items)?;
    let n = items.len() as f64;
    let l1 = pred
        .velocity
        .iter()
        .zip(items)
        .map(|(e, f)| (e - f.velocity_target as f64 / 127.0).abs())
        .sum::<f64>()
        / n;
    let acc = pred.context.map(|c| {
        c.iter()
            .zip(items)
            .filter(|(k, f)| **k == f.preset_id as usize)
            .count() as f64
            / n
    });
    Ok((l1, acc))
}

fn epoch_batches(
    strategy: Strategy,
    data: &Prepared,
    batch_size: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<Batch>> {
    let mut rng = crate::rng::substream(seed, label);
    if strategy.multiple() {
        make_context_batches(
            &data.contexts(&(0..data.items.len()).collect::<Vec<_>>()),
            batch_size,
            &mut rng,
        )
    } else {
        Ok(make_mixed_batches(data.items.len(), batch_size, &mut rng))
    }
}

fn probe_loss(model: &VelocityModel, data: &Prepared, idx: &[usize]) -> Result<f64> {
    let contexts = data.contexts(idx);
    let out = model.forward(&data.tensor(idx), &contexts, Mode::Train)?;
    let (l1, _) = l1_loss(&out.velocity, &data.targets(idx));
    let ce = out
        .class_probs
        .map(|p| cross_entropy(&p, &contexts).0)
        .unwrap_or(0.0);
    Ok(l1 + ce)
}

/// Learning-rate range test on a throwaway copy of `model`: one Adadelta
/// step per swept rate, cycling through `batches`, each scored on a fixed
/// probe drawn from the training set so batch-to-batch variation does not
/// mask the trend.
pub fn find_lr(
    model: &VelocityModel,
    items: &[NoteFeatures],
    batches: &[Batch],
    seed: u64,
) -> LrSweep {
    let data = Prepared { items };
    let mut rng = crate::rng::substream(seed, "lr-probe");
    let mut probe: Vec<usize> =
        rand::seq::index::sample(&mut rng, items.len(), items.len().min(LR_PROBE)).into_vec();
    probe.sort_unstable();
    let mut work = model.clone();
    let mut opt = Adadelta::new(work.n_params());
    let mut i = 0;
    lr_range_test(|lr| {
        let batch = &batches[i % batches.len()];
        i += 1;
        train_step(&mut work, &mut opt, &data, batch, lr)?;
        probe_loss(&work, &data, &probe)
    })
}

/// Seed of one trial's model initialization and batch order.
pub fn trial_seed(root: u64, config: ModelConfig, strategy: Strategy) -> u64 {
    crate::rng::derive_seed(root, &format!("trial/{}/{}", config.label(), strategy.name()))
}

/// Trains one model end to end and keeps the best-EMA parameters.
pub fn train_trial(
    config: ModelConfig,
    strategy: Strategy,
    plan: &TrainPlan,
    train: &[NoteFeatures],
    validation: &[NoteFeatures],
) -> Result<TrialOutcome> {
    plan.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::MissingData(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let seed = trial_seed(plan.seed, config, strategy);
    let mut model = VelocityModel::new(config, strategy, seed)?;
    let data = Prepared { items: train };
    let sweep_batches = epoch_batches(strategy, &data, plan.batch_size, seed, "batches/lr")?;
    let sweep = find_lr(&model, train, &sweep_batches, seed);
    let lr = sweep.chosen;
    log::debug!("{} {}: lr {lr:.3e}", config.label(), strategy.name());

    let mut opt = Adadelta::new(model.n_params());
    let mut stopper = EarlyStopper::new(plan.ema_window, plan.patience);
    let mut history = Vec::new();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    for epoch in 1..=plan.max_epochs {
        let batches = epoch_batches(
            strategy,
            &data,
            plan.batch_size,
            seed,
            &format!("batches/{epoch}"),
        )?;
        let (mut l1_sum, mut ce_sum) = (0.0, 0.0);
        for batch in &batches {
            let (l1, ce) = train_step(&mut model, &mut opt, &data, batch, lr)?;
            l1_sum += l1;
            ce_sum += ce.unwrap_or(0.0);
        }
        let nb = batches.len() as f64;
        let (val_l1, val_accuracy) = evaluate_loss(&model, validation)?;
        if !val_l1.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        let decision = stopper.observe(val_l1);
        history.push(EpochRecord {
            epoch,
            train_l1: l1_sum / nb,
            train_ce: strategy.with_classifier().then_some(ce_sum / nb),
            val_l1,
            val_ema: decision.smoothed,
            val_accuracy,
        });
        if decision.improved {
            best = (model.clone(), epoch, decision.smoothed);
        }
        if decision.stop {
            break;
        }
    }
    Ok(TrialOutcome {
        model: best.0,
        history,
        lr,
        lr_fell_back: sweep.fell_back,
        best_epoch: best.1,
        best_ema: best.2,
    })
}
