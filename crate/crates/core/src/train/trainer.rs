use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{compute_metrics, softmax_rows, MetricsReport};
use super::optim::{cosine_lr, AdamW};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::gaze::FixationSequence;
use crate::model::{Example, FixationFormer};
use crate::nn::Forward;
use crate::vit::ImageSample;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub image: Option<ImageSample>,
    pub gaze: Option<FixationSequence>,
    pub label: usize,
}

impl LabeledExample {
    pub fn example(&self) -> Example<'_> {
        Example {
            image: self.image.as_ref(),
            gaze: self.gaze.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 is the evaluation of the initial parameters.
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    /// Learning rate of the last step taken in the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: FixationFormer,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimization step in order.
    pub step_losses: Vec<f64>,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

fn numerical(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::Numerical(format!(
            "non-finite value produced by {op} at epoch {epoch}, step {step}"
        )),
        other => other,
    }
}

/// Class probabilities of every example, `N×K` row-major.
pub fn predict_proba(model: &FixationFormer, data: &[LabeledExample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * model.config.n_classes);
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<Example> = chunk.iter().map(|e| e.example()).collect();
        let logits = model.predict(&batch)?;
        out.extend(softmax_rows(logits.data(), model.config.n_classes));
    }
    Ok(out)
}

pub fn evaluate(model: &FixationFormer, data: &[LabeledExample]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let probs = predict_proba(model, data)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    compute_metrics(&labels, &probs, model.config.n_classes)
}

fn check_split(name: &str, data: &[LabeledExample], k: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract(format!("{name} split is empty")));
    }
    if let Some(e) = data.iter().find(|e| e.label >= k) {
        return Err(Error::contract(format!(
            "{name} sample {} has label {} but the model has {k} classes",
            e.id, e.label
        )));
    }
    Ok(())
}

/// Trains with AdamW under a cosine schedule, validating after every epoch.
///
/// The initial parameters count as epoch 0. The epoch with the highest
/// validation accuracy is kept (ties go to the earliest) and scored on `test`.
pub fn train(
    mut model: FixationFormer,
    train: &[LabeledExample],
    val: &[LabeledExample],
    test: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = model.config.n_classes;
    check_split("train", train, k)?;
    check_split("validation", val, k)?;
    check_split("test", test, k)?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(cfg.adamw());

    let initial_val = evaluate(&model, val)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_accuracy: initial_val.accuracy,
        lr: cosine_lr(0, total_steps, cfg.lr),
    }];
    let mut best = (0, initial_val, model.params.clone());
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for idx in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total_steps, cfg.lr);
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].example()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let (loss, grads) = {
                let mut cx = Forward::new(&model.params);
                let (loss, _) = model.loss(&mut cx, &batch, &labels).map_err(|e| numerical(e, epoch, step))?;
                let value = cx.g.value(loss).data()[0];
                let grads = cx.g.backward(loss).map_err(|e| numerical(e, epoch, step))?;
                (value, grads)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at epoch {epoch}, step {step}")));
            }
            model.params.zero_grad();
            model.params.accumulate(&grads)?;
            opt.step(&mut model.params, lr)?;
            if model.params.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at epoch {epoch}, step {step}"
                )));
            }
            step_losses.push(loss);
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }
        model.params.zero_grad();
        let v = evaluate(&model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / train.len() as f64),
            val_accuracy: v.accuracy,
            lr,
        });
        if v.accuracy > best.1.accuracy {
            best = (epoch, v, model.params.clone());
        }
    }

    let (best_epoch, val_report, params) = best;
    model.params = params;
    let test_report = evaluate(&model, test)?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        step_losses,
        val: val_report,
        test: test_report,
    })
}
