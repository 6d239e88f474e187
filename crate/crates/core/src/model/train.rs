use rand::seq::SliceRandom;

use super::layers::bce_with_logit;
use super::net::{backward, forward_batch, stack_inputs, Pass};
use super::{ModelState, ParamSet};
use crate::augment::{draw_lambda, mixup, LabelVec, MixupConfig};
use crate::corpus::rng_for;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone)]
pub struct Sample {
    pub x: FeatureMatrix,
    /// `(p_patient, p_control)`.
    pub y: LabelVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    pub mixup: Option<MixupConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: Some(10),
            mixup: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "bad optimizer settings: lr {} momentum {}",
                self.learning_rate, self.momentum
            )));
        }
        if let Some(m) = &self.mixup {
            m.validate()?;
        }
        Ok(())
    }
}

/// Validation result used for early stopping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValScore {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<ValScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc\n");
        for e in &self.epochs {
            let acc = e.val.map_or(String::new(), |v| format!("{:.6}", v.accuracy));
            out.push_str(&format!("{},{:.8},{}\n", e.epoch, e.train_loss, acc));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn better(a: ValScore, b: ValScore) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
}

/// Mini-batch SGD with momentum on binary cross-entropy. `epoch_data`
/// supplies each epoch's (freshly augmented) samples; `validate` scores the
/// current parameters and drives early stopping, after which the best
/// parameters are restored.
pub fn train<D, V>(
    state: &mut ModelState,
    cfg: &TrainConfig,
    mut epoch_data: D,
    mut validate: V,
) -> Result<TrainReport>
where
    D: FnMut(usize) -> Result<Vec<Sample>>,
    V: FnMut(&ModelState) -> Result<Option<ValScore>>,
{
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "train");
    let mut velocity: ParamSet = state.params.zeros_like();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ValScore, usize, ModelState)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let data = epoch_data(epoch)?;
        if data.is_empty() {
            return Err(Error::EmptyDataset(format!("epoch {epoch} produced no samples")));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys): (Vec<FeatureMatrix>, Vec<LabelVec>) = match &cfg.mixup {
                Some(m) => {
                    let lambda = draw_lambda(m, &mut rng)?;
                    let mut partner = chunk.to_vec();
                    partner.shuffle(&mut rng);
                    chunk
                        .iter()
                        .zip(&partner)
                        .map(|(&i, &j)| mixup(&data[i].x, data[i].y, &data[j].x, data[j].y, lambda))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .unzip()
                }
                None => chunk.iter().map(|&i| (data[i].x.clone(), data[i].y)).unzip(),
            };
            let batch = stack_inputs(&xs)?;
            let tape = forward_batch(state, &batch, Pass::Train(&mut rng))?;
            let n = ys.len() as f64;
            let mut loss = 0.0;
            let mut dlogits = Vec::with_capacity(ys.len());
            for ((&z, &p), y) in tape.logits.iter().zip(&tape.probabilities).zip(&ys) {
                loss += bce_with_logit(z, y[0]);
                dlogits.push((p - y[0]) / n);
            }
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("logits {:?}", tape.logits),
                });
            }
            loss_sum += loss * n;
            let grads = backward(state, &tape, &dlogits)?;
            if !grads.params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: "non-finite gradient".into(),
                });
            }
            state.absorb_batch_stats(&tape);
            for ((theta, v), g) in state
                .params
                .tensors
                .iter_mut()
                .zip(velocity.tensors.iter_mut())
                .zip(&grads.params.tensors)
            {
                v.zip_mut_with(g, |v, &g| *v = cfg.momentum * *v + g);
                theta.zip_mut_with(v, |t, &v| *t -= cfg.learning_rate * v);
            }
            state.bump();
        }
        let train_loss = loss_sum / data.len() as f64;
        let val = validate(state)?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4}{}",
            val.map_or(String::new(), |v| format!(" val_acc {:.3} val_loss {:.4}", v.accuracy, v.loss))
        );
        records.push(EpochRecord { epoch, train_loss, val });
        if let Some(v) = val {
            match &best {
                Some((b, _, _)) if !better(v, *b) => stale += 1,
                _ => {
                    best = Some((v, epoch, state.clone()));
                    stale = 0;
                }
            }
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, kept)) => {
            let version = state.version + 1;
            *state = kept;
            state.version = version;
            epoch
        }
        None => records.len() - 1,
    };
    Ok(TrainReport {
        epochs: records,
        best_epoch,
    })
}
