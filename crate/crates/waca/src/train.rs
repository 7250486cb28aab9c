//! The training loop: seeded shuffling, dihedral augmentation, batched
//! forward/backward through the composite loss, AdamW with cosine annealing,
//! per-epoch validation, and best-F1 checkpoint retention.

use serde::{Deserialize, Serialize};
use waca_core::augment::{apply_zscore, compute_norm_stats, dihedral_augment, DIHEDRAL_CODES};
use waca_core::backbone::{unet_forward, Model, UNetConfig};
use waca_core::loss::{composite_loss, LossConfig};
use waca_core::metrics::{f1, hotspot_mask, mae, HotspotConfig};
use waca_core::optim::{cosine_lr, AdamW};
use waca_core::pdn::CaseBundle;
use waca_core::rng::Rng;
use waca_core::{ParamSet, Tape, Tensor};

use crate::checkpoint::ModelCheckpoint;
use crate::error::WacaError;
use crate::lanczos;

/// RNG stream labels, so the shuffle and augmentation draws never collide.
const SHUFFLE_KEY: u64 = 0x7368_7566;
const AUGMENT_KEY: u64 = 0x6175_676d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Square working resolution; cases at other resolutions are resampled.
    pub train_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            lr_max: 4e-5,
            lr_min: 0.0,
            weight_decay: 1e-3,
            seed: 0,
            train_resolution: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.lr_max > 0.0) {
            return Err(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(format!(
                "need 0 <= lr_min <= lr_max, got lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.train_resolution == 0 {
            return Err("train_resolution must be positive".into());
        }
        Ok(())
    }
}

/// One line of the training log (CSV: epoch,loss,val_mae_mv,val_f1,lr).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_mae_mv: f64,
    pub val_f1: f64,
    pub lr: f64,
}

pub fn render_log(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,loss,val_mae_mv,val_f1,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss, r.val_mae_mv, r.val_f1, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelCheckpoint,
    pub final_model: Model,
    pub log: Vec<EpochRow>,
}

/// A case reduced to the training representation: normalized features and a
/// raw millivolt target, both at the working resolution.
struct Prepared {
    features: Tensor,
    target: Tensor,
}

fn prepare(
    case: &CaseBundle,
    res: usize,
    stats: Option<&waca_core::augment::NormStats>,
) -> Result<(Tensor, Tensor), WacaError> {
    let mut features = case.features.clone();
    let mut target = case.target.clone();
    if case.meta.h != res || case.meta.w != res {
        features = lanczos::resize(&features, res, res)?;
        target = lanczos::resize(&target, res, res)?;
    }
    if let Some(stats) = stats {
        features = apply_zscore(&features, stats).map_err(WacaError::Data)?;
    }
    Ok((features, target))
}

/// Stacks [C,H,W] samples into one [N,C,H,W] batch tensor.
fn stack(samples: &[&Tensor]) -> Tensor {
    let s = samples[0].shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].numel());
    for t in samples {
        data.extend_from_slice(t.data());
    }
    let shape = [&[samples.len()], s].concat();
    Tensor::from_vec(&shape, data).expect("stacked batch")
}

/// Per-case validation at the working resolution: mean MAE (mV) and mean
/// hotspot F1 over the set.
fn validate_set(
    model: &Model,
    val: &[Prepared],
    hc: HotspotConfig,
) -> Result<(f64, f64), WacaError> {
    let mut maes = Vec::with_capacity(val.len());
    let mut f1s = Vec::with_capacity(val.len());
    for case in val {
        let mut tape = Tape::new();
        let x = tape.leaf(stack(&[&case.features]));
        let mv = model.bind(&mut tape);
        let y = unet_forward(&mut tape, x, &mv).map_err(|e| WacaError::Data(e.to_string()))?;
        let pred_vals = tape.values(y).to_vec();
        let pred = Tensor::from_vec(case.target.shape(), pred_vals)
            .map_err(|e| WacaError::Data(e.to_string()))?;
        maes.push(mae(&pred, &case.target).map_err(|e| WacaError::Data(e.to_string()))?);
        let pm = hotspot_mask(&pred, hc);
        let tm = hotspot_mask(&case.target, hc);
        let (score, ..) = f1(&pm, &tm).map_err(|e| WacaError::Data(e.to_string()))?;
        f1s.push(score);
    }
    let n = val.len() as f64;
    Ok((maes.iter().sum::<f64>() / n, f1s.iter().sum::<f64>() / n))
}

/// Full training run. Norm stats are computed from the training set only and
/// travel with the checkpoint. Checkpoint selection keeps the epoch with the
/// best validation F1 (earliest on ties); a zero-epoch run returns the
/// initialized model with its validation metrics recorded.
pub fn train(
    unet: &UNetConfig,
    train_set: &[CaseBundle],
    val_set: &[CaseBundle],
    tc: &TrainConfig,
    lc: &LossConfig,
    hc: HotspotConfig,
) -> Result<TrainOutcome, WacaError> {
    unet.validate().map_err(WacaError::Config)?;
    tc.validate().map_err(WacaError::Config)?;
    lc.validate().map_err(WacaError::Config)?;
    hc.validate().map_err(WacaError::Config)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(WacaError::Data("training and validation sets must be nonempty".into()));
    }
    let res = tc.train_resolution;
    if res % unet.spatial_divisor() != 0 {
        return Err(WacaError::Config(format!(
            "train_resolution {res} is not divisible by the model's spatial divisor {}",
            unet.spatial_divisor()
        )));
    }

    // Resample first, then fit the stats to what the model will actually see.
    let train_raw: Vec<(Tensor, Tensor)> = train_set
        .iter()
        .map(|c| prepare(c, res, None))
        .collect::<Result<_, _>>()?;
    let feature_refs: Vec<&Tensor> = train_raw.iter().map(|(f, _)| f).collect();
    let stats = compute_norm_stats(&feature_refs).map_err(WacaError::Data)?;
    let train_prep: Vec<Prepared> = train_raw
        .into_iter()
        .map(|(f, t)| {
            Ok(Prepared { features: apply_zscore(&f, &stats).map_err(WacaError::Data)?, target: t })
        })
        .collect::<Result<_, WacaError>>()?;
    let val_prep: Vec<Prepared> = val_set
        .iter()
        .map(|c| prepare(c, res, Some(&stats)).map(|(f, t)| Prepared { features: f, target: t }))
        .collect::<Result<_, _>>()?;

    let mut model = Model::init(unet.clone(), tc.seed).map_err(WacaError::Config)?;
    let mut opt = AdamW::new(tc.weight_decay);
    let batches_per_epoch = train_prep.len().div_ceil(tc.batch_size);
    let total_steps = (tc.epochs * batches_per_epoch).max(1);

    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<ModelCheckpoint> = None;

    if tc.epochs == 0 {
        let (val_mae, val_f1) = validate_set(&model, &val_prep, hc)?;
        return Ok(TrainOutcome {
            best: ModelCheckpoint {
                model: model.clone(),
                epoch: 0,
                val_f1,
                norm_stats: stats,
            },
            final_model: model,
            log: vec![EpochRow { epoch: 0, loss: f64::NAN, val_mae_mv: val_mae, val_f1, lr: 0.0 }],
        });
    }

    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_prep.len()).collect();
        Rng::keyed(&[SHUFFLE_KEY, tc.seed, epoch as u64]).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            // Per-sample augmentation keyed by (seed, epoch, dataset index):
            // independent of shuffle order and of any worker layout.
            let augmented: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .map(|&idx| {
                    let code = Rng::keyed(&[AUGMENT_KEY, tc.seed, epoch as u64, idx as u64])
                        .below(DIHEDRAL_CODES as usize) as u8;
                    let p = &train_prep[idx];
                    dihedral_augment(&p.features, &p.target, code).map_err(WacaError::Data)
                })
                .collect::<Result<_, _>>()?;
            let xf: Vec<&Tensor> = augmented.iter().map(|(f, _)| f).collect();
            let xt: Vec<&Tensor> = augmented.iter().map(|(_, t)| t).collect();

            let lr = cosine_lr(step, total_steps, tc.lr_max, tc.lr_min);
            last_lr = lr;
            let mut tape = Tape::new();
            let x = tape.leaf(stack(&xf));
            let t = tape.leaf(stack(&xt));
            let mv = model.bind(&mut tape);
            let y = unet_forward(&mut tape, x, &mv).map_err(|e| WacaError::Data(e.to_string()))?;
            let loss = composite_loss(&mut tape, y, t, lc)
                .map_err(|e| WacaError::Data(e.to_string()))?;
            let loss_val = tape.values(loss)[0];
            if !loss_val.is_finite() {
                return Err(WacaError::Numerical(format!(
                    "non-finite training loss {loss_val} at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            tape.backward(loss).map_err(|e| WacaError::Numerical(e.to_string()))?;

            let mut grads = ParamSet::new();
            for (name, var) in &mv.leaves {
                grads.insert(name.clone(), tape.grad(*var));
            }
            let mut params = model.flatten();
            opt.step(&mut params, &grads, lr);
            model.assign(&params).map_err(WacaError::Config)?;
            step += 1;
        }
        epoch_loss /= train_prep.len() as f64;

        let (val_mae, val_f1) = validate_set(&model, &val_prep, hc)?;
        log.push(EpochRow { epoch, loss: epoch_loss, val_mae_mv: val_mae, val_f1, lr: last_lr });
        let improved = best.as_ref().map_or(true, |b| val_f1 > b.val_f1);
        if improved {
            best = Some(ModelCheckpoint {
                model: model.clone(),
                epoch,
                val_f1,
                norm_stats: stats.clone(),
            });
        }
    }

    Ok(TrainOutcome { best: best.expect("at least one epoch ran"), final_model: model, log })
}
