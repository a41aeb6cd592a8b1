//! Loss, optimizer, learning-rate schedule, and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::save_checkpoint;
use crate::data::{augment, normalize_ct, normalize_pet, AugmentConfig, Mask, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{accumulate_param_grads, ParamStore};
use crate::seeding::mix_seed;
use crate::tensor::{Scalar, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Decoupled decay (-lr·wd·θ after the Adam term) when true; classical
    /// L2-in-gradient when false.
    pub decoupled_weight_decay: bool,
    pub augment: bool,
    pub seed: u64,
    /// Write a checkpoint every N epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            poly_power: 0.9,
            epochs: 100,
            batch_size: 2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            augment: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::config("lr0 must be positive".to_string()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

// ── Loss ─────────────────────────────────────────────────────────────────

/// Mean pixel-wise cross-entropy of a probability map against a binary
/// mask, probabilities floored at 1e-12 before the log. Accepts a
/// (C, H, W) or (1, C, H, W) map.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, mask: &Mask) -> Result<T> {
    let s = probs.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => {
            return Err(Error::dim(format!(
                "cross_entropy wants (C, H, W) or (1, C, H, W), got {:?}",
                s
            )))
        }
    };
    if (mask.h, mask.w) != (h, w) {
        return Err(Error::dim(format!(
            "mask {}x{} does not match probabilities {}x{}",
            mask.h, mask.w, h, w
        )));
    }
    let hw = h * w;
    let floor = T::from_f64(PROB_FLOOR);
    let data = probs.data();
    let mut acc = T::ZERO;
    for pix in 0..hw {
        let cls = mask.data[pix] as usize;
        if cls >= c {
            return Err(Error::arg(format!(
                "class {cls} out of range for {c} channels"
            )));
        }
        acc -= data[cls * hw + pix].maxv(floor).ln();
    }
    Ok(acc / T::from_f64(hw as f64))
}

// ── Schedule ─────────────────────────────────────────────────────────────

/// Poly decay: lr0 · (1 - step/total_steps)^power.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::arg("total_steps must be >= 1".to_string()));
    }
    if step > total_steps {
        return Err(Error::arg(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

// ── Optimizer ────────────────────────────────────────────────────────────

/// Adam first/second-moment accumulators, aligned with the parameter
/// store's insertion order, plus the step counter.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update from the store's gradient buffers.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != store.n_tensors() {
        return Err(Error::dim(format!(
            "optimizer state holds {} tensors, store has {}",
            state.m.len(),
            store.n_tensors()
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one_minus_b1 = T::from_f64(1.0 - cfg.adam_beta1);
    let one_minus_b2 = T::from_f64(1.0 - cfg.adam_beta2);
    let bc1 = T::from_f64(1.0 - cfg.adam_beta1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - cfg.adam_beta2.powi(state.t as i32));
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(cfg.weight_decay);
    let decoupled = cfg.decoupled_weight_decay;
    for (i, (_, param, grad)) in store.iter_mut_with_grads().enumerate() {
        if state.m[i].shape() != param.shape() {
            return Err(Error::dim(format!(
                "optimizer moment {} shape {:?} vs parameter {:?}",
                i,
                state.m[i].shape(),
                param.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let g_eff = if decoupled {
                grad.data()[j]
            } else {
                grad.data()[j] + wd * p[j]
            };
            m[j] = b1 * m[j] + one_minus_b1 * g_eff;
            v[j] = b2 * v[j] + one_minus_b2 * g_eff * g_eff;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            if decoupled {
                p[j] -= lr_t * wd * p[j];
            }
        }
    }
    Ok(())
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub fn format_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,lr,seconds\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.3}\n",
            e.epoch, e.mean_loss, e.lr, e.seconds
        ));
    }
    out
}

/// Run epochs `start_epoch..cfg.epochs` of the training loop:
/// augment → forward → cross-entropy → backward → poly schedule → Adam.
/// The loop is a pure function of (model params, optimizer state, samples,
/// config); per-epoch RNG streams are derived from (seed, epoch), so a
/// checkpoint resume replays the exact uninterrupted run.
///
/// When `out_dir` is set, writes `train_log.csv`, periodic checkpoints
/// (`ckpt_epoch{N}.bin` per `checkpoint_every`) and a final `model.ckpt`.
pub fn train(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    start_epoch: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("training set is empty".to_string()));
    }
    if start_epoch >= cfg.epochs {
        return Err(Error::arg(format!(
            "start_epoch {} is past the configured {} epochs",
            start_epoch, cfg.epochs
        )));
    }
    let n = samples.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let aug_cfg = AugmentConfig::default();

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "epoch,mean_loss,lr,seconds").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let s = if cfg.augment {
                    augment(&samples[idx], &mut rng, &aug_cfg)
                } else {
                    samples[idx].clone()
                };
                let pet = normalize_pet(&s.pet)?;
                let ct = normalize_ct(&s.ct)?;
                let out = model.forward(&mut g, &pet, &ct).map_err(|e| {
                    Error::Numerical(format!(
                        "forward failed at epoch {epoch}, step {}: {e}",
                        opt.t
                    ))
                })?;
                losses.push(g.cross_entropy_probs(out, &s.mask.data)?);
            }
            let batch_loss = g.mean_of(&losses)?;
            let loss_val = g.value(batch_loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at epoch {epoch}, step {}",
                    opt.t
                )));
            }
            model.store.zero_grads();
            let grads = g.backward(batch_loss)?;
            accumulate_param_grads(&g, &grads, &mut model.store)?;
            last_lr = poly_lr(opt.t as usize, total_steps, cfg.lr0, cfg.poly_power)?;
            adam_step(&mut model.store, opt, last_lr, cfg)?;
            loss_sum += loss_val;
        }

        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            lr: last_lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(
                f,
                "{},{:.9e},{:.9e},{:.3}",
                entry.epoch, entry.mean_loss, entry.lr, entry.seconds
            )
            .map_err(|e| Error::io(&*path, e))?;
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
        log.push(entry);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_epoch{:04}.bin", epoch + 1));
                save_checkpoint(&path, model, Some(opt), epoch + 1)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.ckpt"), model, Some(opt), cfg.epochs)?;
    }
    Ok(log)
}
