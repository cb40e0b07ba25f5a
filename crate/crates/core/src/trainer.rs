//! L1 training with Adam and a step-halving learning-rate schedule.
//!
//! Training is organised in *units*; the learning rate is halved every
//! `halve_every` units and each unit runs `steps_per_unit` optimizer steps.
//! Batch sampling for step `s` draws from a generator seeded by
//! `(seed, s)`, so a resumed run replays exactly the batches an
//! uninterrupted run would have seen.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arch::{PmrnConfig, PmrnModel};
use crate::autograd::Tape;
use crate::data::{augment_with, bicubic_upscale, AlignedPair, DegradationSpec, FloatImage, Image};
use crate::error::{Error, Result};
use crate::metrics::{psnr_y, ssim_y};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::weights::{self, Container};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: u64,
    pub total_units: u64,
    pub steps_per_unit: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Write a checkpoint every this many units; 0 disables periodic saves.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            halve_every: 200,
            total_units: 1000,
            steps_per_unit: 1000,
            batch_size: 16,
            patch_size: 48,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

/// Initialization gain used for desk-scale runs. At gain 1 the untrained
/// network's output is two orders of magnitude off the target range, and a
/// few hundred steps are spent just shrinking it.
pub const DESK_INIT_GAIN: f64 = 0.5;

impl TrainConfig {
    /// 200 steps at batch 16 on 24x24 LR patches; the schedule keeps its
    /// halving shape, compressed to 10 units of 20 steps.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 4e-3,
            halve_every: 5,
            total_units: 10,
            steps_per_unit: 20,
            batch_size: 16,
            patch_size: 24,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
        }
    }

    /// `lr0 · 2^(−⌊unit / halve_every⌋)`.
    pub fn lr(&self, unit: u64) -> f64 {
        let halvings = unit / self.halve_every.max(1);
        self.lr0 * 0.5f64.powi(halvings.min(1024) as i32)
    }

    pub fn total_steps(&self) -> u64 {
        self.total_units * self.steps_per_unit
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if self.halve_every == 0 || self.steps_per_unit == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "halve_every, steps_per_unit, batch_size and patch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), store.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let f = T::from_f64_lossy;
    let (b1, b2, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.eps));
    let c1 = f(1.0 - cfg.beta1.powi(t));
    let c2 = f(1.0 - cfg.beta2.powi(t));
    let lr = f(lr);
    for (i, (name, p)) in store.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", "grad", format!("`{name}`: {} vs {}", g.shape(), p.shape())));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean absolute error between two tensors.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    Ok(tape.l1_loss(&p, &t)?.value().data()[0])
}

/// Forward, L1 loss, backward and one Adam update on a single batch.
/// Returns the loss before the update.
pub fn train_step<T: Real>(
    model: &PmrnModel,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    lr_batch: &Tensor<T>,
    hr_batch: &Tensor<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let x = tape.constant(lr_batch.clone());
    let target = tape.constant(hr_batch.clone());
    let pred = model.forward(&mut tape, &params, &x)?;
    let loss = tape.l1_loss(&pred, &target)?;
    let value = loss.value().data()[0].to_f64().unwrap_or(f64::NAN);
    let mut grads = tape.backward(&loss)?;
    drop(tape);
    let grads: Vec<_> = params
        .iter()
        .map(|p| grads.take(p).expect("bound parameter"))
        .collect();
    adam_step(store, &grads, adam, lr, cfg)?;
    Ok(value)
}

/// Degraded training pairs held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<AlignedPair>,
}

impl Dataset {
    pub fn from_images(images: &[Image], spec: &DegradationSpec) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("dataset", "no training images"));
        }
        let pairs = images
            .iter()
            .map(|img| AlignedPair::from_hr(img, spec))
            .collect::<Result<_>>()?;
        Ok(Dataset { pairs })
    }

    /// Batch of `n` random (optionally augmented) patch pairs as stacked tensors.
    pub fn batch(&self, n: usize, p: usize, augment: bool, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
        let mut lrs = Vec::with_capacity(n);
        let mut hrs = Vec::with_capacity(n);
        for _ in 0..n {
            let src = rng.gen_range(0..self.pairs.len());
            let mut pair = self.pairs[src].random_crop(src, p, rng)?;
            if augment {
                pair = augment_with(&pair, rng);
            }
            lrs.push(pair.lr.to_tensor());
            hrs.push(pair.hr.to_tensor());
        }
        Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
    }
}

/// A held-out image: HR ground truth and its LR input.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub hr: Image,
    pub lr: Image,
}

impl EvalPair {
    pub fn new(name: impl Into<String>, hr: &Image, spec: &DegradationSpec) -> Result<Self> {
        let hr = hr.crop_to_multiple(spec.scale)?;
        let lr = crate::data::degrade(&hr, spec)?;
        Ok(EvalPair {
            name: name.into(),
            hr,
            lr,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Y-channel metrics with `shave = r` for a batch of predictions.
pub fn score(name: &str, pred: &Image, hr: &Image, r: usize) -> Result<EvalRecord> {
    Ok(EvalRecord {
        name: name.to_owned(),
        psnr: psnr_y(pred, hr, r)?,
        ssim: ssim_y(pred, hr, r)?,
    })
}

pub fn super_resolve(model: &PmrnModel, store: &ParamStore, lr: &Image, ensemble: bool) -> Result<Image> {
    let x = lr.to_float().to_tensor();
    let y = if ensemble {
        model.infer_ensemble(store, &x)?
    } else {
        model.infer(store, &x)?
    };
    Ok(FloatImage::from_tensor(&y, 0)?.to_image())
}

pub fn evaluate(model: &PmrnModel, store: &ParamStore, set: &[EvalPair], ensemble: bool) -> Result<Vec<EvalRecord>> {
    let r = model.config.upscale;
    set.iter()
        .map(|p| score(&p.name, &super_resolve(model, store, &p.lr, ensemble)?, &p.hr, r))
        .collect()
}

pub fn evaluate_bicubic(set: &[EvalPair], r: usize) -> Result<Vec<EvalRecord>> {
    set.iter()
        .map(|p| score(&p.name, &bicubic_upscale(&p.lr, r)?, &p.hr, r))
        .collect()
}

pub fn mean_psnr(records: &[EvalRecord]) -> f64 {
    records.iter().map(|r| r.psnr).sum::<f64>() / records.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub unit: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when no validation set was given.
    pub val_psnr: Option<f64>,
}

pub fn history_csv(history: &[MetricRecord]) -> String {
    let mut s = String::from("unit,lr,train_loss,val_psnr\n");
    for r in history {
        let val = r.val_psnr.map(crate::metrics::format_db).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{:.6},{}", r.unit, r.lr, r.train_loss, val);
    }
    s
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: PmrnConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub next_unit: u64,
    pub step: u64,
    pub history: Vec<MetricRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.params.len() * 3);
        for (name, t) in self.params.iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for (i, (name, _)) in self.params.iter().enumerate() {
            tensors.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            tensors.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        let config = serde_json::to_value(self.model_config).expect("config json");
        let extra = json!({
            "train_config": self.train_config,
            "next_unit": self.next_unit,
            "step": self.step,
            "adam_t": self.adam.t,
            "history": self.history,
        });
        weights::write_container(
            path,
            &Container {
                kind: "checkpoint".into(),
                config,
                extra,
                tensors,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |d: String| Error::Format {
            path: path.to_owned(),
            detail: d,
        };
        let c = weights::read_container(path)?;
        if c.kind != "checkpoint" {
            return Err(bad(format!("expected checkpoint, found {}", c.kind)));
        }
        let model_config: PmrnConfig = serde_json::from_value(c.config).map_err(|e| bad(e.to_string()))?;
        #[derive(Deserialize)]
        struct Extra {
            train_config: TrainConfig,
            next_unit: u64,
            step: u64,
            adam_t: u64,
            history: Vec<MetricRecord>,
        }
        let extra: Extra = serde_json::from_value(c.extra).map_err(|e| bad(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in c.tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, t)?;
            } else if name.starts_with("adam.m/") {
                m.push(t);
            } else if name.starts_with("adam.v/") {
                v.push(t);
            } else {
                return Err(bad(format!("unexpected section `{name}`")));
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer state does not match parameters".into()));
        }
        let mut template = ParamStore::new();
        PmrnModel::new(model_config, &mut template)?;
        weights::check_against(path, &params, &template)?;
        Ok(Checkpoint {
            model_config,
            train_config: extra.train_config,
            params,
            adam: AdamState { m, v, t: extra.adam_t },
            next_unit: extra.next_unit,
            step: extra.step,
            history: extra.history,
        })
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    pub model: PmrnModel,
    pub params: ParamStore,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    pub config: TrainConfig,
    pub next_unit: u64,
    pub step: u64,
    pub history: Vec<MetricRecord>,
}

impl Trainer {
    pub fn new(model: PmrnModel, params: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            model,
            params,
            adam,
            adam_config: AdamConfig::default(),
            config,
            next_unit: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut scratch = ParamStore::<f32>::new();
        let model = PmrnModel::new(ckpt.model_config, &mut scratch)?;
        Ok(Trainer {
            model,
            params: ckpt.params,
            adam: ckpt.adam,
            adam_config: AdamConfig::default(),
            config: ckpt.train_config,
            next_unit: ckpt.next_unit,
            step: ckpt.step,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config,
            train_config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            next_unit: self.next_unit,
            step: self.step,
            history: self.history.clone(),
        }
    }

    /// One optimizer step at the current unit's learning rate.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, self.step);
        let (x, y) = data.batch(cfg.batch_size, cfg.patch_size, cfg.augment, &mut rng)?;
        let lr = cfg.lr(self.next_unit);
        let loss = train_step(&self.model, &mut self.params, &mut self.adam, &x, &y, lr, &self.adam_config)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs one unit and appends its metrics.
    pub fn run_unit(&mut self, data: &Dataset, val: &[EvalPair]) -> Result<MetricRecord> {
        let lr = self.config.lr(self.next_unit);
        let mut total = 0.0;
        for _ in 0..self.config.steps_per_unit {
            total += self.step(data)?;
        }
        let val_psnr = if val.is_empty() {
            None
        } else {
            Some(mean_psnr(&evaluate(&self.model, &self.params, val, false)?))
        };
        let record = MetricRecord {
            unit: self.next_unit,
            lr,
            train_loss: total / self.config.steps_per_unit as f64,
            val_psnr,
        };
        self.next_unit += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `total_units`, checkpointing to `ckpt_path` every
    /// `checkpoint_every` units and at the end.
    pub fn run(&mut self, data: &Dataset, val: &[EvalPair], ckpt_path: Option<&Path>) -> Result<()> {
        while self.next_unit < self.config.total_units {
            let rec = self.run_unit(data, val)?;
            log::info!(
                "unit {} lr {:e} loss {:.5} val_psnr {}",
                rec.unit,
                rec.lr,
                rec.train_loss,
                rec.val_psnr.map(crate::metrics::format_db).unwrap_or_else(|| "-".into())
            );
            let every = self.config.checkpoint_every;
            if let Some(path) = ckpt_path {
                if every > 0 && self.next_unit % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = ckpt_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }
}
