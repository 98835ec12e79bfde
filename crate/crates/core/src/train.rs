//! Training loop, checkpoint conversion, evaluation, and cross-validation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::ForwardStats;
use crate::config::{parse_bool, parse_kv, parse_list, parse_value, Entry};
use crate::data::{random_crop, random_flip, sample_seed, stack, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, EvalReport, SampleEval};
use crate::model::{
    compute_losses, discriminator_loss, gradnorm_update, load_checkpoint, save_checkpoint, Checkpoint, DualTaskModel,
    ModelConfig, TaskWeights,
};
use crate::nn::ParamStore;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    /// Adjust task weights dynamically; otherwise both stay at 1.
    pub gradnorm: bool,
    /// Crop extents; `None` uses the model input extents.
    pub crop: Option<Vec<usize>>,
    /// Random paired flips/transposes of each training sample.
    pub augment: bool,
    /// Steps between validation passes for best-checkpoint selection (0 disables).
    pub val_every: usize,
    /// Linear warmup length; the rate then follows a cosine from `lr` down
    /// to `lr * lr_floor` at the final step.
    pub warmup: usize,
    pub cosine: bool,
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            disc_lr: 1e-4,
            seed: 0,
            gradnorm: true,
            crop: None,
            augment: false,
            val_every: 250,
            warmup: 100,
            cosine: true,
            lr_floor: 0.01,
        }
    }
}

impl TrainConfig {
    /// Applies one entry; returns `false` if the key is not a training key.
    pub fn set(&mut self, key: &str, e: &Entry) -> Result<bool> {
        match key {
            "steps" => self.steps = parse_value(e)?,
            "batch_size" => self.batch_size = parse_value(e)?,
            "lr" => self.lr = parse_value(e)?,
            "disc_lr" => self.disc_lr = parse_value(e)?,
            "seed" => self.seed = parse_value(e)?,
            "gradnorm" => self.gradnorm = parse_bool(e)?,
            "crop" => self.crop = Some(parse_list(e)?),
            "augment" => self.augment = parse_bool(e)?,
            "val_every" => self.val_every = parse_value(e)?,
            "warmup" => self.warmup = parse_value(e)?,
            "cosine" => self.cosine = parse_bool(e)?,
            "lr_floor" => self.lr_floor = parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::Config("batch_size, lr and disc_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("lr_floor {} outside [0, 1]", self.lr_floor)));
        }
        Ok(())
    }

    /// Multiplier on the base learning rates for the update at `step` (0-based).
    pub fn lr_scale(&self, step: usize) -> f64 {
        if step < self.warmup {
            return (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine || self.steps <= self.warmup + 1 {
            return 1.0;
        }
        let t = ((step - self.warmup) as f64 / (self.steps - self.warmup - 1) as f64).min(1.0);
        self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Everything recorded about one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub gen: f64,
    pub cls: f64,
    pub l1: f64,
    pub adv: f64,
    pub disc: f64,
    pub w_gen: f64,
    pub w_cls: f64,
    /// Unweighted gradient norms of each task loss on the shared layer.
    pub grad_norm_gen: f64,
    pub grad_norm_cls: f64,
}

impl StepRecord {
    /// One tab-separated log line (no trailing newline).
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.9}\t{:.9}\t{:.6e}\t{:.6e}",
            self.step,
            self.total,
            self.gen,
            self.cls,
            self.l1,
            self.adv,
            self.disc,
            self.w_gen,
            self.w_cls,
            self.grad_norm_gen,
            self.grad_norm_cls
        )
    }
}

pub const LOG_COLUMNS: &[&str] =
    &["step", "total", "gen", "cls", "l1", "adv", "disc", "w_gen", "w_cls", "grad_norm_gen", "grad_norm_cls"];

/// A batch of aligned scans.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub initial: Tensor<f32>,
    pub followup: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Model, optimizer states, and task weights.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DualTaskModel<f32>,
    pub adam: AdamState<f32>,
    pub disc_adam: AdamState<f32>,
    pub weights: TaskWeights,
    /// Completed steps.
    pub step: usize,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DualTaskModel::new(model_cfg, cfg.seed)?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: DualTaskModel<f32>, cfg: TrainConfig) -> Self {
        let adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.params.tensors());
        let disc_adam =
            AdamState::new(AdamConfig { lr: cfg.disc_lr, ..AdamConfig::default() }, model.disc_params.tensors());
        Trainer { model, adam, disc_adam, weights: TaskWeights::default(), step: 0, cfg }
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed ^ 0x5EED_5EED, step))
    }

    /// Draws the batch used at `step` from `pool` (sample indices into `data`).
    pub fn batch_for_step(&self, data: &Dataset, pool: &[usize], step: usize) -> Result<Batch> {
        if pool.is_empty() {
            return Err(Error::invalid("empty training pool"));
        }
        let mut rng = self.step_rng(step);
        let b = self.cfg.batch_size.min(pool.len());
        let picks = sample(&mut rng, pool.len(), b);
        let crop = self.cfg.crop.clone().unwrap_or_else(|| self.model.cfg.input.clone());
        let mut pairs = Vec::with_capacity(b);
        for i in picks.iter() {
            let mut pair = random_crop(&data.pairs[pool[i]], &crop, rng.random())?;
            if self.cfg.augment {
                pair = random_flip(&pair, rng.random())?;
            }
            pairs.push(pair);
        }
        make_batch(&pairs.iter().collect::<Vec<_>>())
    }

    /// One generator update (with GradNorm) followed by one discriminator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step;
        let mut rng = self.step_rng(step);
        let cfg = &self.model.cfg;
        let adv_weight = cfg.adv_weight;
        let w = self.weights.w;

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let dp = self.model.disc_params.bind(&mut g, false);
        let x = g.constant(batch.initial.clone());
        let y = g.constant(batch.followup.clone());
        let mut stats = ForwardStats::training(ChaCha8Rng::seed_from_u64(rng.random()));
        let out = self.model.forward(&mut g, &p, x, &mut stats)?;
        let fake_logits =
            if adv_weight > 0.0 { Some(self.model.discriminate(&mut g, &dp, out.scan, &mut stats)?) } else { None };
        let losses = compute_losses(&mut g, out.scan, y, out.probs, &batch.labels, fake_logits, adv_weight, w)?;
        let val = |v| g.value(v).item() as f64;
        let (total, gen, cls, l1) = (val(losses.total), val(losses.gen), val(losses.cls), val(losses.l1));
        let adv = losses.adv.map_or(0.0, val);
        if ![total, gen, cls].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step, batch: batch.ids.clone() });
        }

        let shared = self.model.shared_last_layer().index();
        let (grads, norms) = if self.cfg.gradnorm {
            g.backward(losses.gen)?;
            let g_gen = p.grads(&g)?;
            g.reset_grads();
            g.backward(losses.cls)?;
            let g_cls = p.grads(&g)?;
            let norms = [g_gen[shared].norm_l2(), g_cls[shared].norm_l2()];
            let (a, b) = (w[0] as f32, w[1] as f32);
            let combined = g_gen
                .into_iter()
                .zip(g_cls)
                .map(|(gg, gc)| {
                    let data = gg.data().iter().zip(gc.data()).map(|(&u, &v)| a * u + b * v).collect();
                    Tensor::new(gg.shape().to_vec(), data).unwrap()
                })
                .collect::<Vec<_>>();
            (combined, norms)
        } else {
            g.backward(losses.total)?;
            (p.grads(&g)?, [f64::NAN, f64::NAN])
        };
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { step, batch: batch.ids.clone() });
        }
        let scale = self.cfg.lr_scale(step);
        self.adam.config.lr = self.cfg.lr * scale;
        self.disc_adam.config.lr = self.cfg.disc_lr * scale;
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam)?;
        if self.cfg.gradnorm {
            gradnorm_update(&mut self.weights, norms, [gen, cls], cfg.gradnorm_alpha, cfg.gradnorm_lr)?;
        }

        let pred = g.value(out.scan).clone();
        drop(g);
        let disc = if adv_weight > 0.0 { self.disc_step(&pred, &batch.followup, &mut rng)? } else { 0.0 };
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            total,
            gen,
            cls,
            l1,
            adv,
            disc,
            w_gen: self.weights.w[0],
            w_cls: self.weights.w[1],
            grad_norm_gen: norms[0],
            grad_norm_cls: norms[1],
        })
    }

    fn disc_step(&mut self, fake: &Tensor<f32>, real: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let dp = self.model.disc_params.bind(&mut g, true);
        let f = g.constant(fake.clone());
        let r = g.constant(real.clone());
        let mut stats = ForwardStats::training(ChaCha8Rng::seed_from_u64(rng.random()));
        let lf = self.model.discriminate(&mut g, &dp, f, &mut stats)?;
        let lr = self.model.discriminate(&mut g, &dp, r, &mut stats)?;
        let loss = discriminator_loss(&mut g, lr, lf)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step: self.step, batch: vec!["discriminator".into()] });
        }
        g.backward(loss)?;
        let grads = dp.grads(&g)?;
        adam_step(self.model.disc_params.tensors_mut(), &grads, &mut self.disc_adam)?;
        Ok(value)
    }

    /// Unweighted `gen + cls` loss over `indices` without dropout or updates.
    pub fn validation_loss(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in indices.chunks(self.cfg.batch_size.max(1)) {
            let pairs: Vec<_> = chunk.iter().map(|&i| &data.pairs[i]).collect();
            let batch = make_batch(&pairs)?;
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g, false);
            let x = g.constant(batch.initial);
            let y = g.constant(batch.followup);
            let out = self.model.forward(&mut g, &p, x, &mut ForwardStats::default())?;
            let l = compute_losses(&mut g, out.scan, y, out.probs, &batch.labels, None, 0.0, [1.0, 1.0])?;
            total += g.value(l.total).item() as f64 * chunk.len() as f64;
        }
        Ok(total / indices.len().max(1) as f64)
    }

    /// Runs the remaining steps on `train`, calling `on_step` after each.
    /// Every `val_every` steps (and at the end) `on_val` receives the
    /// validation loss on `val`, if any.
    pub fn run(
        &mut self,
        data: &Dataset,
        train: &[usize],
        val: &[usize],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
        mut on_val: impl FnMut(&Trainer, f64) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let batch = self.batch_for_step(data, train, self.step)?;
            let rec = self.train_step(&batch)?;
            on_step(&rec)?;
            let due = self.cfg.val_every > 0 && self.step.is_multiple_of(self.cfg.val_every);
            if !val.is_empty() && (due || self.step == self.cfg.steps) {
                let v = self.validation_loss(data, val)?;
                on_val(self, v)?;
            }
        }
        Ok(())
    }

    /// Parameters, optimizer moments, and trainer state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        push_store(&mut tensors, "param", &self.model.params, None);
        push_store(&mut tensors, "disc", &self.model.disc_params, None);
        push_store(&mut tensors, "adam.m", &self.model.params, Some(&self.adam.m));
        push_store(&mut tensors, "adam.v", &self.model.params, Some(&self.adam.v));
        push_store(&mut tensors, "disc_adam.m", &self.model.disc_params, Some(&self.disc_adam.m));
        push_store(&mut tensors, "disc_adam.v", &self.model.disc_params, Some(&self.disc_adam.v));
        let l0 = self.weights.initial_loss;
        let state = [
            self.step as u64,
            self.adam.step,
            self.disc_adam.step,
            self.weights.w[0].to_bits(),
            self.weights.w[1].to_bits(),
            l0.is_some() as u64,
            l0.map_or(0, |l| l[0].to_bits()),
            l0.map_or(0, |l| l[1].to_bits()),
        ];
        tensors.push(("train.state".to_string(), encode_u64s(&state)));
        Checkpoint { config_text: self.model.cfg.to_text(), tensors }
    }

    /// Restores a trainer saved by [`Trainer::to_checkpoint`]. Optimizer
    /// state is optional, so parameter-only checkpoints load as a fresh trainer.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut t = Trainer::from_model(model, cfg);
        if let Some(state) = ck.get("train.state") {
            let s = decode_u64s(state)?;
            if s.len() != 8 {
                return Err(Error::Format("train.state has the wrong length".into()));
            }
            load_store(ck, "adam.m", &t.model.params, &mut t.adam.m)?;
            load_store(ck, "adam.v", &t.model.params, &mut t.adam.v)?;
            load_store(ck, "disc_adam.m", &t.model.disc_params, &mut t.disc_adam.m)?;
            load_store(ck, "disc_adam.v", &t.model.disc_params, &mut t.disc_adam.v)?;
            t.step = s[0] as usize;
            t.adam.step = s[1];
            t.disc_adam.step = s[2];
            t.weights.w = [f64::from_bits(s[3]), f64::from_bits(s[4])];
            t.weights.initial_loss = (s[5] == 1).then(|| [f64::from_bits(s[6]), f64::from_bits(s[7])]);
        }
        Ok(t)
    }
}

pub fn make_batch(pairs: &[&crate::data::VolumePair]) -> Result<Batch> {
    Ok(Batch {
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        initial: stack(&pairs.iter().map(|p| &p.initial).collect::<Vec<_>>())?,
        followup: stack(&pairs.iter().map(|p| &p.followup).collect::<Vec<_>>())?,
        labels: pairs.iter().map(|p| p.label).collect(),
    })
}

fn push_store(
    out: &mut Vec<(String, Tensor<f32>)>,
    prefix: &str,
    store: &ParamStore<f32>,
    values: Option<&[Tensor<f32>]>,
) {
    let values = values.unwrap_or(store.tensors());
    for (name, t) in store.names().iter().zip(values) {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn load_store(ck: &Checkpoint, prefix: &str, store: &ParamStore<f32>, dst: &mut [Tensor<f32>]) -> Result<()> {
    for (i, name) in store.names().iter().enumerate() {
        let key = format!("{prefix}/{name}");
        let t = ck.get(&key).ok_or_else(|| Error::Config(format!("checkpoint lacks {key}")))?;
        if t.shape() != dst[i].shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {key} has shape {:?}, the configured model expects {:?}",
                t.shape(),
                dst[i].shape()
            )));
        }
        dst[i] = t.clone();
    }
    Ok(())
}

/// Each `u64` as four 16-bit limbs, stored exactly as small `f32` integers.
fn encode_u64s(v: &[u64]) -> Tensor<f32> {
    let data = v.iter().flat_map(|&x| (0..4).map(move |k| ((x >> (16 * k)) & 0xFFFF) as f32)).collect();
    Tensor::new([4 * v.len()], data).unwrap()
}

fn decode_u64s(t: &Tensor<f32>) -> Result<Vec<u64>> {
    if !t.numel().is_multiple_of(4) {
        return Err(Error::Format("packed integer tensor has a partial limb group".into()));
    }
    t.data()
        .chunks_exact(4)
        .map(|c| {
            c.iter().enumerate().try_fold(0u64, |acc, (k, &limb)| {
                if limb.fract() != 0.0 || !(0.0..65536.0).contains(&limb) {
                    return Err(Error::Format(format!("bad packed limb {limb}")));
                }
                Ok(acc | ((limb as u64) << (16 * k)))
            })
        })
        .collect()
}

/// Rebuilds the model described by the embedded config and loads its
/// parameters; any missing or mis-shaped tensor is a config mismatch.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<DualTaskModel<f32>> {
    let cfg = ModelConfig::from_text(&ck.config_text)?;
    let mut model = DualTaskModel::new(cfg, 0)?;
    let mut params = model.params.tensors().to_vec();
    load_store(ck, "param", &model.params, &mut params)?;
    model.params.tensors_mut().clone_from_slice(&params);
    let mut disc = model.disc_params.tensors().to_vec();
    load_store(ck, "disc", &model.disc_params, &mut disc)?;
    model.disc_params.tensors_mut().clone_from_slice(&disc);
    Ok(model)
}

/// Loads a checkpoint and checks it against an expected model config.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<DualTaskModel<f32>> {
    let ck = load_checkpoint(path)?;
    let model = model_from_checkpoint(&ck)?;
    if let Some(e) = expected {
        if &model.cfg != e {
            return Err(Error::Config(format!(
                "{} was trained with a different model config:\n{}",
                path.display(),
                config_diff(e, &model.cfg)
            )));
        }
    }
    Ok(model)
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (ta, tb) = (a.to_text(), b.to_text());
    ta.lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("  expected {x}, checkpoint has {y}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Evaluates every sample in `indices` (no cropping).
pub fn evaluate(
    model: &DualTaskModel<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<SampleEval>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|&i| &data.pairs[i]).collect();
        let batch = make_batch(&pairs)?;
        let (scan, probs) = model.predict(&batch.initial)?;
        let k = model.cfg.num_classes;
        let vox = scan.numel() / chunk.len();
        for (j, &i) in chunk.iter().enumerate() {
            let pred =
                Tensor::new(data.pairs[i].followup.shape().to_vec(), scan.data()[j * vox..(j + 1) * vox].to_vec())?;
            let target = &data.pairs[i].followup;
            let row = &probs.data()[j * k..(j + 1) * k];
            let predicted = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            out.push(SampleEval {
                id: data.pairs[i].id.clone(),
                fold: data.entries[i].fold,
                label: data.pairs[i].label,
                predicted,
                score: row.get(1).copied().unwrap_or(0.0) as f64,
                psnr: psnr(&pred, target, 1.0)?,
                ssim: ssim(&pred, target)?,
            });
        }
    }
    Ok(out)
}

/// Stratified hold-out of roughly `fraction` of `pool` for validation.
pub fn carve_validation(data: &Dataset, pool: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut classes: Vec<usize> = pool.iter().map(|&i| data.pairs[i].label).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut members: Vec<usize> = pool.iter().copied().filter(|&i| data.pairs[i].label == c).collect();
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut rng);
        let n_val = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Where one fold's artifacts go.
#[derive(Clone, Debug)]
pub struct FoldPaths {
    pub log: PathBuf,
    pub final_ckpt: PathBuf,
    pub best_ckpt: PathBuf,
}

impl FoldPaths {
    pub fn new(dir: &Path, fold: usize) -> Self {
        FoldPaths {
            log: dir.join(format!("fold{fold}.log.tsv")),
            final_ckpt: dir.join(format!("fold{fold}.final.ckpt")),
            best_ckpt: dir.join(format!("fold{fold}.best.ckpt")),
        }
    }
}

/// Trains on `train` with a log file and final/best checkpoints. Returns
/// the trainer after the last step and the model with the lowest
/// validation loss (the final model when `val` is empty).
pub fn train_with_artifacts(
    trainer: &mut Trainer,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    paths: &FoldPaths,
    append_log: bool,
    mut progress: impl FnMut(&StepRecord),
) -> Result<DualTaskModel<f32>> {
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append_log)
        .truncate(!append_log)
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut best: Option<(f64, DualTaskModel<f32>)> = None;
    trainer.run(
        data,
        train,
        val,
        |rec| {
            writeln!(log, "{}", rec.to_tsv()).map_err(|e| Error::io(&paths.log, e))?;
            progress(rec);
            Ok(())
        },
        |t, v| {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                save_checkpoint(&paths.best_ckpt, &t.to_checkpoint())?;
                best = Some((v, t.model.clone()));
            }
            Ok(())
        },
    )?;
    log.flush().map_err(|e| Error::io(&paths.log, e))?;
    save_checkpoint(&paths.final_ckpt, &trainer.to_checkpoint())?;
    Ok(match best {
        Some((_, m)) => m,
        None => {
            save_checkpoint(&paths.best_ckpt, &trainer.to_checkpoint())?;
            trainer.model.clone()
        }
    })
}

/// Result of k-fold cross-validation.
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: EvalReport,
    pub samples: Vec<SampleEval>,
}

/// Trains the model for one fold (optionally resuming from `resume`) and
/// evaluates its best checkpoint on the held-out samples.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    fold: usize,
    out_dir: &Path,
    val_fraction: f64,
    resume: Option<&Checkpoint>,
    progress: impl FnMut(&StepRecord),
) -> Result<Vec<SampleEval>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (pool, test) = data.split(fold);
    if test.is_empty() || pool.is_empty() {
        return Err(Error::invalid(format!("fold {fold} leaves an empty train or test set")));
    }
    let seed = sample_seed(train_cfg.seed, fold);
    let (train, val) = carve_validation(data, &pool, val_fraction, seed);
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let mut trainer = match resume {
        Some(ck) => {
            let t = Trainer::from_checkpoint(ck, cfg)?;
            if &t.model.cfg != model_cfg {
                return Err(Error::Config(format!(
                    "resume checkpoint was trained with a different model config:\n{}",
                    config_diff(model_cfg, &t.model.cfg)
                )));
            }
            t
        }
        None => Trainer::new(model_cfg.clone(), cfg)?,
    };
    let paths = FoldPaths::new(out_dir, fold);
    let best = train_with_artifacts(&mut trainer, data, &train, &val, &paths, resume.is_some(), progress)?;
    evaluate(&best, data, &test, train_cfg.batch_size)
}

/// Trains one model per fold in `folds` and evaluates each on its held-out fold.
pub fn cross_validate(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    folds: &[usize],
    out_dir: &Path,
    val_fraction: f64,
    mut progress: impl FnMut(usize, &StepRecord),
) -> Result<CvOutcome> {
    let mut samples = Vec::new();
    for &fold in folds {
        samples
            .extend(train_fold(data, model_cfg, train_cfg, fold, out_dir, val_fraction, None, |r| progress(fold, r))?);
    }
    let report = EvalReport::from_samples(&samples)?;
    Ok(CvOutcome { report, samples })
}

/// Parses a run file: model keys and training keys may be mixed; keys
/// listed in `extra` are returned to the caller untouched.
pub fn parse_run_config(
    text: &str,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    extra: &[&str],
) -> Result<Vec<Entry>> {
    let mut rest = Vec::new();
    for e in parse_kv(text)? {
        if model.set(&e.key, &e)? || train.set(&e.key, &e)? {
            continue;
        }
        if extra.contains(&e.key.as_str()) {
            rest.push(e);
        } else {
            return Err(Error::Config(format!("line {}: unknown key {:?}", e.line, e.key)));
        }
    }
    Ok(rest)
}
