//! Optimization loop shared by the denoiser, the final decoder and the VAE.
//!
//! Learning rate drops by `plateau_factor` whenever validation loss has not
//! improved for `patience` epochs. The best validation checkpoint is kept.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::write_atomic;
use crate::diffusion::{masked_loss, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::layers::masked_bce_with_logits;
use crate::model::vae::vae_loss;
use crate::model::{Checkpoint, DecoderConfig, Denoiser, DenoiserConfig, FinalDecoder, ModelKind, Vae};
use crate::phrase::Phrase;
use crate::roll::{mixture_from_roll, stack_masks, stack_rolls, Mixture};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_seed: u64,
    pub kl_weight: f64,
    pub kl_warmup_epochs: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Stops after the epoch during which this many seconds have elapsed.
    pub max_seconds: Option<f64>,
    pub denoiser: DenoiserConfig,
    pub decoder: DecoderConfig,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            plateau_factor: 0.9,
            patience: 1,
            grad_clip: 1.0,
            seed: 0,
            eval_seed: 1234,
            kl_weight: 1.0,
            kl_warmup_epochs: 1,
            schedule_steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            max_seconds: None,
            denoiser: DenoiserConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    /// Parses `key = value` lines. `preset = default | small` picks the
    /// architecture before individual architecture keys override it.
    pub fn parse(kind: ModelKind, text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::new(kind);
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(epochs);
        field!(batch_size);
        field!(learning_rate);
        field!(weight_decay);
        field!(beta1);
        field!(beta2);
        field!(plateau_factor);
        field!(patience);
        field!(grad_clip);
        field!(seed);
        field!(eval_seed);
        field!(kl_weight);
        field!(kl_warmup_epochs);
        field!(schedule_steps);
        field!(beta_start);
        field!(beta_end);
        cfg.max_seconds = kv.take("max_seconds")?;
        match kv.take::<String>("preset")?.as_deref() {
            None | Some("default") => {}
            Some("small") => {
                cfg.denoiser = DenoiserConfig::small();
                cfg.decoder = DecoderConfig::small();
            }
            Some(other) => return Err(Error::config(format!("unknown preset `{other}`"))),
        }
        match kind {
            ModelKind::Decoder => cfg.decoder.apply(&mut kv)?,
            ModelKind::Ddpm | ModelKind::Vae => cfg.denoiser.apply(&mut kv)?,
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must be in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        self.schedule()?;
        self.denoiser.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }
}

/// Uniform steps in `[1, steps]`.
pub fn sample_timesteps(rng: &mut impl Rng, n: usize, steps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=steps)).collect()
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Clean rolls `(B,T,P,C)` and their mixture masks `(B,T,P,1)`.
pub struct Batch {
    pub y0: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn from_phrases(phrases: &[&Phrase], dtype: DType, device: &Device) -> Result<Self> {
        let rolls: Vec<_> = phrases.iter().map(|p| &p.roll).collect();
        let mixtures: Vec<Mixture> = rolls.iter().map(|r| mixture_from_roll(r)).collect();
        let refs: Vec<&Mixture> = mixtures.iter().collect();
        Ok(Self {
            y0: stack_rolls(&rolls, dtype, device)?,
            mask: stack_masks(&refs, dtype, device)?,
        })
    }

    pub fn len(&self) -> usize {
        self.y0.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum TrainedModel {
    Ddpm(Denoiser),
    Vae(Vae),
    Decoder(FinalDecoder),
}

impl TrainedModel {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::Ddpm => {
                let mut den = Denoiser::new(&cfg.denoiser, cfg.seed, dtype, device)?;
                den.schedule = cfg.schedule()?;
                TrainedModel::Ddpm(den)
            }
            ModelKind::Vae => TrainedModel::Vae(Vae::new(&cfg.denoiser, cfg.seed, dtype, device)?),
            ModelKind::Decoder => {
                TrainedModel::Decoder(FinalDecoder::new(&cfg.decoder, cfg.seed, dtype, device)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Ddpm(_) => ModelKind::Ddpm,
            TrainedModel::Vae(_) => ModelKind::Vae,
            TrainedModel::Decoder(_) => ModelKind::Decoder,
        }
    }

    pub fn vars(&self) -> &VarMap {
        match self {
            TrainedModel::Ddpm(m) => &m.vars,
            TrainedModel::Vae(m) => &m.vars,
            TrainedModel::Decoder(m) => &m.vars,
        }
    }

    pub fn config_text(&self) -> String {
        match self {
            TrainedModel::Ddpm(m) => m.config_text(),
            TrainedModel::Vae(m) => m.net.config().to_text(),
            TrainedModel::Decoder(m) => m.net.config().to_text(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_vars(self.kind(), self.config_text(), self.vars())
    }

    /// Rebuilds a model from a checkpoint. Decoders come back marked trained.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let model = match ck.kind {
            ModelKind::Ddpm => {
                let (config, schedule) = Denoiser::parse_config(&ck.config)?;
                let mut den = Denoiser::new(&config, 0, dtype, device)?;
                den.schedule = schedule;
                TrainedModel::Ddpm(den)
            }
            ModelKind::Vae => TrainedModel::Vae(Vae::new(&DenoiserConfig::from_text(&ck.config)?, 0, dtype, device)?),
            ModelKind::Decoder => {
                let mut dec = FinalDecoder::new(&DecoderConfig::from_text(&ck.config)?, 0, dtype, device)?;
                dec.mark_trained();
                TrainedModel::Decoder(dec)
            }
        };
        ck.restore(model.vars())?;
        Ok(model)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dtype, device)
    }

    /// Loss of one batch. `kl_weight` only affects the VAE.
    pub fn batch_loss(
        &self,
        batch: &Batch,
        sched: &NoiseSchedule,
        kl_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let b = batch.len();
        let dims = batch.y0.dims().to_vec();
        let (dtype, device) = (batch.y0.dtype(), batch.y0.device());
        match self {
            TrainedModel::Ddpm(m) => {
                let t = sample_timesteps(rng, b, sched.steps());
                let eps = gaussian(rng, &dims, dtype, device)?;
                masked_loss(m, &batch.y0, &batch.mask, &t, &eps, sched)
            }
            TrainedModel::Decoder(m) => {
                let eps = gaussian(rng, &dims, dtype, device)?;
                let y1 = q_sample(&batch.y0, 1, &eps, sched)?.values.broadcast_mul(&batch.mask)?;
                masked_bce_with_logits(&m.net.forward(&y1)?, &batch.y0, &batch.mask)
            }
            TrainedModel::Vae(m) => {
                let mut shape = vec![b];
                shape.extend_from_slice(&m.net.latent_shape());
                let zeta = gaussian(rng, &shape, dtype, device)?;
                Ok(vae_loss(&m.net, &batch.mask, &batch.y0, &zeta, kl_weight)?.total)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.valid_loss, r.lr));
        }
        out
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }
}

/// Reduce-on-plateau learning rate rule.
#[derive(Debug, Clone)]
pub struct Plateau {
    factor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns `(improved, next_lr)`.
    pub fn observe(&mut self, valid_loss: f64, lr: f64) -> (bool, f64) {
        if valid_loss < self.best {
            self.best = valid_loss;
            self.stale = 0;
            return (true, lr);
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            (false, lr * self.factor)
        } else {
            (false, lr)
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &VarMap, max_norm: f64) -> Result<f64> {
    let vars = vars.all_vars();
    let mut total = 0.0;
    for v in &vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for v in &vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Mean loss over `phrases` with a fixed noise seed.
pub fn validate(model: &TrainedModel, phrases: &[Phrase], cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<f64> {
    if phrases.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let sched = cfg.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    let mut sum = 0.0;
    for chunk in phrases.chunks(cfg.batch_size) {
        let refs: Vec<&Phrase> = chunk.iter().collect();
        let batch = Batch::from_phrases(&refs, dtype, device)?;
        let loss = scalar(&model.batch_loss(&batch, &sched, cfg.kl_weight, &mut rng)?)?;
        sum += loss * chunk.len() as f64;
    }
    Ok(sum / phrases.len() as f64)
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: TrainReport,
}

/// Trains `cfg.kind` on `train`, validating on `valid` after every epoch.
/// With `out_dir`, the best checkpoint and the CSV report are written there.
/// The returned model holds the best-epoch parameters.
pub fn train(train: &[Phrase], valid: &[Phrase], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if valid.is_empty() {
        return Err(Error::config("validation split is empty"));
    }
    let (dtype, device) = (DType::F32, Device::Cpu);
    let model = TrainedModel::new(cfg, dtype, &device)?;
    let sched = cfg.schedule()?;
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::new(model.vars().all_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.patience);
    let mut report = TrainReport {
        best_valid_loss: f64::INFINITY,
        ..TrainReport::default()
    };
    let best_path = out_dir.map(|d| d.join(format!("{}-best.ckpt", cfg.kind)));
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let warmup_batches = (cfg.kl_warmup_epochs * batches_per_epoch).max(1);
    let mut global_batch = 0usize;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let lr = opt.learning_rate();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Phrase> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_phrases(&refs, dtype, &device)?;
            let kl_weight = if cfg.kl_warmup_epochs == 0 {
                cfg.kl_weight
            } else {
                cfg.kl_weight * ((global_batch + 1) as f64 / warmup_batches as f64).min(1.0)
            };
            let loss = model.batch_loss(&batch, &sched, kl_weight, &mut rng)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(fault(epoch, format!("non-finite training loss {value}"), &best_path, &best));
            }
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, model.vars(), cfg.grad_clip)?;
            opt.step(&grads)?;
            sum += value * chunk.len() as f64;
            global_batch += 1;
        }
        let train_loss = sum / train.len() as f64;
        let valid_loss = validate(&model, valid, cfg, dtype, &device)?;
        if !valid_loss.is_finite() {
            return Err(fault(epoch, format!("non-finite validation loss {valid_loss}"), &best_path, &best));
        }
        let (improved, next_lr) = plateau.observe(valid_loss, lr);
        if improved {
            let ck = model.checkpoint()?;
            if let Some(path) = &best_path {
                ck.save(path)?;
                if !report.checkpoints.contains(path) {
                    report.checkpoints.push(path.clone());
                }
            }
            best = Some(ck);
            report.best_epoch = epoch;
            report.best_valid_loss = valid_loss;
        }
        opt.set_learning_rate(next_lr);
        let seconds = epoch_start.elapsed().as_secs_f64();
        info!(
            "{} epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6} lr {lr:.3e} ({seconds:.1}s)",
            cfg.kind
        );
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
            seconds,
        });
        if let Some(dir) = out_dir {
            write_atomic(&dir.join(format!("{}-report.csv", cfg.kind)), report.to_csv().as_bytes())?;
        }
        if cfg.max_seconds.is_some_and(|limit| started.elapsed().as_secs_f64() >= limit) {
            break;
        }
    }
    if let Some(ck) = &best {
        ck.restore(model.vars())?;
    }
    let model = match model {
        TrainedModel::Decoder(mut d) => {
            d.mark_trained();
            TrainedModel::Decoder(d)
        }
        other => other,
    };
    Ok(TrainOutcome { model, report })
}

fn fault(epoch: usize, message: String, best_path: &Option<PathBuf>, best: &Option<Checkpoint>) -> Error {
    Error::TrainingFault {
        epoch,
        message,
        last_checkpoint: best.as_ref().and(best_path.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let cfg = TrainConfig::parse(ModelKind::Ddpm, "epochs = 3\npreset = small\nheads = 2\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.denoiser.heads, 2);
        assert_eq!(cfg.denoiser.stem_width, 16);
        let err = TrainConfig::parse(ModelKind::Ddpm, "epochs = 3\nlearning_rat = 1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(TrainConfig::parse(ModelKind::Ddpm, "epochs = 0").is_err());
        assert!(TrainConfig::parse(ModelKind::Ddpm, "plateau_factor = 1.0").is_err());
        assert!(TrainConfig::parse(ModelKind::Decoder, "width = 8\ngroups = 4").is_ok());
        assert!(TrainConfig::parse(ModelKind::Decoder, "heads = 8").is_err());
    }

    #[test]
    fn plateau_reduces_once_per_stale_run() {
        let mut p = Plateau::new(0.9, 1);
        let (improved, lr) = p.observe(1.0, 1e-3);
        assert!(improved);
        assert_eq!(lr, 1e-3);
        let (improved, lr) = p.observe(1.0, lr);
        assert!(!improved);
        assert_eq!(lr, 1e-3 * 0.9);

        let mut p = Plateau::new(0.9, 3);
        let mut lr = 1.0;
        let mut events = 0;
        for loss in [2.0, 2.0, 2.0, 2.0, 1.0] {
            let (_, next) = p.observe(loss, lr);
            if next != lr {
                events += 1;
            }
            lr = next;
        }
        assert_eq!(events, 1);
    }

    #[test]
    fn timesteps_cover_deciles_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_timesteps(&mut rng, 100_000, 1000);
        assert!(t.iter().all(|&s| (1..=1000).contains(&s)));
        let mut deciles = [0usize; 10];
        for s in t {
            deciles[(s - 1) / 100] += 1;
        }
        for d in deciles {
            assert!((9_000..=11_000).contains(&d), "{deciles:?}");
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let vm = VarMap::new();
        let a = vm.get(3, "a", candle_nn::Init::Const(1.0), DType::F64, &Device::Cpu).unwrap();
        let loss = (a.sqr().unwrap().sum_all().unwrap() * 10.0).unwrap();
        let mut grads = loss.backward().unwrap();
        let before = clip_gradients(&mut grads, &vm, 1.0).unwrap();
        assert!((before - 20.0 * 3f64.sqrt()).abs() < 1e-9);
        let g = grads.get(&a).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((g.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ddpm_checkpoint_keeps_its_schedule() {
        let mut cfg = TrainConfig::new(ModelKind::Ddpm);
        cfg.denoiser = DenoiserConfig::tiny(8, 8, 5);
        cfg.schedule_steps = 40;
        cfg.beta_start = 3e-4;
        cfg.beta_end = 0.05;
        let model = TrainedModel::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let back = TrainedModel::from_checkpoint(&model.checkpoint().unwrap(), DType::F32, &Device::Cpu).unwrap();
        let TrainedModel::Ddpm(den) = back else { panic!("wrong kind") };
        assert_eq!(den.schedule, cfg.schedule().unwrap());
        assert_eq!(den.net.config(), &cfg.denoiser);
    }
}
