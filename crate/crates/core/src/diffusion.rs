//! Mask-conditioned Gaussian diffusion over pianorolls.
//!
//! All tensors use the `(batch, time, pitch, instrument)` layout. The mixture
//! mask has shape `(batch, time, pitch, 1)` and broadcasts over instruments.
//! The mask multiplies the denoiser input, the regression target, the initial
//! noise and the result of every reverse step, so an instrument can only be
//! active where the mixture is.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::roll::{stack_masks, Mixture, Pianoroll};

/// Predicts the noise that was added to a masked noisy sample.
pub trait NoisePredictor {
    /// `y` has shape `(batch, time, pitch, channels)`; `t` holds one diffusion
    /// step per batch row. Returns a tensor shaped like `y`.
    fn predict_noise(&self, y: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Maps a `t = 1` sample to per-cell logits of the clean roll.
pub trait ProbabilityDecoder {
    fn logits(&self, y1: &Tensor) -> Result<Tensor>;
    fn is_trained(&self) -> bool;
}

/// Linear beta schedule with cached cumulative products. Steps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// `beta` interpolates linearly from `beta_start` at `t = 1` to
    /// `beta_end` at `t = steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alpha_bars,
            beta_start,
            beta_end,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `key = value` lines that rebuild this schedule through [`Self::from_kv`].
    pub fn to_text(&self) -> String {
        format!(
            "schedule_steps = {}\nbeta_start = {}\nbeta_end = {}\n",
            self.steps(),
            self.beta_start,
            self.beta_end
        )
    }

    /// Consumes the schedule keys of `kv`; missing keys take the defaults.
    pub fn from_kv(kv: &mut crate::kv::KeyValues) -> Result<Self> {
        Self::linear(
            kv.take("schedule_steps")?.unwrap_or(DEFAULT_STEPS),
            kv.take("beta_start")?.unwrap_or(DEFAULT_BETA_START),
            kv.take("beta_end")?.unwrap_or(DEFAULT_BETA_END),
        )
    }

    fn check(&self, t: usize) {
        assert!(
            (1..=self.steps()).contains(&t),
            "diffusion step {t} outside 1..={}",
            self.steps()
        );
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check(t);
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        self.check(t);
        self.alpha_bars[t - 1]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// A noisy batch at diffusion step `t`.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub values: Tensor,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub ddim_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            ddim_steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

/// One seeded Gaussian stream per batch row, so a row's noise does not
/// depend on which other rows share its batch.
pub struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    pub fn from_seeds(seeds: &[u64]) -> Self {
        Self {
            rngs: seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect(),
        }
    }

    pub fn from_rngs(rngs: Vec<ChaCha8Rng>) -> Self {
        Self { rngs }
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }

    /// Standard Gaussian tensor of `(batch, rest...)`; row `i` comes from stream `i`.
    pub fn gaussian(&mut self, rest: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let per_row: usize = rest.iter().product();
        let mut data: Vec<f64> = Vec::with_capacity(per_row * self.rngs.len());
        for rng in &mut self.rngs {
            data.extend((0..per_row).map(|_| -> f64 { StandardNormal.sample(rng) }));
        }
        let mut shape = vec![self.rngs.len()];
        shape.extend_from_slice(rest);
        Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
    }
}

/// `(batch, 1, 1, 1)` tensor of per-row coefficients.
fn per_row(values: &[f64], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), like.device())?
        .to_dtype(like.dtype())?)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor) -> Result<bool> {
    Ok(t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite())
}

/// Forward process with a per-row step:
/// `y_t = sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample_batch(y0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(y0, eps, "q_sample")?;
    if t.len() != y0.dim(0)? {
        return Err(Error::contract(format!(
            "q_sample: {} steps for batch of {}",
            t.len(),
            y0.dim(0)?
        )));
    }
    for &s in t {
        if !(1..=sched.steps()).contains(&s) {
            return Err(Error::contract(format!("q_sample: step {s} outside schedule")));
        }
    }
    let signal: Vec<f64> = t.iter().map(|&s| sched.alpha_bar(s).sqrt()).collect();
    let noise: Vec<f64> = t.iter().map(|&s| (1.0 - sched.alpha_bar(s)).sqrt()).collect();
    Ok((y0.broadcast_mul(&per_row(&signal, y0)?)? + eps.broadcast_mul(&per_row(&noise, y0)?)?)?)
}

/// Forward process with one step shared by the whole batch.
pub fn q_sample(y0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<NoisySample> {
    let batch = y0.dim(0)?;
    Ok(NoisySample {
        values: q_sample_batch(y0, &vec![t; batch], eps, sched)?,
        t,
    })
}

/// Masked noise-regression loss: the mean squared difference between
/// `eps * X` and `denoiser(y_t * X, t) * X`, averaged over every element.
pub fn masked_loss<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    y0: &Tensor,
    mask: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let y_t = q_sample_batch(y0, t, eps, sched)?;
    let input = y_t.broadcast_mul(mask)?;
    let predicted = denoiser.predict_noise(&input, t)?.broadcast_mul(mask)?;
    let target = eps.broadcast_mul(mask)?;
    Ok((predicted - target)?.sqr()?.mean_all()?)
}

/// Ancestral DDPM step `t -> t - 1`, followed by the mask.
pub fn ddpm_reverse_step<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    y_t: &NoisySample,
    mask: &Tensor,
    sched: &NoiseSchedule,
    noise: &mut NoiseStreams,
) -> Result<NoisySample> {
    let t = y_t.t;
    if t == 0 {
        return Err(Error::contract("ddpm step from t = 0; use decode_final"));
    }
    let values = y_t.values.broadcast_mul(mask)?;
    let batch = values.dim(0)?;
    let eps_hat = denoiser.predict_noise(&values, &vec![t; batch])?.detach();
    let beta = sched.beta(t);
    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let mean = ((&values - (eps_hat * (beta / (1.0 - abar).sqrt()))?)? * (1.0 / sched.alpha(t).sqrt()))?;
    let next = if t > 1 {
        let sigma = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
        let z = noise.gaussian(&values.dims()[1..], values.dtype(), values.device())?;
        (mean + (z * sigma)?)?
    } else {
        mean
    };
    Ok(NoisySample {
        values: next.broadcast_mul(mask)?,
        t: t - 1,
    })
}

/// DDIM step `t -> t_next` with stochasticity `eta`, followed by the mask.
pub fn ddim_reverse_step<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    y_t: &NoisySample,
    mask: &Tensor,
    sched: &NoiseSchedule,
    t_next: usize,
    eta: f64,
    noise: &mut NoiseStreams,
) -> Result<NoisySample> {
    let t = y_t.t;
    if t_next >= t {
        return Err(Error::contract(format!("ddim step must descend, got {t} -> {t_next}")));
    }
    let abar = sched.alpha_bar(t);
    let abar_next = sched.alpha_bar(t_next);
    if abar <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) is zero")));
    }
    let values = y_t.values.broadcast_mul(mask)?;
    let batch = values.dim(0)?;
    let eps_hat = denoiser.predict_noise(&values, &vec![t; batch])?.detach();
    let y0_hat = ((&values - (&eps_hat * (1.0 - abar).sqrt())?)? * (1.0 / abar.sqrt()))?;
    let sigma = eta * ((1.0 - abar_next) / (1.0 - abar)).sqrt() * (1.0 - abar / abar_next).sqrt();
    let direction = (1.0 - abar_next - sigma * sigma).max(0.0).sqrt();
    let mut next = ((y0_hat * abar_next.sqrt())? + (eps_hat * direction)?)?;
    if sigma > 0.0 {
        let z = noise.gaussian(&values.dims()[1..], values.dtype(), values.device())?;
        next = (next + (z * sigma)?)?;
    }
    Ok(NoisySample {
        values: next.broadcast_mul(mask)?,
        t: t_next,
    })
}

/// Per-cell probabilities of the clean roll from a `t = 1` sample. Cells
/// outside the mixture get probability 0.
pub fn decode_final<D: ProbabilityDecoder + ?Sized>(
    decoder: &D,
    y1: &NoisySample,
    mask: &Tensor,
) -> Result<Tensor> {
    if !decoder.is_trained() {
        return Err(Error::State("final decoder has not been trained".into()));
    }
    if y1.t != 1 {
        return Err(Error::contract(format!("decode_final expects t = 1, got {}", y1.t)));
    }
    let input = y1.values.broadcast_mul(mask)?;
    let probs = candle_nn::ops::sigmoid(&decoder.logits(&input)?.detach())?;
    Ok(probs.broadcast_mul(mask)?)
}

/// Visited steps of a DDIM trajectory: `n` points spaced evenly from
/// `steps` down to 1. The trajectory always ends at `t = 1`.
pub fn ddim_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(Error::config(format!("ddim_steps must be in 1..={steps}, got {n}")));
    }
    let mut points: Vec<usize> = if n == 1 {
        vec![steps]
    } else {
        (0..n)
            .map(|i| steps - ((i * (steps - 1)) as f64 / (n - 1) as f64).round() as usize)
            .collect()
    };
    points.dedup();
    if *points.last().unwrap() != 1 {
        points.push(1);
    }
    Ok(points)
}

/// Runs the reverse process from masked Gaussian noise down to `t = 1`.
/// `seeds` gives one noise stream per mixture.
pub fn reverse_to_t1<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    mask: &Tensor,
    channels: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<NoisySample> {
    let (batch, time, pitch, _) = mask.dims4()?;
    if batch != seeds.len() {
        return Err(Error::contract(format!("{} seeds for {batch} mixtures", seeds.len())));
    }
    let mut noise = NoiseStreams::from_seeds(seeds);
    let init = noise.gaussian(&[time, pitch, channels], mask.dtype(), mask.device())?;
    let mut y = NoisySample {
        values: init.broadcast_mul(mask)?,
        t: sched.steps(),
    };
    match cfg.kind {
        SamplerKind::Ddpm => {
            while y.t > 1 {
                y = ddpm_reverse_step(denoiser, &y, mask, sched, &mut noise)?;
                if !check_finite(&y.values)? {
                    return Err(Error::SamplingFault { step: y.t });
                }
            }
        }
        SamplerKind::Ddim => {
            if !(0.0..=1.0).contains(&cfg.eta) {
                return Err(Error::config(format!("eta must be in [0, 1], got {}", cfg.eta)));
            }
            let points = ddim_timesteps(sched.steps(), cfg.ddim_steps)?;
            for &t_next in &points[1..] {
                y = ddim_reverse_step(denoiser, &y, mask, sched, t_next, cfg.eta, &mut noise)?;
                if !check_finite(&y.values)? {
                    return Err(Error::SamplingFault { step: y.t });
                }
            }
        }
    }
    Ok(y)
}

/// Binarizes masked probabilities at 0.5.
pub fn binarize(probs: &Tensor, mask: &Tensor) -> Result<Vec<Pianoroll>> {
    let on = probs.ge(0.5)?.to_dtype(probs.dtype())?.broadcast_mul(mask)?;
    (0..on.dim(0)?)
        .map(|i| Pianoroll::from_tensor_threshold(&on.get(i)?, 0.5))
        .collect()
}

/// Separates a batch of mixtures; row `i` uses noise seeded by `seeds[i]`.
pub fn sample_batch<D, E>(
    denoiser: &D,
    decoder: &E,
    mixtures: &[&Mixture],
    channels: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seeds: &[u64],
    dtype: DType,
    device: &Device,
) -> Result<Vec<Pianoroll>>
where
    D: NoisePredictor + ?Sized,
    E: ProbabilityDecoder + ?Sized,
{
    if mixtures.is_empty() {
        return Ok(Vec::new());
    }
    let mask = stack_masks(mixtures, dtype, device)?;
    let y1 = reverse_to_t1(denoiser, &mask, channels, sched, cfg, seeds)?;
    let probs = decode_final(decoder, &y1, &mask)?;
    if !check_finite(&probs)? {
        return Err(Error::SamplingFault { step: 0 });
    }
    binarize(&probs, &mask)
}

/// Separates one mixture using `cfg.seed`.
pub fn sample<D, E>(
    denoiser: &D,
    decoder: &E,
    mixture: &Mixture,
    channels: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Pianoroll>
where
    D: NoisePredictor + ?Sized,
    E: ProbabilityDecoder + ?Sized,
{
    let dtype = DType::F32;
    let mut out = sample_batch(
        denoiser,
        decoder,
        &[mixture],
        channels,
        sched,
        cfg,
        &[cfg.seed],
        dtype,
        &Device::Cpu,
    )?;
    Ok(out.remove(0))
}
