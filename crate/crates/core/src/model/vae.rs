//! VAE baseline: the TransUNet body maps the mixture (replicated over the
//! instrument axis) to a reparameterized bottleneck, decodes it with the
//! encoder skips, and masks the output probabilities.

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;

use super::layers::{masked_bce_with_logits, to_channels_first, to_channels_last, Conv2d};
use super::transunet::{DenoiserConfig, TransUNet};
use super::ParamBuilder;
use crate::diffusion::NoiseStreams;
use crate::error::{Error, Result};
use crate::roll::{stack_masks, Mixture, Pianoroll};

/// Time step fed to the shared body, which has no diffusion step here.
const VAE_STEP: usize = 0;

pub struct VaeOutput {
    pub logits: Tensor,
    /// Sigmoid of the logits, multiplied by the mask.
    pub probs: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Debug, Clone)]
pub struct VaeNet {
    body: TransUNet,
    mu_head: Conv2d,
    logvar_head: Conv2d,
}

impl VaeNet {
    pub fn new(vb: ParamBuilder, config: &DenoiserConfig) -> Result<Self> {
        let width = config.bottleneck_width();
        Ok(Self {
            body: TransUNet::new(vb.clone(), config)?,
            mu_head: Conv2d::new(vb.pp("mu_head"), width, width, 1, 1.0)?,
            logvar_head: Conv2d::new(vb.pp("logvar_head"), width, width, 1, 0.1)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.body.config()
    }

    /// `(latent channels, height, width)` of the bottleneck.
    pub fn latent_shape(&self) -> [usize; 3] {
        let c = self.config();
        let depth = c.encoder_widths.len();
        [c.bottleneck_width(), c.time >> depth, c.pitch >> depth]
    }

    /// `mask` is `(B, T, P, 1)`; `zeta` is a standard Gaussian of the latent
    /// shape with a leading batch axis, or `None` to decode the mean.
    pub fn forward(&self, mask: &Tensor, zeta: Option<&Tensor>) -> Result<VaeOutput> {
        let b = mask.dim(0)?;
        let channels = self.config().channels;
        let input = mask.repeat((1, 1, 1, channels))?;
        let tau = self.body.time_vector(&vec![VAE_STEP; b], mask.dtype(), mask.device())?;
        let mut trace = Vec::new();
        let enc = self.body.encode(&to_channels_first(&input)?, &tau, &mut trace)?;
        let mu = self.mu_head.forward(&enc.bottleneck)?;
        let logvar = self.logvar_head.forward(&enc.bottleneck)?;
        if !mu.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite()
            || !logvar.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite()
        {
            return Err(Error::Numeric("non-finite latent statistics".into()));
        }
        let z = match zeta {
            Some(zeta) => (&mu + (logvar.clone() * 0.5)?.exp()?.mul(zeta)?)?,
            None => mu.clone(),
        };
        self.decode_latent(&z, enc.skips, &tau, mask, mu, logvar)
    }

    /// Decodes latents drawn from the prior, one noise stream per mixture.
    pub fn forward_prior(&self, mask: &Tensor, noise: &mut NoiseStreams) -> Result<Tensor> {
        let b = mask.dim(0)?;
        let channels = self.config().channels;
        let input = mask.repeat((1, 1, 1, channels))?;
        let tau = self.body.time_vector(&vec![VAE_STEP; b], mask.dtype(), mask.device())?;
        let mut trace = Vec::new();
        let enc = self.body.encode(&to_channels_first(&input)?, &tau, &mut trace)?;
        let z = noise.gaussian(&self.latent_shape(), mask.dtype(), mask.device())?;
        let mut trace = Vec::new();
        let logits = to_channels_last(&self.body.decode(&z, enc.skips, &tau, &mut trace)?)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.broadcast_mul(mask)?)
    }

    fn decode_latent(
        &self,
        z: &Tensor,
        skips: Vec<Tensor>,
        tau: &Tensor,
        mask: &Tensor,
        mu: Tensor,
        logvar: Tensor,
    ) -> Result<VaeOutput> {
        let mut trace = Vec::new();
        let logits = to_channels_last(&self.body.decode(z, skips, tau, &mut trace)?)?;
        let probs = candle_nn::ops::sigmoid(&logits)?.broadcast_mul(mask)?;
        Ok(VaeOutput {
            logits,
            probs,
            mu,
            logvar,
        })
    }
}

/// `KL(N(mu, exp(logvar)) || N(0, 1))` averaged over every latent element.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((logvar.exp()? + mu.sqr()?)? - 1.0)?.sub(logvar)?;
    Ok((per.mean_all()? * 0.5)?)
}

pub struct VaeLoss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

/// Masked binary cross-entropy against `y0` plus `kl_weight` times the KL term.
pub fn vae_loss(net: &VaeNet, mask: &Tensor, y0: &Tensor, zeta: &Tensor, kl_weight: f64) -> Result<VaeLoss> {
    let out = net.forward(mask, Some(zeta))?;
    let reconstruction = masked_bce_with_logits(&out.logits, y0, mask)?;
    let kl = kl_divergence(&out.mu, &out.logvar)?;
    let total = (&reconstruction + (&kl * kl_weight)?)?;
    Ok(VaeLoss {
        total,
        reconstruction,
        kl,
    })
}

pub struct Vae {
    pub net: VaeNet,
    pub vars: VarMap,
}

impl Vae {
    pub fn new(config: &DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let vars = VarMap::new();
        let net = VaeNet::new(ParamBuilder::new(&vars, seed, dtype, device), config)?;
        Ok(Self { net, vars })
    }

    /// Separates mixtures by decoding prior latents; row `i` uses `seeds[i]`.
    pub fn separate(&self, mixtures: &[&Mixture], seeds: &[u64], dtype: DType, device: &Device) -> Result<Vec<Pianoroll>> {
        if mixtures.len() != seeds.len() {
            return Err(Error::contract(format!("{} seeds for {} mixtures", seeds.len(), mixtures.len())));
        }
        if mixtures.is_empty() {
            return Ok(Vec::new());
        }
        let mask = stack_masks(mixtures, dtype, device)?;
        let probs = self.net.forward_prior(&mask, &mut NoiseStreams::from_seeds(seeds))?.detach();
        crate::diffusion::binarize(&probs, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parameter_count, Denoiser};

    fn tiny() -> Vae {
        Vae::new(&DenoiserConfig::tiny(8, 8, 3), 4, DType::F64, &Device::Cpu).unwrap()
    }

    fn mask(seed: u64) -> Tensor {
        Tensor::randn(0f64, 1.0, (2, 8, 8, 1), &Device::Cpu)
            .unwrap()
            .ge(seed as f64 * 0.1)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_mixture_gives_zero_probabilities() {
        let vae = tiny();
        let zero = Tensor::zeros((1, 8, 8, 1), DType::F64, &Device::Cpu).unwrap();
        let zeta = Tensor::randn(0f64, 1.0, (1, 8, 1, 1), &Device::Cpu).unwrap();
        let out = vae.net.forward(&zero, Some(&zeta)).unwrap();
        assert!(values(&out.probs).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn mean_path_is_deterministic_and_in_range() {
        let vae = tiny();
        let m = mask(0);
        let a = vae.net.forward(&m, None).unwrap();
        let zeta = Tensor::zeros((2, 8, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let b = vae.net.forward(&m, Some(&zeta)).unwrap();
        assert_eq!(values(&a.probs), values(&b.probs));
        assert!(values(&a.probs).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn kl_closed_form() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros(4, DType::F64, &dev).unwrap();
        assert_eq!(kl_divergence(&zero, &zero).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let one = Tensor::ones(1, DType::F64, &dev).unwrap();
        let lv = Tensor::zeros(1, DType::F64, &dev).unwrap();
        assert!((kl_divergence(&one, &lv).unwrap().to_scalar::<f64>().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn more_parameters_than_denoiser() {
        let cfg = DenoiserConfig::tiny(8, 8, 3);
        let vae = Vae::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let den = Denoiser::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        assert!(parameter_count(&vae.vars) > parameter_count(&den.vars));
    }

    #[test]
    fn separated_rolls_respect_the_mask() {
        let vae = tiny();
        let mut rng_cells = Vec::new();
        for i in 0..64 {
            rng_cells.push(i % 3 == 0);
        }
        let mix = Mixture::from_cells(8, 8, rng_cells).unwrap();
        let rolls = vae.separate(&[&mix], &[7], DType::F64, &Device::Cpu).unwrap();
        assert!(crate::roll::mixture_from_roll(&rolls[0]).is_subset_of(&mix));
    }
}
