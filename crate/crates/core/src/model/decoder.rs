//! The final `t = 1 -> 0` decoder: a shallow residual network producing
//! per-cell logits of the clean roll.

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;

use super::layers::{to_channels_first, to_channels_last, AdaGroupNorm, Conv2d, ResBlock, TimeMlp};
use super::ParamBuilder;
use crate::diffusion::ProbabilityDecoder;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::roll::{INSTRUMENTS, PITCHES, TIME_STEPS};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub time: usize,
    pub pitch: usize,
    pub channels: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub groups: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            time: TIME_STEPS,
            pitch: PITCHES,
            channels: INSTRUMENTS,
            width: 64,
            time_embed_dim: 16,
            time_hidden: 64,
            groups: 8,
        }
    }
}

impl DecoderConfig {
    pub fn small() -> Self {
        Self {
            width: 16,
            time_hidden: 32,
            groups: 4,
            ..Self::default()
        }
    }

    pub fn tiny(time: usize, pitch: usize, channels: usize) -> Self {
        Self {
            time,
            pitch,
            channels,
            width: 4,
            time_embed_dim: 16,
            time_hidden: 8,
            groups: 2,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "time = {}\npitch = {}\nchannels = {}\nwidth = {}\ntime_embed_dim = {}\n\
             time_hidden = {}\ngroups = {}\n",
            self.time, self.pitch, self.channels, self.width, self.time_embed_dim, self.time_hidden, self.groups
        )
    }

    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take(stringify!($name))? {
                    self.$name = v;
                }
            };
        }
        field!(time);
        field!(pitch);
        field!(channels);
        field!(width);
        field!(time_embed_dim);
        field!(time_hidden);
        field!(groups);
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderNet {
    config: DecoderConfig,
    time_mlp: TimeMlp,
    stem: Conv2d,
    blocks: [ResBlock; 2],
    out_norm: AdaGroupNorm,
    out_conv: Conv2d,
}

impl DecoderNet {
    pub fn new(vb: ParamBuilder, config: &DecoderConfig) -> Result<Self> {
        let c = config;
        if c.time_embed_dim < 2 || c.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and >= 2"));
        }
        let (w, g, th) = (c.width, c.groups, c.time_hidden);
        Ok(Self {
            config: c.clone(),
            time_mlp: TimeMlp::new(vb.pp("time_mlp"), c.time_embed_dim, th)?,
            stem: Conv2d::new(vb.pp("stem"), c.channels, w, 3, 1.0)?,
            blocks: [
                ResBlock::new(vb.pp("block1"), w, w, g, th)?,
                ResBlock::new(vb.pp("block2"), w, w, g, th)?,
            ],
            out_norm: AdaGroupNorm::new(vb.pp("out_norm"), w, g, th)?,
            out_conv: Conv2d::new(vb.pp("out_conv"), w, c.channels, 3, 0.1)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Logits for a `(B, T, P, C)` sample at `t = 1`.
    pub fn forward(&self, y1: &Tensor) -> Result<Tensor> {
        let (b, time, pitch, channels) = y1.dims4()?;
        let c = &self.config;
        if (time, pitch, channels) != (c.time, c.pitch, c.channels) {
            return Err(Error::Shape {
                stage: "decoder input".into(),
                expected: vec![c.time, c.pitch, c.channels],
                actual: vec![time, pitch, channels],
            });
        }
        let tau = self.time_mlp.forward(&vec![1; b], y1.dtype(), y1.device())?;
        let mut h = self.stem.forward(&to_channels_first(y1)?)?;
        for block in &self.blocks {
            h = block.forward(&h, &tau)?;
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&h, &tau)?.silu()?)?;
        to_channels_last(&out)
    }
}

/// Decoder network, its variables, and whether it has been trained.
pub struct FinalDecoder {
    pub net: DecoderNet,
    pub vars: VarMap,
    trained: bool,
}

impl FinalDecoder {
    pub fn new(config: &DecoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let vars = VarMap::new();
        let net = DecoderNet::new(ParamBuilder::new(&vars, seed, dtype, device), config)?;
        Ok(Self {
            net,
            vars,
            trained: false,
        })
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }
}

impl ProbabilityDecoder for FinalDecoder {
    fn logits(&self, y1: &Tensor) -> Result<Tensor> {
        self.net.forward(y1)
    }

    fn is_trained(&self) -> bool {
        self.trained
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{decode_final, NoisySample};

    #[test]
    fn untrained_decoder_refuses() {
        let mut dec = FinalDecoder::new(&DecoderConfig::tiny(4, 4, 2), 0, DType::F64, &Device::Cpu).unwrap();
        let y = NoisySample {
            values: Tensor::randn(0f64, 1.0, (1, 4, 4, 2), &Device::Cpu).unwrap(),
            t: 1,
        };
        let mask = Tensor::ones((1, 4, 4, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(decode_final(&dec, &y, &mask), Err(Error::State(_))));
        dec.mark_trained();
        let p = decode_final(&dec, &y, &mask).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = DecoderConfig::small();
        assert_eq!(DecoderConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(DecoderConfig::from_text("depth = 3").is_err());
    }
}
