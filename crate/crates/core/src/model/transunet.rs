//! The TransUNet denoiser.
//!
//! ```text
//! stem        3x3 conv                          (64, 72, 64)
//! down x3     max-pool 2 + residual block       (32, 36, 128) (16, 18, 256) (8, 9, 256)
//! bottleneck  2 transformer layers, 72 tokens   (8, 9, 256)
//! up x3       nearest x2 + skip concat + res    (16, 18, 128) (32, 36, 64) (64, 72, 64)
//! output      norm, SiLU, 3x3 conv              (64, 72, 5)
//! ```
//!
//! Every residual block is conditioned on the step embedding through
//! adaptive group normalization.

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;

use super::ParamBuilder;

use super::layers::{max_pool2x2, to_channels_first, to_channels_last, AdaGroupNorm, Conv2d, ResBlock, TimeMlp};
use super::transformer::Bottleneck;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::kv::{join_list, KeyValues};
use crate::roll::{INSTRUMENTS, PITCHES, TIME_STEPS};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub time: usize,
    pub pitch: usize,
    pub channels: usize,
    pub stem_width: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub time_embed_dim: usize,
    pub time_hidden: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            time: TIME_STEPS,
            pitch: PITCHES,
            channels: INSTRUMENTS,
            stem_width: 64,
            encoder_widths: vec![128, 256, 256],
            decoder_widths: vec![128, 64, 64],
            transformer_layers: 2,
            heads: 4,
            ff_width: 1024,
            time_embed_dim: 16,
            time_hidden: 64,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// Small network over full-size phrases, used for fast training runs.
    pub fn small() -> Self {
        Self {
            stem_width: 16,
            encoder_widths: vec![32, 64, 64],
            decoder_widths: vec![32, 16, 16],
            heads: 4,
            ff_width: 128,
            time_hidden: 32,
            groups: 4,
            ..Self::default()
        }
    }

    /// The smallest useful network, used for invariant checks.
    pub fn tiny(time: usize, pitch: usize, channels: usize) -> Self {
        Self {
            time,
            pitch,
            channels,
            stem_width: 4,
            encoder_widths: vec![4, 8, 8],
            decoder_widths: vec![8, 4, 4],
            transformer_layers: 2,
            heads: 2,
            ff_width: 16,
            time_embed_dim: 16,
            time_hidden: 8,
            groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.encoder_widths.len();
        if depth == 0 || self.decoder_widths.len() != depth {
            return Err(Error::config(
                "encoder and decoder need the same non-zero number of stages",
            ));
        }
        let scale = 1usize << depth;
        if self.time % scale != 0 || self.pitch % scale != 0 {
            return Err(Error::config(format!(
                "({}, {}) does not halve cleanly {depth} times",
                self.time, self.pitch
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    /// Number of bottleneck tokens.
    pub fn tokens(&self) -> usize {
        let scale = 1usize << self.encoder_widths.len();
        (self.time / scale) * (self.pitch / scale)
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }

    /// `(stage, [time, pitch, width])` for every stage of the forward pass.
    pub fn shape_ladder(&self) -> Vec<(String, [usize; 3])> {
        let mut out = vec![("input".to_string(), [self.time, self.pitch, self.stem_width])];
        let depth = self.encoder_widths.len();
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            out.push((
                format!("down{}", i + 1),
                [self.time >> (i + 1), self.pitch >> (i + 1), w],
            ));
        }
        out.push((
            "transformer".into(),
            [self.time >> depth, self.pitch >> depth, self.bottleneck_width()],
        ));
        for (i, &w) in self.decoder_widths.iter().enumerate() {
            let level = depth - i - 1;
            out.push((
                format!("up{}", i + 1),
                [self.time >> level, self.pitch >> level, w],
            ));
        }
        out.push(("output".into(), [self.time, self.pitch, self.channels]));
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "time = {}\npitch = {}\nchannels = {}\nstem_width = {}\nencoder_widths = {}\n\
             decoder_widths = {}\ntransformer_layers = {}\nheads = {}\nff_width = {}\n\
             time_embed_dim = {}\ntime_hidden = {}\ngroups = {}\n",
            self.time,
            self.pitch,
            self.channels,
            self.stem_width,
            join_list(&self.encoder_widths),
            join_list(&self.decoder_widths),
            self.transformer_layers,
            self.heads,
            self.ff_width,
            self.time_embed_dim,
            self.time_hidden,
            self.groups
        )
    }

    /// Overrides fields from `kv`, consuming the keys it recognizes.
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
        field!(stem_width);
        if let Some(v) = kv.take_list("encoder_widths")? {
            self.encoder_widths = v;
        }
        if let Some(v) = kv.take_list("decoder_widths")? {
            self.decoder_widths = v;
        }
        field!(transformer_layers);
        field!(heads);
        field!(ff_width);
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

/// Encoder features kept for the skip connections.
pub struct Encoded {
    pub bottleneck: Tensor,
    pub skips: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Down {
    block: ResBlock,
}

#[derive(Debug, Clone)]
struct Up {
    block: ResBlock,
}

/// Convolutional encoder/decoder with a transformer bottleneck.
#[derive(Debug, Clone)]
pub struct TransUNet {
    config: DenoiserConfig,
    time_mlp: TimeMlp,
    stem: Conv2d,
    downs: Vec<Down>,
    bottleneck: Bottleneck,
    ups: Vec<Up>,
    out_norm: AdaGroupNorm,
    out_conv: Conv2d,
}

/// Returns the measured `[height, width, channels]`.
fn check_stage(stage: &str, x: &Tensor, expected: [usize; 3]) -> Result<[usize; 3]> {
    let (_, c, h, w) = x.dims4()?;
    if [h, w, c] != expected {
        return Err(Error::Shape {
            stage: stage.to_string(),
            expected: expected.to_vec(),
            actual: vec![h, w, c],
        });
    }
    Ok([h, w, c])
}

impl TransUNet {
    pub fn new(vb: ParamBuilder, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let g = c.groups;
        let th = c.time_hidden;
        let mut downs = Vec::new();
        let mut prev = c.stem_width;
        for (i, &w) in c.encoder_widths.iter().enumerate() {
            downs.push(Down {
                block: ResBlock::new(vb.pp(format!("down{}", i + 1)), prev, w, g, th)?,
            });
            prev = w;
        }
        // skip widths, deepest first: the outputs of down(n-1) .. down1, then the stem
        let mut skip_widths: Vec<usize> = c.encoder_widths[..c.encoder_widths.len() - 1].to_vec();
        skip_widths.insert(0, c.stem_width);
        skip_widths.reverse();
        let mut ups = Vec::new();
        for (i, (&w, &skip)) in c.decoder_widths.iter().zip(&skip_widths).enumerate() {
            ups.push(Up {
                block: ResBlock::new(vb.pp(format!("up{}", i + 1)), prev + skip, w, g, th)?,
            });
            prev = w;
        }
        Ok(Self {
            config: c.clone(),
            time_mlp: TimeMlp::new(vb.pp("time_mlp"), c.time_embed_dim, th)?,
            stem: Conv2d::new(vb.pp("stem"), c.channels, c.stem_width, 3, 1.0)?,
            downs,
            bottleneck: Bottleneck::new(
                vb.pp("transformer"),
                c.transformer_layers,
                c.bottleneck_width(),
                c.heads,
                c.ff_width,
                c.tokens(),
            )?,
            ups,
            out_norm: AdaGroupNorm::new(vb.pp("out_norm"), prev, g, th)?,
            out_conv: Conv2d::new(vb.pp("out_conv"), prev, c.channels, 3, 0.1)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn time_vector(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        self.time_mlp.forward(t, dtype, device)
    }

    /// Runs stem, down blocks and transformer on a channels-first input.
    pub fn encode(&self, x: &Tensor, tau: &Tensor, trace: &mut Vec<(String, [usize; 3])>) -> Result<Encoded> {
        let ladder = self.config.shape_ladder();
        let mut record = |i: usize, x: &Tensor| -> Result<()> {
            let (name, expected) = &ladder[i];
            trace.push((name.clone(), check_stage(name, x, *expected)?));
            Ok(())
        };
        let h = self.stem.forward(x)?;
        record(0, &h)?;
        let mut skips = vec![h.clone()];
        let mut h = h;
        for (i, down) in self.downs.iter().enumerate() {
            h = down.block.forward(&max_pool2x2(&h)?, tau)?;
            record(i + 1, &h)?;
            skips.push(h.clone());
        }
        skips.pop();
        let (h, attention) = self.bottleneck.forward_with_weights(&h)?;
        record(self.downs.len() + 1, &h)?;
        Ok(Encoded {
            bottleneck: h,
            skips,
            attention,
        })
    }

    /// Runs up blocks and the output head; returns channels-first output.
    pub fn decode(
        &self,
        bottleneck: &Tensor,
        mut skips: Vec<Tensor>,
        tau: &Tensor,
        trace: &mut Vec<(String, [usize; 3])>,
    ) -> Result<Tensor> {
        let ladder = self.config.shape_ladder();
        let base = self.downs.len() + 2;
        let mut h = bottleneck.clone();
        for (i, up) in self.ups.iter().enumerate() {
            let skip = skips.pop().ok_or_else(|| Error::contract("missing skip connection"))?;
            let (_, _, sh, sw) = skip.dims4()?;
            let upsampled = h.upsample_nearest2d(sh, sw)?;
            h = up.block.forward(&Tensor::cat(&[&upsampled, &skip], 1)?, tau)?;
            let (name, expected) = &ladder[base + i];
            trace.push((name.clone(), check_stage(name, &h, *expected)?));
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&h, tau)?.silu()?)?;
        let (name, expected) = ladder.last().unwrap();
        trace.push((name.clone(), check_stage(name, &out, *expected)?));
        Ok(out)
    }

    /// Noise prediction for `(B, T, P, C)` input, plus the stage trace and
    /// the attention weights of each transformer layer.
    pub fn forward_traced(&self, y: &Tensor, t: &[usize]) -> Result<(Tensor, Vec<(String, [usize; 3])>, Vec<Tensor>)> {
        let (b, time, pitch, channels) = y.dims4()?;
        let c = &self.config;
        if (time, pitch, channels) != (c.time, c.pitch, c.channels) {
            return Err(Error::Shape {
                stage: "input tensor".into(),
                expected: vec![c.time, c.pitch, c.channels],
                actual: vec![time, pitch, channels],
            });
        }
        if t.len() != b {
            return Err(Error::contract(format!("{} steps for batch of {b}", t.len())));
        }
        let tau = self.time_vector(t, y.dtype(), y.device())?;
        let mut trace = Vec::new();
        let enc = self.encode(&to_channels_first(y)?, &tau, &mut trace)?;
        let out = self.decode(&enc.bottleneck, enc.skips, &tau, &mut trace)?;
        Ok((to_channels_last(&out)?, trace, enc.attention))
    }

    pub fn forward(&self, y: &Tensor, t: &[usize]) -> Result<Tensor> {
        Ok(self.forward_traced(y, t)?.0)
    }
}

/// A denoiser together with the variables it owns and the schedule it is
/// trained for.
pub struct Denoiser {
    pub net: TransUNet,
    pub vars: VarMap,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    /// Uses the default schedule.
    pub fn new(config: &DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let vars = VarMap::new();
        let net = TransUNet::new(ParamBuilder::new(&vars, seed, dtype, device), config)?;
        Ok(Self {
            net,
            vars,
            schedule: NoiseSchedule::default(),
        })
    }

    /// Architecture and schedule as `key = value` lines.
    pub fn config_text(&self) -> String {
        format!("{}{}", self.net.config().to_text(), self.schedule.to_text())
    }

    /// Inverse of [`Self::config_text`]: `(architecture, schedule)`.
    pub fn parse_config(text: &str) -> Result<(DenoiserConfig, NoiseSchedule)> {
        let mut kv = KeyValues::parse(text)?;
        let schedule = NoiseSchedule::from_kv(&mut kv)?;
        let mut cfg = DenoiserConfig::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        Ok((cfg, schedule))
    }
}

impl crate::diffusion::NoisePredictor for Denoiser {
    fn predict_noise(&self, y: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.net.forward(y, t)
    }
}

impl crate::diffusion::NoisePredictor for TransUNet {
    fn predict_noise(&self, y: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.forward(y, t)
    }
}
