//! Building blocks shared by the denoiser, the final decoder and the VAE.
//!
//! Everything here is written with primitive tensor ops so that gradients
//! flow through every layer, including in `f64` for finite-difference checks.

use candle_core::{DType, Device, Tensor, D};
use super::{Init, ParamBuilder};

use crate::error::{Error, Result};

/// Sinusoidal embedding of a diffusion step: `dim / 2` sines followed by
/// `dim / 2` cosines at geometric periods spanning 1 to 10^4.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let period = if half > 1 {
            10_000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let angle = t as f64 / period;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}

/// `(batch, dim)` tensor of step embeddings.
pub fn time_embedding_batch(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = t.iter().flat_map(|&s| time_embedding(s, dim)).collect();
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vb: ParamBuilder, input: usize, output: usize) -> Result<Self> {
        Self::with_gain(vb, input, output, 1.0)
    }

    pub fn with_gain(vb: ParamBuilder, input: usize, output: usize, gain: f64) -> Result<Self> {
        let stdev = gain / (input as f64).sqrt();
        Ok(Self {
            weight: vb.get((output, input), "weight", Init::Randn { stdev })?,
            bias: vb.get(output, "bias", Init::Const(0.0))?,
        })
    }

    /// Works on `(.., input)` tensors of rank 2 or 3.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    /// Same-padded square convolution with He-style initialization scaled by `gain`.
    pub fn new(vb: ParamBuilder, input: usize, output: usize, kernel: usize, gain: f64) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        let stdev = gain * (2.0 / fan_in).sqrt();
        Ok(Self {
            weight: vb.get(
                (output, input, kernel, kernel),
                "weight",
                Init::Randn { stdev },
            )?,
            bias: vb.get(output, "bias", Init::Const(0.0))?,
            padding: kernel / 2,
        })
    }

    /// `(batch, channels, height, width)` in and out. Lowered to one matmul
    /// over shifted copies of the padded input; on CPU this is faster than
    /// the built-in convolution for the small channel counts used here.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let (cout, _, k, _) = self.weight.dims4()?;
        let pad = self.padding;
        let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut shifts = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                shifts.push(padded.narrow(2, i, h)?.narrow(3, j, w)?);
            }
        }
        let columns = Tensor::stack(&shifts, 2)?.reshape((b, cin * k * k, h * w))?;
        let y = self
            .weight
            .reshape((cout, cin * k * k))?
            .broadcast_matmul(&columns)?
            .reshape((b, cout, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// 2x2 max pooling with stride 2. The gradient is split evenly between
/// tied maxima. Height and width must be even.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!("cannot pool a {h}x{w} map by 2")));
    }
    let windows = x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((b, c, h / 2, w / 2, 4))?;
    let peak = windows.detach().max_keepdim(D::Minus1)?;
    let hits = windows.detach().broadcast_eq(&peak)?.to_dtype(x.dtype())?;
    let weights = hits.broadcast_div(&hits.sum_keepdim(D::Minus1)?)?;
    Ok((windows * weights)?.sum(D::Minus1)?)
}

/// Group normalization without learned affine terms.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!("{c} channels do not split into {groups} groups")));
    }
    let grouped = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = grouped.mean_keepdim(D::Minus1)?;
    let centered = grouped.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization whose per-channel gain and bias come from the time
/// vector: `norm(f) * (1 + g(tau)) + b(tau)`.
#[derive(Debug, Clone)]
pub struct AdaGroupNorm {
    groups: usize,
    channels: usize,
    scale_shift: Linear,
}

impl AdaGroupNorm {
    pub fn new(vb: ParamBuilder, channels: usize, groups: usize, time_dim: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels do not split into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            channels,
            scale_shift: Linear::with_gain(vb.pp("scale_shift"), time_dim, 2 * channels, 0.1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, tau: &Tensor) -> Result<Tensor> {
        let normed = group_norm(x, self.groups, NORM_EPS)?;
        let b = tau.dim(0)?;
        let ss = self.scale_shift.forward(tau)?;
        let gain = ss.narrow(1, 0, self.channels)?.reshape((b, self.channels, 1, 1))?;
        let shift = ss
            .narrow(1, self.channels, self.channels)?
            .reshape((b, self.channels, 1, 1))?;
        Ok(normed.broadcast_mul(&(gain + 1.0)?)?.broadcast_add(&shift)?)
    }
}

/// Two time-conditioned 3x3 convolutions with an identity or 1x1 skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: AdaGroupNorm,
    conv1: Conv2d,
    norm2: AdaGroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(vb: ParamBuilder, input: usize, output: usize, groups: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: AdaGroupNorm::new(vb.pp("norm1"), input, groups, time_dim)?,
            conv1: Conv2d::new(vb.pp("conv1"), input, output, 3, 1.0)?,
            norm2: AdaGroupNorm::new(vb.pp("norm2"), output, groups, time_dim)?,
            conv2: Conv2d::new(vb.pp("conv2"), output, output, 3, 0.5)?,
            skip: if input == output {
                None
            } else {
                Some(Conv2d::new(vb.pp("skip"), input, output, 1, 0.5)?)
            },
        })
    }

    pub fn forward(&self, x: &Tensor, tau: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, tau)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h, tau)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Two-layer MLP lifting the sinusoidal step embedding to the width the
/// normalization layers consume.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    embed_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub fn new(vb: ParamBuilder, embed_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            embed_dim,
            fc1: Linear::new(vb.pp("fc1"), embed_dim, hidden)?,
            fc2: Linear::new(vb.pp("fc2"), hidden, hidden)?,
        })
    }

    pub fn forward(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let emb = time_embedding_batch(t, self.embed_dim, dtype, device)?;
        self.fc2.forward(&self.fc1.forward(&emb)?.silu()?)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(vb: ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get(dim, "weight", Init::Const(1.0))?,
            bias: vb.get(dim, "bias", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `(B,T,P,C)` to `(B,C,T,P)`.
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// `(B,C,T,P)` to `(B,T,P,C)`.
pub fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

/// Binary cross-entropy from logits, averaged over the cells where the
/// `(B,T,P,1)` mask is set. Returns 0 for an all-zero mask.
pub fn masked_bce_with_logits(logits: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let channels = logits.dim(D::Minus1)? as f64;
    // max(l, 0) - l * y + log(1 + exp(-|l|))
    let per_cell = ((logits.relu()? - (logits * target)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let total = per_cell.broadcast_mul(mask)?.sum_all()?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * channels;
    Ok((total / count.max(1.0))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_at_zero_and_one() {
        let e0 = time_embedding(0, 16);
        assert!(e0[..8].iter().all(|&s| s == 0.0));
        assert!(e0[8..].iter().all(|&c| c == 1.0));
        let e1 = time_embedding(1, 16);
        assert!((e1[0] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!((e1[0] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_injective_on_training_steps() {
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t, 16)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let diff = all[i]
                    .iter()
                    .zip(&all[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff > 0.0, "steps {} and {} collide", i + 1, j + 1);
            }
        }
    }

    fn random(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..3.0)).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn group_norm_matches_loop_oracle() {
        let (b, c, h, w, g) = (2, 8, 3, 5, 2);
        let x = random(1, (b, c, h, w));
        let out = group_norm(&x, g, NORM_EPS).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ov = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let per_group = c / g * h * w;
        for bi in 0..b {
            for gi in 0..g {
                let start = bi * c * h * w + gi * per_group;
                let vals = &xv[start..start + per_group];
                let mean = vals.iter().sum::<f64>() / per_group as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per_group as f64;
                for k in 0..per_group {
                    let expected = (vals[k] - mean) / (var + NORM_EPS).sqrt();
                    assert!((ov[start + k] - expected).abs() < 1e-5);
                }
            }
        }
        assert!(group_norm(&x, 3, NORM_EPS).is_err());
    }

    #[test]
    fn constant_group_normalizes_to_zero() {
        let x = Tensor::full(4.5f64, (1, 4, 2, 2), &Device::Cpu).unwrap();
        let out = group_norm(&x, 2, NORM_EPS).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_time_map_reduces_to_plain_group_norm() {
        let vm = VarMap::new();
        let vb = ParamBuilder::new(&vm, 0, DType::F64, &Device::Cpu);
        let norm = AdaGroupNorm::new(vb.pp("n"), 8, 2, 6).unwrap();
        for var in vm.all_vars() {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
        let x = random(2, (2, 8, 3, 3));
        let tau = random(3, (1, 1, 2, 6)).reshape((2, 6)).unwrap();
        let a = norm.forward(&x, &tau).unwrap();
        let b = group_norm(&x, 2, NORM_EPS).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let vb = ParamBuilder::new(&vm, 0, DType::F64, &Device::Cpu);
        assert!(AdaGroupNorm::new(vb.pp("bad"), 6, 4, 6).is_err());
    }

    #[test]
    fn masked_bce_matches_loop_oracle() {
        let logits = random(5, (2, 3, 4, 2));
        let target = random(6, (2, 3, 4, 2)).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let mask = random(7, (2, 3, 4, 1)).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let got = masked_bce_with_logits(&logits, &target, &mask).unwrap().to_scalar::<f64>().unwrap();
        let l = logits.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y = target.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let m = mask.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (mut sum, mut count) = (0.0, 0.0);
        for i in 0..l.len() {
            if m[i / 2] == 1.0 {
                let p = 1.0 / (1.0 + (-l[i]).exp());
                sum -= y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln();
                count += 1.0;
            }
        }
        assert!((got - sum / count).abs() < 1e-10);
        let zero = mask.zeros_like().unwrap();
        let none = masked_bce_with_logits(&logits, &target, &zero).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let vm = VarMap::new();
        let vb = ParamBuilder::new(&vm, 9, DType::F64, &Device::Cpu);
        let conv = Conv2d::new(vb.pp("c"), 3, 2, 3, 1.0).unwrap();
        let bias = Tensor::new(&[0.25f64, -0.5], &Device::Cpu).unwrap();
        vm.data().lock().unwrap()["c.bias"].set(&bias).unwrap();
        let (b, h, w) = (2, 4, 5);
        let x = random(8, (b, 3, h, w));
        let got = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for bi in 0..b {
            for o in 0..2 {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = [0.25, -0.5][o];
                        for i in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * 3 + i) * h + sy as usize) * w + sx as usize;
                                    acc += xv[xi] * wv[((o * 3 + i) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let gi = ((bi * 2 + o) * h + y) * w + xx;
                        assert!((got[gi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_values_and_gradients() {
        let x = random(10, (2, 3, 4, 6));
        let ours = max_pool2x2(&x).unwrap();
        let theirs = x.max_pool2d(2).unwrap();
        let diff = (&ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let var = candle_core::Var::from_tensor(&x).unwrap();
        let grads = max_pool2x2(&var).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g.iter().sum::<f64>(), (2 * 3 * 2 * 3) as f64);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
        let flat = Tensor::full(1.5f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let var = candle_core::Var::from_tensor(&flat).unwrap();
        let grads = max_pool2x2(&var).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.25; 4]);
        assert!(max_pool2x2(&random(1, (1, 1, 3, 2))).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = random(4, (1, 2, 3, 7));
        let s = softmax_last(&x).unwrap().sum(D::Minus1).unwrap();
        let v = s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&r| (r - 1.0).abs() < 1e-12));
    }
}
