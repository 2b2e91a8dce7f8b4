//! Pre-norm transformer over the flattened bottleneck, with a learned
//! relative position bias per head.

use candle_core::{Device, Tensor};
use super::{Init, ParamBuilder};

use super::layers::{softmax_last, LayerNorm, Linear};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    heads: usize,
    head_dim: usize,
    tokens: usize,
    qkv: Linear,
    proj: Linear,
    /// `(heads, 2 * tokens - 1)`, indexed by `i - j + tokens - 1`.
    rel_bias: Tensor,
    rel_index: Tensor,
}

impl SelfAttention {
    pub fn new(vb: ParamBuilder, dim: usize, heads: usize, tokens: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} does not split into {heads} heads")));
        }
        let index: Vec<u32> = (0..tokens)
            .flat_map(|i| (0..tokens).map(move |j| (i + tokens - 1 - j) as u32))
            .collect();
        Ok(Self {
            heads,
            head_dim: dim / heads,
            tokens,
            qkv: Linear::new(vb.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::with_gain(vb.pp("proj"), dim, dim, 0.5)?,
            rel_bias: vb.get(
                (heads, 2 * tokens - 1),
                "rel_bias",
                Init::Randn { stdev: 0.02 },
            )?,
            rel_index: Tensor::from_vec(index, tokens * tokens, &Device::Cpu)?,
        })
    }

    fn bias(&self) -> Result<Tensor> {
        let index = self.rel_index.to_device(self.rel_bias.device())?;
        Ok(self
            .rel_bias
            .index_select(&index, 1)?
            .reshape((1, self.heads, self.tokens, self.tokens))?)
    }

    /// Returns the output and the attention weights `(batch, heads, n, n)`.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, dim) = x.dims3()?;
        if n != self.tokens {
            return Err(Error::Shape {
                stage: "attention tokens".into(),
                expected: vec![self.tokens],
                actual: vec![n],
            });
        }
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, self.head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&self.bias()?)?;
        let weights = softmax_last(&logits)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, dim))?;
        Ok((self.proj.forward(&out)?, weights))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    pub fn new(vb: ParamBuilder, dim: usize, heads: usize, ff: usize, tokens: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(vb.pp("ln1"), dim)?,
            attn: SelfAttention::new(vb.pp("attn"), dim, heads, tokens)?,
            ln2: LayerNorm::new(vb.pp("ln2"), dim)?,
            fc1: Linear::new(vb.pp("fc1"), dim, ff)?,
            fc2: Linear::with_gain(vb.pp("fc2"), ff, dim, 0.5)?,
        })
    }

    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, weights) = self.attn.forward_with_weights(&self.ln1.forward(x)?)?;
        let x = (x + a)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok(((x + h)?, weights))
    }
}

/// Stack of transformer layers applied to a `(B, C, H, W)` feature map as
/// `H * W` tokens of width `C`.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    layers: Vec<TransformerLayer>,
}

impl Bottleneck {
    pub fn new(
        vb: ParamBuilder,
        layers: usize,
        dim: usize,
        heads: usize,
        ff: usize,
        tokens: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(vb.pp(format!("layer{i}")), dim, heads, ff, tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Also returns each layer's attention weights.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let mut tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, weights) = layer.forward_with_weights(&tokens)?;
            tokens = next;
            all.push(weights);
        }
        let out = tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((out, all))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use candle_nn::VarMap;

    #[test]
    fn attention_rows_sum_to_one_and_bias_is_relative() {
        let vm = VarMap::new();
        let vb = ParamBuilder::new(&vm, 0, DType::F64, &Device::Cpu);
        let attn = SelfAttention::new(vb, 16, 4, 6).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 6, 16), &Device::Cpu).unwrap();
        let (out, w) = attn.forward_with_weights(&x).unwrap();
        assert_eq!(out.dims(), &[2, 6, 16]);
        let sums = w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));

        let bias = attn.bias().unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for h in 0..4 {
            for i in 1..6 {
                for j in 1..6 {
                    assert_eq!(bias[h][i][j], bias[h][i - 1][j - 1]);
                }
            }
        }
        assert!(SelfAttention::new(ParamBuilder::new(&vm, 0, DType::F64, &Device::Cpu).pp("x"), 10, 4, 6).is_err());
    }
}
