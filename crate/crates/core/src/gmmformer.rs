//! Gaussian-constrained multi-head self-attention block.
//!
//! Each attention branch multiplies its post-softmax weights with a Gaussian
//! distance prior `G[i][j] = exp(-(i-j)^2 / (2 * variance))` and renormalizes
//! rows, so every frame attends mostly to its neighbours. Branches with
//! different variances capture different temporal scales; their outputs are
//! aggregated by element-wise mean and passed through a residual/layer-norm
//! FFN sandwich, matching a standard transformer encoder layer when the only
//! variance is infinite.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention, Param, Params};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Shape of one Gaussian attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlockConfig {
    /// Prior variances; `f64::INFINITY` yields plain attention.
    pub variances: Vec<f64>,
    pub heads: usize,
    pub d: usize,
    pub ffn_width: usize,
}

impl GaussianBlockConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        GaussianBlockConfig {
            variances: vec![0.5, 1.0, 5.0, f64::INFINITY],
            heads,
            d,
            ffn_width: 4 * d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variances.is_empty() {
            return Err(Error::Config {
                what: "variance list must be nonempty".into(),
            });
        }
        for &v in &self.variances {
            validate_variance(v)?;
        }
        Ok(())
    }
}

fn validate_variance(variance: f64) -> Result<()> {
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::Config {
            what: format!("gaussian variance must be positive, got {variance}"),
        });
    }
    Ok(())
}

/// Distance prior `G[i][j] = exp(-(i-j)^2 / (2*variance))`; all-ones at
/// infinite variance.
pub fn gaussian_prior<E: Element>(l: usize, variance: f64) -> Result<Tensor<E>> {
    validate_variance(variance)?;
    if l == 0 {
        return Err(Error::BadShape {
            op: "gaussian_prior",
            shape: vec![0],
            expected: "L >= 1".into(),
        });
    }
    let mut data = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let off = i as f64 - j as f64;
            data.push(E::from_f64((-(off * off) / (2.0 * variance)).exp()));
        }
    }
    Tensor::new(vec![l, l], data)
}

/// Self-attention with a Gaussian prior at one variance.
pub fn gaussian_attention<E: Element>(
    tape: &mut Tape<E>,
    attn: &MultiHeadAttention<E>,
    x: Var,
    variance: f64,
) -> Result<crate::nn::AttentionOut> {
    let l = tape.shape(x)[0];
    let prior = tape.constant(gaussian_prior(l, variance)?);
    attn.forward(tape, x, x, x, Some(prior))
}

/// One GMMFormer block: multi-variance Gaussian attention, mean-aggregated,
/// then residual + layer norm and FFN + residual + layer norm.
#[derive(Clone, Debug)]
pub struct GmmformerBlock<E: Element> {
    pub attn: MultiHeadAttention<E>,
    pub ln1: LayerNorm<E>,
    pub ffn: FeedForward<E>,
    pub ln2: LayerNorm<E>,
    pub variances: Vec<f64>,
}

/// Attention maps of one block forward: per variance, per head.
pub struct BlockWeights {
    pub per_variance: Vec<Vec<Var>>,
}

impl<E: Element> GmmformerBlock<E> {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, config: &GaussianBlockConfig) -> Result<Self> {
        config.validate()?;
        Ok(GmmformerBlock {
            attn: MultiHeadAttention::new(rng, &format!("{prefix}.attn"), config.d, config.heads)?,
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), config.d),
            ffn: FeedForward::new(rng, &format!("{prefix}.ffn"), config.d, config.ffn_width),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), config.d),
            variances: config.variances.clone(),
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<(Var, BlockWeights)> {
        let mut agg: Option<Var> = None;
        let mut per_variance = Vec::with_capacity(self.variances.len());
        for &variance in &self.variances {
            let att = gaussian_attention(tape, &self.attn, x, variance)?;
            per_variance.push(att.head_weights);
            agg = Some(match agg {
                Some(sum) => tape.add(sum, att.out)?,
                None => att.out,
            });
        }
        let sum = agg.expect("variance list validated nonempty");
        let mean = tape.scale(sum, E::from_f64(1.0 / self.variances.len() as f64))?;
        let res = tape.add(x, mean)?;
        let y = self.ln1.forward(tape, res)?;
        let f = self.ffn.forward(tape, y)?;
        let res2 = tape.add(y, f)?;
        let out = self.ln2.forward(tape, res2)?;
        Ok((out, BlockWeights { per_variance }))
    }
}

impl<E: Element> Params<E> for GmmformerBlock<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.attn.visit(f);
        self.ln1.visit(f);
        self.ffn.visit(f);
        self.ln2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.attn.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ffn.visit_mut(f);
        self.ln2.visit_mut(f);
    }
}
