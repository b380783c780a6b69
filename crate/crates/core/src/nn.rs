//! Trainable building blocks shared by the encoders and fusion modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// A named trainable tensor. `grad` is populated after a backward pass.
#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Register this parameter on a tape.
    pub fn push(&self, tape: &mut Tape<E>) -> Var {
        tape.param(&self.name, &self.value)
    }
}

/// Visitor over the parameters of a component, in a fixed declaration order.
pub trait Params<E: Element> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));
}

/// Uniform init in ±1/sqrt(fan_in), the usual dense-layer default.
pub fn uniform_init<E: Element>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Dense layer `x @ w (+ bias)`, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub w: Param<E>,
    pub b: Option<Param<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = Param::new(
            format!("{prefix}.weight"),
            uniform_init(rng, vec![d_in, d_out], d_in),
        );
        let b = bias.then(|| {
            Param::new(
                format!("{prefix}.bias"),
                uniform_init(rng, vec![d_out], d_in),
            )
        });
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let w = self.w.push(tape);
        let y = tape.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let bv = b.push(tape);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

impl<E: Element> Params<E> for Linear<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Affine layer-norm parameters over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<E: Element> {
    pub gain: Param<E>,
    pub bias: Param<E>,
    pub eps: E,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(prefix: &str, d: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{prefix}.gain"), Tensor::full(vec![d], E::one())),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(vec![d])),
            eps: E::from_f64(1e-5),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let g = self.gain.push(tape);
        let b = self.bias.push(tape);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl<E: Element> Params<E> for LayerNorm<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.gain);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Two-layer feed-forward block with a ReLU in the middle.
#[derive(Clone, Debug)]
pub struct FeedForward<E: Element> {
    pub lift: Linear<E>,
    pub lower: Linear<E>,
}

impl<E: Element> FeedForward<E> {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            lift: Linear::new(rng, &format!("{prefix}.lift"), d, hidden, true),
            lower: Linear::new(rng, &format!("{prefix}.lower"), hidden, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let h = self.lift.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.lower.forward(tape, h)
    }
}

impl<E: Element> Params<E> for FeedForward<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.lift.visit(f);
        self.lower.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.lift.visit_mut(f);
        self.lower.visit_mut(f);
    }
}

/// Multi-head attention with projection matrices and no projection biases.
///
/// An optional nonnegative `prior` of shape `[Lq, Lk]` is multiplied into the
/// post-softmax weights of every head, which are then row-renormalized.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<E: Element> {
    pub w_q: Param<E>,
    pub w_k: Param<E>,
    pub w_v: Param<E>,
    pub w_o: Param<E>,
    pub heads: usize,
}

/// Attention output along with the per-head weight nodes (for map export).
pub struct AttentionOut {
    pub out: Var,
    pub head_weights: Vec<Var>,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            w_q: Param::new(format!("{prefix}.w_q"), uniform_init(rng, vec![d, d], d)),
            w_k: Param::new(format!("{prefix}.w_k"), uniform_init(rng, vec![d, d], d)),
            w_v: Param::new(format!("{prefix}.w_v"), uniform_init(rng, vec![d, d], d)),
            w_o: Param::new(format!("{prefix}.w_o"), uniform_init(rng, vec![d, d], d)),
            heads: self::check_heads(d, heads)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        q: Var,
        k: Var,
        v: Var,
        prior: Option<Var>,
    ) -> Result<AttentionOut> {
        let d = self.w_q.value.shape()[0];
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            let s = tape.shape(var);
            if s.len() != 2 || s[1] != d {
                return Err(Error::BadShape {
                    op: "multi_head_attention",
                    shape: s.to_vec(),
                    expected: format!("{name} of shape [_, {d}]"),
                });
            }
        }
        let (lq, lk) = (tape.shape(q)[0], tape.shape(k)[0]);
        if tape.shape(v)[0] != lk {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                left: tape.shape(k).to_vec(),
                right: tape.shape(v).to_vec(),
            });
        }
        if let Some(p) = prior {
            if tape.shape(p) != [lq, lk] {
                return Err(Error::ShapeMismatch {
                    op: "multi_head_attention",
                    left: vec![lq, lk],
                    right: tape.shape(p).to_vec(),
                });
            }
        }

        let d_head = d / self.heads;
        let scale = E::from_f64(1.0 / (d_head as f64).sqrt());
        let (wq, wk, wv, wo) = (
            self.w_q.push(tape),
            self.w_k.push(tape),
            self.w_v.push(tape),
            self.w_o.push(tape),
        );
        let qp = tape.matmul(q, wq)?;
        let kp = tape.matmul(k, wk)?;
        let vp = tape.matmul(v, wv)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(qp, lo, hi)?;
            let kh = tape.slice_cols(kp, lo, hi)?;
            let vh = tape.slice_cols(vp, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let mut weights = tape.softmax(scores, 1)?;
            if let Some(p) = prior {
                let shaped = tape.mul(weights, p)?;
                let sums = tape.sum_rows(shaped)?;
                let inv = tape.recip(sums)?;
                weights = tape.mul_col_broadcast(shaped, inv)?;
            }
            head_outs.push(tape.matmul(weights, vh)?);
            head_weights.push(weights);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let out = tape.matmul(merged, wo)?;
        Ok(AttentionOut { out, head_weights })
    }

    /// Per-head weights as one `[heads, Lq, Lk]` tensor of values.
    pub fn weights_tensor(tape: &Tape<E>, head_weights: &[Var]) -> Tensor<E> {
        let (lq, lk) = {
            let s = tape.shape(head_weights[0]);
            (s[0], s[1])
        };
        let mut data = Vec::with_capacity(head_weights.len() * lq * lk);
        for &w in head_weights {
            data.extend_from_slice(tape.value(w).data());
        }
        Tensor::new(vec![head_weights.len(), lq, lk], data).expect("head shapes agree")
    }
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config {
            what: format!("width {d} not divisible by heads {heads}"),
        });
    }
    Ok(heads)
}

impl<E: Element> Params<E> for MultiHeadAttention<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_o);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
    }
}

/// Softmax pooling of sequence rows driven by a trainable `[1, d]` vector:
/// `alpha = softmax(w X^T)`, `vec = alpha @ X`.
///
/// Returns `(vec [1, d], alpha [1, L])`.
pub fn attention_pool<E: Element>(tape: &mut Tape<E>, x: Var, w: Var) -> Result<(Var, Var)> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 2 || sx[0] < 1 {
        return Err(Error::BadShape {
            op: "attention_pool",
            shape: sx,
            expected: "2-D, L >= 1".into(),
        });
    }
    let xt = tape.transpose(x)?;
    let logits = tape.matmul(w, xt)?;
    let alpha = tape.softmax(logits, 1)?;
    let vec = tape.matmul(alpha, x)?;
    Ok((vec, alpha))
}

/// Standard post-norm transformer encoder layer:
/// `y = LN1(x + MHA(x)); out = LN2(y + FFN(y))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer<E: Element> {
    pub attn: MultiHeadAttention<E>,
    pub ln1: LayerNorm<E>,
    pub ffn: FeedForward<E>,
    pub ln2: LayerNorm<E>,
}

impl<E: Element> TransformerLayer<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::new(rng, &format!("{prefix}.attn"), d, heads)?,
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            ffn: FeedForward::new(rng, &format!("{prefix}.ffn"), d, ffn_width),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
        })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let att = self.attn.forward(tape, x, x, x, None)?;
        let res = tape.add(x, att.out)?;
        let y = self.ln1.forward(tape, res)?;
        let f = self.ffn.forward(tape, y)?;
        let res2 = tape.add(y, f)?;
        self.ln2.forward(tape, res2)
    }
}

impl<E: Element> Params<E> for TransformerLayer<E> {
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
