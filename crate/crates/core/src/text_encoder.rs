//! Caption encoder: precomputed word features to a contextual word matrix and
//! a pooled sentence vector.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{attention_pool, uniform_init, Linear, Param, Params, TransformerLayer};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Encoded caption: contextual word rows, pooled sentence vector, and the
/// pooling weights that produced it.
#[derive(Clone, Debug)]
pub struct TextRepr<E: Element> {
    /// `[N, d]` contextual word features.
    pub words: Tensor<E>,
    /// `[d]` pooled sentence vector.
    pub pooled: Tensor<E>,
    /// `[N]` pooling weights (sum to 1).
    pub pool_weights: Tensor<E>,
}

/// Tape-level handles from one encoder forward.
pub struct TextVars {
    pub words: Var,
    /// `[1, d]`
    pub pooled: Var,
    /// `[1, N]`
    pub pool_weights: Var,
}

pub struct TextEncoder<E: Element> {
    pub fc: Linear<E>,
    /// `[n_max, d]` learned positional embedding, zero-initialized.
    pub pos_emb: Param<E>,
    pub layer: TransformerLayer<E>,
    /// `[1, d]` pooling vector.
    pub pool: Param<E>,
    pub d_text: usize,
    pub n_max: usize,
}

impl<E: Element> TextEncoder<E> {
    pub fn new(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        Ok(TextEncoder {
            fc: Linear::new(rng, "text.fc", config.d_text, config.d, true),
            pos_emb: Param::new("text.pos_emb", Tensor::zeros(vec![config.n_max, config.d])),
            layer: TransformerLayer::new(
                rng,
                "text.layer",
                config.d,
                config.heads,
                config.ffn_width,
            )?,
            pool: Param::new(
                "text.pool.w",
                uniform_init(rng, vec![1, config.d], config.d),
            ),
            d_text: config.d_text,
            n_max: config.n_max,
        })
    }

    /// FC+ReLU, positional embedding, one transformer layer, attention pool.
    pub fn forward(&self, tape: &mut Tape<E>, word_feats: &Tensor<E>) -> Result<TextVars> {
        let shape = word_feats.shape();
        if shape.len() != 2 || shape[1] != self.d_text {
            return Err(Error::BadShape {
                op: "encode_text",
                shape: shape.to_vec(),
                expected: format!("[N, {}]", self.d_text),
            });
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::BadShape {
                op: "encode_text",
                shape: shape.to_vec(),
                expected: "N >= 1".into(),
            });
        }
        if n > self.n_max {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.n_max,
            });
        }

        let x = tape.constant(word_feats.clone());
        let x = self.fc.forward(tape, x)?;
        let x = tape.relu(x)?;
        let table = self.pos_emb.push(tape);
        let pos = tape.slice_rows(table, 0, n)?;
        let x = tape.add(x, pos)?;
        let words = self.layer.forward(tape, x)?;
        let w = self.pool.push(tape);
        let (pooled, pool_weights) = attention_pool(tape, words, w)?;
        Ok(TextVars {
            words,
            pooled,
            pool_weights,
        })
    }

    /// Value-level encode on a fresh tape.
    pub fn encode(&self, word_feats: &Tensor<E>) -> Result<TextRepr<E>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, word_feats)?;
        let d = tape.shape(vars.pooled)[1];
        let n = tape.shape(vars.pool_weights)[1];
        Ok(TextRepr {
            words: tape.value(vars.words).clone(),
            pooled: tape.value(vars.pooled).clone().reshaped(vec![d])?,
            pool_weights: tape.value(vars.pool_weights).clone().reshaped(vec![n])?,
        })
    }
}

impl<E: Element> Params<E> for TextEncoder<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.fc.visit(f);
        f(&self.pos_emb);
        self.layer.visit(f);
        f(&self.pool);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.fc.visit_mut(f);
        f(&mut self.pos_emb);
        self.layer.visit_mut(f);
        f(&mut self.pool);
    }
}
