//! Bidirectional temporal fusion between one caption and one video.
//!
//! Text-to-video fusion attends every temporal frame row to the pooled
//! sentence vector (a length-1 key axis, so the weights are degenerate and
//! the information rides the value path). Video-to-text fusion then attends
//! each word row over the fused frame rows. Both are residual-wrapped, so
//! zeroing the value projections leaves the inputs untouched.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{attention_pool, MultiHeadAttention, Param, Params};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::video_encoder::Toggles;

/// Fused pair outputs at value level.
#[derive(Clone, Debug)]
pub struct FusedPair<E: Element> {
    /// `[M_f, d]` text-conditioned video features.
    pub video_fused: Tensor<E>,
    /// `[N, d]` video-conditioned text features.
    pub text_fused: Tensor<E>,
    /// `[heads, M_f, 1]`; absent when text-to-video fusion is disabled.
    pub ttv_weights: Option<Tensor<E>>,
    /// `[heads, N, M_f]`; absent when video-to-text fusion is disabled.
    pub tvt_weights: Option<Tensor<E>>,
    /// `[d]` pooled fused text vector used for scoring.
    pub pooled_text: Tensor<E>,
}

/// Tape-level handles of one fused pair.
pub struct FusedVars {
    pub video_fused: Var,
    pub text_fused: Var,
    pub ttv_weights: Vec<Var>,
    pub tvt_weights: Vec<Var>,
    /// `[1, d]`
    pub pooled_text: Var,
    /// `[1, N]`
    pub pool_weights: Var,
}

pub struct Fusion<E: Element> {
    pub ttv: MultiHeadAttention<E>,
    pub tvt: MultiHeadAttention<E>,
}

impl<E: Element> Fusion<E> {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<Self> {
        Ok(Fusion {
            ttv: MultiHeadAttention::new(rng, "fusion.ttv", d, heads)?,
            tvt: MultiHeadAttention::new(rng, "fusion.tvt", d, heads)?,
        })
    }

    /// Text-to-video: frame rows query the pooled sentence vector.
    /// `sentence` is `[1, d]`; returns the fused rows and per-head weights.
    pub fn ttv_fuse(
        &self,
        tape: &mut Tape<E>,
        frames_temporal: Var,
        sentence: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let att = self
            .ttv
            .forward(tape, frames_temporal, sentence, sentence, None)?;
        let fused = tape.add(frames_temporal, att.out)?;
        Ok((fused, att.head_weights))
    }

    /// Video-to-text: word rows query the fused frame rows.
    pub fn tvt_fuse(
        &self,
        tape: &mut Tape<E>,
        words: Var,
        video_fused: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let att = self
            .tvt
            .forward(tape, words, video_fused, video_fused, None)?;
        let fused = tape.add(words, att.out)?;
        Ok((fused, att.head_weights))
    }

    /// Full pair fusion in equation-dependency order (text-to-video first),
    /// then attention pooling of the fused words with the text pooling vector.
    pub fn fuse_pair(
        &self,
        tape: &mut Tape<E>,
        words: Var,
        sentence: Var,
        frames_temporal: Var,
        text_pool: &Param<E>,
        toggles: &Toggles,
    ) -> Result<FusedVars> {
        let (video_fused, ttv_weights) = if toggles.ttv {
            self.ttv_fuse(tape, frames_temporal, sentence)?
        } else {
            (frames_temporal, Vec::new())
        };
        let (text_fused, tvt_weights) = if toggles.tvt {
            self.tvt_fuse(tape, words, video_fused)?
        } else {
            (words, Vec::new())
        };
        let w = text_pool.push(tape);
        let (pooled_text, pool_weights) = attention_pool(tape, text_fused, w)?;
        Ok(FusedVars {
            video_fused,
            text_fused,
            ttv_weights,
            tvt_weights,
            pooled_text,
            pool_weights,
        })
    }

    /// Extract value-level outputs of a fused pair.
    pub fn extract(tape: &Tape<E>, vars: &FusedVars) -> Result<FusedPair<E>> {
        let d = tape.shape(vars.pooled_text)[1];
        let weights = |heads: &Vec<Var>| -> Option<Tensor<E>> {
            (!heads.is_empty()).then(|| MultiHeadAttention::weights_tensor(tape, heads))
        };
        Ok(FusedPair {
            video_fused: tape.value(vars.video_fused).clone(),
            text_fused: tape.value(vars.text_fused).clone(),
            ttv_weights: weights(&vars.ttv_weights),
            tvt_weights: weights(&vars.tvt_weights),
            pooled_text: tape.value(vars.pooled_text).clone().reshaped(vec![d])?,
        })
    }
}

impl<E: Element> Params<E> for Fusion<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.ttv.visit(f);
        self.tvt.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.ttv.visit_mut(f);
        self.tvt.visit_mut(f);
    }
}
