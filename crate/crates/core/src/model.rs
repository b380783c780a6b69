//! The full retrieval model: both encoders, fusion, and parameter plumbing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::fusion::Fusion;
use crate::nn::{Param, Params};
use crate::retrieval::Scorer;
use crate::tape::Gradients;
use crate::tensor::{Element, Tensor};
use crate::text_encoder::{TextEncoder, TextRepr};
use crate::video_encoder::{Toggles, VideoEncoder, VideoRepr};

pub struct MamFusion<E: Element> {
    pub config: ModelConfig,
    pub text: TextEncoder<E>,
    pub video: VideoEncoder<E>,
    pub fusion: Fusion<E>,
}

impl<E: Element> MamFusion<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(MamFusion {
            text: TextEncoder::new(&mut rng, &config)?,
            video: VideoEncoder::new(&mut rng, &config)?,
            fusion: Fusion::new(&mut rng, config.d, config.heads)?,
            config,
        })
    }

    pub fn encode_text(&self, word_feats: &Tensor<E>) -> Result<TextRepr<E>> {
        self.text.encode(word_feats)
    }

    pub fn encode_video(&self, frames: &Tensor<E>, toggles: &Toggles) -> Result<VideoRepr<E>> {
        self.video.encode(frames, toggles)
    }

    /// Pairwise scorer with this model's similarity weights.
    pub fn scorer(&self, fast_mode: bool, toggles: Toggles) -> Scorer<'_, E> {
        Scorer {
            fusion: &self.fusion,
            text_pool: &self.text.pool,
            w_clip: self.config.w_clip,
            w_vid: self.config.w_vid,
            fast_mode,
            toggles,
        }
    }

    /// `(name, element count)` for every parameter, in visit order.
    pub fn param_sizes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |p: &Param<E>| out.push((p.name.clone(), p.value.numel())));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().iter().map(|(_, n)| n).sum()
    }

    /// Run `f` on the named parameter, if present.
    pub fn with_param_mut<R>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Param<E>) -> R,
    ) -> Option<R> {
        let mut f = Some(f);
        let mut out = None;
        self.visit_mut(&mut |p: &mut Param<E>| {
            if p.name == name {
                if let Some(f) = f.take() {
                    out = Some(f(p));
                }
            }
        });
        out
    }

    /// Copy a backward pass's gradients onto the parameters.
    pub fn store_grads(&mut self, grads: &Gradients<E>) {
        self.visit_mut(&mut |p: &mut Param<E>| {
            p.grad = grads.get(&p.name).cloned();
        });
    }
}

impl<E: Element> Params<E> for MamFusion<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.text.visit(f);
        self.video.visit(f);
        self.fusion.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.text.visit_mut(f);
        self.video.visit_mut(f);
        self.fusion.visit_mut(f);
    }
}
