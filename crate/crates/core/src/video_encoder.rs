//! Dual-branch video encoder.
//!
//! The clip branch samples a fixed number of segment means, projects them and
//! runs them through two Gaussian-attention blocks and a Mamba block to give
//! clip embeddings. The video branch runs the full frame sequence through the
//! same block stack (its own parameters) and pools it into one video vector.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gmmformer::{BlockWeights, GmmformerBlock};
use crate::nn::{attention_pool, uniform_init, Linear, Param, Params};
use crate::ssm::MambaBlock;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Module toggles used by encoding and fusion (ablation axes plus a
/// test-only bypass of the Gaussian blocks).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub mamba: bool,
    pub ttv: bool,
    pub tvt: bool,
    pub gmm: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Toggles {
            mamba: true,
            ttv: true,
            tvt: true,
            gmm: true,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

/// Encoded video: clip embeddings plus staged frame-level features.
#[derive(Clone, Debug)]
pub struct VideoRepr<E: Element> {
    /// `[M_c, d]` clip embeddings.
    pub clips: Tensor<E>,
    /// `[M_f, d]` projected frame features entering the blocks.
    pub frames: Tensor<E>,
    /// `[M_f, d]` after the Gaussian-attention blocks.
    pub frames_ctx: Tensor<E>,
    /// `[M_f, d]` after the temporal (Mamba) block; the pooling input.
    pub frames_temporal: Tensor<E>,
    /// `[d]` pooled video vector.
    pub pooled: Tensor<E>,
    /// `[M_f]` pooling weights (sum to 1).
    pub pool_weights: Tensor<E>,
}

/// Tape-level handles from one video forward.
pub struct VideoVars {
    pub clips: Var,
    pub frames: Var,
    pub frames_ctx: Var,
    pub frames_temporal: Var,
    /// `[1, d]`
    pub pooled: Var,
    /// `[1, M_f]`
    pub pool_weights: Var,
    /// Gaussian attention maps per block, clip branch then frame branch.
    pub clip_attn: Vec<BlockWeights>,
    pub frame_attn: Vec<BlockWeights>,
}

/// Mean-pool frame rows into `m_c` contiguous near-equal segments.
///
/// Segment `i` spans `[floor(i*M_f/M_c), floor((i+1)*M_f/M_c))`; when that
/// range is empty (fewer frames than clips) the nearest frame is repeated.
pub fn sample_clips<E: Element>(frames: &Tensor<E>, m_c: usize) -> Result<Tensor<E>> {
    let shape = frames.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "sample_clips",
            shape: shape.to_vec(),
            expected: "2-D [M_f, D]".into(),
        });
    }
    let (m_f, dim) = (shape[0], shape[1]);
    if m_f == 0 {
        return Err(Error::EmptyVideo);
    }
    if m_c == 0 {
        return Err(Error::Config {
            what: "m_c must be positive".into(),
        });
    }
    let mut data = Vec::with_capacity(m_c * dim);
    for i in 0..m_c {
        let lo = i * m_f / m_c;
        let hi = (i + 1) * m_f / m_c;
        if hi > lo {
            let scale = E::from_f64(1.0 / (hi - lo) as f64);
            for j in 0..dim {
                let mut acc = E::zero();
                for r in lo..hi {
                    acc = acc + frames.get2(r, j);
                }
                data.push(acc * scale);
            }
        } else {
            let r = lo.min(m_f - 1);
            data.extend_from_slice(frames.row(r));
        }
    }
    Tensor::new(vec![m_c, dim], data)
}

/// One branch: projection, positions, two Gaussian blocks, then a stack of
/// Mamba blocks (depth 1 by default).
pub struct VideoBranch<E: Element> {
    pub fc: Linear<E>,
    pub pos_emb: Param<E>,
    pub gmm1: GmmformerBlock<E>,
    pub gmm2: GmmformerBlock<E>,
    pub mamba: Vec<MambaBlock<E>>,
    pub max_len: usize,
}

pub struct BranchVars {
    pub out: Var,
    pub post_gmm: Var,
    pub post_proj: Var,
    pub attn: Vec<BlockWeights>,
}

impl<E: Element> VideoBranch<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        prefix: &str,
        config: &ModelConfig,
        max_len: usize,
    ) -> Result<Self> {
        let gaussian = config.gaussian_config();
        Ok(VideoBranch {
            fc: Linear::new(rng, &format!("{prefix}.fc"), config.d_vid, config.d, true),
            pos_emb: Param::new(
                format!("{prefix}.pos_emb"),
                Tensor::zeros(vec![max_len, config.d]),
            ),
            gmm1: GmmformerBlock::new(rng, &format!("{prefix}.gmm1"), &gaussian)?,
            gmm2: GmmformerBlock::new(rng, &format!("{prefix}.gmm2"), &gaussian)?,
            mamba: (0..config.mamba_depth)
                .map(|i| MambaBlock::new(rng, &format!("{prefix}.mamba{i}"), config.ssm_config()))
                .collect::<Result<_>>()?,
            max_len,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        features: &Tensor<E>,
        toggles: &Toggles,
    ) -> Result<BranchVars> {
        let l = features.shape()[0];
        if l > self.max_len {
            return Err(Error::SequenceTooLong {
                len: l,
                max: self.max_len,
            });
        }
        let x = tape.constant(features.clone());
        let x = self.fc.forward(tape, x)?;
        let x = tape.relu(x)?;
        let table = self.pos_emb.push(tape);
        let pos = tape.slice_rows(table, 0, l)?;
        let post_proj = tape.add(x, pos)?;

        let mut attn = Vec::new();
        let post_gmm = if toggles.gmm {
            let (h1, w1) = self.gmm1.forward(tape, post_proj)?;
            let (h2, w2) = self.gmm2.forward(tape, h1)?;
            attn.push(w1);
            attn.push(w2);
            h2
        } else {
            post_proj
        };
        let mut out = post_gmm;
        if toggles.mamba {
            for block in &self.mamba {
                out = block.forward(tape, out)?;
            }
        }
        Ok(BranchVars {
            out,
            post_gmm,
            post_proj,
            attn,
        })
    }
}

impl<E: Element> Params<E> for VideoBranch<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.fc.visit(f);
        f(&self.pos_emb);
        self.gmm1.visit(f);
        self.gmm2.visit(f);
        for block in &self.mamba {
            block.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.fc.visit_mut(f);
        f(&mut self.pos_emb);
        self.gmm1.visit_mut(f);
        self.gmm2.visit_mut(f);
        for block in &mut self.mamba {
            block.visit_mut(f);
        }
    }
}

pub struct VideoEncoder<E: Element> {
    pub clip_branch: VideoBranch<E>,
    pub frame_branch: VideoBranch<E>,
    /// `[1, d]` pooling vector for the video-level branch.
    pub pool: Param<E>,
    pub m_c: usize,
    pub d_vid: usize,
}

impl<E: Element> VideoEncoder<E> {
    pub fn new(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        Ok(VideoEncoder {
            clip_branch: VideoBranch::new(
                rng,
                "video.clip",
                config,
                config.m_c.max(config.m_f_max),
            )?,
            frame_branch: VideoBranch::new(rng, "video.frame", config, config.m_f_max)?,
            pool: Param::new(
                "video.pool.w",
                uniform_init(rng, vec![1, config.d], config.d),
            ),
            m_c: config.m_c,
            d_vid: config.d_vid,
        })
    }

    /// Both branches over raw frame features `[M_f, D_vid]`.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        frames: &Tensor<E>,
        toggles: &Toggles,
    ) -> Result<VideoVars> {
        let shape = frames.shape();
        if shape.len() != 2 || shape[1] != self.d_vid {
            return Err(Error::BadShape {
                op: "encode_video",
                shape: shape.to_vec(),
                expected: format!("[M_f, {}]", self.d_vid),
            });
        }
        if shape[0] == 0 {
            return Err(Error::EmptyVideo);
        }

        let sampled = sample_clips(frames, self.m_c)?;
        let clip = self.clip_branch.forward(tape, &sampled, toggles)?;
        let frame = self.frame_branch.forward(tape, frames, toggles)?;
        let w = self.pool.push(tape);
        let (pooled, pool_weights) = attention_pool(tape, frame.out, w)?;
        Ok(VideoVars {
            clips: clip.out,
            frames: frame.post_proj,
            frames_ctx: frame.post_gmm,
            frames_temporal: frame.out,
            pooled,
            pool_weights,
            clip_attn: clip.attn,
            frame_attn: frame.attn,
        })
    }

    /// Value-level encode on a fresh tape.
    pub fn encode(&self, frames: &Tensor<E>, toggles: &Toggles) -> Result<VideoRepr<E>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, frames, toggles)?;
        let d = tape.shape(vars.pooled)[1];
        let m_f = tape.shape(vars.pool_weights)[1];
        Ok(VideoRepr {
            clips: tape.value(vars.clips).clone(),
            frames: tape.value(vars.frames).clone(),
            frames_ctx: tape.value(vars.frames_ctx).clone(),
            frames_temporal: tape.value(vars.frames_temporal).clone(),
            pooled: tape.value(vars.pooled).clone().reshaped(vec![d])?,
            pool_weights: tape.value(vars.pool_weights).clone().reshaped(vec![m_f])?,
        })
    }
}

impl<E: Element> Params<E> for VideoEncoder<E> {
    fn visit(&self, f: &mut dyn FnMut(&Param<E>)) {
        self.clip_branch.visit(f);
        self.frame_branch.visit(f);
        f(&self.pool);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        self.clip_branch.visit_mut(f);
        self.frame_branch.visit_mut(f);
        f(&mut self.pool);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            ffn_width: 16,
            variances: vec![0.5, f64::INFINITY],
            m_c: 4,
            m_f_max: 24,
            d_vid: 6,
            d_state: 4,
            d_conv: 2,
            expand: 2,
            ..ModelConfig::default()
        }
    }

    fn encoder(seed: u64) -> VideoEncoder<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoEncoder::new(&mut rng, &small_config()).unwrap()
    }

    fn random_frames(seed: u64, m_f: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![m_f, d],
            (0..m_f * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_clips_scalar_means() {
        let frames = Tensor::new(vec![8, 1], (1..=8).map(|v| v as f64).collect()).unwrap();
        let out = sample_clips(&frames, 4).unwrap();
        assert_eq!(out.data(), &[1.5, 3.5, 5.5, 7.5]);
    }

    #[test]
    fn sample_clips_identity_when_counts_match() {
        let frames = random_frames(1, 5, 3);
        let out = sample_clips(&frames, 5).unwrap();
        assert_eq!(out.data(), frames.data());
    }

    #[test]
    fn sample_clips_uneven_partition() {
        // M_f=7, M_c=4: bounds [0,1) [1,3) [3,5) [5,7)
        let frames = Tensor::new(vec![7, 1], (1..=7).map(|v| v as f64).collect()).unwrap();
        let out = sample_clips(&frames, 4).unwrap();
        assert_eq!(out.data(), &[1.0, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn sample_clips_repeats_nearest_when_short() {
        let frames = Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap();
        let out = sample_clips(&frames, 4).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn sample_clips_rejects_empty_video() {
        let frames = Tensor::<f64>::zeros(vec![0, 3]);
        assert!(matches!(
            sample_clips(&frames, 4).unwrap_err(),
            Error::EmptyVideo
        ));
    }

    #[test]
    fn sample_clips_preserves_mean_on_equal_partitions() {
        let frames = random_frames(2, 12, 4);
        let out = sample_clips(&frames, 4).unwrap();
        for j in 0..4 {
            let mean_in: f64 = (0..12).map(|i| frames.get2(i, j)).sum::<f64>() / 12.0;
            let mean_out: f64 = (0..4).map(|i| out.get2(i, j)).sum::<f64>() / 4.0;
            assert!((mean_in - mean_out).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_branch_output_shape() {
        let enc = encoder(3);
        for m_f in [1usize, 3, 10] {
            let repr = enc
                .encode(&random_frames(50 + m_f as u64, m_f, 6), &Toggles::all())
                .unwrap();
            assert_eq!(repr.clips.shape(), &[4, 8]);
            assert_eq!(repr.frames_temporal.shape(), &[m_f, 8]);
            assert_eq!(repr.pooled.shape(), &[8]);
        }
    }

    #[test]
    fn bypassed_blocks_reduce_to_projection_plus_positions() {
        let mut enc = encoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        enc.clip_branch.pos_emb.value = uniform_init(&mut rng, vec![24, 8], 8);
        let frames = random_frames(60, 9, 6);
        let toggles = Toggles {
            mamba: false,
            gmm: false,
            ..Toggles::all()
        };
        let repr = enc.encode(&frames, &toggles).unwrap();

        // oracle: sample, project, relu, add positions, all by hand
        let sampled = sample_clips(&frames, 4).unwrap();
        let w = &enc.clip_branch.fc.w.value;
        let b = &enc.clip_branch.fc.b.as_ref().unwrap().value;
        for i in 0..4 {
            for j in 0..8 {
                let mut acc = b.data()[j];
                for p in 0..6 {
                    acc += sampled.get2(i, p) * w.get2(p, j);
                }
                let want = acc.max(0.0) + enc.clip_branch.pos_emb.value.get2(i, j);
                assert!((repr.clips.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paper_scale_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig {
            m_f_max: 40,
            ..ModelConfig::default()
        };
        let enc = VideoEncoder::<f32>::new(&mut rng, &config).unwrap();
        let frames = Tensor::<f32>::zeros(vec![40, 3072]);
        let repr = enc.encode(&frames, &Toggles::all()).unwrap();
        assert_eq!(repr.clips.shape(), &[32, 64]);
        assert_eq!(repr.pooled.shape(), &[64]);
    }

    #[test]
    fn single_frame_pools_to_its_own_row() {
        let enc = encoder(6);
        let repr = enc
            .encode(&random_frames(70, 1, 6), &Toggles::all())
            .unwrap();
        assert_eq!(repr.pool_weights.data(), &[1.0]);
        assert_eq!(repr.pooled.data(), repr.frames_temporal.data());
    }

    #[test]
    fn pooled_vector_reconstructs_from_weights() {
        let enc = encoder(7);
        let repr = enc
            .encode(&random_frames(80, 6, 6), &Toggles::all())
            .unwrap();
        for j in 0..8 {
            let mut acc = 0.0f64;
            for i in 0..6 {
                acc += repr.pool_weights.data()[i] * repr.frames_temporal.get2(i, j);
            }
            assert!((acc - repr.pooled.data()[j]).abs() < 1e-6);
        }
        let sum: f64 = repr.pool_weights.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = encoder(8);
        let frames = random_frames(90, 5, 6);
        let a = enc.encode(&frames, &Toggles::all()).unwrap();
        let b = enc.encode(&frames, &Toggles::all()).unwrap();
        assert_eq!(a.clips.data(), b.clips.data());
        assert_eq!(a.pooled.data(), b.pooled.data());
    }

    #[test]
    fn mamba_stack_depth_is_configurable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let config = ModelConfig {
            mamba_depth: 2,
            ..small_config()
        };
        let enc = VideoEncoder::<f64>::new(&mut rng, &config).unwrap();
        assert_eq!(enc.frame_branch.mamba.len(), 2);
        let mut names = Vec::new();
        enc.visit(&mut |p: &Param<f64>| names.push(p.name.clone()));
        assert!(names.iter().any(|n| n == "video.frame.mamba0.a_log"));
        assert!(names.iter().any(|n| n == "video.frame.mamba1.a_log"));

        let repr = enc
            .encode(&random_frames(110, 7, 6), &Toggles::all())
            .unwrap();
        assert_eq!(repr.frames_temporal.shape(), &[7, 8]);

        // a deeper stack changes the encoding but not the bypass path
        let shallow = VideoEncoder::<f64>::new(
            &mut ChaCha8Rng::seed_from_u64(10),
            &ModelConfig {
                mamba_depth: 1,
                ..small_config()
            },
        )
        .unwrap();
        let frames = random_frames(111, 6, 6);
        let deep_out = enc.encode(&frames, &Toggles::all()).unwrap();
        let shallow_out = shallow.encode(&frames, &Toggles::all()).unwrap();
        assert_ne!(
            deep_out.frames_temporal.data(),
            shallow_out.frames_temporal.data()
        );
        let toggles = Toggles {
            mamba: false,
            ..Toggles::all()
        };
        let deep_off = enc.encode(&frames, &toggles).unwrap();
        assert_eq!(deep_off.frames_temporal.data(), deep_off.frames_ctx.data());
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let enc = encoder(9);
        assert!(enc
            .encode(&Tensor::zeros(vec![4, 7]), &Toggles::all())
            .is_err());
        assert!(matches!(
            enc.encode(&Tensor::zeros(vec![0, 6]), &Toggles::all())
                .unwrap_err(),
            Error::EmptyVideo
        ));
    }
}
