//! Contrastive training loop, loss functions, evaluation and loss traces.
//!
//! Per batch the loss combines, at both similarity levels (max-over-clips and
//! whole-video cosine), a hardest-in-batch triplet term in both directions
//! and a symmetric InfoNCE term over the pairwise similarity matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{Adam, AdamConfig};
use crate::config::TrainConfig;
use crate::data_io::manifest::Corpus;
use crate::error::{Error, Result};
use crate::model::MamFusion;
use crate::retrieval::{cosine, MetricsReport, RetrievalResult};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::video_encoder::Toggles;

/// Ablation toggles implied by a training configuration.
pub fn toggles_from(cfg: &TrainConfig) -> Toggles {
    Toggles {
        mamba: cfg.enable_mamba,
        ttv: cfg.enable_ttv,
        tvt: cfg.enable_tvt,
        gmm: true,
    }
}

// ── Loss functions ───────────────────────────────────────────────────────

/// `max(0, margin + s_neg - s_pos)`.
pub fn triplet_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin + s_neg - s_pos).max(0.0)
}

/// Symmetric InfoNCE over a `[B, B]` similarity matrix whose diagonal holds
/// the matched pairs: mean of row-wise and column-wise cross-entropy.
pub fn infonce_loss<E: Element>(sim: &Tensor<E>, temperature: f64) -> Result<E> {
    let mut tape = Tape::new();
    let s = tape.constant(sim.clone());
    let loss = infonce_var(&mut tape, s, temperature)?;
    Ok(tape.value(loss).as_scalar())
}

/// Tape-level symmetric InfoNCE.
pub fn infonce_var<E: Element>(tape: &mut Tape<E>, sim: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config {
            what: "temperature must be > 0".into(),
        });
    }
    let scaled = tape.scale(sim, E::from_f64(1.0 / temperature))?;
    let rows = tape.log_softmax_rows(scaled)?;
    let row_term = tape.diag_mean(rows)?;
    let scaled_t = tape.transpose(scaled)?;
    let cols = tape.log_softmax_rows(scaled_t)?;
    let col_term = tape.diag_mean(cols)?;
    let total = tape.add(row_term, col_term)?;
    tape.scale(total, E::from_f64(-0.5))
}

/// Tape-level hardest-negative triplet loss over a `[B, B]` similarity
/// matrix, both retrieval directions, averaged. The argmax choice is made on
/// the forward values (it routes the subgradient like max-pooling).
pub fn hardest_triplet_var<E: Element>(tape: &mut Tape<E>, sim: Var, margin: f64) -> Result<Var> {
    let b = tape.shape(sim)[0];
    if tape.shape(sim).len() != 2 || tape.shape(sim)[1] != b {
        return Err(Error::BadShape {
            op: "hardest_triplet",
            shape: tape.shape(sim).to_vec(),
            expected: "square [B, B]".into(),
        });
    }
    if b < 2 {
        return Ok(tape.constant(Tensor::scalar(E::zero())));
    }
    let values = tape.value(sim).clone();
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let hardest_video = (0..b)
            .filter(|&j| j != i)
            .max_by(|&a, &c| {
                values
                    .get2(i, a)
                    .partial_cmp(&values.get2(i, c))
                    .expect("finite")
            })
            .expect("b >= 2");
        let hardest_caption = (0..b)
            .filter(|&k| k != i)
            .max_by(|&a, &c| {
                values
                    .get2(a, i)
                    .partial_cmp(&values.get2(c, i))
                    .expect("finite")
            })
            .expect("b >= 2");
        let pos = tape.get_element(sim, i * b + i)?;
        for neg_idx in [i * b + hardest_video, hardest_caption * b + i] {
            let neg = tape.get_element(sim, neg_idx)?;
            let diff = tape.sub(neg, pos)?;
            let shifted = tape.add_scalar(diff, E::from_f64(margin))?;
            terms.push(tape.relu(shifted)?);
        }
    }
    let stacked = tape.stack_scalars(&terms, vec![terms.len()])?;
    let total = tape.sum_all(stacked)?;
    tape.scale(total, E::from_f64(1.0 / terms.len() as f64))
}

/// Max-over-clips cosine between `q: [1, d]` and `clips: [M_c, d]`.
pub fn clip_similarity_var<E: Element>(tape: &mut Tape<E>, q: Var, clips: Var) -> Result<Var> {
    let eps = E::from_f64(1e-12);
    let qq = tape.mul(q, q)?;
    let sq = tape.sum_all(qq)?;
    let sq = tape.add_scalar(sq, eps)?;
    let q_norm = tape.sqrt(sq)?;
    let clips_t = tape.transpose(clips)?;
    let dots = tape.matmul(q, clips_t)?;
    let cc = tape.mul(clips, clips)?;
    let row_sq = tape.sum_rows(cc)?;
    let row_sq = tape.add_scalar(row_sq, eps)?;
    let norms = tape.sqrt(row_sq)?;
    let norms_row = tape.transpose(norms)?;
    let denom = tape.mul_scalar(norms_row, q_norm)?;
    let inv = tape.recip(denom)?;
    let cosines = tape.mul(dots, inv)?;
    tape.max_all(cosines)
}

/// Full batch loss over `(words, frames)` items on one tape.
pub fn batch_loss<E: Element>(
    tape: &mut Tape<E>,
    model: &MamFusion<E>,
    items: &[(&Tensor<E>, &Tensor<E>)],
    cfg: &TrainConfig,
    toggles: &Toggles,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let b = items.len();
    let mut texts = Vec::with_capacity(b);
    let mut videos = Vec::with_capacity(b);
    for (words, frames) in items {
        texts.push(model.text.forward(tape, words)?);
        videos.push(model.video.forward(tape, frames, toggles)?);
    }

    let mut clip_entries = Vec::with_capacity(b * b);
    let mut vid_entries = Vec::with_capacity(b * b);
    for text in &texts {
        for video in &videos {
            let q = if cfg.fast_mode {
                text.pooled
            } else {
                model
                    .fusion
                    .fuse_pair(
                        tape,
                        text.words,
                        text.pooled,
                        video.frames_temporal,
                        &model.text.pool,
                        toggles,
                    )?
                    .pooled_text
            };
            clip_entries.push(clip_similarity_var(tape, q, video.clips)?);
            vid_entries.push(cosine(tape, q, video.pooled)?);
        }
    }
    let s_clip = tape.stack_scalars(&clip_entries, vec![b, b])?;
    let s_vid = tape.stack_scalars(&vid_entries, vec![b, b])?;

    let mut loss: Option<Var> = None;
    let mut push = |tape: &mut Tape<E>, term: Var| -> Result<()> {
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    if cfg.lambda_trip > 0.0 {
        let t_clip = hardest_triplet_var(tape, s_clip, cfg.margin)?;
        let t_vid = hardest_triplet_var(tape, s_vid, cfg.margin)?;
        let t = tape.add(t_clip, t_vid)?;
        let t = tape.scale(t, E::from_f64(cfg.lambda_trip))?;
        push(tape, t)?;
    }
    if cfg.lambda_nce > 0.0 {
        let n_clip = infonce_var(tape, s_clip, cfg.temperature)?;
        let n_vid = infonce_var(tape, s_vid, cfg.temperature)?;
        let n = tape.add(n_clip, n_vid)?;
        let n = tape.scale(n, E::from_f64(cfg.lambda_nce))?;
        push(tape, n)?;
    }
    Ok(loss.unwrap_or_else(|| tape.constant(Tensor::scalar(E::zero()))))
}

// ── Loss trace ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

/// Per-epoch mean-loss log (the convergence-curve data).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn push(&mut self, epoch: usize, mean_loss: f64, wall_ms: u64) {
        if let Some(last) = self.rows.last() {
            assert!(epoch > last.epoch, "epochs must be strictly increasing");
        }
        self.rows.push(TraceRow {
            epoch,
            mean_loss,
            wall_ms,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,wall_ms\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.epoch, row.mean_loss, row.wall_ms
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue; // header
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::Parse {
                path: "loss trace".into(),
                line: i + 1,
                what: what.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected epoch,mean_loss,wall_ms"));
            }
            rows.push(TraceRow {
                epoch: parts[0].parse().map_err(|_| bad("bad epoch"))?,
                mean_loss: parts[1].parse().map_err(|_| bad("bad mean_loss"))?,
                wall_ms: parts[2].parse().map_err(|_| bad("bad wall_ms"))?,
            });
        }
        for pair in rows.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(Error::Parse {
                    path: "loss trace".into(),
                    line: 0,
                    what: "epochs not strictly increasing".into(),
                });
            }
        }
        Ok(LossTrace { rows })
    }

    /// First epoch whose mean loss is below `fraction` of the first epoch's.
    pub fn epochs_to_fraction(&self, fraction: f64) -> Option<usize> {
        let first = self.rows.first()?.mean_loss;
        self.rows
            .iter()
            .find(|r| r.mean_loss < fraction * first)
            .map(|r| r.epoch)
    }
}

// ── Trainer ──────────────────────────────────────────────────────────────

pub struct Trainer<E: Element> {
    pub model: MamFusion<E>,
    pub cfg: TrainConfig,
    adam: Adam<E>,
    epochs_run: usize,
}

impl<E: Element> Trainer<E> {
    pub fn new(model: MamFusion<E>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        })?;
        Ok(Trainer {
            model,
            cfg,
            adam,
            epochs_run: 0,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    /// One pass over the corpus with parameter updates; returns mean loss.
    pub fn train_epoch(&mut self, corpus: &Corpus<E>) -> Result<f64> {
        self.run_epoch(corpus, true)
    }

    /// Mean loss of the next epoch's batches without updating anything.
    pub fn epoch_loss(&mut self, corpus: &Corpus<E>) -> Result<f64> {
        self.run_epoch(corpus, false)
    }

    fn run_epoch(&mut self, corpus: &Corpus<E>, update: bool) -> Result<f64> {
        if corpus.captions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let video_of: std::collections::HashMap<&str, usize> = corpus
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect();
        let epoch_index = self.epochs_run as u64 + 1;
        let mut order: Vec<usize> = (0..corpus.captions.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ epoch_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let toggles = toggles_from(&self.cfg);
        let mut total = 0.0f64;
        for chunk in order.chunks(self.cfg.batch_size) {
            let items: Vec<(&Tensor<E>, &Tensor<E>)> = chunk
                .iter()
                .map(|&ci| {
                    let caption = &corpus.captions[ci];
                    let vi = *video_of.get(caption.video_id.as_str()).unwrap_or_else(|| {
                        panic!("caption {} references unknown video", caption.id)
                    });
                    (&caption.words, &corpus.videos[vi].frames)
                })
                .collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &self.model, &items, &self.cfg, &toggles)?;
            let value = tape.value(loss).as_scalar().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "train_epoch" });
            }
            total += value * chunk.len() as f64;
            if update {
                let mut grads = tape.backward(loss)?;
                if self.cfg.grad_clip > 0.0 {
                    let norm = grads.global_norm();
                    if norm > self.cfg.grad_clip {
                        grads.scale(E::from_f64(self.cfg.grad_clip / norm));
                    }
                }
                self.model.store_grads(&grads);
                self.adam.step(&mut self.model, &grads);
            }
        }
        if update {
            self.epochs_run += 1;
        }
        Ok(total / corpus.captions.len() as f64)
    }
}

// ── Evaluation ───────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub results: Vec<RetrievalResult>,
    pub zero_norm_events: usize,
}

/// Every caption queries the full video corpus.
pub fn evaluate<E: Element>(
    model: &MamFusion<E>,
    corpus: &Corpus<E>,
    fast_mode: bool,
    toggles: Toggles,
) -> Result<EvalOutcome> {
    if corpus.captions.is_empty() || corpus.videos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let videos: Vec<(String, crate::video_encoder::VideoRepr<E>)> = corpus
        .videos
        .par_iter()
        .map(|v| {
            model
                .encode_video(&v.frames, &toggles)
                .map(|r| (v.id.clone(), r))
        })
        .collect::<Result<_>>()?;
    let texts: Vec<crate::text_encoder::TextRepr<E>> = corpus
        .captions
        .par_iter()
        .map(|c| model.encode_text(&c.words))
        .collect::<Result<_>>()?;

    let scorer = model.scorer(fast_mode, toggles);
    let outcomes: Vec<crate::retrieval::RankOutcome> = corpus
        .captions
        .par_iter()
        .zip(texts.par_iter())
        .map(|(caption, text)| scorer.rank(&caption.id, &caption.video_id, text, &videos))
        .collect::<Result<_>>()?;

    let zero_norm_events = outcomes.iter().map(|o| o.zero_norm_events).sum();
    let results: Vec<RetrievalResult> = outcomes.into_iter().map(|o| o.result).collect();
    let report = MetricsReport::from_results(&results)?;
    Ok(EvalOutcome {
        report,
        results,
        zero_norm_events,
    })
}
