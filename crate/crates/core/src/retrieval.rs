//! Similarity scoring, ranking and the R@K / SumR evaluation metrics.

use crate::error::{Error, Result};
use crate::fusion::{FusedPair, Fusion};
use crate::nn::Param;
use crate::tape::{Tape, Var};
use crate::tensor::Element;
use crate::text_encoder::TextRepr;
use crate::video_encoder::{Toggles, VideoRepr};

/// Norm guard added under the square root of every cosine denominator;
/// a zero vector then scores exactly 0.
const NORM_EPS: f64 = 1e-12;

/// Cosine similarity of two `[1, d]` rows as a scalar var.
pub fn cosine<E: Element>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    let eps = E::from_f64(NORM_EPS);
    let aa = tape.mul(a, a)?;
    let sa = tape.sum_all(aa)?;
    let sa = tape.add_scalar(sa, eps)?;
    let na = tape.sqrt(sa)?;
    let bb = tape.mul(b, b)?;
    let sb = tape.sum_all(bb)?;
    let sb = tape.add_scalar(sb, eps)?;
    let nb = tape.sqrt(sb)?;
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_all(ab)?;
    let denom = tape.mul(na, nb)?;
    let inv = tape.recip(denom)?;
    tape.mul(dot, inv)
}

/// Combined similarity on the tape:
/// `w_clip * max_i cos(q, clips[i]) + w_vid * cos(q, video_vec)`.
///
/// `q` and `video_vec` are `[1, d]`, `clips` is `[M_c, d]`.
pub fn pair_similarity_var<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    clips: Var,
    video_vec: Var,
    w_clip: f64,
    w_vid: f64,
) -> Result<Var> {
    if w_clip < 0.0 || w_vid < 0.0 || (w_clip + w_vid - 1.0).abs() > 1e-9 {
        return Err(Error::Config {
            what: format!(
                "similarity weights must be nonnegative and sum to 1, got {w_clip} + {w_vid}"
            ),
        });
    }
    let eps = E::from_f64(NORM_EPS);

    let qq = tape.mul(q, q)?;
    let sq = tape.sum_all(qq)?;
    let sq = tape.add_scalar(sq, eps)?;
    let q_norm = tape.sqrt(sq)?;

    // cosines against every clip row at once
    let clips_t = tape.transpose(clips)?;
    let dots = tape.matmul(q, clips_t)?;
    let cc = tape.mul(clips, clips)?;
    let row_sq = tape.sum_rows(cc)?;
    let row_sq = tape.add_scalar(row_sq, eps)?;
    let clip_norms = tape.sqrt(row_sq)?;
    let clip_norms_row = tape.transpose(clip_norms)?;
    let denom = tape.mul_scalar(clip_norms_row, q_norm)?;
    let inv = tape.recip(denom)?;
    let clip_cosines = tape.mul(dots, inv)?;
    let clip_best = tape.max_all(clip_cosines)?;

    let video_cos = cosine(tape, q, video_vec)?;

    let clip_term = tape.scale(clip_best, E::from_f64(w_clip))?;
    let video_term = tape.scale(video_cos, E::from_f64(w_vid))?;
    tape.add(clip_term, video_term)
}

/// Pairwise scorer: fusion parameters plus scoring configuration.
pub struct Scorer<'a, E: Element> {
    pub fusion: &'a Fusion<E>,
    pub text_pool: &'a Param<E>,
    pub w_clip: f64,
    pub w_vid: f64,
    /// Score with the unfused sentence vector (no pairwise fusion).
    pub fast_mode: bool,
    pub toggles: Toggles,
}

/// One scored pair.
pub struct PairScore<E: Element> {
    pub score: f64,
    /// Present unless `fast_mode` skipped fusion entirely.
    pub fused: Option<FusedPair<E>>,
    /// Count of exactly-zero-norm vectors met while scoring.
    pub zero_norm_events: usize,
}

/// Ranking of one query over a corpus plus scoring diagnostics.
pub struct RankOutcome {
    pub result: RetrievalResult,
    pub zero_norm_events: usize,
}

impl<E: Element> Scorer<'_, E> {
    /// Fuse one (query, video) pair and score it.
    pub fn score_pair(&self, text: &TextRepr<E>, video: &VideoRepr<E>) -> Result<PairScore<E>> {
        let mut tape = Tape::new();
        let d = text.pooled.numel();
        let clips = tape.constant(video.clips.clone());
        let video_vec = tape.constant(video.pooled.clone().reshaped(vec![1, d])?);

        let (q, fused) = if self.fast_mode {
            let q = tape.constant(text.pooled.clone().reshaped(vec![1, d])?);
            (q, None)
        } else {
            let words = tape.constant(text.words.clone());
            let sentence = tape.constant(text.pooled.clone().reshaped(vec![1, d])?);
            let frames = tape.constant(video.frames_temporal.clone());
            let vars = self.fusion.fuse_pair(
                &mut tape,
                words,
                sentence,
                frames,
                self.text_pool,
                &self.toggles,
            )?;
            let pair = Fusion::extract(&tape, &vars)?;
            (vars.pooled_text, Some(pair))
        };

        let score_var =
            pair_similarity_var(&mut tape, q, clips, video_vec, self.w_clip, self.w_vid)?;
        let score = tape.value(score_var).as_scalar().as_f64();
        if !score.is_finite() {
            return Err(Error::NonFinite {
                op: "pair_similarity",
            });
        }

        let mut zero_norm_events = 0;
        let q_values = tape.value(q);
        if is_zero(q_values.data()) {
            zero_norm_events += 1;
        }
        if is_zero(video.pooled.data()) {
            zero_norm_events += 1;
        }
        for i in 0..video.clips.shape()[0] {
            if is_zero(video.clips.row(i)) {
                zero_norm_events += 1;
            }
        }
        Ok(PairScore {
            score,
            fused,
            zero_norm_events,
        })
    }

    /// Score a query against the whole corpus; descending score, ties broken
    /// by ascending video id.
    pub fn rank(
        &self,
        query_id: &str,
        target_id: &str,
        text: &TextRepr<E>,
        corpus: &[(String, VideoRepr<E>)],
    ) -> Result<RankOutcome> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut zero_norm_events = 0;
        let mut ranking = Vec::with_capacity(corpus.len());
        for (video_id, video) in corpus {
            let pair = self.score_pair(text, video)?;
            zero_norm_events += pair.zero_norm_events;
            ranking.push((video_id.clone(), pair.score));
        }
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(RankOutcome {
            result: RetrievalResult {
                query_id: query_id.to_string(),
                target_id: target_id.to_string(),
                ranking,
            },
            zero_norm_events,
        })
    }
}

fn is_zero<E: Element>(data: &[E]) -> bool {
    data.iter().all(|&v| v == E::zero())
}

/// Ranked corpus for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub target_id: String,
    /// `(video_id, score)`, scores non-increasing.
    pub ranking: Vec<(String, f64)>,
}

impl RetrievalResult {
    /// 0-based position of the target video.
    pub fn target_rank(&self) -> Option<usize> {
        self.ranking
            .iter()
            .position(|(id, _)| *id == self.target_id)
    }
}

/// Percentage of queries whose target lands in the top `k`.
pub fn recall_at_k(results: &[RetrievalResult], k: usize) -> f64 {
    assert!(k >= 1, "recall_at_k requires k >= 1");
    assert!(!results.is_empty(), "recall over no queries");
    let hits = results
        .iter()
        .filter(|r| matches!(r.target_rank(), Some(rank) if rank < k))
        .count();
    100.0 * hits as f64 / results.len() as f64
}

/// The four recall rates and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r100: f64,
    pub sum_r: f64,
}

impl MetricsReport {
    pub fn from_recalls(r1: f64, r5: f64, r10: f64, r100: f64) -> Self {
        MetricsReport {
            r1,
            r5,
            r10,
            r100,
            sum_r: r1 + r5 + r10 + r100,
        }
    }

    pub fn from_results(results: &[RetrievalResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::from_recalls(
            recall_at_k(results, 1),
            recall_at_k(results, 5),
            recall_at_k(results, 10),
            recall_at_k(results, 100),
        ))
    }

    /// Flat `key=value` lines (the report-file format).
    pub fn to_key_value(&self) -> String {
        format!(
            "r1={}\nr5={}\nr10={}\nr100={}\nsum_r={}\n",
            self.r1, self.r5, self.r10, self.r100, self.sum_r
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result(query: &str, target: &str, ids_scores: &[(&str, f64)]) -> RetrievalResult {
        RetrievalResult {
            query_id: query.into(),
            target_id: target.into(),
            ranking: ids_scores
                .iter()
                .map(|(i, s)| (i.to_string(), *s))
                .collect(),
        }
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap());
        let c = cosine(&mut tape, v, v).unwrap();
        assert!((tape.value(c).as_scalar() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![1, 3]));
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let c = cosine(&mut tape, z, v).unwrap();
        assert_eq!(tape.value(c).as_scalar(), 0.0);
    }

    #[test]
    fn similarity_is_one_when_query_matches_clip_and_video() {
        let v = vec![0.5, -1.0, 2.0, 0.25];
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(std::slice::from_ref(&v)).unwrap());
        let clips =
            tape.constant(Tensor::from_rows(&[vec![9.0, 9.0, 9.0, 9.0], v.clone()]).unwrap());
        let vid = tape.constant(Tensor::from_rows(std::slice::from_ref(&v)).unwrap());
        let s = pair_similarity_var(&mut tape, q, clips, vid, 0.5, 0.5).unwrap();
        assert!((tape.value(s).as_scalar() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_is_zero_on_orthogonal_inputs() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap());
        let clips = tape.constant(
            Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap(),
        );
        let vid = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 1.0]]).unwrap());
        let s = pair_similarity_var(&mut tape, q, clips, vid, 0.5, 0.5).unwrap();
        assert!(tape.value(s).as_scalar().abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_exhaustive_clip_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let d = 6;
            let m_c = 5;
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let clips: Vec<Vec<f64>> = (0..m_c)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let vid: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let cos = |a: &[f64], b: &[f64]| -> f64 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let best = clips.iter().map(|c| cos(&q, c)).fold(f64::MIN, f64::max);
            let want = 0.3 * best + 0.7 * cos(&q, &vid);

            let mut tape = Tape::<f64>::new();
            let qv = tape.constant(Tensor::from_rows(std::slice::from_ref(&q)).unwrap());
            let cv = tape.constant(Tensor::from_rows(&clips).unwrap());
            let vv = tape.constant(Tensor::from_rows(std::slice::from_ref(&vid)).unwrap());
            let s = pair_similarity_var(&mut tape, qv, cv, vv, 0.3, 0.7).unwrap();
            assert!((tape.value(s).as_scalar() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_rejects_bad_weights() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(vec![1, 3]));
        let c = tape.constant(Tensor::zeros(vec![2, 3]));
        let v = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(pair_similarity_var(&mut tape, q, c, v, 0.6, 0.6).is_err());
        assert!(pair_similarity_var(&mut tape, q, c, v, -0.5, 1.5).is_err());
    }

    #[test]
    fn recall_counts_top_k_membership() {
        // 10 queries, 3 with the target first
        let mut results = Vec::new();
        for i in 0..10 {
            let target_first = i < 3;
            let ranking: Vec<(&str, f64)> = if target_first {
                vec![("t", 0.9), ("x", 0.5)]
            } else {
                vec![("x", 0.9), ("t", 0.5)]
            };
            results.push(result(&format!("q{i}"), "t", &ranking));
        }
        assert_eq!(recall_at_k(&results, 1), 30.0);
        assert_eq!(recall_at_k(&results, 2), 100.0);
    }

    #[test]
    fn rank_three_counts_from_five_up() {
        let r = result("q", "t", &[("a", 0.9), ("b", 0.8), ("t", 0.7), ("c", 0.6)]);
        let results = vec![r];
        assert_eq!(recall_at_k(&results, 1), 0.0);
        assert_eq!(recall_at_k(&results, 5), 100.0);
        assert_eq!(recall_at_k(&results, 10), 100.0);
        assert_eq!(recall_at_k(&results, 100), 100.0);
    }

    #[test]
    fn recall_matches_brute_force_count_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let corpus: Vec<String> = (0..12).map(|i| format!("v{i:02}")).collect();
            let queries = 8;
            let mut results = Vec::new();
            for qi in 0..queries {
                let mut scored: Vec<(String, f64)> = corpus
                    .iter()
                    .map(|id| (id.clone(), rng.gen_range(0.0..1.0)))
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                let target = corpus[rng.gen_range(0..corpus.len())].clone();
                results.push(RetrievalResult {
                    query_id: format!("q{qi}"),
                    target_id: target,
                    ranking: scored,
                });
            }
            let mut last = 0.0;
            for k in [1usize, 2, 3, 5, 10, 100] {
                let got = recall_at_k(&results, k);
                let want = 100.0
                    * results
                        .iter()
                        .filter(|r| r.ranking.iter().take(k).any(|(id, _)| *id == r.target_id))
                        .count() as f64
                    / results.len() as f64;
                assert_eq!(got, want);
                assert!(got >= last, "recall must be monotone in K");
                last = got;
            }
        }
    }

    #[test]
    fn sum_r_reproduces_reported_arithmetic() {
        // published retrieval tables sum to one decimal; the fp sum agrees
        // within 1e-9 and sum_r always equals the literal fp sum of the parts
        let a = MetricsReport::from_recalls(8.0, 25.4, 37.2, 76.8);
        assert!((a.sum_r - 147.4).abs() < 1e-9);
        assert_eq!(a.sum_r, a.r1 + a.r5 + a.r10 + a.r100);

        let c = MetricsReport::from_recalls(2.0, 8.8, 14.2, 51.5);
        assert!((c.sum_r - 76.5).abs() < 1e-9);
        assert_eq!(c.sum_r, c.r1 + c.r5 + c.r10 + c.r100);

        let z = MetricsReport::from_recalls(0.0, 0.0, 0.0, 0.0);
        assert_eq!(z.sum_r, 0.0);
    }

    #[test]
    fn report_orders_and_serializes() {
        let r = result("q", "t", &[("t", 0.9), ("b", 0.5), ("c", 0.1)]);
        let report = MetricsReport::from_results(&[r]).unwrap();
        assert_eq!(report.r1, 100.0);
        assert!(report.r1 <= report.r5 && report.r5 <= report.r10 && report.r10 <= report.r100);
        let text = report.to_key_value();
        assert!(text.contains("r1=100"));
        assert!(text.contains("sum_r=400"));
        assert!(MetricsReport::from_results(&[]).is_err());
    }
}
