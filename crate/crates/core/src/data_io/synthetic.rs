//! Synthetic partially-relevant corpus.
//!
//! Every video hides one latent event vector in a contiguous span of its
//! frames; the rest of the frames are noise. Each caption is a noisy linear
//! projection of the same latent, so caption-video relevance is real but
//! partial, which is exactly the structure a max-over-clips similarity can
//! exploit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_io::feature_file::write_feature_file;
use crate::data_io::manifest::{Manifest, ManifestCaption, ManifestRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    /// Inclusive frame-count range per video.
    pub frames_per_video: (usize, usize),
    /// Inclusive word-count range per caption.
    pub caption_len: (usize, usize),
    pub d_vid: usize,
    pub d_text: usize,
    /// Fraction of frames carrying the latent event, in (0, 1].
    pub relevant_span: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 32,
            frames_per_video: (12, 20),
            caption_len: (3, 8),
            d_vid: 24,
            d_text: 16,
            relevant_span: 0.4,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parse the `key = value` spec-file format (same grammar as run
    /// configs: `#` comments, unknown keys rejected).
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |what: String| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                what,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Config {
                    what: format!("expected integer, got '{v}'"),
                })
            };
            let real = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config {
                    what: format!("expected number, got '{v}'"),
                })
            };
            (match key {
                "n_videos" => int(value).map(|v| spec.n_videos = v),
                "frames_min" => int(value).map(|v| spec.frames_per_video.0 = v),
                "frames_max" => int(value).map(|v| spec.frames_per_video.1 = v),
                "caption_min" => int(value).map(|v| spec.caption_len.0 = v),
                "caption_max" => int(value).map(|v| spec.caption_len.1 = v),
                "d_vid" => int(value).map(|v| spec.d_vid = v),
                "d_text" => int(value).map(|v| spec.d_text = v),
                "relevant_span" => real(value).map(|v| spec.relevant_span = v),
                "noise_sigma" => real(value).map(|v| spec.noise_sigma = v),
                "seed" => value
                    .parse()
                    .map(|v| spec.seed = v)
                    .map_err(|_| Error::Config {
                        what: format!("expected integer, got '{value}'"),
                    }),
                other => Err(Error::Config {
                    what: format!("unknown key '{other}'"),
                }),
            })
            .map_err(|e| err(e.to_string()))?;
        }
        spec.validate().map_err(|e| match e {
            Error::Config { what } => Error::Parse {
                path: origin.to_string(),
                line: 0,
                what,
            },
            other => other,
        })?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_file_string(&self) -> String {
        format!(
            "n_videos = {}\nframes_min = {}\nframes_max = {}\ncaption_min = {}\ncaption_max = {}\nd_vid = {}\nd_text = {}\nrelevant_span = {}\nnoise_sigma = {}\nseed = {}\n",
            self.n_videos,
            self.frames_per_video.0,
            self.frames_per_video.1,
            self.caption_len.0,
            self.caption_len.1,
            self.d_vid,
            self.d_text,
            self.relevant_span,
            self.noise_sigma,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.d_vid == 0 || self.d_text == 0 {
            return Err(Error::Config {
                what: "n_videos and dims must be positive".into(),
            });
        }
        if self.frames_per_video.0 == 0 || self.frames_per_video.0 > self.frames_per_video.1 {
            return Err(Error::Config {
                what: "bad frames_per_video range".into(),
            });
        }
        if self.caption_len.0 == 0 || self.caption_len.0 > self.caption_len.1 {
            return Err(Error::Config {
                what: "bad caption_len range".into(),
            });
        }
        if !(self.relevant_span > 0.0 && self.relevant_span <= 1.0) {
            return Err(Error::Config {
                what: "relevant_span must lie in (0, 1]".into(),
            });
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config {
                what: "noise_sigma must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Write feature files plus `manifest.jsonl` into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let draw = |rng: &mut ChaCha8Rng| -> f64 { normal.sample(rng) };

    // shared projection from video latent space to text feature space
    let scale = 1.0 / (spec.d_vid as f64).sqrt();
    let proj: Vec<f64> = (0..spec.d_vid * spec.d_text)
        .map(|_| draw(&mut rng) * scale)
        .collect();

    let mut records = Vec::with_capacity(spec.n_videos);
    for vi in 0..spec.n_videos {
        let m_f = rng.gen_range(spec.frames_per_video.0..=spec.frames_per_video.1);
        let latent: Vec<f64> = (0..spec.d_vid).map(|_| draw(&mut rng)).collect();
        let span_len = ((spec.relevant_span * m_f as f64).round() as usize).clamp(1, m_f);
        let start = rng.gen_range(0..=m_f - span_len);

        let mut frames = Vec::with_capacity(m_f * spec.d_vid);
        for t in 0..m_f {
            let relevant = t >= start && t < start + span_len;
            for latent_j in latent.iter().take(spec.d_vid) {
                let v = if relevant {
                    latent_j + spec.noise_sigma * draw(&mut rng)
                } else {
                    draw(&mut rng)
                };
                frames.push(v as f32);
            }
        }
        let video_name = format!("video_{vi:04}.mmft");
        write_feature_file(
            &out_dir.join(&video_name),
            m_f as u32,
            spec.d_vid as u32,
            &frames,
        )?;

        let n_words = rng.gen_range(spec.caption_len.0..=spec.caption_len.1);
        let mut words = Vec::with_capacity(n_words * spec.d_text);
        for _ in 0..n_words {
            for j in 0..spec.d_text {
                let mut v = 0.0;
                for (i, latent_i) in latent.iter().enumerate() {
                    v += latent_i * proj[i * spec.d_text + j];
                }
                words.push((v + spec.noise_sigma * draw(&mut rng)) as f32);
            }
        }
        let caption_name = format!("caption_{vi:04}.mmft");
        write_feature_file(
            &out_dir.join(&caption_name),
            n_words as u32,
            spec.d_text as u32,
            &words,
        )?;

        records.push(ManifestRecord {
            video_id: format!("v{vi:04}"),
            video_feature_path: video_name,
            captions: vec![ManifestCaption {
                caption_id: format!("c{vi:04}"),
                text_feature_path: caption_name,
                raw_text: None,
            }],
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::save(&records, &manifest_path)?;
    Manifest::load(&manifest_path)
}
