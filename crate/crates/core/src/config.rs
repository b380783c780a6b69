//! Model and training configuration, plus the plain-text run-config file.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Unknown keys are rejected and every value is validated at load time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gmmformer::GaussianBlockConfig;
use crate::ssm::SsmConfig;

/// Architecture shape shared by every module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared embedding width.
    pub d: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub variances: Vec<f64>,
    /// Number of sampled clips in the clip-level branch.
    pub m_c: usize,
    /// Positional-table capacity for captions.
    pub n_max: usize,
    /// Positional-table capacity for frame sequences.
    pub m_f_max: usize,
    /// Incoming text feature width.
    pub d_text: usize,
    /// Incoming video feature width.
    pub d_vid: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Mamba blocks stacked at the end of each branch.
    pub mamba_depth: usize,
    /// Similarity mix between max-clip and whole-video cosine.
    pub w_clip: f64,
    pub w_vid: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            ffn_width: 256,
            variances: vec![0.5, 1.0, 5.0, f64::INFINITY],
            m_c: 32,
            n_max: 64,
            m_f_max: 256,
            d_text: 1024,
            d_vid: 3072,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            mamba_depth: 1,
            w_clip: 0.5,
            w_vid: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("m_c", self.m_c),
            ("n_max", self.n_max),
            ("m_f_max", self.m_f_max),
            ("d_text", self.d_text),
            ("d_vid", self.d_vid),
            ("mamba_depth", self.mamba_depth),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    what: format!("{name} must be positive"),
                });
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config {
                what: format!("d = {} must be divisible by heads = {}", self.d, self.heads),
            });
        }
        self.gaussian_config().validate()?;
        self.ssm_config().validate()?;
        if self.w_clip < 0.0 || self.w_vid < 0.0 || (self.w_clip + self.w_vid - 1.0).abs() > 1e-9 {
            return Err(Error::Config {
                what: format!(
                    "similarity weights must be nonnegative and sum to 1, got {} + {}",
                    self.w_clip, self.w_vid
                ),
            });
        }
        Ok(())
    }

    pub fn gaussian_config(&self) -> GaussianBlockConfig {
        GaussianBlockConfig {
            variances: self.variances.clone(),
            heads: self.heads,
            d: self.d,
            ffn_width: self.ffn_width,
        }
    }

    pub fn ssm_config(&self) -> SsmConfig {
        SsmConfig {
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            d: self.d,
        }
    }
}

/// Training hyperparameters and module toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub margin: f64,
    pub temperature: f64,
    pub lambda_trip: f64,
    pub lambda_nce: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Score with the unfused sentence vector (skips pairwise fusion).
    pub fast_mode: bool,
    pub enable_mamba: bool,
    pub enable_ttv: bool,
    pub enable_tvt: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            margin: 0.2,
            temperature: 0.07,
            lambda_trip: 1.0,
            lambda_nce: 1.0,
            batch_size: 8,
            epochs: 100,
            seed: 42,
            fast_mode: false,
            enable_mamba: true,
            enable_ttv: true,
            enable_tvt: true,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(Error::Config {
                what: "margin must be >= 0".into(),
            });
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config {
                what: "temperature must be > 0".into(),
            });
        }
        if self.lambda_trip < 0.0 || self.lambda_nce < 0.0 {
            return Err(Error::Config {
                what: "loss weights must be >= 0".into(),
            });
        }
        if self.lr < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config {
                what: "lr and grad_clip must be >= 0".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                what: "batch_size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One parsed run-config file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optional default corpus manifest (used by `heatmap`, overridable).
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
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
            cfg.assign(key, value).map_err(|e| err(e.to_string()))?;
        }
        let wrap = |e: Error| match e {
            Error::Config { what } => Error::Parse {
                path: origin.to_string(),
                line: 0,
                what,
            },
            other => other,
        };
        cfg.model.validate().map_err(wrap)?;
        cfg.train.validate().map_err(wrap)?;
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config {
                what: format!("expected integer, got '{v}'"),
            })
        }
        fn real(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config {
                what: format!("expected number, got '{v}'"),
            })
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config {
                    what: format!("expected true/false, got '{v}'"),
                }),
            }
        }
        match key {
            "d" => self.model.d = int(value)?,
            "heads" => self.model.heads = int(value)?,
            "ffn_width" => self.model.ffn_width = int(value)?,
            "variances" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part == "inf" {
                        out.push(f64::INFINITY);
                    } else {
                        out.push(real(part)?);
                    }
                }
                self.model.variances = out;
            }
            "m_c" => self.model.m_c = int(value)?,
            "n_max" => self.model.n_max = int(value)?,
            "m_f_max" => self.model.m_f_max = int(value)?,
            "d_text" => self.model.d_text = int(value)?,
            "d_vid" => self.model.d_vid = int(value)?,
            "d_state" => self.model.d_state = int(value)?,
            "d_conv" => self.model.d_conv = int(value)?,
            "expand" => self.model.expand = int(value)?,
            "mamba_depth" => self.model.mamba_depth = int(value)?,
            "w_clip" => self.model.w_clip = real(value)?,
            "w_vid" => self.model.w_vid = real(value)?,
            "lr" => self.train.lr = real(value)?,
            "margin" => self.train.margin = real(value)?,
            "temperature" => self.train.temperature = real(value)?,
            "lambda_trip" => self.train.lambda_trip = real(value)?,
            "lambda_nce" => self.train.lambda_nce = real(value)?,
            "batch_size" => self.train.batch_size = int(value)?,
            "epochs" => self.train.epochs = int(value)?,
            "seed" => {
                self.train.seed = value.parse().map_err(|_| Error::Config {
                    what: format!("expected integer, got '{value}'"),
                })?
            }
            "fast_mode" => self.train.fast_mode = boolean(value)?,
            "enable_mamba" => self.train.enable_mamba = boolean(value)?,
            "enable_ttv" => self.train.enable_ttv = boolean(value)?,
            "enable_tvt" => self.train.enable_tvt = boolean(value)?,
            "grad_clip" => self.train.grad_clip = real(value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            other => {
                return Err(Error::Config {
                    what: format!("unknown key '{other}'"),
                });
            }
        }
        Ok(())
    }

    /// Render back to the file format (round-trips through [`Self::parse`]).
    pub fn to_file_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let variances = m
            .variances
            .iter()
            .map(|v| {
                if v.is_infinite() {
                    "inf".to_string()
                } else {
                    v.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "d = {}", m.d);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "ffn_width = {}", m.ffn_width);
        let _ = writeln!(s, "variances = {}", variances);
        let _ = writeln!(s, "m_c = {}", m.m_c);
        let _ = writeln!(s, "n_max = {}", m.n_max);
        let _ = writeln!(s, "m_f_max = {}", m.m_f_max);
        let _ = writeln!(s, "d_text = {}", m.d_text);
        let _ = writeln!(s, "d_vid = {}", m.d_vid);
        let _ = writeln!(s, "d_state = {}", m.d_state);
        let _ = writeln!(s, "d_conv = {}", m.d_conv);
        let _ = writeln!(s, "expand = {}", m.expand);
        let _ = writeln!(s, "mamba_depth = {}", m.mamba_depth);
        let _ = writeln!(s, "w_clip = {}", m.w_clip);
        let _ = writeln!(s, "w_vid = {}", m.w_vid);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "margin = {}", t.margin);
        let _ = writeln!(s, "temperature = {}", t.temperature);
        let _ = writeln!(s, "lambda_trip = {}", t.lambda_trip);
        let _ = writeln!(s, "lambda_nce = {}", t.lambda_nce);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "fast_mode = {}", t.fast_mode);
        let _ = writeln!(s, "enable_mamba = {}", t.enable_mamba);
        let _ = writeln!(s, "enable_ttv = {}", t.enable_ttv);
        let _ = writeln!(s, "enable_tvt = {}", t.enable_tvt);
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
        if let Some(p) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", p.display());
        }
        s
    }
}
