//! Line-oriented corpus manifest: one JSON record per line.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::feature_file;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestCaption {
    pub caption_id: String,
    pub text_feature_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub video_id: String,
    pub video_feature_path: String,
    pub captions: Vec<ManifestCaption>,
}

/// Parsed manifest; feature paths resolve relative to its directory.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl Manifest {
    /// Load and fully validate: unique ids, every referenced file parses.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let origin = path.display().to_string();
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.clone(),
                line: lineno + 1,
                what: e.to_string(),
            })?;
            records.push(record);
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = Manifest { records, root };
        manifest.validate(&origin)?;
        Ok(manifest)
    }

    fn validate(&self, origin: &str) -> Result<()> {
        let mut video_ids = HashSet::new();
        let mut caption_ids = HashSet::new();
        for record in &self.records {
            if !video_ids.insert(&record.video_id) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: 0,
                    what: format!("duplicate video_id '{}'", record.video_id),
                });
            }
            feature_file::validate_feature_file(&self.resolve(&record.video_feature_path))?;
            for caption in &record.captions {
                if !caption_ids.insert(&caption.caption_id) {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: 0,
                        what: format!("duplicate caption_id '{}'", caption.caption_id),
                    });
                }
                feature_file::validate_feature_file(&self.resolve(&caption.text_feature_path))?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(records: &[ManifestRecord], path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in records {
            out.push_str(&serde_json::to_string(record).expect("manifest records serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// A manifest with every feature file loaded into memory.
pub struct Corpus<E: Element> {
    pub videos: Vec<CorpusVideo<E>>,
    pub captions: Vec<CorpusCaption<E>>,
}

pub struct CorpusVideo<E: Element> {
    pub id: String,
    pub frames: Tensor<E>,
}

pub struct CorpusCaption<E: Element> {
    pub id: String,
    pub video_id: String,
    pub words: Tensor<E>,
}

impl<E: Element> Corpus<E> {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut videos = Vec::new();
        let mut captions = Vec::new();
        for record in &manifest.records {
            videos.push(CorpusVideo {
                id: record.video_id.clone(),
                frames: feature_file::read_tensor(&manifest.resolve(&record.video_feature_path))?,
            });
            for caption in &record.captions {
                captions.push(CorpusCaption {
                    id: caption.caption_id.clone(),
                    video_id: record.video_id.clone(),
                    words: feature_file::read_tensor(
                        &manifest.resolve(&caption.text_feature_path),
                    )?,
                });
            }
        }
        if videos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Corpus { videos, captions })
    }
}
