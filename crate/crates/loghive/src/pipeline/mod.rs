//! Agent-side log processing: template learning, lossless compression,
//! and CBE normalization with level-1 and level-2 metadata.

mod batch;
mod cbe;
mod templates;

pub use batch::CompressedBatch;
pub use cbe::{
    attach_metadata_l1, events_to_xml, normalize_to_cbe, severity_from_syslog, CbeEvent,
    DataQuality, DeviceMeta, MetadataL1, DEFAULT_SEVERITY,
};
pub use templates::{
    compress, decompress, Record, Template, TemplateDictionary, TemplateToken, DEFAULT_LEARNING_WINDOW,
    DEFAULT_THETA, PLACEHOLDER,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("corruption: {0}")]
    Corruption(String),
    #[error("decode: {0}")]
    Decode(String),
}

/// Per-device compression pipeline.
///
/// Frequencies are learned over a window of the earliest lines (the
/// dictionary is re-learned as the window fills, so early small batches
/// still benefit from later statistics); once the window is full the
/// dictionary only grows by new-pattern extension. Every produced batch
/// carries its own dictionary snapshot, so records never reference
/// templates a receiver has not seen.
pub struct LineProcessor {
    theta: f64,
    window: usize,
    learning_corpus: Vec<String>,
    window_full: bool,
    dict: Option<TemplateDictionary>,
}

impl LineProcessor {
    pub fn new(theta: f64, window: usize) -> LineProcessor {
        LineProcessor {
            theta,
            window: window.max(1),
            learning_corpus: Vec::new(),
            window_full: false,
            dict: None,
        }
    }

    /// Number of templates currently known.
    pub fn template_count(&self) -> usize {
        self.dict.as_ref().map(|d| d.len()).unwrap_or(0)
    }

    /// Compress one batch of raw lines.
    pub fn process_batch<S: AsRef<str>>(&mut self, lines: &[S]) -> Result<CompressedBatch, PipelineError> {
        if lines.is_empty() {
            return Err(PipelineError::Validation("empty batch".into()));
        }
        if !self.window_full {
            for line in lines {
                if self.learning_corpus.len() >= self.window {
                    self.window_full = true;
                    break;
                }
                self.learning_corpus.push(line.as_ref().to_string());
            }
            self.dict = Some(TemplateDictionary::learn(&self.learning_corpus, self.theta)?);
            if self.learning_corpus.len() >= self.window {
                self.window_full = true;
                self.learning_corpus = Vec::new();
            }
        }
        let dict = self.dict.as_mut().expect("dictionary learned above");
        let records = compress(lines, dict);
        Ok(CompressedBatch {
            dictionary: dict.clone(),
            records,
        })
    }
}
