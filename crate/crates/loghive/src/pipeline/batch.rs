//! Serialized form of a compressed batch: a dictionary section (the
//! template list in ID order) followed by the record section. Integers
//! are minimal-form LEB128 varints; the encoding is canonical, so
//! re-encoding a decoded batch reproduces the input bytes.

use super::templates::{Record, Template, TemplateDictionary, TemplateToken};
use super::PipelineError;

pub const BATCH_MAGIC: [u8; 4] = *b"LHB1";
pub const BATCH_VERSION: u8 = 1;

const TAG_FIXED: u8 = 0;
const TAG_VAR: u8 = 1;

/// Longest token or variable we accept when decoding untrusted input.
const MAX_STRING_LEN: usize = 1 << 20;

/// A dictionary snapshot plus the per-line records encoded against it.
#[derive(Debug, Clone)]
pub struct CompressedBatch {
    pub dictionary: TemplateDictionary,
    pub records: Vec<Record>,
}

impl CompressedBatch {
    /// Reconstruct the original lines, in line-number order.
    pub fn decompress(&self) -> Result<Vec<String>, PipelineError> {
        super::templates::decompress(&self.dictionary, &self.records)
    }

    /// Serialized size divided by the raw corpus size it encodes.
    pub fn compression_ratio(&self, raw_bytes: usize) -> f64 {
        if raw_bytes == 0 {
            return 1.0;
        }
        self.encode().len() as f64 / raw_bytes as f64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BATCH_MAGIC);
        out.push(BATCH_VERSION);
        put_varint(&mut out, self.dictionary.len() as u64);
        for template in self.dictionary.templates() {
            put_varint(&mut out, template.tokens().len() as u64);
            for token in template.tokens() {
                match token {
                    TemplateToken::Fixed(s) => {
                        out.push(TAG_FIXED);
                        put_varint(&mut out, s.len() as u64);
                        out.extend_from_slice(s.as_bytes());
                    }
                    TemplateToken::Var => out.push(TAG_VAR),
                }
            }
        }
        put_varint(&mut out, self.records.len() as u64);
        for record in &self.records {
            put_varint(&mut out, record.line_no);
            put_varint(&mut out, record.template_id as u64);
            for (variable, position) in record.variables.iter().zip(&record.positions) {
                put_varint(&mut out, variable.len() as u64);
                out.extend_from_slice(variable.as_bytes());
                put_varint(&mut out, *position as u64);
            }
        }
        out
    }

    /// Parse a batch from untrusted bytes. The whole buffer must be
    /// consumed; record variable counts come from their template, so a
    /// decoded batch always satisfies the count invariants.
    pub fn decode(bytes: &[u8]) -> Result<CompressedBatch, PipelineError> {
        let mut pos = 0usize;
        if bytes.len() < 5 || bytes[..4] != BATCH_MAGIC {
            return Err(PipelineError::Decode("bad batch magic".into()));
        }
        pos += 4;
        if bytes[pos] != BATCH_VERSION {
            return Err(PipelineError::Decode(format!(
                "unsupported batch version {}",
                bytes[pos]
            )));
        }
        pos += 1;

        let template_count = get_varint(bytes, &mut pos)?;
        let mut templates = Vec::new();
        for _ in 0..template_count {
            let token_count = get_varint(bytes, &mut pos)?;
            if token_count == 0 {
                return Err(PipelineError::Decode("template with no tokens".into()));
            }
            let mut tokens = Vec::new();
            for _ in 0..token_count {
                match take(bytes, &mut pos, 1)?[0] {
                    TAG_FIXED => {
                        let s = take_string(bytes, &mut pos)?;
                        tokens.push(TemplateToken::Fixed(s));
                    }
                    TAG_VAR => tokens.push(TemplateToken::Var),
                    other => {
                        return Err(PipelineError::Decode(format!("bad token tag {other}")))
                    }
                }
            }
            templates.push(Template::new(tokens).map_err(|e| PipelineError::Decode(e.to_string()))?);
        }
        let dictionary = TemplateDictionary::from_templates(templates);

        let record_count = get_varint(bytes, &mut pos)?;
        let mut records = Vec::new();
        for _ in 0..record_count {
            let line_no = get_varint(bytes, &mut pos)?;
            if line_no == 0 {
                return Err(PipelineError::Decode("line numbers are 1-based".into()));
            }
            let template_id = get_varint(bytes, &mut pos)?;
            let template_id = u32::try_from(template_id)
                .map_err(|_| PipelineError::Decode("template id overflow".into()))?;
            let template = dictionary
                .template(template_id)
                .ok_or_else(|| PipelineError::Decode(format!("unknown template id {template_id}")))?;
            let var_count = template.placeholder_count();
            let mut variables = Vec::with_capacity(var_count);
            let mut positions = Vec::with_capacity(var_count);
            for _ in 0..var_count {
                variables.push(take_string(bytes, &mut pos)?);
                let position = get_varint(bytes, &mut pos)?;
                positions.push(
                    u32::try_from(position)
                        .map_err(|_| PipelineError::Decode("position overflow".into()))?,
                );
            }
            records.push(Record {
                line_no,
                template_id,
                variables,
                positions,
            });
        }
        if pos != bytes.len() {
            return Err(PipelineError::Decode(format!(
                "{} trailing bytes after batch",
                bytes.len() - pos
            )));
        }
        Ok(CompressedBatch {
            dictionary,
            records,
        })
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], PipelineError> {
    if bytes.len() - *pos < n {
        return Err(PipelineError::Decode("batch truncated".into()));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_string(bytes: &[u8], pos: &mut usize) -> Result<String, PipelineError> {
    let len = get_varint(bytes, pos)? as usize;
    if len > MAX_STRING_LEN {
        return Err(PipelineError::Decode(format!("string length {len} too large")));
    }
    let raw = take(bytes, pos, len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| PipelineError::Decode("invalid UTF-8".into()))
}

pub(crate) fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Minimal-form LEB128: redundant encodings (trailing zero groups, more
/// than ten bytes) are rejected so every value has exactly one encoding.
pub(crate) fn get_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, PipelineError> {
    let mut value = 0u64;
    let mut shift = 0u32;
    let mut consumed = 0usize;
    loop {
        let byte = *bytes
            .get(*pos + consumed)
            .ok_or_else(|| PipelineError::Decode("varint truncated".into()))?;
        consumed += 1;
        let bits = (byte & 0x7f) as u64;
        if shift == 63 && bits > 1 {
            return Err(PipelineError::Decode("varint overflow".into()));
        }
        value |= bits << shift;
        if byte & 0x80 == 0 {
            if consumed > 1 && byte == 0 {
                return Err(PipelineError::Decode("non-minimal varint".into()));
            }
            *pos += consumed;
            return Ok(value);
        }
        shift += 7;
        if shift > 63 {
            return Err(PipelineError::Decode("varint too long".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::templates::{compress, TemplateDictionary, DEFAULT_THETA};
    use super::*;
    use proptest::prelude::*;

    fn batch_for(lines: &[&str]) -> CompressedBatch {
        let mut dict = TemplateDictionary::learn(lines, DEFAULT_THETA).unwrap();
        let records = compress(lines, &mut dict);
        CompressedBatch {
            dictionary: dict,
            records,
        }
    }

    #[test]
    fn encode_decode_decompress_round_trip() {
        let lines = [
            "Server alpha is down",
            "Server bravo is down",
            "User carol is connected in terminal tty3",
            "",
            "  odd   whitespace\tline",
        ];
        let batch = batch_for(&lines);
        let bytes = batch.encode();
        let decoded = CompressedBatch::decode(&bytes).unwrap();
        assert_eq!(decoded.decompress().unwrap(), lines);
        // canonical: re-encoding reproduces the bytes
        assert_eq!(decoded.encode(), bytes);
    }

    #[test]
    fn truncations_and_garbage_rejected() {
        let batch = batch_for(&["Server alpha is down", "Server bravo is down"]);
        let bytes = batch.encode();
        for cut in 0..bytes.len() {
            assert!(CompressedBatch::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(CompressedBatch::decode(&padded).is_err());
        assert!(CompressedBatch::decode(b"NOPE").is_err());
    }

    #[test]
    fn varint_minimal_form_enforced() {
        let mut out = Vec::new();
        put_varint(&mut out, 300);
        let mut pos = 0;
        assert_eq!(get_varint(&out, &mut pos).unwrap(), 300);
        assert_eq!(pos, out.len());

        // 0 encoded in two bytes is redundant
        let mut pos = 0;
        assert!(get_varint(&[0x80, 0x00], &mut pos).is_err());
        // eleven continuation bytes cannot happen for u64
        let mut pos = 0;
        assert!(get_varint(&[0xff; 11], &mut pos).is_err());
        // u64::MAX round-trips
        let mut out = Vec::new();
        put_varint(&mut out, u64::MAX);
        let mut pos = 0;
        assert_eq!(get_varint(&out, &mut pos).unwrap(), u64::MAX);
    }

    #[test]
    fn claimed_counts_beyond_input_fail_cleanly() {
        // header claiming 2^40 templates with no data behind it
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&BATCH_MAGIC);
        bytes.push(BATCH_VERSION);
        put_varint(&mut bytes, 1 << 40);
        assert!(CompressedBatch::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn prop_lossless_on_random_corpora(
            lines in proptest::collection::vec(" ?[a-zA-Z0-9_.:<>&'\"-]{0,12}( [a-zA-Z0-9_.:<>&'\"-]{1,12}){0,8} ?", 1..40)
        ) {
            let mut dict = TemplateDictionary::learn(&lines, 0.3).unwrap();
            let records = compress(&lines, &mut dict);
            let batch = CompressedBatch { dictionary: dict, records };
            let bytes = batch.encode();
            let decoded = CompressedBatch::decode(&bytes).unwrap();
            prop_assert_eq!(decoded.decompress().unwrap(), lines);
            prop_assert_eq!(decoded.encode(), bytes);
        }

        #[test]
        fn prop_lossless_on_arbitrary_single_lines(
            lines in proptest::collection::vec("[^\\r\\n]{0,60}", 1..20)
        ) {
            let mut dict = TemplateDictionary::learn(&lines, DEFAULT_THETA).unwrap();
            let records = compress(&lines, &mut dict);
            let batch = CompressedBatch { dictionary: dict, records };
            let decoded = CompressedBatch::decode(&batch.encode()).unwrap();
            prop_assert_eq!(decoded.decompress().unwrap(), lines);
        }
    }
}
