//! Frequency-based template learning and lossless line compression.
//!
//! Tokens are split on whitespace runs and counted over a learning
//! corpus. Tokens whose occurrence frequency is at least the threshold
//! fraction of the corpus line count are *fixed expressions* and stay in
//! the template; the rest are *variable expressions*, replaced by the
//! `:::` placeholder and recorded per line together with their byte
//! positions. Identical patterns share one dense template ID.
//!
//! Lines that single-space token joining cannot reproduce exactly
//! (leading/trailing or irregular whitespace, empty lines) are encoded
//! against the one-placeholder raw template, with the entire line as the
//! sole variable, which keeps decompression byte-exact on any input.

use std::collections::HashMap;

use super::PipelineError;

/// Placeholder standing in for a variable expression in a pattern.
pub const PLACEHOLDER: &str = ":::";

/// Default fixed-expression threshold.
pub const DEFAULT_THETA: f64 = 0.1;

/// Default learning window: lines considered for frequency counting.
pub const DEFAULT_LEARNING_WINDOW: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TemplateToken {
    Fixed(String),
    Var,
}

/// One learned pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template {
    tokens: Vec<TemplateToken>,
}

impl Template {
    pub fn new(tokens: Vec<TemplateToken>) -> Result<Template, PipelineError> {
        if tokens.is_empty() {
            return Err(PipelineError::Validation("template has no tokens".into()));
        }
        Ok(Template { tokens })
    }

    pub fn tokens(&self) -> &[TemplateToken] {
        &self.tokens
    }

    pub fn placeholder_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, TemplateToken::Var)).count()
    }

    /// Pattern text with `:::` at variable positions.
    pub fn pattern(&self) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Fixed(s) => s.as_str(),
                TemplateToken::Var => PLACEHOLDER,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Substitute variables into the placeholders, in order.
    pub fn render(&self, variables: &[String]) -> Result<String, PipelineError> {
        if variables.len() != self.placeholder_count() {
            return Err(PipelineError::Corruption(format!(
                "record has {} variables for a {}-placeholder template",
                variables.len(),
                self.placeholder_count()
            )));
        }
        let mut vars = variables.iter();
        let parts: Vec<&str> = self
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Fixed(s) => s.as_str(),
                TemplateToken::Var => vars.next().expect("count checked").as_str(),
            })
            .collect();
        Ok(parts.join(" "))
    }
}

/// One compressed line: where it was, which template it matches, and the
/// variable expressions with their byte offsets in the original line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// 1-based line number within the batch.
    pub line_no: u64,
    pub template_id: u32,
    pub variables: Vec<String>,
    pub positions: Vec<u32>,
}

/// Learned templates plus the token statistics they came from.
#[derive(Debug, Clone)]
pub struct TemplateDictionary {
    templates: Vec<Template>,
    index: HashMap<Template, u32>,
    token_frequencies: HashMap<String, u64>,
    corpus_line_count: u64,
    theta: f64,
}

impl TemplateDictionary {
    /// Learn a dictionary over a corpus: count token occurrences, then
    /// map each line to a pattern with below-threshold tokens replaced by
    /// the placeholder. Identical patterns share one ID, assigned densely
    /// in first-appearance order.
    pub fn learn<S: AsRef<str>>(lines: &[S], theta: f64) -> Result<TemplateDictionary, PipelineError> {
        if lines.is_empty() {
            return Err(PipelineError::Validation("empty learning corpus".into()));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(PipelineError::Validation(format!(
                "threshold {theta} outside (0, 1]"
            )));
        }
        let mut dict = TemplateDictionary {
            templates: Vec::new(),
            index: HashMap::new(),
            token_frequencies: HashMap::new(),
            corpus_line_count: lines.len() as u64,
            theta,
        };
        for line in lines {
            for (_, token) in tokenize(line.as_ref()) {
                *dict.token_frequencies.entry(token.to_string()).or_insert(0) += 1;
            }
        }
        for line in lines {
            let (template, _, _) = dict.line_to_pattern(line.as_ref());
            dict.intern(template);
        }
        Ok(dict)
    }

    /// Dictionary with no learned statistics, as reconstructed from a
    /// serialized batch.
    pub(crate) fn from_templates(templates: Vec<Template>) -> TemplateDictionary {
        let index = templates
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        TemplateDictionary {
            templates,
            index,
            token_frequencies: HashMap::new(),
            corpus_line_count: 0,
            theta: DEFAULT_THETA,
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn corpus_line_count(&self) -> u64 {
        self.corpus_line_count
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, id: u32) -> Option<&Template> {
        self.templates.get(id as usize)
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Pattern strings of every template, in ID order.
    pub fn patterns(&self) -> Vec<String> {
        self.templates.iter().map(Template::pattern).collect()
    }

    /// A token is a fixed expression iff its occurrence count reaches the
    /// threshold fraction of the corpus line count.
    pub fn is_fixed(&self, token: &str) -> bool {
        if self.corpus_line_count == 0 {
            return false;
        }
        match self.token_frequencies.get(token) {
            Some(&count) => count as f64 / self.corpus_line_count as f64 >= self.theta,
            None => false,
        }
    }

    /// Get the ID for a pattern, appending it if unseen.
    pub fn intern(&mut self, template: Template) -> u32 {
        if let Some(&id) = self.index.get(&template) {
            return id;
        }
        let id = self.templates.len() as u32;
        self.index.insert(template.clone(), id);
        self.templates.push(template);
        id
    }

    /// Map a line to (pattern, variables, positions). Lines that do not
    /// reconstruct exactly from single-space joining fall back to the raw
    /// template with the whole line as one variable.
    fn line_to_pattern(&self, line: &str) -> (Template, Vec<String>, Vec<u32>) {
        let tokens = tokenize(line);
        if !tokens.is_empty() {
            // canonical iff single-space joining reproduces the line exactly
            let canonical = {
                let joined_len: usize =
                    tokens.iter().map(|(_, t)| t.len()).sum::<usize>() + tokens.len() - 1;
                joined_len == line.len()
                    && tokens[0].0 == 0
                    && tokens.iter().zip(tokens.iter().skip(1)).all(|((ao, a), (bo, _))| {
                        ao + a.len() + 1 == *bo && line.as_bytes()[ao + a.len()] == b' '
                    })
            };
            if canonical {
                let mut pattern = Vec::with_capacity(tokens.len());
                let mut variables = Vec::new();
                let mut positions = Vec::new();
                for (offset, token) in tokens {
                    if self.is_fixed(token) {
                        pattern.push(TemplateToken::Fixed(token.to_string()));
                    } else {
                        pattern.push(TemplateToken::Var);
                        variables.push(token.to_string());
                        positions.push(offset as u32);
                    }
                }
                return (Template { tokens: pattern }, variables, positions);
            }
        }
        // raw fallback: one placeholder holding the entire line
        (
            Template {
                tokens: vec![TemplateToken::Var],
            },
            vec![line.to_string()],
            vec![0],
        )
    }
}

/// Split a line on whitespace runs, keeping each token's byte offset.
fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

/// Encode each line against the dictionary, extending it with new
/// patterns as they appear. Line numbers are 1-based in input order.
pub fn compress<S: AsRef<str>>(lines: &[S], dict: &mut TemplateDictionary) -> Vec<Record> {
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let (template, variables, positions) = dict.line_to_pattern(line.as_ref());
        let template_id = dict.intern(template);
        records.push(Record {
            line_no: (i + 1) as u64,
            template_id,
            variables,
            positions,
        });
    }
    records
}

/// Reconstruct original lines from records, in line-number order.
pub fn decompress(dict: &TemplateDictionary, records: &[Record]) -> Result<Vec<String>, PipelineError> {
    let mut ordered: Vec<&Record> = records.iter().collect();
    ordered.sort_by_key(|r| r.line_no);
    let mut lines = Vec::with_capacity(ordered.len());
    for record in ordered {
        let template = dict.template(record.template_id).ok_or_else(|| {
            PipelineError::Corruption(format!("unknown template id {}", record.template_id))
        })?;
        if record.positions.len() != record.variables.len() {
            return Err(PipelineError::Corruption(format!(
                "record {} has {} positions for {} variables",
                record.line_no,
                record.positions.len(),
                record.variables.len()
            )));
        }
        lines.push(template.render(&record.variables)?);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent frequency oracle: a naive recount used to pin the
    /// fixed/variable split expected from learning.
    fn oracle_fixed_tokens<S: AsRef<str>>(lines: &[S], theta: f64) -> Vec<String> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        let n = lines.len() as f64;
        let mut fixed: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c as f64 / n >= theta)
            .map(|(t, _)| t)
            .collect();
        fixed.sort();
        fixed
    }

    #[test]
    fn shared_pattern_with_variable_host() {
        let corpus = ["Server alpha is down", "Server beta is down"];
        let dict = TemplateDictionary::learn(&corpus, 0.6).unwrap();
        assert_eq!(dict.len(), 1);
        assert_eq!(dict.patterns(), vec!["Server ::: is down"]);

        let mut dict = dict;
        let records = compress(&corpus, &mut dict);
        assert_eq!(records[0].variables, vec!["alpha"]);
        assert_eq!(records[1].variables, vec!["beta"]);
        assert_eq!(records[0].positions, vec![7]);
    }

    #[test]
    fn single_line_corpus_is_all_fixed() {
        // with one line every token has frequency 1.0 >= theta
        let corpus = ["User root is connected in terminal tty1"];
        let theta = 0.5;
        let oracle = oracle_fixed_tokens(&corpus, theta);
        assert_eq!(oracle.len(), 7, "oracle says all 7 tokens fixed");

        let dict = TemplateDictionary::learn(&corpus, theta).unwrap();
        assert_eq!(dict.len(), 1);
        assert_eq!(dict.patterns(), vec!["User root is connected in terminal tty1"]);
        assert_eq!(dict.template(0).unwrap().placeholder_count(), 0);
    }

    #[test]
    fn theta_one_requires_presence_on_every_line() {
        let corpus = [
            "a error one",
            "b error two",
            "c error three",
            "d warning four",
        ];
        // "error" is on 3 of 4 lines: not fixed at theta=1.0
        let oracle = oracle_fixed_tokens(&corpus, 1.0);
        assert!(oracle.is_empty());
        let dict = TemplateDictionary::learn(&corpus, 1.0).unwrap();
        assert!(!dict.is_fixed("error"));

        let corpus2 = ["x error one", "y error two", "z error three"];
        let oracle2 = oracle_fixed_tokens(&corpus2, 1.0);
        assert_eq!(oracle2, vec!["error"]);
        let dict2 = TemplateDictionary::learn(&corpus2, 1.0).unwrap();
        assert!(dict2.is_fixed("error"));
    }

    #[test]
    fn empty_corpus_and_bad_theta_rejected() {
        let no_lines: [&str; 0] = [];
        assert!(TemplateDictionary::learn(&no_lines, 0.5).is_err());
        assert!(TemplateDictionary::learn(&["x"], 0.0).is_err());
        assert!(TemplateDictionary::learn(&["x"], 1.5).is_err());
    }

    #[test]
    fn round_trip_identity_on_simple_corpus() {
        let corpus: Vec<String> = (0..1000)
            .map(|i| format!("Server host{} is down", i % 13))
            .collect();
        let mut dict = TemplateDictionary::learn(&corpus, DEFAULT_THETA).unwrap();
        let records = compress(&corpus, &mut dict);
        assert_eq!(decompress(&dict, &records).unwrap(), corpus);
    }

    #[test]
    fn identical_lines_share_encoding() {
        let corpus = ["link up", "link up"];
        let mut dict = TemplateDictionary::learn(&corpus, 0.5).unwrap();
        let records = compress(&corpus, &mut dict);
        assert_eq!(records[0].template_id, records[1].template_id);
        assert_eq!(records[0].variables, records[1].variables);
        assert_ne!(records[0].line_no, records[1].line_no);
    }

    #[test]
    fn unseen_lines_extend_the_dictionary() {
        let corpus = ["Server alpha is down", "Server beta is down"];
        let mut dict = TemplateDictionary::learn(&corpus, 0.6).unwrap();
        assert_eq!(dict.len(), 1);
        let new_lines = ["disk sda1 failed hard"];
        let records = compress(&new_lines, &mut dict);
        assert_eq!(dict.len(), 2);
        assert_eq!(decompress(&dict, &records).unwrap(), vec!["disk sda1 failed hard"]);
    }

    #[test]
    fn irregular_whitespace_and_empty_lines_survive() {
        let corpus = [
            "normal line here",
            "  leading spaces",
            "trailing space ",
            "double  space",
            "tab\tseparated",
            "",
        ];
        let mut dict = TemplateDictionary::learn(&corpus, 0.9).unwrap();
        let records = compress(&corpus, &mut dict);
        let back = decompress(&dict, &records).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn variable_count_mismatch_is_corruption() {
        let corpus = ["Server alpha is down", "Server beta is down"];
        let mut dict = TemplateDictionary::learn(&corpus, 0.6).unwrap();
        let mut records = compress(&corpus, &mut dict);
        records[0].variables.push("extra".into());
        records[0].positions.push(99);
        let err = decompress(&dict, &records).unwrap_err();
        assert!(matches!(err, PipelineError::Corruption(_)), "got {err:?}");
    }

    #[test]
    fn empty_records_decompress_to_nothing() {
        let dict = TemplateDictionary::learn(&["x"], 0.5).unwrap();
        assert!(decompress(&dict, &[]).unwrap().is_empty());
    }

    #[test]
    fn fixed_set_is_antitone_in_theta() {
        let corpus = [
            "Server alpha is down",
            "Server beta is down",
            "User carol is connected in terminal tty1",
            "User dave is connected in terminal tty2",
            "eth0 interface is link down",
        ];
        let thetas = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
        let mut all_tokens: Vec<&str> = corpus.iter().flat_map(|l| l.split_whitespace()).collect();
        all_tokens.sort();
        all_tokens.dedup();
        for pair in thetas.windows(2) {
            let low = TemplateDictionary::learn(&corpus, pair[0]).unwrap();
            let high = TemplateDictionary::learn(&corpus, pair[1]).unwrap();
            for token in &all_tokens {
                if high.is_fixed(token) {
                    assert!(low.is_fixed(token), "token {token} fixed at {} but not {}", pair[1], pair[0]);
                }
            }
        }
    }
}
