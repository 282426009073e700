//! CoNLL-format ingestion, vocabulary construction, and label schemes.
//!
//! File convention: one token per line, whitespace-separated columns with
//! the token in the first column and the label in the LAST (middle columns
//! such as POS tags are ignored), blank lines between sentences,
//! `-DOCSTART-` lines skipped. Both `\n` and `\r\n` are accepted.

use std::collections::{BTreeMap, HashMap};

use crate::error::{CoreError, Result};

/// Reserved vocabulary slots.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// The label assigned to non-entity tokens, always at id 0.
pub const O_LABEL: &str = "O";

/// Tokenized text with one label per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != labels.len() {
            return Err(CoreError::usage(format!(
                "sentence needs equal, nonzero token/label counts ({} vs {})",
                tokens.len(),
                labels.len()
            )));
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(CoreError::usage("empty token string"));
        }
        Ok(TaggedSentence { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sentence mapped to token and label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Parse CoNLL text into sentences.
///
/// Errors on any content line with fewer than two columns, reporting the
/// 1-based line number. An empty input yields an empty list.
pub fn parse_conll(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sentences.push(TaggedSentence::new(
                    std::mem::take(&mut tokens),
                    std::mem::take(&mut labels),
                )?);
            }
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(CoreError::Parse {
                line: lineno + 1,
                message: format!("expected at least 2 columns, got {}: {line:?}", cols.len()),
            });
        }
        tokens.push(cols[0].to_string());
        labels.push(cols[cols.len() - 1].to_string());
    }
    if !tokens.is_empty() {
        sentences.push(TaggedSentence::new(tokens, labels)?);
    }
    Ok(sentences)
}

/// Render sentences back to CoNLL text ("token label" lines, blank line
/// after each sentence). parse_conll of the output is the identity.
pub fn serialize_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, lab) in s.tokens.iter().zip(&s.labels) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(lab);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Token-to-id map with reserved PAD=0 and UNK=1 slots.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Count token frequencies over the corpus and keep tokens with
    /// frequency >= min_count, assigning ids from 2 in descending
    /// frequency then lexicographic order.
    pub fn build(sentences: &[TaggedSentence], min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(CoreError::usage("min_count must be >= 1"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for tok in &s.tokens {
                if tok == PAD_TOKEN || tok == UNK_TOKEN {
                    continue;
                }
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Self::from_ordered_tokens(tokens, min_count)
    }

    /// Rebuild from an ordered token list (ids implicit). The first two
    /// entries must be the PAD and UNK tokens.
    pub fn from_ordered_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(CoreError::usage(
                "vocabulary must start with the PAD and UNK tokens",
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(CoreError::usage(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            ids,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Id for a token, UNK for out-of-vocabulary tokens.
    pub fn encode_token(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(CoreError::IndexOutOfRange {
                what: "token",
                index: id,
                bound: self.tokens.len(),
            })
    }

    /// Tokens in id order.
    pub fn ordered_tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Label-to-id map with the O class fixed at id 0.
///
/// Non-flat schemes hold BIO labels (`B-X` / `I-X`); flat schemes hold
/// plain class names, used by the coarse/fine distinct-task corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    labels: Vec<String>,
    ids: HashMap<String, usize>,
    flat: bool,
}

fn is_bio_label(label: &str) -> bool {
    (label.starts_with("B-") || label.starts_with("I-")) && label.len() > 2
}

impl LabelScheme {
    /// Scheme from the non-O labels, O inserted at id 0. `flat` controls
    /// whether labels are plain class names or must follow B-X/I-X.
    pub fn new(mut non_o_labels: Vec<String>, flat: bool) -> Result<Self> {
        non_o_labels.retain(|l| l != O_LABEL);
        if !flat {
            for l in &non_o_labels {
                if !is_bio_label(l) {
                    return Err(CoreError::usage(format!(
                        "label {l:?} does not match the B-X/I-X pattern; use a flat scheme for plain classes"
                    )));
                }
            }
        }
        let mut labels = vec![O_LABEL.to_string()];
        labels.extend(non_o_labels);
        let mut ids = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if ids.insert(l.clone(), i).is_some() {
                return Err(CoreError::usage(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelScheme { labels, ids, flat })
    }

    /// BIO scheme with B-X/I-X for each entity type.
    pub fn bio(entity_types: &[String]) -> Result<Self> {
        let mut labels = Vec::with_capacity(entity_types.len() * 2);
        for t in entity_types {
            labels.push(format!("B-{t}"));
            labels.push(format!("I-{t}"));
        }
        Self::new(labels, false)
    }

    /// Flat scheme of plain class names.
    pub fn flat(classes: &[String]) -> Result<Self> {
        Self::new(classes.to_vec(), true)
    }

    /// Scheme from labels observed in a corpus, sorted for determinism.
    /// BIO shape is auto-detected: flat unless every non-O label matches
    /// B-X/I-X.
    pub fn from_corpus(sentences: &[TaggedSentence]) -> Result<Self> {
        let mut seen: Vec<String> = sentences
            .iter()
            .flat_map(|s| s.labels.iter().cloned())
            .filter(|l| l != O_LABEL)
            .collect();
        seen.sort();
        seen.dedup();
        let flat = !seen.iter().all(|l| is_bio_label(l)) && !seen.is_empty();
        Self::new(seen, flat)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // O is always present
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn ordered_labels(&self) -> &[String] {
        &self.labels
    }

    /// Non-O labels in id order.
    pub fn entity_labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().skip(1).map(String::as_str)
    }

    pub fn encode_label(&self, label: &str) -> Result<usize> {
        self.ids
            .get(label)
            .copied()
            .ok_or_else(|| CoreError::UnknownLabel(label.to_string()))
    }

    pub fn label(&self, id: usize) -> Result<&str> {
        self.labels
            .get(id)
            .map(String::as_str)
            .ok_or(CoreError::IndexOutOfRange {
                what: "label",
                index: id,
                bound: self.labels.len(),
            })
    }
}

/// Map a sentence to ids: unknown tokens become UNK, unknown labels are an
/// error (labels are closed-world per task).
pub fn encode(sentence: &TaggedSentence, vocab: &Vocabulary, scheme: &LabelScheme) -> Result<EncodedSentence> {
    let tokens = sentence.tokens.iter().map(|t| vocab.encode_token(t)).collect();
    let labels = sentence
        .labels
        .iter()
        .map(|l| scheme.encode_label(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSentence { tokens, labels })
}

/// Inverse of [`encode`]; labels round-trip exactly, out-of-vocabulary
/// tokens come back as the UNK token.
pub fn decode(encoded: &EncodedSentence, vocab: &Vocabulary, scheme: &LabelScheme) -> Result<TaggedSentence> {
    let tokens = encoded
        .tokens
        .iter()
        .map(|&id| vocab.token(id).map(String::from))
        .collect::<Result<Vec<_>>>()?;
    let labels = encoded
        .labels
        .iter()
        .map(|&id| scheme.label(id).map(String::from))
        .collect::<Result<Vec<_>>>()?;
    TaggedSentence::new(tokens, labels)
}

/// A BIO transition violation: an `I-X` not preceded by `B-X` or `I-X`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub sentence: usize,
    pub position: usize,
    pub label: String,
}

/// Report every position where an I- label follows neither a matching B-
/// nor a matching I-. Read-only; violations are data, not errors.
pub fn validate_bio(sentences: &[TaggedSentence], scheme: &LabelScheme) -> Result<Vec<BioViolation>> {
    if scheme.is_flat() {
        return Err(CoreError::usage("validate_bio requires a BIO scheme, got a flat one"));
    }
    let mut violations = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        for (pi, label) in s.labels.iter().enumerate() {
            let Some(entity) = label.strip_prefix("I-") else {
                continue;
            };
            let ok = pi > 0 && {
                let prev = &s.labels[pi - 1];
                prev.strip_prefix("B-") == Some(entity) || prev.strip_prefix("I-") == Some(entity)
            };
            if !ok {
                violations.push(BioViolation {
                    sentence: si,
                    position: pi,
                    label: label.clone(),
                });
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(tokens: &[&str], labels: &[&str]) -> TaggedSentence {
        TaggedSentence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            labels.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_basic_conll() {
        let text = "EU NNP B-ORG\nrejects VBZ O\n\n";
        let got = parse_conll(text).unwrap();
        assert_eq!(got, vec![sent(&["EU", "rejects"], &["B-ORG", "O"])]);
    }

    #[test]
    fn parse_empty_input() {
        assert_eq!(parse_conll("").unwrap(), vec![]);
        assert_eq!(parse_conll("\n\n\n").unwrap(), vec![]);
    }

    #[test]
    fn parse_skips_docstart_and_handles_crlf() {
        let text = "-DOCSTART- -X- O\r\n\r\nBerlin B-LOC\r\n";
        let got = parse_conll(text).unwrap();
        assert_eq!(got, vec![sent(&["Berlin"], &["B-LOC"])]);
    }

    #[test]
    fn parse_two_column_and_four_column() {
        let text = "Berlin NNP I-NP B-LOC\nis O\n\n";
        let got = parse_conll(text).unwrap();
        assert_eq!(got, vec![sent(&["Berlin", "is"], &["B-LOC", "O"])]);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = "Berlin B-LOC\n\nlonely\n";
        match parse_conll(text) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let corpus = vec![
            sent(&["EU", "rejects", "German"], &["B-ORG", "O", "B-MISC"]),
            sent(&["Berlin"], &["B-LOC"]),
        ];
        assert_eq!(parse_conll(&serialize_conll(&corpus)).unwrap(), corpus);
    }

    #[test]
    fn vocab_empty_corpus_has_reserved_only() {
        let v = Vocabulary::build(&[], 1).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode_token("anything"), UNK_ID);
        assert_eq!(v.token(PAD_ID).unwrap(), PAD_TOKEN);
    }

    #[test]
    fn vocab_min_count_filters() {
        let corpus = vec![sent(&["a", "a", "b"], &["O", "O", "O"])];
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.encode_token("a"), 2);
        assert_eq!(v.encode_token("b"), UNK_ID);
    }

    #[test]
    fn vocab_order_insensitive() {
        let a = vec![
            sent(&["x", "y"], &["O", "O"]),
            sent(&["y", "z", "y"], &["O", "O", "O"]),
        ];
        let b: Vec<TaggedSentence> = a.iter().rev().cloned().collect();
        let va = Vocabulary::build(&a, 1).unwrap();
        let vb = Vocabulary::build(&b, 1).unwrap();
        assert_eq!(va.ordered_tokens(), vb.ordered_tokens());
        // frequency then lexicographic: y(3), x(1), z(1)
        assert_eq!(va.ordered_tokens(), &["<pad>", "<unk>", "y", "x", "z"]);
    }

    #[test]
    fn scheme_o_fixed_at_zero() {
        let s = LabelScheme::bio(&["PER".into(), "LOC".into()]).unwrap();
        assert_eq!(s.encode_label("O").unwrap(), 0);
        assert_eq!(s.label(0).unwrap(), O_LABEL);
        assert_eq!(s.len(), 5);
        assert!(!s.is_flat());
    }

    #[test]
    fn scheme_rejects_non_bio_unless_flat() {
        assert!(LabelScheme::new(vec!["person".into()], false).is_err());
        let flat = LabelScheme::flat(&["person".into(), "art".into()]).unwrap();
        assert!(flat.is_flat());
        assert_eq!(flat.len(), 3);
    }

    #[test]
    fn scheme_from_corpus_detects_shape() {
        let bio = LabelScheme::from_corpus(&[sent(&["a"], &["B-PER"])]).unwrap();
        assert!(!bio.is_flat());
        let flat = LabelScheme::from_corpus(&[sent(&["a"], &["person"])]).unwrap();
        assert!(flat.is_flat());
    }

    #[test]
    fn encode_unknown_token_becomes_unk() {
        let corpus = vec![sent(&["known"], &["O"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let s = LabelScheme::bio(&["PER".into()]).unwrap();
        let enc = encode(&sent(&["mystery"], &["O"]), &v, &s).unwrap();
        assert_eq!(enc.tokens, vec![UNK_ID]);
        assert_eq!(enc.labels, vec![0]);
    }

    #[test]
    fn encode_unknown_label_is_error() {
        let v = Vocabulary::build(&[], 1).unwrap();
        let s = LabelScheme::bio(&["PER".into()]).unwrap();
        match encode(&sent(&["a"], &["B-LOC"]), &v, &s) {
            Err(CoreError::UnknownLabel(l)) => assert_eq!(l, "B-LOC"),
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn decode_encode_roundtrips_labels() {
        let original = sent(&["EU", "rejects"], &["B-ORG", "O"]);
        let v = Vocabulary::build(std::slice::from_ref(&original), 1).unwrap();
        let s = LabelScheme::bio(&["ORG".into()]).unwrap();
        let round = decode(&encode(&original, &v, &s).unwrap(), &v, &s).unwrap();
        assert_eq!(round.labels, original.labels);
        assert_eq!(round.tokens, original.tokens);
    }

    #[test]
    fn validate_bio_flags_orphan_inside() {
        let s = LabelScheme::bio(&["PER".into()]).unwrap();
        let violations = validate_bio(&[sent(&["a", "b"], &["O", "I-PER"])], &s).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].position, 1);

        let clean = validate_bio(&[sent(&["a", "b"], &["B-PER", "I-PER"])], &s).unwrap();
        assert!(clean.is_empty());
    }

    #[test]
    fn validate_bio_flags_type_switch() {
        let s = LabelScheme::bio(&["PER".into(), "LOC".into()]).unwrap();
        let violations =
            validate_bio(&[sent(&["a", "b"], &["B-PER", "I-LOC"])], &s).unwrap();
        assert_eq!(violations.len(), 1);
    }

    #[test]
    fn validate_bio_rejects_flat_scheme() {
        let s = LabelScheme::flat(&["person".into()]).unwrap();
        assert!(matches!(
            validate_bio(&[], &s),
            Err(CoreError::Usage(_))
        ));
    }
}
