//! Synthetic attribute-labeled corpus with a built-in labeling oracle.
//!
//! Sentences are filled from a small template grammar. Marker lexicons are
//! disjoint across attribute values and never overlap the filler vocabulary,
//! so membership of a marker word decides the label — the oracle is exact by
//! construction. Single-slot templates produce the labeled training corpus;
//! dual-slot templates exist for evaluation fixtures and for giving the base
//! model plain text where both attribute families co-occur.

mod textfile;
mod vocab;

pub use textfile::{load_external_corpus, save_corpus, CorpusLoad, LineDiagnostic};
pub use vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, UNK_ID};

use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("template/lexicon inconsistency: {0}")]
    TemplateInconsistency(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One attribute family: a name, its values, and one disjoint marker
/// lexicon per value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeFamily {
    pub name: String,
    pub values: Vec<String>,
    pub lexicons: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub families: Vec<AttributeFamily>,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for fam in &self.families {
            if fam.values.len() < 2 {
                return Err(CorpusError::InvalidSchema(format!(
                    "family {} needs at least 2 values",
                    fam.name
                )));
            }
            for value in &fam.values {
                let lex = fam.lexicons.get(value).ok_or_else(|| {
                    CorpusError::InvalidSchema(format!("missing lexicon for {}={value}", fam.name))
                })?;
                if lex.is_empty() {
                    return Err(CorpusError::InvalidSchema(format!(
                        "empty lexicon for {}={value}",
                        fam.name
                    )));
                }
                for word in lex {
                    if let Some(owner) = seen.insert(word, value) {
                        return Err(CorpusError::InvalidSchema(format!(
                            "marker word {word:?} appears in both {owner} and {value}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn family(&self, name: &str) -> Option<&AttributeFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    /// All marker words of every family, for filler-collision checks.
    fn all_markers(&self) -> BTreeSet<&str> {
        self.families
            .iter()
            .flat_map(|f| f.lexicons.values().flatten().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePart {
    Word(String),
    Slot(String),
}

/// A sentence skeleton; `{FAMILY}` marks a slot filled from that family's
/// lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub parts: Vec<TemplatePart>,
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let parts = text
            .split_whitespace()
            .map(|w| {
                if let Some(name) = w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                    TemplatePart::Slot(name.to_string())
                } else {
                    TemplatePart::Word(w.to_string())
                }
            })
            .collect();
        Self { parts }
    }

    pub fn slot_families(&self) -> Vec<&str> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                TemplatePart::Slot(f) => Some(f.as_str()),
                TemplatePart::Word(_) => None,
            })
            .collect()
    }

    fn render(&self, fillers: &BTreeMap<&str, &str>) -> String {
        let words: Vec<&str> = self
            .parts
            .iter()
            .map(|p| match p {
                TemplatePart::Word(w) => w.as_str(),
                TemplatePart::Slot(f) => fillers[f.as_str()],
            })
            .collect();
        words.join(" ")
    }
}

/// Everything corpus generation depends on; generation is a pure function
/// of this value (seed included).
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub schema: AttributeSchema,
    pub templates: Vec<Template>,
    pub sentences_per_attribute: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    /// family name → value name; single-family sentences carry one entry.
    pub labels: BTreeMap<String, String>,
}

/// Oracle verdict for one family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelOutcome {
    Value(String),
    /// Zero or multiple values of the family matched.
    Abstain,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.schema.validate()?;
        let markers = self.schema.all_markers();
        for t in &self.templates {
            let mut seen = BTreeSet::new();
            for fam in t.slot_families() {
                if self.schema.family(fam).is_none() {
                    return Err(CorpusError::TemplateInconsistency(format!(
                        "template references unknown family {fam}"
                    )));
                }
                if !seen.insert(fam) {
                    return Err(CorpusError::TemplateInconsistency(format!(
                        "template references family {fam} more than once"
                    )));
                }
            }
            for p in &t.parts {
                if let TemplatePart::Word(w) = p {
                    if markers.contains(w.as_str()) {
                        return Err(CorpusError::TemplateInconsistency(format!(
                            "filler word {w:?} collides with a marker lexicon"
                        )));
                    }
                }
            }
        }
        for fam in &self.schema.families {
            if self.single_templates(&fam.name).is_empty() {
                return Err(CorpusError::TemplateInconsistency(format!(
                    "no single-slot template for family {}",
                    fam.name
                )));
            }
        }
        Ok(())
    }

    fn single_templates(&self, family: &str) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.slot_families() == [family])
            .collect()
    }

    fn dual_templates(&self) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.slot_families().len() == self.schema.families.len() && self.schema.families.len() > 1)
            .collect()
    }

    fn neutral_templates(&self) -> Vec<&Template> {
        self.templates.iter().filter(|t| t.slot_families().is_empty()).collect()
    }
}

/// Generates the single-attribute training corpus: exactly
/// `sentences_per_attribute` records per (family, value), each expressing
/// exactly one attribute family. A record holds one or two coherent
/// sentences of the same value (reviews are rarely one sentence long, and
/// a prompt trained on occasional continuations can recover from an
/// evaluation prefix whose first sentence shape has no slot for it).
/// Deterministic given the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledSentence>, CorpusError> {
    spec.validate()?;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    for fam in &spec.schema.families {
        let templates = spec.single_templates(&fam.name);
        for value in &fam.values {
            let lex = &fam.lexicons[value];
            for _ in 0..spec.sentences_per_attribute {
                let sentences = if rng.gen_range(0..2u32) == 0 { 1 } else { 2 };
                let mut parts = Vec::with_capacity(sentences);
                for _ in 0..sentences {
                    let t = templates[rng.gen_range(0..templates.len())];
                    let marker = &lex[rng.gen_range(0..lex.len())];
                    let mut fillers = BTreeMap::new();
                    fillers.insert(fam.name.as_str(), marker.as_str());
                    parts.push(t.render(&fillers));
                }
                let mut labels = BTreeMap::new();
                labels.insert(fam.name.clone(), value.clone());
                out.push(LabeledSentence {
                    text: parts.join(" "),
                    labels,
                });
            }
        }
    }
    Ok(out)
}

/// Generates sentences expressing every attribute family at once (dual-slot
/// templates), labeled with all of them: evaluation fixtures and base-model
/// pretraining text.
pub fn generate_dual_sentences(
    spec: &CorpusSpec,
    per_pair: usize,
) -> Result<Vec<LabeledSentence>, CorpusError> {
    spec.validate()?;
    let templates = spec.dual_templates();
    if templates.is_empty() {
        return Err(CorpusError::TemplateInconsistency(
            "no dual-slot template available".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let mut combos: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for fam in &spec.schema.families {
        let mut next = Vec::new();
        for combo in &combos {
            for value in &fam.values {
                let mut c = combo.clone();
                c.insert(fam.name.clone(), value.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    let mut out = Vec::new();
    for combo in combos {
        for _ in 0..per_pair {
            let t = templates[rng.gen_range(0..templates.len())];
            let mut fillers = BTreeMap::new();
            for (fam_name, value) in &combo {
                let fam = spec.schema.family(fam_name).expect("validated");
                let lex = &fam.lexicons[value];
                fillers.insert(fam_name.as_str(), lex[rng.gen_range(0..lex.len())].as_str());
            }
            out.push(LabeledSentence {
                text: t.render(&fillers),
                labels: combo.clone(),
            });
        }
    }
    Ok(out)
}

/// Generates label-free sentences from slot-less templates.
pub fn generate_neutral_sentences(
    spec: &CorpusSpec,
    count: usize,
) -> Result<Vec<LabeledSentence>, CorpusError> {
    spec.validate()?;
    let templates = spec.neutral_templates();
    if templates.is_empty() {
        return Err(CorpusError::TemplateInconsistency(
            "no neutral template available".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    Ok((0..count)
        .map(|_| LabeledSentence {
            text: templates[rng.gen_range(0..templates.len())].render(&BTreeMap::new()),
            labels: BTreeMap::new(),
        })
        .collect())
}

/// Multi-sentence pretraining documents. Every sentence in a document
/// shares the same attribute values (and fresh marker words), so the base
/// model learns to keep attributes consistent with distant context — the
/// attention pathway that prompt conditioning later rides on.
///
/// `single_docs` documents are drawn per (family, value), `dual_docs` per
/// value pair, `neutral_docs` in total; each document holds 1–3 sentences.
pub fn generate_pretraining_documents(
    spec: &CorpusSpec,
    single_docs: usize,
    dual_docs: usize,
    neutral_docs: usize,
) -> Result<Vec<String>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));
    let mut out = Vec::new();

    let mut render_doc = |templates: &[&Template],
                          combo: &BTreeMap<String, String>,
                          rng: &mut ChaCha8Rng|
     -> String {
        // Mostly multi-sentence: the consistency signal lives in the
        // cross-sentence repetition of attribute values. Half the time a
        // later sentence reuses the exact marker word — literal repetition
        // is the easiest coherence pattern to learn, and value-level
        // consistency piggybacks on it.
        let k = match rng.gen_range(0..4u32) {
            0 => 1,
            1 | 2 => 2,
            _ => 3,
        };
        let mut parts = Vec::with_capacity(k);
        let mut last_marker: BTreeMap<&str, &str> = BTreeMap::new();
        for i in 0..k {
            let t = templates[rng.gen_range(0..templates.len())];
            let mut fillers = BTreeMap::new();
            for (fam_name, value) in combo {
                let fam = spec.schema.family(fam_name).expect("validated");
                let lex = &fam.lexicons[value];
                let reuse = i > 0 && rng.gen_range(0..2u32) == 0;
                let marker = if reuse {
                    last_marker[fam_name.as_str()]
                } else {
                    lex[rng.gen_range(0..lex.len())].as_str()
                };
                last_marker.insert(fam_name.as_str(), marker);
                fillers.insert(fam_name.as_str(), marker);
            }
            parts.push(t.render(&fillers));
        }
        parts.join(" ")
    };

    for fam in &spec.schema.families {
        let templates = spec.single_templates(&fam.name);
        for value in &fam.values {
            let combo = BTreeMap::from([(fam.name.clone(), value.clone())]);
            for _ in 0..single_docs {
                out.push(render_doc(&templates, &combo, &mut rng));
            }
        }
    }
    if dual_docs > 0 {
        let templates = spec.dual_templates();
        if templates.is_empty() {
            return Err(CorpusError::TemplateInconsistency(
                "no dual-slot template available".into(),
            ));
        }
        let mut combos: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
        for fam in &spec.schema.families {
            let mut next = Vec::new();
            for combo in &combos {
                for value in &fam.values {
                    let mut c = combo.clone();
                    c.insert(fam.name.clone(), value.clone());
                    next.push(c);
                }
            }
            combos = next;
        }
        for combo in combos {
            for _ in 0..dual_docs {
                out.push(render_doc(&templates, &combo, &mut rng));
            }
        }
    }
    if neutral_docs > 0 {
        let templates = spec.neutral_templates();
        if templates.is_empty() {
            return Err(CorpusError::TemplateInconsistency(
                "no neutral template available".into(),
            ));
        }
        let empty = BTreeMap::new();
        for _ in 0..neutral_docs {
            out.push(render_doc(&templates, &empty, &mut rng));
        }
    }
    Ok(out)
}

/// For each family, the unique value whose lexicon intersects the text,
/// or [`LabelOutcome::Abstain`] when zero or several values match.
pub fn oracle_label(text: &str, schema: &AttributeSchema) -> BTreeMap<String, LabelOutcome> {
    let tokens: BTreeSet<&str> = text.split_whitespace().collect();
    let mut out = BTreeMap::new();
    for fam in &schema.families {
        let mut matched: Vec<&String> = Vec::new();
        for value in &fam.values {
            let lex = &fam.lexicons[value];
            if lex.iter().any(|w| tokens.contains(w.as_str())) {
                matched.push(value);
            }
        }
        let outcome = match matched.as_slice() {
            [one] => LabelOutcome::Value((*one).clone()),
            _ => LabelOutcome::Abstain,
        };
        out.insert(fam.name.clone(), outcome);
    }
    out
}

/// True when the oracle reproduces the sentence's labels exactly: every
/// labeled family matches, every unlabeled family abstains.
pub fn oracle_consistent(sentence: &LabeledSentence, schema: &AttributeSchema) -> bool {
    let verdict = oracle_label(&sentence.text, schema);
    schema.families.iter().all(|fam| {
        match (sentence.labels.get(&fam.name), verdict.get(&fam.name)) {
            (Some(v), Some(LabelOutcome::Value(got))) => got == v,
            (None, Some(LabelOutcome::Abstain)) => true,
            _ => false,
        }
    })
}

pub const SENTIMENT: &str = "SENTIMENT";
pub const TOPIC: &str = "TOPIC";

/// The default desk-scale schema: SENTIMENT {POS, NEG} × TOPIC {MUSIC,
/// SPORT, WEATHER}, ten marker words per value.
pub fn default_schema() -> AttributeSchema {
    let lex = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    AttributeSchema {
        families: vec![
            AttributeFamily {
                name: SENTIMENT.into(),
                values: vec!["POS".into(), "NEG".into()],
                lexicons: BTreeMap::from([
                    (
                        "POS".into(),
                        lex(&[
                            "great", "lovely", "wonderful", "delightful", "charming", "pleasant",
                            "superb", "refreshing", "splendid", "cheerful",
                        ]),
                    ),
                    (
                        "NEG".into(),
                        lex(&[
                            "awful", "dreadful", "terrible", "gloomy", "miserable", "dismal",
                            "unpleasant", "horrid", "tedious", "bleak",
                        ]),
                    ),
                ]),
            },
            AttributeFamily {
                name: TOPIC.into(),
                values: vec!["MUSIC".into(), "SPORT".into(), "WEATHER".into()],
                lexicons: BTreeMap::from([
                    (
                        "MUSIC".into(),
                        lex(&[
                            "guitar", "piano", "violin", "drums", "melody", "concert", "chorus",
                            "trumpet", "rhythm", "orchestra",
                        ]),
                    ),
                    (
                        "SPORT".into(),
                        lex(&[
                            "match", "stadium", "race", "team", "goal", "tournament", "athlete",
                            "sprint", "league", "referee",
                        ]),
                    ),
                    (
                        "WEATHER".into(),
                        lex(&[
                            "rain", "thunder", "breeze", "frost", "sunshine", "clouds", "storm",
                            "drizzle", "snowfall", "fog",
                        ]),
                    ),
                ]),
            },
        ],
    }
}

/// Default template grammar. Dual templates are merges of the single ones,
/// sharing word n-grams around each slot, so prompts trained on single-slot
/// sentences steer naturally into the dual shapes.
pub fn default_templates() -> Vec<Template> {
    [
        // Single-slot, sentiment.
        "the outing felt {SENTIMENT} to everyone",
        "our visit seemed {SENTIMENT} overall",
        "everyone called the day {SENTIMENT}",
        "the mood stayed {SENTIMENT} all night",
        "they found the evening {SENTIMENT}",
        // Single-slot, topic.
        "we heard about the {TOPIC} today",
        "the {TOPIC} kept everyone busy",
        "they gathered near the {TOPIC} again",
        "the {TOPIC} drew a huge crowd",
        "news of the {TOPIC} spread fast",
        // Dual-slot. Every single-slot opening has a dual continuation, so
        // no prefix commits the sentence to one family.
        "the {TOPIC} outing felt {SENTIMENT} to everyone",
        "our visit to the {TOPIC} seemed {SENTIMENT} overall",
        "everyone called the {TOPIC} day {SENTIMENT}",
        "the {TOPIC} kept the mood {SENTIMENT} all night",
        "they found the {TOPIC} evening {SENTIMENT}",
        "news of the {TOPIC} felt {SENTIMENT} today",
        "the outing near the {TOPIC} felt {SENTIMENT} to everyone",
        "the mood at the {TOPIC} stayed {SENTIMENT} all night",
        "we heard about the {TOPIC} and felt {SENTIMENT} today",
        "they gathered near the {TOPIC} feeling {SENTIMENT} again",
        // Neutral. Distinct openers, so evaluation prefixes never route
        // into a slot-free sentence shape.
        "after lunch the group met again",
        "before long the plan changed twice",
        "around town a quiet hour passed",
        "next week a new gathering begins",
        "for a while nothing else happened",
    ]
    .iter()
    .map(|t| Template::parse(t))
    .collect()
}

/// Attribute-unrelated generation prefixes; every word appears in the
/// template grammar so continuations stay in-distribution.
pub fn default_eval_prefixes() -> Vec<String> {
    [
        "the",
        "we",
        "they",
        "everyone",
        "our",
        "the outing",
        "our visit",
        "they found",
        "everyone called",
        "the mood",
        "we heard",
        "news of",
        "they gathered",
        "the outing felt",
        "news of the",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn default_corpus_spec(sentences_per_attribute: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        schema: default_schema(),
        templates: default_templates(),
        sentences_per_attribute,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        default_corpus_spec(10, 99)
    }

    #[test]
    fn count_contract_per_value() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec).unwrap();
        // 2 sentiment values + 3 topic values, 10 each.
        assert_eq!(corpus.len(), 50);
        for fam in &spec.schema.families {
            for value in &fam.values {
                let n = corpus
                    .iter()
                    .filter(|s| s.labels.get(&fam.name) == Some(value))
                    .count();
                assert_eq!(n, 10, "{}={value}", fam.name);
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 100;
        assert_ne!(a, generate_corpus(&other).unwrap());
    }

    #[test]
    fn every_generated_sentence_is_oracle_consistent() {
        let spec = small_spec();
        for s in generate_corpus(&spec).unwrap() {
            assert!(oracle_consistent(&s, &spec.schema), "{s:?}");
            assert_eq!(s.labels.len(), 1, "single-attribute sentences carry one label");
        }
        for s in generate_dual_sentences(&spec, 4).unwrap() {
            assert!(oracle_consistent(&s, &spec.schema), "{s:?}");
            assert_eq!(s.labels.len(), 2);
        }
        for s in generate_neutral_sentences(&spec, 4).unwrap() {
            assert!(oracle_consistent(&s, &spec.schema), "{s:?}");
            assert!(s.labels.is_empty());
        }
    }

    #[test]
    fn oracle_single_marker() {
        let schema = default_schema();
        let v = oracle_label("it was a great day", &schema);
        assert_eq!(v[SENTIMENT], LabelOutcome::Value("POS".into()));
        assert_eq!(v[TOPIC], LabelOutcome::Abstain);
    }

    #[test]
    fn oracle_ambiguity_abstains() {
        let schema = default_schema();
        let v = oracle_label("a great but awful day", &schema);
        assert_eq!(v[SENTIMENT], LabelOutcome::Abstain);
    }

    #[test]
    fn oracle_labels_both_families_on_dual_sentences() {
        let schema = default_schema();
        let v = oracle_label("the guitar outing felt great to everyone", &schema);
        assert_eq!(v[SENTIMENT], LabelOutcome::Value("POS".into()));
        assert_eq!(v[TOPIC], LabelOutcome::Value("MUSIC".into()));
    }

    #[test]
    fn schema_rejects_lexicon_overlap() {
        let mut schema = default_schema();
        schema.families[0]
            .lexicons
            .get_mut("POS")
            .unwrap()
            .push("guitar".into());
        assert!(matches!(schema.validate(), Err(CorpusError::InvalidSchema(_))));
    }

    #[test]
    fn template_filler_collision_is_rejected() {
        let mut spec = small_spec();
        spec.templates.push(Template::parse("the guitar was {SENTIMENT}"));
        assert!(matches!(
            spec.validate(),
            Err(CorpusError::TemplateInconsistency(_))
        ));
    }

    #[test]
    fn prefixes_use_grammar_words_only() {
        let spec = small_spec();
        let mut words = BTreeSet::new();
        for t in &spec.templates {
            for p in &t.parts {
                if let TemplatePart::Word(w) = p {
                    words.insert(w.clone());
                }
            }
        }
        for prefix in default_eval_prefixes() {
            for w in prefix.split_whitespace() {
                assert!(words.contains(w), "prefix word {w} not in grammar");
            }
        }
    }
}
