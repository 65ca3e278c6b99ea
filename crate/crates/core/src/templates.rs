//! Per-relation cloze and noun-phrase templates.
//!
//! Each relation carries two strings with a single `{subject}` placeholder:
//! a cloze prompt (`"The spouse of {subject} is"`) and a noun phrase that
//! refers to the relation's object (`"the spouse of {subject}"`). Multi-hop
//! prompts are composed by nesting noun phrases inside the final cloze, so
//! `|R|` pairs cover every chain of every depth. Literal braces are written
//! doubled (`{{`, `}}`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, RelationId};

pub const PLACEHOLDER: &str = "{subject}";

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template:?}: {reason}")]
    BadPlaceholder { template: String, reason: String },
    #[error("cloze template {0:?} must end mid-sentence")]
    TerminatedCloze(String),
    #[error("no template pair for relation {0}")]
    UnknownRelation(RelationId),
    #[error("relation chain is empty")]
    EmptyChain,
    #[error("template file names unknown relation {0:?}")]
    UnknownLabel(String),
    #[error("template file: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TemplateError>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Subject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    fn parse(source: &str) -> Result<Self> {
        let bad = |reason: &str| TemplateError::BadPlaceholder {
            template: source.to_string(),
            reason: reason.to_string(),
        };
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut rest = source;
        let mut subjects = 0;
        while let Some(c) = rest.chars().next() {
            if rest.starts_with("{{") {
                lit.push('{');
                rest = &rest[2..];
            } else if rest.starts_with("}}") {
                lit.push('}');
                rest = &rest[2..];
            } else if rest.starts_with(PLACEHOLDER) {
                if !lit.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                segments.push(Segment::Subject);
                subjects += 1;
                rest = &rest[PLACEHOLDER.len()..];
            } else if c == '{' || c == '}' {
                return Err(bad("stray brace (write literal braces doubled)"));
            } else {
                lit.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        if !lit.is_empty() {
            segments.push(Segment::Literal(lit));
        }
        match subjects {
            1 => Ok(Self {
                source: source.to_string(),
                segments,
            }),
            0 => Err(bad("missing {subject} placeholder")),
            _ => Err(bad("{subject} appears more than once")),
        }
    }

    fn render(&self, subject: &str) -> String {
        let mut out = String::with_capacity(self.source.len() + subject.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Subject => out.push_str(subject),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplatePair {
    pub relation: RelationId,
    cloze: Template,
    nounphrase: Template,
}

impl TemplatePair {
    pub fn new(relation: RelationId, cloze: &str, nounphrase: &str) -> Result<Self> {
        let cloze_t = Template::parse(cloze)?;
        if cloze.trim_end().ends_with(['.', '?', '!']) {
            return Err(TemplateError::TerminatedCloze(cloze.to_string()));
        }
        Ok(Self {
            relation,
            cloze: cloze_t,
            nounphrase: Template::parse(nounphrase)?,
        })
    }

    pub fn cloze(&self) -> &str {
        &self.cloze.source
    }

    pub fn nounphrase(&self) -> &str {
        &self.nounphrase.source
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateRegistry {
    pairs: BTreeMap<RelationId, TemplatePair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairRecord {
    cloze: String,
    nounphrase: String,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store a pair, replacing any previous pair for `relation`.
    pub fn register(&mut self, relation: RelationId, cloze: &str, nounphrase: &str) -> Result<()> {
        let pair = TemplatePair::new(relation, cloze, nounphrase)?;
        self.pairs.insert(relation, pair);
        Ok(())
    }

    pub fn get(&self, relation: RelationId) -> Option<&TemplatePair> {
        self.pairs.get(&relation)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of stored template strings (two per relation).
    pub fn template_count(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &TemplatePair> {
        self.pairs.values()
    }

    fn pair(&self, relation: RelationId) -> Result<&TemplatePair> {
        self.pairs
            .get(&relation)
            .ok_or(TemplateError::UnknownRelation(relation))
    }

    pub fn render_cloze(&self, relation: RelationId, subject_text: &str) -> Result<String> {
        Ok(self.pair(relation)?.cloze.render(subject_text))
    }

    pub fn render_nounphrase(&self, relation: RelationId, subject_text: &str) -> Result<String> {
        Ok(self.pair(relation)?.nounphrase.render(subject_text))
    }

    /// Fold noun phrases over the chain, innermost first.
    pub fn nested_nounphrase(&self, subject_text: &str, relations: &[RelationId]) -> Result<String> {
        relations.iter().try_fold(subject_text.to_string(), |acc, &r| {
            self.render_nounphrase(r, &acc)
        })
    }

    /// `t_{r_d}(r_{d-1}(...r_1(subject)))`.
    pub fn compose_prompt(&self, subject_text: &str, relations: &[RelationId]) -> Result<String> {
        let (&last, inner) = relations.split_last().ok_or(TemplateError::EmptyChain)?;
        let nested = self.nested_nounphrase(subject_text, inner)?;
        self.render_cloze(last, &nested)
    }

    /// Relations of `graph` that have no template pair, by label.
    pub fn missing_for(&self, graph: &KnowledgeGraph) -> Vec<String> {
        graph
            .relations()
            .iter()
            .filter(|r| !self.pairs.contains_key(&r.id))
            .map(|r| r.label.clone())
            .collect()
    }

    /// Generic English templates keyed by relation label, e.g.
    /// `"The rel3 of {subject} is"` / `"the rel3 of {subject}"`.
    pub fn generic_for(graph: &KnowledgeGraph) -> Self {
        let mut reg = Self::new();
        for r in graph.relations() {
            let label = r.label.replace('{', "{{").replace('}', "}}");
            reg.register(
                r.id,
                &format!("The {label} of {PLACEHOLDER} is"),
                &format!("the {label} of {PLACEHOLDER}"),
            )
            .expect("generated templates are well formed");
        }
        reg
    }

    pub fn to_json(&self, graph: &KnowledgeGraph) -> String {
        let doc: BTreeMap<&str, PairRecord> = self
            .pairs
            .values()
            .map(|p| {
                (
                    graph.relation_label(p.relation),
                    PairRecord {
                        cloze: p.cloze().to_string(),
                        nounphrase: p.nounphrase().to_string(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&doc).expect("template document serializes")
    }

    pub fn from_json(text: &str, graph: &KnowledgeGraph) -> Result<Self> {
        let doc: BTreeMap<String, PairRecord> =
            serde_json::from_str(text).map_err(|e| TemplateError::Io(e.to_string()))?;
        let mut reg = Self::new();
        for (label, rec) in doc {
            let id = graph
                .relation_by_label(&label)
                .ok_or_else(|| TemplateError::UnknownLabel(label.clone()))?;
            reg.register(id, &rec.cloze, &rec.nounphrase)?;
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path, graph: &KnowledgeGraph) -> Result<()> {
        std::fs::write(path, self.to_json(graph)).map_err(|e| TemplateError::Io(e.to_string()))
    }

    pub fn load(path: &Path, graph: &KnowledgeGraph) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, graph)
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::pm_templates;
    use super::*;
    use crate::kg::fixtures::pm_world;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn render_examples() {
        let w = pm_world();
        let reg = pm_templates(&w);
        assert_eq!(reg.template_count(), 4);
        assert_eq!(
            reg.render_cloze(w.pm, "the United Kingdom").unwrap(),
            "The Prime Minister of the United Kingdom is"
        );
        assert_eq!(
            reg.render_cloze(w.spouse, "Rishi Sunak").unwrap(),
            "The spouse of Rishi Sunak is"
        );
        assert_eq!(
            reg.render_nounphrase(w.spouse, "the United Kingdom Prime Minister")
                .unwrap(),
            "the spouse of the United Kingdom Prime Minister"
        );
        assert_eq!(
            reg.render_nounphrase(w.pm, "the United Kingdom").unwrap(),
            "the United Kingdom Prime Minister"
        );
        assert_eq!(
            reg.render_cloze(RelationId(9), "x"),
            Err(TemplateError::UnknownRelation(RelationId(9)))
        );
        assert!(reg.render_nounphrase(RelationId(9), "x").is_err());
    }

    #[test]
    fn compose_two_hop_prompt() {
        let w = pm_world();
        let reg = pm_templates(&w);
        assert_eq!(
            reg.compose_prompt("the United Kingdom", &[w.pm, w.spouse])
                .unwrap(),
            "The spouse of the United Kingdom Prime Minister is"
        );
        assert_eq!(
            reg.compose_prompt("the United Kingdom", &[w.pm]).unwrap(),
            "The Prime Minister of the United Kingdom is"
        );
        assert_eq!(reg.compose_prompt("x", &[]), Err(TemplateError::EmptyChain));
    }

    #[test]
    fn placeholder_validation() {
        let mut reg = TemplateRegistry::new();
        let r = RelationId(0);
        assert!(matches!(
            reg.register(r, "The spouse of is", "the spouse of {subject}"),
            Err(TemplateError::BadPlaceholder { .. })
        ));
        assert!(matches!(
            reg.register(r, "{subject} and {subject} is", "the x of {subject}"),
            Err(TemplateError::BadPlaceholder { .. })
        ));
        assert!(matches!(
            reg.register(r, "The {s} of {subject} is", "x {subject}"),
            Err(TemplateError::BadPlaceholder { .. })
        ));
        assert!(matches!(
            reg.register(r, "The spouse of {subject} is.", "the spouse of {subject}"),
            Err(TemplateError::TerminatedCloze(_))
        ));
        reg.register(r, "The {{set}} of {subject} is", "the {{set}} of {subject}")
            .unwrap();
        assert_eq!(reg.render_cloze(r, "A").unwrap(), "The {set} of A is");
        // re-registration replaces
        reg.register(r, "Who? {subject} is", "the y of {subject}").unwrap();
        assert_eq!(reg.render_cloze(r, "A").unwrap(), "Who? A is");
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn fifty_relations_realize_2500_prompts_from_100_strings() {
        let mut reg = TemplateRegistry::new();
        for i in 0..50u32 {
            reg.register(
                RelationId(i),
                &format!("The r{i} of {{subject}} is"),
                &format!("the r{i} of {{subject}}"),
            )
            .unwrap();
        }
        assert_eq!(reg.template_count(), 100);
        let mut prompts = BTreeSet::new();
        for a in 0..50 {
            for b in 0..50 {
                prompts.insert(
                    reg.compose_prompt("S", &[RelationId(a), RelationId(b)])
                        .unwrap(),
                );
            }
        }
        assert_eq!(prompts.len(), 2500);
    }

    #[test]
    fn json_round_trip_by_label() {
        let w = pm_world();
        let reg = pm_templates(&w);
        let text = reg.to_json(&w.graph);
        assert!(text.contains("\"spouse\""));
        let back = TemplateRegistry::from_json(&text, &w.graph).unwrap();
        assert_eq!(back, reg);
        assert!(matches!(
            TemplateRegistry::from_json("{\"nope\":{\"cloze\":\"{subject} is\",\"nounphrase\":\"{subject}\"}}", &w.graph),
            Err(TemplateError::UnknownLabel(_))
        ));
        let mut partial = TemplateRegistry::new();
        partial.register(w.pm, "The PM of {subject} is", "the {subject} PM").unwrap();
        assert_eq!(partial.missing_for(&w.graph), vec!["spouse".to_string()]);
    }

    proptest! {
        #[test]
        fn composition_nests_and_never_leaks_placeholder(
            chain in proptest::collection::vec(0u32..8, 1..5),
            subject in "[A-Za-z ]{1,12}",
        ) {
            let mut reg = TemplateRegistry::new();
            for i in 0..8u32 {
                reg.register(RelationId(i), &format!("Q{i} {{subject}} is"), &format!("n{i}({{subject}})")).unwrap();
            }
            let chain: Vec<_> = chain.into_iter().map(RelationId).collect();
            let composed = reg.compose_prompt(&subject, &chain).unwrap();
            let (last, inner) = chain.split_last().unwrap();
            let expected = reg.render_cloze(*last, &reg.nested_nounphrase(&subject, inner).unwrap()).unwrap();
            prop_assert_eq!(&composed, &expected);
            prop_assert!(!composed.contains(PLACEHOLDER));
        }
    }
}
