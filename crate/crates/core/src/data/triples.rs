//! Closed-scheme fact triples: relations come from a fixed inventory and
//! each relation fixes the class of its object.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::corpus::Inventory;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[String; 3]", into = "[String; 3]")]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), relation: relation.into(), object: object.into() }
    }
}

impl From<[String; 3]> for FactTriple {
    fn from([subject, relation, object]: [String; 3]) -> Self {
        Self { subject, relation, object }
    }
}

impl From<FactTriple> for [String; 3] {
    fn from(t: FactTriple) -> Self {
        [t.subject, t.relation, t.object]
    }
}

impl fmt::Display for FactTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

/// Word classes the extractor pattern-matches against.
#[derive(Clone, Debug)]
pub struct Grammar {
    subjects: HashSet<String>,
    /// relation → admissible objects
    relations: HashMap<String, HashSet<String>>,
    sentence_end: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Extraction {
    pub triples: BTreeSet<FactTriple>,
    /// Sentences that produced no triple (fillers, or a relation word without a subject or object).
    pub unparsed_sentences: usize,
}

impl Grammar {
    pub fn from_inventory(inv: &Inventory) -> Self {
        let relations = inv
            .relations
            .iter()
            .map(|r| (r.word.clone(), inv.objects_of(r.class).iter().cloned().collect()))
            .collect();
        Self {
            subjects: inv.subjects.iter().cloned().collect(),
            relations,
            sentence_end: inv.sentence_end.clone(),
        }
    }

    pub fn is_relation(&self, word: &str) -> bool {
        self.relations.contains_key(word)
    }

    pub fn is_subject(&self, word: &str) -> bool {
        self.subjects.contains(word)
    }

    /// Within each sentence, every relation word pairs with the nearest
    /// preceding subject and the first following object of its class.
    pub fn extract<S: AsRef<str>>(&self, text: &[S]) -> Extraction {
        let mut out = Extraction::default();
        for sentence in text.split(|w| w.as_ref() == self.sentence_end) {
            if sentence.is_empty() {
                continue;
            }
            let mut found = false;
            for (i, w) in sentence.iter().enumerate() {
                let Some(objects) = self.relations.get(w.as_ref()) else { continue };
                let subject = sentence[..i].iter().rev().find(|s| self.subjects.contains(s.as_ref()));
                let object = sentence[i + 1..].iter().find(|o| objects.contains(o.as_ref()));
                if let (Some(s), Some(o)) = (subject, object) {
                    out.triples.insert(FactTriple::new(s.as_ref(), w.as_ref(), o.as_ref()));
                    found = true;
                }
            }
            if !found {
                out.unparsed_sentences += 1;
            }
        }
        out
    }
}

/// Fraction of summary triples that are gold facts of the document.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precision {
    pub value: f64,
    /// The summary yielded no triples; `value` is 1 by convention.
    pub vacuous: bool,
}

pub fn fact_precision(summary: &BTreeSet<FactTriple>, gold: &BTreeSet<FactTriple>) -> Precision {
    if summary.is_empty() {
        return Precision { value: 1.0, vacuous: true };
    }
    let hits = summary.intersection(gold).count();
    Precision { value: hits as f64 / summary.len() as f64, vacuous: false }
}
