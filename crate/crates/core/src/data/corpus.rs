//! Templated news-style documents. Each document has a title naming its
//! subject, one or two gold fact sentences about that subject, one to three
//! distractor sentences that contradict a gold fact, and optional filler.
//! The summary restates the gold facts in document order.
//!
//! Training documents can carry two skews the test split does not: gold
//! sentences placed before distractors (`train_lead_bias`) and gold objects
//! drawn from a per-(subject, relation) favourite (`train_prior_strength`).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::triples::FactTriple;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const SUBJECTS: &[&str] = &[
    "bapchild", "langport", "wirral", "crawley", "somerset", "cheshire", "kent", "derby", "essex", "surrey",
    "devon", "dorset", "norfolk", "suffolk", "durham", "rutland", "wessex", "mercia", "ayr", "fife", "moray",
    "lanark", "powys", "gwent",
];
const NUMBERS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "twenty", "thirty", "forty",
];
const PLACES: &[&str] = &[
    "london", "leeds", "paris", "rome", "oslo", "cairo", "lima", "delhi", "quito", "riga", "porto", "malmo",
    "genoa", "turin", "lyon", "bonn",
];
const NUMBER_RELATIONS: &[&str] = &["scored", "hired", "sold", "lost"];
const PLACE_RELATIONS: &[&str] = &["visited", "left", "joined", "praised"];
const FILLERS: &[&[&str]] = &[
    &["the", "crowd", "cheered", "loudly"],
    &["it", "rained", "all", "day"],
    &["officials", "said", "nothing", "more"],
    &["the", "season", "continues", "next", "week"],
    &["fans", "gathered", "outside", "early"],
    &["the", "weather", "was", "cold"],
];
const TITLE: &[&str] = &["news", ":"];
const SENTENCE_END: &str = ".";
/// Fact sentence shapes; `S`, `R`, `O` are placeholders.
const TEMPLATES: &[&[&str]] = &[
    &["S", "R", "O"],
    &["S", "also", "R", "O"],
    &["later", "S", "R", "O"],
    &["S", "R", "O", "again"],
    &["reportedly", "S", "R", "O"],
    &["S", "quietly", "R", "O"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Number,
    Place,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub word: String,
    pub class: ObjectClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// How many fact-sentence shapes are in use (1..=6).
    pub n_templates: usize,
    pub seed: u64,
    pub n_subjects: usize,
    pub n_numbers: usize,
    pub n_places: usize,
    /// Relations per object class (1..=4).
    pub n_relations_per_class: usize,
    pub max_gold_facts: usize,
    pub max_distractors: usize,
    pub max_fillers: usize,
    /// Probability that a training document lists all gold sentences before any distractor.
    pub train_lead_bias: f64,
    /// Probability that a training gold object is its (subject, relation) favourite.
    pub train_prior_strength: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            n_templates: 4,
            seed: 0,
            n_subjects: 12,
            n_numbers: 10,
            n_places: 10,
            n_relations_per_class: 2,
            max_gold_facts: 2,
            max_distractors: 3,
            max_fillers: 2,
            train_lead_bias: 0.0,
            train_prior_strength: 0.8,
        }
    }
}

/// Word inventories of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub subjects: Vec<String>,
    pub numbers: Vec<String>,
    pub places: Vec<String>,
    pub relations: Vec<Relation>,
    pub sentence_end: String,
}

fn take(list: &[&str], n: usize, what: &str) -> Result<Vec<String>> {
    if n > list.len() {
        return Err(Error::Generation(format!("at most {} {what} available, {n} requested", list.len())));
    }
    Ok(list[..n].iter().map(|s| s.to_string()).collect())
}

impl Inventory {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        let facts = spec.max_gold_facts.max(1);
        if spec.n_subjects < 1 + spec.max_distractors.max(1) {
            return Err(Error::Generation(format!(
                "{} subjects cannot keep {} distractors apart from the gold subject",
                spec.n_subjects, spec.max_distractors
            )));
        }
        for (n, class) in [(spec.n_numbers, "numbers"), (spec.n_places, "places")] {
            if n < 2 {
                return Err(Error::Generation(format!("need at least 2 {class} so distractors can conflict")));
            }
        }
        if spec.n_relations_per_class == 0 || 2 * spec.n_relations_per_class < facts {
            return Err(Error::Generation(format!(
                "{} relations per class cannot hold {facts} distinct gold relations",
                spec.n_relations_per_class
            )));
        }
        let mut relations = Vec::new();
        for w in take(NUMBER_RELATIONS, spec.n_relations_per_class, "number relations")? {
            relations.push(Relation { word: w, class: ObjectClass::Number });
        }
        for w in take(PLACE_RELATIONS, spec.n_relations_per_class, "place relations")? {
            relations.push(Relation { word: w, class: ObjectClass::Place });
        }
        Ok(Self {
            subjects: take(SUBJECTS, spec.n_subjects, "subjects")?,
            numbers: take(NUMBERS, spec.n_numbers, "numbers")?,
            places: take(PLACES, spec.n_places, "places")?,
            relations,
            sentence_end: SENTENCE_END.into(),
        })
    }

    pub fn objects_of(&self, class: ObjectClass) -> &[String] {
        match class {
            ObjectClass::Number => &self.numbers,
            ObjectClass::Place => &self.places,
        }
    }

    pub fn is_entity(&self, word: &str) -> bool {
        self.subjects.iter().chain(&self.numbers).chain(&self.places).any(|w| w == word)
    }

    /// Every word a document or summary can contain, in a fixed order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = vec![self.sentence_end.clone()];
        out.extend(TITLE.iter().map(|s| s.to_string()));
        out.extend(self.subjects.iter().cloned());
        out.extend(self.relations.iter().map(|r| r.word.clone()));
        out.extend(self.numbers.iter().cloned());
        out.extend(self.places.iter().cloned());
        for t in TEMPLATES {
            out.extend(t.iter().filter(|w| !matches!(**w, "S" | "R" | "O")).map(|s| s.to_string()));
        }
        for f in FILLERS {
            out.extend(f.iter().map(|s| s.to_string()));
        }
        let mut seen = BTreeSet::new();
        out.retain(|w| seen.insert(w.clone()));
        out
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::with_words(self.words()).expect("words are deduplicated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub id: String,
    pub document: Vec<String>,
    pub summary: Vec<String>,
    pub gold_facts: Vec<FactTriple>,
    pub distractor_facts: Vec<FactTriple>,
    /// Half-open `[start, end)` token spans of subjects and objects in the document.
    pub entity_spans: Vec<[usize; 2]>,
}

impl SyntheticExample {
    pub fn gold_set(&self) -> BTreeSet<FactTriple> {
        self.gold_facts.iter().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inventory: Inventory,
    pub train: Vec<SyntheticExample>,
    pub test: Vec<SyntheticExample>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    inv: &'a Inventory,
    /// favourite object index per (subject, relation)
    favourites: Vec<Vec<usize>>,
}

enum Sentence {
    Gold(usize),
    Distractor(usize),
    Filler(usize),
}

impl Generator<'_> {
    fn verbalize(&self, fact: &FactTriple, template: &[&str], out: &mut Vec<String>, spans: &mut Vec<[usize; 2]>) {
        for &w in template {
            let word = match w {
                "S" => &fact.subject,
                "R" => &fact.relation,
                "O" => &fact.object,
                other => {
                    out.push(other.to_string());
                    continue;
                }
            };
            if w != "R" {
                spans.push([out.len(), out.len() + 1]);
            }
            out.push(word.clone());
        }
        out.push(SENTENCE_END.into());
    }

    fn example(&self, rng: &mut ChaCha8Rng, split: Split, id: String) -> SyntheticExample {
        let spec = self.spec;
        let inv = self.inv;
        let subject_idx = rng.gen_range(0..inv.subjects.len());
        let subject = &inv.subjects[subject_idx];
        let n_gold = rng.gen_range(1..=spec.max_gold_facts.max(1));
        let mut rel_ids: Vec<usize> = (0..inv.relations.len()).collect();
        rel_ids.shuffle(rng);
        rel_ids.truncate(n_gold);

        let gold: Vec<FactTriple> = rel_ids
            .iter()
            .map(|&r| {
                let rel = &inv.relations[r];
                let objects = inv.objects_of(rel.class);
                let favoured = split == Split::Train && rng.gen_bool(spec.train_prior_strength);
                let o = if favoured { self.favourites[subject_idx][r] } else { rng.gen_range(0..objects.len()) };
                FactTriple::new(subject.clone(), rel.word.clone(), objects[o].clone())
            })
            .collect();

        let n_distractors = rng.gen_range(1..=spec.max_distractors.max(1));
        let mut distractors: Vec<FactTriple> = Vec::new();
        while distractors.len() < n_distractors {
            let g = &gold[rng.gen_range(0..gold.len())];
            let rel = inv.relations.iter().find(|r| r.word == g.relation).expect("gold relation in inventory");
            let others: Vec<&String> = inv.subjects.iter().filter(|s| *s != subject).collect();
            let s = others[rng.gen_range(0..others.len())];
            let objects: Vec<&String> = inv
                .objects_of(rel.class)
                .iter()
                .filter(|o| !gold.iter().any(|f| f.relation == g.relation && &f.object == *o))
                .collect();
            let o = objects[rng.gen_range(0..objects.len())];
            let candidate = FactTriple::new(s.clone(), g.relation.clone(), o.clone());
            if !distractors.contains(&candidate) {
                distractors.push(candidate);
            }
        }

        let n_fillers = rng.gen_range(0..=spec.max_fillers);
        let mut order: Vec<Sentence> = (0..gold.len()).map(Sentence::Gold).collect();
        order.extend((0..distractors.len()).map(Sentence::Distractor));
        order.extend((0..n_fillers).map(|_| Sentence::Filler(rng.gen_range(0..FILLERS.len()))));
        order.shuffle(rng);
        if split == Split::Train && rng.gen_bool(spec.train_lead_bias) {
            // gold sentences take the earliest fact slots, keeping their relative order
            let slots: Vec<usize> =
                (0..order.len()).filter(|&i| !matches!(order[i], Sentence::Filler(_))).collect();
            let mut facts: Vec<Sentence> = Vec::new();
            for &i in &slots {
                facts.push(std::mem::replace(&mut order[i], Sentence::Filler(0)));
            }
            facts.sort_by_key(|s| !matches!(s, Sentence::Gold(_)));
            for (i, s) in slots.into_iter().zip(facts) {
                order[i] = s;
            }
        }

        let n_templates = spec.n_templates.clamp(1, TEMPLATES.len());
        let mut document: Vec<String> = vec![subject.clone()];
        let mut spans = vec![[0, 1]];
        document.extend(TITLE.iter().map(|s| s.to_string()));
        let mut gold_in_order = Vec::new();
        for s in &order {
            match *s {
                Sentence::Gold(i) => {
                    let t = TEMPLATES[rng.gen_range(0..n_templates)];
                    self.verbalize(&gold[i], t, &mut document, &mut spans);
                    gold_in_order.push(gold[i].clone());
                }
                Sentence::Distractor(i) => {
                    let t = TEMPLATES[rng.gen_range(0..n_templates)];
                    self.verbalize(&distractors[i], t, &mut document, &mut spans);
                }
                Sentence::Filler(i) => {
                    document.extend(FILLERS[i].iter().map(|s| s.to_string()));
                    document.push(SENTENCE_END.into());
                }
            }
        }
        let mut summary = Vec::new();
        for f in &gold_in_order {
            self.verbalize(f, TEMPLATES[0], &mut summary, &mut Vec::new());
        }
        SyntheticExample {
            id,
            document,
            summary,
            gold_facts: gold_in_order,
            distractor_facts: distractors,
            entity_spans: spans,
        }
    }
}

/// Builds train and test splits. The same spec always yields the same dataset.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    for (name, p) in [("train_lead_bias", spec.train_lead_bias), ("train_prior_strength", spec.train_prior_strength)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Generation(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    if spec.n_templates == 0 || spec.n_templates > TEMPLATES.len() {
        return Err(Error::Generation(format!("n_templates must be in 1..={}", TEMPLATES.len())));
    }
    let inv = Inventory::new(spec)?;
    let mut fav_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    fav_rng.set_stream(2);
    let favourites = (0..inv.subjects.len())
        .map(|_| inv.relations.iter().map(|r| fav_rng.gen_range(0..inv.objects_of(r.class).len())).collect())
        .collect();
    let gen = Generator { spec, inv: &inv, favourites };
    let split = |n: usize, which: Split, stream: u64, prefix: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..n).map(|i| gen.example(&mut rng, which, format!("{prefix}-{i:05}"))).collect::<Vec<_>>()
    };
    let train = split(spec.n_train, Split::Train, 0, "train");
    let test = split(spec.n_test, Split::Test, 1, "test");
    Ok(Dataset { inventory: inv.clone(), train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::triples::{fact_precision, Grammar};

    fn small() -> CorpusSpec {
        CorpusSpec { n_train: 100, n_test: 50, ..CorpusSpec::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = generate_corpus(&CorpusSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(generate_corpus(&small()).unwrap().train, other.train);
    }

    #[test]
    fn construction_invariants() {
        let d = generate_corpus(&small()).unwrap();
        let grammar = Grammar::from_inventory(&d.inventory);
        for ex in d.train.iter().chain(&d.test) {
            let gold = ex.gold_set();
            let distractors: BTreeSet<_> = ex.distractor_facts.iter().cloned().collect();
            assert!(gold.is_disjoint(&distractors));
            let summary = grammar.extract(&ex.summary).triples;
            assert_eq!(summary, gold);
            assert_eq!(fact_precision(&summary, &gold).value, 1.0);
            for f in &distractors {
                assert!(gold.iter().any(|g| g.relation == f.relation && g.subject != f.subject && g.object != f.object));
            }
            let doc = grammar.extract(&ex.document).triples;
            assert_eq!(doc, gold.union(&distractors).cloned().collect());
            for &[s, e] in &ex.entity_spans {
                assert!(s < e && e <= ex.document.len());
                assert!(d.inventory.is_entity(&ex.document[s]));
            }
        }
    }

    #[test]
    fn lead_bias_only_in_train() {
        let spec = CorpusSpec { n_train: 300, n_test: 300, train_lead_bias: 1.0, ..CorpusSpec::default() };
        let d = generate_corpus(&spec).unwrap();
        let gold_first = |ex: &SyntheticExample| {
            let first_rel = ex.document.iter().position(|w| d.inventory.relations.iter().any(|r| &r.word == w));
            let subj_before = ex.document[..first_rel.unwrap()].iter().rev().find(|w| d.inventory.subjects.contains(w));
            subj_before == Some(&ex.gold_facts[0].subject)
        };
        assert!(d.train.iter().all(gold_first));
        let test_rate = d.test.iter().filter(|e| gold_first(e)).count() as f64 / 300.0;
        assert!(test_rate < 0.8, "{test_rate}");
    }

    #[test]
    fn tiny_inventory_is_rejected() {
        let spec = CorpusSpec { n_subjects: 2, max_distractors: 3, ..small() };
        assert!(matches!(generate_corpus(&spec), Err(Error::Generation(_))));
        let spec = CorpusSpec { n_numbers: 1, ..small() };
        assert!(generate_corpus(&spec).is_err());
        let spec = CorpusSpec { n_subjects: 99, ..small() };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn vocabulary_covers_corpus() {
        let d = generate_corpus(&small()).unwrap();
        let v = d.inventory.vocabulary();
        for ex in &d.train {
            for w in ex.document.iter().chain(&ex.summary) {
                assert_ne!(v.id(w), None, "{w}");
            }
        }
    }
}
