//! Template grammar for short captions: parsing to scene graphs, flattening
//! back to text, and the full/partial matching used to build groups.
//!
//! The grammar covers six caption shapes. `M` below is a modifier slot that
//! accepts an adjective or a noun used attributively ("cowboy hat").
//!
//! | template          | pattern       | example                           |
//! |-------------------|---------------|-----------------------------------|
//! | `AttSubRelAttObj` | `M N R M N`   | colorful bag on white background  |
//! | `AttSubRelObj`    | `M N R N`     | young woman in chair              |
//! | `SubRelAttObj`    | `N R M N`     | woman with cowboy hat             |
//! | `SubRelObj`       | `N R N`       | woman in chair                    |
//! | `AdjObj`          | `A N`         | colorful bag                      |
//! | `NnObj`           | `N N`         | business team                     |

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordClass {
    Noun,
    Adj,
    Rel,
}

impl WordClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WordClass::Noun => "noun",
            WordClass::Adj => "adj",
            WordClass::Rel => "rel",
        }
    }
}

/// Closed word list partitioned into nouns, adjectives and relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    nouns: Vec<String>,
    adjectives: Vec<String>,
    relations: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::from_tsv(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

impl Lexicon {
    pub fn new(nouns: Vec<String>, adjectives: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let sets = [&nouns, &adjectives, &relations];
        if sets.iter().any(|s| s.is_empty()) {
            return Err(Error::Lexicon("every word class needs at least one entry".into()));
        }
        let mut seen = BTreeSet::new();
        for word in sets.iter().flat_map(|s| s.iter()) {
            if word.is_empty() || word.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::Lexicon(format!("`{word}` is not a lowercase single word")));
            }
            if !seen.insert(word.as_str()) {
                return Err(Error::Lexicon(format!("`{word}` appears more than once")));
            }
        }
        Ok(Lexicon {
            nouns,
            adjectives,
            relations,
        })
    }

    /// Parses `word<TAB>class` lines. Blank lines and `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let (mut nouns, mut adjs, mut rels) = (Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Lexicon(format!("line {}: expected word<TAB>class", lineno + 1)))?;
            let target = match class.trim() {
                "noun" => &mut nouns,
                "adj" => &mut adjs,
                "rel" => &mut rels,
                other => return Err(Error::Lexicon(format!("line {}: unknown class `{other}`", lineno + 1))),
            };
            target.push(word.trim().to_string());
        }
        Lexicon::new(nouns, adjs, rels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Lexicon::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (class, words) in self.classes() {
            for w in words {
                out.push_str(&format!("{w}\t{}\n", class.as_str()));
            }
        }
        out
    }

    fn classes(&self) -> [(WordClass, &[String]); 3] {
        [
            (WordClass::Noun, &self.nouns),
            (WordClass::Adj, &self.adjectives),
            (WordClass::Rel, &self.relations),
        ]
    }

    pub fn class(&self, word: &str) -> Option<WordClass> {
        self.classes()
            .into_iter()
            .find(|(_, words)| words.iter().any(|w| w == word))
            .map(|(c, _)| c)
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn adjectives(&self) -> &[String] {
        &self.adjectives
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    /// All words, nouns first, in file order.
    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.nouns.iter().chain(&self.adjectives).chain(&self.relations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaptionTemplate {
    SubRelObj,
    AdjObj,
    NnObj,
    AttSubRelObj,
    SubRelAttObj,
    AttSubRelAttObj,
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Noun,
    Adj,
    Rel,
    Modifier,
}

impl CaptionTemplate {
    pub const ALL: [CaptionTemplate; 6] = [
        CaptionTemplate::SubRelObj,
        CaptionTemplate::AdjObj,
        CaptionTemplate::NnObj,
        CaptionTemplate::AttSubRelObj,
        CaptionTemplate::SubRelAttObj,
        CaptionTemplate::AttSubRelAttObj,
    ];

    /// Matching order, most specific first.
    const BY_SPECIFICITY: [CaptionTemplate; 6] = [
        CaptionTemplate::AttSubRelAttObj,
        CaptionTemplate::AttSubRelObj,
        CaptionTemplate::SubRelAttObj,
        CaptionTemplate::SubRelObj,
        CaptionTemplate::AdjObj,
        CaptionTemplate::NnObj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptionTemplate::SubRelObj => "Sub-Rel-Obj",
            CaptionTemplate::AdjObj => "Adj-Obj",
            CaptionTemplate::NnObj => "NN-Obj",
            CaptionTemplate::AttSubRelObj => "Att-Sub-Rel-Obj",
            CaptionTemplate::SubRelAttObj => "Sub-Rel-Att-Obj",
            CaptionTemplate::AttSubRelAttObj => "Att-Sub-Rel-Att-Obj",
        }
    }

    fn pattern(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            CaptionTemplate::SubRelObj => &[Noun, Rel, Noun],
            CaptionTemplate::AdjObj => &[Adj, Noun],
            CaptionTemplate::NnObj => &[Noun, Noun],
            CaptionTemplate::AttSubRelObj => &[Modifier, Noun, Rel, Noun],
            CaptionTemplate::SubRelAttObj => &[Noun, Rel, Modifier, Noun],
            CaptionTemplate::AttSubRelAttObj => &[Modifier, Noun, Rel, Modifier, Noun],
        }
    }

    pub fn is_relational(self) -> bool {
        !matches!(self, CaptionTemplate::AdjObj | CaptionTemplate::NnObj)
    }
}

impl fmt::Display for CaptionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(attributes) subject [relation (attributes) object]`
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneGraph {
    pub subject: String,
    #[serde(default)]
    pub subject_attrs: Vec<String>,
    #[serde(default)]
    pub relation: Option<String>,
    #[serde(default)]
    pub object: Option<String>,
    #[serde(default)]
    pub object_attrs: Vec<String>,
}

impl SceneGraph {
    pub fn subject(subject: impl Into<String>) -> Self {
        SceneGraph {
            subject: subject.into(),
            subject_attrs: Vec::new(),
            relation: None,
            object: None,
            object_attrs: Vec::new(),
        }
    }

    pub fn with_subject_attr(mut self, attr: impl Into<String>) -> Self {
        self.subject_attrs.push(attr.into());
        self
    }

    pub fn with_relation(mut self, relation: impl Into<String>, object: impl Into<String>) -> Self {
        self.relation = Some(relation.into());
        self.object = Some(object.into());
        self
    }

    pub fn with_object_attr(mut self, attr: impl Into<String>) -> Self {
        self.object_attrs.push(attr.into());
        self
    }

    /// Relation and object come together, and object attributes need an object.
    pub fn is_well_formed(&self) -> bool {
        self.relation.is_some() == self.object.is_some() && (self.object.is_some() || self.object_attrs.is_empty())
    }

    /// Every word the graph mentions.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.subject_attrs
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.subject.as_str()))
            .chain(self.relation.as_deref())
            .chain(self.object_attrs.iter().map(String::as_str))
            .chain(self.object.as_deref())
    }

    /// The caption template this graph flattens to, if any.
    pub fn template(&self, lexicon: &Lexicon) -> Option<CaptionTemplate> {
        let (graph, template) = parse(&flatten(self), lexicon).ok()?;
        (matches_fully(&graph, self)).then_some(template)
    }

    fn sorted_attrs(attrs: &[String]) -> Vec<&str> {
        let mut v: Vec<&str> = attrs.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&flatten(self).join(" "))
    }
}

fn slot_accepts(slot: Slot, class: WordClass) -> bool {
    match slot {
        Slot::Noun => class == WordClass::Noun,
        Slot::Adj => class == WordClass::Adj,
        Slot::Rel => class == WordClass::Rel,
        Slot::Modifier => matches!(class, WordClass::Adj | WordClass::Noun),
    }
}

/// Parses a template caption into its scene graph.
pub fn parse<S: AsRef<str>>(caption: &[S], lexicon: &Lexicon) -> Result<(SceneGraph, CaptionTemplate)> {
    let words: Vec<&str> = caption.iter().map(AsRef::as_ref).collect();
    let unparseable = || Error::Unparseable(words.join(" "));
    if words.is_empty() {
        return Err(unparseable());
    }
    let classes: Vec<WordClass> = words
        .iter()
        .map(|w| lexicon.class(w))
        .collect::<Option<_>>()
        .ok_or_else(unparseable)?;

    let template = CaptionTemplate::BY_SPECIFICITY
        .into_iter()
        .find(|t| {
            let p = t.pattern();
            p.len() == classes.len() && p.iter().zip(&classes).all(|(&s, &c)| slot_accepts(s, c))
        })
        .ok_or_else(unparseable)?;

    let w = |i: usize| words[i].to_string();
    let graph = match template {
        CaptionTemplate::AdjObj | CaptionTemplate::NnObj => SceneGraph::subject(w(1)).with_subject_attr(w(0)),
        CaptionTemplate::SubRelObj => SceneGraph::subject(w(0)).with_relation(w(1), w(2)),
        CaptionTemplate::AttSubRelObj => SceneGraph::subject(w(1)).with_subject_attr(w(0)).with_relation(w(2), w(3)),
        CaptionTemplate::SubRelAttObj => SceneGraph::subject(w(0)).with_relation(w(1), w(3)).with_object_attr(w(2)),
        CaptionTemplate::AttSubRelAttObj => SceneGraph::subject(w(1))
            .with_subject_attr(w(0))
            .with_relation(w(2), w(4))
            .with_object_attr(w(3)),
    };
    Ok((graph, template))
}

/// Convenience wrapper splitting on whitespace.
pub fn parse_str(caption: &str, lexicon: &Lexicon) -> Result<(SceneGraph, CaptionTemplate)> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    parse(&words, lexicon)
}

/// Canonical surface form; attribute lists are emitted in lexicographic order.
pub fn flatten(graph: &SceneGraph) -> Vec<String> {
    let mut out: Vec<String> = SceneGraph::sorted_attrs(&graph.subject_attrs)
        .into_iter()
        .map(str::to_string)
        .collect();
    out.push(graph.subject.clone());
    if let Some(rel) = &graph.relation {
        out.push(rel.clone());
    }
    out.extend(SceneGraph::sorted_attrs(&graph.object_attrs).into_iter().map(str::to_string));
    if let Some(obj) = &graph.object {
        out.push(obj.clone());
    }
    out
}

/// Structural equality; attribute lists compare as sets.
pub fn matches_fully(a: &SceneGraph, b: &SceneGraph) -> bool {
    a.subject == b.subject
        && a.relation == b.relation
        && a.object == b.object
        && SceneGraph::sorted_attrs(&a.subject_attrs) == SceneGraph::sorted_attrs(&b.subject_attrs)
        && SceneGraph::sorted_attrs(&a.object_attrs) == SceneGraph::sorted_attrs(&b.object_attrs)
}

/// Shares the subject head without being a full match.
pub fn matches_partially(a: &SceneGraph, b: &SceneGraph) -> bool {
    a.subject == b.subject && !matches_fully(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::default()
    }

    #[test]
    fn bundled_lexicon_is_disjoint_and_sized() {
        let l = lex();
        assert_eq!(l.nouns().len(), 14);
        assert_eq!(l.adjectives().len(), 12);
        assert_eq!(l.relations().len(), 6);
        assert_eq!(Lexicon::from_tsv(&l.to_tsv()).unwrap(), l);
    }

    #[test]
    fn lexicon_rejects_overlap_and_bad_lines() {
        assert!(Lexicon::from_tsv("red\tnoun\nred\tadj\nin\trel\n").is_err());
        assert!(Lexicon::from_tsv("red noun\n").is_err());
        assert!(Lexicon::from_tsv("red\tverb\n").is_err());
        assert!(Lexicon::from_tsv("red\tnoun\nin\trel\n").is_err());
    }

    #[test]
    fn parses_woman_in_chair() {
        let (g, t) = parse_str("woman in chair", &lex()).unwrap();
        assert_eq!(t, CaptionTemplate::SubRelObj);
        assert_eq!(g, SceneGraph::subject("woman").with_relation("in", "chair"));
    }

    #[test]
    fn parses_woman_with_cowboy_hat() {
        let (g, t) = parse_str("woman with cowboy hat", &lex()).unwrap();
        assert_eq!(t, CaptionTemplate::SubRelAttObj);
        assert_eq!(g.subject, "woman");
        assert_eq!(g.relation.as_deref(), Some("with"));
        assert_eq!(g.object.as_deref(), Some("hat"));
        assert_eq!(g.object_attrs, vec!["cowboy"]);
    }

    #[test]
    fn parses_colorful_bag_on_white_background() {
        let (g, t) = parse_str("colorful bag on white background", &lex()).unwrap();
        assert_eq!(t, CaptionTemplate::AttSubRelAttObj);
        assert_eq!(g.subject, "bag");
        assert_eq!(g.subject_attrs, vec!["colorful"]);
        assert_eq!(g.relation.as_deref(), Some("on"));
        assert_eq!(g.object.as_deref(), Some("background"));
        assert_eq!(g.object_attrs, vec!["white"]);
    }

    #[test]
    fn adjective_and_noun_modifiers_pick_their_template() {
        assert_eq!(parse_str("colorful bag", &lex()).unwrap().1, CaptionTemplate::AdjObj);
        assert_eq!(parse_str("business team", &lex()).unwrap().1, CaptionTemplate::NnObj);
        assert_eq!(
            parse_str("business team holding terrestrial globe", &lex()).unwrap().1,
            CaptionTemplate::AttSubRelAttObj
        );
        assert_eq!(parse_str("old man near dog", &lex()).unwrap().1, CaptionTemplate::AttSubRelObj);
    }

    #[test]
    fn rejects_non_template_captions() {
        for c in ["girl", "in chair", "woman chair in", "woman in in chair", "spaceship", ""] {
            assert!(matches!(parse_str(c, &lex()), Err(Error::Unparseable(_))), "{c}");
        }
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten(&SceneGraph::subject("girl")), vec!["girl"]);
        let g = SceneGraph::subject("girl").with_relation("in", "red");
        assert_eq!(flatten(&g).join(" "), "girl in red");
        assert_eq!(parse_str("girl in red", &lex()).unwrap().0, g);
    }

    #[test]
    fn matching_examples() {
        let hat = parse_str("woman with cowboy hat", &lex()).unwrap().0;
        assert!(matches_fully(&hat, &hat));
        assert!(!matches_partially(&hat, &hat));
        let woman = SceneGraph::subject("woman");
        assert!(matches_partially(&hat, &woman));
        assert!(matches_partially(&woman, &hat));

        let a = parse_str("woman in chair", &lex()).unwrap().0;
        let b = parse_str("girl in chair", &lex()).unwrap().0;
        assert!(!matches_fully(&a, &b));
        assert!(!matches_partially(&a, &b));
    }

    #[test]
    fn attribute_order_does_not_matter_for_matching() {
        let a = SceneGraph::subject("dog").with_subject_attr("small").with_subject_attr("black");
        let b = SceneGraph::subject("dog").with_subject_attr("black").with_subject_attr("small");
        assert!(matches_fully(&a, &b));
        assert_eq!(flatten(&a), flatten(&b));
    }

    #[test]
    fn graph_template_classification() {
        let l = lex();
        assert_eq!(SceneGraph::subject("woman").template(&l), None);
        assert_eq!(
            SceneGraph::subject("hat").with_subject_attr("cowboy").template(&l),
            Some(CaptionTemplate::NnObj)
        );
        let malformed = SceneGraph {
            relation: Some("in".into()),
            ..SceneGraph::subject("woman")
        };
        assert!(!malformed.is_well_formed());
        assert_eq!(malformed.template(&l), None);
    }

    fn arb_template_caption() -> impl Strategy<Value = Vec<String>> {
        let l = lex();
        let (n, a, r) = (l.nouns().to_vec(), l.adjectives().to_vec(), l.relations().to_vec());
        let modifier: Vec<String> = n.iter().chain(&a).cloned().collect();
        let pick = |v: Vec<String>| prop::sample::select(v);
        prop_oneof![
            (pick(n.clone()), pick(r.clone()), pick(n.clone())).prop_map(|(s, r, o)| vec![s, r, o]),
            (pick(a.clone()), pick(n.clone())).prop_map(|(a, s)| vec![a, s]),
            (pick(n.clone()), pick(n.clone())).prop_map(|(m, s)| vec![m, s]),
            (pick(modifier.clone()), pick(n.clone()), pick(r.clone()), pick(n.clone()))
                .prop_map(|(m, s, r, o)| vec![m, s, r, o]),
            (pick(n.clone()), pick(r.clone()), pick(modifier.clone()), pick(n.clone()))
                .prop_map(|(s, r, m, o)| vec![s, r, m, o]),
            (pick(modifier.clone()), pick(n.clone()), pick(r), pick(modifier), pick(n))
                .prop_map(|(m1, s, r, m2, o)| vec![m1, s, r, m2, o]),
        ]
    }

    proptest! {
        #[test]
        fn flatten_parse_round_trips(caption in arb_template_caption()) {
            let l = lex();
            let (g, t) = parse(&caption, &l).unwrap();
            prop_assert_eq!(flatten(&g), caption);
            let (g2, t2) = parse(&flatten(&g), &l).unwrap();
            prop_assert_eq!(g2, g);
            prop_assert_eq!(t2, t);
        }

        #[test]
        fn full_match_is_equivalence_and_partial_is_symmetric(
            a in arb_template_caption(), b in arb_template_caption(), c in arb_template_caption()
        ) {
            let l = lex();
            let (a, b, c) = (parse(&a, &l).unwrap().0, parse(&b, &l).unwrap().0, parse(&c, &l).unwrap().0);
            prop_assert!(matches_fully(&a, &a));
            prop_assert_eq!(matches_fully(&a, &b), matches_fully(&b, &a));
            if matches_fully(&a, &b) && matches_fully(&b, &c) {
                prop_assert!(matches_fully(&a, &c));
            }
            prop_assert_eq!(matches_partially(&a, &b), matches_partially(&b, &a));
            prop_assert!(!matches_partially(&a, &a));
        }
    }
}
