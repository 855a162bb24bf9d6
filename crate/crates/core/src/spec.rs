//! Bias specifications and their augmentation through nearest neighbours.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub word: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetId {
    T1,
    T2,
    A,
    A1,
    A2,
}

impl SetId {
    pub fn label(self) -> &'static str {
        match self {
            SetId::T1 => "t1",
            SetId::T2 => "t2",
            SetId::A => "a",
            SetId::A1 => "a1",
            SetId::A2 => "a2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Attributes {
    None,
    Single(Vec<Term>),
    Paired(Vec<Term>, Vec<Term>),
}

/// Target sets plus optional attribute sets. Terms are unique within a set
/// and the sets are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasSpec {
    pub name: String,
    pub t1: Vec<Term>,
    pub t2: Vec<Term>,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    name: String,
    t1: Vec<String>,
    t2: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a1: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a2: Option<Vec<String>>,
}

fn terms(words: &[String], provenance: Provenance) -> Vec<Term> {
    words
        .iter()
        .map(|w| Term {
            word: w.clone(),
            provenance,
        })
        .collect()
}

fn words(terms: &[Term]) -> Vec<String> {
    terms.iter().map(|t| t.word.clone()).collect()
}

impl BiasSpec {
    /// Builds and validates a spec whose terms all carry `provenance`.
    pub fn from_words(
        name: impl Into<String>,
        t1: &[String],
        t2: &[String],
        attributes: Option<(&[String], Option<&[String]>)>,
        provenance: Provenance,
    ) -> Result<Self> {
        let attributes = match attributes {
            None => Attributes::None,
            Some((a, None)) => Attributes::Single(terms(a, provenance)),
            Some((a1, Some(a2))) => {
                Attributes::Paired(terms(a1, provenance), terms(a2, provenance))
            }
        };
        let spec = BiasSpec {
            name: name.into(),
            t1: terms(t1, provenance),
            t2: terms(t2, provenance),
            attributes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self.attributes, Attributes::None)
    }

    /// Every set with its identifier, targets first.
    pub fn sets(&self) -> Vec<(SetId, &[Term])> {
        let mut out: Vec<(SetId, &[Term])> = vec![(SetId::T1, &self.t1), (SetId::T2, &self.t2)];
        match &self.attributes {
            Attributes::None => {}
            Attributes::Single(a) => out.push((SetId::A, a)),
            Attributes::Paired(a1, a2) => {
                out.push((SetId::A1, a1));
                out.push((SetId::A2, a2));
            }
        }
        out
    }

    pub fn t1_words(&self) -> Vec<String> {
        words(&self.t1)
    }

    pub fn t2_words(&self) -> Vec<String> {
        words(&self.t2)
    }

    /// `(A1, A2)` of a paired spec.
    pub fn paired_words(&self) -> Option<(Vec<String>, Vec<String>)> {
        match &self.attributes {
            Attributes::Paired(a1, a2) => Some((words(a1), words(a2))),
            _ => None,
        }
    }

    /// The single attribute set, merging a paired spec on the fly.
    pub fn single_words(&self) -> Option<Vec<String>> {
        match &self.attributes {
            Attributes::None => None,
            Attributes::Single(a) => Some(words(a)),
            Attributes::Paired(..) => self.merge_attributes().ok()?.single_words(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t1.is_empty() || self.t2.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "{}: target sets must be non-empty",
                self.name
            )));
        }
        let mut owner: HashMap<&str, SetId> = HashMap::new();
        for (id, set) in self.sets() {
            for t in set {
                if let Some(prev) = owner.insert(&t.word, id) {
                    return Err(Error::InvalidSpec(if prev == id {
                        format!("{}: {:?} repeated in {}", self.name, t.word, id.label())
                    } else {
                        format!(
                            "{}: {:?} appears in both {} and {}",
                            self.name,
                            t.word,
                            prev.label(),
                            id.label()
                        )
                    }));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SpecJson = serde_json::from_str(text)?;
        Self::from_raw(raw, Provenance::Initial)
    }

    fn from_raw(raw: SpecJson, provenance: Provenance) -> Result<Self> {
        let attrs = match (raw.a.as_deref(), raw.a1.as_deref(), raw.a2.as_deref()) {
            (None, None, None) => None,
            (Some(a), None, None) => Some((a, None)),
            (None, Some(a1), Some(a2)) => Some((a1, Some(a2))),
            (Some(_), _, _) => {
                return Err(Error::InvalidSpec(format!(
                    "{}: \"a\" cannot be combined with \"a1\"/\"a2\"",
                    raw.name
                )))
            }
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "{}: \"a1\" and \"a2\" must be given together",
                    raw.name
                )))
            }
        };
        BiasSpec::from_words(raw.name.clone(), &raw.t1, &raw.t2, attrs, provenance)
    }

    fn to_raw(&self) -> SpecJson {
        let (a, a1, a2) = match &self.attributes {
            Attributes::None => (None, None, None),
            Attributes::Single(a) => (Some(words(a)), None, None),
            Attributes::Paired(a1, a2) => (None, Some(words(a1)), Some(words(a2))),
        };
        SpecJson {
            name: self.name.clone(),
            t1: self.t1_words(),
            t2: self.t2_words(),
            a,
            a1,
            a2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `A = A1 ∪ A2`, A1 order first. Specs that are not paired are returned
    /// unchanged.
    pub fn merge_attributes(&self) -> Result<Self> {
        let Attributes::Paired(a1, a2) = &self.attributes else {
            return Ok(self.clone());
        };
        let mut seen = HashSet::new();
        let merged: Vec<Term> = a1
            .iter()
            .chain(a2)
            .filter(|t| seen.insert(t.word.clone()))
            .cloned()
            .collect();
        Ok(BiasSpec {
            name: self.name.clone(),
            t1: self.t1.clone(),
            t2: self.t2.clone(),
            attributes: Attributes::Single(merged),
        })
    }

    /// Replaces each term by the vocabulary entry it resolves to, trying the
    /// lowercased form when `lowercase_fallback` is set. Unresolved terms are
    /// kept verbatim.
    pub fn resolve_case(&self, space: &EmbeddingSpace, lowercase_fallback: bool) -> Self {
        let fix = |set: &[Term]| -> Vec<Term> {
            let mut seen = HashSet::new();
            set.iter()
                .map(|t| match space.resolve(&t.word, lowercase_fallback) {
                    Some(i) => Term {
                        word: space.word(i).to_string(),
                        provenance: t.provenance,
                    },
                    None => t.clone(),
                })
                .filter(|t| seen.insert(t.word.clone()))
                .collect()
        };
        BiasSpec {
            name: self.name.clone(),
            t1: fix(&self.t1),
            t2: fix(&self.t2),
            attributes: match &self.attributes {
                Attributes::None => Attributes::None,
                Attributes::Single(a) => Attributes::Single(fix(a)),
                Attributes::Paired(a1, a2) => Attributes::Paired(fix(a1), fix(a2)),
            },
        }
    }
}

/// Training spec of augmentation terms and test spec of the initial terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSpec {
    pub name: String,
    pub k: usize,
    pub train: BiasSpec,
    pub test: BiasSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentedJson {
    name: String,
    k: usize,
    train: SpecJson,
    test: SpecJson,
}

impl AugmentedSpec {
    pub fn to_json(&self) -> String {
        let raw = AugmentedJson {
            name: self.name.clone(),
            k: self.k,
            train: self.train.to_raw(),
            test: self.test.to_raw(),
        };
        serde_json::to_string_pretty(&raw).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: AugmentedJson = serde_json::from_str(text)?;
        let out = AugmentedSpec {
            name: raw.name,
            k: raw.k,
            train: BiasSpec::from_raw(raw.train, Provenance::Augmented)?,
            test: BiasSpec::from_raw(raw.test, Provenance::Initial)?,
        };
        out.check_disjoint()?;
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check_disjoint(&self) -> Result<()> {
        for ((id, train), (_, test)) in self.train.sets().into_iter().zip(self.test.sets()) {
            let test: HashSet<&str> = test.iter().map(|t| t.word.as_str()).collect();
            if let Some(t) = train.iter().find(|t| test.contains(t.word.as_str())) {
                return Err(Error::InvalidSpec(format!(
                    "{}: {:?} is both a train and a test term of {}",
                    self.name,
                    t.word,
                    id.label()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct AugmentReport {
    /// Initial terms missing from the similarity space, per set.
    pub missing: BTreeMap<String, Vec<String>>,
    /// Candidates dropped because they belong to another initial set.
    pub dropped_other_set: usize,
    /// Candidates dropped because they are initial terms of their own set.
    pub dropped_own_initial: usize,
    pub dropped_duplicate: usize,
    /// Surface forms retrieved for more than one set, removed from all.
    pub dropped_shared: Vec<String>,
}

/// Augments every set of `spec` with the `k` nearest neighbours of each of its
/// initial terms in `sim_space`.
///
/// Candidate filtering, per set S: drop words that are initial terms of
/// another set, drop initial terms of S itself (the train and test splits of
/// a set stay disjoint), drop repeats keeping first retrieval order. Words
/// surviving in two or more augmented sets are then removed from all of them.
pub fn augment(
    spec: &BiasSpec,
    sim_space: &EmbeddingSpace,
    k: usize,
) -> Result<(AugmentedSpec, AugmentReport)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    spec.validate()?;
    let mut report = AugmentReport::default();
    let sets = spec.sets();

    let initial_owner: HashMap<&str, SetId> = sets
        .iter()
        .flat_map(|(id, set)| set.iter().map(move |t| (t.word.as_str(), *id)))
        .collect();

    let mut augmented: Vec<(SetId, Vec<String>)> = Vec::with_capacity(sets.len());
    for (id, set) in &sets {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        for term in set.iter() {
            let Some(qi) = sim_space.index_of(&term.word) else {
                missing.push(term.word.clone());
                continue;
            };
            for (ni, _) in sim_space.neighbors_of_index(qi, k) {
                let cand = sim_space.word(ni);
                match initial_owner.get(cand) {
                    Some(owner) if owner != id => {
                        report.dropped_other_set += 1;
                        continue;
                    }
                    Some(_) => {
                        report.dropped_own_initial += 1;
                        continue;
                    }
                    None => {}
                }
                if !seen.insert(cand) {
                    report.dropped_duplicate += 1;
                    continue;
                }
                out.push(cand.to_string());
            }
        }
        if !missing.is_empty() {
            warn!("{}: {} initial terms missing from the similarity space", id.label(), missing.len());
            report.missing.insert(id.label().to_string(), missing);
        }
        augmented.push((*id, out));
    }

    let mut count: HashMap<String, usize> = HashMap::new();
    for (_, words) in &augmented {
        for w in words {
            *count.entry(w.clone()).or_default() += 1;
        }
    }
    let mut shared: Vec<String> = count
        .into_iter()
        .filter_map(|(w, c)| (c > 1).then_some(w))
        .collect();
    shared.sort();
    if !shared.is_empty() {
        let drop: HashSet<&str> = shared.iter().map(String::as_str).collect();
        for (_, words) in augmented.iter_mut() {
            words.retain(|w| !drop.contains(w.as_str()));
        }
    }
    report.dropped_shared = shared;

    for (id, words) in &augmented {
        if words.is_empty() {
            let initial_len = sets.iter().find(|(s, _)| s == id).map_or(0, |(_, s)| s.len());
            if initial_len > 0 {
                return Err(Error::EmptyAugmentation(id.label().to_string()));
            }
        }
    }

    let get = |id: SetId| {
        augmented
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, w)| w.clone())
            .unwrap_or_default()
    };
    let (t1, t2) = (get(SetId::T1), get(SetId::T2));
    let attrs_owned = match &spec.attributes {
        Attributes::None => None,
        Attributes::Single(_) => Some((get(SetId::A), None)),
        Attributes::Paired(..) => Some((get(SetId::A1), Some(get(SetId::A2)))),
    };
    let attrs = attrs_owned
        .as_ref()
        .map(|(a, b)| (a.as_slice(), b.as_deref()));
    let train = BiasSpec::from_words(
        format!("{}-train", spec.name),
        &t1,
        &t2,
        attrs,
        Provenance::Augmented,
    )?;
    let out = AugmentedSpec {
        name: spec.name.clone(),
        k,
        train,
        test: spec.clone(),
    };
    out.check_disjoint()?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    const T8: &str = r#"{
        "name": "weat8",
        "t1": ["science","technology","physics","chemistry","Einstein","NASA","experiment","astronomy"],
        "t2": ["poetry","art","Shakespeare","dance","literature","novel","symphony","drama"],
        "a1": ["brother","father","uncle","grandfather","son","he","his","him"],
        "a2": ["sister","mother","aunt","grandmother","daughter","she","hers","her"]
    }"#;

    #[test]
    fn parse_paired_and_round_trip() {
        let spec = BiasSpec::from_json(T8).unwrap();
        let (a1, a2) = spec.paired_words().unwrap();
        assert_eq!((spec.t1.len(), spec.t2.len(), a1.len(), a2.len()), (8, 8, 8, 8));
        let again = BiasSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn implicit_form() {
        let spec = BiasSpec::from_json(r#"{"name":"x","t1":["a"],"t2":["b"]}"#).unwrap();
        assert!(spec.is_implicit());
    }

    #[test]
    fn validation_errors() {
        for bad in [
            r#"{"name":"x","t1":["science","science"],"t2":["b"]}"#,
            r#"{"name":"x","t1":["a"],"t2":["a"]}"#,
            r#"{"name":"x","t1":[],"t2":["b"]}"#,
            r#"{"name":"x","t1":["a"],"t2":["b"],"a":["c"],"a1":["d"],"a2":["e"]}"#,
            r#"{"name":"x","t1":["a"],"t2":["b"],"a1":["d"]}"#,
        ] {
            assert!(matches!(BiasSpec::from_json(bad), Err(Error::InvalidSpec(_))), "{bad}");
        }
    }

    #[test]
    fn merge_attributes_rules() {
        let spec = BiasSpec::from_json(T8).unwrap();
        assert_eq!(spec.merge_attributes().unwrap().single_words().unwrap().len(), 16);

        // overlap cannot pass validation, so build the paired value directly
        let mut overlap = spec.clone();
        overlap.attributes = Attributes::Paired(
            terms(&s(&["x", "y"]), Provenance::Initial),
            terms(&s(&["y", "z"]), Provenance::Initial),
        );
        assert_eq!(overlap.merge_attributes().unwrap().single_words().unwrap(), s(&["x", "y", "z"]));

        let empty_a2 = BiasSpec::from_words("e", &s(&["t"]), &s(&["u"]), Some((&s(&["p", "q"]), Some(&[]))), Provenance::Initial).unwrap();
        assert_eq!(empty_a2.merge_attributes().unwrap().single_words().unwrap(), s(&["p", "q"]));
    }

    fn toy_space(pairs: &[(&str, [f64; 3])]) -> EmbeddingSpace {
        EmbeddingSpace::from_pairs(pairs.iter().map(|(w, v)| (*w, v.to_vec())).collect()).unwrap()
    }

    #[test]
    fn augment_filters_and_splits() {
        let space = toy_space(&[
            ("physics", [1.0, 0.0, 0.0]),
            ("chemistry", [0.95, 0.1, 0.0]),
            ("biophysics", [0.99, 0.05, 0.0]),
            ("poetry", [0.0, 1.0, 0.0]),
            ("poem", [0.05, 0.99, 0.0]),
            ("verse", [0.1, 0.95, 0.0]),
        ]);
        let spec = BiasSpec::from_words("toy", &s(&["physics", "chemistry"]), &s(&["poetry"]), None, Provenance::Initial).unwrap();
        let (aug, report) = augment(&spec, &space, 2).unwrap();
        assert_eq!(aug.train.t1_words(), s(&["biophysics"]));
        assert_eq!(aug.train.t2_words(), s(&["poem", "verse"]));
        assert!(aug.train.t1.iter().all(|t| t.provenance == Provenance::Augmented));
        assert!(report.dropped_own_initial >= 2);
        assert_eq!(aug.test, spec);
        let again = AugmentedSpec::from_json(&aug.to_json()).unwrap();
        assert_eq!(again, aug);
    }

    #[test]
    fn augment_adversarial_space_is_an_error() {
        // each term's neighbours are the initial terms of the opposing set
        let space = toy_space(&[
            ("a", [1.0, 0.0, 0.0]),
            ("b", [0.0, 1.0, 0.0]),
            ("c", [0.0, 0.9, 0.1]),
            ("x", [0.99, 0.0, 0.01]),
            ("y", [0.98, 0.0, 0.02]),
            ("z", [0.0, 0.0, 1.0]),
        ]);
        let spec = BiasSpec::from_words("adv", &s(&["a"]), &s(&["x", "y"]), None, Provenance::Initial).unwrap();
        let r = augment(&spec, &space, 2);
        assert!(matches!(r, Err(Error::EmptyAugmentation(ref set)) if set == "t1"), "{r:?}");
    }

    #[test]
    fn shared_candidates_are_removed_everywhere() {
        let space = toy_space(&[
            ("a", [1.0, 0.0, 0.0]),
            ("b", [0.0, 1.0, 0.0]),
            ("mid", [0.7, 0.7, 0.0]),
            ("near_a", [0.9, 0.1, 0.3]),
            ("near_b", [0.1, 0.9, 0.3]),
        ]);
        let spec = BiasSpec::from_words("sh", &s(&["a"]), &s(&["b"]), None, Provenance::Initial).unwrap();
        let (aug, report) = augment(&spec, &space, 2).unwrap();
        assert_eq!(report.dropped_shared, s(&["mid"]));
        assert_eq!(aug.train.t1_words(), s(&["near_a"]));
        assert_eq!(aug.train.t2_words(), s(&["near_b"]));
    }

    #[test]
    fn missing_initial_terms_are_reported() {
        let space = toy_space(&[("a", [1.0, 0.0, 0.0]), ("a2", [0.9, 0.1, 0.0]), ("b", [0.0, 1.0, 0.0]), ("b2", [0.1, 0.9, 0.0])]);
        let spec = BiasSpec::from_words("m", &s(&["a", "ghost"]), &s(&["b"]), None, Provenance::Initial).unwrap();
        let (_, report) = augment(&spec, &space, 1).unwrap();
        assert_eq!(report.missing.get("t1"), Some(&s(&["ghost"])));
    }
}
