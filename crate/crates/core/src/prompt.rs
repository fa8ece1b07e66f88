//! Noun-phrase annotations: the template-grammar parser and the JSON
//! annotation format.
//!
//! Grammar (word level, case-insensitive):
//!
//! ```text
//! prompt := [ "a" "photo" "of" ] clause { "and" clause }
//! clause := ("a" | "an") adjective* noun
//! ```
//!
//! Each clause becomes one noun phrase spanning its adjectives and noun; the
//! article and the conjunction stay outside every span.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NounPhrase {
    pub span: Range<usize>,
    pub object_index: usize,
    pub attribute_indices: Vec<usize>,
}

impl NounPhrase {
    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }

    pub fn tokens(&self) -> Range<usize> {
        self.span.clone()
    }

    /// Position of the object token inside the span.
    pub fn object_offset(&self) -> usize {
        self.object_index - self.span.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptAnnotation {
    pub token_count: usize,
    pub nps: Vec<NounPhrase>,
    pub eot_index: Option<usize>,
    pub pad_indices: Vec<usize>,
}

impl PromptAnnotation {
    /// Validates every structural invariant.
    pub fn new(
        token_count: usize,
        nps: Vec<NounPhrase>,
        eot_index: Option<usize>,
        pad_indices: Vec<usize>,
    ) -> Result<Self> {
        let ann = Self { token_count, nps, eot_index, pad_indices };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.token_count;
        for (k, np) in self.nps.iter().enumerate() {
            if np.span.start >= np.span.end {
                return Err(Error::Index(format!("noun phrase {k} has an empty span")));
            }
            if np.span.end > l {
                return Err(Error::Index(format!("noun phrase {k} span ends at {} beyond {l} tokens", np.span.end)));
            }
            if !np.span.contains(&np.object_index) {
                return Err(Error::Index(format!("noun phrase {k} object index {} outside its span", np.object_index)));
            }
            let mut seen = BTreeSet::new();
            for &a in &np.attribute_indices {
                if !np.span.contains(&a) || a == np.object_index || !seen.insert(a) {
                    return Err(Error::Index(format!("noun phrase {k} has invalid attribute index {a}")));
                }
            }
        }
        for i in 0..self.nps.len() {
            for j in (i + 1)..self.nps.len() {
                let (a, b) = (&self.nps[i].span, &self.nps[j].span);
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Overlap { first: i, second: j });
                }
            }
        }
        let aux = self.eot_index.iter().chain(&self.pad_indices);
        let mut seen = BTreeSet::new();
        for &idx in aux {
            if idx >= l {
                return Err(Error::Index(format!("auxiliary index {idx} beyond {l} tokens")));
            }
            if self.np_of(idx).is_some() {
                return Err(Error::Index(format!("auxiliary index {idx} lies inside a noun phrase")));
            }
            if !seen.insert(idx) {
                return Err(Error::Index(format!("auxiliary index {idx} repeated")));
            }
        }
        Ok(())
    }

    /// Noun phrase containing `token`, if any.
    pub fn np_of(&self, token: usize) -> Option<usize> {
        self.nps.iter().position(|np| np.span.contains(&token))
    }

    /// Object token indices `K`, in prompt order.
    pub fn object_indices(&self) -> Vec<usize> {
        self.nps.iter().map(|np| np.object_index).collect()
    }

    /// EOT followed by PAD indices.
    pub fn aux_indices(&self) -> Vec<usize> {
        self.eot_index.iter().chain(&self.pad_indices).copied().collect()
    }
}

/// All unordered object pairs `(m, n)` with `m` from an earlier noun phrase.
pub fn inter_np_pairs(annotation: &PromptAnnotation) -> Vec<(usize, usize)> {
    let objects = annotation.object_indices();
    let mut pairs = Vec::with_capacity(objects.len() * objects.len().saturating_sub(1) / 2);
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            pairs.push((objects[i], objects[j]));
        }
    }
    pairs
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub adjectives: BTreeSet<String>,
    pub nouns: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, J, S, T>(adjectives: I, nouns: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            adjectives: adjectives.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
            nouns: nouns.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
        }
    }

    /// Colours, textures, shapes and common objects from attribute-binding prompt sets.
    pub fn builtin() -> Self {
        Self::new(
            [
                "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray",
                "grey", "gold", "silver", "furry", "fluffy", "wooden", "metallic", "plastic", "glass", "leather",
                "fabric", "rubber", "smooth", "rough", "round", "square", "oval", "triangular", "rectangular",
                "cylindrical", "big", "small", "large", "tiny", "tall", "short", "old", "new", "shiny", "soft",
            ],
            [
                "apple", "banana", "bowl", "cat", "dog", "car", "chair", "table", "book", "cup", "bird", "horse",
                "bag", "hat", "shirt", "vase", "clock", "bench", "bottle", "ball", "box", "lamp", "bear", "pillow",
                "sofa", "bed", "door", "window", "flower", "tree", "cake", "rabbit", "boat", "bike", "phone",
                "shoe", "backpack", "mug", "plate", "pen", "key", "guitar",
            ],
        )
    }

    fn is_adjective(&self, w: &str) -> bool {
        self.adjectives.contains(w)
    }

    fn is_noun(&self, w: &str) -> bool {
        self.nouns.contains(w)
    }
}

/// Splits on whitespace, lowercases and strips a trailing period.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .trim()
        .trim_end_matches('.')
        .split_whitespace()
        .map(str::to_lowercase)
        .collect()
}

pub fn parse_template_prompt<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Result<PromptAnnotation> {
    let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
    if words.is_empty() {
        return Err(Error::Parse { position: 0, message: "empty prompt".into() });
    }
    let mut pos = 0;
    if words.len() >= 3 && words[0] == "a" && words[1] == "photo" && words[2] == "of" {
        pos = 3;
    }
    let mut nps = Vec::new();
    loop {
        match words.get(pos).map(String::as_str) {
            Some("a") | Some("an") => pos += 1,
            Some(other) => {
                return Err(Error::Parse { position: pos, message: format!("expected article, found {other:?}") })
            }
            None => return Err(Error::Parse { position: pos, message: "expected article, found end".into() }),
        }
        let start = pos;
        let mut attributes = Vec::new();
        loop {
            let Some(w) = words.get(pos) else {
                return Err(Error::Parse { position: pos, message: "expected noun, found end".into() });
            };
            if lexicon.is_adjective(w) {
                attributes.push(pos);
                pos += 1;
            } else if lexicon.is_noun(w) {
                break;
            } else {
                return Err(Error::Parse { position: pos, message: format!("word {w:?} is not in the lexicon") });
            }
        }
        nps.push(NounPhrase { span: start..pos + 1, object_index: pos, attribute_indices: attributes });
        pos += 1;
        match words.get(pos).map(String::as_str) {
            None => break,
            Some("and") => pos += 1,
            Some(other) => {
                return Err(Error::Parse { position: pos, message: format!("expected \"and\" or end, found {other:?}") })
            }
        }
    }
    PromptAnnotation::new(words.len(), nps, None, Vec::new())
}

/// On-disk annotation document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub token_count: usize,
    pub nps: Vec<NounPhraseDoc>,
    pub eot_index: Option<usize>,
    pub pad_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NounPhraseDoc {
    /// `[start, end_exclusive]`
    pub span: [usize; 2],
    pub object_index: usize,
    pub attribute_indices: Vec<usize>,
}

impl From<&PromptAnnotation> for AnnotationDoc {
    fn from(a: &PromptAnnotation) -> Self {
        Self {
            token_count: a.token_count,
            nps: a
                .nps
                .iter()
                .map(|np| NounPhraseDoc {
                    span: [np.span.start, np.span.end],
                    object_index: np.object_index,
                    attribute_indices: np.attribute_indices.clone(),
                })
                .collect(),
            eot_index: a.eot_index,
            pad_indices: a.pad_indices.clone(),
        }
    }
}

impl TryFrom<AnnotationDoc> for PromptAnnotation {
    type Error = Error;

    fn try_from(doc: AnnotationDoc) -> Result<Self> {
        let nps = doc
            .nps
            .into_iter()
            .map(|np| NounPhrase {
                span: np.span[0]..np.span[1],
                object_index: np.object_index,
                attribute_indices: np.attribute_indices,
            })
            .collect();
        PromptAnnotation::new(doc.token_count, nps, doc.eot_index, doc.pad_indices)
    }
}

pub fn load_annotation(document: &str) -> Result<PromptAnnotation> {
    let doc: AnnotationDoc = serde_json::from_str(document).map_err(|e| Error::Schema(e.to_string()))?;
    doc.try_into()
}

pub fn save_annotation(annotation: &PromptAnnotation) -> String {
    let doc = AnnotationDoc::from(annotation);
    serde_json::to_string_pretty(&doc).expect("annotation serializes")
}
