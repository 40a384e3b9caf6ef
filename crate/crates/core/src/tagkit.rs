//! Six-attribute sticker tags: parsing, serialization, prompt construction,
//! single-attribute edits and the intra-record similarity diagnostic.
//!
//! A tag line lists Appearance, Emotion, Action, Camera Composition, Style
//! and Background separated by commas, optionally preceded by a domain field
//! (`animation` or `real`).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::synth;

pub type TokenId = usize;

pub const PLACEHOLDER: &str = "S*";
pub const SEPARATOR: &str = "<sep>";
pub const SENTINELS: [&str; 2] = ["none", "not applicable"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Appearance,
    Emotion,
    Action,
    CameraComposition,
    Style,
    Background,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Appearance,
        Attribute::Emotion,
        Attribute::Action,
        Attribute::CameraComposition,
        Attribute::Style,
        Attribute::Background,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Appearance => "appearance",
            Attribute::Emotion => "emotion",
            Attribute::Action => "action",
            Attribute::CameraComposition => "camera_composition",
            Attribute::Style => "style",
            Attribute::Background => "background",
        }
    }

    pub fn position(self) -> usize {
        Attribute::ALL.iter().position(|a| *a == self).unwrap()
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = SealError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| SealError::Tag(format!("unknown attribute: {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Animation,
    Real,
}

impl FromStr for Domain {
    type Err = SealError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "animation" => Ok(Domain::Animation),
            "real" => Ok(Domain::Real),
            other => Err(SealError::Tag(format!("invalid domain token: {other}"))),
        }
    }
}

/// One six-field annotation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct TagRecord {
    appearance: String,
    emotion: String,
    action: String,
    camera_composition: String,
    style: String,
    background: String,
}

#[derive(Deserialize)]
struct RawRecord {
    appearance: String,
    emotion: String,
    action: String,
    camera_composition: String,
    style: String,
    background: String,
}

impl TryFrom<RawRecord> for TagRecord {
    type Error = SealError;
    fn try_from(r: RawRecord) -> Result<Self> {
        TagRecord::from_fields([
            r.appearance,
            r.emotion,
            r.action,
            r.camera_composition,
            r.style,
            r.background,
        ])
    }
}

fn check_field(attr: Attribute, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(SealError::Tag(format!("empty field: {attr}")));
    }
    if value.contains([',', '\n', '\r']) {
        return Err(SealError::Tag(format!(
            "field {attr} contains a comma or newline"
        )));
    }
    if value.contains(';') {
        return Err(SealError::Tag(format!(
            "field {attr} holds multiple tags; one tag per field"
        )));
    }
    if value != value.trim() {
        return Err(SealError::Tag(format!(
            "field {attr} has surrounding whitespace"
        )));
    }
    Ok(())
}

impl TagRecord {
    pub fn from_fields(fields: [String; 6]) -> Result<Self> {
        for (attr, v) in Attribute::ALL.iter().zip(&fields) {
            check_field(*attr, v)?;
        }
        let [appearance, emotion, action, camera_composition, style, background] = fields;
        Ok(Self {
            appearance,
            emotion,
            action,
            camera_composition,
            style,
            background,
        })
    }

    pub fn new(
        appearance: &str,
        emotion: &str,
        action: &str,
        camera_composition: &str,
        style: &str,
        background: &str,
    ) -> Result<Self> {
        Self::from_fields([
            appearance.to_string(),
            emotion.to_string(),
            action.to_string(),
            camera_composition.to_string(),
            style.to_string(),
            background.to_string(),
        ])
    }

    pub fn get(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::Appearance => &self.appearance,
            Attribute::Emotion => &self.emotion,
            Attribute::Action => &self.action,
            Attribute::CameraComposition => &self.camera_composition,
            Attribute::Style => &self.style,
            Attribute::Background => &self.background,
        }
    }

    pub fn fields(&self) -> [&str; 6] {
        Attribute::ALL.map(|a| self.get(a))
    }

    pub fn appearance(&self) -> &str {
        &self.appearance
    }

    pub fn background(&self) -> &str {
        &self.background
    }
}

impl fmt::Display for TagRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_tag(self))
    }
}

/// Parses a comma-separated tag line. With `expect_domain` the line must
/// carry seven fields, the first being the domain.
pub fn parse_tag_line(line: &str, expect_domain: bool) -> Result<(Option<Domain>, TagRecord)> {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.trim().is_empty() {
        return Err(SealError::Tag("empty line".into()));
    }
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    let expected = if expect_domain { 7 } else { 6 };
    if parts.len() != expected {
        return Err(SealError::Tag(format!(
            "expected {expected} fields, got {}",
            parts.len()
        )));
    }
    let (domain, attrs) = if expect_domain {
        (Some(parts[0].parse::<Domain>()?), &parts[1..])
    } else {
        (None, &parts[..])
    };
    let mut fields: [String; 6] = Default::default();
    for ((slot, value), attr) in fields.iter_mut().zip(attrs).zip(Attribute::ALL) {
        if value.is_empty() {
            return Err(SealError::Tag(format!("empty field: {attr}")));
        }
        *slot = value.to_string();
    }
    Ok((domain, TagRecord::from_fields(fields)?))
}

/// Parses a line in either the six-field or the domain-prefixed form.
pub fn parse_tag_line_auto(line: &str) -> Result<(Option<Domain>, TagRecord)> {
    let commas = line.matches(',').count();
    parse_tag_line(line, commas == 6)
}

pub fn serialize_tag(record: &TagRecord) -> String {
    record.fields().join(", ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Checks every non-comment line of a tag manifest; returns all failures
/// with 1-based line numbers.
pub fn validate_manifest(text: &str) -> Vec<LineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|(i, l)| {
            parse_tag_line_auto(l).err().map(|e| LineError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<TagRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            parse_tag_line_auto(l)
                .map(|(_, r)| r)
                .map_err(|e| SealError::Tag(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Closed whole-word vocabulary of the testbed text encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(SealError::Vocabulary(format!("duplicate word {w}")));
            }
        }
        for required in [PLACEHOLDER, SEPARATOR] {
            if !index.contains_key(required) {
                return Err(SealError::Vocabulary(format!("missing {required}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Union of the synthetic corpus vocabularies plus the placeholder and
    /// separator.
    pub fn testbed() -> Self {
        let mut words: Vec<String> = vec![SEPARATOR.to_string(), PLACEHOLDER.to_string()];
        let mut push = |w: &str| {
            for part in w.split_whitespace() {
                if !words.iter().any(|x| x == part) {
                    words.push(part.to_string());
                }
            }
        };
        for w in synth::COLORS.iter().map(|c| c.name) {
            push(w);
        }
        for w in synth::SHAPES {
            push(w.name());
        }
        for list in [
            &synth::EMOTIONS[..],
            &synth::ACTIONS[..],
            &synth::CAMERAS[..],
            &synth::STYLES[..],
            &synth::BACKGROUNDS[..],
            &SENTINELS[..],
        ] {
            for w in list {
                push(w);
            }
        }
        Vocabulary::new(words).expect("testbed vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn placeholder(&self) -> TokenId {
        self.index[PLACEHOLDER]
    }

    pub fn separator(&self) -> TokenId {
        self.index[SEPARATOR]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn tokenize_field(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .filter(|&id| id != self.placeholder() && id != self.separator())
                    .ok_or_else(|| SealError::Vocabulary(format!("out-of-vocabulary word: {w}")))
            })
            .collect()
    }

    /// The unconditional prompt used for classifier-free guidance.
    pub fn empty_prompt(&self) -> Vec<TokenId> {
        vec![self.separator()]
    }
}

/// Tag-to-token prompt: fields in fixed order joined by a separator token.
/// With a concept token the whole Appearance field becomes the placeholder.
pub fn build_prompt(
    record: &TagRecord,
    concept_token: Option<&str>,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>> {
    if let Some(sym) = concept_token {
        if sym != PLACEHOLDER && vocab.contains(sym) {
            return Err(SealError::Vocabulary(format!(
                "concept token {sym} collides with a vocabulary word"
            )));
        }
        if sym
            .split_whitespace()
            .any(|w| vocab.contains(w) && w != PLACEHOLDER)
        {
            return Err(SealError::Vocabulary(format!(
                "concept token {sym} collides with a vocabulary word"
            )));
        }
    }
    let mut tokens = Vec::new();
    for (i, attr) in Attribute::ALL.iter().enumerate() {
        if i > 0 {
            tokens.push(vocab.separator());
        }
        if *attr == Attribute::Appearance && concept_token.is_some() {
            tokens.push(vocab.placeholder());
        } else {
            tokens.extend(vocab.tokenize_field(record.get(*attr))?);
        }
    }
    Ok(tokens)
}

pub fn concept_position(tokens: &[TokenId], vocab: &Vocabulary) -> Option<usize> {
    tokens.iter().position(|&t| t == vocab.placeholder())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edited {
    pub record: TagRecord,
    /// Set when the edit touched the identity-carrying Appearance field.
    pub warning: Option<String>,
}

/// Replaces one attribute, keeping the other five fields unchanged.
pub fn attribute_edit(record: &TagRecord, attribute: Attribute, value: &str) -> Result<Edited> {
    check_field(attribute, value)?;
    let mut fields = record.fields().map(str::to_string);
    fields[attribute.position()] = value.to_string();
    let warning = (attribute == Attribute::Appearance).then(|| {
        let msg = "editing appearance changes the identity anchor of the record".to_string();
        log::warn!("{msg}");
        msg
    });
    Ok(Edited {
        record: TagRecord::from_fields(fields)?,
        warning,
    })
}

/// Maps text to a unit-norm vector.
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Character-trigram hashing into a fixed number of buckets, L2-normalized.
#[derive(Clone, Debug)]
pub struct TrigramEmbedder {
    pub dim: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl TextEmbedder for TrigramEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if self.dim == 0 {
            return Err(SealError::Embedder("zero-dimensional embedder".into()));
        }
        let padded: Vec<char> = format!("  {}  ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dim];
        for w in padded.windows(3) {
            let s: String = w.iter().collect();
            v[(fnv1a(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Mean pairwise cosine similarity over the 15 pairs of field embeddings.
pub fn intra_similarity(record: &TagRecord, embedder: &dyn TextEmbedder) -> Result<f64> {
    let embs = record
        .fields()
        .iter()
        .map(|f| embedder.embed(f))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if embs[i].len() != embs[j].len() {
                return Err(SealError::Embedder("inconsistent embedding widths".into()));
            }
            total += embs[i]
                .iter()
                .zip(&embs[j])
                .map(|(a, b)| a * b)
                .sum::<f64>();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
