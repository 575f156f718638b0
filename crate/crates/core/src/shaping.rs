//! Contextual glyph labels for Urdu words.
//!
//! Every Arabic-script letter is drawn in one of four positional shapes
//! depending on whether it connects to its neighbours. The recognizer emits
//! one output class per (letter, position) pair, so the label sequence of a
//! word is the sequence of its contextual forms in logical order.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapingError {
    #[error("word is empty after stripping combining marks")]
    EmptyWord,
    #[error("word contains whitespace at char offset {0}")]
    ContainsWhitespace(usize),
    #[error("class id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary file line {line}: {reason}")]
    MalformedVocabulary { line: usize, reason: String },
}

/// Joining behaviour of a codepoint under the Arabic joining algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JoiningClass {
    DualJoining,
    RightJoining,
    NonJoining,
    Transparent,
}

include!("joining_table.rs");

/// Joining class of `c`. Codepoints outside U+0600..U+06FF are non-joining.
pub fn joining_class(c: char) -> JoiningClass {
    let cp = c as u32;
    if !(0x0600..=0x06FF).contains(&cp) {
        return JoiningClass::NonJoining;
    }
    let idx = ARABIC_BLOCK_JOINING.partition_point(|&(_, end, _)| end < cp);
    let (start, end, class) = ARABIC_BLOCK_JOINING[idx];
    debug_assert!(start <= cp && cp <= end);
    class
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Isolated,
    Initial,
    Medial,
    Final,
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::Isolated,
        Position::Initial,
        Position::Medial,
        Position::Final,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Position::Isolated => "isolated",
            Position::Initial => "initial",
            Position::Medial => "medial",
            Position::Final => "final",
        }
    }

    pub fn from_name(name: &str) -> Option<Position> {
        Position::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Joins to the preceding letter (visually: connects on its right side).
    pub fn joins_previous(self) -> bool {
        matches!(self, Position::Medial | Position::Final)
    }

    /// Joins to the following letter (visually: connects on its left side).
    pub fn joins_next(self) -> bool {
        matches!(self, Position::Initial | Position::Medial)
    }
}

/// A letter in one of its contextual shapes; the unit of classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GlyphForm {
    pub base: char,
    pub position: Position,
}

impl GlyphForm {
    pub fn new(base: char, position: Position) -> Self {
        Self { base, position }
    }

    /// Whether `position` is reachable for this base under its joining class.
    pub fn is_legal(&self) -> bool {
        match joining_class(self.base) {
            JoiningClass::DualJoining => true,
            JoiningClass::RightJoining => {
                matches!(self.position, Position::Isolated | Position::Final)
            }
            JoiningClass::NonJoining => self.position == Position::Isolated,
            JoiningClass::Transparent => false,
        }
    }
}

impl fmt::Display for GlyphForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U+{:04X}.{}", self.base as u32, self.position.name())
    }
}

fn joins_forward(class: JoiningClass) -> bool {
    class == JoiningClass::DualJoining
}

fn joins_backward(class: JoiningClass) -> bool {
    matches!(class, JoiningClass::DualJoining | JoiningClass::RightJoining)
}

/// Resolve the contextual form of every non-transparent character of `word`.
///
/// Combining marks are skipped when looking for neighbours and do not appear
/// in the output.
pub fn shape_word(word: &str) -> Result<Vec<GlyphForm>, ShapingError> {
    let mut bases = Vec::with_capacity(word.len());
    for (i, c) in word.chars().enumerate() {
        if c.is_whitespace() {
            return Err(ShapingError::ContainsWhitespace(i));
        }
        let class = joining_class(c);
        if class != JoiningClass::Transparent {
            bases.push((c, class));
        }
    }
    if bases.is_empty() {
        return Err(ShapingError::EmptyWord);
    }

    let forms = (0..bases.len())
        .map(|i| {
            let (c, class) = bases[i];
            let prev = i.checked_sub(1).map(|j| bases[j].1);
            let next = bases.get(i + 1).map(|b| b.1);
            let join_prev = joins_backward(class) && prev.is_some_and(joins_forward);
            let join_next = joins_forward(class) && next.is_some_and(joins_backward);
            let position = match (join_prev, join_next) {
                (true, true) => Position::Medial,
                (true, false) => Position::Final,
                (false, true) => Position::Initial,
                (false, false) => Position::Isolated,
            };
            GlyphForm::new(c, position)
        })
        .collect();
    Ok(forms)
}

/// Ids of the special tokens, always the first four vocabulary entries.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["PAD", "BOS", "EOS", "UNK"];

/// Dense mapping between glyph forms and output class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphVocabulary {
    entries: Vec<GlyphForm>,
    index: HashMap<GlyphForm, usize>,
}

impl GlyphVocabulary {
    /// Build from forms observed in `corpus`, sorted by (base, position).
    pub fn build<I, S>(corpus: I) -> Result<Self, ShapingError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut forms = Vec::new();
        let mut any = false;
        for word in corpus {
            any = true;
            forms.extend(shape_word(word.as_ref())?);
        }
        if !any {
            return Err(ShapingError::EmptyCorpus);
        }
        Ok(Self::from_forms(forms))
    }

    /// Build from an arbitrary collection of forms; duplicates are merged.
    pub fn from_forms(forms: impl IntoIterator<Item = GlyphForm>) -> Self {
        let mut entries: Vec<GlyphForm> = forms.into_iter().collect();
        entries.sort_unstable();
        entries.dedup();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, f)| (*f, i + NUM_SPECIALS))
            .collect();
        Self { entries, index }
    }

    /// Total number of classes, specials included.
    pub fn len(&self) -> usize {
        self.entries.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn forms(&self) -> &[GlyphForm] {
        &self.entries
    }

    pub fn id_of(&self, form: &GlyphForm) -> Option<usize> {
        self.index.get(form).copied()
    }

    /// The form behind `id`, or `None` for special tokens.
    pub fn form_of(&self, id: usize) -> Result<Option<GlyphForm>, ShapingError> {
        if id >= self.len() {
            return Err(ShapingError::InvalidId {
                id,
                size: self.len(),
            });
        }
        Ok(id.checked_sub(NUM_SPECIALS).map(|i| self.entries[i]))
    }

    /// Class ids for `word`. No BOS/EOS is added.
    pub fn encode(&self, word: &str) -> Result<Vec<usize>, ShapingError> {
        Ok(shape_word(word)?
            .iter()
            .map(|f| self.id_of(f).unwrap_or(UNK))
            .collect())
    }

    /// Text for `ids`, dropping specials. Positional information is discarded.
    pub fn decode(&self, ids: &[usize]) -> Result<String, ShapingError> {
        let mut out = String::with_capacity(ids.len() * 2);
        for &id in ids {
            if let Some(form) = self.form_of(id)? {
                out.push(form.base);
            }
        }
        Ok(out)
    }

    /// Write the `<hex>\t<position>\t<id>` listing. Specials use `special` in
    /// the first column and their name in the second.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            writeln!(w, "special\t{name}\t{id}")?;
        }
        for (i, form) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{:04X}\t{}\t{}",
                form.base as u32,
                form.position.name(),
                i + NUM_SPECIALS
            )?;
        }
        Ok(())
    }

    pub fn to_listing(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("listing is UTF-8")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, ShapingError> {
        let malformed = |line: usize, reason: &str| ShapingError::MalformedVocabulary {
            line,
            reason: reason.to_string(),
        };
        let mut forms = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| malformed(lineno, &e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(malformed(lineno, "expected 3 tab-separated columns"));
            }
            let id: usize = cols[2]
                .parse()
                .map_err(|_| malformed(lineno, "bad id"))?;
            if cols[0] == "special" {
                if id >= NUM_SPECIALS || SPECIAL_NAMES[id] != cols[1] {
                    return Err(malformed(lineno, "unexpected special token"));
                }
                continue;
            }
            let cp = u32::from_str_radix(cols[0], 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| malformed(lineno, "bad codepoint"))?;
            let position =
                Position::from_name(cols[1]).ok_or_else(|| malformed(lineno, "bad position"))?;
            if id != forms.len() + NUM_SPECIALS {
                return Err(malformed(lineno, "ids must be dense and ascending"));
            }
            forms.push(GlyphForm::new(cp, position));
        }
        let vocab = Self::from_forms(forms.iter().copied());
        if vocab.entries != forms {
            return Err(malformed(0, "entries are not sorted and unique"));
        }
        Ok(vocab)
    }
}
