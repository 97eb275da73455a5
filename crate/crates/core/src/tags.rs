//! The seven-class tag alphabet used by the domestic audio corpus.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const NUM_TAGS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    /// Broadband noise.
    B,
    /// Child speech.
    C,
    /// Adult female speech.
    F,
    /// Adult male speech.
    M,
    /// Other identifiable sounds.
    O,
    /// Percussive sounds (crash, bang, knock, footsteps).
    P,
    /// Video game / TV.
    V,
}

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::B, Tag::C, Tag::F, Tag::M, Tag::O, Tag::P, Tag::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Tag> {
        Tag::ALL.get(index).copied()
    }

    pub fn letter(self) -> char {
        b"bcfmopv"[self.index()] as char
    }

    pub fn from_letter(letter: char) -> Option<Tag> {
        Tag::ALL
            .iter()
            .copied()
            .find(|t| t.letter() == letter.to_ascii_lowercase())
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Membership flags for the seven tags, packed into the low bits of a byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagSet(u8);

impl TagSet {
    pub const fn empty() -> Self {
        TagSet(0)
    }

    pub fn from_tags(tags: impl IntoIterator<Item = Tag>) -> Self {
        let mut set = TagSet::empty();
        for tag in tags {
            set.insert(tag);
        }
        set
    }

    /// Parses a label string such as `"cmv"`. Letters outside the alphabet are
    /// returned separately so the caller can decide how loudly to complain.
    pub fn parse_labels(labels: &str) -> (TagSet, Vec<char>) {
        let mut set = TagSet::empty();
        let mut ignored = Vec::new();
        for ch in labels.chars().filter(|c| !c.is_whitespace()) {
            match Tag::from_letter(ch) {
                Some(tag) => set.insert(tag),
                None => ignored.push(ch),
            }
        }
        (set, ignored)
    }

    pub fn insert(&mut self, tag: Tag) {
        self.0 |= 1 << tag.index();
    }

    pub fn contains(self, tag: Tag) -> bool {
        self.0 & (1 << tag.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Tag> {
        Tag::ALL.into_iter().filter(move |t| self.contains(*t))
    }

    /// 0/1 target vector in tag order.
    pub fn to_target(self) -> [f64; NUM_TAGS] {
        let mut out = [0.0; NUM_TAGS];
        for tag in self.iter() {
            out[tag.index()] = 1.0;
        }
        out
    }

    pub fn is_subset_of(self, other: TagSet) -> bool {
        self.0 & !other.0 == 0
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for tag in self.iter() {
            write!(f, "{tag}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_ignores_foreign_letters() {
        let (set, ignored) = TagSet::parse_labels("cmvS");
        assert_eq!(set, TagSet::from_tags([Tag::C, Tag::M, Tag::V]));
        assert_eq!(ignored, vec!['S']);
        assert_eq!(set.to_string(), "cmv");
    }

    #[test]
    fn target_vector_matches_membership() {
        let set = TagSet::from_tags([Tag::B, Tag::V]);
        assert_eq!(set.to_target(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(set.len(), 2);
        assert!(TagSet::from_tags([Tag::B]).is_subset_of(set));
        assert!(!TagSet::from_tags([Tag::C]).is_subset_of(set));
    }
}
