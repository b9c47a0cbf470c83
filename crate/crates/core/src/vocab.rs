//! Unified token id space.
//!
//! Ids are laid out as three contiguous partitions: 256 byte-level text ids, one id per
//! image codebook entry, then a fixed block of control-token slots. The layout is a pure
//! function of the codebook size, so two vocabularies built with the same argument are
//! interchangeable.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of byte-level text ids.
pub const TEXT_SIZE: usize = 256;
/// Number of control-token slots (named tokens plus reserved slack).
pub const SPECIAL_SLOTS: usize = 16;
/// Total id count of the large-scale configuration.
pub const LARGE_VOCAB_SIZE: usize = 171_385;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(v as u32)
    }
}

/// Named control tokens. Their order fixes their offset inside the special partition.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum Special {
    ImageStart,
    ImageEnd,
    RowEnd,
    HeightMarker,
    WidthMarker,
    PanelSeparator,
    Bos,
    Eos,
    Pad,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::ImageStart,
        Special::ImageEnd,
        Special::RowEnd,
        Special::HeightMarker,
        Special::WidthMarker,
        Special::PanelSeparator,
        Special::Bos,
        Special::Eos,
        Special::Pad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::ImageStart => "image-start",
            Special::ImageEnd => "image-end",
            Special::RowEnd => "row-end",
            Special::HeightMarker => "height-marker",
            Special::WidthMarker => "width-marker",
            Special::PanelSeparator => "panel-separator",
            Special::Bos => "bos",
            Special::Eos => "eos",
            Special::Pad => "pad",
        }
    }

    fn slot(self) -> usize {
        Special::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TokenClass {
    Text,
    Image,
    Special(Special),
    /// An unassigned slot in the special partition.
    Reserved(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    codebook_size: usize,
}

impl Vocabulary {
    pub fn new(codebook_size: usize) -> Result<Self> {
        if codebook_size == 0 {
            return Err(Error::invalid("codebook_size must be at least 1"));
        }
        Ok(Vocabulary { codebook_size })
    }

    /// The id space of the large-scale configurations: the image partition absorbs
    /// whatever the text and control partitions leave of the 171,385 ids.
    pub fn large_scale() -> Self {
        Vocabulary {
            codebook_size: LARGE_VOCAB_SIZE - TEXT_SIZE - SPECIAL_SLOTS,
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn text_range(&self) -> Range<usize> {
        0..TEXT_SIZE
    }

    pub fn image_range(&self) -> Range<usize> {
        TEXT_SIZE..TEXT_SIZE + self.codebook_size
    }

    pub fn special_range(&self) -> Range<usize> {
        let base = TEXT_SIZE + self.codebook_size;
        base..base + SPECIAL_SLOTS
    }

    pub fn total_size(&self) -> usize {
        TEXT_SIZE + self.codebook_size + SPECIAL_SLOTS
    }

    pub fn text_base(&self) -> usize {
        0
    }

    pub fn image_base(&self) -> usize {
        TEXT_SIZE
    }

    pub fn special(&self, s: Special) -> TokenId {
        TokenId::from(self.special_range().start + s.slot())
    }

    /// Token id of codebook entry `entry`.
    pub fn image_token(&self, entry: usize) -> TokenId {
        debug_assert!(entry < self.codebook_size);
        TokenId::from(TEXT_SIZE + entry)
    }

    /// Codebook entry of an image token, if `t` is one.
    pub fn image_entry(&self, t: TokenId) -> Option<usize> {
        self.image_range().contains(&t.index()).then(|| t.index() - TEXT_SIZE)
    }

    /// Text token carrying the byte value `b`. Also used for the small integers
    /// written after the dimension markers.
    pub fn text_token(&self, b: u8) -> TokenId {
        TokenId(b as u32)
    }

    pub fn encode_text(&self, s: &[u8]) -> Vec<TokenId> {
        s.iter().map(|&b| self.text_token(b)).collect()
    }

    pub fn decode_text(&self, ts: &[TokenId]) -> Result<Vec<u8>> {
        ts.iter()
            .enumerate()
            .map(|(position, &id)| {
                if self.text_range().contains(&id.index()) {
                    Ok(id.0 as u8)
                } else {
                    Err(Error::Classification { position, id })
                }
            })
            .collect()
    }

    pub fn classify(&self, t: TokenId) -> Result<TokenClass> {
        let i = t.index();
        if i < TEXT_SIZE {
            Ok(TokenClass::Text)
        } else if self.image_range().contains(&i) {
            Ok(TokenClass::Image)
        } else if self.special_range().contains(&i) {
            let slot = i - self.special_range().start;
            Ok(match Special::ALL.get(slot) {
                Some(&s) => TokenClass::Special(s),
                None => TokenClass::Reserved(slot),
            })
        } else {
            Err(Error::invalid(format!(
                "token {t} outside vocabulary of {} ids",
                self.total_size()
            )))
        }
    }

    /// Names of the control-token slots in slot order; reserved slots are `None`.
    pub fn special_names(&self) -> Vec<Option<&'static str>> {
        (0..SPECIAL_SLOTS)
            .map(|slot| Special::ALL.get(slot).map(|s| s.name()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_sizes() {
        let v = Vocabulary::new(1024).unwrap();
        assert_eq!(v.total_size(), 1296);
        assert_eq!(v.special_range().len(), 16);
        assert_eq!(v.image_range(), 256..1280);
    }

    #[test]
    fn degenerate_codebook() {
        let v = Vocabulary::new(1).unwrap();
        assert_eq!(v.image_range().len(), 1);
        assert!(Vocabulary::new(0).is_err());
    }

    #[test]
    fn large_preset_total() {
        assert_eq!(Vocabulary::large_scale().total_size(), 171_385);
    }

    #[test]
    fn text_codec_examples() {
        let v = Vocabulary::new(1024).unwrap();
        assert!(v.encode_text(b"").is_empty());
        assert_eq!(v.encode_text(b"ab"), vec![TokenId(97), TokenId(98)]);
        assert_eq!(v.encode_text(&[255]), vec![TokenId(255)]);
        assert_eq!(v.decode_text(&v.encode_text(b"xyz")).unwrap(), b"xyz");
        assert!(v.decode_text(&[]).unwrap().is_empty());
        match v.decode_text(&[TokenId(1), v.image_token(0)]) {
            Err(Error::Classification { position, .. }) => assert_eq!(position, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn classify_examples() {
        let v = Vocabulary::new(1024).unwrap();
        assert_eq!(v.classify(TokenId(65)).unwrap(), TokenClass::Text);
        assert_eq!(v.classify(v.image_token(0)).unwrap(), TokenClass::Image);
        assert_eq!(
            v.classify(v.special(Special::RowEnd)).unwrap(),
            TokenClass::Special(Special::RowEnd)
        );
        assert!(v.classify(TokenId(1296)).is_err());
    }

    #[test]
    fn partition_is_complete() {
        for cb in [1, 7, 1024] {
            let v = Vocabulary::new(cb).unwrap();
            let mut counts = [0usize; 4];
            for i in 0..v.total_size() {
                let k = match v.classify(TokenId::from(i)).unwrap() {
                    TokenClass::Text => 0,
                    TokenClass::Image => 1,
                    TokenClass::Special(_) => 2,
                    TokenClass::Reserved(_) => 3,
                };
                counts[k] += 1;
            }
            assert_eq!(counts, [256, cb, 9, 7]);
        }
    }

    #[test]
    fn layout_is_deterministic() {
        assert_eq!(Vocabulary::new(77).unwrap(), Vocabulary::new(77).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn text_round_trip(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..=64)) {
            let v = Vocabulary::new(1024).unwrap();
            let ids = v.encode_text(&bytes);
            proptest::prop_assert_eq!(ids.len(), bytes.len());
            proptest::prop_assert!(ids.iter().all(|t| v.text_range().contains(&t.index())));
            proptest::prop_assert_eq!(v.decode_text(&ids).unwrap(), bytes);
        }
    }
}
