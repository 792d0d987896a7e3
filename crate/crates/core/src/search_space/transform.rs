//! Candidate transformations and their layer recipes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Convolution family used by the base 3x3 layers of a transformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Standard,
    Separable,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Standard, Stream::Separable];

    pub fn tag(&self) -> &'static str {
        match self {
            Stream::Standard => "std",
            Stream::Separable => "sep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::T1,
        Variant::T2,
        Variant::T3,
        Variant::T4,
        Variant::T5,
        Variant::T6,
    ];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn tag(&self) -> &'static str {
        ["t1", "t2", "t3", "t4", "t5", "t6"][self.index()]
    }

    /// Layers of the transformation when built without any sharing.
    pub fn recipe(&self) -> &'static [LayerKind] {
        use LayerKind::*;
        match self {
            Variant::T1 => &[Base],
            Variant::T2 => &[Base, Base],
            Variant::T3 => &[Base, Base, Base],
            Variant::T4 => &[Base, Dilated(2)],
            Variant::T5 => &[Base, Base, Dilated(2)],
            Variant::T6 => &[Base, Dilated(3)],
        }
    }
}

/// A 3x3 layer inside a transformation. `Base` follows the stream's
/// convolution type; dilated layers are depthwise separable in both streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Base,
    Dilated(usize),
}

impl LayerKind {
    pub fn dilation(&self) -> usize {
        match self {
            LayerKind::Base => 1,
            LayerKind::Dilated(r) => *r,
        }
    }
}

/// Receptive field of a stack of 3x3 layers: each adds `(k - 1) * dilation`.
pub fn stacked_receptive_field(layers: &[LayerKind]) -> usize {
    layers.iter().fold(1, |rf, l| rf + 2 * l.dilation())
}

/// One of the 13 candidates on an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformationId {
    Conv(Stream, Variant),
    None,
}

/// Candidates per edge.
pub const NUM_CANDIDATES: usize = 13;
/// Index of `none` in the canonical order.
pub const NONE_INDEX: usize = 12;

impl TransformationId {
    /// Canonical order: `std_t1..std_t6, sep_t1..sep_t6, none`.
    pub fn all() -> [TransformationId; NUM_CANDIDATES] {
        let mut out = [TransformationId::None; NUM_CANDIDATES];
        for (i, slot) in out.iter_mut().take(12).enumerate() {
            *slot = TransformationId::from_index(i).expect("in range");
        }
        out
    }

    /// The twelve convolutional candidates in canonical order.
    pub fn convolutional() -> impl Iterator<Item = TransformationId> {
        (0..12).map(|i| TransformationId::from_index(i).expect("in range"))
    }

    pub fn index(&self) -> usize {
        match self {
            TransformationId::Conv(s, v) => {
                let base = if *s == Stream::Standard { 0 } else { 6 };
                base + v.index()
            }
            TransformationId::None => NONE_INDEX,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0..=5 => Some(TransformationId::Conv(Stream::Standard, Variant::ALL[i])),
            6..=11 => Some(TransformationId::Conv(Stream::Separable, Variant::ALL[i - 6])),
            NONE_INDEX => Some(TransformationId::None),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, TransformationId::None)
    }

    pub fn variant(&self) -> Option<Variant> {
        match self {
            TransformationId::Conv(_, v) => Some(*v),
            TransformationId::None => None,
        }
    }

    pub fn stream(&self) -> Option<Stream> {
        match self {
            TransformationId::Conv(s, _) => Some(*s),
            TransformationId::None => None,
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown transformation `{0}`")]
pub struct UnknownTransformation(pub String);

impl fmt::Display for TransformationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformationId::Conv(s, v) => write!(f, "{}_{}", s.tag(), v.tag()),
            TransformationId::None => f.write_str("none"),
        }
    }
}

impl FromStr for TransformationId {
    type Err = UnknownTransformation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransformationId::all()
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| UnknownTransformation(s.to_string()))
    }
}

impl Serialize for TransformationId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TransformationId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Error returned when asking for the receptive field of `none`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("the none candidate has no receptive field")]
pub struct NoReceptiveField;

pub fn receptive_field(id: TransformationId) -> Result<usize, NoReceptiveField> {
    id.variant()
        .map(|v| stacked_receptive_field(v.recipe()))
        .ok_or(NoReceptiveField)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirteen_candidates_with_unique_names() {
        let all = TransformationId::all();
        assert_eq!(all.len(), 13);
        let names: std::collections::BTreeSet<String> = all.iter().map(|t| t.name()).collect();
        assert_eq!(names.len(), 13);
        assert_eq!(all[0].name(), "std_t1");
        assert_eq!(all[11].name(), "sep_t6");
        assert_eq!(all[12].name(), "none");
    }

    #[test]
    fn index_roundtrip() {
        for (i, t) in TransformationId::all().iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(TransformationId::from_index(i), Some(*t));
        }
        assert_eq!(TransformationId::from_index(13), None);
    }

    #[test]
    fn receptive_fields() {
        let rf = |s: &str| receptive_field(s.parse().unwrap()).unwrap();
        assert_eq!(rf("std_t1"), 3);
        assert_eq!(rf("std_t3"), 7);
        assert_eq!(rf("sep_t5"), 9);
        assert!(receptive_field(TransformationId::None).is_err());
        for v in Variant::ALL {
            let a = receptive_field(TransformationId::Conv(Stream::Standard, v)).unwrap();
            let b = receptive_field(TransformationId::Conv(Stream::Separable, v)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unknown_names_fail_to_parse() {
        assert!("sep_t9".parse::<TransformationId>().is_err());
        assert!("skip".parse::<TransformationId>().is_err());
    }
}
