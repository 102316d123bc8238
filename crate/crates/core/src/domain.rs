//! Benchmark records and the six-way consistency category.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Coord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("unknown category label {0:?}")]
    UnknownLabel(String),
    #[error("unknown modality state {0:?}")]
    UnknownState(String),
    #[error("category {stored:?} disagrees with states (expected {derived:?})")]
    CategoryMismatch { stored: Category, derived: Category },
    #[error("ground-truth boxes must be present iff the image is manipulated")]
    BoxesWithoutManipulation,
}

/// Whether one modality carries the real or the manipulated version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityState {
    Original,
    Manipulated,
}

impl ModalityState {
    pub const ALL: [ModalityState; 2] = [ModalityState::Original, ModalityState::Manipulated];

    pub fn is_manipulated(self) -> bool {
        self == ModalityState::Manipulated
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityState::Original => "original",
            ModalityState::Manipulated => "manipulated",
        }
    }
}

impl FromStr for ModalityState {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(ModalityState::Original),
            "manipulated" => Ok(ModalityState::Manipulated),
            other => Err(DomainError::UnknownState(other.to_string())),
        }
    }
}

/// Consistency among image, English subtitle and Chinese subtitle.
///
/// The wire labels are the exact strings models are asked to emit. Note the
/// inversion in the subtitle-only classes: a sample whose Chinese subtitle is
/// misaligned is labelled "only English aligned".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    AllConsistent,
    ImageManipulated,
    BothMisaligned,
    ChineseMisaligned,
    EnglishMisaligned,
    AllInconsistent,
}

impl Category {
    pub const COUNT: usize = 6;

    pub const ALL: [Category; Category::COUNT] = [
        Category::AllConsistent,
        Category::ImageManipulated,
        Category::BothMisaligned,
        Category::ChineseMisaligned,
        Category::EnglishMisaligned,
        Category::AllInconsistent,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::AllConsistent => "all consistent",
            Category::ImageManipulated => "image manipulated",
            Category::BothMisaligned => "both subtitles misaligned with image",
            Category::ChineseMisaligned => "only English aligned",
            Category::EnglishMisaligned => "only Chinese aligned",
            Category::AllInconsistent => "all inconsistent",
        }
    }

    /// Case-sensitive exact match against the six wire labels.
    pub fn from_label(label: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.label() == label)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Category> {
        Category::ALL.get(index).copied()
    }

    /// Categories whose image is tampered; these carry localization boxes.
    pub fn image_manipulated(self) -> bool {
        matches!(self, Category::ImageManipulated | Category::AllInconsistent)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Category {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::from_label(s).ok_or_else(|| DomainError::UnknownLabel(s.to_string()))
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Category::from_label(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown category label {s:?}")))
    }
}

/// Maps the three modality states onto the consistency category.
///
/// A tampered image with both subtitles manipulated is all-inconsistent; a
/// tampered image with at least one original subtitle is image-manipulated.
/// With a real image the subtitle states select the remaining four classes.
pub fn derive_category(image: ModalityState, en: ModalityState, zh: ModalityState) -> Category {
    use ModalityState::{Manipulated as M, Original as O};
    match (image, en, zh) {
        (M, M, M) => Category::AllInconsistent,
        (M, _, _) => Category::ImageManipulated,
        (O, O, O) => Category::AllConsistent,
        (O, M, M) => Category::BothMisaligned,
        (O, O, M) => Category::ChineseMisaligned,
        (O, M, O) => Category::EnglishMisaligned,
    }
}

/// Axis-aligned box `[x_min, y_min, x_max, y_max]` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x_min: T,
    y_min: T,
    x_max: T,
    y_max: T,
}

impl<T: Coord> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, DomainError> {
        let coords = [x_min, y_min, x_max, y_max];
        let valid = coords.iter().all(|c| c.is_finite_coord() && *c >= T::zero()) && x_max > x_min && y_max > y_min;
        if !valid {
            return Err(DomainError::InvalidBox(format!("{coords:?}")));
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn from_array(c: [T; 4]) -> Result<Self, DomainError> {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn x_min(&self) -> T {
        self.x_min
    }
    pub fn y_min(&self) -> T {
        self.y_min
    }
    pub fn x_max(&self) -> T {
        self.x_max
    }
    pub fn y_max(&self) -> T {
        self.y_max
    }

    pub fn area(&self) -> T {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// One benchmark record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    id: String,
    image_state: ModalityState,
    en_state: ModalityState,
    zh_state: ModalityState,
    category: Category,
    gt_boxes: Vec<BBox<T>>,
    en_text: String,
    zh_text: String,
    explanation_ref: Option<String>,
}

impl<T: Coord> Sample<T> {
    /// Builds a record whose category is derived from `states`
    /// (image, English, Chinese).
    pub fn new(
        id: impl Into<String>,
        states: [ModalityState; 3],
        gt_boxes: Vec<BBox<T>>,
        en_text: impl Into<String>,
        zh_text: impl Into<String>,
        explanation_ref: Option<String>,
    ) -> Result<Self, DomainError> {
        let [image_state, en_state, zh_state] = states;
        if gt_boxes.is_empty() == image_state.is_manipulated() {
            return Err(DomainError::BoxesWithoutManipulation);
        }
        Ok(Sample {
            id: id.into(),
            image_state,
            en_state,
            zh_state,
            category: derive_category(image_state, en_state, zh_state),
            gt_boxes,
            en_text: en_text.into(),
            zh_text: zh_text.into(),
            explanation_ref,
        })
    }

    /// Like [`Sample::new`], but also checks a stored category label.
    pub fn with_category(
        id: impl Into<String>,
        states: [ModalityState; 3],
        category: Category,
        gt_boxes: Vec<BBox<T>>,
        en_text: impl Into<String>,
        zh_text: impl Into<String>,
        explanation_ref: Option<String>,
    ) -> Result<Self, DomainError> {
        let sample = Sample::new(id, states, gt_boxes, en_text, zh_text, explanation_ref)?;
        if sample.category != category {
            return Err(DomainError::CategoryMismatch { stored: category, derived: sample.category });
        }
        Ok(sample)
    }

    pub fn states(&self) -> [ModalityState; 3] {
        [self.image_state, self.en_state, self.zh_state]
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn image_state(&self) -> ModalityState {
        self.image_state
    }
    pub fn en_state(&self) -> ModalityState {
        self.en_state
    }
    pub fn zh_state(&self) -> ModalityState {
        self.zh_state
    }
    pub fn category(&self) -> Category {
        self.category
    }
    pub fn gt_boxes(&self) -> &[BBox<T>] {
        &self.gt_boxes
    }
    pub fn en_text(&self) -> &str {
        &self.en_text
    }
    pub fn zh_text(&self) -> &str {
        &self.zh_text
    }
    pub fn explanation_ref(&self) -> Option<&str> {
        self.explanation_ref.as_deref()
    }

    /// Same record with a replaced Chinese subtitle.
    pub fn with_zh_text(&self, zh_text: impl Into<String>) -> Self {
        Sample { zh_text: zh_text.into(), ..self.clone() }
    }
}
