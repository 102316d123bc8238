//! Composite reward: format compliance, classification and localization,
//! summed with unit weights.

use crate::domain::{BBox, Category, Sample};
use crate::parser::{parse_output, StructuredOutput};
use crate::scalar::{Coord, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown<T> {
    pub format: T,
    pub cls: T,
    pub loc: T,
    pub total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    fn zero() -> Self {
        RewardBreakdown { format: T::zero(), cls: T::zero(), loc: T::zero(), total: T::zero() }
    }
}

pub fn reward_format(text: &str) -> u8 {
    u8::from(crate::parser::check_format(text).is_valid)
}

pub fn reward_cls(pred: Category, gt: Category) -> u8 {
    u8::from(pred == gt)
}

/// Sorted distinct values.
fn breakpoints<T: Coord>(values: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("box coordinates are finite"));
    v.dedup();
    v
}

/// Exact areas of (A ∩ B, A ∪ B) where A and B are unions of boxes.
///
/// The plane is cut into the grid induced by every box edge; each grid cell
/// is either fully inside or fully outside every box, so summing cell areas
/// is exact in the coordinate type's arithmetic.
pub fn region_areas<T: Coord>(a: &[BBox<T>], b: &[BBox<T>]) -> (T, T) {
    let all = || a.iter().chain(b.iter());
    let xs = breakpoints(all().flat_map(|r| [r.x_min(), r.x_max()]));
    let ys = breakpoints(all().flat_map(|r| [r.y_min(), r.y_max()]));
    let mut inter = T::zero();
    let mut union = T::zero();
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (x, y) = (xw[0], yw[0]);
            let in_a = a.iter().any(|r| r.contains(x, y));
            let in_b = b.iter().any(|r| r.contains(x, y));
            if in_a || in_b {
                let cell = (xw[1] - xw[0]) * (yw[1] - yw[0]);
                union = union + cell;
                if in_a && in_b {
                    inter = inter + cell;
                }
            }
        }
    }
    (inter, union)
}

/// Exact area of a union of boxes.
pub fn union_area<T: Coord>(boxes: &[BBox<T>]) -> T {
    region_areas(boxes, &[]).1
}

/// Intersection over union of two box unions.
///
/// Two empty regions agree perfectly (1); exactly one empty region scores 0.
pub fn region_iou<T: Coord>(pred: &[BBox<T>], gt: &[BBox<T>]) -> T {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => T::one(),
        (true, false) | (false, true) => T::zero(),
        (false, false) => {
            let (inter, union) = region_areas(pred, gt);
            inter / union
        }
    }
}

/// Rewards an already-parsed verdict against a ground-truth record.
pub fn score_output<T: Scalar>(out: &StructuredOutput<T>, gt: &Sample<T>) -> RewardBreakdown<T> {
    let format = T::one();
    let cls = T::from_u8(reward_cls(out.category(), gt.category())).unwrap_or_else(T::zero);
    let loc = region_iou(out.boxes(), gt.gt_boxes());
    RewardBreakdown { format, cls, loc, total: format + cls + loc }
}

/// Full reward for one response text. Unparsable text earns nothing.
pub fn reward_total<T: Scalar>(text: &str, gt: &Sample<T>) -> RewardBreakdown<T> {
    match parse_output::<T>(text) {
        Ok(out) => score_output(&out, gt),
        Err(_) => RewardBreakdown::zero(),
    }
}
