//! Square sliding-window crops along the longer image edge.
//!
//! Windows are as long as the short edge and start every half short edge.
//! The loop bound follows the original augmentation procedure literally,
//! which can leave a tail of the long edge uncovered; `CropMode::FullCoverage`
//! keeps sliding until the end of the image is reached.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Axis, Crop, OcrBox, QAExample};

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("invalid geometry {height}x{width}")]
    InvalidGeometry { height: i64, width: i64 },
    #[error("example {0} has OCR text but no OCR boxes")]
    MissingBoxes(String),
    #[error("crop plan does not match the geometry of example {0}")]
    PlanMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    #[default]
    Verbatim,
    FullCoverage,
}

impl FromStr for CropMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(CropMode::Verbatim),
            "full-coverage" => Ok(CropMode::FullCoverage),
            other => Err(format!("unknown crop mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub axis: Axis,
    pub windows: Vec<(u32, u32)>,
    pub height: u32,
    pub width: u32,
}

impl CropPlan {
    pub fn k(&self) -> usize {
        self.windows.len()
    }

    pub fn extent(&self) -> u32 {
        match self.axis {
            Axis::Height => self.height,
            Axis::Width => self.width,
        }
    }
}

/// Plans the crop windows for an image of the given size.
pub fn plan_crops(height: i64, width: i64, mode: CropMode) -> Result<CropPlan, CropError> {
    if height <= 0 || width <= 0 || height > u32::MAX as i64 || width > u32::MAX as i64 {
        return Err(CropError::InvalidGeometry { height, width });
    }
    let (h, w) = (height as u64, width as u64);
    let (axis, long, short) = if h >= w {
        (Axis::Height, h, w)
    } else {
        (Axis::Width, w, h)
    };

    let mut windows = Vec::new();
    let mut j = 0u64;
    while short * j < long {
        let start = short * j / 2;
        let end = (start + short).min(long);
        windows.push((start as u32, end as u32));
        j += 1;
    }

    if mode == CropMode::FullCoverage {
        // keep sliding by half the short edge; the last window sits flush with the end
        let mut reached = windows.last().map_or(0, |w| w.1 as u64);
        while reached < long {
            let start = (short * j / 2).min(long - short);
            windows.push((start as u32, (start + short) as u32));
            reached = start + short;
            j += 1;
        }
    }

    Ok(CropPlan {
        axis,
        windows,
        height: height as u32,
        width: width as u32,
    })
}

fn reading_order(boxes: &mut [&OcrBox]) {
    boxes.sort_by_key(|b| (b.y0, b.x0));
}

/// Produces one child example per window of `plan`.
///
/// Children keep the parent's geometry and carry the window as crop
/// metadata; their OCR is restricted to boxes lying fully inside the window.
pub fn apply_plan(parent: &QAExample, plan: &CropPlan) -> Result<Vec<QAExample>, CropError> {
    if plan.height != parent.image.height || plan.width != parent.image.width {
        return Err(CropError::PlanMismatch(parent.example_id.clone()));
    }
    let extent = plan.extent();

    plan.windows
        .iter()
        .enumerate()
        .map(|(j, &(start, end))| {
            let mut child = parent.clone();
            child.example_id = format!("{}#c{}", parent.example_id, j);
            child.image.id = format!("{}#c{}", parent.image.id, j);
            child.image.crop = Some(Crop {
                axis: plan.axis,
                start,
                end,
            });

            if start == 0 && end == extent {
                return Ok(child);
            }
            match &parent.ocr_boxes {
                Some(boxes) => {
                    let mut inside: Vec<&OcrBox> = boxes
                        .iter()
                        .filter(|b| {
                            let (lo, hi) = b.span(plan.axis);
                            start <= lo && hi <= end
                        })
                        .collect();
                    reading_order(&mut inside);
                    child.ocr_text = inside
                        .iter()
                        .map(|b| b.text.as_str())
                        .collect::<Vec<_>>()
                        .join(" ");
                    child.ocr_boxes = Some(inside.into_iter().cloned().collect());
                }
                None if parent.ocr_text.trim().is_empty() => {
                    child.ocr_text = String::new();
                }
                None => return Err(CropError::MissingBoxes(parent.example_id.clone())),
            }
            Ok(child)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageRef;
    use proptest::prelude::*;

    /// Line-by-line transcription of the augmentation loop.
    fn brute_force(h: u64, w: u64) -> Vec<(u64, u64)> {
        let mut out = vec![];
        let mut j = 0;
        if h >= w {
            while w * j < h {
                let start = w * j / 2;
                let end = std::cmp::min(w * j / 2 + w, h);
                out.push((start, end));
                j += 1;
            }
        } else {
            while h * j < w {
                let start = h * j / 2;
                let end = std::cmp::min(h * j / 2 + h, w);
                out.push((start, end));
                j += 1;
            }
        }
        out
    }

    fn windows(h: i64, w: i64, mode: CropMode) -> Vec<(u32, u32)> {
        plan_crops(h, w, mode).unwrap().windows
    }

    #[test]
    fn square_image_has_one_window() {
        let plan = plan_crops(400, 400, CropMode::Verbatim).unwrap();
        assert_eq!(plan.axis, Axis::Height);
        assert_eq!(plan.windows, vec![(0, 400)]);
        assert_eq!(plan.k(), 1);
    }

    #[test]
    fn tall_image() {
        assert_eq!(
            windows(1000, 400, CropMode::Verbatim),
            vec![(0, 400), (200, 600), (400, 800)]
        );
    }

    #[test]
    fn wide_image() {
        let plan = plan_crops(300, 900, CropMode::Verbatim).unwrap();
        assert_eq!(plan.axis, Axis::Width);
        assert_eq!(plan.windows, vec![(0, 300), (150, 450), (300, 600)]);
    }

    #[test]
    fn full_coverage_appends_tail() {
        assert_eq!(
            windows(1000, 400, CropMode::FullCoverage),
            vec![(0, 400), (200, 600), (400, 800), (600, 1000)]
        );
        assert_eq!(windows(400, 400, CropMode::FullCoverage), vec![(0, 400)]);
        // verbatim stops at 1200 of 2000
        assert_eq!(
            windows(2000, 400, CropMode::FullCoverage),
            vec![(0, 400), (200, 600), (400, 800), (600, 1000), (800, 1200), (1000, 1400), (1200, 1600), (1400, 1800), (1600, 2000)]
        );
    }

    #[test]
    fn invalid_geometry() {
        assert!(matches!(
            plan_crops(0, 10, CropMode::Verbatim),
            Err(CropError::InvalidGeometry { .. })
        ));
        assert!(plan_crops(10, -3, CropMode::Verbatim).is_err());
    }

    #[test]
    fn sampled_grid_matches_brute_force() {
        for h in (1..2000).step_by(37) {
            for w in (1..2000).step_by(41) {
                let got: Vec<(u64, u64)> = windows(h, w, CropMode::Verbatim)
                    .into_iter()
                    .map(|(s, e)| (s as u64, e as u64))
                    .collect();
                assert_eq!(got, brute_force(h as u64, w as u64), "h={h} w={w}");
            }
        }
    }

    fn example(h: u32, w: u32, boxes: Option<Vec<OcrBox>>) -> QAExample {
        let ocr_text = boxes
            .as_ref()
            .map(|b| b.iter().map(|b| b.text.clone()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        QAExample {
            example_id: "doc".into(),
            image: ImageRef::new("img", h, w),
            question: "q?".into(),
            gold_answers: vec!["a".into()],
            ocr_text,
            ocr_boxes: boxes,
            structured_table: None,
            subset: None,
        }
    }

    #[test]
    fn square_child_copies_ocr_whole() {
        let mut parent = example(400, 400, None);
        parent.ocr_text = "all of the text".into();
        let plan = plan_crops(400, 400, CropMode::Verbatim).unwrap();
        let kids = apply_plan(&parent, &plan).unwrap();
        assert_eq!(kids.len(), 1);
        assert_eq!(kids[0].ocr_text, "all of the text");
        assert_eq!(kids[0].example_id, "doc#c0");
        assert_eq!(kids[0].image.id, "img#c0");
        assert_eq!(kids[0].image.crop, Some(Crop { axis: Axis::Height, start: 0, end: 400 }));
    }

    #[test]
    fn child_keeps_only_contained_boxes() {
        let parent = example(
            1000,
            400,
            Some(vec![OcrBox::new("top", 10, 0, 200, 100), OcrBox::new("bottom", 10, 900, 200, 950)]),
        );
        let plan = plan_crops(1000, 400, CropMode::Verbatim).unwrap();
        let kids = apply_plan(&parent, &plan).unwrap();
        assert_eq!(kids[0].ocr_text, "top");
        assert_eq!(kids[0].question, parent.question);
        assert_eq!(kids[0].gold_answers, parent.gold_answers);
        // (200,600) holds neither box
        assert_eq!(kids[1].ocr_text, "");
        assert_eq!(kids[1].ocr_boxes.as_deref(), Some(&[][..]));
    }

    #[test]
    fn reading_order_is_top_down_then_left_right() {
        let parent = example(
            1000,
            400,
            Some(vec![
                OcrBox::new("c", 0, 50, 10, 60),
                OcrBox::new("b", 200, 10, 210, 20),
                OcrBox::new("a", 100, 10, 110, 20),
                OcrBox::new("straddle", 0, 350, 10, 450),
            ]),
        );
        let plan = plan_crops(1000, 400, CropMode::Verbatim).unwrap();
        let kids = apply_plan(&parent, &plan).unwrap();
        assert_eq!(kids[0].ocr_text, "a b c");
        assert_eq!(kids[1].ocr_text, "straddle");
    }

    #[test]
    fn missing_boxes_is_an_error() {
        let mut parent = example(1000, 400, None);
        parent.ocr_text = "text".into();
        let plan = plan_crops(1000, 400, CropMode::Verbatim).unwrap();
        assert_eq!(apply_plan(&parent, &plan), Err(CropError::MissingBoxes("doc".into())));
    }

    #[test]
    fn children_validate() {
        let parent = example(1000, 450, Some(vec![]));
        let plan = plan_crops(1000, 450, CropMode::FullCoverage).unwrap();
        for kid in apply_plan(&parent, &plan).unwrap() {
            kid.validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn verbatim_window_starts(h in 1i64..4000, w in 1i64..4000) {
            let plan = plan_crops(h, w, CropMode::Verbatim).unwrap();
            let (long, short) = if h >= w { (h, w) } else { (w, h) };
            prop_assert!(plan.k() >= 1);
            for (j, &(s, e)) in plan.windows.iter().enumerate() {
                prop_assert_eq!(s as i64, short * j as i64 / 2);
                prop_assert!(e > s);
                prop_assert!((e - s) as i64 <= short);
                prop_assert!(e as i64 <= long);
            }
            for pair in plan.windows.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if (a.1 - a.0) as i64 == short && (b.1 - b.0) as i64 == short {
                    let overlap = (a.1 - b.0) as i64;
                    prop_assert!(overlap == short / 2 || overlap == short - short / 2);
                }
            }
        }

        #[test]
        fn full_coverage_covers_extent(h in 1i64..4000, w in 1i64..4000) {
            let plan = plan_crops(h, w, CropMode::FullCoverage).unwrap();
            let mut covered = 0u32;
            for &(s, e) in &plan.windows {
                prop_assert!(s <= covered);
                covered = covered.max(e);
            }
            prop_assert_eq!(covered, plan.extent());
        }
    }
}
