use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::usage(format!("unknown difficulty '{s}'"))),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        })
    }
}

/// Label-size and overlap thresholds of the curriculum stages. Heights are
/// in pixels and must be strictly exceeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub easy_min_height: f64,
    pub moderate_min_height: f64,
    pub moderate_max_iou: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            easy_min_height: 40.0,
            moderate_min_height: 25.0,
            moderate_max_iou: 0.30,
        }
    }
}

impl CurriculumConfig {
    pub fn validated(self) -> Result<Self> {
        if self.easy_min_height < self.moderate_min_height || !(0.0..=1.0).contains(&self.moderate_max_iou) {
            return Err(Error::usage(
                "easy height must be at least the moderate height and the IoU cap in [0, 1]",
            ));
        }
        Ok(self)
    }
}

/// IoU of two pixel boxes `[u0, v0, u1, v1)`.
pub fn box_iou(a: &[usize; 4], b: &[usize; 4]) -> f64 {
    let w = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let h = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = (w * h) as f64;
    let area = |r: &[usize; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as f64;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Stage of box `index` among all boxes of its frame.
pub fn classify_difficulty(index: usize, boxes: &[[usize; 4]], border: bool, config: &CurriculumConfig) -> Difficulty {
    let b = &boxes[index];
    let height = (b[3] - b[1]) as f64;
    let max_iou = boxes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, o)| box_iou(b, o))
        .fold(0.0, f64::max);
    if height > config.easy_min_height && max_iou == 0.0 && !border {
        Difficulty::Easy
    } else if height > config.moderate_min_height && max_iou <= config.moderate_max_iou {
        Difficulty::Moderate
    } else {
        Difficulty::Hard
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let c = CurriculumConfig::default();
        let isolated = [[100, 100, 180, 150], [400, 100, 480, 150]];
        assert_eq!(classify_difficulty(0, &isolated, false, &c), Difficulty::Easy);
        // 30 px high with IoU 0.1 against a neighbour
        let a = [0, 0, 100, 30];
        let overlap: f64 = 200.0 / 11.0;
        let b = [100 - overlap.round() as usize, 0, 200 - overlap.round() as usize, 30];
        let iou = box_iou(&a, &b);
        assert!((iou - 0.1).abs() < 0.01, "{iou}");
        assert_eq!(classify_difficulty(0, &[a, b], false, &c), Difficulty::Moderate);
        assert_eq!(classify_difficulty(0, &[[10, 10, 60, 30]], false, &c), Difficulty::Hard);
        assert_eq!(
            classify_difficulty(0, &[[10, 10, 60, 60]], true, &c),
            Difficulty::Moderate
        );
    }

    #[test]
    fn thresholds_are_strict() {
        let c = CurriculumConfig::default();
        assert_eq!(
            classify_difficulty(0, &[[0, 1, 10, 41]], false, &c),
            Difficulty::Moderate
        );
        assert_eq!(classify_difficulty(0, &[[0, 1, 10, 26]], false, &c), Difficulty::Hard);
    }

    proptest! {
        #[test]
        fn easy_implies_moderate_conditions(
            raw in prop::collection::vec((0usize..300, 0usize..300, 1usize..120, 1usize..120), 1..6),
            border in any::<bool>(),
        ) {
            let c = CurriculumConfig::default();
            let boxes: Vec<[usize; 4]> = raw.iter().map(|&(u, v, w, h)| [u, v, u + w, v + h]).collect();
            let d = classify_difficulty(0, &boxes, border, &c);
            let strict = CurriculumConfig { easy_min_height: 1e9, ..c.clone() };
            let moderate_only = classify_difficulty(0, &boxes, false, &strict);
            if d == Difficulty::Easy {
                prop_assert_eq!(moderate_only, Difficulty::Moderate);
            }
        }
    }
}
