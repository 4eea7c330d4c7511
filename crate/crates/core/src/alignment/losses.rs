use serde::{Deserialize, Serialize};

use super::{build_tree, nearest, Tree3};
use crate::error::{Error, Result};
use crate::renderer::RenderOutput;

/// Per-pixel NOCS colors with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NocsMap {
    pub width: usize,
    pub height: usize,
    pub colors: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl NocsMap {
    pub fn from_render(render: &RenderOutput) -> Self {
        Self {
            width: render.width,
            height: render.height,
            colors: render.nocs.clone(),
            valid: render.mask.iter().map(|&m| m > 0.0).collect(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Spatial index over the valid colors.
    pub fn index(&self) -> Option<ColorIndex> {
        let pixels: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        if pixels.is_empty() {
            return None;
        }
        let colors: Vec<[f64; 3]> = pixels.iter().map(|&i| self.colors[i]).collect();
        Some(ColorIndex {
            tree: build_tree(&colors),
            colors,
        })
    }
}

/// Nearest-neighbour lookup among the valid colors of a map.
pub struct ColorIndex {
    tree: Tree3,
    colors: Vec<[f64; 3]>,
}

impl ColorIndex {
    /// Nearest valid color and its distance.
    pub fn nearest(&self, c: &[f64; 3]) -> ([f64; 3], f64) {
        let (i, d) = nearest(&self.tree, c);
        (self.colors[i], d)
    }
}

/// A loss value with the number of pairs that produced it. `count == 0`
/// flags an empty correspondence set, whose contribution is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub count: usize,
}

impl LossValue {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Mean NOCS distance from each rendered foreground pixel to its nearest
/// predicted foreground color, over pairs closer than `threshold`.
pub fn loss_2d(render: &RenderOutput, predicted: &NocsMap, threshold: f64) -> Result<LossValue> {
    if render.width != predicted.width || render.height != predicted.height {
        return Err(Error::usage("rendered and predicted images differ in size"));
    }
    let Some(index) = predicted.index() else {
        return Ok(LossValue { value: 0.0, count: 0 });
    };
    let mut total = 0.0;
    let mut count = 0;
    for pixel in render.foreground_pixels() {
        let (_, d) = index.nearest(&render.nocs[pixel]);
        if d < threshold {
            total += d;
            count += 1;
        }
    }
    Ok(LossValue {
        value: if count > 0 { total / count as f64 } else { 0.0 },
        count,
    })
}

/// Mean distance from each model point to its nearest LIDAR point, over
/// pairs closer than `threshold` meters.
pub fn loss_3d(model: &[[f64; 3]], lidar: &[[f64; 3]], threshold: f64) -> Result<LossValue> {
    if model.is_empty() || lidar.is_empty() {
        return Err(Error::usage("3D loss needs non-empty point sets"));
    }
    let tree = build_tree(lidar);
    let mut total = 0.0;
    let mut count = 0;
    for p in model {
        let (_, d) = nearest(&tree, p);
        if d < threshold {
            total += d;
            count += 1;
        }
    }
    Ok(LossValue {
        value: if count > 0 { total / count as f64 } else { 0.0 },
        count,
    })
}
