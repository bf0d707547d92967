//! Bounding boxes and their projection into model-width geometry features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GevstError, Result};
use crate::nn::Linear;
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tensor, Var};

/// Axis-aligned box in image pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub image_w: f64,
    pub image_h: f64,
}

impl BoundingBox {
    pub fn new(corners: [f64; 4], image_wh: [f64; 2]) -> Result<Self> {
        let b = BoundingBox {
            x_min: corners[0],
            y_min: corners[1],
            x_max: corners[2],
            y_max: corners[3],
            image_w: image_wh[0],
            image_h: image_wh[1],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.image_w,
            self.image_h,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.image_w <= 0.0 || self.image_h <= 0.0 {
            return Err(GevstError::Geometry(format!(
                "invalid image extent in {self:?}"
            )));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GevstError::Geometry(format!("degenerate box {self:?}")));
        }
        if self.x_min < 0.0
            || self.y_min < 0.0
            || self.x_max > self.image_w
            || self.y_max > self.image_h
        {
            return Err(GevstError::Geometry(format!(
                "box outside the image: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
            ..*self
        }
    }
}

/// `[cx/W, cy/H, w/W, h/H]`, every entry in (0, 1].
pub fn normalize_box(b: &BoundingBox) -> Result<[f64; 4]> {
    b.validate()?;
    let (cx, cy) = b.center();
    Ok([
        cx / b.image_w,
        cy / b.image_h,
        b.width() / b.image_w,
        b.height() / b.image_h,
    ])
}

/// `[N × 4]` matrix of normalized boxes.
pub fn normalized_matrix(boxes: &[BoundingBox]) -> Result<Tensor> {
    if boxes.is_empty() {
        return Err(GevstError::Input("no boxes to normalize".into()));
    }
    let mut data = Vec::with_capacity(boxes.len() * 4);
    for b in boxes {
        data.extend(normalize_box(b)?);
    }
    Tensor::new(vec![boxes.len(), 4], data)
}

/// `relu(nb·W_g + b_g)`: one projection per modality.
#[derive(Clone, Debug)]
pub struct GeometryEmbedding {
    pub proj: Linear,
}

impl GeometryEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        GeometryEmbedding {
            proj: Linear::new(store, rng, name, 4, d, true),
        }
    }

    /// `normalized: [N × 4] → [N × d]`
    pub fn forward<'t>(&self, g: &Graph<'t>, normalized: Var<'t>) -> Result<Var<'t>> {
        Ok(self.proj.forward(g, normalized)?.relu())
    }

    pub fn embed<'t>(&self, g: &Graph<'t>, boxes: &[BoundingBox]) -> Result<Var<'t>> {
        let nb = g.constant(normalized_matrix(boxes)?);
        self.forward(g, nb)
    }
}
