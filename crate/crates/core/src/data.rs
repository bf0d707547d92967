//! Synthetic scenes of colored shapes standing in for detector regions and
//! dense captions, and their JSONL persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GevstError, Result};
use crate::geometry::BoundingBox;

pub const CANVAS: f64 = 100.0;
pub const REGION_FEAT_DIM: usize = 32;
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const FEATURE_NOISE: f64 = 0.05;
/// Consecutive area ranks differ by at least this factor.
const AREA_MARGIN: f64 = 1.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub bbox: BoundingBox,
}

impl SceneObject {
    pub fn phrase(&self) -> String {
        format!("a {} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub index: u64,
    /// Sorted by decreasing area.
    pub objects: Vec<SceneObject>,
}

/// Spatial relation of `a` to `b` along the dominant axis of their center
/// offset (image y grows downwards).
pub fn relation(a: &BoundingBox, b: &BoundingBox) -> &'static str {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    let (dx, dy) = (bx - ax, by - ay);
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            "left of"
        } else {
            "right of"
        }
    } else if dy > 0.0 {
        "above"
    } else {
        "below"
    }
}

/// Corners on a 0.01 grid, so they survive a decimal round trip exactly.
fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = (
        rng.random_range(1000..4200u32),
        rng.random_range(1000..4200u32),
    );
    let extent = (CANVAS * 100.0) as u32;
    let (x, y) = (
        rng.random_range(0..=extent - w),
        rng.random_range(0..=extent - h),
    );
    let c = |v: u32| f64::from(v) / 100.0;
    BoundingBox::new([c(x), c(y), c(x + w), c(y + h)], [CANVAS, CANVAS])
        .expect("box inside the canvas")
}

fn acceptable(objects: &[SceneObject]) -> bool {
    for (i, a) in objects.iter().enumerate() {
        if objects[..i].iter().any(|b| a.bbox.iou(&b.bbox) >= 0.5) {
            return false;
        }
    }
    let areas: Vec<f64> = objects.iter().map(|o| o.bbox.area()).collect();
    if areas.windows(2).any(|w| w[0] < AREA_MARGIN * w[1]) {
        return false;
    }
    // The captioned relation should not sit on the diagonal.
    let ((ax, ay), (bx, by)) = (objects[0].bbox.center(), objects[1].bbox.center());
    let (dx, dy) = ((bx - ax).abs(), (by - ay).abs());
    dx.max(dy) >= 1.5 * dx.min(dy) + 5.0
}

/// The scene of sample `index`, drawn from its own RNG stream.
pub fn generate_scene(seed: u64, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = rng.random_range(2..=5usize);
    loop {
        let mut objects: Vec<SceneObject> = (0..n)
            .map(|_| SceneObject {
                shape: rng.random_range(0..SHAPES.len()),
                color: rng.random_range(0..COLORS.len()),
                bbox: random_box(&mut rng),
            })
            .collect();
        objects.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
        if acceptable(&objects) {
            return Scene {
                seed,
                index,
                objects,
            };
        }
    }
}

/// Fixed code of a (shape, color) pair: one-hot of both plus a sinusoidal
/// signature.
pub fn region_code(shape: usize, color: usize) -> [f64; REGION_FEAT_DIM] {
    let mut code = [0.0; REGION_FEAT_DIM];
    code[shape] = 1.0;
    code[SHAPES.len() + color] = 1.0;
    let k = (shape * COLORS.len() + color + 1) as f64;
    for (j, c) in code
        .iter_mut()
        .enumerate()
        .skip(SHAPES.len() + COLORS.len())
    {
        *c = (0.7 * k * (j as f64 + 1.0)).sin();
    }
    code
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub feat: Vec<f32>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseCaption {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub regions: Vec<Region>,
    pub image_wh: [f64; 2],
    pub dense_captions: Vec<DenseCaption>,
    pub gt_captions: Vec<String>,
}

impl Sample {
    pub fn region_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.regions
            .iter()
            .map(|r| BoundingBox::new(r.bbox, self.image_wh))
            .collect()
    }

    pub fn caption_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.dense_captions
            .iter()
            .map(|c| BoundingBox::new(c.bbox, self.image_wh))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() || self.dense_captions.is_empty() {
            return Err(GevstError::Input(format!(
                "sample {} has no regions or no dense captions",
                self.id
            )));
        }
        if self.gt_captions.is_empty() {
            return Err(GevstError::Input(format!(
                "sample {} has no reference captions",
                self.id
            )));
        }
        let width = self.regions[0].feat.len();
        if width == 0 || self.regions.iter().any(|r| r.feat.len() != width) {
            return Err(GevstError::Input(format!(
                "sample {} has ragged region features",
                self.id
            )));
        }
        if self
            .regions
            .iter()
            .flat_map(|r| &r.feat)
            .any(|v| !v.is_finite())
        {
            return Err(GevstError::Input(format!(
                "sample {} has non-finite features",
                self.id
            )));
        }
        self.region_boxes()?;
        self.caption_boxes()?;
        Ok(())
    }
}

/// Dense captions: one phrase per object plus one relation per pair of
/// objects adjacent in left-to-right order, boxed by their union.
pub fn sample_from_scene(scene: &Scene) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_f00d);
    rng.set_stream(scene.index);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("positive deviation");
    let regions = scene
        .objects
        .iter()
        .map(|o| Region {
            feat: region_code(o.shape, o.color)
                .iter()
                .map(|&c| (c + noise.sample(&mut rng)) as f32)
                .collect(),
            bbox: o.bbox.corners(),
        })
        .collect();

    let mut dense_captions: Vec<DenseCaption> = scene
        .objects
        .iter()
        .map(|o| DenseCaption {
            text: o.phrase(),
            bbox: o.bbox.corners(),
        })
        .collect();
    let mut by_x: Vec<&SceneObject> = scene.objects.iter().collect();
    by_x.sort_by(|a, b| a.bbox.center().0.total_cmp(&b.bbox.center().0));
    for pair in by_x.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        dense_captions.push(DenseCaption {
            text: format!(
                "{} {} {}",
                SHAPES[a.shape],
                relation(&a.bbox, &b.bbox),
                SHAPES[b.shape]
            ),
            bbox: a.bbox.union(&b.bbox).corners(),
        });
    }

    let (a, b) = (&scene.objects[0], &scene.objects[1]);
    let primary = format!(
        "{} {} {}",
        a.phrase(),
        relation(&a.bbox, &b.bbox),
        b.phrase()
    );
    Sample {
        id: scene.index,
        regions,
        image_wh: [CANVAS, CANVAS],
        dense_captions,
        gt_captions: vec![primary.clone(), format!("there is {primary}")],
    }
}

pub fn generate_dataset(seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(GevstError::Input("n_samples must be at least 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| sample_from_scene(&generate_scene(seed, i)))
        .collect())
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn require<'a>(obj: &'a Value, key: &str, line: usize, path: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| GevstError::Schema {
        line,
        field: format!("{path}{key}"),
    })
}

fn check_schema(v: &Value, line: usize) -> Result<()> {
    if !v.is_object() {
        return Err(GevstError::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    }
    require(v, "id", line, "")?;
    require(v, "image_wh", line, "")?;
    require(v, "gt_captions", line, "")?;
    let regions = require(v, "regions", line, "")?;
    for (i, r) in regions.as_array().into_iter().flatten().enumerate() {
        require(r, "feat", line, &format!("regions[{i}]."))?;
        require(r, "box", line, &format!("regions[{i}]."))?;
    }
    let captions = require(v, "dense_captions", line, "")?;
    for (i, c) in captions.as_array().into_iter().flatten().enumerate() {
        require(c, "text", line, &format!("dense_captions[{i}]."))?;
        require(c, "box", line, &format!("dense_captions[{i}]."))?;
    }
    Ok(())
}

/// Parses one JSONL line (numbered from 1) into a sample.
pub fn parse_line(text: &str, line: usize) -> Result<Sample> {
    let v: Value = serde_json::from_str(text).map_err(|e| GevstError::Parse {
        line,
        message: e.to_string(),
    })?;
    check_schema(&v, line)?;
    serde_json::from_value(v).map_err(|e| GevstError::Parse {
        line,
        message: e.to_string(),
    })
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_text = line?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line_text, i + 1)?);
    }
    Ok(out)
}
