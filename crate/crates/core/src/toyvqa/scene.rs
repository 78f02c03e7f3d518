use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Color, Shape};
use super::DataConfig;
use crate::model::{RegionFeature, BOX_DIMS};

/// Axis-aligned box in canvas units, `min < max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    /// `(x_min/W, y_min/H, x_max/W, y_max/H, w/W, h/H)`.
    pub fn normalized(&self, canvas: Canvas) -> [f64; BOX_DIMS] {
        let w = canvas.width as f64;
        let h = canvas.height as f64;
        [
            self.x_min as f64 / w,
            self.y_min as f64 / h,
            self.x_max as f64 / w,
            self.y_max as f64 / h,
            self.width() as f64 / w,
            self.height() as f64 / h,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: Canvas,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn is_valid(&self) -> bool {
        !self.objects.is_empty()
            && self.objects.iter().all(|o| {
                let b = o.bbox;
                b.x_min < b.x_max && b.y_min < b.y_max && b.x_max <= self.canvas.width && b.y_max <= self.canvas.height
            })
    }
}

/// Object count uniform in `1..=max_regions`; shape and color uniform; box sides
/// uniform in `[min_box, max_box]` (clipped to the canvas), corner uniform over
/// the positions where the box fits. All coordinates are integers.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &DataConfig, rng: &mut R) -> Scene {
    let canvas = Canvas {
        width: cfg.canvas_width,
        height: cfg.canvas_height,
    };
    let count = rng.random_range(1..=cfg.max_regions);
    let objects = (0..count)
        .map(|_| {
            let shape = Shape::ALL[rng.random_range(0..3)];
            let color = Color::ALL[rng.random_range(0..3)];
            let w = rng.random_range(cfg.min_box..=cfg.max_box.min(canvas.width));
            let h = rng.random_range(cfg.min_box..=cfg.max_box.min(canvas.height));
            let x_min = rng.random_range(0..=canvas.width - w);
            let y_min = rng.random_range(0..=canvas.height - h);
            SceneObject {
                shape,
                color,
                bbox: BoundingBox {
                    x_min,
                    y_min,
                    x_max: x_min + w,
                    y_max: y_min + h,
                },
            }
        })
        .collect();
    Scene { canvas, objects }
}

/// Fixed random map from the 6-dim (shape one-hot ++ color one-hot) attribute
/// vector to `visual_dims` statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProjection {
    /// Row-major `visual_dims × 6`.
    weights: Vec<f64>,
    dims: usize,
}

impl AttributeProjection {
    pub fn new<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            weights: (0..dims * 6).map(|_| normal.sample(rng)).collect(),
            dims,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Noise-free statistics of an attribute pair.
    pub fn project(&self, shape: Shape, color: Color) -> Vec<f64> {
        (0..self.dims)
            .map(|i| self.weights[i * 6 + shape.index()] + self.weights[i * 6 + 3 + color.index()])
            .collect()
    }
}

/// Round to 9 significant decimal digits, the precision stored in dataset files.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Region features and (noisy) object tags of a scene. Tag `i` describes
/// region `i`; each tag is replaced by a different shape with probability
/// `tag_noise`.
pub fn featurize<R: Rng + ?Sized>(
    scene: &Scene,
    projection: &AttributeProjection,
    cfg: &DataConfig,
    rng: &mut R,
) -> (Vec<RegionFeature>, Vec<Shape>) {
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("non-negative noise");
    let mut regions = Vec::with_capacity(scene.objects.len());
    let mut tags = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        let stats = projection
            .project(obj.shape, obj.color)
            .into_iter()
            .map(|v| {
                let n = if cfg.feature_noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                round_sig9(v + n)
            })
            .collect();
        let bbox = obj.bbox.normalized(scene.canvas).map(round_sig9);
        regions.push(RegionFeature { stats, bbox });

        let flip = cfg.tag_noise > 0.0 && rng.random_bool(cfg.tag_noise.min(1.0));
        let tag = if flip {
            let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != obj.shape).collect();
            others[rng.random_range(0..others.len())]
        } else {
            obj.shape
        };
        tags.push(tag);
    }
    (regions, tags)
}
