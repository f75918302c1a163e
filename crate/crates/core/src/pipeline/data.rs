//! Synthetic shape scenes and the on-disk dataset format.
//!
//! A split directory holds `annotations.json` and an `images/` folder of
//! 8-bit RGB PNG files:
//!
//! ```text
//! {
//!   "classes": ["circle", "square", "triangle"],
//!   "images": [
//!     { "file_name": "000000.png", "width": 256, "height": 256,
//!       "objects": [ { "x1": 10.0, "y1": 12.5, "x2": 60.0, "y2": 62.5, "class_id": 1 } ] }
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{fill_shape, Image, Shape};
use crate::boxes::{iou, BBox, GroundTruth};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub gts: Vec<GroundTruth>,
    pub seed: u64,
}

impl Scene {
    pub fn flip_horizontal(&self) -> Scene {
        let w = self.image.width as f32;
        Scene {
            image: self.image.flip_horizontal(),
            gts: self
                .gts
                .iter()
                .map(|g| GroundTruth {
                    bbox: g.bbox.flip_horizontal(w),
                    class_id: g.class_id,
                })
                .collect(),
            seed: self.seed,
        }
    }
}

const PLACEMENT_TRIES: usize = 50;

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// One scene from `seed`. Shapes are square-boxed with log-uniform sides;
/// a placement overlapping an earlier box above `max_pair_iou` is retried
/// and the shape dropped after a bounded number of attempts.
pub fn generate_scene(seed: u64, cfg: &TrainConfig) -> Result<Scene> {
    if cfg.num_classes > Shape::ALL.len() {
        return Err(Error::Dataset(format!(
            "the generator draws at most {} classes, config asks for {}",
            Shape::ALL.len(),
            cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let side = s as f64;
    let background = [0.0; 3].map(|_: f32| rng.random_range(0.25f32..0.75));
    let mut image = Image::filled(s, s, background);
    let noise = Normal::new(0.0f32, cfg.noise_std as f32).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    for v in &mut image.data {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let lo = cfg.min_object_size.ln();
    let hi = (cfg.max_object_frac * side).max(cfg.min_object_size).ln();
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let size = rng.random_range(lo..=hi).exp().min(side);
            let x = rng.random_range(0.0..=side - size) as f32;
            let y = rng.random_range(0.0..=side - size) as f32;
            let bbox = BBox::new(x, y, x + size as f32, y + size as f32);
            if gts.iter().any(|g| iou(&g.bbox, &bbox) as f64 > cfg.max_pair_iou) {
                continue;
            }
            let class_id = rng.random_range(0..cfg.num_classes);
            let mut color = random_color(&mut rng);
            while color_distance(color, background) < 0.6 {
                color = random_color(&mut rng);
            }
            fill_shape(&mut image, Shape::ALL[class_id], &bbox, color, 4);
            gts.push(GroundTruth { bbox, class_id });
            break;
        }
    }
    image.quantize();
    Ok(Scene { image, gts, seed })
}

/// Scene seeds of a split: train and eval never share one.
pub fn scene_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Eval => 0x6576_616c_0000_0000u64,
    };
    base_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag ^ index as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

pub fn generate_split(cfg: &TrainConfig, split: Split) -> Result<Vec<Scene>> {
    let n = match split {
        Split::Train => cfg.train_scenes,
        Split::Eval => cfg.eval_scenes,
    };
    par::map(n, |i| generate_scene(scene_seed(cfg.seed, split, i), cfg))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// Writes scenes as a split directory.
pub fn write_split(dir: &Path, scenes: &[Scene], num_classes: usize) -> Result<()> {
    let images_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let file_name = format!("{i:06}.png");
        scene.image.save_png(&images_dir.join(&file_name))?;
        records.push(ImageRecord {
            file_name,
            width: scene.image.width,
            height: scene.image.height,
            objects: scene
                .gts
                .iter()
                .map(|g| ObjectRecord {
                    x1: g.bbox.x1,
                    y1: g.bbox.y1,
                    x2: g.bbox.x2,
                    y2: g.bbox.y2,
                    class_id: g.class_id,
                })
                .collect(),
        });
    }
    let ann = Annotations {
        classes: Shape::ALL[..num_classes].iter().map(|s| s.name().to_string()).collect(),
        images: records,
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&ann).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a split directory. Boxes must lie inside their image and class ids
/// must be below `num_classes`.
pub fn read_split(dir: &Path, num_classes: usize) -> Result<Vec<Scene>> {
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ann: Annotations =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let load = |i: usize| -> Result<Scene> {
        let rec = &ann.images[i];
        let img_path: PathBuf = dir.join(IMAGE_DIR).join(&rec.file_name);
        let image = Image::load(&img_path)?;
        if image.width != rec.width || image.height != rec.height {
            return Err(Error::Dataset(format!(
                "{}: annotated {}x{}, file is {}x{}",
                rec.file_name, rec.width, rec.height, image.width, image.height
            )));
        }
        let mut gts = Vec::with_capacity(rec.objects.len());
        for o in &rec.objects {
            let bbox = BBox::new(o.x1, o.y1, o.x2, o.y2);
            let inside = bbox.x1 >= 0.0 && bbox.y1 >= 0.0 && bbox.x2 <= rec.width as f32 && bbox.y2 <= rec.height as f32;
            if !bbox.is_valid() || !inside || o.class_id >= num_classes {
                return Err(Error::Dataset(format!("{}: bad object {o:?}", rec.file_name)));
            }
            gts.push(GroundTruth {
                bbox,
                class_id: o.class_id,
            });
        }
        Ok(Scene {
            image,
            gts,
            seed: i as u64,
        })
    };
    par::map(ann.images.len(), load).into_iter().collect()
}
