//! Synthetic scene generation with dense ground-truth depth, plus dataset
//! persistence.
//!
//! Scenes are a textured ground plane receding to a horizon with a handful of
//! colored billboards at random depths, z-buffered so the nearest surface
//! wins. Two distributions exist for cross-data experiments: "A" uses flat
//! colors on a gray background, "B" striped textures on a gradient
//! background.

use crate::error::{DfaError, Result};
use crate::types::{DepthMap, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCENE_D_NEAR: f32 = 2.0;
pub const SCENE_D_FAR: f32 = 60.0;

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub images: Vec<ImageTensor>,
    pub depths: Vec<DepthMap>,
    pub distribution_id: String,
    pub seed: u64,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub distribution_id: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Generates `count` scenes for distribution "A" or "B". Scene `i` depends
/// only on `(distribution_id, seed, i)`, so regeneration is exact.
pub fn generate_scenes(
    distribution_id: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SceneDataset> {
    if count == 0 {
        return Err(DfaError::InvalidArgument("scene count must be >= 1".into()));
    }
    if height < 8 || width < 8 {
        return Err(DfaError::InvalidArgument(format!(
            "scene shape {height}x{width} too small (min 8x8)"
        )));
    }
    let striped = match distribution_id {
        "A" => false,
        "B" => true,
        other => {
            return Err(DfaError::InvalidArgument(format!(
                "unknown distribution {other:?} (expected A or B)"
            )))
        }
    };

    let mut images = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = scene_rng(seed, i);
        let (img, depth) = render_scene(height, width, striped, &mut rng)?;
        images.push(img);
        depths.push(depth);
    }
    Ok(SceneDataset {
        images,
        depths,
        distribution_id: distribution_id.to_string(),
        seed,
    })
}

#[derive(Clone, Copy, Debug)]
struct Billboard {
    depth: f32,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    c1: [f32; 3],
    c2: [f32; 3],
}

struct SceneLayout {
    striped: bool,
    bg_top: [f32; 3],
    bg_bottom: [f32; 3],
    ground_a: [f32; 3],
    ground_b: [f32; 3],
    boards: Vec<Billboard>,
}

fn rasterize(height: usize, width: usize, layout: &SceneLayout) -> (Vec<f32>, Vec<f32>) {
    let hw = height * width;
    let mut rgb = vec![0.0f32; 3 * hw];
    let mut depth = vec![0.0f32; hw];
    let horizon = ((height as f32 * 0.35).round() as usize).clamp(1, height - 2);

    for y in 0..height {
        let t = y as f32 / (height - 1) as f32;
        for x in 0..width {
            let (color, d) = if y < horizon {
                let mut c = [0.0f32; 3];
                for ch in 0..3 {
                    c[ch] = layout.bg_top[ch] + (layout.bg_bottom[ch] - layout.bg_top[ch]) * t;
                }
                (c, SCENE_D_FAR)
            } else {
                let g = (y - horizon) as f32 / (height - 1 - horizon) as f32;
                let d = SCENE_D_FAR + (SCENE_D_NEAR - SCENE_D_FAR) * g;
                let cell = if layout.striped {
                    (y / 4) % 2
                } else {
                    ((x / 8) + (y / 8)) % 2
                };
                let c = if cell == 0 { layout.ground_a } else { layout.ground_b };
                (c, d)
            };
            for ch in 0..3 {
                rgb[ch * hw + y * width + x] = color[ch];
            }
            depth[y * width + x] = d;
        }
    }

    // z-buffer: the nearest surface is visible.
    for board in &layout.boards {
        for y in board.y0..board.y0 + board.h {
            for x in board.x0..board.x0 + board.w {
                let idx = y * width + x;
                if board.depth < depth[idx] {
                    depth[idx] = board.depth;
                    let color = if layout.striped && (x / 3) % 2 == 1 {
                        board.c2
                    } else {
                        board.c1
                    };
                    for ch in 0..3 {
                        rgb[ch * hw + idx] = color[ch];
                    }
                }
            }
        }
    }
    (rgb, depth)
}

fn render_scene(
    height: usize,
    width: usize,
    striped: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, DepthMap)> {
    let mut rand_color = |lo: f32, hi: f32| -> [f32; 3] {
        [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
    };
    let (bg_top, bg_bottom, ground_a, ground_b) = if striped {
        (
            rand_color(0.2, 0.8),
            rand_color(0.2, 0.8),
            rand_color(0.1, 0.9),
            rand_color(0.1, 0.9),
        )
    } else {
        let g = rng.gen_range(0.35..0.65);
        let ga = rng.gen_range(0.2..0.4);
        let gb = rng.gen_range(0.55..0.8);
        ([g, g, g], [g, g, g], [ga, ga, ga], [gb, gb, gb])
    };

    let n_boards = rng.gen_range(3..=8);
    let mut boards = Vec::with_capacity(n_boards);
    for _ in 0..n_boards {
        let depth = rng.gen_range(2.0..50.0);
        let w = rng.gen_range(width / 8..=width / 3).max(2);
        let h = rng.gen_range(height / 6..=height / 3).max(2);
        let x0 = rng.gen_range(0..=width - w);
        let y0 = rng.gen_range(0..=height - h);
        let c1 = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let c2 = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        boards.push(Billboard {
            depth,
            x0,
            y0,
            w,
            h,
            c1,
            c2,
        });
    }

    let layout = SceneLayout {
        striped,
        bg_top,
        bg_bottom,
        ground_a,
        ground_b,
        boards,
    };
    let (rgb, depth) = rasterize(height, width, &layout);
    let image = ImageTensor::new(height, width, rgb)?;
    let depth = DepthMap::full_valid(height, width, depth, SCENE_D_NEAR, SCENE_D_FAR)?;
    Ok((image, depth))
}

/// Writes the dataset manifest. The manifest is the source of truth: loading
/// regenerates the scenes bit-exactly.
pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        schema_version: 1,
        distribution_id: dataset.distribution_id.clone(),
        count: dataset.len(),
        height: dataset.height(),
        width: dataset.width(),
        seed: dataset.seed,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| DfaError::Format(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DfaError::Format(format!("bad dataset manifest: {e}")))?;
    if manifest.schema_version != 1 {
        return Err(DfaError::Format(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    generate_scenes(
        &manifest.distribution_id,
        manifest.count,
        manifest.height,
        manifest.width,
        manifest.seed,
    )
}
