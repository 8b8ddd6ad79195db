use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    encode_ppm, split_dataset, write_labels, ClassCatalog, DatasetLayout, LabelRecord, RgbImage, Split, SplitManifest,
};
use crate::error::{cfg_err, Result};
use crate::eval::BBox;

const BACKGROUND: [u8; 3] = [24, 24, 24];

/// One colour per class, cycled for catalogs larger than four.
const PALETTE: [[u8; 3]; 4] = [[220, 40, 40], [40, 200, 60], [50, 80, 230], [235, 210, 40]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Allow shapes to overlap.
    pub occlusion: bool,
    pub catalog: ClassCatalog,
}

impl SynthConfig {
    pub fn new(num_images: usize, image_size: usize, seed: u64) -> Self {
        SynthConfig {
            num_images,
            image_size,
            seed,
            min_shapes: 1,
            max_shapes: 6,
            occlusion: false,
            catalog: ClassCatalog::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(cfg_err!(
                "image size must be a positive multiple of 32, got {}",
                self.image_size
            ));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(cfg_err!("need 1 <= min_shapes <= max_shapes"));
        }
        if self.catalog.is_empty() || self.catalog.counts.len() != self.catalog.len() {
            return Err(cfg_err!("class catalog needs one count per class"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Rect { w: usize, h: usize },
    Disc { d: usize },
}

impl Glyph {
    fn extent(&self) -> (usize, usize) {
        match *self {
            Glyph::Rect { w, h } => (w, h),
            Glyph::Disc { d } => (d, d),
        }
    }

    fn covers(&self, dx: usize, dy: usize) -> bool {
        match *self {
            Glyph::Rect { .. } => true,
            Glyph::Disc { d } => {
                let r = d as f64 / 2.0;
                let (px, py) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
                px * px + py * py <= r * r
            }
        }
    }
}

/// Even size in `[lo, hi]` (base units at 64 px), scaled to the image.
fn even(rng: &mut impl Rng, lo: usize, hi: usize, scale: usize) -> usize {
    2 * rng.random_range(lo / 2..=hi / 2) * scale
}

/// Class signatures: Badge a small square, Offground a tall bar, Ground a
/// disc, Safebelt a wide bar. Sizes are even so box centres land on whole
/// pixels.
fn glyph(class_id: usize, rng: &mut impl Rng, scale: usize) -> Glyph {
    match class_id % 4 {
        0 => {
            let s = even(rng, 8, 12, scale);
            Glyph::Rect { w: s, h: s }
        }
        1 => Glyph::Rect {
            w: even(rng, 8, 12, scale),
            h: even(rng, 18, 28, scale),
        },
        2 => Glyph::Disc {
            d: even(rng, 12, 20, scale),
        },
        _ => Glyph::Rect {
            w: even(rng, 18, 28, scale),
            h: even(rng, 8, 10, scale),
        },
    }
}

/// Image `index` of the dataset. Each item draws from its own ChaCha stream
/// so items can be generated in any order.
pub fn synth_image(cfg: &SynthConfig, index: usize) -> Result<(RgbImage, Vec<LabelRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let scale = (size / 64).max(1);
    let classes = WeightedIndex::new(&cfg.catalog.counts).map_err(|e| cfg_err!("class weights: {e}"))?;
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut img = RgbImage::filled(size, size, BACKGROUND);
    let mut placed: Vec<(usize, BBox)> = Vec::new();
    let mut records = Vec::new();
    for _ in 0..count {
        let class_id = classes.sample(&mut rng);
        let g = glyph(class_id, &mut rng, scale);
        let (w, h) = g.extent();
        if w > size || h > size {
            continue;
        }
        let mut spot = None;
        for _ in 0..200 {
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            let b = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            let clear = cfg.occlusion
                || placed.iter().all(|(_, o)| {
                    // One pixel of background between shapes.
                    b.x2 + 1.0 <= o.x1 || o.x2 + 1.0 <= b.x1 || b.y2 + 1.0 <= o.y1 || o.y2 + 1.0 <= b.y1
                });
            if clear {
                spot = Some((x0, y0, b));
                break;
            }
        }
        let Some((x0, y0, b)) = spot else { continue };
        let colour = PALETTE[class_id % PALETTE.len()];
        let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..h {
            for dx in 0..w {
                if g.covers(dx, dy) {
                    img.put(x0 + dx, y0 + dy, colour);
                    lo_x = lo_x.min(x0 + dx);
                    lo_y = lo_y.min(y0 + dy);
                    hi_x = hi_x.max(x0 + dx + 1);
                    hi_y = hi_y.max(y0 + dy + 1);
                }
            }
        }
        let raster = BBox::new(lo_x as f64, lo_y as f64, hi_x as f64, hi_y as f64);
        records.push(LabelRecord::from_box(class_id, &raster, size, size));
        placed.push((class_id, b));
    }
    Ok((img, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: usize,
    pub instances_per_class: Vec<usize>,
    pub split_sizes: [usize; 3],
}

/// Writes `images/`, `labels/` and `split.json` under `out`. The config is
/// validated before anything touches the disk.
pub fn gen_synthetic(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    if cfg.num_images < 10 {
        return Err(cfg_err!(
            "need at least 10 images for a 7:1:2 split, got {}",
            cfg.num_images
        ));
    }
    let layout = DatasetLayout::new(out);
    std::fs::create_dir_all(layout.images_dir())?;
    std::fs::create_dir_all(layout.labels_dir())?;
    let mut per_class = vec![0usize; cfg.catalog.len()];
    let mut items = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let stem = format!("img_{i:05}");
        let (img, labels) = synth_image(cfg, i)?;
        for r in &labels {
            per_class[r.class_id] += 1;
        }
        std::fs::write(layout.image(&stem), encode_ppm(&img))?;
        std::fs::write(layout.label(&stem), write_labels(&labels))?;
        items.push((stem.clone(), stem));
    }
    let index = split_dataset(&items, [7, 1, 2], cfg.seed)?;
    let stems = |s: Split| index.of(s).iter().map(|i| i.image.clone()).collect::<Vec<_>>();
    let manifest = SplitManifest {
        seed: cfg.seed,
        ratios: index.ratios,
        image_size: cfg.image_size,
        classes: cfg.catalog.names.clone(),
        train: stems(Split::Train),
        val: stems(Split::Val),
        test: stems(Split::Test),
    };
    std::fs::write(layout.manifest(), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(SynthSummary {
        images: cfg.num_images,
        instances_per_class: per_class,
        split_sizes: index.sizes(),
    })
}
