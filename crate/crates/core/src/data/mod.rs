//! Dataset plumbing: YOLO-txt labels, seeded 7:1:2 splitting, binary PPM
//! images and a synthetic shape-detection dataset.

mod ppm;
mod split;
mod synth;

use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BBox, GroundTruth};

pub use ppm::{decode_ppm, encode_ppm, load_ppm, RgbImage};
pub use split::{apportion, split_dataset, DatasetIndex, DatasetItem, Split, SplitManifest};
pub use synth::{gen_synthetic, synth_image, SynthConfig, SynthSummary};

/// Class names and their target instance counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub names: Vec<String>,
    pub counts: Vec<u64>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        ClassCatalog {
            names: ["Badge", "Offground", "Ground", "Safebelt"].map(String::from).to_vec(),
            counts: vec![673, 2477, 2257, 1747],
        }
    }
}

impl ClassCatalog {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One `class cx cy w h` label line, coordinates normalised to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    pub fn to_box(&self, width: usize, height: usize) -> BBox {
        let (iw, ih) = (width as f64, height as f64);
        BBox::from_center(self.cx * iw, self.cy * ih, self.w * iw, self.h * ih).clip(iw, ih)
    }

    pub fn from_box(class_id: usize, b: &BBox, width: usize, height: usize) -> Self {
        let (iw, ih) = (width as f64, height as f64);
        let (cx, cy) = b.center();
        LabelRecord {
            class_id,
            cx: cx / iw,
            cy: cy / ih,
            w: b.width() / iw,
            h: b.height() / ih,
        }
    }
}

/// Parses YOLO-txt label text. Blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, (name, raw)) in v.iter_mut().zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..])) {
            let x: f64 = raw
                .parse()
                .map_err(|_| err(format!("{name} {raw:?} is not a number")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(err(format!("{name} {x} outside [0, 1]")));
            }
            *slot = x;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        out.push(LabelRecord {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        });
    }
    Ok(out)
}

/// Serialises records, one `class cx cy w h` line each, six decimals.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", r.class_id, r.cx, r.cy, r.w, r.h);
    }
    s
}

/// Paths of the on-disk layout: `images/*.ppm`, `labels/*.txt`, `split.json`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn image(&self, stem: &str) -> PathBuf {
        self.images_dir().join(format!("{stem}.ppm"))
    }

    pub fn label(&self, stem: &str) -> PathBuf {
        self.labels_dir().join(format!("{stem}.txt"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn load_manifest(&self) -> Result<SplitManifest> {
        let path = self.manifest();
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Usage(format!("cannot read split manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_labels(&self, stem: &str) -> Result<Vec<LabelRecord>> {
        parse_labels(&std::fs::read_to_string(self.label(stem))?)
    }

    pub fn load_image(&self, stem: &str) -> Result<RgbImage> {
        decode_ppm(&std::fs::read(self.image(stem))?)
    }
}

/// A decoded sample: image plus its ground truth in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: RgbImage,
    pub labels: Vec<LabelRecord>,
}

impl Sample {
    pub fn ground_truth(&self, image_id: usize) -> Vec<GroundTruth> {
        self.labels
            .iter()
            .map(|r| GroundTruth {
                bbox: r.to_box(self.image.width, self.image.height),
                class_id: r.class_id,
                image_id,
            })
            .collect()
    }
}

/// Loads every sample of one split.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let layout = DatasetLayout::new(root);
    let manifest = layout.load_manifest()?;
    manifest
        .stems(split)
        .iter()
        .map(|stem| {
            Ok(Sample {
                stem: stem.clone(),
                image: layout.load_image(stem)?,
                labels: layout.load_labels(stem)?,
            })
        })
        .collect()
}
