//! Dataset handling: SECOND-layout directories (`im1/ im2/ label1/
//! label2/`), class vocabularies, binary change-mask derivation, and a
//! deterministic synthetic generator for desk-scale training.
//!
//! Label maps are single-channel 8-bit indexed PNGs where the pixel value
//! is the class index and 0 marks unchanged ground. Change masks are
//! derived as the disjunction of the two nonzero-label maps.

use crate::error::DataError;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

const SUBDIRS: [&str; 4] = ["im1", "im2", "label1", "label2"];

/// Fixed color table used both by the synthetic generator and by overlay
/// rendering; index 0 (no change) is black.
const BASE_PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [66, 135, 245],
    [168, 124, 80],
    [96, 216, 96],
    [22, 128, 57],
    [214, 72, 72],
    [226, 169, 41],
    [153, 102, 255],
    [64, 224, 208],
    [255, 105, 180],
    [250, 240, 80],
    [140, 140, 140],
];

pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes)
        .map(|i| {
            if i == 0 {
                BASE_PALETTE[0]
            } else {
                BASE_PALETTE[1 + (i - 1) % (BASE_PALETTE.len() - 1)]
            }
        })
        .collect()
}

/// Ordered class names; index 0 is always the no-change sentinel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
    palette: Vec<[u8; 3]>,
}

impl ClassVocabulary {
    pub const NO_CHANGE: usize = 0;

    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        let names: Vec<String> = names
            .iter()
            .map(|n| n.trim().to_lowercase())
            .collect();
        if names.len() < 2 {
            return Err(DataError::InvalidVocabulary(
                "need at least the no-change class and one change class".into(),
            ));
        }
        if names[0] != "no change" {
            return Err(DataError::InvalidVocabulary(format!(
                "index 0 must be the \"no change\" sentinel, found {:?}",
                names[0]
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(DataError::InvalidVocabulary("empty class name".into()));
            }
            if !seen.insert(n.clone()) {
                return Err(DataError::InvalidVocabulary(format!(
                    "duplicate class name {n:?}"
                )));
            }
        }
        let palette = default_palette(names.len());
        Ok(ClassVocabulary { names, palette })
    }

    /// The six-category toy vocabulary used by the synthetic datasets.
    pub fn toy() -> Self {
        ClassVocabulary::new(
            [
                "no change",
                "water",
                "ground",
                "low vegetation",
                "tree",
                "building",
                "playground",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .expect("builtin vocabulary is valid")
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.palette[class]
    }

    /// Reads either a bare JSON list of names or an object with `names`
    /// and an optional `palette`.
    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        if let Ok(names) = serde_json::from_str::<Vec<String>>(text) {
            return ClassVocabulary::new(names);
        }
        #[derive(Deserialize)]
        struct Obj {
            names: Vec<String>,
            palette: Option<Vec<[u8; 3]>>,
        }
        let obj: Obj = serde_json::from_str(text)
            .map_err(|e| DataError::InvalidVocabulary(format!("unparseable vocabulary: {e}")))?;
        let mut v = ClassVocabulary::new(obj.names)?;
        if let Some(p) = obj.palette {
            if p.len() != v.names.len() {
                return Err(DataError::InvalidVocabulary(
                    "palette length must match class count".into(),
                ));
            }
            v.palette = p;
        }
        Ok(v)
    }

    pub fn write_json_file(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A validated listing of one SECOND-layout directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub vocabulary: ClassVocabulary,
    pub sample_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn write_json_file(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    fn paths(&self, id: &str) -> [PathBuf; 4] {
        SUBDIRS.map(|d| self.root.join(d).join(format!("{id}.png")))
    }
}

/// One loaded bi-temporal pair with derived change mask.
#[derive(Clone, Debug)]
pub struct BiTemporalSample {
    pub id: String,
    /// `[H, W, 3]`, scaled to `[0, 1]`.
    pub image_pre: Array3<f64>,
    pub image_post: Array3<f64>,
    /// `[H, W]` class indices, 0 = no change.
    pub label_pre: Array2<u8>,
    pub label_post: Array2<u8>,
    /// `[H, W]`, 1 where either label map is nonzero.
    pub change_mask: Array2<u8>,
    /// Pixels where exactly one of the two label maps is nonzero.
    pub label_disagreements: usize,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.label_pre.nrows()
    }

    pub fn width(&self) -> usize {
        self.label_pre.ncols()
    }
}

/// Result of scanning a dataset directory: the usable manifest plus ids
/// that were present in some subdirectories but not all four.
#[derive(Clone, Debug)]
pub struct DirectoryScan {
    pub manifest: DatasetManifest,
    pub incomplete: Vec<String>,
}

/// Scan `root/{im1,im2,label1,label2}` and build a manifest of every id
/// present in all four subdirectories. Label files are decoded up front so
/// out-of-range class indices are reported at scan time.
pub fn load_second_directory(
    root: &Path,
    vocabulary: &ClassVocabulary,
    split: Split,
) -> Result<DirectoryScan, DataError> {
    let mut stems: Vec<BTreeSet<String>> = Vec::with_capacity(4);
    for sub in SUBDIRS {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(DataError::MissingDirectory(dir));
        }
        let mut set = BTreeSet::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    set.insert(stem.to_string());
                }
            }
        }
        stems.push(set);
    }

    let complete: BTreeSet<String> = stems[0]
        .iter()
        .filter(|id| stems[1..].iter().all(|s| s.contains(*id)))
        .cloned()
        .collect();
    let all: BTreeSet<String> = stems.iter().flatten().cloned().collect();
    let incomplete: Vec<String> = all.difference(&complete).cloned().collect();

    if complete.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }

    let classes = vocabulary.class_count();
    for id in &complete {
        for sub in ["label1", "label2"] {
            let file = root.join(sub).join(format!("{id}.png"));
            let label = read_label_png(&file)?;
            if let Some(&v) = label.iter().find(|&&v| v as usize >= classes) {
                return Err(DataError::LabelOutOfRange {
                    file,
                    value: v,
                    classes,
                });
            }
        }
    }

    Ok(DirectoryScan {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            split,
            vocabulary: vocabulary.clone(),
            sample_ids: complete.into_iter().collect(),
        },
        incomplete,
    })
}

/// Load one sample by id, checking spatial agreement and label range, and
/// deriving the binary change mask.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<BiTemporalSample, DataError> {
    if !manifest.sample_ids.iter().any(|s| s == id) {
        return Err(DataError::UnknownSample(id.to_string()));
    }
    let [p_im1, p_im2, p_l1, p_l2] = manifest.paths(id);
    let image_pre = read_rgb_png(&p_im1)?;
    let image_post = read_rgb_png(&p_im2)?;
    let label_pre = read_label_png(&p_l1)?;
    let label_post = read_label_png(&p_l2)?;

    let dims = label_pre.dim();
    let img_dims = (image_pre.dim().0, image_pre.dim().1);
    if label_post.dim() != dims || img_dims != dims || (image_post.dim().0, image_post.dim().1) != dims
    {
        return Err(DataError::ShapeMismatch {
            id: id.to_string(),
            detail: format!(
                "im1 {:?} im2 {:?} label1 {:?} label2 {:?}",
                (image_pre.dim().0, image_pre.dim().1),
                (image_post.dim().0, image_post.dim().1),
                label_pre.dim(),
                label_post.dim()
            ),
        });
    }

    let classes = manifest.vocabulary.class_count();
    for (arr, sub) in [(&label_pre, "label1"), (&label_post, "label2")] {
        if let Some(&v) = arr.iter().find(|&&v| v as usize >= classes) {
            return Err(DataError::LabelOutOfRange {
                file: manifest.root.join(sub).join(format!("{id}.png")),
                value: v,
                classes,
            });
        }
    }

    let change_mask = derive_change_mask(&label_pre, &label_post)?;
    let label_disagreements = count_changedness_disagreements(&label_pre, &label_post);

    Ok(BiTemporalSample {
        id: id.to_string(),
        image_pre: image_pre.mapv(|v| v as f64 / 255.0),
        image_post: image_post.mapv(|v| v as f64 / 255.0),
        label_pre,
        label_post,
        change_mask,
        label_disagreements,
    })
}

/// `mask[p] = 1` iff either label map is nonzero at `p`.
pub fn derive_change_mask(
    label_pre: &Array2<u8>,
    label_post: &Array2<u8>,
) -> Result<Array2<u8>, DataError> {
    if label_pre.dim() != label_post.dim() {
        return Err(DataError::ShapeMismatch {
            id: String::new(),
            detail: format!("{:?} vs {:?}", label_pre.dim(), label_post.dim()),
        });
    }
    let mut mask = Array2::<u8>::zeros(label_pre.dim());
    ndarray::Zip::from(&mut mask)
        .and(label_pre)
        .and(label_post)
        .for_each(|m, &a, &b| *m = u8::from(a != 0 || b != 0));
    Ok(mask)
}

/// Pixels where the two maps disagree about changed-ness (exactly one of
/// them is nonzero). Such pixels are still marked changed.
pub fn count_changedness_disagreements(label_pre: &Array2<u8>, label_post: &Array2<u8>) -> usize {
    label_pre
        .iter()
        .zip(label_post.iter())
        .filter(|(&a, &b)| (a != 0) != (b != 0))
        .count()
}

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub vocabulary: ClassVocabulary,
    pub seed: u64,
}

/// Write a SECOND-layout toy dataset: colored axis-aligned rectangles that
/// appear, disappear, or change class between the two epochs, plus
/// occasional rectangles that persist unchanged (labelled no-change in
/// both maps). Rectangle fill color encodes the class. Identical
/// spec+seed reproduces byte-identical files.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out: &Path,
) -> Result<DatasetManifest, DataError> {
    let c = spec.vocabulary.class_count();
    if c < 3 {
        return Err(DataError::InvalidSpec(
            "synthetic vocabulary needs at least two change classes".into(),
        ));
    }
    if spec.n_samples == 0 {
        return Err(DataError::InvalidSpec("n_samples must be positive".into()));
    }
    // Decoder pyramids reach stride 32; keep every level an exact division.
    if spec.height % 32 != 0 || spec.width % 32 != 0 || spec.height < 32 || spec.width < 32 {
        return Err(DataError::InvalidSpec(format!(
            "image dims must be positive multiples of 32, got {}x{}",
            spec.height, spec.width
        )));
    }

    for sub in SUBDIRS {
        fs::create_dir_all(out.join(sub))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let background = 38u8;
    let mut change_kind = 0usize;
    let mut class_cursor = 0usize;

    for i in 0..spec.n_samples {
        let id = format!("toy_{i:04}");
        let mut im1 = Array3::<u8>::from_elem((h, w, 3), background);
        let mut im2 = im1.clone();
        let mut l1 = Array2::<u8>::zeros((h, w));
        let mut l2 = Array2::<u8>::zeros((h, w));

        let n_static = rng.gen_range(0..=2usize);
        let n_changed = rng.gen_range(1..=3usize);

        for _ in 0..n_static {
            let rect = sample_rect(&mut rng, h, w);
            let class = next_class(&mut class_cursor, c);
            let color = spec.vocabulary.color(class);
            paint(&mut im1, None, &rect, color, 0);
            paint(&mut im2, None, &rect, color, 0);
        }
        for _ in 0..n_changed {
            let rect = sample_rect(&mut rng, h, w);
            let class = next_class(&mut class_cursor, c);
            let kind = change_kind % 3;
            change_kind += 1;
            match kind {
                0 => {
                    // appears in epoch 2
                    paint(&mut im2, Some(&mut l2), &rect, spec.vocabulary.color(class), class as u8);
                }
                1 => {
                    // disappears after epoch 1
                    paint(&mut im1, Some(&mut l1), &rect, spec.vocabulary.color(class), class as u8);
                }
                _ => {
                    let other = 1 + (class % (c - 1));
                    paint(&mut im1, Some(&mut l1), &rect, spec.vocabulary.color(class), class as u8);
                    paint(&mut im2, Some(&mut l2), &rect, spec.vocabulary.color(other), other as u8);
                }
            }
        }

        write_rgb_png(&out.join("im1").join(format!("{id}.png")), &im1)?;
        write_rgb_png(&out.join("im2").join(format!("{id}.png")), &im2)?;
        write_label_png(&out.join("label1").join(format!("{id}.png")), &l1)?;
        write_label_png(&out.join("label2").join(format!("{id}.png")), &l2)?;
    }

    spec.vocabulary
        .write_json_file(&out.join("vocabulary.json"))?;
    let scan = load_second_directory(out, &spec.vocabulary, Split::Train)?;
    debug_assert_eq!(scan.manifest.len(), spec.n_samples);
    scan.manifest.write_json_file(&out.join("manifest.json"))?;
    Ok(scan.manifest)
}

#[derive(Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

/// Rectangles snap to a 4-pixel grid so edges align with the coarsest
/// decoder stride.
fn sample_rect(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rect {
    let rh = 4 * rng.gen_range(3..=(h / 8).max(3));
    let rw = 4 * rng.gen_range(3..=(w / 8).max(3));
    let rh = rh.min(h - 4);
    let rw = rw.min(w - 4);
    let y0 = 4 * rng.gen_range(0..=(h - rh) / 4);
    let x0 = 4 * rng.gen_range(0..=(w - rw) / 4);
    Rect { y0, x0, h: rh, w: rw }
}

fn next_class(cursor: &mut usize, classes: usize) -> usize {
    let class = 1 + (*cursor % (classes - 1));
    *cursor += 1;
    class
}

fn paint(
    image: &mut Array3<u8>,
    label: Option<&mut Array2<u8>>,
    rect: &Rect,
    color: [u8; 3],
    class: u8,
) {
    for y in rect.y0..rect.y0 + rect.h {
        for x in rect.x0..rect.x0 + rect.w {
            for c in 0..3 {
                image[(y, x, c)] = color[c];
            }
        }
    }
    if let Some(label) = label {
        for y in rect.y0..rect.y0 + rect.h {
            for x in rect.x0..rect.x0 + rect.w {
                label[(y, x)] = class;
            }
        }
    }
}

// ---- PNG io ----

fn read_rgb_png(path: &Path) -> Result<Array3<u8>, DataError> {
    let img = image::open(path).map_err(|e| DataError::DecodeError {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c],
    ))
}

fn read_label_png(path: &Path) -> Result<Array2<u8>, DataError> {
    let img = image::open(path).map_err(|e| DataError::DecodeError {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(DataError::DecodeError {
                file: path.to_path_buf(),
                reason: format!(
                    "label maps must be 8-bit single-channel PNG, found {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0]
    }))
}

pub(crate) fn write_rgb_png(path: &Path, data: &Array3<u8>) -> Result<(), DataError> {
    let (h, w, _) = data.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([data[(y, x, 0)], data[(y, x, 1)], data[(y, x, 2)]]),
            );
        }
    }
    img.save(path).map_err(|e| DataError::DecodeError {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn write_label_png(path: &Path, data: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = data.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([data[(y, x)]]));
        }
    }
    img.save(path).map_err(|e| DataError::DecodeError {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}
