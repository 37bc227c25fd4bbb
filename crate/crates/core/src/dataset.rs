//! Dataset ingestion (Herlev trees and manifest trees), the synthetic cell
//! generator, stratified fold planning, and training-time augmentation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_image, write_png, BinaryMask, RasterImage};
use crate::stream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    Normal,
    Abnormal,
}

impl BinaryLabel {
    /// Column in the one-hot encoding: Normal = 0, Abnormal = 1.
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Abnormal => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(BinaryLabel::Normal),
            1 => Some(BinaryLabel::Abnormal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Normal => "Normal",
            BinaryLabel::Abnormal => "Abnormal",
        }
    }
}

/// The seven Herlev class folders and their binary grouping.
pub const HERLEV_CLASSES: [(&str, BinaryLabel); 7] = [
    ("normal_superficiel", BinaryLabel::Normal),
    ("normal_intermediate", BinaryLabel::Normal),
    ("normal_columnar", BinaryLabel::Normal),
    ("light_dysplastic", BinaryLabel::Abnormal),
    ("moderate_dysplastic", BinaryLabel::Abnormal),
    ("severe_dysplastic", BinaryLabel::Abnormal),
    ("carcinoma_in_situ", BinaryLabel::Abnormal),
];

pub const HERLEV_EXPECTED: (usize, usize) = (242, 675);

pub const SYNTHETIC_CLASS: &str = "synthetic";

pub fn herlev_label(origin_class: &str) -> Option<BinaryLabel> {
    HERLEV_CLASSES
        .iter()
        .find(|(name, _)| *name == origin_class)
        .map(|&(_, label)| label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: RasterImage,
    pub binary_label: BinaryLabel,
    pub origin_class: String,
    pub truth_mask: Option<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub relative_path: String,
    pub origin_class: String,
    pub binary_label: BinaryLabel,
    pub has_truth_mask: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub total: usize,
    pub normal: usize,
    pub abnormal: usize,
    pub per_origin_class: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub counts: ManifestCounts,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let mut counts = ManifestCounts {
            total: entries.len(),
            ..Default::default()
        };
        for e in &entries {
            match e.binary_label {
                BinaryLabel::Normal => counts.normal += 1,
                BinaryLabel::Abnormal => counts.abnormal += 1,
            }
            *counts.per_origin_class.entry(e.origin_class.clone()).or_default() += 1;
        }
        Self {
            entries,
            counts,
            warnings: Vec::new(),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} samples ({} Normal / {} Abnormal)",
            self.counts.total, self.counts.normal, self.counts.abnormal
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["bmp", "png", "jpg", "jpeg"];

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Sibling file `<stem>-d.<ext>` holding the annotation for `image_path`.
pub fn mask_companion(image_path: &Path) -> Option<PathBuf> {
    let stem = image_path.file_stem()?.to_str()?;
    let dir = image_path.parent()?;
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            has_image_extension(p)
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.eq_ignore_ascii_case(&format!("{stem}-d")))
        })
        .collect();
    candidates.sort();
    candidates.into_iter().next()
}

/// Converts a Herlev annotation image into a cell-vs-background mask. The
/// background colour is the most frequent colour on the image border; every
/// other colour (nucleus, cytoplasm) counts as cell.
pub fn annotation_to_mask(annotation: &RasterImage) -> BinaryMask {
    let (w, h, ch) = (annotation.width(), annotation.height(), annotation.channels());
    let color = |x: usize, y: usize| -> [u8; 3] {
        let mut c = [0u8; 3];
        for (i, v) in c.iter_mut().enumerate() {
            *v = annotation.get(x, y, i.min(ch - 1));
        }
        c
    };
    let mut border: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for x in 0..w {
        *border.entry(color(x, 0)).or_default() += 1;
        *border.entry(color(x, h - 1)).or_default() += 1;
    }
    for y in 0..h {
        *border.entry(color(0, y)).or_default() += 1;
        *border.entry(color(w - 1, y)).or_default() += 1;
    }
    let background = border
        .into_iter()
        .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
        .map(|(c, _)| c)
        .unwrap_or_default();
    BinaryMask::from_fn(w, h, |x, y| color(x, y) != background)
}

/// Ingestion result: the samples and the manifest describing them.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub samples: Vec<ImageSample>,
    pub manifest: Manifest,
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Loads a Herlev tree (seven class folders, `-d` annotation companions).
pub fn ingest_herlev(root: &Path) -> Result<Ingested> {
    let missing: Vec<&str> = HERLEV_CLASSES
        .iter()
        .map(|(name, _)| *name)
        .filter(|name| !root.join(name).is_dir())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} is not a Herlev tree; missing class folders: {}",
            root.display(),
            missing.join(", ")
        )));
    }
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    for (class, label) in HERLEV_CLASSES {
        let dir = root.join(class);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .filter(|p| {
                !p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.to_ascii_lowercase().ends_with("-d"))
            })
            .collect();
        files.sort();
        for path in files {
            let image = read_image(&path)?;
            let truth_mask = match mask_companion(&path) {
                Some(mask_path) => {
                    let mask = annotation_to_mask(&read_image(&mask_path)?);
                    if (mask.width(), mask.height()) != (image.width(), image.height()) {
                        return Err(Error::Dataset(format!(
                            "{}: annotation size differs from image",
                            mask_path.display()
                        )));
                    }
                    Some(mask)
                }
                None => None,
            };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let id = format!("{class}/{stem}");
            entries.push(ManifestEntry {
                id: id.clone(),
                relative_path: relative(root, &path),
                origin_class: class.to_string(),
                binary_label: label,
                has_truth_mask: truth_mask.is_some(),
            });
            samples.push(ImageSample {
                id,
                image,
                binary_label: label,
                origin_class: class.to_string(),
                truth_mask,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{} contains no images", root.display())));
    }
    let mut manifest = Manifest::from_entries(entries);
    if (manifest.counts.normal, manifest.counts.abnormal) != HERLEV_EXPECTED {
        let warning = format!(
            "class counts {} Normal / {} Abnormal differ from the expected {} / {}",
            manifest.counts.normal, manifest.counts.abnormal, HERLEV_EXPECTED.0, HERLEV_EXPECTED.1
        );
        log::warn!("{warning}");
        manifest.warnings.push(warning);
    }
    Ok(Ingested { samples, manifest })
}

/// Loads a tree described by `manifest.json` (as written by
/// [`write_dataset_tree`]).
pub fn ingest_manifest_tree(root: &Path) -> Result<Ingested> {
    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    if manifest.entries.is_empty() {
        return Err(Error::Dataset(format!("{}: manifest has no entries", root.display())));
    }
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let path = root.join(&e.relative_path);
        let image = read_image(&path)?;
        let truth_mask = if e.has_truth_mask {
            let mask_path =
                mask_companion(&path).ok_or_else(|| Error::Dataset(format!("{}: missing -d mask", path.display())))?;
            Some(annotation_to_mask(&read_image(&mask_path)?))
        } else {
            None
        };
        samples.push(ImageSample {
            id: e.id.clone(),
            image,
            binary_label: e.binary_label,
            origin_class: e.origin_class.clone(),
            truth_mask,
        });
    }
    Ok(Ingested { samples, manifest })
}

/// Manifest tree if `manifest.json` is present, Herlev layout otherwise.
pub fn load_dataset(root: &Path) -> Result<Ingested> {
    if root.join(MANIFEST_FILE).is_file() {
        ingest_manifest_tree(root)
    } else {
        ingest_herlev(root)
    }
}

/// Writes samples as PNGs under `<root>/<class folder>/<name>.png` with
/// `<name>-d.png` masks, plus `manifest.json`.
pub fn write_dataset_tree(samples: &[ImageSample], root: &Path) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let folder = if s.origin_class == SYNTHETIC_CLASS {
            format!("synthetic_{}", s.binary_label.name().to_ascii_lowercase())
        } else {
            s.origin_class.clone()
        };
        let dir = root.join(&folder);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = s.id.rsplit('/').next().unwrap_or(&s.id);
        let path = dir.join(format!("{name}.png"));
        write_png(&s.image, &path)?;
        if let Some(mask) = &s.truth_mask {
            write_png(&mask.to_image(), &dir.join(format!("{name}-d.png")))?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            relative_path: relative(root, &path),
            origin_class: s.origin_class.clone(),
            binary_label: s.binary_label,
            has_truth_mask: s.truth_mask.is_some(),
        });
    }
    let manifest = Manifest::from_entries(entries);
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const SYNTHETIC_SIZE: usize = 128;
/// Nucleus-to-cytoplasm area ratio above which a synthetic cell is Abnormal.
pub const SYNTHETIC_RATIO_THRESHOLD: f64 = 0.35;
const NORMAL_RATIO: (f64, f64) = (0.06, 0.22);
const ABNORMAL_RATIO: (f64, f64) = (0.45, 0.75);
const CYTOPLASM_AXES: (f64, f64) = (34.0, 46.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Whether the centre of pixel (x, y) lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }
}

/// Geometry behind one synthetic cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticCell {
    pub cytoplasm: Ellipse,
    pub nucleus: Ellipse,
    pub ratio: f64,
    pub label: BinaryLabel,
}

fn synthetic_cell<R: Rng>(rng: &mut R) -> SyntheticCell {
    let label = if rng.gen_bool(0.6) {
        BinaryLabel::Abnormal
    } else {
        BinaryLabel::Normal
    };
    let (lo, hi) = match label {
        BinaryLabel::Normal => NORMAL_RATIO,
        BinaryLabel::Abnormal => ABNORMAL_RATIO,
    };
    let ratio = rng.gen_range(lo..hi);
    let centre = SYNTHETIC_SIZE as f64 / 2.0;
    let cytoplasm = Ellipse {
        cx: centre + rng.gen_range(-8.0..8.0),
        cy: centre + rng.gen_range(-8.0..8.0),
        a: rng.gen_range(CYTOPLASM_AXES.0..CYTOPLASM_AXES.1),
        b: rng.gen_range(CYTOPLASM_AXES.0..CYTOPLASM_AXES.1),
        theta: rng.gen_range(0.0..PI),
    };
    let shrink = ratio.sqrt();
    let slack = 0.3 * (1.0 - shrink) * cytoplasm.a.min(cytoplasm.b);
    let (angle, dist) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..slack));
    let nucleus = Ellipse {
        cx: cytoplasm.cx + dist * angle.cos(),
        cy: cytoplasm.cy + dist * angle.sin(),
        a: cytoplasm.a * shrink,
        b: cytoplasm.b * shrink,
        theta: cytoplasm.theta,
    };
    SyntheticCell {
        cytoplasm,
        nucleus,
        ratio,
        label,
    }
}

fn render_cell<R: Rng>(cell: &SyntheticCell, rng: &mut R) -> (RasterImage, BinaryMask) {
    let n = SYNTHETIC_SIZE;
    let phases: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
    let freq = rng.gen_range(0.04..0.12);
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let base: [f64; 3] = if cell.nucleus.contains(x, y) {
                [70.0, 45.0, 105.0]
            } else if cell.cytoplasm.contains(x, y) {
                [135.0, 160.0, 200.0]
            } else {
                let wave = 8.0 * ((freq * fx + phases[0]).sin() + (freq * fy + phases[1]).cos());
                [205.0 + wave, 195.0 + wave, 215.0 + 0.5 * wave]
            };
            let texture = 4.0 * ((0.3 * fx + phases[2]).sin() * (0.3 * fy + phases[3]).cos());
            for v in base {
                let noisy = v + texture + rng.gen_range(-12.0..12.0);
                pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let image = RasterImage::new(n, n, 3, pixels).expect("synthetic extents are fixed");
    let mask = BinaryMask::from_fn(n, n, |x, y| cell.cytoplasm.contains(x, y));
    (image, mask)
}

/// Geometry of synthetic sample `index` under `seed`, without rendering.
pub fn synthetic_geometry(index: usize, seed: u64) -> SyntheticCell {
    synthetic_cell(&mut stream!(seed, "synthetic", index))
}

/// Generates `n` synthetic cell images. Sample `i` depends only on
/// `(seed, i)`; the label is fixed by the sampled nucleus/cytoplasm area
/// ratio before rendering.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic sample count must be positive".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream!(seed, "synthetic", i);
            let cell = synthetic_cell(&mut rng);
            let (image, mask) = render_cell(&cell, &mut rng);
            ImageSample {
                id: format!("synthetic_{i:05}"),
                image,
                binary_label: cell.label,
                origin_class: SYNTHETIC_CLASS.to_string(),
                truth_mask: Some(mask),
            }
        })
        .collect())
}

/// Stratified assignment of sample ids to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Per-class seeded shuffle followed by round-robin dealing. The dealing
/// position carries over between classes so fold sizes stay balanced.
pub fn plan_stratified_kfold(samples: &[(String, BinaryLabel)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: BTreeMap<BinaryLabel, Vec<&str>> = BTreeMap::new();
    for (id, label) in samples {
        by_class.entry(*label).or_default().push(id);
    }
    let mut assignment = BTreeMap::new();
    let mut next = 0usize;
    for (label, mut ids) in by_class {
        if ids.len() < k {
            return Err(Error::Dataset(format!(
                "class {} has {} samples, fewer than {k} folds",
                label.name(),
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut stream!(seed, "folds", label.name()));
        for id in ids {
            if assignment.insert(id.to_string(), next % k).is_some() {
                return Err(Error::Dataset(format!("duplicate sample id {id}")));
            }
            next += 1;
        }
    }
    Ok(FoldPlan { k, seed, assignment })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Allowed rotations in degrees; subset of {0, 90, 180, 270}.
    pub rotations: Vec<u32>,
    pub contrast_range: [f64; 2],
    pub balance_minority: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotations: vec![0, 90, 180, 270],
            contrast_range: [0.8, 1.2],
            balance_minority: false,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.contrast_range;
        if !prob(self.hflip_p) || !prob(self.vflip_p) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "contrast_range must satisfy 0 < lo <= 1 <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::Config(format!(
                "rotations must be a non-empty subset of {{0, 90, 180, 270}}, got {:?}",
                self.rotations
            )));
        }
        Ok(())
    }
}

pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (_, _, _, w) = t.dims4("hflip").expect("rank-4 image tensor");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub fn vflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = t.dims4("vflip").expect("rank-4 image tensor");
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    out
}

/// Clockwise rotation by 90°.
pub fn rot90<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = t.dims4("rot90").expect("rank-4 image tensor");
    let mut data = vec![T::zero(); t.len()];
    for plane in 0..b * c {
        let src = &t.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut data[plane * h * w..(plane + 1) * h * w];
        // output is h wide and w tall
        for oy in 0..w {
            for ox in 0..h {
                dst[oy * h + ox] = src[(h - 1 - ox) * w + oy];
            }
        }
    }
    Tensor::new(&[b, c, w, h], data).expect("same element count")
}

/// `clamp(mean + f·(v − mean), 0, 1)` with the mean over the whole image.
pub fn adjust_contrast<T: Scalar>(t: &Tensor<T>, factor: f64) -> Tensor<T> {
    let mean = t.sum_f64() / t.len() as f64;
    t.map(|v| T::from_f64_lossy((mean + factor * (v.as_f64() - mean)).clamp(0.0, 1.0)))
}

/// Random flips, a right-angle rotation and a contrast change, in that order.
/// Draws from `rng` in a fixed sequence so equal RNG states give equal output.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<T> {
    if !cfg.enabled {
        return image.clone();
    }
    let do_h = rng.gen_bool(cfg.hflip_p.clamp(0.0, 1.0));
    let do_v = rng.gen_bool(cfg.vflip_p.clamp(0.0, 1.0));
    let quarter_turns = if cfg.rotations.is_empty() {
        0
    } else {
        cfg.rotations[rng.gen_range(0..cfg.rotations.len())] / 90
    };
    let [lo, hi] = cfg.contrast_range;
    let factor = if lo < hi { rng.gen_range(lo..hi) } else { lo };

    let mut out = image.clone();
    if do_h {
        out = hflip(&out);
    }
    if do_v {
        out = vflip(&out);
    }
    for _ in 0..quarter_turns {
        out = rot90(&out);
    }
    if factor != 1.0 {
        out = adjust_contrast(&out, factor);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn label_mapping() {
        assert_eq!(herlev_label("normal_columnar"), Some(BinaryLabel::Normal));
        assert_eq!(herlev_label("carcinoma_in_situ"), Some(BinaryLabel::Abnormal));
        assert_eq!(herlev_label("synthetic"), None);
        let normals = HERLEV_CLASSES.iter().filter(|(_, l)| *l == BinaryLabel::Normal).count();
        assert_eq!(normals, 3);
    }

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_herlev(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("normal_superficiel") && err.contains("carcinoma_in_situ"),
            "{err}"
        );
    }

    #[test]
    fn annotation_background_from_border() {
        // blue background, red cytoplasm, dark nucleus
        let mut px = Vec::new();
        for y in 0..6 {
            for x in 0..6 {
                let c = match (x, y) {
                    (2..=3, 2..=3) => [10, 10, 10],
                    (1..=4, 1..=4) => [200, 0, 0],
                    _ => [0, 0, 255],
                };
                px.extend(c);
            }
        }
        let mask = annotation_to_mask(&RasterImage::new(6, 6, 3, px).unwrap());
        assert_eq!(mask.count(), 16);
        assert!(mask.is_set(2, 2) && mask.is_set(1, 4) && !mask.is_set(0, 0));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = generate_synthetic(6, 42).unwrap();
        let b = generate_synthetic(6, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(6, 43).unwrap();
        assert_ne!(a, c);
        // prefixes agree regardless of n
        assert_eq!(generate_synthetic(3, 42).unwrap()[..], a[..3]);
        assert!(generate_synthetic(0, 1).is_err());
    }

    #[test]
    fn synthetic_labels_follow_ratio() {
        for i in 0..200 {
            let cell = synthetic_geometry(i, 5);
            let abnormal = cell.ratio > SYNTHETIC_RATIO_THRESHOLD;
            assert_eq!(abnormal, cell.label == BinaryLabel::Abnormal);
            let measured = cell.nucleus.area() / cell.cytoplasm.area();
            assert!((measured - cell.ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_class_shares() {
        let samples = generate_synthetic(400, 2024).unwrap();
        let abnormal = samples
            .iter()
            .filter(|s| s.binary_label == BinaryLabel::Abnormal)
            .count();
        let share = abnormal as f64 / 400.0;
        assert!((0.2..=0.8).contains(&share), "{share}");
    }

    #[test]
    fn synthetic_mask_matches_ellipse_area() {
        for (i, s) in generate_synthetic(30, 77).unwrap().iter().enumerate() {
            let cell = synthetic_geometry(i, 77);
            let area = cell.cytoplasm.area();
            let count = s.truth_mask.as_ref().unwrap().count() as f64;
            assert!((count - area).abs() / area <= 0.03, "{count} vs {area}");
        }
    }

    fn labelled(normal: usize, abnormal: usize) -> Vec<(String, BinaryLabel)> {
        (0..normal)
            .map(|i| (format!("n{i:04}"), BinaryLabel::Normal))
            .chain((0..abnormal).map(|i| (format!("a{i:04}"), BinaryLabel::Abnormal)))
            .collect()
    }

    #[test]
    fn herlev_sized_fold_counts() {
        let ids = labelled(242, 675);
        let plan = plan_stratified_kfold(&ids, 5, 9).unwrap();
        let mut normal: Vec<usize> = (0..5)
            .map(|f| plan.test_ids(f).iter().filter(|id| id.starts_with('n')).count())
            .collect();
        normal.sort_unstable();
        assert_eq!(normal, vec![48, 48, 48, 49, 49]);
        for f in 0..5 {
            let abnormal = plan.test_ids(f).iter().filter(|id| id.starts_with('a')).count();
            assert_eq!(abnormal, 135);
        }
        assert_eq!(plan.assignment.len(), 917);
    }

    #[test]
    fn fold_plan_is_input_order_independent() {
        let ids = labelled(30, 40);
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(
            plan_stratified_kfold(&ids, 5, 1).unwrap(),
            plan_stratified_kfold(&rev, 5, 1).unwrap()
        );
        assert_ne!(
            plan_stratified_kfold(&ids, 5, 1).unwrap(),
            plan_stratified_kfold(&ids, 5, 2).unwrap()
        );
    }

    #[test]
    fn fold_plan_rejects_small_class() {
        assert!(plan_stratified_kfold(&labelled(4, 40), 5, 1).is_err());
        let mut dup = labelled(10, 10);
        dup.push(("n0000".into(), BinaryLabel::Abnormal));
        assert!(plan_stratified_kfold(&dup, 5, 1).is_err());
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[1, c, h, w], |i| i as f32 / (c * h * w) as f32)
    }

    #[test]
    fn flips_and_rotations() {
        let t = ramp(2, 3, 4);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(vflip(&vflip(&t)), t);
        let r = rot90(&t);
        assert_eq!(r.shape(), &[1, 2, 4, 3]);
        assert_eq!(rot90(&rot90(&rot90(&r))), t);
        // top-left moves to top-right
        assert_eq!(r.data()[2], t.data()[0]);
    }

    #[test]
    fn contrast_endpoints() {
        let t = ramp(1, 4, 4);
        assert_eq!(adjust_contrast(&t, 1.0), t);
        let flat = adjust_contrast(&t, 0.0);
        let mean = t.sum_f64() / 16.0;
        assert!(flat.data().iter().all(|&v| (v as f64 - mean).abs() < 1e-6));
    }

    #[test]
    fn augment_disabled_and_seeded() {
        let t = ramp(3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&t, &AugmentConfig::disabled(), &mut rng), t);
        let cfg = AugmentConfig::default();
        let a = augment(&t, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&t, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);

        let forced = AugmentConfig {
            hflip_p: 1.0,
            vflip_p: 0.0,
            rotations: vec![0],
            contrast_range: [1.0, 1.0],
            ..AugmentConfig::default()
        };
        let once = augment(&t, &forced, &mut rng);
        assert_eq!(once, hflip(&t));
        assert_eq!(augment(&once, &forced, &mut rng), t);
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            rotations: vec![45],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            contrast_range: [1.1, 1.3],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
