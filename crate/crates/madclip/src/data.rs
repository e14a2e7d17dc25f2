//! Dataset manifests, image/mask IO, balanced few-shot sampling,
//! augmentation, and the synthetic desk-scale dataset generator.
//!
//! A dataset is a directory containing:
//!
//! * `meta.cfg` — `name = ...` and `modality = ...` (the objective word),
//! * `manifest.csv` — header `image_path,label,mask_path,split` with paths
//!   relative to the directory, labels in {0,1}, split in
//!   {train_pool, test},
//! * the referenced 8-bit image files, masks as single-channel images where
//!   nonzero means anomalous.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::BilinearPlan;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// RGB image with values in [0, 1], interleaved row-major.
#[derive(Clone, Debug)]
pub struct Image<S: Scalar> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(h: usize, w: usize, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), h * w * 3);
        Image { h, w, data }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Load(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = S::from_f64(1.0 / 255.0);
        let data = img
            .pixels()
            .flat_map(|p| p.0.iter().map(move |&c| S::from_f64(c as f64) * scale))
            .collect();
        Ok(Image { h, w, data })
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let plan = BilinearPlan::<S>::new(self.h, self.w, h, w);
        let mut data = vec![S::zero(); h * w * 3];
        for c in 0..3 {
            let channel: Vec<S> = (0..self.h * self.w)
                .map(|i| self.data[i * 3 + c])
                .collect();
            for (i, v) in plan.apply(&channel).into_iter().enumerate() {
                data[i * 3 + c] = v;
            }
        }
        Image { h, w, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = vec![S::zero(); self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let src = (y * self.w + x) * 3;
                let dst = (y * self.w + (self.w - 1 - x)) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        Image {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, ch: usize, cw: usize) -> Self {
        let mut data = Vec::with_capacity(ch * cw * 3);
        for y in top..top + ch {
            let row = (y * self.w + left) * 3;
            data.extend_from_slice(&self.data[row..row + cw * 3]);
        }
        Image {
            h: ch,
            w: cw,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Save a [0,1] grayscale value grid as an 8-bit PNG (`round(255 * v)`).
pub fn save_gray_png<S: Scalar>(path: &Path, values: &[S], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = values
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Input("pixel buffer does not match dimensions".into()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path)?;
    Ok(())
}

/// Binary pixel mask; nonzero source pixels map to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Load(format!("cannot read mask {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| u8::from(p.0[0] != 0)).collect();
        Ok(Mask { h, w, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, buf)
            .ok_or_else(|| Error::Input("mask buffer does not match dimensions".into()))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            let sy = ((y as f64 + 0.5) * self.h as f64 / h as f64) as usize;
            let sy = sy.min(self.h - 1);
            for x in 0..w {
                let sx = ((x as f64 + 0.5) * self.w as f64 / w as f64) as usize;
                let sx = sx.min(self.w - 1);
                data[y * w + x] = self.data[sy * self.w + sx];
            }
        }
        Mask { h, w, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = vec![0u8; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                data[y * self.w + (self.w - 1 - x)] = self.data[y * self.w + x];
            }
        }
        Mask {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, ch: usize, cw: usize) -> Self {
        let mut data = Vec::with_capacity(ch * cw);
        for y in top..top + ch {
            data.extend_from_slice(&self.data[y * self.w + left..y * self.w + left + cw]);
        }
        Mask {
            h: ch,
            w: cw,
            data,
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainPool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainPool => "train_pool",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train_pool" => Ok(Split::TrainPool),
            "test" => Ok(Split::Test),
            other => Err(Error::Load(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub name: String,
    /// Modality word used as the prompt objective (e.g. "brain", "liver").
    pub modality: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Segmentation-capable: every anomalous test entry carries a mask.
    pub fn as_capable(&self) -> bool {
        let mut any = false;
        for e in self.split_entries(Split::Test).filter(|e| e.label == 1) {
            if e.mask_path.is_none() {
                return false;
            }
            any = true;
        }
        any
    }
}

/// A loaded training/evaluation sample.
pub struct Sample<S: Scalar> {
    pub image: Image<S>,
    pub label: u8,
    pub mask: Option<Mask>,
}

pub fn load_sample<S: Scalar>(entry: &ManifestEntry) -> Result<Sample<S>> {
    let image = Image::load_png(&entry.image_path)?;
    let mask = match &entry.mask_path {
        Some(p) => Some(Mask::load_png(p)?),
        None => None,
    };
    Ok(Sample {
        image,
        label: entry.label,
        mask,
    })
}

/// Parse and validate a dataset directory. Images stay on disk (lazy); masks
/// attached to normal samples are loaded once to verify they are empty.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join("meta.cfg");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", meta_path.display())))?;
    let mut name = None;
    let mut modality = None;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "name" => name = Some(v.trim().to_string()),
                "modality" => modality = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let name = name.ok_or_else(|| Error::Load("meta.cfg is missing `name`".into()))?;
    let modality = modality.ok_or_else(|| Error::Load("meta.cfg is missing `modality`".into()))?;

    let csv_path = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&csv_path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", csv_path.display())))?;
    let mut entries = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, after the header line
        let record =
            record.map_err(|e| Error::Load(format!("manifest row {row}: {e}")))?;
        if record.len() != 4 {
            return Err(Error::Load(format!(
                "manifest row {row}: expected 4 columns, found {}",
                record.len()
            )));
        }
        let label: u8 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Load(format!("manifest row {row}: bad label `{}`", &record[1])))?;
        if label > 1 {
            return Err(Error::Load(format!(
                "manifest row {row}: label must be 0 or 1, found {label}"
            )));
        }
        let image_path = dir.join(record[0].trim());
        if !image_path.exists() {
            return Err(Error::Load(format!(
                "manifest row {row}: missing image file {}",
                image_path.display()
            )));
        }
        let mask_field = record[2].trim();
        let mask_path = if mask_field.is_empty() {
            None
        } else {
            let p = dir.join(mask_field);
            if !p.exists() {
                return Err(Error::Load(format!(
                    "manifest row {row}: missing mask file {}",
                    p.display()
                )));
            }
            Some(p)
        };
        // A normal sample may ship a mask, but it must be empty.
        if label == 0 {
            if let Some(p) = &mask_path {
                let mask = Mask::load_png(p)?;
                if mask.count_nonzero() != 0 {
                    return Err(Error::Load(format!(
                        "manifest row {row}: normal sample has a non-empty mask {}",
                        p.display()
                    )));
                }
            }
        }
        let split = Split::parse(record[3].trim())
            .map_err(|e| Error::Load(format!("manifest row {row}: {e}")))?;
        entries.push(ManifestEntry {
            image_path,
            label,
            mask_path,
            split,
        });
    }
    Ok(DatasetManifest {
        name,
        modality,
        root: dir.to_path_buf(),
        entries,
    })
}

/// Few-shot protocol: k entries per class drawn without replacement from the
/// train pool.
#[derive(Clone, Copy, Debug)]
pub struct FewShotSpec {
    pub shots: usize,
    pub seed: u64,
}

impl FewShotSpec {
    pub fn new(shots: usize, seed: u64) -> Result<Self> {
        if ![2, 4, 8, 16].contains(&shots) {
            return Err(Error::Config(format!(
                "shots must be one of 2, 4, 8, 16; found {shots}"
            )));
        }
        Ok(FewShotSpec { shots, seed })
    }
}

/// Draw a balanced training set: exactly `shots` normal and `shots` abnormal
/// entries from the train pool, reproducibly from the seed.
pub fn few_shot_sample(
    manifest: &DatasetManifest,
    spec: FewShotSpec,
) -> Result<Vec<ManifestEntry>> {
    let mut normal: Vec<&ManifestEntry> = manifest
        .split_entries(Split::TrainPool)
        .filter(|e| e.label == 0)
        .collect();
    let mut abnormal: Vec<&ManifestEntry> = manifest
        .split_entries(Split::TrainPool)
        .filter(|e| e.label == 1)
        .collect();
    if normal.len() < spec.shots || abnormal.len() < spec.shots {
        return Err(Error::Input(format!(
            "train pool has {} normal / {} abnormal entries; {} per class requested",
            normal.len(),
            abnormal.len(),
            spec.shots
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    normal.shuffle(&mut rng);
    abnormal.shuffle(&mut rng);
    let mut selection: Vec<ManifestEntry> = Vec::with_capacity(2 * spec.shots);
    selection.extend(normal.into_iter().take(spec.shots).cloned());
    selection.extend(abnormal.into_iter().take(spec.shots).cloned());
    Ok(selection)
}

/// Minimal augmentation: horizontal flip plus a random resized crop. The
/// identical geometric transform is applied to the mask (nearest-neighbor
/// resampling keeps it binary).
#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub crop_min: f64,
    pub crop_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            crop_min: 0.9,
            crop_max: 1.0,
        }
    }
}

pub fn augment<S: Scalar>(
    sample: &Sample<S>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Sample<S> {
    if !cfg.enabled {
        return Sample {
            image: sample.image.clone(),
            label: sample.label,
            mask: sample.mask.clone(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (sample.image.h, sample.image.w);

    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let scale = if cfg.crop_max > cfg.crop_min {
        rng.gen_range(cfg.crop_min..cfg.crop_max)
    } else {
        cfg.crop_min
    };
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let top = if ch < h { rng.gen_range(0..=(h - ch)) } else { 0 };
    let left = if cw < w { rng.gen_range(0..=(w - cw)) } else { 0 };

    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if flip {
        image = image.flip_horizontal();
        mask = mask.map(|m| m.flip_horizontal());
    }
    if ch != h || cw != w || top != 0 || left != 0 {
        image = image.crop(top, left, ch, cw).resize_bilinear(h, w);
        mask = mask.map(|m| m.crop(top, left, ch, cw).resize_nearest(h, w));
    }
    Sample {
        image,
        label: sample.label,
        mask,
    }
}

/// Parameters for the synthetic desk-scale dataset: smooth backgrounds, and
/// for anomalous samples a bright rectangular blob whose rectangle is the
/// ground-truth mask.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub size: usize,
    pub seed: u64,
    /// Brightness added inside the blob; shift this to emulate a related but
    /// distribution-shifted dataset for cross-dataset runs.
    pub blob_intensity: f64,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            n_normal: 24,
            n_abnormal: 24,
            size: 64,
            seed: 0,
            blob_intensity: 0.35,
            test_per_class: 8,
        }
    }
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.test_per_class >= spec.n_normal || spec.test_per_class >= spec.n_abnormal {
        return Err(Error::Config(format!(
            "test_per_class {} leaves no train pool ({} normal / {} abnormal)",
            spec.test_per_class, spec.n_normal, spec.n_abnormal
        )));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;

    let mut rows: Vec<(String, u8, String, Split)> = Vec::new();
    for label in [0u8, 1u8] {
        let count = if label == 0 { spec.n_normal } else { spec.n_abnormal };
        let class = if label == 0 { "normal" } else { "abnormal" };
        for idx in 0..count {
            let mut pixels = smooth_background(&mut rng, s);
            let mut mask_rel = String::new();
            if label == 1 {
                let bw = rng.gen_range(s / 6..=s / 3);
                let bh = rng.gen_range(s / 6..=s / 3);
                let left = rng.gen_range(0..=s - bw);
                let top = rng.gen_range(0..=s - bh);
                let mut mask = Mask::zeros(s, s);
                for y in top..top + bh {
                    for x in left..left + bw {
                        pixels[y * s + x] = (pixels[y * s + x] + spec.blob_intensity).min(1.0);
                        mask.data[y * s + x] = 1;
                    }
                }
                mask_rel = format!("masks/{class}_{idx:03}.png");
                mask.save_png(&out_dir.join(&mask_rel))?;
            }
            let image_rel = format!("images/{class}_{idx:03}.png");
            save_gray_png::<f64>(&out_dir.join(&image_rel), &pixels, s, s)?;
            let split = if idx < spec.test_per_class {
                Split::Test
            } else {
                Split::TrainPool
            };
            rows.push((image_rel, label, mask_rel, split));
        }
    }

    std::fs::write(
        out_dir.join("meta.cfg"),
        format!("name = {}\nmodality = texture\n", spec.name),
    )?;
    let mut writer = csv::Writer::from_path(out_dir.join("manifest.csv"))
        .map_err(|e| Error::Load(format!("cannot write manifest: {e}")))?;
    writer
        .write_record(["image_path", "label", "mask_path", "split"])
        .and_then(|_| {
            rows.iter().try_for_each(|(img, label, mask, split)| {
                writer.write_record([
                    img.as_str(),
                    if *label == 1 { "1" } else { "0" },
                    mask.as_str(),
                    split.as_str(),
                ])
            })
        })
        .map_err(|e| Error::Load(format!("cannot write manifest: {e}")))?;
    writer
        .flush()
        .map_err(|e| Error::Load(format!("cannot write manifest: {e}")))?;

    load_manifest(out_dir)
}

fn smooth_background(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let fx = rng.gen_range(0.5..1.8);
    let fy = rng.gen_range(0.5..1.8);
    let px = rng.gen_range(0.0..std::f64::consts::TAU);
    let py = rng.gen_range(0.0..std::f64::consts::TAU);
    let base = rng.gen_range(0.30..0.45);
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let u = std::f64::consts::TAU * fx * x as f64 / s as f64 + px;
            let v = std::f64::consts::TAU * fy * y as f64 / s as f64 + py;
            let val = base + 0.12 * u.sin() * v.cos() + rng.gen_range(-0.02..0.02);
            pixels.push(val.clamp(0.0, 1.0));
        }
    }
    pixels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_dir(spec: &SyntheticSpec) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synthetic_dataset(spec, dir.path()).unwrap();
        (dir, manifest)
    }

    #[test]
    fn synthetic_dataset_roundtrips_through_manifest() {
        let spec = SyntheticSpec {
            n_normal: 10,
            n_abnormal: 10,
            test_per_class: 3,
            size: 32,
            ..Default::default()
        };
        let (_dir, manifest) = synth_dir(&spec);
        assert_eq!(manifest.entries.len(), 20);
        assert_eq!(manifest.split_entries(Split::Test).count(), 6);
        assert!(manifest.as_capable());
        assert_eq!(manifest.modality, "texture");
    }

    #[test]
    fn blob_mask_area_matches_construction() {
        let spec = SyntheticSpec {
            n_normal: 2,
            n_abnormal: 4,
            test_per_class: 1,
            size: 32,
            ..Default::default()
        };
        let (_dir, manifest) = synth_dir(&spec);
        for entry in manifest.entries.iter().filter(|e| e.label == 1) {
            let mask = Mask::load_png(entry.mask_path.as_ref().unwrap()).unwrap();
            let area = mask.count_nonzero();
            assert!(area > 0);
            // The rectangle survives the PNG roundtrip exactly.
            let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0, usize::MAX, 0);
            for y in 0..mask.h {
                for x in 0..mask.w {
                    if mask.data[y * mask.w + x] != 0 {
                        min_x = min_x.min(x);
                        max_x = max_x.max(x);
                        min_y = min_y.min(y);
                        max_y = max_y.max(y);
                    }
                }
            }
            assert_eq!(area, (max_x - min_x + 1) * (max_y - min_y + 1));
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec {
            n_normal: 3,
            n_abnormal: 3,
            test_per_class: 1,
            size: 16,
            ..Default::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        make_synthetic_dataset(&spec, dir_a.path()).unwrap();
        make_synthetic_dataset(&spec, dir_b.path()).unwrap();
        for rel in ["images/normal_000.png", "images/abnormal_002.png", "manifest.csv"] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identically seeded runs");
        }
    }

    #[test]
    fn few_shot_sampling_is_balanced_and_reproducible() {
        let spec = SyntheticSpec::default();
        let (_dir, manifest) = synth_dir(&spec);
        let fs = FewShotSpec::new(16, 7).unwrap();
        let a = few_shot_sample(&manifest, fs).unwrap();
        let b = few_shot_sample(&manifest, fs).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a.iter().filter(|e| e.label == 0).count(), 16);
        let paths = |v: &[ManifestEntry]| -> Vec<PathBuf> {
            v.iter().map(|e| e.image_path.clone()).collect()
        };
        assert_eq!(paths(&a), paths(&b));
        // 16 per class exhausts the 24-8=16 pool entries per class.
        let c = few_shot_sample(&manifest, FewShotSpec::new(2, 1).unwrap()).unwrap();
        assert_eq!(c.len(), 4);
        // Selection never touches the test split.
        for e in &a {
            assert_eq!(e.split, Split::TrainPool);
        }
    }

    #[test]
    fn few_shot_insufficient_pool_errors() {
        let spec = SyntheticSpec {
            n_normal: 5,
            n_abnormal: 5,
            test_per_class: 2,
            size: 16,
            ..Default::default()
        };
        let (_dir, manifest) = synth_dir(&spec);
        assert!(few_shot_sample(&manifest, FewShotSpec::new(4, 0).unwrap()).is_err());
        assert!(FewShotSpec::new(3, 0).is_err());
    }

    #[test]
    fn bad_label_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.cfg"), "name = t\nmodality = m\n").unwrap();
        save_gray_png::<f64>(&dir.path().join("img.png"), &vec![0.5; 16], 4, 4).unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "image_path,label,mask_path,split\nimg.png,2,,test\n",
        )
        .unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn normal_sample_with_nonempty_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.cfg"), "name = t\nmodality = m\n").unwrap();
        save_gray_png::<f64>(&dir.path().join("img.png"), &vec![0.5; 16], 4, 4).unwrap();
        let mut bad = Mask::zeros(4, 4);
        bad.data[5] = 1;
        bad.save_png(&dir.path().join("mask.png")).unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "image_path,label,mask_path,split\nimg.png,0,mask.png,test\n",
        )
        .unwrap();
        assert!(load_manifest(dir.path()).is_err());

        // An all-zero mask on a normal sample is accepted.
        Mask::zeros(4, 4).save_png(&dir.path().join("mask.png")).unwrap();
        assert!(load_manifest(dir.path()).is_ok());
    }

    #[test]
    fn augmentation_is_seed_deterministic_and_mask_consistent() {
        let spec = SyntheticSpec {
            n_normal: 2,
            n_abnormal: 2,
            test_per_class: 1,
            size: 32,
            ..Default::default()
        };
        let (_dir, manifest) = synth_dir(&spec);
        let entry = manifest.entries.iter().find(|e| e.label == 1).unwrap();
        let sample = load_sample::<f64>(entry).unwrap();
        let cfg = AugmentConfig::default();
        let a = augment(&sample, &cfg, 3);
        let b = augment(&sample, &cfg, 3);
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.mask, b.mask);

        // Flip alone preserves the anomalous-pixel count.
        let flip_only = AugmentConfig {
            flip_prob: 1.0,
            crop_min: 1.0,
            crop_max: 1.0,
            ..cfg
        };
        let flipped = augment(&sample, &flip_only, 11);
        assert_eq!(
            flipped.mask.as_ref().unwrap().count_nonzero(),
            sample.mask.as_ref().unwrap().count_nonzero()
        );

        // Identity configuration returns the sample unchanged.
        let identity = AugmentConfig {
            flip_prob: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            ..cfg
        };
        let same = augment(&sample, &identity, 5);
        assert_eq!(same.image.data, sample.image.data);
        assert_eq!(same.mask, sample.mask);
    }
}
