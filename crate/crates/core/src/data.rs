//! Dataset ingestion, resizing, normalization, splits, and synthetic sets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::hex_string;
use crate::rng;
use crate::tensor::Tensor;

/// Pixel noise scale of the synthetic Gaussian generator.
pub const SYNTH_NOISE_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Labeled image set; pixel values live in `[0,1]` until [`normalize`] runs.
#[derive(Clone, Debug)]
pub struct LabeledDataset<F: Elem> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split_tag: SplitTag,
    /// Content digest; see module docs for the exact stream definition.
    pub source_id: String,
}

impl<F: Elem> LabeledDataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// (channels, height, width) of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[0] != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!("images {:?} vs {} labels", s, self.labels.len()),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count()) {
            return Err(Error::config(format!(
                "label {bad} outside {} classes",
                self.class_count()
            )));
        }
        Ok(())
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Gathers a subset by row indices, deriving a new content digest.
    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> Result<LabeledDataset<F>> {
        let images = crate::kernels::index_select0(&self.images, indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut hasher = Sha256::new();
        hasher.update(self.source_id.as_bytes());
        hasher.update(match tag {
            SplitTag::Train => "/train:".as_bytes(),
            SplitTag::Test => "/test:".as_bytes(),
        });
        for &i in indices {
            hasher.update((i as u64).to_le_bytes());
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names: self.class_names.clone(),
            split_tag: tag,
            source_id: hex_string(&hasher.finalize()),
        })
    }

    /// One-hot labels as a `[N, classes]` tensor.
    pub fn one_hot(&self) -> Tensor<F> {
        one_hot(&self.labels, self.class_count())
    }
}

pub fn one_hot<F: Elem>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = F::ONE;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

/// Per-channel standardization statistics; computed on the train split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Loads a `root/<class-name>/*.png` tree with deterministic lexicographic
/// ordering; labels follow sorted class directory names.
pub fn load_image_dir<F: Elem>(root: &Path, channels: usize) -> Result<LabeledDataset<F>> {
    if channels != 1 && channels != 3 {
        return Err(Error::config("channel count must be 1 or 3"));
    }
    let mut class_dirs: Vec<String> = Vec::new();
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(format!("reading {root:?}"), e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("reading {root:?}"), e))?;
        if entry.path().is_dir() {
            class_dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::config(format!("no class directories under {root:?}")));
    }

    let mut hasher = Sha256::new();
    let mut pixels: Vec<F> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (class_id, class) in class_dirs.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<String> = Vec::new();
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(format!("reading {dir:?}"), e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(format!("reading {dir:?}"), e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
                files.push(name);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("empty class: {class}")));
        }
        for name in files {
            let path = dir.join(&name);
            let bytes =
                std::fs::read(&path).map_err(|e| Error::io(format!("reading {path:?}"), e))?;
            hasher.update(format!("{class}/{name}").as_bytes());
            hasher.update([0u8]);
            hasher.update(&bytes);
            let img = image::load_from_memory(&bytes).map_err(|e| Error::ImageDecode {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::ImageDecode {
                        path: path.display().to_string(),
                        detail: format!("size {w}x{h} differs from first image {}x{}", d.1, d.0),
                    })
                }
                _ => {}
            }
            if channels == 1 {
                let gray = img.to_luma8();
                pixels.extend(gray.as_raw().iter().map(|&v| F::from_f64(v as f64 / 255.0)));
            } else {
                let rgb = img.to_rgb8();
                // planar CHW from interleaved RGB
                let raw = rgb.as_raw();
                for c in 0..3 {
                    pixels.extend(
                        raw.chunks_exact(3)
                            .map(|px| F::from_f64(px[c] as f64 / 255.0)),
                    );
                }
            }
            labels.push(class_id);
        }
    }
    let (h, w) = dims.expect("at least one image");
    let n = labels.len();
    let ds = LabeledDataset {
        images: Tensor::new(vec![n, channels, h, w], pixels)?,
        labels,
        class_names: class_dirs,
        split_tag: SplitTag::Train,
        source_id: hex_string(&hasher.finalize()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Bilinear resize with half-pixel centers (aligned corners disabled) and
/// edge clamping; values stay within the input range.
pub fn resize<F: Elem>(ds: &LabeledDataset<F>, height: usize, width: usize) -> Result<LabeledDataset<F>> {
    if height == 0 || width == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    let s = ds.images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = ds.images.data();
    let mut out = vec![F::ZERO; n * c * height * width];
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut o = 0usize;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = src[base + y0 * w + x0].to_f64();
                let v01 = src[base + y0 * w + x1].to_f64();
                let v10 = src[base + y1 * w + x0].to_f64();
                let v11 = src[base + y1 * w + x1].to_f64();
                let v = v00 * (1.0 - wx) * (1.0 - wy)
                    + v01 * wx * (1.0 - wy)
                    + v10 * (1.0 - wx) * wy
                    + v11 * wx * wy;
                out[o] = F::from_f64(v);
                o += 1;
            }
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(ds.source_id.as_bytes());
    hasher.update(format!("/resize:{height}x{width}").as_bytes());
    Ok(LabeledDataset {
        images: Tensor::new(vec![n, c, height, width], out)?,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        split_tag: ds.split_tag,
        source_id: hex_string(&hasher.finalize()),
    })
}

/// Synthesizes a class-balanced set: per class, an isotropic Gaussian cloud
/// around a random per-pixel template, clipped to `[0,1]`. Larger
/// `separation` spreads the templates and makes the classes separable.
pub fn synth_gaussians<F: Elem>(
    classes: usize,
    per_class: usize,
    dims: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset<F>> {
    if classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if separation < 0.0 {
        return Err(Error::config("separation must be non-negative"));
    }
    let (c, h, w) = dims;
    let px = c * h * w;
    let mut template_rng = rng::stream(seed, "synth-templates");
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..px)
                .map(|_| 0.5 + separation * template_rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, SYNTH_NOISE_STD).expect("valid normal");
    let mut noise_rng = rng::stream(seed, "synth-noise");
    let mut pixels = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class_id, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            for &t in template {
                let v = (t + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
                pixels.push(F::from_f64(v));
            }
            labels.push(class_id);
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(
        format!("synth_gaussians:{classes}:{per_class}:{c}x{h}x{w}:{separation}:{seed}").as_bytes(),
    );
    Ok(LabeledDataset {
        images: Tensor::new(vec![classes * per_class, c, h, w], pixels)?,
        labels,
        class_names: (0..classes).map(|i| format!("class{i}")).collect(),
        split_tag: SplitTag::Train,
        source_id: hex_string(&hasher.finalize()),
    })
}

/// Per-class stratified split into disjoint train/test subsets.
pub fn split_train_test<F: Elem>(
    ds: &LabeledDataset<F>,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset<F>, LabeledDataset<F>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test fraction must be in [0, 1)"));
    }
    let mut rng = rng::stream(seed, "split");
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..ds.class_count() {
        let mut idx = ds.indices_of_class(class);
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(idx.len());
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        ds.subset(&train_idx, SplitTag::Train)?,
        ds.subset(&test_idx, SplitTag::Test)?,
    ))
}

/// Per-channel mean and standard deviation over every pixel.
pub fn compute_stats<F: Elem>(ds: &LabeledDataset<F>) -> Result<NormStats> {
    let s = ds.images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let count = (n * plane) as f64;
    if count == 0.0 {
        return Err(Error::config("cannot compute stats of an empty dataset"));
    }
    let data = ds.images.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            for &v in &data[base..base + plane] {
                mean[ch] += v.to_f64();
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            for &v in &data[base..base + plane] {
                let d = v.to_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let mut std = Vec::with_capacity(c);
    for (ch, v) in var.iter().enumerate() {
        let s = (v / count).sqrt();
        if s <= 0.0 {
            return Err(Error::config(format!(
                "channel {ch} has zero variance; cannot standardize"
            )));
        }
        std.push(s);
    }
    Ok(NormStats { mean, std })
}

fn affine_per_channel<F: Elem>(
    images: &Tensor<F>,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor<F>> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            detail: format!("{} channels vs {} stats", c, stats.mean.len()),
        });
    }
    let plane = h * w;
    let data = images.data();
    let mut out = Vec::with_capacity(data.len());
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (m, sd) = (stats.mean[ch], stats.std[ch]);
            out.extend(
                data[base..base + plane]
                    .iter()
                    .map(|&v| F::from_f64(f(v.to_f64(), m, sd))),
            );
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Standardizes images with train-split statistics.
pub fn normalize<F: Elem>(ds: &LabeledDataset<F>, stats: &NormStats) -> Result<LabeledDataset<F>> {
    let images = affine_per_channel(&ds.images, stats, |v, m, s| (v - m) / s)?;
    let mut hasher = Sha256::new();
    hasher.update(ds.source_id.as_bytes());
    hasher.update(b"/normalized");
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        split_tag: ds.split_tag,
        source_id: hex_string(&hasher.finalize()),
    })
}

/// Inverts [`normalize`] on a raw image tensor.
pub fn denormalize_images<F: Elem>(images: &Tensor<F>, stats: &NormStats) -> Result<Tensor<F>> {
    affine_per_channel(images, stats, |v, m, s| v * s + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussians::<f32>(3, 5, (1, 4, 4), 0.4, 9).unwrap();
        let b = synth_gaussians::<f32>(3, 5, (1, 4, 4), 0.4, 9).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 15);
        for class in 0..3 {
            assert_eq!(a.indices_of_class(class).len(), 5);
        }
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = synth_gaussians::<f32>(3, 5, (1, 4, 4), 0.4, 10).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn zero_separation_equalizes_templates() {
        // with separation 0 every class template collapses to the same 0.5
        let ds = synth_gaussians::<f64>(2, 200, (1, 2, 2), 0.0, 3).unwrap();
        let stats = compute_stats(&ds).unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let ds = synth_gaussians::<f32>(2, 10, (1, 2, 2), 0.3, 4).unwrap();
        let (train, test) = split_train_test(&ds, 0.3, 7).unwrap();
        assert_eq!(train.len(), 14);
        assert_eq!(test.len(), 6);
        assert_eq!(train.split_tag, SplitTag::Train);
        assert_eq!(test.split_tag, SplitTag::Test);
        assert_ne!(train.source_id, test.source_id);
        for class in 0..2 {
            assert_eq!(test.indices_of_class(class).len(), 3);
        }
        // reproducible
        let (train2, _) = split_train_test(&ds, 0.3, 7).unwrap();
        assert_eq!(train.images.data(), train2.images.data());
    }

    #[test]
    fn normalize_roundtrip() {
        let ds = synth_gaussians::<f64>(2, 20, (1, 3, 3), 0.4, 5).unwrap();
        let stats = compute_stats(&ds).unwrap();
        let normed = normalize(&ds, &stats).unwrap();
        let restored = denormalize_images(&normed.images, &stats).unwrap();
        for (a, b) in restored.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // stats of standardized data are ~ (0, 1)
        let restats = compute_stats(&normed).unwrap();
        assert!(restats.mean[0].abs() < 1e-6);
        assert!((restats.std[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let images = Tensor::<f32>::filled(vec![3, 1, 2, 2], 0.7);
        let ds = LabeledDataset {
            images,
            labels: vec![0, 1, 0],
            class_names: vec!["a".into(), "b".into()],
            split_tag: SplitTag::Train,
            source_id: "x".into(),
        };
        assert!(compute_stats(&ds).is_err());
    }

    #[test]
    fn resize_identity_is_exact_copy() {
        let ds = synth_gaussians::<f32>(2, 3, (1, 5, 5), 0.4, 2).unwrap();
        let same = resize(&ds, 5, 5).unwrap();
        assert_eq!(same.images.data(), ds.images.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let images = Tensor::<f64>::filled(vec![1, 1, 8, 8], 0.42);
        let ds = LabeledDataset {
            images,
            labels: vec![0],
            class_names: vec!["a".into(), "b".into()],
            split_tag: SplitTag::Train,
            source_id: "x".into(),
        };
        let out = resize(&ds, 3, 7).unwrap();
        assert_eq!(out.images.shape(), &[1, 1, 3, 7]);
        for &v in out.images.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_halves_paper_resolution() {
        let ds = synth_gaussians::<f32>(2, 2, (1, 224, 224), 0.3, 1).unwrap();
        let out = resize(&ds, 112, 112).unwrap();
        assert_eq!(out.images.shape(), &[4, 1, 112, 112]);
        assert!(out.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn one_hot_rows() {
        let oh = one_hot::<f32>(&[1, 0, 2], 3);
        assert_eq!(oh.shape(), &[3, 3]);
        assert_eq!(oh.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
