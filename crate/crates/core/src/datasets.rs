//! Imbalanced binary datasets: image-folder ingestion, a deterministic
//! synthetic texture dataset, and batch schedules.
//!
//! Class `A` is always the majority and class `B` the minority. Images are
//! `[C, H, W]` tensors scaled to `[-1, 1]`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, derive_seed_path};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Majority class.
    A,
    /// Minority class.
    B,
}

impl ClassLabel {
    pub fn is_minority(self) -> bool {
        self == ClassLabel::B
    }

    pub fn other(self) -> Self {
        match self {
            ClassLabel::A => ClassLabel::B,
            ClassLabel::B => ClassLabel::A,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledExample<T> {
    pub image: Tensor<T>,
    pub label: ClassLabel,
    /// Identity of the source image (file path or synthetic index).
    pub source_id: String,
}

/// Appearance controls for the synthetic texture dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureStyle {
    /// Darkening applied on stripe pixels of minority images.
    pub stripe_contrast: f64,
    /// Stripe period range in pixels.
    pub stripe_period: (f64, f64),
    /// Standard deviation of per-pixel noise.
    pub noise_std: f64,
    /// Amplitude of the low-frequency background waves.
    pub background_wave: f64,
}

impl Default for TextureStyle {
    fn default() -> Self {
        Self {
            stripe_contrast: 0.35,
            stripe_period: (3.0, 5.0),
            noise_std: 0.12,
            background_wave: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// `<path>/<class_a>/*.{png,jpg}` and `<path>/<class_b>/*.{png,jpg}`.
    ImageFolder {
        path: PathBuf,
        class_a: String,
        class_b: String,
    },
    Synthetic {
        #[serde(default)]
        style: TextureStyle,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub n_majority: usize,
    pub n_minority: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(n_majority: usize, n_minority: usize, image_size: usize, seed: u64) -> Self {
        Self {
            source: DatasetSource::Synthetic {
                style: TextureStyle::default(),
            },
            n_majority,
            n_minority,
            val_per_class: 50,
            test_per_class: 100,
            image_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("dataset.image_size", "must be positive"));
        }
        if self.n_majority == 0 || self.n_minority == 0 {
            return Err(Error::config("dataset", "class counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImbalancedDataset<T> {
    pub train_a: Vec<LabeledExample<T>>,
    pub train_b: Vec<LabeledExample<T>>,
    pub val: Vec<LabeledExample<T>>,
    pub test: Vec<LabeledExample<T>>,
    /// `|train_a| / |train_b|`.
    pub gamma: f64,
    /// Display names of (majority, minority).
    pub class_names: (String, String),
    /// True when the requested counts put the named class A in the minority.
    pub swapped: bool,
}

impl<T: Scalar> ImbalancedDataset<T> {
    pub fn new(
        train_a: Vec<LabeledExample<T>>,
        train_b: Vec<LabeledExample<T>>,
        val: Vec<LabeledExample<T>>,
        test: Vec<LabeledExample<T>>,
        class_names: (String, String),
    ) -> Result<Self> {
        if train_a.is_empty() || train_b.is_empty() {
            return Err(Error::capacity("training split", "both classes need at least one example"));
        }
        let mut ds = Self {
            gamma: train_a.len() as f64 / train_b.len() as f64,
            train_a,
            train_b,
            val,
            test,
            class_names,
            swapped: false,
        };
        if ds.gamma < 1.0 {
            ds.swap_roles();
        }
        Ok(ds)
    }

    fn swap_roles(&mut self) {
        std::mem::swap(&mut self.train_a, &mut self.train_b);
        for ex in self
            .train_a
            .iter_mut()
            .chain(&mut self.train_b)
            .chain(&mut self.val)
            .chain(&mut self.test)
        {
            ex.label = ex.label.other();
        }
        self.class_names = (self.class_names.1.clone(), self.class_names.0.clone());
        self.swapped = !self.swapped;
        self.gamma = self.train_a.len() as f64 / self.train_b.len() as f64;
    }

    /// Replaces the training split, recomputing `gamma`.
    pub fn with_train(&self, train_a: Vec<LabeledExample<T>>, train_b: Vec<LabeledExample<T>>) -> Result<Self> {
        let mut out = Self::new(
            train_a,
            train_b,
            self.val.clone(),
            self.test.clone(),
            self.class_names.clone(),
        )?;
        out.swapped ^= self.swapped;
        Ok(out)
    }

    pub fn image_shape(&self) -> &[usize] {
        self.train_a[0].image.shape()
    }

    /// Paired majority/minority batches for one epoch; see [`paired_schedule`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<PairedBatch>> {
        paired_schedule(self.train_a.len(), self.train_b.len(), batch_size, seed, epoch)
    }

    /// All training examples, majority first.
    pub fn train_all(&self) -> Vec<&LabeledExample<T>> {
        self.train_a.iter().chain(&self.train_b).collect()
    }
}

/// Stacks the selected examples into an `[N, C, H, W]` batch.
pub fn stack_images<T: Scalar>(examples: &[LabeledExample<T>], indices: &[usize]) -> Tensor<T> {
    let refs: Vec<&Tensor<T>> = indices.iter().map(|&i| &examples[i].image).collect();
    Tensor::stack(&refs)
}

/// Stacks every example in `examples` and returns the minority indicator per row.
pub fn stack_all<T: Scalar>(examples: &[&LabeledExample<T>]) -> (Tensor<T>, Vec<bool>) {
    let refs: Vec<&Tensor<T>> = examples.iter().map(|e| &e.image).collect();
    let labels = examples.iter().map(|e| e.label.is_minority()).collect();
    (Tensor::stack(&refs), labels)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedBatch {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Pairs every majority index once per epoch with a minority stream built
/// from back-to-back reshuffles of the minority indices (the smaller class is
/// cycled). The order is a pure function of `(seed, epoch)`.
pub fn paired_schedule(
    n_a: usize,
    n_b: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<PairedBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if n_a == 0 || n_b == 0 {
        return Err(Error::capacity("batching", "a class has no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(seed, &["paired", &epoch.to_string()]));
    let len = n_a.max(n_b);
    let stream = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut out = Vec::with_capacity(len + n);
        while out.len() < len {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            out.extend(perm);
        }
        out.truncate(len);
        out
    };
    let a = stream(n_a, &mut rng);
    let b = stream(n_b, &mut rng);
    Ok(a.chunks(batch_size)
        .zip(b.chunks(batch_size))
        .map(|(a, b)| PairedBatch {
            a: a.to_vec(),
            b: b.to_vec(),
        })
        .collect())
}

/// Plain shuffled minibatches over `n` examples.
pub fn shuffled_schedule(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if n == 0 {
        return Err(Error::capacity("batching", "no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(seed, &["shuffled", &epoch.to_string()]));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

// ------------------------------------------------------------ loading

/// Builds the dataset described by `spec`, dispatching on its source.
pub fn load_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<ImbalancedDataset<T>> {
    match &spec.source {
        DatasetSource::ImageFolder { .. } => load_image_folder(spec),
        DatasetSource::Synthetic { .. } => synth_texture_dataset(spec),
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes an image file, resizes it to `size`x`size` RGB and scales to `[-1, 1]`.
pub fn load_image<T: Scalar>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut data = vec![T::zero(); 3 * size * size];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = T::lit(px[c] as f64 / 127.5 - 1.0);
        }
    }
    Ok(Tensor::new(vec![3, size, size], data))
}

struct FolderSplit {
    train: Vec<PathBuf>,
    val: Vec<PathBuf>,
    test: Vec<PathBuf>,
    rest: Vec<PathBuf>,
}

fn split_folder(root: &Path, class: &str, n_train: usize, spec: &DatasetSpec) -> Result<FolderSplit> {
    let dir = root.join(class);
    if !dir.is_dir() {
        return Err(Error::config(
            "dataset.source.path",
            format!("class directory {} does not exist", dir.display()),
        ));
    }
    let mut files = list_images(&dir)?;
    let need = n_train + spec.val_per_class + spec.test_per_class;
    if files.len() < need {
        return Err(Error::capacity(
            format!("class `{class}`"),
            format!(
                "need {need} images ({n_train} train + {} val + {} test), found {}; short by {}",
                spec.val_per_class,
                spec.test_per_class,
                files.len(),
                need - files.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(spec.seed, &["split", class]));
    files.shuffle(&mut rng);
    let rest = files.split_off(need);
    let test = files.split_off(n_train + spec.val_per_class);
    let val = files.split_off(n_train);
    Ok(FolderSplit {
        train: files,
        val,
        test,
        rest,
    })
}

fn decode_all<T: Scalar>(paths: &[PathBuf], label: ClassLabel, size: usize) -> Result<Vec<LabeledExample<T>>> {
    // decoding runs in parallel; collect preserves input order
    paths
        .par_iter()
        .map(|p| {
            Ok(LabeledExample {
                image: load_image(p, size)?,
                label,
                source_id: p.display().to_string(),
            })
        })
        .collect()
}

/// Loads an image-folder dataset with exactly the requested counts.
pub fn load_image_folder<T: Scalar>(spec: &DatasetSpec) -> Result<ImbalancedDataset<T>> {
    spec.validate()?;
    let DatasetSource::ImageFolder { path, class_a, class_b } = &spec.source else {
        return Err(Error::config("dataset.source", "expected an image_folder source"));
    };
    if !path.is_dir() {
        return Err(Error::config(
            "dataset.source.path",
            format!("{} is not a directory", path.display()),
        ));
    }
    let sa = split_folder(path, class_a, spec.n_majority, spec)?;
    let sb = split_folder(path, class_b, spec.n_minority, spec)?;
    let size = spec.image_size;
    let train_a = decode_all(&sa.train, ClassLabel::A, size)?;
    let train_b = decode_all(&sb.train, ClassLabel::B, size)?;
    let mut val = decode_all(&sa.val, ClassLabel::A, size)?;
    val.extend(decode_all(&sb.val, ClassLabel::B, size)?);
    let mut test = decode_all(&sa.test, ClassLabel::A, size)?;
    test.extend(decode_all(&sb.test, ClassLabel::B, size)?);
    ImbalancedDataset::new(train_a, train_b, val, test, (class_a.clone(), class_b.clone()))
}

/// Balanced examples disjoint from every split of `spec`, for training the
/// inception-accuracy proxy classifier. Returned with labels relative to the
/// dataset built from the same spec.
pub fn proxy_pool<T: Scalar>(spec: &DatasetSpec, per_class: usize) -> Result<Vec<LabeledExample<T>>> {
    let swapped = spec.n_majority < spec.n_minority;
    let (la, lb) = if swapped {
        (ClassLabel::B, ClassLabel::A)
    } else {
        (ClassLabel::A, ClassLabel::B)
    };
    match &spec.source {
        DatasetSource::Synthetic { style } => {
            // far beyond any split's index range
            let start = 1usize << 40;
            let mut out = Vec::with_capacity(2 * per_class);
            for i in 0..per_class {
                let (img_a, _, _) = render_texture_pair::<T>(spec.seed, start + 2 * i, spec.image_size, style);
                let (_, img_b, _) = render_texture_pair::<T>(spec.seed, start + 2 * i + 1, spec.image_size, style);
                out.push(LabeledExample {
                    image: img_a,
                    label: la,
                    source_id: format!("synthetic:{}", start + 2 * i),
                });
                out.push(LabeledExample {
                    image: img_b,
                    label: lb,
                    source_id: format!("synthetic:{}", start + 2 * i + 1),
                });
            }
            Ok(out)
        }
        DatasetSource::ImageFolder { path, class_a, class_b } => {
            let sa = split_folder(path, class_a, spec.n_majority, spec)?;
            let sb = split_folder(path, class_b, spec.n_minority, spec)?;
            for (name, split) in [(class_a, &sa), (class_b, &sb)] {
                if split.rest.len() < per_class {
                    return Err(Error::capacity(
                        format!("proxy pool for class `{name}`"),
                        format!("need {per_class} unused images, found {}", split.rest.len()),
                    ));
                }
            }
            let mut out = decode_all(&sa.rest[..per_class], la, spec.image_size)?;
            out.extend(decode_all(&sb.rest[..per_class], lb, spec.image_size)?);
            Ok(out)
        }
    }
}

// ---------------------------------------------------------- synthetic

/// Renders the majority and minority variants of synthetic image `index`.
///
/// Both variants share the background and blob geometry; the minority variant
/// darkens a stripe pattern inside the blob. Returns `(a, b, stripe_mask)`
/// where the mask marks the `H*W` pixels the stripes touch.
pub fn render_texture_pair<T: Scalar>(
    seed: u64,
    index: usize,
    size: usize,
    style: &TextureStyle,
) -> (Tensor<T>, Tensor<T>, Vec<bool>) {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(seed, &["synthetic", &index.to_string()]));
    let s = size as f64;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.5..1.5) / s;
            let phase = rng.random_range(0.0..TAU);
            let amp = style.background_wave * rng.random_range(0.5..1.0);
            (theta, freq, phase, amp)
        })
        .collect();
    let blob: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let rx = rng.random_range(0.2..0.32) * s;
    let ry = rng.random_range(0.2..0.32) * s;
    let rot = rng.random_range(0.0..TAU);
    let stripe_dir = rng.random_range(0.0..TAU);
    let period = rng.random_range(style.stripe_period.0..style.stripe_period.1.max(style.stripe_period.0 + 1e-9));
    let stripe_phase = rng.random_range(0.0..1.0);
    let noise = Normal::new(0.0, style.noise_std.max(0.0)).expect("finite noise std");

    let plane = size * size;
    let mut a = vec![0.0f64; 3 * plane];
    let mut mask = vec![false; plane];
    let (cr, sr) = (rot.cos(), rot.sin());
    let (cd, sd) = (stripe_dir.cos(), stripe_dir.sin());
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let dx = fx - cx;
            let dy = fy - cy;
            let u = (dx * cr + dy * sr) / rx;
            let v = (-dx * sr + dy * cr) / ry;
            let inside = u * u + v * v <= 1.0;
            let wave: f64 = waves
                .iter()
                .map(|&(t, f, p, amp)| amp * (TAU * f * (fx * t.cos() + fy * t.sin()) + p).sin())
                .sum();
            let p = y * size + x;
            for c in 0..3 {
                let base = if inside {
                    // gentle shading keeps the blob smooth
                    blob[c] + 0.1 * (u * 0.5 - v * 0.5)
                } else {
                    bg[c] + wave
                };
                a[c * plane + p] = base + noise.sample(&mut rng);
            }
            if inside {
                let t = ((fx * cd + fy * sd) / period + stripe_phase).rem_euclid(1.0);
                mask[p] = t < 0.5;
            }
        }
    }
    let mut b = a.clone();
    for c in 0..3 {
        for p in 0..plane {
            if mask[p] {
                b[c * plane + p] -= style.stripe_contrast;
            }
        }
    }
    let to_tensor = |v: Vec<f64>| {
        Tensor::new(
            vec![3, size, size],
            v.into_iter().map(|x| T::lit(x.clamp(-1.0, 1.0))).collect(),
        )
    };
    (to_tensor(a), to_tensor(b), mask)
}

/// Deterministic two-class texture dataset: smooth blobs (majority) versus
/// the same blobs overlaid with stripes (minority), on shared backgrounds.
pub fn synth_texture_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<ImbalancedDataset<T>> {
    spec.validate()?;
    let DatasetSource::Synthetic { style } = &spec.source else {
        return Err(Error::config("dataset.source", "expected a synthetic source"));
    };
    if spec.image_size < 16 {
        return Err(Error::config(
            "dataset.image_size",
            format!("{} px cannot resolve stripe textures (minimum 16)", spec.image_size),
        ));
    }
    let (na, nb) = (spec.n_majority, spec.n_minority);
    let (v, t) = (spec.val_per_class, spec.test_per_class);
    // one source index per example; ranges never overlap across splits
    let ranges: [(ClassLabel, usize); 6] = [
        (ClassLabel::A, na),
        (ClassLabel::B, nb),
        (ClassLabel::A, v),
        (ClassLabel::B, v),
        (ClassLabel::A, t),
        (ClassLabel::B, t),
    ];
    let mut jobs = Vec::new();
    let mut start = 0;
    for (split, &(label, count)) in ranges.iter().enumerate() {
        for i in 0..count {
            jobs.push((split, label, start + i));
        }
        start += count;
    }
    let size = spec.image_size;
    let seed = spec.seed;
    let rendered: Vec<(usize, LabeledExample<T>)> = jobs
        .par_iter()
        .map(|&(split, label, index)| {
            let (a, b, _) = render_texture_pair::<T>(seed, index, size, style);
            let image = if label == ClassLabel::A { a } else { b };
            (
                split,
                LabeledExample {
                    image,
                    label,
                    source_id: format!("synthetic:{index}"),
                },
            )
        })
        .collect();
    let mut splits: [Vec<LabeledExample<T>>; 6] = Default::default();
    for (split, ex) in rendered {
        splits[split].push(ex);
    }
    let [train_a, train_b, val_a, val_b, test_a, test_b] = splits;
    let val = val_a.into_iter().chain(val_b).collect();
    let test = test_a.into_iter().chain(test_b).collect();
    ImbalancedDataset::new(train_a, train_b, val, test, ("smooth".into(), "striped".into()))
}

/// Seed used for a dataset's batch order, separate from its content seed.
pub fn schedule_seed(base: u64) -> u64 {
    derive_seed(base, "batches")
}
