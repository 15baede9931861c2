//! Procedural single-channel texture dataset.
//!
//! Each class is one texture family; instances get a random phase or
//! offset, random gray levels, and uniform noise. Splits draw from
//! separate ChaCha streams of the same seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, TensorF32};

const MAGIC: &[u8; 4] = b"QFDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

/// Texture families, in class-index order.
pub const TEXTURE_FAMILIES: [&str; 8] = [
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "checkerboard",
    "centered-disk",
    "corner-gradient",
    "ring",
    "two-gray-solid",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Holdout => "holdout",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Holdout => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: TensorF32,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> TensorF32 {
        self.images.item(i)
    }

    pub fn image_data(&self, i: usize) -> &[f32] {
        let len = self.images.shape().item_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let shape = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * shape.item_len());
        for &i in indices {
            data.extend_from_slice(self.image_data(i));
        }
        Ok(Dataset {
            images: TensorF32::new(shape.with_batch(indices.len()), data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        })
    }

    /// The first `per_class` images of every class, in class order.
    pub fn per_class(&self, per_class: usize) -> Result<Dataset> {
        let mut picked = Vec::new();
        for c in 0..self.classes {
            picked.extend(
                self.labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == c)
                    .map(|(i, _)| i)
                    .take(per_class),
            );
        }
        if picked.is_empty() {
            return Err(Error::InvalidArgument("no images selected".into()));
        }
        self.subset(&picked)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub holdout: usize,
    pub noise: f32,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 8,
            image_size: 16,
            train: 2000,
            val: 1000,
            holdout: 1000,
            noise: 0.1,
        }
    }
}

impl GenSpec {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Holdout => self.holdout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > TEXTURE_FAMILIES.len() {
            return Err(Error::InvalidArgument(format!(
                "classes must be in 2..={}, got {}",
                TEXTURE_FAMILIES.len(),
                self.classes
            )));
        }
        if self.image_size < 4 {
            return Err(Error::InvalidArgument("image size must be at least 4".into()));
        }
        if self.train == 0 || self.val == 0 || self.holdout == 0 {
            return Err(Error::InvalidArgument("split counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::InvalidArgument("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn render(class: usize, size: usize, noise: f32, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let lo: f32 = rng.random_range(0.1..0.3);
    let hi: f32 = rng.random_range(0.7..0.9);
    let phase: usize = rng.random_range(0..2);
    let s = size as f32;
    let cx = s / 2.0 - 0.5 + rng.random_range(-1.0f32..1.0);
    let cy = s / 2.0 - 0.5 + rng.random_range(-1.0f32..1.0);
    let radius: f32 = match class {
        4 => rng.random_range(0.2..0.3) * s,
        6 => rng.random_range(0.25..0.35) * s,
        _ => 0.0,
    };
    let split_col = (size / 2) as i64 + rng.random_range(-1i64..=1);
    let (left, right): (f32, f32) = (rng.random_range(0.2..0.4), rng.random_range(0.6..0.8));
    let cell = (size / 4).max(1);
    for y in 0..size {
        for x in 0..size {
            let on = |b: bool| if b { hi } else { lo };
            let base = match class {
                0 => on((y + phase) % 4 < 2),
                1 => on((x + phase) % 4 < 2),
                2 => on((x + y + phase) % 4 < 2),
                3 => on(((x + phase) / cell + (y + phase) / cell).is_multiple_of(2)),
                4 => {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    on(d <= radius)
                }
                5 => lo + (hi - lo) * (x + y) as f32 / (2.0 * (s - 1.0)),
                6 => {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    on((d - radius).abs() < 1.0)
                }
                _ => {
                    if (x as i64) < split_col {
                        left
                    } else {
                        right
                    }
                }
            };
            let n = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            out[y * size + x] = (base + n).clamp(0.0, 1.0);
        }
    }
}

fn generate_split(spec: &GenSpec, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let n = spec.count(split);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let px = spec.image_size * spec.image_size;
    let mut data = vec![0.0f32; n * px];
    for (img, &label) in data.chunks_exact_mut(px).zip(&labels) {
        render(label, spec.image_size, spec.noise, &mut rng, img);
    }
    Ok(Dataset {
        images: TensorF32::new(Shape::new(n, spec.image_size, spec.image_size, 1)?, data)?,
        labels,
        classes: spec.classes,
        split,
    })
}

/// Train, val, and holdout splits.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, Split::Train)?,
        generate_split(spec, Split::Val)?,
        generate_split(spec, Split::Holdout)?,
    ))
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let s = d.images.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + d.images.data().len() * 4 + d.len() * 2);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        d.len() as u32,
        s.h() as u32,
        s.w() as u32,
        d.classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in d.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &d.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8], split: Split, path: &Path) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
    };
    let version = word(0);
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let (n, h, w, classes) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    let px = n * h * w;
    let expected = HEADER_LEN + px * 4 + n * 2;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {} (truncated?)", bytes.len()),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    let data: Vec<f32> = body[..px * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let labels: Vec<usize> = body[px * 4..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::format(path, format!("label {bad} out of range")));
    }
    Ok(Dataset {
        images: TensorF32::new(Shape::new(n, h, w, 1)?, data)?,
        labels,
        classes,
        split,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, split, path)
}

/// `DIR/<split>.bin`
pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.bin", split.as_str()))
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    load_dataset(&split_path(dir, split), split)
}

pub fn save_splits(dir: &Path, splits: [&Dataset; 3]) -> Result<()> {
    for d in splits {
        save_dataset(d, &split_path(dir, d.split))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_under_seed() {
        let spec = GenSpec {
            train: 64,
            val: 32,
            holdout: 32,
            ..GenSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate(&GenSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.0.images, other.0.images);
    }

    #[test]
    fn balanced_two_class_split() {
        let spec = GenSpec {
            classes: 2,
            train: 100,
            val: 100,
            holdout: 100,
            ..GenSpec::default()
        };
        let (tr, va, ho) = generate(&spec).unwrap();
        for d in [tr, va, ho] {
            for c in d.class_counts() {
                assert!((49..=51).contains(&c), "{c}");
            }
        }
        let spec = GenSpec {
            train: 101,
            ..GenSpec::default()
        };
        let counts = generate(&spec).unwrap().0.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn values_in_unit_range() {
        let (tr, _, _) = generate(&GenSpec {
            train: 200,
            val: 1,
            holdout: 1,
            ..GenSpec::default()
        })
        .unwrap();
        assert!(tr.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_many_classes_rejected() {
        let spec = GenSpec {
            classes: 9,
            ..GenSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
        let spec = GenSpec {
            val: 0,
            ..GenSpec::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let (tr, va, ho) = generate(&GenSpec::default()).unwrap();
        let mut seen = HashSet::new();
        for d in [&tr, &va, &ho] {
            for i in 0..d.len() {
                let bits: Vec<u32> = d.image_data(i).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(bits), "duplicate image in {:?}", d.split);
            }
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, _, _) = generate(&GenSpec {
            train: 20,
            val: 1,
            holdout: 1,
            ..GenSpec::default()
        })
        .unwrap();
        let p = dir.path().join("train.bin");
        save_dataset(&tr, &p).unwrap();
        assert_eq!(load_dataset(&p, Split::Train).unwrap(), tr);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_dataset(&p, Split::Train),
            Err(Error::Format { .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(load_dataset(&p, Split::Train).is_err());

        let mut v2 = bytes;
        v2[4] = 2;
        fs::write(&p, &v2).unwrap();
        assert!(matches!(
            load_dataset(&p, Split::Train),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn per_class_picks_one_of_each() {
        let (tr, _, _) = generate(&GenSpec {
            train: 64,
            val: 1,
            holdout: 1,
            ..GenSpec::default()
        })
        .unwrap();
        let calib = tr.per_class(1).unwrap();
        assert_eq!(calib.labels, (0..8).collect::<Vec<_>>());
    }
}
