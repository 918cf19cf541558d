//! Dataset ingestion: image folders with one subdirectory per domain, an
//! in-memory dataset, and label-preserving augmentation.

pub mod synth;

use crate::error::{ensure_contract, Error, Result};
use crate::latent::{DomainDictionary, DomainLabel};
use ndarray::Array3;
use rand::Rng;
use std::path::{Path, PathBuf};

/// Generation parameters of a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthMeta {
    pub domain_idx: usize,
    /// Relative center in [0, 1]^2.
    pub cx: f64,
    pub cy: f64,
    /// Relative size parameter (disc radius / square half-side).
    pub radius: f64,
    /// Fill hue in [0, 1).
    pub hue: f64,
}

/// Source identification for a sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleMeta {
    Synthetic(SynthMeta),
    File(PathBuf),
}

/// One dataset element: pixels in [-1, 1], CHW layout.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f32>,
    pub domain: DomainLabel,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.image.iter().all(|v| (-1.0..=1.0).contains(v)),
            "sample pixels out of [-1, 1]"
        );
        self.domain.validate()
    }
}

/// Read-only source of samples; concurrent readers are safe.
pub trait DataSource: Send + Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, idx: usize) -> Result<Sample>;
    fn dict(&self) -> &DomainDictionary;
    /// Indices belonging to one domain.
    fn domain_indices(&self, domain_idx: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                self.get(i)
                    .ok()
                    .and_then(|s| self.dict().index_of(&s.domain))
                    == Some(domain_idx)
            })
            .collect()
    }
}

/// Fully materialized dataset.
#[derive(Debug, Clone)]
pub struct MemoryDataset {
    pub samples: Vec<Sample>,
    pub dict: DomainDictionary,
}

impl DataSource for MemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn get(&self, idx: usize) -> Result<Sample> {
        Ok(self.samples[idx].clone())
    }
    fn dict(&self) -> &DomainDictionary {
        &self.dict
    }
}

/// Lazily decoded image-folder dataset: `root/<domain>/<file>`.
#[derive(Debug)]
pub struct FolderDataset {
    entries: Vec<(PathBuf, usize)>,
    dict: DomainDictionary,
    image_size: usize,
    /// Files that failed to decode during the initial scan.
    pub skipped: usize,
}

impl DataSource for FolderDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn get(&self, idx: usize) -> Result<Sample> {
        let (path, dom) = &self.entries[idx];
        let image = decode_image(path, self.image_size)?;
        Ok(Sample {
            image,
            domain: self.dict.label_at(*dom)?,
            meta: SampleMeta::File(path.clone()),
        })
    }
    fn dict(&self) -> &DomainDictionary {
        &self.dict
    }
    fn domain_indices(&self, domain_idx: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (_, d))| *d == domain_idx)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Build a dataset from image folders. The domain dictionary is built from
/// subdirectory names in sorted order; undecodable files are skipped and
/// counted. Each image is resized to `image_size` on access.
pub fn load_image_folders(root: &Path, image_size: usize) -> Result<FolderDataset> {
    ensure_contract!(image_size % 16 == 0, "image_size must be divisible by 16");
    let mut domains: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    domains.sort();
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "dataset root {} must contain at least 2 domain subdirectories (mismatch \
             sampling needs an alternative domain), found {}",
            root.display(),
            domains.len()
        )));
    }
    let dict = DomainDictionary::discrete(domains.clone())?;
    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for (dom_idx, dom) in domains.iter().enumerate() {
        let dir = root.join(dom);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = entries.len();
        for f in files {
            // Probe decodability once at scan time so training never trips
            // over a broken file mid-run.
            match image::open(&f) {
                Ok(_) => entries.push((f, dom_idx)),
                Err(_) => skipped += 1,
            }
        }
        if entries.len() == before {
            return Err(Error::Config(format!(
                "domain directory {} contains no decodable images",
                dir.display()
            )));
        }
    }
    Ok(FolderDataset {
        entries,
        dict,
        image_size,
        skipped,
    })
}

/// Decode and resize an image file to `[3, size, size]` in [-1, 1].
pub fn decode_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path)?;
    let img = img.resize_exact(
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let rgb = img.to_rgb8();
    let mut out = Array3::<f32>::zeros((3, size, size));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Write a `[3,H,W]` image in [-1, 1] as a PNG.
pub fn save_image_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    ensure_contract!(c == 3, "save_image_png expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = (image[[ch, y, x]] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Augmentation policy; label-preserving by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub hflip: bool,
    /// Minimum crop scale; crops are `[scale, 1.0]` of the side, resized back.
    pub crop_min_scale: Option<f64>,
}

impl AugmentPolicy {
    pub fn off() -> Self {
        AugmentPolicy {
            hflip: false,
            crop_min_scale: None,
        }
    }
}

/// Flip a CHW image horizontally.
pub fn hflip(image: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| image[[ci, y, w - 1 - x]])
}

/// Bilinear resize of a CHW image.
pub fn resize_bilinear(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let fy = (y as f32 + 0.5) * h as f32 / oh as f32 - 0.5;
            let fx = (x as f32 + 0.5) * w as f32 / ow as f32 - 0.5;
            let y0 = fy.floor().clamp(0.0, (h - 1) as f32) as usize;
            let x0 = fx.floor().clamp(0.0, (w - 1) as f32) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dy = (fy - y0 as f32).clamp(0.0, 1.0);
            let dx = (fx - x0 as f32).clamp(0.0, 1.0);
            for ci in 0..c {
                let v00 = image[[ci, y0, x0]];
                let v01 = image[[ci, y0, x1]];
                let v10 = image[[ci, y1, x0]];
                let v11 = image[[ci, y1, x1]];
                let top = v00 * (1.0 - dx) + v01 * dx;
                let bot = v10 * (1.0 - dx) + v11 * dx;
                out[[ci, y, x]] = (top * (1.0 - dy) + bot * dy).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

/// Apply the augmentation policy: optional horizontal flip, optional random
/// crop-resize (always within bounds, never padded).
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Sample {
    let mut image = sample.image.clone();
    if policy.hflip && rng.random_range(0.0..1.0) < 0.5 {
        image = hflip(&image);
    }
    if let Some(min_scale) = policy.crop_min_scale {
        let (_, h, w) = image.dim();
        let scale = rng.random_range(min_scale..=1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let oy = rng.random_range(0..=h - ch);
        let ox = rng.random_range(0..=w - cw);
        let crop = image
            .slice(ndarray::s![.., oy..oy + ch, ox..ox + cw])
            .to_owned();
        image = resize_bilinear(&crop, h, w);
    }
    Sample {
        image,
        domain: sample.domain.clone(),
        meta: sample.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_sample() -> Sample {
        let image = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + y * 8 + x) as f32 / 100.0).clamp(-1.0, 1.0)
        });
        Sample {
            image,
            domain: DomainLabel::one_hot(0, 2).unwrap(),
            meta: SampleMeta::Synthetic(SynthMeta {
                domain_idx: 0,
                cx: 0.5,
                cy: 0.5,
                radius: 0.2,
                hue: 0.1,
            }),
        }
    }

    #[test]
    fn augment_off_is_identity() {
        let s = toy_sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &mut rng, &AugmentPolicy::off());
        assert_eq!(out.image, s.image);
    }

    #[test]
    fn hflip_is_involution() {
        let s = toy_sample();
        assert_eq!(hflip(&hflip(&s.image)), s.image);
    }

    #[test]
    fn crops_never_pad() {
        let s = toy_sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = AugmentPolicy {
            hflip: false,
            crop_min_scale: Some(0.5),
        };
        for _ in 0..50 {
            let out = augment(&s, &mut rng, &policy);
            assert_eq!(out.image.dim(), s.image.dim());
            assert!(out.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn folder_loading_counts_and_sorted_domains() {
        let dir = tempfile::tempdir().unwrap();
        for (dom, n) in [("summer", 3), ("winter", 4)] {
            let sub = dir.path().join(dom);
            std::fs::create_dir(&sub).unwrap();
            for i in 0..n {
                let img = Array3::<f32>::from_elem((3, 32, 32), 0.25);
                save_image_png(&sub.join(format!("{i}.png")), &img).unwrap();
            }
        }
        // One undecodable file.
        std::fs::write(dir.path().join("summer").join("junk.png"), b"nope").unwrap();

        let ds = load_image_folders(dir.path(), 32).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.skipped, 1);
        assert_eq!(ds.dict().names(), &["summer".to_string(), "winter".into()]);
        let again = load_image_folders(dir.path(), 32).unwrap();
        assert_eq!(again.dict(), ds.dict());
        let s = ds.get(0).unwrap();
        s.validate().unwrap();
        assert_eq!(s.image.dim(), (3, 32, 32));
    }

    #[test]
    fn folder_loading_single_domain_errors() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("only");
        std::fs::create_dir(&sub).unwrap();
        let img = Array3::<f32>::zeros((3, 16, 16));
        save_image_png(&sub.join("a.png"), &img).unwrap();
        assert!(load_image_folders(dir.path(), 16).is_err());
    }

    #[test]
    fn png_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            (((c * 89 + y * 13 + x * 7) % 255) as f32 / 127.5) - 1.0
        });
        let path = dir.path().join("x.png");
        save_image_png(&path, &img).unwrap();
        let back = decode_image(&path, 16).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 100.0, "{a} vs {b}");
        }
    }
}
