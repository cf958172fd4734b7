//! Synthetic desk-scale dataset: oriented sinusoid gratings whose
//! frequency and orientation encode the class, with per-image phase
//! jitter and Gaussian pixel noise as nuisances. Train and test splits
//! use disjoint class ids (base vs novel classes).

use std::path::Path;

use rand::Rng;
use rand_distr::Distribution;

use crate::augment::{Image, StreamKey};
use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::data::ppm::save_ppm_pgm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// images generated per class
    pub per_class: usize,
    pub image_size: usize,
    /// stddev of additive Gaussian pixel noise
    pub noise: f32,
    /// half-range of the uniform per-image phase offset, radians
    pub phase_jitter: f32,
    /// how many of the highest class ids form the held-out test split
    pub n_test_classes: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n_classes` split into roughly two-thirds base classes and
    /// one-third novel classes.
    pub fn new(n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_classes,
            per_class,
            image_size,
            noise: 0.1,
            phase_jitter: 0.8,
            n_test_classes: (n_classes / 3).max(1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.per_class == 0 || self.image_size == 0 {
            return Err(Error::Config("synthetic spec: counts must be positive".into()));
        }
        if self.n_test_classes == 0 || self.n_test_classes >= self.n_classes {
            return Err(Error::Config(format!(
                "synthetic spec: n_test_classes {} must be in 1..{}",
                self.n_test_classes, self.n_classes
            )));
        }
        Ok(())
    }

    /// The distinct (cycles-per-image, orientation) pair coding `class`.
    pub fn class_params(&self, class: usize) -> (f32, f32) {
        let freq = 2.0 + (class % 4) as f32;
        let angle = std::f32::consts::PI * (class / 4) as f32
            / ((self.n_classes + 3) / 4).max(1) as f32;
        (freq, angle)
    }

    pub fn split_of(&self, class: usize) -> Split {
        if class >= self.n_classes - self.n_test_classes {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Render one grating: `0.5 + 0.5 sin(2 pi f u / size + phase)` along the
/// class orientation, replicated to RGB, plus Gaussian noise, clamped to
/// [0,1].
fn render(spec: &SyntheticSpec, class: usize, index: usize) -> Image {
    let mut rng =
        StreamKey { seed: spec.seed, epoch: class as u64, batch: index as u64, image: 0, transform: 0 }
            .rng();
    let (freq, angle) = spec.class_params(class);
    let phase = if spec.phase_jitter > 0.0 {
        rng.gen_range(-spec.phase_jitter..spec.phase_jitter)
    } else {
        0.0
    };
    let (sin_a, cos_a) = angle.sin_cos();
    let size = spec.image_size;
    let mut plane = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f32 * cos_a + y as f32 * sin_a;
            let v = 0.5
                + 0.5 * (std::f32::consts::TAU * freq * u / size as f32 + phase).sin();
            plane.push(v);
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    let img = Image::new(3, size, size, data).unwrap();
    if spec.noise > 0.0 {
        img.map(|v| {
            let n: f32 = rand_distr::StandardNormal.sample(&mut rng);
            (v + spec.noise * n).clamp(0.0, 1.0)
        })
    } else {
        img
    }
}

/// Generate the full labeled image set, ordered by (class, index).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<(Image, usize)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_classes * spec.per_class);
    for class in 0..spec.n_classes {
        for index in 0..spec.per_class {
            out.push((render(spec, class, index), class));
        }
    }
    Ok(out)
}

/// Write the dataset as PPM files under `dir` plus a `manifest.txt` with
/// disjoint train/test class ids.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let images = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut index_in_class = 0usize;
    let mut last_class = usize::MAX;
    for (img, class) in &images {
        if *class != last_class {
            index_in_class = 0;
            last_class = *class;
        }
        let name = format!("class{class:03}_img{index_in_class:03}.ppm");
        save_ppm_pgm(&dir.join(&name), img)?;
        entries.push(ManifestEntry { path: name, class_id: *class, split: spec.split_of(*class) });
        index_in_class += 1;
    }
    let manifest = DatasetManifest::new(dir.to_path_buf(), entries)?;
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
