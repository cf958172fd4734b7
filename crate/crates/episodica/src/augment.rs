//! Stochastic data augmentation: the module that turns an input minibatch
//! into an aligned (query, key) pair of augmented minibatches.
//!
//! Three transforms are implemented — random resized crop (+ horizontal
//! flip), color distortion, and gaussian blur — and a training run uses
//! exactly two of them, followed by per-channel normalization. All
//! randomness flows through splittable counter-based streams keyed by
//! (seed, epoch, batch, image, view/transform), so results are
//! reproducible regardless of thread scheduling.
//!
//! # Example
//!
//! ```
//! use episodica::augment::{make_pair, AugmentConfig, BatchPosition, Image};
//!
//! let cfg = AugmentConfig::default();
//! let batch = vec![Image::constant(3, cfg.image_size, cfg.image_size, 0.5); 4];
//! let pos = BatchPosition { epoch: 0, batch: 0 };
//! let (queries, keys) = make_pair(&batch, &cfg, pos)?;
//! // same stream key, same views: augmentation is fully deterministic
//! let (q2, k2) = make_pair(&batch, &cfg, pos)?;
//! assert_eq!(queries, q2);
//! assert_eq!(keys, k2);
//! # Ok::<(), episodica::Error>(())
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CHW float image, values in [0,1] before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Promote a grayscale image to RGB by channel replication.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.height * self.width);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image { channels: 3, height: self.height, width: self.width, data }
    }

    /// Rank-3 tensor view (C, H, W).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_shape_data(vec![self.channels, self.height, self.width], self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Which two of the three transforms a run uses, in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformPair {
    CropDistort,
    CropBlur,
    DistortBlur,
}

impl TransformPair {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformPair::CropDistort => "crop+distort",
            TransformPair::CropBlur => "crop+blur",
            TransformPair::DistortBlur => "distort+blur",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crop+distort" => Ok(TransformPair::CropDistort),
            "crop+blur" => Ok(TransformPair::CropBlur),
            "distort+blur" => Ok(TransformPair::DistortBlur),
            other => Err(Error::Config(format!(
                "unknown transform pair '{other}' (expected crop+distort, crop+blur, distort+blur)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub image_size: usize,
    pub jitter_strength: f32,
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
    pub transform_pair: TransformPair,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            image_size: 16,
            jitter_strength: 1.0,
            image_mean: [0.5, 0.5, 0.5],
            image_std: [0.5, 0.5, 0.5],
            // best-performing combination; see the guide chapter on augmentation
            transform_pair: TransformPair::CropDistort,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_strength < 0.0 {
            return Err(Error::Config("jitter_strength must be nonnegative".into()));
        }
        if self.image_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("image_std must be positive per channel".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

// ---- rng streams ----------------------------------------------------------

/// Identifies one independent random stream inside a run.
#[derive(Clone, Copy, Debug)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub image: u64,
    /// Transform id folded with the view: `view * 3 + {0 crop, 1 distort, 2 blur}`.
    pub transform: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl StreamKey {
    /// Counter-based stream: the key fields are hashed into a ChaCha seed,
    /// so streams are independent of scheduling order.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut acc = self.seed;
        for (i, field) in
            [self.seed, self.epoch, self.batch, self.image, self.transform].iter().enumerate()
        {
            acc = splitmix64(acc ^ field.wrapping_add(i as u64).wrapping_mul(0x2545f4914f6cdd1d));
            seed[i * 8 % 32..i * 8 % 32 + 8]
                .iter_mut()
                .zip(acc.to_le_bytes())
                .for_each(|(b, v)| *b ^= v);
        }
        // one extra mix round so the last field diffuses into all words
        for w in 0..4 {
            acc = splitmix64(acc);
            seed[w * 8..w * 8 + 8].iter_mut().zip(acc.to_le_bytes()).for_each(|(b, v)| *b ^= v);
        }
        ChaCha8Rng::from_seed(seed)
    }
}

// ---- geometric transforms -------------------------------------------------

/// Horizontal mirror.
pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Bilinear resize to `out_h x out_w` (half-pixel centers).
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::constant(img.channels, out_h, out_w, 0.0);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..img.channels {
                let v = (1.0 - wy) * (1.0 - wx) * img.get(c, y0, x0) as f64
                    + (1.0 - wy) * wx * img.get(c, y0, x1) as f64
                    + wy * (1.0 - wx) * img.get(c, y1, x0) as f64
                    + wy * wx * img.get(c, y1, x1) as f64;
                out.set(c, y, x, v as f32);
            }
        }
    }
    out
}

/// Crop the given rectangle and bilinearly resize to `size x size`.
pub fn crop_resize(img: &Image, x0: usize, y0: usize, cw: usize, ch: usize, size: usize) -> Image {
    let mut cropped = Image::constant(img.channels, ch, cw, 0.0);
    for c in 0..img.channels {
        for y in 0..ch {
            for x in 0..cw {
                cropped.set(c, y, x, img.get(c, y0 + y, x0 + x));
            }
        }
    }
    bilinear_resize(&cropped, size, size)
}

/// Crop a random area fraction in [0.08, 1.0] with aspect ratio in
/// [3/4, 4/3] (log-uniform), resize to `image_size`, flip with p = 0.5.
/// Falls back to a center crop after 10 failed sampling attempts.
pub fn random_resized_crop(img: &Image, image_size: usize, rng: &mut impl Rng) -> Result<Image> {
    if img.height < 8 || img.width < 8 {
        return Err(Error::Shape(format!(
            "random_resized_crop needs at least 8x8 input, got {}x{}",
            img.height, img.width
        )));
    }
    let area = (img.height * img.width) as f64;
    let mut rect = None;
    for _ in 0..10 {
        let target = area * rng.gen_range(0.08..=1.0);
        let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= img.width && ch <= img.height {
            let x0 = rng.gen_range(0..=img.width - cw);
            let y0 = rng.gen_range(0..=img.height - ch);
            rect = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = rect.unwrap_or_else(|| {
        let side = img.width.min(img.height);
        ((img.width - side) / 2, (img.height - side) / 2, side, side)
    });
    let resized = crop_resize(img, x0, y0, cw, ch, image_size);
    Ok(if rng.gen_bool(0.5) { hflip(&resized) } else { resized })
}

// ---- photometric transforms -----------------------------------------------

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp01(img: &Image) -> Image {
    img.map(|x| x.clamp(0.0, 1.0))
}

/// Luminance grayscale, replicated to 3 channels.
pub fn grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Shape("grayscale expects a 3-channel image".into()));
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luminance(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                out.set(c, y, x, l);
            }
        }
    }
    Ok(out)
}

fn adjust_brightness(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    clamp01(&img.map(|x| x * factor))
}

fn adjust_contrast(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let mut mean = 0.0f64;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luminance(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)) as f64;
        }
    }
    let mean = (mean / (img.height * img.width) as f64) as f32;
    clamp01(&img.map(|x| (x - mean) * factor + mean))
}

fn adjust_saturation(img: &Image, factor: f32) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luminance(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                out.set(c, y, x, ((img.get(c, y, x) - l) * factor + l).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max == 0.0 { 0.0 } else { d / max };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d) % 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h.rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shift hue by `delta` turns via HSV.
fn adjust_hue(img: &Image, delta: f32) -> Image {
    if delta == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) = rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + delta, s, v);
            out.set(0, y, x, r.clamp(0.0, 1.0));
            out.set(1, y, x, g.clamp(0.0, 1.0));
            out.set(2, y, x, b.clamp(0.0, 1.0));
        }
    }
    out
}

/// Color distortion at strength `s`: with p = 0.8 a color jitter with
/// strengths (0.8s, 0.8s, 0.8s, 0.2s) applied brightness, contrast,
/// saturation, then hue; then with p = 0.2 conversion to grayscale.
pub fn color_distortion(img: &Image, s: f32, rng: &mut impl Rng) -> Result<Image> {
    if s < 0.0 {
        return Err(Error::Config("jitter strength must be nonnegative".into()));
    }
    if img.channels != 3 {
        return Err(Error::Shape("color_distortion expects a 3-channel image".into()));
    }
    let mut out = img.clone();
    if rng.gen_bool(0.8) {
        let beta = 0.8 * s;
        let lo = (1.0 - beta).max(0.0);
        let hi = 1.0 + beta;
        let fb = rng.gen_range(lo..=hi);
        let fc = rng.gen_range(lo..=hi);
        let fs = rng.gen_range(lo..=hi);
        let dh = if s == 0.0 { 0.0 } else { rng.gen_range(-0.2 * s..=0.2 * s) };
        out = adjust_brightness(&out, fb);
        out = adjust_contrast(&out, fc);
        out = adjust_saturation(&out, fs);
        out = adjust_hue(&out, dh);
    }
    if rng.gen_bool(0.2) {
        out = grayscale(&out)?;
    }
    Ok(clamp01(&out))
}

// ---- gaussian blur --------------------------------------------------------

/// Kernel size rule: 10% of the configured image size, rounded to the
/// nearest odd integer (ties upward), never below 3.
pub fn blur_kernel_size(image_size: usize) -> usize {
    let r = image_size as f64 / 10.0;
    // nearest odd integer 2m+1, ties rounding up
    let m = ((r - 1.0) / 2.0).round().max(0.0) as usize;
    (2 * m + 1).max(3)
}

/// Normalized 1-D gaussian kernel of the given odd size.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> =
        (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.iter().map(|&v| v as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    // reflect-without-repeat padding: -1 -> 1, n -> n-2
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Separable convolution with a 1-D kernel along both axes, reflect padding.
pub fn convolve_separable(img: &Image, kernel: &[f32]) -> Image {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - half, img.width);
                    acc += kv as f64 * img.get(c, y, sx) as f64;
                }
                tmp.set(c, y, x, acc as f32);
            }
        }
    }
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - half, img.height);
                    acc += kv as f64 * tmp.get(c, sy, x) as f64;
                }
                out.set(c, y, x, acc as f32);
            }
        }
    }
    out
}

/// With p = 0.5, blur with a separable gaussian kernel sized from
/// `image_size` and sigma ~ Uniform(0.1, 2.0); otherwise identity.
pub fn gaussian_blur(img: &Image, image_size: usize, rng: &mut impl Rng) -> Result<Image> {
    if image_size < 10 {
        return Err(Error::Config("gaussian_blur requires image_size >= 10".into()));
    }
    if !rng.gen_bool(0.5) {
        return Ok(img.clone());
    }
    let sigma = rng.gen_range(0.1..=2.0);
    let kernel = gaussian_kernel(blur_kernel_size(image_size), sigma);
    Ok(convolve_separable(img, &kernel))
}

// ---- normalization --------------------------------------------------------

/// Per-channel (x - mean) / std.
pub fn normalize(img: &Image, mean: &[f32], std: &[f32]) -> Result<Image> {
    if mean.len() < img.channels || std.len() < img.channels {
        return Err(Error::Config("normalize: mean/std shorter than channel count".into()));
    }
    if std.iter().take(img.channels).any(|&s| s <= 0.0) {
        return Err(Error::Config("normalize: std must be positive".into()));
    }
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, (img.get(c, y, x) - mean[c]) / std[c]);
            }
        }
    }
    Ok(out)
}

pub fn denormalize(img: &Image, mean: &[f32], std: &[f32]) -> Result<Image> {
    if std.iter().take(img.channels).any(|&s| s <= 0.0) {
        return Err(Error::Config("denormalize: std must be positive".into()));
    }
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.get(c, y, x) * std[c] + mean[c]);
            }
        }
    }
    Ok(out)
}

// ---- pipeline -------------------------------------------------------------

/// Where a batch sits inside a run, for rng stream derivation.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchPosition {
    pub epoch: u64,
    pub batch: u64,
}

/// Apply the configured transform pair (in listed order) plus normalization
/// to one image, using the stream for (image index, view).
pub fn augment_view(
    img: &Image,
    cfg: &AugmentConfig,
    pos: BatchPosition,
    image_index: u64,
    view: u64,
) -> Result<Image> {
    cfg.validate()?;
    let key = |transform: u64| StreamKey {
        seed: cfg.rng_seed,
        epoch: pos.epoch,
        batch: pos.batch,
        image: image_index,
        transform: view * 3 + transform,
    };
    let mut out = img.to_rgb();
    let (first, second) = match cfg.transform_pair {
        TransformPair::CropDistort => (0u64, 1u64),
        TransformPair::CropBlur => (0, 2),
        TransformPair::DistortBlur => (1, 2),
    };
    for t in [first, second] {
        let mut rng = key(t).rng();
        out = match t {
            0 => random_resized_crop(&out, cfg.image_size, &mut rng)?,
            1 => color_distortion(&out, cfg.jitter_strength, &mut rng)?,
            _ => gaussian_blur(&out, cfg.image_size, &mut rng)?,
        };
    }
    normalize(&out, &cfg.image_mean, &cfg.image_std)
}

/// Augment a minibatch into aligned query and key batches: position `i` in
/// both outputs derives from input `i`, with independent random draws for
/// the two views.
pub fn make_pair(
    batch: &[Image],
    cfg: &AugmentConfig,
    pos: BatchPosition,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if batch.is_empty() {
        return Err(Error::Data("make_pair: empty batch".into()));
    }
    let mut queries = Vec::with_capacity(batch.len());
    let mut keys = Vec::with_capacity(batch.len());
    for (i, img) in batch.iter().enumerate() {
        queries.push(augment_view(img, cfg, pos, i as u64, 0)?);
        keys.push(augment_view(img, cfg, pos, i as u64, 1)?);
    }
    Ok((queries, keys))
}
