//! Raster geometry, normalization and augmentation.
//!
//! Images are `H×W×3` buffers of `f64` in row-major HWC order. Pixel `(r, c)`
//! covers the unit square whose center sits at `(c + 0.5, r + 0.5)`; every
//! resampling operation uses that half-pixel-center convention.
//!
//! Colour jitter works in HSV (hexcone model, all components in `[0, 1]`,
//! hue in turns). With `m` the mean value channel of the image after the
//! brightness step, the operations are applied in this order:
//!
//! ```text
//! brightness:  V ← clamp(V + δb)
//! contrast:    V ← clamp(m + fc·(V − m))
//! saturation:  S ← clamp(S·fs)
//! hue:         H ← (H + δh) mod 1
//! ```
//!
//! followed by conversion back to RGB and a final clamp to `[0, 1]`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::write_atomic;
use crate::{Error, Result};

pub const CHANNELS: usize = 3;
pub const TENSOR_MAGIC: &[u8; 4] = b"FENS";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape {
                context: "image buffer",
                expected: height * width * CHANNELS,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        height: usize,
        width: usize,
        mut f: F,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..CHANNELS {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * CHANNELS + ch]
    }

    #[inline]
    fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Decodes a PNG (8-bit RGB/RGBA, alpha dropped) or binary PPM file to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit PNG, clamping values to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        write_atomic(path, &out)
    }

    /// Raw tensor export: `"FENS"`, `u32` height, width, channels (little
    /// endian), then `H·W·C` little-endian `f32` values in HWC order.
    pub fn to_tensor_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        for dim in [self.height, self.width, CHANNELS] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.write_all(&(v as f32).to_le_bytes()).expect("vec write");
        }
        out
    }

    pub fn from_tensor_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::Schema("not a FENS tensor".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(4), dim(8), dim(12));
        if c != CHANNELS || bytes.len() != 16 + h * w * c * 4 {
            return Err(Error::Schema("FENS tensor size does not match header".into()));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Self::new(h, w, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraProfile {
    pub native_width: usize,
    pub native_height: usize,
    pub crop_size: usize,
}

impl CameraProfile {
    pub fn new(native_width: usize, native_height: usize, crop_size: usize) -> Result<Self> {
        if crop_size == 0 || crop_size > native_width.max(native_height) {
            return Err(Error::InvalidArgument(format!(
                "crop size {crop_size} must be in 1..={}",
                native_width.max(native_height)
            )));
        }
        Ok(Self {
            native_width,
            native_height,
            crop_size,
        })
    }

    /// The three fundus cameras of the RFMiD training set.
    pub fn rfmid() -> Vec<CameraProfile> {
        vec![
            CameraProfile {
                native_width: 4288,
                native_height: 2848,
                crop_size: 3464,
            },
            CameraProfile {
                native_width: 2048,
                native_height: 1536,
                crop_size: 1536,
            },
            CameraProfile {
                native_width: 2144,
                native_height: 1424,
                crop_size: 1424,
            },
        ]
    }

    pub fn matches(&self, width: usize, height: usize) -> bool {
        self.native_width == width && self.native_height == height
    }

    pub fn find(profiles: &[CameraProfile], width: usize, height: usize) -> Option<CameraProfile> {
        profiles.iter().copied().find(|p| p.matches(width, height))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub name: String,
    pub input_size: usize,
}

impl ArchPreset {
    pub fn new(name: impl Into<String>, input_size: usize) -> Result<Self> {
        if input_size == 0 {
            return Err(Error::InvalidArgument("input size must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            input_size,
        })
    }

    /// Input sizes of the backbone architectures. `other_size` applies to every
    /// architecture other than EfficientNetB4 and InceptionV3 (224 by default).
    pub fn standard(other_size: usize) -> Vec<ArchPreset> {
        vec![
            ArchPreset {
                name: "DenseNet201".into(),
                input_size: other_size,
            },
            ArchPreset {
                name: "ResNet152".into(),
                input_size: other_size,
            },
            ArchPreset {
                name: "EfficientNetB4".into(),
                input_size: 380,
            },
            ArchPreset {
                name: "InceptionV3".into(),
                input_size: 299,
            },
        ]
    }

    pub fn lookup(name: &str, other_size: usize) -> Option<ArchPreset> {
        Self::standard(other_size)
            .into_iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let s = Self { mean, std };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(
                "normalization std must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Published ImageNet channel statistics.
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::imagenet()
    }
}

/// Pads to a `max(H, W)` square, centering the original content.
pub fn square_pad(img: &ImageBuffer, fill: f64) -> ImageBuffer {
    let side = img.height.max(img.width);
    if side == img.height && side == img.width {
        return img.clone();
    }
    let top = (side - img.height) / 2;
    let left = (side - img.width) / 2;
    let mut out = ImageBuffer::filled(side, side, fill);
    for r in 0..img.height {
        let src = r * img.width * CHANNELS;
        let dst = ((r + top) * side + left) * CHANNELS;
        out.data[dst..dst + img.width * CHANNELS]
            .copy_from_slice(&img.data[src..src + img.width * CHANNELS]);
    }
    out
}

pub fn center_crop(img: &ImageBuffer, size: usize) -> Result<ImageBuffer> {
    if size > img.height || size > img.width {
        return Err(Error::CropTooLarge {
            size,
            height: img.height,
            width: img.width,
        });
    }
    let top = (img.height - size) / 2;
    let left = (img.width - size) / 2;
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for r in top..top + size {
        let start = (r * img.width + left) * CHANNELS;
        data.extend_from_slice(&img.data[start..start + size * CHANNELS]);
    }
    Ok(ImageBuffer {
        height: size,
        width: size,
        data,
    })
}

/// Source coordinate and blend weight along one axis for half-pixel-center
/// resampling with border clamping.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a virtual `src_h × src_w` image given by `get`.
fn resize_from<F>(src_h: usize, src_w: usize, size: usize, get: F) -> ImageBuffer
where
    F: Fn(usize, usize) -> [f64; 3],
{
    let rows = resize_taps(src_h, size);
    let cols = resize_taps(src_w, size);
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let (p00, p01, p10, p11) = (get(r0, c0), get(r0, c1), get(r1, c0), get(r1, c1));
            for ch in 0..CHANNELS {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fc;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fc;
                data.push(top + (bottom - top) * fr);
            }
        }
    }
    ImageBuffer {
        height: size,
        width: size,
        data,
    }
}

pub fn resize_bilinear(img: &ImageBuffer, size: usize) -> Result<ImageBuffer> {
    if size == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidArgument("cannot resize an empty image".into()));
    }
    Ok(resize_from(img.height, img.width, size, |r, c| img.pixel(r, c)))
}

pub fn normalize_zscore(img: &ImageBuffer, stats: &NormalizationStats) -> ImageBuffer {
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|px| (0..CHANNELS).map(move |ch| (px[ch] - stats.mean[ch]) / stats.std[ch]))
        .collect();
    ImageBuffer {
        height: img.height,
        width: img.width,
        data,
    }
}

pub fn denormalize_zscore(img: &ImageBuffer, stats: &NormalizationStats) -> ImageBuffer {
    let data = img
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|px| (0..CHANNELS).map(move |ch| px[ch] * stats.std[ch] + stats.mean[ch]))
        .collect();
    ImageBuffer {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Output `(height, width)` of [`preprocess`] for a given input size.
pub fn preprocess_shape(
    height: usize,
    width: usize,
    cam: Option<&CameraProfile>,
    arch: &ArchPreset,
) -> Result<(usize, usize)> {
    let side = height.max(width);
    if let Some(cam) = cam {
        if cam.crop_size > side {
            return Err(Error::CropTooLarge {
                size: cam.crop_size,
                height: side,
                width: side,
            });
        }
    }
    Ok((arch.input_size, arch.input_size))
}

/// Square pad → center crop → bilinear resize → z-score normalization.
///
/// Pad and crop are evaluated lazily while resampling, so the padded and
/// cropped intermediates are never allocated; the result is identical to the
/// composition of [`square_pad`], [`center_crop`], [`resize_bilinear`] and
/// [`normalize_zscore`]. With `cam = None` the crop step is skipped.
pub fn preprocess(
    img: &ImageBuffer,
    cam: Option<&CameraProfile>,
    arch: &ArchPreset,
    stats: &NormalizationStats,
) -> Result<ImageBuffer> {
    stats.validate()?;
    if let Some(cam) = cam {
        if !cam.matches(img.width, img.height) {
            log::warn!(
                "image {}x{} does not match camera profile {}x{}; proceeding",
                img.width,
                img.height,
                cam.native_width,
                cam.native_height
            );
        }
    }
    preprocess_shape(img.height, img.width, cam, arch)?;
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidArgument("cannot preprocess an empty image".into()));
    }
    let side = img.height.max(img.width);
    let pad_top = (side - img.height) / 2;
    let pad_left = (side - img.width) / 2;
    let (crop, crop_off) = match cam {
        Some(cam) => (cam.crop_size, (side - cam.crop_size) / 2),
        None => (side, 0),
    };
    let get = |r: usize, c: usize| -> [f64; 3] {
        let pr = r + crop_off;
        let pc = c + crop_off;
        if pr < pad_top || pc < pad_left {
            return [0.0; 3];
        }
        let (sr, sc) = (pr - pad_top, pc - pad_left);
        if sr >= img.height || sc >= img.width {
            [0.0; 3]
        } else {
            img.pixel(sr, sc)
        }
    };
    let resized = resize_from(crop, crop, arch.input_size, get);
    Ok(normalize_zscore(&resized, stats))
}

/// Like [`preprocess`], picking the camera profile by exact native resolution.
/// Unknown resolutions fall back to padding without a crop.
pub fn preprocess_auto(
    img: &ImageBuffer,
    profiles: &[CameraProfile],
    arch: &ArchPreset,
    stats: &NormalizationStats,
) -> Result<ImageBuffer> {
    let cam = CameraProfile::find(profiles, img.width, img.height);
    if cam.is_none() {
        log::warn!(
            "no camera profile for {}x{}; padding without crop",
            img.width,
            img.height
        );
    }
    preprocess(img, cam.as_ref(), arch, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness_delta: f64,
    pub contrast_factor: f64,
    pub saturation_factor: f64,
    pub hue_delta: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            flip_h: false,
            flip_v: false,
            brightness_delta: 0.0,
            contrast_factor: 1.0,
            saturation_factor: 1.0,
            hue_delta: 0.0,
        }
    }

    fn neutral_color(&self) -> bool {
        self.brightness_delta == 0.0
            && self.contrast_factor == 1.0
            && self.saturation_factor == 1.0
            && self.hue_delta == 0.0
    }
}

/// Sampling ranges for [`sample_augment_params`]. Intervals are half-open
/// `[lo, hi)`; a zero-width interval always yields `lo`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub rotation: (f64, f64),
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation: (0.0, 360.0),
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
            hue: (-0.05, 0.05),
        }
    }
}

impl AugmentRanges {
    /// Ranges that only ever produce [`AugmentParams::identity`].
    pub fn none() -> Self {
        Self {
            rotation: (0.0, 0.0),
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let intervals = [
            ("rotation", self.rotation),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ];
        for (name, (lo, hi)) in intervals {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        if self.contrast.0 < 0.0 || self.saturation.0 < 0.0 {
            return Err(Error::InvalidArgument("colour factors must be non-negative".into()));
        }
        for p in [self.flip_h_prob, self.flip_v_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("flip probability {p} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws augmentation parameters from a ChaCha8 stream seeded with `seed`,
/// in field order: rotation, flip_h, flip_v, brightness, contrast, saturation, hue.
pub fn sample_augment_params(seed: u64, ranges: &AugmentRanges) -> Result<AugmentParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |(lo, hi): (f64, f64)| {
        let u: f64 = rng.gen();
        if hi > lo {
            lo + (hi - lo) * u
        } else {
            lo
        }
    };
    let rotation = uniform(ranges.rotation);
    let flip_h = uniform((0.0, 1.0)) < ranges.flip_h_prob;
    let flip_v = uniform((0.0, 1.0)) < ranges.flip_v_prob;
    Ok(AugmentParams {
        rotation,
        flip_h,
        flip_v,
        brightness_delta: uniform(ranges.brightness),
        contrast_factor: uniform(ranges.contrast),
        saturation_factor: uniform(ranges.saturation),
        hue_delta: uniform(ranges.hue),
    })
}

/// Rotates content counter-clockwise (as displayed, rows growing downward) by
/// `degrees` about the image center. Bilinear sampling; samples falling
/// outside the source contribute 0.
pub fn rotate(img: &ImageBuffer, degrees: f64) -> ImageBuffer {
    let (h, w) = (img.height, img.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let fetch = |r: isize, c: isize| -> [f64; 3] {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            [0.0; 3]
        } else {
            img.pixel(r as usize, c as usize)
        }
    };
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..h {
        let dy = r as f64 + 0.5 - cy;
        for c in 0..w {
            let dx = c as f64 + 0.5 - cx;
            // inverse map: destination offset rotated back by the angle
            let sx = dx * cos - dy * sin + cx - 0.5;
            let sy = dx * sin + dy * cos + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let p00 = fetch(y0, x0);
            let p01 = fetch(y0, x0 + 1);
            let p10 = fetch(y0 + 1, x0);
            let p11 = fetch(y0 + 1, x0 + 1);
            for ch in 0..CHANNELS {
                let top = p00[ch] * (1.0 - fx) + p01[ch] * fx;
                let bottom = p10[ch] * (1.0 - fx) + p11[ch] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageBuffer {
        height: h,
        width: w,
        data,
    }
}

/// Mirrors columns (left ↔ right).
pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width;
    ImageBuffer::from_fn(img.height, w, |r, c, ch| img.get(r, w - 1 - c, ch))
}

/// Mirrors rows (top ↔ bottom).
pub fn flip_vertical(img: &ImageBuffer) -> ImageBuffer {
    let h = img.height;
    ImageBuffer::from_fn(h, img.width, |r, c, ch| img.get(h - 1 - r, c, ch))
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_jitter(img: &ImageBuffer, p: &AugmentParams) -> ImageBuffer {
    let mut hsv: Vec<[f64; 3]> = img
        .data
        .chunks_exact(CHANNELS)
        .map(|px| rgb_to_hsv([px[0], px[1], px[2]]))
        .collect();
    for px in &mut hsv {
        px[2] = (px[2] + p.brightness_delta).clamp(0.0, 1.0);
    }
    if !hsv.is_empty() {
        let mean_v = hsv.iter().map(|px| px[2]).sum::<f64>() / hsv.len() as f64;
        for px in &mut hsv {
            px[2] = (mean_v + p.contrast_factor * (px[2] - mean_v)).clamp(0.0, 1.0);
        }
    }
    let data = hsv
        .into_iter()
        .flat_map(|[h, s, v]| {
            let s = (s * p.saturation_factor).clamp(0.0, 1.0);
            let h = (h + p.hue_delta).rem_euclid(1.0);
            hsv_to_rgb([h, s, v]).map(|x| x.clamp(0.0, 1.0))
        })
        .collect();
    ImageBuffer {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Rotation, then flips, then colour jitter; output clamped to `[0, 1]`.
/// Steps with neutral parameters are skipped, so identity parameters return
/// the input unchanged bit for bit.
pub fn augment(img: &ImageBuffer, p: &AugmentParams) -> ImageBuffer {
    let mut out = if p.rotation != 0.0 {
        rotate(img, p.rotation)
    } else {
        img.clone()
    };
    if p.flip_h {
        out = flip_horizontal(&out);
    }
    if p.flip_v {
        out = flip_vertical(&out);
    }
    if !p.neutral_color() {
        out = color_jitter(&out, p);
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

pub fn write_tensor(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_atomic(path, &img.to_tensor_bytes())
}
