//! Pixel-grid types and image/mask file I/O shared by the whole pipeline.
//!
//! Conventions fixed here and relied on everywhere else:
//! - colors are RGB with each channel in `[0, 1]` (8-bit values divided by 255)
//! - grids are row-major, `(x, y)` maps to index `y * width + x`
//! - label masks use class ids `0..=20` plus `255` for ignore regions

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Background class id in label masks.
pub const BACKGROUND: u8 = 0;
/// Ignore value excluded from training and metrics.
pub const IGNORE: u8 = 255;
/// Number of classes (background plus 20 object categories).
pub const NUM_CLASSES: usize = 21;

pub type Color = [f64; 3];

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("unsupported pixel encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("corrupt image data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("mask {0} is not 8-bit grayscale")]
    NotGrayscale(PathBuf),
    #[error("label {0} out of range (valid: 0..=20 and 255)")]
    LabelOutOfRange(u8),
    #[error("invalid label value {value} in {path}")]
    InvalidLabelValue { path: PathBuf, value: u8 },
    #[error("empty grid: width and height must be at least 1")]
    EmptyGrid,
    #[error("channel value {0} outside [0, 1]")]
    ChannelOutOfRange(f64),
    #[error("pixel count {got} does not match {width}x{height}")]
    PixelCountMismatch { got: usize, width: u32, height: u32 },
    #[error("manifest record {index}: category {category} outside 1..=20")]
    BadCategory { index: usize, category: u8 },
    #[error("manifest record {index}: referenced file missing: {path}")]
    ManifestMissingFile { index: usize, path: PathBuf },
    #[error("manifest {path}: {detail}")]
    BadManifest { path: PathBuf, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ImageIoError {
    if source.kind() == std::io::ErrorKind::NotFound {
        ImageIoError::Missing(path.to_path_buf())
    } else {
        ImageIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// RGB raster with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<Color>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Color>) -> Result<Self, ImageIoError> {
        if width == 0 || height == 0 {
            return Err(ImageIoError::EmptyGrid);
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(ImageIoError::PixelCountMismatch {
                got: pixels.len(),
                width,
                height,
            });
        }
        for p in &pixels {
            for &c in p {
                if !(0.0..=1.0).contains(&c) {
                    return Err(ImageIoError::ChannelOutOfRange(c));
                }
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f` at every pixel. Values are clamped to `[0, 1]`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Color) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        let mut pixels = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                pixels.push([
                    c[0].clamp(0.0, 1.0),
                    c[1].clamp(0.0, 1.0),
                    c[2].clamp(0.0, 1.0),
                ]);
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize) * (self.width as usize) + (x as usize)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> Color {
        self.pixels[self.index(x, y)]
    }

    pub fn pixels(&self) -> &[Color] {
        &self.pixels
    }
}

/// Foreground/background mask; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self, ImageIoError> {
        if width == 0 || height == 0 {
            return Err(ImageIoError::EmptyGrid);
        }
        if values.len() != (width as usize) * (height as usize) {
            return Err(ImageIoError::PixelCountMismatch {
                got: values.len(),
                width,
                height,
            });
        }
        debug_assert!(values.iter().all(|&v| v <= 1));
        Ok(Self {
            width,
            height,
            values: values.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn filled(width: u32, height: u32, foreground: bool) -> Self {
        Self {
            width,
            height,
            values: vec![u8::from(foreground); (width as usize) * (height as usize)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut values = Vec::with_capacity((width as usize) * (height as usize));
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize) * (self.width as usize) + (x as usize)
    }

    #[inline]
    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.values[self.index(x, y)] != 0
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// Fraction of mask pixels that are foreground, exactly `k / (w * h)`.
pub fn foreground_fraction(mask: &BinaryMask) -> f64 {
    mask.foreground_count() as f64 / mask.values.len() as f64
}

/// Semantic mask with class ids `0..=20` and `255` for ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

pub fn valid_label(label: u8) -> bool {
    label < NUM_CLASSES as u8 || label == IGNORE
}

impl LabelMask {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, ImageIoError> {
        if width == 0 || height == 0 {
            return Err(ImageIoError::EmptyGrid);
        }
        if labels.len() != (width as usize) * (height as usize) {
            return Err(ImageIoError::PixelCountMismatch {
                got: labels.len(),
                width,
                height,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| !valid_label(l)) {
            return Err(ImageIoError::LabelOutOfRange(bad));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: u32, height: u32, label: u8) -> Self {
        assert!(valid_label(label));
        Self {
            width,
            height,
            labels: vec![label; (width as usize) * (height as usize)],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize) * (self.width as usize) + (x as usize)
    }

    #[inline]
    pub fn label(&self, x: u32, y: u32) -> u8 {
        self.labels[self.index(x, y)]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Foreground mask of all labeled object pixels (neither background nor ignore).
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            values: self
                .labels
                .iter()
                .map(|&l| u8::from(l != BACKGROUND && l != IGNORE))
                .collect(),
        }
    }

    /// Fraction of pixels carrying an object label (not background, not ignore).
    pub fn object_fraction(&self) -> f64 {
        let n = self
            .labels
            .iter()
            .filter(|&&l| l != BACKGROUND && l != IGNORE)
            .count();
        n as f64 / self.labels.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Image file I/O
// ---------------------------------------------------------------------------

/// Loads a PNG (8-bit RGB/RGBA, alpha discarded) or binary PPM image.
///
/// Channels are scaled from 8-bit to `[0, 1]` by division by 255.
pub fn load_image(path: &Path) -> Result<RgbImage, ImageIoError> {
    let format = recognized_format(path)?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoded = image::ImageReader::with_format(BufReader::new(file), format)
        .decode()
        .map_err(|e| ImageIoError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(img) => img,
        image::DynamicImage::ImageRgba8(img) => {
            image::DynamicImage::ImageRgba8(img).to_rgb8()
        }
        other => {
            return Err(ImageIoError::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("expected 8-bit RGB or RGBA, got {:?}", other.color()),
            })
        }
    };
    let (width, height) = rgb.dimensions();
    if width == 0 || height == 0 {
        return Err(ImageIoError::EmptyGrid);
    }
    let pixels = rgb
        .pixels()
        .map(|p| {
            [
                f64::from(p.0[0]) / 255.0,
                f64::from(p.0[1]) / 255.0,
                f64::from(p.0[2]) / 255.0,
            ]
        })
        .collect();
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

fn recognized_format(path: &Path) -> Result<image::ImageFormat, ImageIoError> {
    let format = image::ImageFormat::from_path(path)
        .map_err(|_| ImageIoError::UnsupportedFormat(path.to_path_buf()))?;
    match format {
        image::ImageFormat::Png | image::ImageFormat::Pnm => Ok(format),
        _ => Err(ImageIoError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Writes an image as 8-bit RGB, rounding channels back to bytes.
pub fn write_image(image: &RgbImage, path: &Path) -> Result<(), ImageIoError> {
    recognized_format(path)?;
    let mut out = image::RgbImage::new(image.width, image.height);
    for (i, p) in image.pixels.iter().enumerate() {
        let x = (i as u32) % image.width;
        let y = (i as u32) / image.width;
        out.put_pixel(
            x,
            y,
            image::Rgb([
                (p[0] * 255.0).round() as u8,
                (p[1] * 255.0).round() as u8,
                (p[2] * 255.0).round() as u8,
            ]),
        );
    }
    out.save(path).map_err(|e| ImageIoError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Reads an 8-bit grayscale PNG/PGM mask; any nonzero value counts as foreground.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask, ImageIoError> {
    let format = recognized_format(path)?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoded = image::ImageReader::with_format(BufReader::new(file), format)
        .decode()
        .map_err(|e| ImageIoError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let gray = match decoded {
        image::DynamicImage::ImageLuma8(img) => img,
        image::DynamicImage::ImageLumaA8(img) => {
            image::DynamicImage::ImageLumaA8(img).to_luma8()
        }
        image::DynamicImage::ImageRgb8(img)
            if img.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]) =>
        {
            image::DynamicImage::ImageRgb8(img).to_luma8()
        }
        _ => return Err(ImageIoError::NotGrayscale(path.to_path_buf())),
    };
    let (width, height) = gray.dimensions();
    if width == 0 || height == 0 {
        return Err(ImageIoError::EmptyGrid);
    }
    let values = gray.pixels().map(|p| u8::from(p.0[0] != 0)).collect();
    Ok(BinaryMask {
        width,
        height,
        values,
    })
}

/// Writes a binary mask as 8-bit grayscale with values 0 and 255.
pub fn write_binary_mask(mask: &BinaryMask, path: &Path) -> Result<(), ImageIoError> {
    recognized_format(path)?;
    let mut out = image::GrayImage::new(mask.width, mask.height);
    for (i, &v) in mask.values.iter().enumerate() {
        let x = (i as u32) % mask.width;
        let y = (i as u32) / mask.width;
        out.put_pixel(x, y, image::Luma([if v != 0 { 255 } else { 0 }]));
    }
    out.save(path).map_err(|e| ImageIoError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes a label mask as an 8-bit grayscale PNG whose pixel value is the class id.
pub fn write_label_mask(mask: &LabelMask, path: &Path) -> Result<(), ImageIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width, mask.height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| ImageIoError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    writer
        .write_image_data(&mask.labels)
        .map_err(|e| ImageIoError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    Ok(())
}

/// Reads a label mask from an 8-bit grayscale or indexed PNG.
///
/// Indexed PNGs (the VOC ground-truth convention) are read as raw palette
/// indices, so the color table is irrelevant; the index is the class id.
pub fn read_label_mask(path: &Path) -> Result<LabelMask, ImageIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // keep palette indices as-is instead of expanding to RGB
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| ImageIoError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let buf_size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageIoError::Corrupt {
            path: path.to_path_buf(),
            detail: "output buffer size overflow".into(),
        })?;
    let mut buf = vec![0u8; buf_size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageIoError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(
            info.color_type,
            png::ColorType::Grayscale | png::ColorType::Indexed
        )
    {
        return Err(ImageIoError::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!(
                "expected 8-bit grayscale or indexed PNG, got {:?} at {:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let labels = buf[..info.buffer_size()].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| !valid_label(l)) {
        return Err(ImageIoError::InvalidLabelValue {
            path: path.to_path_buf(),
            value: bad,
        });
    }
    if info.width == 0 || info.height == 0 {
        return Err(ImageIoError::EmptyGrid);
    }
    Ok(LabelMask {
        width: info.width,
        height: info.height,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// One dataset entry: an image, its single category label, and optional masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub category: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
}

/// Dataset listing; each record carries exactly one category id.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses a manifest and checks categories and referenced files.
    ///
    /// Relative paths are resolved against the manifest's directory and
    /// rewritten to the resolved form.
    pub fn load(path: &Path) -> Result<Self, ImageIoError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| ImageIoError::BadManifest {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (index, record) in manifest.records.iter_mut().enumerate() {
            if record.category < 1 || record.category > 20 {
                return Err(ImageIoError::BadCategory {
                    index,
                    category: record.category,
                });
            }
            record.image = resolve(base, &record.image);
            if !record.image.is_file() {
                return Err(ImageIoError::ManifestMissingFile {
                    index,
                    path: record.image.clone(),
                });
            }
            for p in [&mut record.coarse_mask, &mut record.gt_mask]
                .into_iter()
                .flatten()
            {
                *p = resolve(base, p);
                if !p.is_file() {
                    return Err(ImageIoError::ManifestMissingFile {
                        index,
                        path: p.clone(),
                    });
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageIoError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self).map_err(|e| {
            ImageIoError::BadManifest {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// File stem used to pair images with their masks across directories.
pub fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write_png_rgb(path: &Path, width: u32, height: u32, px: &[[u8; 3]]) {
        let mut img = image::RgbImage::new(width, height);
        for (i, p) in px.iter().enumerate() {
            img.put_pixel(i as u32 % width, i as u32 / width, image::Rgb(*p));
        }
        img.save(path).unwrap();
    }

    #[test]
    fn load_scales_extremes_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.png");
        write_png_rgb(&path, 1, 1, &[[255, 0, 0]]);
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn load_all_black() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("black.png");
        write_png_rgb(&path, 2, 2, &[[0, 0, 0]; 4]);
        let img = load_image(&path).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn load_scales_midpoint_to_exact_rational() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mid.png");
        write_png_rgb(&path, 1, 1, &[[128, 128, 128]]);
        let img = load_image(&path).unwrap();
        let expected = 128.0 / 255.0;
        for c in img.pixel(0, 0) {
            assert_eq!(c, expected);
        }
    }

    #[test]
    fn load_discards_alpha() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let mut img = image::RgbaImage::new(1, 1);
        img.put_pixel(0, 0, image::Rgba([10, 20, 30, 77]));
        img.save(&path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(
            loaded.pixel(0, 0),
            [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]
        );
    }

    #[test]
    fn load_reads_binary_ppm() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        std::fs::write(&path, b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(
            load_image(&missing),
            Err(ImageIoError::Missing(_))
        ));

        let unsupported = dir.path().join("img.gif");
        std::fs::write(&unsupported, b"GIF89a").unwrap();
        assert!(matches!(
            load_image(&unsupported),
            Err(ImageIoError::UnsupportedFormat(_))
        ));

        let corrupt = dir.path().join("bad.png");
        std::fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        assert!(matches!(
            load_image(&corrupt),
            Err(ImageIoError::Corrupt { .. })
        ));
    }

    #[test]
    fn foreground_fraction_cases() {
        let all_bg = BinaryMask::filled(4, 4, false);
        assert_eq!(foreground_fraction(&all_bg), 0.0);
        let all_fg = BinaryMask::filled(4, 4, true);
        assert_eq!(foreground_fraction(&all_fg), 1.0);
        let two = BinaryMask::new(2, 4, vec![1, 0, 0, 0, 0, 0, 1, 0]).unwrap();
        assert_eq!(foreground_fraction(&two), 0.25);
    }

    #[test]
    fn label_mask_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.png");

        let zeros = LabelMask::filled(3, 2, 0);
        write_label_mask(&zeros, &path).unwrap();
        assert_eq!(read_label_mask(&path).unwrap(), zeros);

        let mixed = LabelMask::new(3, 1, vec![0, 7, 255]).unwrap();
        write_label_mask(&mixed, &path).unwrap();
        assert_eq!(read_label_mask(&path).unwrap(), mixed);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(matches!(
            LabelMask::new(1, 1, vec![21]),
            Err(ImageIoError::LabelOutOfRange(21))
        ));
    }

    #[test]
    fn read_label_mask_rejects_invalid_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut img = image::GrayImage::new(1, 1);
        img.put_pixel(0, 0, image::Luma([37]));
        img.save(&path).unwrap();
        match read_label_mask(&path) {
            Err(ImageIoError::InvalidLabelValue { value: 37, .. }) => {}
            other => panic!("expected invalid label error, got {other:?}"),
        }
    }

    #[test]
    fn read_label_mask_reads_indexed_png_as_indices() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("indexed.png");
        let file = File::create(&path).unwrap();
        let mut encoder = png::Encoder::new(BufWriter::new(file), 2, 1);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        // palette colors deliberately unrelated to the indices
        encoder.set_palette(vec![10, 20, 30, 200, 100, 50, 1, 2, 3]);
        let mut writer = encoder.write_header().unwrap();
        writer.write_image_data(&[2, 0]).unwrap();
        drop(writer);
        let mask = read_label_mask(&path).unwrap();
        assert_eq!(mask.labels(), &[2, 0]);
    }

    #[test]
    fn binary_mask_reads_nonzero_as_foreground() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut img = image::GrayImage::new(2, 1);
        img.put_pixel(0, 0, image::Luma([7]));
        img.put_pixel(1, 0, image::Luma([0]));
        img.save(&path).unwrap();
        let mask = read_binary_mask(&path).unwrap();
        assert_eq!(mask.values(), &[1, 0]);
    }

    #[test]
    fn binary_mask_pgm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = BinaryMask::new(3, 1, vec![1, 0, 1]).unwrap();
        write_binary_mask(&mask, &path).unwrap();
        assert_eq!(read_binary_mask(&path).unwrap(), mask);
    }

    #[test]
    fn manifest_checks_files_and_categories() {
        let dir = tempdir().unwrap();
        let img_path = dir.path().join("a.png");
        write_png_rgb(&img_path, 1, 1, &[[5, 5, 5]]);

        let manifest_path = dir.path().join("manifest.json");
        std::fs::write(
            &manifest_path,
            r#"[{"image": "a.png", "category": 3}]"#,
        )
        .unwrap();
        let m = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(m.records.len(), 1);
        assert!(m.records[0].image.is_absolute() || m.records[0].image.is_file());

        std::fs::write(
            &manifest_path,
            r#"[{"image": "a.png", "category": 21}]"#,
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(&manifest_path),
            Err(ImageIoError::BadCategory { .. })
        ));

        std::fs::write(
            &manifest_path,
            r#"[{"image": "a.png", "category": 3, "gt_mask": "gone.png"}]"#,
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(&manifest_path),
            Err(ImageIoError::ManifestMissingFile { .. })
        ));
    }

    proptest! {
        #[test]
        fn foreground_fraction_is_exact_rational(
            w in 1u32..12, h in 1u32..12, seed in 0u64..1000
        ) {
            let n = (w * h) as usize;
            let mut values = vec![0u8; n];
            let mut s = seed;
            for v in values.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = ((s >> 60) & 1) as u8;
            }
            let k = values.iter().filter(|&&v| v != 0).count();
            let mask = BinaryMask::new(w, h, values).unwrap();
            let f = foreground_fraction(&mask);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, k as f64 / n as f64);
        }

        #[test]
        fn label_masks_round_trip(
            w in 1u32..16, h in 1u32..16, seed in 0u64..1000
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("roundtrip.png");
            let n = (w * h) as usize;
            let mut labels = vec![0u8; n];
            let mut s = seed.wrapping_add(1);
            for l in labels.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let pick = (s >> 56) % 22;
                *l = if pick == 21 { IGNORE } else { pick as u8 };
            }
            let mask = LabelMask::new(w, h, labels).unwrap();
            write_label_mask(&mask, &path).unwrap();
            prop_assert_eq!(read_label_mask(&path).unwrap(), mask);
        }
    }
}
