//! Image batches, PNG output and image-file decoding.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, RgbImage, RgbaImage};
use ndarray::{s, Array4, ArrayView4, Axis};

use crate::error::{contract, Error, Result};
use crate::nn::{Float, Maps};

/// Smallest and largest admissible intensity.
pub const VALUE_RANGE: (f32, f32) = (0.0, 1.0);

/// A batch of square 3- or 4-channel images, `[batch, channel, height, width]`,
/// with every value finite and inside [`VALUE_RANGE`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        contract!(n >= 1, "image batch must hold at least one image");
        contract!(c == 3 || c == 4, "images must have 3 or 4 channels, got {c}");
        contract!(h == w && h >= 1, "images must be square, got {h}x{w}");
        let (lo, hi) = VALUE_RANGE;
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= lo && **v <= hi)) {
            return Err(Error::Contract(format!(
                "pixel value {bad} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self { data })
    }

    /// Clamps into range (mapping NaN to the lower bound) before validating.
    pub fn clamped(mut data: Array4<f32>) -> Result<Self> {
        let (lo, hi) = VALUE_RANGE;
        data.mapv_inplace(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) });
        Self::new(data)
    }

    pub fn constant(batch: usize, channels: usize, size: usize, value: f32) -> Result<Self> {
        Self::new(Array4::from_elem((batch, channels, size, size), value))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array4<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    /// Side length in pixels.
    pub fn size(&self) -> usize {
        self.data.dim().2
    }

    /// `(channels, size)` of every image in the batch.
    pub fn image_shape(&self) -> (usize, usize) {
        (self.channels(), self.size())
    }

    pub fn item(&self, i: usize) -> ImageBatch {
        Self {
            data: self.data.slice(s![i..i + 1, .., .., ..]).to_owned(),
        }
    }

    pub fn items(&self) -> impl Iterator<Item = ImageBatch> + '_ {
        (0..self.len()).map(|i| self.item(i))
    }

    /// Concatenates batches along the batch axis.
    pub fn stack<'a>(batches: impl IntoIterator<Item = &'a ImageBatch>) -> Result<Self> {
        let views: Vec<_> = batches.into_iter().map(|b| b.data.view()).collect();
        contract!(!views.is_empty(), "cannot stack zero batches");
        let shape = views[0].dim();
        contract!(
            views
                .iter()
                .all(|v| (v.dim().1, v.dim().2, v.dim().3) == (shape.1, shape.2, shape.3)),
            "all images in a batch must share shape"
        );
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Contract(format!("stack: {e}")))?;
        Ok(Self { data })
    }

    pub(crate) fn to_maps<T: Float>(&self) -> Maps<T> {
        Maps::from_nchw(self.data.view())
    }

    /// Network outputs are bounded by construction; clamping only absorbs
    /// round-off from the float conversion.
    pub(crate) fn from_maps<T: Float>(maps: &Maps<T>) -> Result<Self> {
        Self::clamped(maps.to_nchw::<f32>())
    }

    /// Drops to the first three channels (the alpha plane is synthesized).
    pub fn rgb(&self) -> ImageBatch {
        if self.channels() == 3 {
            return self.clone();
        }
        Self {
            data: self.data.slice(s![.., 0..3, .., ..]).to_owned(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Converts one image of a batch to an 8-bit RGB or RGBA buffer.
pub fn to_dynamic(img: &ImageBatch, index: usize) -> DynamicImage {
    let size = img.size() as u32;
    let d = img.data.slice(s![index, .., .., ..]);
    if img.channels() == 4 {
        DynamicImage::ImageRgba8(RgbaImage::from_fn(size, size, |x, y| {
            image::Rgba(std::array::from_fn(|c| {
                quantize(d[[c, y as usize, x as usize]])
            }))
        }))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_fn(size, size, |x, y| {
            image::Rgb(std::array::from_fn(|c| quantize(d[[c, y as usize, x as usize]])))
        }))
    }
}

/// Writes the first image of `img` as an 8-bit PNG (RGBA when it has 4 channels).
pub fn save_image(img: &ImageBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    contract!(img.len() == 1, "save_image expects a single image, got {}", img.len());
    to_dynamic(img, 0)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// Decodes an image file, center-crops it square, resizes it to `size`
/// (bilinear, antialiased when shrinking) and normalizes to `[0, 1]`.
/// RGB sources gain an opaque alpha plane when `channels == 4`.
pub fn load_image(path: impl AsRef<Path>, size: usize, channels: usize) -> Result<ImageBatch> {
    let path = path.as_ref();
    contract!(channels == 3 || channels == 4, "channels must be 3 or 4");
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(from_dynamic(&img, size, channels))
}

pub fn from_dynamic(img: &DynamicImage, size: usize, channels: usize) -> ImageBatch {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let mut img = if w != h {
        img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
    } else {
        img.clone()
    };
    if side as usize != size {
        img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    }
    let rgba = img.to_rgba8();
    let mut data = Array4::<f32>::zeros((1, channels, size, size));
    for (x, y, p) in rgba.enumerate_pixels() {
        for c in 0..channels {
            data[[0, c, y as usize, x as usize]] = dequantize(p.0[c]);
        }
    }
    ImageBatch { data }
}
