//! Image file handling. Pixels live as f32 in [0, 1] inside the crate and as
//! 8-bit RGB on disk; writing clamps before quantizing so out-of-range network
//! output degrades gracefully instead of wrapping.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Convert interleaved 8-bit RGB rows into a (1, 3, h, w) tensor in [0, 1].
pub fn tensor_from_rgb8(width: u32, height: u32, pixels: &[u8]) -> Result<Tensor> {
    let (w, h) = (width as usize, height as usize);
    if pixels.len() != w * h * 3 {
        return Err(Error::invalid(
            "tensor_from_rgb8",
            format!("{} bytes for a {}x{} image", pixels.len(), w, h),
        ));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                data[(c * h + y) * w + x] = pixels[base + c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Quantize a (1, 3, h, w) tensor to interleaved 8-bit RGB, clamping each
/// value to [0, 1] first.
pub fn rgb8_from_tensor(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let s = image.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape(
            "rgb8_from_tensor",
            format!("expected one 3-channel image, got {}", s),
        ));
    }
    let d = image.data();
    let mut pixels = vec![0u8; s.height * s.width * 3];
    for c in 0..3 {
        for y in 0..s.height {
            for x in 0..s.width {
                let v = d[s.index(0, c, y, x)].clamp(0.0, 1.0);
                pixels[(y * s.width + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok((s.width as u32, s.height as u32, pixels))
}

/// Decode an image file (PNG or JPEG) into a (1, 3, h, w) tensor in [0, 1].
/// Gray and alpha inputs are expanded to plain RGB.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::invalid("read_image", format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    tensor_from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Write a tensor as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, pixels) = rgb8_from_tensor(image)?;
    let buf: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, pixels).expect("buffer sized from shape");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
