//! PNG read/write helpers for frames, masks and heatmaps.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an [h, w, 3] tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, image: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image.data()[i]),
                    to_u8(image.data()[i + 1]),
                    to_u8(image.data()[i + 2]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::image(format!("writing {}", path.display()), e))
}

/// Write an [h, w] tensor in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, map: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = map.dims2();
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(map.data()[y * w + x])]));
        }
    }
    buf.save(path).map_err(|e| Error::image(format!("writing {}", path.display()), e))
}

/// Read an RGB PNG into an [h, w, 3] tensor in [0,1].
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::image(format!("reading {}", path.display()), e))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data_mut()[(y * w + x) * 3 + c] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Read a grayscale PNG into an [h, w] tensor in [0,1].
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::image(format!("reading {}", path.display()), e))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.data_mut()[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = Tensor::zeros(&[4, 5, 3]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        save_rgb(&path, &img).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back.shape(), &[4, 5, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = Tensor::new(vec![2, 3], vec![0.0, 64.0 / 255.0, 0.5019607843137255, 1.0, 0.2, 0.8]);
        save_gray(&path, &map).unwrap();
        let back = load_gray(&path).unwrap();
        for (a, b) in map.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
