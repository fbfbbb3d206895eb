use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::ChangePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3×H×W` tensor in `[0, 1]` as 8-bit RGB.
pub fn save_rgb_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let d = t.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub(crate) fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb buffer matches shape")
}

/// Writes an `H×W` {0,1} label as 8-bit grayscale with values 0/255.
pub fn save_label_png(path: &Path, label: &Tensor<f32>) -> Result<()> {
    let (h, w) = (label.shape()[0], label.shape()[1]);
    let d = label.data();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a grayscale label; values above 127 mean "changed".
pub fn load_label_png(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![h, w], data).expect("label buffer matches shape"))
}

/// Writes `A/<id>.png`, `B/<id>.png` and `label/<id>.png` under `root`.
pub fn write_pair(root: &Path, pair: &ChangePair) -> Result<()> {
    let file = format!("{}.png", pair.id);
    save_rgb_png(&root.join("A").join(&file), &pair.t1)?;
    save_rgb_png(&root.join("B").join(&file), &pair.t2)?;
    save_label_png(&root.join("label").join(&file), &pair.label)
}

pub fn read_pair(root: &Path, id: &str) -> Result<ChangePair> {
    let file = format!("{id}.png");
    ChangePair::new(
        id,
        load_rgb_png(&root.join("A").join(&file))?,
        load_rgb_png(&root.join("B").join(&file))?,
        load_label_png(&root.join("label").join(&file))?,
    )
}
