//! Patch tiling over a dataset root.
//!
//! Two layouts are accepted:
//!
//! * `root/{A,B,label}/<name>` with `root/list/{train,val,test}.txt`
//!   manifests, one file name per line;
//! * `root/{train,val,test}/{A,B,label}/<name>`.
//!
//! Each image is cut into a non-overlapping grid of `patch × patch` tiles;
//! partial tiles along the right and bottom edges are dropped.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::png::{load_label_png, load_rgb_png};
use super::ChangePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One tile of one image triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRef {
    /// Directory holding `A/`, `B/` and `label/`.
    pub base: PathBuf,
    pub file: String,
    pub row: usize,
    pub col: usize,
    pub patch: usize,
}

impl PatchRef {
    pub fn id(&self) -> String {
        let stem = Path::new(&self.file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.file.clone());
        format!("{stem}_{}_{}", self.row, self.col)
    }

    /// Cuts this tile out of a full-size image or mask.
    pub fn window(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        crop(t, self.row * self.patch, self.col * self.patch, self.patch)
    }

    /// Loads and crops the tile.
    pub fn load(&self) -> Result<ChangePair> {
        let a = load_rgb_png(&self.base.join("A").join(&self.file))?;
        let b = load_rgb_png(&self.base.join("B").join(&self.file))?;
        let l = load_label_png(&self.base.join("label").join(&self.file))?;
        ChangePair::new(self.id(), self.window(&a)?, self.window(&b)?, self.window(&l)?)
    }
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, p: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, h, w) = match *s {
        [c, h, w] => (Some(c), h, w),
        [h, w] => (None, h, w),
        _ => return Err(Error::dim("crop", format!("unexpected shape {s:?}"))),
    };
    if y0 + p > h || x0 + p > w {
        return Err(Error::dim("crop", format!("tile at ({y0},{x0}) exceeds {h}×{w}")));
    }
    let channels = c.unwrap_or(1);
    let mut out = Vec::with_capacity(channels * p * p);
    for ch in 0..channels {
        for y in y0..y0 + p {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + p]);
        }
    }
    match c {
        Some(c) => Tensor::new(vec![c, p, p], out),
        None => Tensor::new(vec![p, p], out),
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<PatchRef>,
    pub val: Vec<PatchRef>,
    pub test: Vec<PatchRef>,
    /// Images skipped because their three files disagree in size.
    pub rejected: Vec<(String, String)>,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[PatchRef]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<PatchRef> {
        match name {
            "train" => &mut self.train,
            "val" => &mut self.val,
            _ => &mut self.test,
        }
    }
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Number of whole tiles along one axis.
pub fn tiles_along(extent: usize, patch: usize) -> usize {
    extent / patch
}

/// Tiles every image under `root` into `patch × patch` tiles.
pub fn tile_dataset(root: &Path, patch: usize) -> Result<DatasetSplit> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut entries: Vec<(&str, PathBuf, String)> = Vec::new();
    let list_dir = root.join("list");
    if list_dir.is_dir() {
        let mut seen = HashSet::new();
        for split in SPLITS {
            let manifest = list_dir.join(format!("{split}.txt"));
            if !manifest.exists() {
                continue;
            }
            for name in read_manifest(&manifest)? {
                if !seen.insert(name.clone()) {
                    return Err(Error::Validation(format!("{name} appears in more than one split")));
                }
                entries.push((split, root.to_path_buf(), name));
            }
        }
    } else {
        for split in SPLITS {
            let base = root.join(split);
            if base.join("A").is_dir() {
                for name in list_images(&base.join("A"))? {
                    entries.push((split, base.clone(), name));
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Validation(format!(
                "{} has neither list/ manifests nor train/val/test directories",
                root.display()
            )));
        }
    }

    let mut missing = Vec::new();
    for (_, base, name) in &entries {
        for sub in ["A", "B", "label"] {
            let p = base.join(sub).join(name);
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("missing counterpart files: {}", missing.join(", "))));
    }

    let mut out = DatasetSplit::default();
    for (split, base, name) in entries {
        let dims = |sub: &str| {
            let p = base.join(sub).join(&name);
            image::image_dimensions(&p).map_err(|e| Error::Image { path: p, source: e })
        };
        let (a, b, l) = (dims("A")?, dims("B")?, dims("label")?);
        if a != b || a != l {
            out.rejected
                .push((name.clone(), format!("size mismatch: A {a:?}, B {b:?}, label {l:?}")));
            continue;
        }
        let (w, h) = (a.0 as usize, a.1 as usize);
        for row in 0..tiles_along(h, patch) {
            for col in 0..tiles_along(w, patch) {
                out.split_mut(split).push(PatchRef {
                    base: base.clone(),
                    file: name.clone(),
                    row,
                    col,
                    patch,
                });
            }
        }
    }
    Ok(out)
}
