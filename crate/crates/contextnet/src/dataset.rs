//! On-disk datasets: `images/<stem>.ppm` paired with `labels/<stem>.pgm`,
//! plus an optional `palette.txt` of `class r g b` lines.
//!
//! Other sources (for example Cityscapes) can be supported by converting
//! them into this layout; [`save_dataset`] is the natural hook for that.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use contextnet_core::data::{LabelMap, Palette, RgbImage, SegSample};

use crate::pnm;
use crate::{Error, Result};

/// Reads one image/label pair and checks labels against `classes`.
pub fn load_sample(image: &Path, labels: &Path, classes: usize) -> Result<SegSample> {
    let img = pnm::read_ppm(image)?;
    let map = pnm::read_pgm(labels)?;
    if (img.height, img.width) != (map.height(), map.width()) {
        return Err(Error::Dataset(format!(
            "{}: image is {}x{} but labels are {}x{}",
            image.display(),
            img.height,
            img.width,
            map.height(),
            map.width()
        )));
    }
    map.validate(classes).map_err(|e| Error::from(e).in_file(labels))?;
    Ok(SegSample::new(img.to_tensor(), map)?)
}

pub fn save_sample(image: &Path, labels: &Path, sample: &SegSample) -> Result<()> {
    pnm::write_ppm(image, &RgbImage::from_tensor(&sample.image)?)?;
    pnm::write_pgm(labels, &sample.labels)
}

fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads every pair under `dir`, sorted by stem.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<SegSample>> {
    let images = files_by_stem(&dir.join("images"), "ppm")?;
    let labels = files_by_stem(&dir.join("labels"), "pgm")?;
    if let Some(stem) = images.keys().find(|s| !labels.contains_key(*s)) {
        return Err(Error::Dataset(format!("{}: image `{stem}` has no label map", dir.display())));
    }
    if let Some(stem) = labels.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Dataset(format!("{}: label map `{stem}` has no image", dir.display())));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("{}: no samples found", dir.display())));
    }
    images.iter().map(|(stem, img)| load_sample(img, &labels[stem], classes)).collect()
}

/// Writes samples as `images/NNNN.ppm` and `labels/NNNN.pgm`.
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        save_sample(&dir.join("images").join(format!("{stem}.ppm")), &dir.join("labels").join(format!("{stem}.pgm")), s)?;
    }
    Ok(())
}

/// Train and validation sets under `dir`: `dir/train` and `dir/val` when
/// both exist, otherwise `dir` serves as both.
pub fn load_split(dir: &Path, classes: usize) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let (train, val) = (dir.join("train"), dir.join("val"));
    if train.is_dir() && val.is_dir() {
        Ok((load_dataset(&train, classes)?, load_dataset(&val, classes)?))
    } else {
        let all = load_dataset(dir, classes)?;
        Ok((all.clone(), all))
    }
}

pub fn parse_palette(text: &str) -> Result<Palette> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<u16> = line
            .split_whitespace()
            .map(|t| t.parse::<u16>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Dataset(format!("palette line {}: expected `class r g b`", i + 1)))?;
        match nums[..] {
            [c, r, g, b] if c < 255 && r < 256 && g < 256 && b < 256 => {
                entries.insert(c as usize, [r as u8, g as u8, b as u8]);
            }
            _ => return Err(Error::Dataset(format!("palette line {}: expected `class r g b` in 0..=255", i + 1))),
        }
    }
    let n = entries.keys().next_back().map_or(0, |&k| k + 1);
    if entries.len() != n {
        return Err(Error::Dataset("palette must list every class from 0 without gaps".into()));
    }
    Ok(Palette { colors: entries.into_values().collect() })
}

pub fn palette_text(p: &Palette) -> String {
    p.colors.iter().enumerate().map(|(i, [r, g, b])| format!("{i} {r} {g} {b}\n")).collect()
}

/// `dir/palette.txt` when present, otherwise the default palette.
pub fn load_palette(dir: Option<&Path>, classes: usize) -> Result<Palette> {
    if let Some(path) = dir.map(|d| d.join("palette.txt")).filter(|p| p.is_file()) {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let p = parse_palette(&text).map_err(|e| e.in_file(&path))?;
        if p.colors.len() < classes {
            return Err(Error::Dataset(format!("{}: palette has fewer than {classes} classes", path.display())));
        }
        return Ok(p);
    }
    Ok(Palette::default_for(classes))
}

/// Label map from a colourised mask using the palette's inverse.
pub fn decolorize(img: &RgbImage, palette: &Palette) -> Result<LabelMap> {
    let data = img
        .data
        .chunks_exact(3)
        .map(|c| palette.lookup([c[0], c[1], c[2]]).ok_or_else(|| Error::Dataset(format!("colour {c:?} not in palette"))))
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabelMap::new(img.height, img.width, data)?)
}
