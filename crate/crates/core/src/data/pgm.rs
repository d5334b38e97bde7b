//! Dataset directories: `images/NNNN.pgm` and `masks/NNNN.pgm`, binary
//! 8-bit graymaps. Image pixels map to `[0, 1]` by `/ 255`; mask pixels are
//! class indices.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat};

use super::{LabeledImage, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";

fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.color() != ColorType::L8 {
        return Err(Error::Format(format!("{}: expected an 8-bit graymap, got {:?}", path.display(), img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_luma8().into_raw()))
}

/// Writes single-channel samples as `images/NNNN.pgm` and `masks/NNNN.pgm`.
pub fn save_dataset(dir: &Path, samples: &[LabeledImage]) -> Result<()> {
    for sub in [IMAGE_DIR, MASK_DIR] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let [_, c, h, w] = s.image.shape();
        if c != 1 {
            return Err(Error::shape(format!("graymap output needs 1 channel, sample {i} has {c}")));
        }
        let name = format!("{i:04}.pgm");
        let pixels: Vec<u8> = s.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_pgm(&dir.join(IMAGE_DIR).join(&name), w, h, &pixels)?;
        write_pgm(&dir.join(MASK_DIR).join(&name), w, h, &s.mask.data)?;
    }
    Ok(())
}

/// Loads every `images/*.pgm` with its same-named mask, in file-name order.
/// With `num_classes`, mask values at or above it are label errors.
pub fn load_dataset(dir: &Path, num_classes: Option<usize>) -> Result<Vec<LabeledImage>> {
    let image_dir = dir.join(IMAGE_DIR);
    let entries = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut names: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            names.push(path);
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for image_path in names {
        let file_name = image_path.file_name().expect("listed file");
        let mask_path = dir.join(MASK_DIR).join(file_name);
        let (h, w, pixels) = read_pgm(&image_path)?;
        let (mh, mw, labels) = read_pgm(&mask_path)?;
        if (h, w) != (mh, mw) {
            return Err(Error::shape(format!(
                "{}: image is {h}x{w} but mask is {mh}x{mw}",
                image_path.display()
            )));
        }
        let image = Tensor::from_vec([1, 1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
        let sample = LabeledImage::new(image, Mask::new(h, w, labels)?)?;
        if let Some(k) = num_classes {
            sample
                .check_labels(k)
                .map_err(|e| Error::Label(format!("{}: {e}", mask_path.display())))?;
        }
        out.push(sample);
    }
    Ok(out)
}
