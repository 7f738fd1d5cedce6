use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One image/mask pair: image `[3, H, W]` in `[0, 1]`, mask `[1, H, W]` in
/// `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::Dimension(format!("sample `{}`: image {:?} and mask {:?}", id, is, ms)));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample `{}`: mask value {} is not binary", id, v)));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Mask gray levels above this count as foreground.
pub const MASK_THRESHOLD: u8 = 127;

const IMAGE_EXT: [&str; 3] = ["png", "jpg", "jpeg"];

fn list(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Data(format!("two files share the name `{}`: {} and {}", stem, prev.display(), path.display())));
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            d[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    t
}

fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[1, h, w], |i| if img.as_raw()[i] > MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Reads `dir/images/*.{png,jpg,jpeg}` and `dir/masks/*.png`, pairing them by
/// file stem, in lexicographic order. Images are resized bilinearly and
/// masks by nearest neighbour to `height x width`; masks are binarized at
/// gray level 127.
pub fn load_dataset(dir: &Path, height: usize, width: usize) -> Result<Vec<Sample>> {
    let images = list(&dir.join("images"), &IMAGE_EXT)?;
    let masks = list(&dir.join("masks"), &["png"])?;
    let mut orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("images/{} has no mask", k))
        .collect();
    orphans.extend(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("masks/{} has no image", k)));
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unpaired files in {}:\n  {}", dir.display(), orphans.join("\n  "))));
    }
    if images.is_empty() {
        log::warn!("no samples found in {}", dir.display());
    }
    let (w, h) = (width as u32, height as u32);
    let mut out = Vec::with_capacity(images.len());
    for (id, ipath) in &images {
        let mut img = open(ipath)?.to_rgb8();
        if img.dimensions() != (w, h) {
            img = imageops::resize(&img, w, h, FilterType::Triangle);
        }
        let mut mask = open(&masks[id])?.to_luma8();
        if mask.dimensions() != (w, h) {
            mask = imageops::resize(&mask, w, h, FilterType::Nearest);
        }
        out.push(Sample::new(id.clone(), rgb_to_tensor(&img), gray_to_mask(&mask))?);
    }
    Ok(out)
}

/// Writes `dir/images/<id>.png` and `dir/masks/<id>.png` (masks as 0/255).
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let d = s.image.data();
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let m = s.mask.data();
        let mask: GrayImage =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([if m[y as usize * w + x as usize] == 1.0 { 255 } else { 0 }]));
        let ip = dir.join("images").join(format!("{}.png", s.id));
        img.save(&ip).map_err(|e| Error::Data(format!("cannot write {}: {}", ip.display(), e)))?;
        let mp = dir.join("masks").join(format!("{}.png", s.id));
        mask.save(&mp).map_err(|e| Error::Data(format!("cannot write {}: {}", mp.display(), e)))?;
    }
    Ok(())
}
