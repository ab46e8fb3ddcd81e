//! Frame-feature extraction behind a pluggable encoder: full-frame (V),
//! hand-crop (VC) and hand-object (VC+HO) representations.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Representation;
use crate::error::{Error, Result};
use crate::preproc::{BBox, Mask, MaskSet};

/// Maps an image region to a fixed-width vector.
pub trait FrameEncoder: Send + Sync {
    fn width(&self) -> usize;

    /// Encodes the whole of `image` (already cropped to the region).
    fn encode(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Side of the pooling grid of the toy encoder.
pub const TOY_GRID: usize = 8;
/// Pooled statistics per region: mean and variance of every grid cell.
pub const TOY_STATS: usize = 2 * TOY_GRID * TOY_GRID;

/// Deterministic stand-in for a pretrained backbone: a seeded random
/// projection `W s + b` of per-cell intensity statistics `s`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn toy_encoder(seed: u64, d: usize) -> Result<ToyEncoder> {
    if d == 0 {
        return Err(Error::Validation("encoder width must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (TOY_STATS as f64).sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let projection = Array2::from_shape_simple_fn((d, TOY_STATS), || scale * normal());
    let bias = Array1::from_shape_simple_fn(d, || 0.1 * normal());
    Ok(ToyEncoder { projection, bias })
}

/// Mean and variance of channel-averaged intensity in `[0, 1]` for each
/// cell of an 8x8 grid, interleaved `[mean, var]` in row-major cell order.
/// Images smaller than the grid reuse pixels across neighboring cells.
pub fn toy_statistics(image: &RgbImage) -> Array1<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut stats = Array1::zeros(TOY_STATS);
    if w == 0 || h == 0 {
        return stats;
    }
    let span = |i: usize, n: usize| {
        let lo = i * n / TOY_GRID;
        let hi = ((i + 1) * n / TOY_GRID).max(lo + 1).min(n);
        (lo.min(n - 1), hi)
    };
    for cy in 0..TOY_GRID {
        let (y0, y1) = span(cy, h);
        for cx in 0..TOY_GRID {
            let (x0, x1) = span(cx, w);
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.get_pixel(x as u32, y as u32).0;
                    let v = (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0);
                    sum += v;
                    sq += v * v;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mean = sum / n;
            let k = 2 * (cy * TOY_GRID + cx);
            stats[k] = mean;
            stats[k + 1] = (sq / n - mean * mean).max(0.0);
        }
    }
    stats
}

impl FrameEncoder for ToyEncoder {
    fn width(&self) -> usize {
        self.bias.len()
    }

    fn encode(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let s = toy_statistics(image);
        Ok((self.projection.dot(&s) + &self.bias).to_vec())
    }
}

/// Region of a frame to encode.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Full,
    Box(BBox),
    Mask(&'a Mask),
    Absent,
}

/// Pixel bounds of `b` in an image of size `(w, h)`: outward-rounded and
/// clamped. `None` if nothing remains.
fn pixel_bounds(b: &BBox, w: u32, h: u32) -> Option<(u32, u32, u32, u32)> {
    let x0 = b.x1.floor().max(0.0) as u32;
    let y0 = b.y1.floor().max(0.0) as u32;
    let x1 = (b.x2.ceil().max(0.0) as u32).min(w);
    let y1 = (b.y2.ceil().max(0.0) as u32).min(h);
    (x0 < x1 && y0 < y1).then(|| (x0, y0, x1 - x0, y1 - y0))
}

/// Encodes the tight box around `region`; returns the vector and whether
/// the region was present. Absent and empty-mask regions give zeros.
pub fn encode_region(encoder: &dyn FrameEncoder, image: &RgbImage, region: Region<'_>) -> Result<(Vec<f64>, bool)> {
    let (w, h) = image.dimensions();
    let bbox = match region {
        Region::Full => BBox::new(0.0, 0.0, w as f64, h as f64),
        Region::Box(b) => b,
        Region::Mask(m) => {
            if (m.width, m.height) != (w as usize, h as usize) {
                return Err(Error::Shape(format!("mask is {}x{} but frame is {w}x{h}", m.width, m.height)));
            }
            match m.bounding_box() {
                Some(b) => b,
                None => return Ok((vec![0.0; encoder.width()], false)),
            }
        }
        Region::Absent => return Ok((vec![0.0; encoder.width()], false)),
    };
    let (x, y, cw, ch) = pixel_bounds(&bbox, w, h).ok_or_else(|| {
        Error::Validation(format!("region {:?} lies outside the {w}x{h} frame", <[f64; 4]>::from(bbox)))
    })?;
    let crop = image::imageops::crop_imm(image, x, y, cw, ch).to_image();
    let v = encoder
        .encode(&crop)
        .map_err(|e| Error::Runtime(format!("encoding region {:?}: {e}", <[f64; 4]>::from(bbox))))?;
    if v.len() != encoder.width() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Runtime(format!(
            "encoder returned {} values (expected {} finite values) for region {:?}",
            v.len(),
            encoder.width(),
            <[f64; 4]>::from(bbox)
        )));
    }
    Ok((v, true))
}

/// Per-frame region features; absent regions hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    pub full: Vec<f64>,
    pub crop: Vec<f64>,
    pub hands: Vec<f64>,
    pub obj1: Vec<f64>,
    pub obj2: Vec<f64>,
    /// Presence of crop, hands, obj1, obj2.
    pub present: [bool; 4],
}

impl RegionFeatures {
    pub fn width(&self) -> usize {
        self.full.len()
    }
}

/// Frame vector for `mode`: full frame (V), crop (VC) or
/// `[crop, hands, obj1, obj2]` (VC+HO).
pub fn assemble_hand_object_features(r: &RegionFeatures, mode: Representation) -> Result<Vec<f64>> {
    let d = r.width();
    let parts: Vec<&Vec<f64>> = match mode {
        Representation::V => vec![&r.full],
        Representation::Vc => vec![&r.crop],
        Representation::VcHo => vec![&r.crop, &r.hands, &r.obj1, &r.obj2],
    };
    if let Some(p) = parts.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!(
            "{} features need equal region widths, found {} and {d}",
            mode.name(),
            p.len()
        )));
    }
    Ok(parts.into_iter().flatten().copied().collect())
}

/// All region features of one frame.
pub fn frame_regions(
    encoder: &dyn FrameEncoder,
    image: &RgbImage,
    crop: Option<BBox>,
    masks: Option<&MaskSet>,
) -> Result<RegionFeatures> {
    let (full, _) = encode_region(encoder, image, Region::Full)?;
    let (crop, c) = encode_region(encoder, image, crop.map_or(Region::Absent, Region::Box))?;
    let enc = |m: Option<&Mask>| encode_region(encoder, image, m.map_or(Region::Absent, Region::Mask));
    let (hands, h) = enc(masks.map(|m| &m.hands))?;
    let (obj1, o1) = enc(masks.map(|m| &m.obj1))?;
    let (obj2, o2) = enc(masks.map(|m| &m.obj2))?;
    Ok(RegionFeatures {
        full,
        crop,
        hands,
        obj1,
        obj2,
        present: [c, h, o1, o2],
    })
}

/// Feature matrix of a frame sequence, one row per frame. `crops` and
/// `masks`, when given, must have one entry per frame.
pub fn extract_video_features(
    encoder: &dyn FrameEncoder,
    frames: &[RgbImage],
    crops: Option<&[BBox]>,
    masks: Option<&[MaskSet]>,
    mode: Representation,
) -> Result<Array2<f64>> {
    let n = frames.len();
    if crops.is_some_and(|c| c.len() != n) || masks.is_some_and(|m| m.len() != n) {
        return Err(Error::Validation(format!("crop/mask tracks must have one entry for each of the {n} frames")));
    }
    if mode != Representation::V && crops.is_none() {
        return Err(Error::Validation(format!("{} features need hand crops", mode.name())));
    }
    if mode == Representation::VcHo && masks.is_none() {
        return Err(Error::Validation("VC+HO features need hand-object masks".into()));
    }
    let width = encoder.width() * mode.blocks();
    let mut out = Array2::zeros((n, width));
    for (i, img) in frames.iter().enumerate() {
        let r = frame_regions(encoder, img, crops.map(|c| c[i]), masks.map(|m| &m[i]))
            .map_err(|e| Error::Runtime(format!("frame {i}: {e}")))?;
        let v = assemble_hand_object_features(&r, mode)?;
        out.row_mut(i).assign(&Array1::from(v));
    }
    Ok(out)
}

/// PNG/JPEG frames of a directory in file-name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    frame_paths(dir)?
        .iter()
        .map(|p| {
            image::open(p)
                .map(|i| i.to_rgb8())
                .map_err(|e| Error::parse(p.display().to_string(), e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use image::Rgb;

    fn gray(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    #[test]
    fn gray_crop_closed_form() {
        let enc = toy_encoder(1, 5).unwrap();
        let img = gray(32, 24, 51);
        let (v, present) = encode_region(&enc, &img, Region::Box(BBox::new(4.0, 4.0, 20.0, 20.0))).unwrap();
        assert!(present);
        // Every cell has mean 0.2 and variance 0: v = 0.2 * sum of the
        // mean columns of W, plus b.
        for k in 0..5 {
            let row = enc.projection.row(k);
            let expect = 0.2 * (0..TOY_GRID * TOY_GRID).map(|c| row[2 * c]).sum::<f64>() + enc.bias[k];
            assert_abs_diff_eq!(v[k], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_image_gives_bias() {
        let enc = toy_encoder(3, 4).unwrap();
        let v = enc.encode(&gray(9, 9, 0)).unwrap();
        assert_eq!(v, enc.bias.to_vec());
    }

    #[test]
    fn determinism_and_seed() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 13) as u8, (y * 7) as u8, ((x + y) * 5) as u8]));
        let a = toy_encoder(7, 6).unwrap();
        let b = toy_encoder(7, 6).unwrap();
        assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
        assert_ne!(a.encode(&img).unwrap(), toy_encoder(8, 6).unwrap().encode(&img).unwrap());
        assert!(toy_encoder(0, 0).is_err());
    }

    #[test]
    fn outside_pixels_do_not_matter() {
        let enc = toy_encoder(2, 8).unwrap();
        let a = RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 11 + y) as u8, 40, 90]));
        let mut b = a.clone();
        for (x, y, p) in b.enumerate_pixels_mut() {
            if !(5..12).contains(&x) || !(3..15).contains(&y) {
                *p = Rgb([255, 0, 17]);
            }
        }
        let region = Region::Box(BBox::new(5.0, 3.0, 12.0, 15.0));
        assert_eq!(encode_region(&enc, &a, region).unwrap(), encode_region(&enc, &b, region).unwrap());
        assert_ne!(
            encode_region(&enc, &a, Region::Full).unwrap(),
            encode_region(&enc, &b, Region::Full).unwrap()
        );
    }

    #[test]
    fn absent_and_mask_regions() {
        let enc = toy_encoder(2, 3).unwrap();
        let img = gray(10, 10, 100);
        assert_eq!(encode_region(&enc, &img, Region::Absent).unwrap(), (vec![0.0; 3], false));
        assert_eq!(encode_region(&enc, &img, Region::Mask(&Mask::empty(10, 10))).unwrap(), (vec![0.0; 3], false));
        let m = Mask::from_fn(10, 10, |x, y| (2..5).contains(&x) && (1..4).contains(&y));
        assert_eq!(
            encode_region(&enc, &img, Region::Mask(&m)).unwrap(),
            encode_region(&enc, &img, Region::Box(BBox::new(2.0, 1.0, 5.0, 4.0))).unwrap()
        );
        assert!(encode_region(&enc, &img, Region::Mask(&Mask::empty(4, 4))).is_err());
        assert!(encode_region(&enc, &img, Region::Box(BBox::new(20.0, 20.0, 30.0, 30.0))).is_err());
    }

    fn regions(d: usize) -> RegionFeatures {
        RegionFeatures {
            full: vec![1.0; d],
            crop: vec![2.0; d],
            hands: vec![0.0; d],
            obj1: vec![0.0; d],
            obj2: vec![0.0; d],
            present: [true, false, false, false],
        }
    }

    #[test]
    fn assembled_widths() {
        let r = regions(2048);
        assert_eq!(assemble_hand_object_features(&r, Representation::V).unwrap().len(), 2048);
        assert_eq!(assemble_hand_object_features(&r, Representation::Vc).unwrap().len(), 2048);
        let ho = assemble_hand_object_features(&r, Representation::VcHo).unwrap();
        assert_eq!(ho.len(), 8192);
        assert!(ho[..2048].iter().all(|&v| v == 2.0));
        assert!(ho[2048..].iter().all(|&v| v == 0.0));
        let mut bad = regions(4);
        bad.obj2 = vec![0.0; 3];
        assert!(assemble_hand_object_features(&bad, Representation::VcHo).is_err());
        assert!(assemble_hand_object_features(&bad, Representation::V).is_ok());
    }

    #[test]
    fn video_features_shape() {
        let enc = toy_encoder(0, 4).unwrap();
        let frames = vec![gray(12, 12, 10), gray(12, 12, 200)];
        let crops = vec![BBox::new(0.0, 0.0, 6.0, 6.0); 2];
        let set = MaskSet {
            hands: Mask::from_fn(12, 12, |x, _| x < 3),
            obj1: Mask::empty(12, 12),
            obj2: Mask::empty(12, 12),
            proposals: vec![],
        };
        let masks = vec![set.clone(), set];
        let x = extract_video_features(&enc, &frames, Some(&crops), Some(&masks), Representation::VcHo).unwrap();
        assert_eq!(x.dim(), (2, 16));
        assert!(x.row(0).iter().skip(8).all(|&v| v == 0.0));
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(extract_video_features(&enc, &frames, None, None, Representation::Vc).is_err());
        assert_eq!(extract_video_features(&enc, &frames, None, None, Representation::V).unwrap().dim(), (2, 4));
    }
}
