//! Concept/component pair ingestion and mask preparation.
//!
//! A pair is declared in a YAML file:
//!
//! ```yaml
//! pair_id: person_hair
//! resolution: 512
//! samples:
//!   - role: concept
//!     category_label: person
//!     pseudo_word: "<person>"
//!     images:
//!       - image: images/p0.png
//!         mask: masks/p0.png
//!         component_mask: masks/p0_hair.png   # optional
//!   - role: component
//!     category_label: hair
//!     pseudo_word: "<hair>"
//!     images:
//!       - { image: images/h0.png, mask: masks/h0.png }
//! ```
//!
//! Paths are relative to the file's directory. Images are 8-bit RGB and are
//! normalized to `[-1, 1]`; masks are 8-bit grayscale binarized at 0.5.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{active_cells, block_max, is_binary, Mask, Planes};
use crate::seed::{self, Stream};

pub const DEFAULT_RESOLUTION: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Concept,
    Component,
}

impl Role {
    fn expected_index(self) -> usize {
        match self {
            Role::Concept => 1,
            Role::Component => 2,
        }
    }
}

/// On-disk declaration of one reference image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub role: Role,
    pub category_label: String,
    pub pseudo_word: String,
    pub images: Vec<ImageEntry>,
}

/// The pair fields of a config file. Other top-level sections are ignored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFile {
    pub pair_id: String,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub samples: Vec<SampleEntry>,
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    /// `(3, H, W)` in `[-1, 1]`.
    pub pixels: Planes,
    /// Raw target mask `M_nk`, 1 = target region.
    pub mask: Mask,
    /// Region of the other sample's target inside this image, when known.
    pub component_region: Option<Mask>,
    pub entry: ImageEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    /// 1-based sample index.
    pub index: usize,
    pub role: Role,
    pub category_label: String,
    pub pseudo_word: String,
    pub images: Vec<ReferenceImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub pair_id: String,
    pub resolution: usize,
    pub samples: Vec<SampleSpec>,
}

impl PairSpec {
    pub fn concept(&self) -> &SampleSpec {
        &self.samples[0]
    }

    pub fn component(&self) -> &SampleSpec {
        &self.samples[1]
    }

    pub fn image_count(&self) -> usize {
        self.samples.iter().map(|s| s.images.len()).sum()
    }

    pub fn to_file(&self) -> PairFile {
        PairFile {
            pair_id: self.pair_id.clone(),
            resolution: self.resolution,
            samples: self
                .samples
                .iter()
                .map(|s| SampleEntry {
                    role: s.role,
                    category_label: s.category_label.clone(),
                    pseudo_word: s.pseudo_word.clone(),
                    images: s.images.iter().map(|i| i.entry.clone()).collect(),
                })
                .collect(),
        }
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        if self.samples.len() != 2 {
            return Err(Error::ingestion(
                origin,
                format!("expected exactly 2 samples, found {}", self.samples.len()),
            ));
        }
        let mut words = HashSet::new();
        for s in &self.samples {
            if s.role.expected_index() != s.index {
                return Err(Error::ingestion(
                    origin,
                    format!(
                        "sample {} has role {:?}; sample 1 must be the concept and sample 2 the component",
                        s.index, s.role
                    ),
                ));
            }
            if s.images.is_empty() {
                return Err(Error::ingestion(
                    origin,
                    format!("sample {} declares no images", s.index),
                ));
            }
            if s.pseudo_word.trim().is_empty() || s.pseudo_word.contains(char::is_whitespace) {
                return Err(Error::ingestion(
                    origin,
                    format!("pseudo-word `{}` must be one non-empty token", s.pseudo_word),
                ));
            }
            if !words.insert(s.pseudo_word.as_str()) {
                return Err(Error::ingestion(
                    origin,
                    format!("duplicate pseudo-word `{}`", s.pseudo_word),
                ));
            }
            if s.category_label.trim().is_empty() {
                return Err(Error::ingestion(
                    origin,
                    format!("sample {} has an empty category label", s.index),
                ));
            }
        }
        Ok(())
    }
}

/// Non-fatal findings raised while loading a pair.
#[derive(Debug, Clone, PartialEq)]
pub enum IngestWarning {
    /// The grayscale mask had more than two distinct levels; it was still thresholded.
    NonBinaryMask { path: PathBuf, levels: usize },
}

/// Loads and validates a pair, logging any warnings.
pub fn load_pair(config_path: &Path) -> Result<PairSpec> {
    let (pair, warnings) = load_pair_with_warnings(config_path)?;
    for w in &warnings {
        match w {
            IngestWarning::NonBinaryMask { path, levels } => log::warn!(
                "mask {} has {levels} distinct gray levels; thresholded at 0.5",
                path.display()
            ),
        }
    }
    Ok(pair)
}

pub fn load_pair_with_warnings(config_path: &Path) -> Result<(PairSpec, Vec<IngestWarning>)> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::ingestion(config_path, format!("cannot read pair config: {e}")))?;
    let file: PairFile = serde_yaml::from_str(&text)
        .map_err(|e| Error::ingestion(config_path, format!("invalid pair config: {e}")))?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    pair_from_file(&file, base, config_path)
}

/// Builds a pair from an already-parsed declaration; relative paths resolve against `base`.
pub fn pair_from_file(
    file: &PairFile,
    base: &Path,
    origin: &Path,
) -> Result<(PairSpec, Vec<IngestWarning>)> {
    if file.resolution == 0 {
        return Err(Error::ingestion(origin, "resolution must be positive"));
    }
    let mut warnings = Vec::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    for (i, entry) in file.samples.iter().enumerate() {
        let mut images = Vec::with_capacity(entry.images.len());
        for img in &entry.images {
            let pixels = read_rgb(&base.join(&img.image), file.resolution)?;
            let (mask, levels) = read_mask(&base.join(&img.mask), file.resolution)?;
            if levels > 2 {
                warnings.push(IngestWarning::NonBinaryMask {
                    path: base.join(&img.mask),
                    levels,
                });
            }
            let component_region = match &img.component_mask {
                Some(p) => {
                    let (m, levels) = read_mask(&base.join(p), file.resolution)?;
                    if levels > 2 {
                        warnings.push(IngestWarning::NonBinaryMask {
                            path: base.join(p),
                            levels,
                        });
                    }
                    Some(m)
                }
                None => None,
            };
            images.push(ReferenceImage {
                pixels,
                mask,
                component_region,
                entry: img.clone(),
            });
        }
        samples.push(SampleSpec {
            index: i + 1,
            role: entry.role,
            category_label: entry.category_label.clone(),
            pseudo_word: entry.pseudo_word.clone(),
            images,
        });
    }
    let pair = PairSpec {
        pair_id: file.pair_id.clone(),
        resolution: file.resolution,
        samples,
    };
    pair.validate(origin)?;
    Ok((pair, warnings))
}

fn read_rgb(path: &Path, resolution: usize) -> Result<Planes> {
    if !path.exists() {
        return Err(Error::ingestion(path, "image file not found"));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w as usize != resolution || h as usize != resolution {
        return Err(Error::ingestion(
            path,
            format!("image is {w}x{h}, expected {resolution}x{resolution}"),
        ));
    }
    Ok(rgb_to_planes(&img))
}

/// Returns the binarized mask and the number of distinct gray levels seen.
fn read_mask(path: &Path, resolution: usize) -> Result<(Mask, usize)> {
    if !path.exists() {
        return Err(Error::ingestion(path, "mask file not found"));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    if w as usize != resolution || h as usize != resolution {
        return Err(Error::ingestion(
            path,
            format!("mask is {w}x{h}, expected {resolution}x{resolution}"),
        ));
    }
    let levels: BTreeSet<u8> = img.pixels().map(|p| p.0[0]).collect();
    let mask = Mask::from_shape_fn((h as usize, w as usize), |(y, x)| {
        binarize(img.get_pixel(x as u32, y as u32).0[0])
    });
    Ok((mask, levels.len()))
}

fn binarize(level: u8) -> u8 {
    (f64::from(level) / 255.0 >= 0.5) as u8
}

pub fn rgb_to_planes(img: &RgbImage) -> Planes {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 127.5 - 1.0
    })
}

/// Quantizes `[-1, 1]` planes to 8-bit RGB, clamping excursions.
pub fn planes_to_rgb(planes: &Planes) -> RgbImage {
    let (_, h, w) = planes.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = (planes[[c, y as usize, x as usize]] + 1.0) * 127.5;
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    })
}

pub fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes the pair's files and `pair.yaml` under `dir`, using each image's
/// declared relative paths. Returns the path of the written config.
pub fn save_pair(pair: &PairSpec, dir: &Path) -> Result<PathBuf> {
    for sample in &pair.samples {
        for img in &sample.images {
            save_png(&planes_to_rgb(&img.pixels).into(), &dir.join(&img.entry.image))?;
            save_png(&mask_to_gray(&img.mask).into(), &dir.join(&img.entry.mask))?;
            if let (Some(region), Some(path)) = (&img.component_region, &img.entry.component_mask) {
                save_png(&mask_to_gray(region).into(), &dir.join(path))?;
            }
        }
    }
    let path = dir.join("pair.yaml");
    let text = serde_yaml::to_string(&pair.to_file())?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Per-image masks consumed by the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Image-resolution mask after concept/component exclusion.
    pub effective: Mask,
    /// Block-max downsampled to the latent grid.
    pub latent: Mask,
    /// Block-max downsampled to the cross-attention grid.
    pub attention: Mask,
}

/// Builds one [`MaskSet`] per reference image, indexed `[sample][image]`.
///
/// Concept masks exclude the component region of the same photo, taken from
/// an explicit `component_mask` or, when the photo is also listed as a
/// component reference, from that reference's mask.
pub fn prepare_masks(
    pair: &PairSpec,
    latent_dims: (usize, usize),
    attn_dims: (usize, usize),
) -> Result<Vec<Vec<MaskSet>>> {
    let mut out = Vec::with_capacity(pair.samples.len());
    for sample in &pair.samples {
        let mut sets = Vec::with_capacity(sample.images.len());
        for (k, img) in sample.images.iter().enumerate() {
            let label = format!("sample {} image {} ({})", sample.index, k, img.entry.image.display());
            if !is_binary(&img.mask) {
                return Err(Error::Mask {
                    image: label,
                    message: "mask is not binary".into(),
                });
            }
            let exclusion = match sample.role {
                Role::Concept => component_region_for(pair, img),
                Role::Component => None,
            };
            let effective = match exclusion {
                Some(region) => {
                    if region.dim() != img.mask.dim() {
                        return Err(Error::Mask {
                            image: label,
                            message: "component region size differs from the mask".into(),
                        });
                    }
                    let mut m = img.mask.clone();
                    m.zip_mut_with(region, |a, &b| *a &= 1 - b.min(1));
                    if active_cells(&m) == 0 {
                        return Err(Error::Mask {
                            image: label,
                            message: "component covers entire concept".into(),
                        });
                    }
                    m
                }
                None => img.mask.clone(),
            };
            if active_cells(&effective) == 0 {
                return Err(Error::Mask {
                    image: label,
                    message: "mask is empty".into(),
                });
            }
            let latent = block_max(&effective, latent_dims.0, latent_dims.1)?;
            let attention = block_max(&effective, attn_dims.0, attn_dims.1)?;
            sets.push(MaskSet {
                effective,
                latent,
                attention,
            });
        }
        out.push(sets);
    }
    Ok(out)
}

/// Component region inside a concept photo: its explicit `component_mask`, or
/// the mask of the component reference showing the same photo.
pub fn component_region_for<'a>(pair: &'a PairSpec, img: &'a ReferenceImage) -> Option<&'a Mask> {
    if let Some(r) = &img.component_region {
        return Some(r);
    }
    pair.samples
        .iter()
        .filter(|s| s.role == Role::Component)
        .flat_map(|s| s.images.iter())
        .find(|c| c.entry.image == img.entry.image)
        .map(|c| &c.mask)
}

/// Generates a synthetic pair: a colored disc (the concept) topped by a
/// striped square (the component), over smooth colored backgrounds.
///
/// Concept photos carry the component inside them and declare it through
/// `component_mask`; component photos show the square alone at a larger scale.
pub fn synthetic_pair(resolution: usize, images_per_sample: usize, seed: u64) -> PairSpec {
    let mut samples = Vec::with_capacity(2);
    for (n, role) in [Role::Concept, Role::Component].into_iter().enumerate() {
        let mut images = Vec::with_capacity(images_per_sample);
        for k in 0..images_per_sample {
            let mut rng = seed::rng(seed, Stream::Synthetic, &[n as u64, k as u64]);
            let jitter = Uniform::new(-0.08, 0.08);
            let r = resolution as f64;
            let bg: [f64; 3] = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)];
            let mut pixels = Planes::zeros((3, resolution, resolution));
            let mut mask = Mask::zeros((resolution, resolution));
            let mut region = Mask::zeros((resolution, resolution));
            let (cx, cy) = (0.5 * r + jitter.sample(&mut rng) * r, 0.55 * r + jitter.sample(&mut rng) * r);
            let radius = 0.3 * r;
            let side = match role {
                Role::Concept => 0.22 * r,
                Role::Component => 0.45 * r,
            };
            let (sx, sy) = match role {
                Role::Concept => (cx - side / 2.0, cy - radius - side * 0.3),
                Role::Component => (cx - side / 2.0, cy - side / 2.0),
            };
            for y in 0..resolution {
                for x in 0..resolution {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let in_disc = role == Role::Concept
                        && (fx - cx).powi(2) + (fy - cy).powi(2) <= radius * radius;
                    let in_square = fx >= sx && fx < sx + side && fy >= sy && fy < sy + side;
                    let shade = (fx / r - 0.5) * 0.3;
                    let mut px = [bg[0] + shade, bg[1] - shade, bg[2]];
                    if in_disc {
                        px = [0.8, -0.2, -0.6];
                    }
                    if in_square {
                        let stripe = if ((fy - sy) / side * 6.0) as usize % 2 == 0 { 0.9 } else { -0.3 };
                        px = [-0.7, stripe, 0.7];
                    }
                    for c in 0..3 {
                        pixels[[c, y, x]] = px[c].clamp(-1.0, 1.0);
                    }
                    match role {
                        Role::Concept => {
                            if in_disc || in_square {
                                mask[[y, x]] = 1;
                            }
                            if in_square {
                                region[[y, x]] = 1;
                            }
                        }
                        Role::Component => {
                            if in_square {
                                mask[[y, x]] = 1;
                            }
                        }
                    }
                }
            }
            let tag = match role {
                Role::Concept => "concept",
                Role::Component => "component",
            };
            let entry = ImageEntry {
                image: PathBuf::from(format!("images/{tag}_{k}.png")),
                mask: PathBuf::from(format!("masks/{tag}_{k}.png")),
                component_mask: (role == Role::Concept)
                    .then(|| PathBuf::from(format!("masks/{tag}_{k}_component.png"))),
            };
            images.push(ReferenceImage {
                // round-trip through 8 bits so the in-memory pair equals a reload
                pixels: rgb_to_planes(&planes_to_rgb(&pixels)),
                mask,
                component_region: (role == Role::Concept).then_some(region),
                entry,
            });
        }
        let (label, word) = match role {
            Role::Concept => ("toy", "<toy>"),
            Role::Component => ("hat", "<hat>"),
        };
        samples.push(SampleSpec {
            index: n + 1,
            role,
            category_label: label.into(),
            pseudo_word: word.into(),
            images,
        });
    }
    PairSpec {
        pair_id: format!("synthetic_{resolution}"),
        resolution,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_image_pair(mask: Mask, region: Option<Mask>, res: usize) -> PairSpec {
        let mut pair = synthetic_pair(res, 1, 0);
        pair.samples[0].images[0].mask = mask;
        pair.samples[0].images[0].component_region = region;
        pair
    }

    #[test]
    fn exclusion_of_empty_component_keeps_mask() {
        let pair = one_image_pair(Mask::ones((16, 16)), Some(Mask::zeros((16, 16))), 16);
        let sets = prepare_masks(&pair, (4, 4), (4, 4)).unwrap();
        assert_eq!(sets[0][0].effective, Mask::ones((16, 16)));
    }

    #[test]
    fn full_component_region_is_an_error() {
        let pair = one_image_pair(Mask::ones((16, 16)), Some(Mask::ones((16, 16))), 16);
        let err = prepare_masks(&pair, (4, 4), (4, 4)).unwrap_err();
        assert!(err.to_string().contains("component covers entire concept"), "{err}");
    }

    #[test]
    fn effective_concept_mask_excludes_component() {
        let pair = synthetic_pair(32, 2, 3);
        let sets = prepare_masks(&pair, (8, 8), (4, 4)).unwrap();
        for (img, set) in pair.samples[0].images.iter().zip(&sets[0]) {
            let region = img.component_region.as_ref().unwrap();
            assert!(set.effective.iter().zip(region.iter()).all(|(&e, &r)| e & r == 0));
            assert!(active_cells(&set.latent) > 0);
            assert!(is_binary(&set.latent) && is_binary(&set.attention));
        }
    }

    #[test]
    fn shared_photo_uses_component_mask_for_exclusion() {
        let mut pair = synthetic_pair(16, 1, 0);
        let shared = pair.samples[0].images[0].entry.image.clone();
        pair.samples[0].images[0].component_region = None;
        pair.samples[0].images[0].entry.component_mask = None;
        pair.samples[0].images[0].mask = Mask::ones((16, 16));
        let mut comp = Mask::zeros((16, 16));
        comp.slice_mut(ndarray::s![0..4, ..]).fill(1);
        pair.samples[1].images[0].mask = comp;
        pair.samples[1].images[0].entry.image = shared;
        let sets = prepare_masks(&pair, (4, 4), (4, 4)).unwrap();
        assert_eq!(active_cells(&sets[0][0].effective), 16 * 12);
    }
}
