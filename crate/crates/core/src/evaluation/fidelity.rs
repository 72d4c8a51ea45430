//! Region isolation for identity-fidelity scoring.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::grid::{active_cells, Mask, Planes};

/// How isolated regions are turned into scorer inputs; recorded in reports.
pub const CROP_POLICY: &str = "tight bounding box, zero-padded to a centered square, bilinear resize to the scorer input size";

/// Full-size images with everything outside the region set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCrops {
    /// Concept region minus the component region.
    pub concept: Planes,
    pub concept_region: Mask,
    pub component: Planes,
    pub component_region: Mask,
}

impl FidelityCrops {
    pub fn concept_empty(&self) -> bool {
        active_cells(&self.concept_region) == 0
    }

    pub fn component_empty(&self) -> bool {
        active_cells(&self.component_region) == 0
    }
}

fn masked(image: &Planes, region: &Mask) -> Planes {
    let mut out = image.clone();
    for ((_, y, x), v) in out.indexed_iter_mut() {
        if region[[y, x]] == 0 {
            *v = 0.0;
        }
    }
    out
}

pub fn fidelity_preprocess(image: &Planes, concept_region: &Mask, component_region: &Mask) -> Result<FidelityCrops> {
    let (_, h, w) = image.dim();
    for (name, m) in [("concept", concept_region), ("component", component_region)] {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("{name} region {:?} vs image {:?}", m.dim(), (h, w))));
        }
    }
    let mut concept = concept_region.mapv(|v| u8::from(v != 0));
    concept.zip_mut_with(component_region, |c, &p| {
        if p != 0 {
            *c = 0;
        }
    });
    let component = component_region.mapv(|v| u8::from(v != 0));
    Ok(FidelityCrops {
        concept: masked(image, &concept),
        concept_region: concept,
        component: masked(image, &component),
        component_region: component,
    })
}

/// Inclusive bounding box `(y0, x0, y1, x1)` of the active cells.
pub fn bounding_box(region: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in region.indexed_iter() {
        if v != 0 {
            bb = Some(match bb {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            });
        }
    }
    bb
}

/// Cuts the region's bounding box out of a masked image, pads it to a
/// square and resizes it to `size x size`. `None` for an empty region.
pub fn tight_crop(masked: &Planes, region: &Mask, size: usize) -> Result<Option<Planes>> {
    if size == 0 {
        return Err(Error::Scorer("scorer input size must be positive".into()));
    }
    let Some((y0, x0, y1, x1)) = bounding_box(region) else {
        return Ok(None);
    };
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let side = bh.max(bw);
    let (oy, ox) = ((side - bh) / 2, (side - bw) / 2);
    let mut square = Planes::zeros((3, side, side));
    for c in 0..3 {
        for y in 0..bh {
            for x in 0..bw {
                square[[c, oy + y, ox + x]] = masked[[c, y0 + y, x0 + x]];
            }
        }
    }
    if side == size {
        return Ok(Some(square));
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(side as u32, side as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([square[[0, y, x]] as f32, square[[1, y, x]] as f32, square[[2, y, x]] as f32])
    });
    let resized = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    Ok(Some(Planes::from_shape_fn((3, size, size), |(c, y, x)| {
        f64::from(resized.get_pixel(x as u32, y as u32)[c])
    })))
}
