//! Distance-To-Line (DTL) and the sandbox's stand-in segmentation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    combined_distance_field, distance_transform, rasterize_polyline, CellSet, DistanceField, GridDims, Trajectory,
};
use crate::render::{latent_to_image, Render, RENDER_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    Thresholded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub token_index: usize,
    pub cells: CellSet,
    pub source: MaskSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceDtl {
    pub token_index: usize,
    pub dtl: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtlReport {
    pub dtl: f64,
    pub instances: Vec<InstanceDtl>,
}

/// Mask-averaged `exp(−D)`, averaged over instances. An empty mask counts
/// as a missing object and contributes 0.
pub fn dtl(masks: &[InstanceMask], fields: &[DistanceField]) -> Result<DtlReport> {
    if masks.len() != fields.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} distance fields",
            masks.len(),
            fields.len()
        )));
    }
    if masks.is_empty() {
        return Err(Error::InvalidConfig("DTL needs at least one instance".into()));
    }
    let mut instances = Vec::with_capacity(masks.len());
    for (mask, field) in masks.iter().zip(fields) {
        if mask.cells.dims != field.dims {
            return Err(Error::Shape(format!(
                "mask grid {:?} vs field grid {:?}",
                mask.cells.dims, field.dims
            )));
        }
        let n = mask.cells.len();
        let value = if n == 0 {
            0.0
        } else {
            mask.cells.iter().map(|(r, c)| (-field.get(r, c)).exp()).sum::<f64>() / n as f64
        };
        instances.push(InstanceDtl {
            token_index: mask.token_index,
            dtl: value,
            pixels: n,
        });
    }
    let dtl = instances.iter().map(|i| i.dtl).sum::<f64>() / instances.len() as f64;
    Ok(DtlReport { dtl, instances })
}

/// Distance field for DTL on a grid `scale` times finer than the latent
/// grid, recomputed from the scaled trajectory and expressed in latent cell
/// units.
pub fn scaled_distance_field(traj: &Trajectory, latent: GridDims, scale: usize) -> Result<DistanceField> {
    let fine = traj.scaled(scale);
    let dims = latent.scaled(scale);
    let raster = rasterize_polyline(&fine, dims)?;
    Ok(distance_transform(&raster)?.scaled_values(1.0 / scale as f64))
}

/// Guidance-side field at latent resolution (enhancement weights applied).
pub fn guidance_field(traj: &Trajectory, latent: GridDims) -> Result<DistanceField> {
    combined_distance_field(traj, latent)
}

/// DTL evaluated on the latent grid instead of the image: each blob's disk
/// is sampled at latent cell centers and distances come from the latent
/// rasterization. Used to check that the image-resolution metric does not
/// depend on the render scale.
pub fn latent_dtl(render: &Render, trajectories: &[Trajectory], latent: GridDims) -> Result<DtlReport> {
    let mut masks = Vec::with_capacity(trajectories.len());
    let mut fields = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let blob = render
            .blobs
            .get(t.token_index)
            .ok_or(Error::TokenOutOfRange {
                token: t.token_index,
                len: render.blobs.len(),
            })?;
        let mut cells = CellSet::new(latent);
        for i in 0..latent.len() {
            let (r, c) = latent.cell(i);
            let (dr, dc) = (latent_to_image(r as f64) - blob.center.0, latent_to_image(c as f64) - blob.center.1);
            if dr * dr + dc * dc <= blob.sigma * blob.sigma {
                cells.insert((r, c));
            }
        }
        if cells.is_empty() {
            let s = RENDER_SCALE as f64;
            let to_cell = |x: f64, n: usize| ((x - (s - 1.0) / 2.0) / s).round().clamp(0.0, (n - 1) as f64) as usize;
            cells.insert((to_cell(blob.center.0, latent.height), to_cell(blob.center.1, latent.width)));
        }
        masks.push(InstanceMask {
            token_index: t.token_index,
            cells,
            source: MaskSource::GroundTruth,
        });
        fields.push(distance_transform(&rasterize_polyline(t, latent)?)?);
    }
    dtl(&masks, &fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    #[default]
    GroundTruth,
    Threshold,
}

/// Intensity level a thresholded mask keeps, relative to a blob's peak.
const SEGMENT_LEVEL: f64 = 0.5;

/// One mask per prompt token, taken from the renderer's footprints or
/// recovered from the image by thresholding each label's intensity and
/// keeping the largest 4-connected component.
pub fn segment_blobs(render: &Render, mode: SegmentMode) -> Vec<InstanceMask> {
    match mode {
        SegmentMode::GroundTruth => render.masks.clone(),
        SegmentMode::Threshold => {
            let dims = render.image.dims;
            (0..render.blobs.len())
                .map(|token| {
                    let keep: Vec<bool> = (0..dims.len())
                        .map(|i| {
                            render.image.labels[i] as usize == token + 1
                                && render.image.intensity[i] >= SEGMENT_LEVEL
                        })
                        .collect();
                    InstanceMask {
                        token_index: token,
                        cells: largest_component(&keep, dims),
                        source: MaskSource::Thresholded,
                    }
                })
                .collect()
        }
    }
}

fn components(keep: &[bool], dims: GridDims) -> Vec<Vec<usize>> {
    let mut seen = vec![false; keep.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..keep.len() {
        if !keep[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = dims.cell(i);
            let neighbours = [
                (r > 0).then(|| i - dims.width),
                (r + 1 < dims.height).then(|| i + dims.width),
                (c > 0).then(|| i - 1),
                (c + 1 < dims.width).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if keep[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn largest_component(keep: &[bool], dims: GridDims) -> CellSet {
    let mut set = CellSet::new(dims);
    if let Some(best) = components(keep, dims).into_iter().max_by_key(|c| c.len()) {
        for i in best {
            set.insert(dims.cell(i));
        }
    }
    set
}

/// Number of 4-connected components in a cell set.
pub fn component_count(cells: &CellSet) -> usize {
    let dims = cells.dims;
    let keep = cells.indicator().into_iter().map(|x| x > 0.0).collect::<Vec<_>>();
    components(&keep, dims).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: GridDims, cells: &[(usize, usize)]) -> InstanceMask {
        let mut s = CellSet::new(dims);
        for &c in cells {
            s.insert(c);
        }
        InstanceMask {
            token_index: 0,
            cells: s,
            source: MaskSource::GroundTruth,
        }
    }

    #[test]
    fn mask_on_line_scores_one() {
        let dims = GridDims::new(6, 6);
        let traj = Trajectory::new(0, vec![vec![[1.0, 1.0], [1.0, 4.0]]]);
        let raster = rasterize_polyline(&traj, dims).unwrap();
        let field = distance_transform(&raster).unwrap();
        let m = InstanceMask {
            token_index: 0,
            cells: raster,
            source: MaskSource::GroundTruth,
        };
        assert_eq!(dtl(&[m], &[field]).unwrap().dtl, 1.0);
    }

    #[test]
    fn two_pixel_mask() {
        let dims = GridDims::new(1, 3);
        let field = DistanceField {
            dims,
            values: vec![0.0, 1.0, 2.0],
        };
        let r = dtl(&[mask(dims, &[(0, 0), (0, 1)])], &[field]).unwrap();
        let expect = (1.0 + (-1f64).exp()) / 2.0;
        assert!((r.dtl - expect).abs() < 1e-12);
        assert!((r.dtl - 0.6839397).abs() < 1e-7);
    }

    #[test]
    fn instance_mean_and_missing_instance() {
        let dims = GridDims::new(1, 2);
        let zero = DistanceField { dims, values: vec![0.0, 0.0] };
        let half = DistanceField {
            dims,
            values: vec![2f64.ln(), 2f64.ln()],
        };
        let r = dtl(&[mask(dims, &[(0, 0)]), mask(dims, &[(0, 1)])], &[zero.clone(), half]).unwrap();
        assert!((r.dtl - 0.75).abs() < 1e-15);
        let r = dtl(&[mask(dims, &[(0, 0)]), mask(dims, &[])], &[zero.clone(), zero.clone()]).unwrap();
        assert_eq!(r.dtl, 0.5);
        assert!(dtl(&[mask(dims, &[(0, 0)])], &[]).is_err());
    }

    #[test]
    fn scaled_field_is_in_latent_units() {
        let latent = GridDims::new(4, 4);
        let traj = Trajectory::new(0, vec![vec![[0.0, 0.0], [0.0, 3.0]]]);
        let f = scaled_distance_field(&traj, latent, 8).unwrap();
        assert_eq!(f.dims, GridDims::new(32, 32));
        // Latent row 0 maps to pixel row 3.5, rounded to 4; row 12 is one
        // latent cell below.
        assert_eq!(f.get(4, 10), 0.0);
        assert_eq!(f.get(12, 10), 1.0);
    }

    #[test]
    fn component_counting() {
        let dims = GridDims::new(3, 3);
        assert_eq!(component_count(&mask(dims, &[(0, 0), (0, 1), (2, 2)]).cells), 2);
        assert_eq!(component_count(&mask(dims, &[(0, 0), (1, 1)]).cells), 2);
    }
}
