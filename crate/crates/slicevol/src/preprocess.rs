//! Pre-processing pipeline from 3D masks to fixed-size 2D slice inputs:
//! isotropic resampling, centroid canonicalization with padding, coronal mode
//! filtering, maximal-area slice extraction and rotation augmentation.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::phantom::{rotation_matrix, LabelVolume};

/// The common grid every case is padded onto after centroid alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CanonicalGrid {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
}

impl Default for CanonicalGrid {
    fn default() -> Self {
        Self { dims: [164, 186, 176], voxel_size_mm: [1.0, 1.0, 1.0] }
    }
}

/// Single- or dual-view 2D binary input to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub coronal: Array2<u8>,
    pub transverse: Option<Array2<u8>>,
    pub case_id: String,
}

impl SlicePair {
    pub fn views(&self) -> usize {
        1 + self.transverse.is_some() as usize
    }

    pub fn size(&self) -> usize {
        self.coronal.dim().0
    }
}

/// Nearest-neighbour resampling to the target spacing. Output dims are the
/// rounded physical extent divided by the target spacing.
pub fn resample_isotropic(vol: &LabelVolume, target_mm: [f64; 3]) -> Result<LabelVolume> {
    if target_mm.iter().any(|&t| t <= 0.0) {
        return Err(SliceVolError::InvalidSize("target spacings must be positive".into()));
    }
    let dims = vol.dims();
    let src = vol.voxel_size_mm;
    let out_dims: Vec<usize> = (0..3)
        .map(|a| ((dims[a] as f64 * src[a] / target_mm[a]).round() as usize).max(1))
        .collect();
    let mut out = Array3::<u8>::zeros((out_dims[0], out_dims[1], out_dims[2]));
    let map = |k: usize, a: usize| -> usize {
        let c = (k as f64 + 0.5) * target_mm[a];
        ((c / src[a]).floor() as usize).min(dims[a] - 1)
    };
    for z in 0..out_dims[0] {
        let sz = map(z, 0);
        for y in 0..out_dims[1] {
            let sy = map(y, 1);
            for x in 0..out_dims[2] {
                out[[z, y, x]] = vol.data[[sz, sy, map(x, 2)]];
            }
        }
    }
    LabelVolume::new(out, target_mm, vol.case_id.clone())
}

/// Translates the mask so its foreground centroid sits at the grid centre and
/// pads/crops to `grid.dims`. The translation is a whole-voxel shift, so the
/// foreground count is preserved exactly.
pub fn canonicalize(vol: &LabelVolume, grid: &CanonicalGrid) -> Result<LabelVolume> {
    let (lo, hi) = vol.bounding_box().ok_or(SliceVolError::EmptySegmentation)?;
    for a in 0..3 {
        if hi[a] - lo[a] + 1 > grid.dims[a] {
            return Err(SliceVolError::GridOverflow(format!(
                "foreground bounding box extent {} exceeds grid dim {} on axis {}",
                hi[a] - lo[a] + 1,
                grid.dims[a],
                a
            )));
        }
    }
    let c = vol.centroid().expect("nonempty by bounding box check");
    let shift: Vec<i64> = (0..3)
        .map(|a| ((grid.dims[a] as f64 - 1.0) / 2.0 - c[a]).round() as i64)
        .collect();
    let mut out = Array3::<u8>::zeros((grid.dims[0], grid.dims[1], grid.dims[2]));
    for ((z, y, x), &v) in vol.data.indexed_iter() {
        if v == 1 {
            let idx = [z as i64 + shift[0], y as i64 + shift[1], x as i64 + shift[2]];
            if idx.iter().zip(&grid.dims).any(|(&i, &d)| i < 0 || i >= d as i64) {
                return Err(SliceVolError::GridOverflow(
                    "centred foreground does not fit the canonical grid".into(),
                ));
            }
            out[[idx[0] as usize, idx[1] as usize, idx[2] as usize]] = 1;
        }
    }
    LabelVolume::new(out, grid.voxel_size_mm, vol.case_id.clone())
}

/// k x k majority filter applied to every coronal (fixed-y) slice, with zero
/// padding at the edges. k must be odd so the vote over k^2 cells cannot tie.
pub fn mode_filter_coronal(vol: &LabelVolume, k: usize) -> Result<LabelVolume> {
    if k % 2 == 0 || k == 0 {
        return Err(SliceVolError::InvalidKernel(format!("kernel size must be odd, got {k}")));
    }
    let dims = vol.dims();
    let r = (k / 2) as i64;
    let half = (k * k / 2) as u32; // majority needs count > half
    let (nz, nx) = (dims[0], dims[2]);
    let mut out = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    // Summed-area table per slice, (nz+1) x (nx+1).
    let mut sat = vec![0u32; (nz + 1) * (nx + 1)];
    for y in 0..dims[1] {
        for z in 0..nz {
            let mut row = 0u32;
            for x in 0..nx {
                row += vol.data[[z, y, x]] as u32;
                sat[(z + 1) * (nx + 1) + (x + 1)] = sat[z * (nx + 1) + (x + 1)] + row;
            }
        }
        for z in 0..nz {
            let z0 = (z as i64 - r).max(0) as usize;
            let z1 = ((z as i64 + r + 1).min(nz as i64)) as usize;
            for x in 0..nx {
                let x0 = (x as i64 - r).max(0) as usize;
                let x1 = ((x as i64 + r + 1).min(nx as i64)) as usize;
                let ones = sat[z1 * (nx + 1) + x1] + sat[z0 * (nx + 1) + x0]
                    - sat[z1 * (nx + 1) + x0]
                    - sat[z0 * (nx + 1) + x1];
                out[[z, y, x]] = (ones > half) as u8;
            }
        }
    }
    LabelVolume::new(out, vol.voxel_size_mm, vol.case_id.clone())
}

fn resample_2d_nn(img: &Array2<u8>, out_size: usize) -> Array2<u8> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((out_size, out_size), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * h as f64 / out_size as f64).floor() as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * w as f64 / out_size as f64).floor() as usize).min(w - 1);
        img[[iy, ix]]
    })
}

/// Per-slice foreground areas along an axis (0 = transverse/z, 1 = coronal/y).
fn slice_areas(vol: &LabelVolume, axis: usize) -> Vec<usize> {
    let dims = vol.dims();
    let mut areas = vec![0usize; dims[axis]];
    for ((z, y, x), &v) in vol.data.indexed_iter() {
        if v == 1 {
            areas[[z, y, x][axis]] += 1;
        }
    }
    areas
}

/// Picks the index with maximal area; ties broken toward the index nearest the
/// centroid coordinate, then toward the lower index.
fn argmax_slice(areas: &[usize], centroid: f64) -> usize {
    let max = *areas.iter().max().unwrap();
    areas
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == max)
        .min_by(|(i, _), (j, _)| {
            let di = (*i as f64 - centroid).abs();
            let dj = (*j as f64 - centroid).abs();
            di.partial_cmp(&dj).unwrap().then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .unwrap()
}

/// Extracts the largest-area coronal slice (and, for dual view, the
/// largest-area transverse slice) and resamples each to `out_size^2`.
pub fn extract_slices(vol: &LabelVolume, out_size: usize, dual: bool) -> Result<SlicePair> {
    let c = vol.centroid().ok_or(SliceVolError::EmptySegmentation)?;
    let dims = vol.dims();
    let cor_areas = slice_areas(vol, 1);
    let y = argmax_slice(&cor_areas, c[1]);
    let coronal_full = Array2::from_shape_fn((dims[0], dims[2]), |(z, x)| vol.data[[z, y, x]]);
    let coronal = resample_2d_nn(&coronal_full, out_size);
    let transverse = if dual {
        let tra_areas = slice_areas(vol, 0);
        let z = argmax_slice(&tra_areas, c[0]);
        let full = Array2::from_shape_fn((dims[1], dims[2]), |(yy, x)| vol.data[[z, yy, x]]);
        Some(resample_2d_nn(&full, out_size))
    } else {
        None
    };
    Ok(SlicePair { coronal, transverse, case_id: vol.case_id.clone() })
}

/// Index of the coronal slice that `extract_slices` would pick; used by the
/// evaluation harness and tests.
pub fn selected_coronal_index(vol: &LabelVolume) -> Result<usize> {
    let c = vol.centroid().ok_or(SliceVolError::EmptySegmentation)?;
    Ok(argmax_slice(&slice_areas(vol, 1), c[1]))
}

/// Rotates the mask by three independent uniform angles in
/// `[-max_deg, +max_deg]` about the z, y, x axes through the foreground
/// centroid, with inverse-mapping nearest-neighbour sampling.
pub fn augment_rotate(vol: &LabelVolume, max_deg: f64, seed: u64) -> Result<LabelVolume> {
    if max_deg < 0.0 {
        return Err(SliceVolError::InvalidSize("max_deg must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = if max_deg == 0.0 {
        [0.0; 3]
    } else {
        [
            rng.gen_range(-max_deg..=max_deg),
            rng.gen_range(-max_deg..=max_deg),
            rng.gen_range(-max_deg..=max_deg),
        ]
    };
    if angles == [0.0; 3] {
        return Ok(vol.clone());
    }
    let Some((lo, hi)) = vol.bounding_box() else {
        return Ok(vol.clone());
    };
    let c = vol.centroid().expect("nonempty");
    let dims = vol.dims();
    let vs = vol.voxel_size_mm;
    // Centre of rotation in mm (voxel centres are at (i + 0.5) * spacing).
    let c_mm = [(c[0] + 0.5) * vs[0], (c[1] + 0.5) * vs[1], (c[2] + 0.5) * vs[2]];
    // Any rotated foreground voxel stays within the bounding-box circumradius.
    let mut radius: f64 = 0.0;
    for corner in 0..8 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let idx = if corner >> a & 1 == 1 { hi[a] } else { lo[a] };
            let p = (idx as f64 + 0.5) * vs[a];
            d2 += (p - c_mm[a]).powi(2);
        }
        radius = radius.max(d2.sqrt());
    }
    let m = rotation_matrix(angles);
    let mut out = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let rlo: Vec<usize> = (0..3)
        .map(|a| (((c_mm[a] - radius) / vs[a] - 1.0).floor().max(0.0)) as usize)
        .collect();
    let rhi: Vec<usize> = (0..3)
        .map(|a| ((((c_mm[a] + radius) / vs[a] + 1.0).ceil()) as usize).min(dims[a]))
        .collect();
    for z in rlo[0]..rhi[0] {
        let pz = (z as f64 + 0.5) * vs[0] - c_mm[0];
        for y in rlo[1]..rhi[1] {
            let py = (y as f64 + 0.5) * vs[1] - c_mm[1];
            for x in rlo[2]..rhi[2] {
                let px = (x as f64 + 0.5) * vs[2] - c_mm[2];
                // Inverse rotation (transpose) of the Cartesian offset.
                let q = [
                    m[0][0] * px + m[1][0] * py + m[2][0] * pz,
                    m[0][1] * px + m[1][1] * py + m[2][1] * pz,
                    m[0][2] * px + m[1][2] * py + m[2][2] * pz,
                ];
                // Back to [z, y, x] indices of the nearest source voxel.
                let sz = ((q[2] + c_mm[0]) / vs[0] - 0.5).round();
                let sy = ((q[1] + c_mm[1]) / vs[1] - 0.5).round();
                let sx = ((q[0] + c_mm[2]) / vs[2] - 0.5).round();
                if sz >= 0.0
                    && sy >= 0.0
                    && sx >= 0.0
                    && (sz as usize) < dims[0]
                    && (sy as usize) < dims[1]
                    && (sx as usize) < dims[2]
                {
                    out[[z, y, x]] = vol.data[[sz as usize, sy as usize, sx as usize]];
                }
            }
        }
    }
    LabelVolume::new(out, vs, vol.case_id.clone())
}
