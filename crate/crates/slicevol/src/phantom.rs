//! Synthetic spleen-like voxel phantoms with analytically known volume.
//!
//! Phantoms are voxelized superellipsoids (exponent 2) with optional smooth
//! bend/taper deformation and rotation. The family is chosen so that the
//! undeformed members are exact ellipsoids, whose volumes and diameters can be
//! checked by brute force against closed forms.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::SPLENOMEGALY_THRESHOLD_ML;

/// 3D binary voxel mask with physical voxel size.
///
/// Index order is `[z, y, x]`: z = superior-inferior (transverse slices are
/// fixed-z), y = anterior-posterior (coronal slices are fixed-y), x =
/// left-right.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    /// Spacing in mm, `[z, y, x]` order.
    pub voxel_size_mm: [f64; 3],
    pub case_id: String,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, voxel_size_mm: [f64; 3], case_id: impl Into<String>) -> Result<Self> {
        if voxel_size_mm.iter().any(|&s| s <= 0.0) {
            return Err(SliceVolError::InvalidSize(format!(
                "voxel spacings must be positive, got {voxel_size_mm:?}"
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(SliceVolError::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { data, voxel_size_mm, case_id: case_id.into() })
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Foreground centroid in index space `[z, y, x]`, or None for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for ((z, y, x), &v) in self.data.indexed_iter() {
            if v == 1 {
                sum[0] += z as f64;
                sum[1] += y as f64;
                sum[2] += x as f64;
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        Some([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
    }

    /// Inclusive foreground bounding box `([z0,y0,x0], [z1,y1,x1])`.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((z, y, x), &v) in self.data.indexed_iter() {
            if v == 1 {
                any = true;
                let idx = [z, y, x];
                for a in 0..3 {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// Parameters of the deformed-superellipsoid phantom family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Base semi-axes in mm, Cartesian `(rx, ry, rz)`.
    pub base_semi_axes_mm: [f64; 3],
    /// Axis curvature in `[0, 1]`; shifts the cross-section centre along x as
    /// a parabolic function of z.
    pub bend_strength: f64,
    /// Linear radius shrink towards +z, in `[0, 1]`.
    pub taper_strength: f64,
    /// Rotation about the (z, y, x) axes in degrees, applied as Rz·Ry·Rx.
    pub rotation_deg: [f64; 3],
    /// Output grid `[z, y, x]`.
    pub grid_dims: [usize; 3],
    /// Voxel spacing in mm, `[z, y, x]`.
    pub voxel_size_mm: [f64; 3],
    /// If set, semi-axes are uniformly rescaled until the voxelized volume is
    /// within 5% of this target.
    pub target_volume_ml: Option<f64>,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.base_semi_axes_mm.iter().any(|&r| r <= 0.0) {
            return Err(SliceVolError::InvalidSize("semi-axes must be positive".into()));
        }
        if self.grid_dims.iter().any(|&d| d == 0) || self.voxel_size_mm.iter().any(|&v| v <= 0.0) {
            return Err(SliceVolError::InvalidSize("grid dims and spacings must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bend_strength) || !(0.0..=1.0).contains(&self.taper_strength) {
            return Err(SliceVolError::InvalidSize("bend/taper strength must be in [0,1]".into()));
        }
        if let Some(t) = self.target_volume_ml {
            if t <= 0.0 {
                return Err(SliceVolError::InvalidSize("target volume must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Manual 2D measurements mirroring the clinical workflow: spleen length,
/// maximal transverse width, and thickness perpendicular to the width chord.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManualMeasurements {
    pub length_mm: f64,
    pub max_width_mm: f64,
    pub thickness_at_hilum_mm: f64,
}

/// One dataset entry: ground-truth volume, splenomegaly label, measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub volume_ml: f64,
    pub splenomegaly: bool,
    pub measurements: ManualMeasurements,
    pub fold: Option<usize>,
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>, volume_ml: f64, measurements: ManualMeasurements) -> Self {
        Self {
            case_id: case_id.into(),
            volume_ml,
            splenomegaly: volume_ml > SPLENOMEGALY_THRESHOLD_ML,
            measurements,
            fold: None,
        }
    }
}

/// 3x3 rotation matrix for intrinsic rotations Rz(az)·Ry(ay)·Rx(ax), angles in
/// degrees, acting on Cartesian (x, y, z) column vectors.
pub(crate) fn rotation_matrix(rotation_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [az, ay, ax] = rotation_deg.map(f64::to_radians);
    let (sz, cz) = az.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sx, cx) = ax.sin_cos();
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    mat_mul(&mat_mul(&rz, &ry), &rx)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

/// Membership test in the shape's local frame. `q` is Cartesian (x, y, z) in
/// mm relative to the shape centre, `scale` multiplies the base semi-axes.
fn inside_local(q: [f64; 3], params: &PhantomParams, scale: f64) -> bool {
    let [rx, ry, rz] = params.base_semi_axes_mm.map(|r| r * scale);
    let u = q[2] / rz;
    if u.abs() > 1.0 {
        return false;
    }
    // Radii shrink linearly towards +z, at most 60% at full taper strength.
    let t = 1.0 - params.taper_strength * 0.6 * (u + 1.0) / 2.0;
    // Parabolic axis curvature along x.
    let ox = params.bend_strength * rx * u * u;
    let fx = (q[0] - ox) / (rx * t);
    let fy = q[1] / (ry * t);
    fx * fx + fy * fy + u * u <= 1.0
}

/// Conservative per-grid-axis half-extents (mm) of the deformed, rotated shape.
fn half_extents_mm(params: &PhantomParams, scale: f64) -> [f64; 3] {
    let r = params.base_semi_axes_mm;
    // Bend shifts the x cross-section centre by up to bend*rx.
    let eff = [r[0] * (1.0 + params.bend_strength) * scale, r[1] * scale, r[2] * scale];
    let m = rotation_matrix(params.rotation_deg);
    // Extent of a rotated ellipsoid along Cartesian axis i: sqrt(sum_j (M_ij r_j)^2).
    let ex: Vec<f64> = (0..3)
        .map(|i| (0..3).map(|j| (m[i][j] * eff[j]).powi(2)).sum::<f64>().sqrt())
        .collect();
    // Back to [z, y, x] grid order.
    [ex[2], ex[1], ex[0]]
}

fn voxelize(params: &PhantomParams, scale: f64, center_mm: [f64; 3]) -> Result<Array3<u8>> {
    let dims = params.grid_dims;
    let vs = params.voxel_size_mm;
    let ext = half_extents_mm(params, scale);
    for a in 0..3 {
        let span = dims[a] as f64 * vs[a];
        if center_mm[a] - ext[a] < 0.0 || center_mm[a] + ext[a] > span {
            return Err(SliceVolError::GridOverflow(format!(
                "shape extent {:.1} mm around centre {:.1} mm exceeds grid span {:.1} mm on axis {}",
                ext[a], center_mm[a], span, a
            )));
        }
    }
    let m = rotation_matrix(params.rotation_deg);
    // Inverse rotation = transpose.
    let mut data = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let lo: Vec<usize> = (0..3)
        .map(|a| (((center_mm[a] - ext[a]) / vs[a]).floor().max(0.0)) as usize)
        .collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| ((((center_mm[a] + ext[a]) / vs[a]).ceil()) as usize).min(dims[a]))
        .collect();
    for z in lo[0]..hi[0] {
        let pz = (z as f64 + 0.5) * vs[0] - center_mm[0];
        for y in lo[1]..hi[1] {
            let py = (y as f64 + 0.5) * vs[1] - center_mm[1];
            for x in lo[2]..hi[2] {
                let px = (x as f64 + 0.5) * vs[2] - center_mm[2];
                // p is Cartesian (x, y, z); q = R^T p.
                let q = [
                    m[0][0] * px + m[1][0] * py + m[2][0] * pz,
                    m[0][1] * px + m[1][1] * py + m[2][1] * pz,
                    m[0][2] * px + m[1][2] * py + m[2][2] * pz,
                ];
                if inside_local(q, params, scale) {
                    data[[z, y, x]] = 1;
                }
            }
        }
    }
    Ok(data)
}

/// Generates a binary phantom mask. The seed only jitters the placement of the
/// shape on the grid (by whole voxels); identical `(params, seed)` pairs yield
/// bit-identical masks.
pub fn generate_phantom(params: &PhantomParams, seed: u64) -> Result<LabelVolume> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: [i64; 3] = [rng.gen_range(-2..=2), rng.gen_range(-2..=2), rng.gen_range(-2..=2)];
    let center: Vec<f64> = (0..3)
        .map(|a| (params.grid_dims[a] as f64 / 2.0 + jitter[a] as f64) * params.voxel_size_mm[a])
        .collect();
    let center = [center[0], center[1], center[2]];

    let cell_ml = params.voxel_size_mm.iter().product::<f64>() / 1000.0;
    match params.target_volume_ml {
        None => {
            let data = voxelize(params, 1.0, center)?;
            LabelVolume::new(data, params.voxel_size_mm, "")
        }
        Some(target) => {
            // Secant iteration on the uniform semi-axis scale; volume grows
            // like scale^3 so the first guess is already close.
            let mut scale = 1.0f64;
            let mut data = voxelize(params, scale, center)?;
            let mut vol = data.iter().filter(|&&v| v == 1).count() as f64 * cell_ml;
            for _ in 0..24 {
                if vol > 0.0 && (vol - target).abs() / target <= 0.04 {
                    return LabelVolume::new(data, params.voxel_size_mm, "");
                }
                if vol <= 0.0 {
                    scale *= 2.0;
                } else {
                    scale *= (target / vol).cbrt();
                }
                data = voxelize(params, scale, center).map_err(|e| match e {
                    SliceVolError::GridOverflow(msg) => SliceVolError::TargetInfeasible(format!(
                        "target {target} mL needs a shape larger than the grid ({msg})"
                    )),
                    other => other,
                })?;
                vol = data.iter().filter(|&&v| v == 1).count() as f64 * cell_ml;
            }
            Err(SliceVolError::TargetInfeasible(format!(
                "could not reach {target} mL within 5% (last {vol:.1} mL)"
            )))
        }
    }
}

/// Ground-truth volumetry: foreground voxel count times the voxel cell volume,
/// converted mm^3 -> mL.
pub fn voxel_volume(vol: &LabelVolume) -> f64 {
    let cell_ml = vol.voxel_size_mm.iter().product::<f64>() / 1000.0;
    vol.foreground_count() as f64 * cell_ml
}

/// Extracts the clinical-baseline measurements from a 3D mask.
///
/// L = number of transverse (fixed-z) slices containing foreground times the
/// z spacing. W = the largest pixel-centre-to-pixel-centre distance on any
/// transverse slice. Th = on the slice attaining W, the extent perpendicular
/// to the W chord. The perpendicular-extent rule for Th is an approximation of
/// the pictorial clinical definition.
pub fn manual_measurements(vol: &LabelVolume) -> Result<ManualMeasurements> {
    let dims = vol.dims();
    let [sz, sy, sx] = vol.voxel_size_mm;
    let mut n_slices = 0usize;
    let mut best: Option<(f64, [f64; 2], Vec<[f64; 2]>)> = None; // (W, chord dir, slice points)
    for z in 0..dims[0] {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if vol.data[[z, y, x]] == 1 {
                    pts.push([(x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy]);
                }
            }
        }
        if pts.is_empty() {
            continue;
        }
        n_slices += 1;
        let hull = convex_hull(&pts);
        let (w, dir) = max_pairwise(&hull);
        if best.as_ref().map_or(true, |(bw, _, _)| w > *bw) {
            best = Some((w, dir, pts));
        }
    }
    let (w, dir, pts) = best.ok_or(SliceVolError::EmptySegmentation)?;
    let perp = [-dir[1], dir[0]];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &pts {
        let s = p[0] * perp[0] + p[1] * perp[1];
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let th = if pts.len() == 1 { 0.0 } else { hi - lo };
    Ok(ManualMeasurements {
        length_mm: n_slices as f64 * sz,
        max_width_mm: w,
        thickness_at_hilum_mm: th,
    })
}

/// Monotone-chain convex hull; returns the input point for degenerate clouds.
fn convex_hull(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p: Vec<[f64; 2]> = pts.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() <= 2 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for &pt in p.iter().chain(p.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            hull.pop();
        }
        hull.push(pt);
    }
    hull.pop();
    hull
}

/// Largest pairwise distance among hull points plus the unit chord direction.
fn max_pairwise(hull: &[[f64; 2]]) -> (f64, [f64; 2]) {
    if hull.len() < 2 {
        return (0.0, [1.0, 0.0]);
    }
    let mut best = (0.0f64, [1.0, 0.0]);
    for i in 0..hull.len() {
        for j in (i + 1)..hull.len() {
            let dx = hull[j][0] - hull[i][0];
            let dy = hull[j][1] - hull[i][1];
            let d = (dx * dx + dy * dy).sqrt();
            if d > best.0 {
                best = (d, [dx / d, dy / d]);
            }
        }
    }
    best
}

/// Volume ranges (mL) for the two strata of the synthetic dataset. The
/// splenomegaly default is centred on published splenomegaly statistics and
/// truncated below the usual outlier exclusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub splenomegaly_fraction: f64,
    pub normal_range_ml: (f64, f64),
    pub splenomegaly_range_ml: (f64, f64),
    pub grid_dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// Maximum random placement rotation per axis, degrees.
    pub max_rotation_deg: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 149,
            splenomegaly_fraction: 36.0 / 149.0,
            normal_range_ml: (60.0, 310.0),
            splenomegaly_range_ml: (320.0, 1650.0),
            grid_dims: [164, 186, 176],
            voxel_size_mm: [1.0, 1.0, 1.0],
            max_rotation_deg: 20.0,
        }
    }
}

/// Draws the phantom parameters and target volume for one case.
pub fn sample_case_params(spec: &DatasetSpec, splenomegaly: bool, rng: &mut ChaCha8Rng) -> PhantomParams {
    let (lo, hi) = if splenomegaly { spec.splenomegaly_range_ml } else { spec.normal_range_ml };
    let target = rng.gen_range(lo..=hi);
    // Spleen-like elongation: long in z, flattened in y.
    let ry: f64 = rng.gen_range(0.55..0.9);
    let rz: f64 = rng.gen_range(1.1..1.6);
    // Base scale from the analytic ellipsoid volume; the generator's target
    // rescale does the fine adjustment.
    let r0 = (target * 1000.0 * 3.0 / (4.0 * std::f64::consts::PI * ry * rz)).cbrt();
    PhantomParams {
        base_semi_axes_mm: [r0, r0 * ry, r0 * rz],
        bend_strength: rng.gen_range(0.0..0.5),
        taper_strength: rng.gen_range(0.0..0.5),
        rotation_deg: [
            rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg),
            rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg),
            rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg),
        ],
        grid_dims: spec.grid_dims,
        voxel_size_mm: spec.voxel_size_mm,
        target_volume_ml: Some(target),
    }
}

/// Generates one dataset case; retries with a less elongated shape if the
/// grid overflows.
pub fn generate_case(spec: &DatasetSpec, case_id: &str, splenomegaly: bool, seed: u64) -> Result<(LabelVolume, CaseRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for attempt in 0..6 {
        let mut params = sample_case_params(spec, splenomegaly, &mut rng);
        // Progressively rounder and less deformed on retries.
        let shrink = 1.0 - 0.12 * attempt as f64;
        params.base_semi_axes_mm[2] *= shrink.max(0.5);
        params.bend_strength *= shrink.max(0.0);
        match generate_phantom(&params, seed ^ 0x9e37_79b9_7f4a_7c15) {
            Ok(mut vol) => {
                vol.case_id = case_id.to_string();
                let measurements = manual_measurements(&vol)?;
                let record = CaseRecord::new(case_id, voxel_volume(&vol), measurements);
                return Ok((vol, record));
            }
            Err(e @ (SliceVolError::GridOverflow(_) | SliceVolError::TargetInfeasible(_))) => {
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| SliceVolError::Data(format!("case {case_id} generation failed"))))
}

/// Case seeds are decorrelated from the dataset seed with a splitmix step so
/// that neighbouring cases do not share RNG streams.
pub fn case_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut x = dataset_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generates `spec.n` cases and returns them with their records. Splenomegaly
/// cases come first in id order; every record's flag matches its voxel volume
/// against the 314.5 mL threshold.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<(LabelVolume, CaseRecord)>> {
    if spec.n == 0 {
        return Err(SliceVolError::InvalidSize("dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.splenomegaly_fraction) {
        return Err(SliceVolError::InvalidSize("splenomegaly fraction must be in [0,1]".into()));
    }
    let n_spleno = (spec.n as f64 * spec.splenomegaly_fraction).round() as usize;
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let case_id = format!("case_{i:04}");
        let splenomegaly = i < n_spleno;
        out.push(generate_case(spec, &case_id, splenomegaly, case_seed(seed, i))?);
    }
    Ok(out)
}
