//! On-disk formats.
//!
//! * `.seg3d` — gzip-compressed little-endian u8 array in row-major `[z,y,x]`
//!   order, with a `.seg3d.json` sidecar holding case id, dims and spacing.
//! * `.slice2d` — same raw+JSON scheme with dims `[views, H, W]`.
//! * `manifest.csv` — one row per case with volume, label, measurements, fold.
//! * model weights — raw little-endian f32 blob plus a JSON tensor manifest.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SliceVolError};
use crate::phantom::{CaseRecord, LabelVolume, ManualMeasurements};
use crate::preprocess::SlicePair;

#[derive(Debug, Serialize, Deserialize)]
struct Seg3dSidecar {
    case_id: String,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
}

pub fn write_seg3d(path: &Path, vol: &LabelVolume) -> Result<()> {
    let raw = vol.data.as_standard_layout();
    let mut enc = GzEncoder::new(File::create(path)?, Compression::fast());
    enc.write_all(raw.as_slice().expect("standard layout"))?;
    enc.finish()?;
    let sidecar = Seg3dSidecar {
        case_id: vol.case_id.clone(),
        dims: vol.dims(),
        voxel_size_mm: vol.voxel_size_mm,
    };
    let json_path = sidecar_path(path);
    serde_json::to_writer_pretty(File::create(json_path)?, &sidecar)?;
    Ok(())
}

pub fn read_seg3d(path: &Path) -> Result<LabelVolume> {
    let sidecar: Seg3dSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let mut raw = Vec::new();
    GzDecoder::new(File::open(path)?).read_to_end(&mut raw)?;
    let [z, y, x] = sidecar.dims;
    if raw.len() != z * y * x {
        return Err(SliceVolError::Data(format!(
            "{}: expected {} voxels, got {}",
            path.display(),
            z * y * x,
            raw.len()
        )));
    }
    let data = Array3::from_shape_vec((z, y, x), raw).expect("length checked");
    LabelVolume::new(data, sidecar.voxel_size_mm, sidecar.case_id)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    os.into()
}

#[derive(Debug, Serialize, Deserialize)]
struct Slice2dSidecar {
    case_id: String,
    /// `[views, H, W]`
    dims: [usize; 3],
}

pub fn write_slice2d(path: &Path, pair: &SlicePair) -> Result<()> {
    let size = pair.size();
    let mut raw: Vec<u8> = pair.coronal.iter().copied().collect();
    if let Some(t) = &pair.transverse {
        raw.extend(t.iter().copied());
    }
    let mut enc = GzEncoder::new(File::create(path)?, Compression::fast());
    enc.write_all(&raw)?;
    enc.finish()?;
    let sidecar = Slice2dSidecar { case_id: pair.case_id.clone(), dims: [pair.views(), size, size] };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &sidecar)?;
    Ok(())
}

pub fn read_slice2d(path: &Path) -> Result<SlicePair> {
    let sidecar: Slice2dSidecar = serde_json::from_reader(File::open(sidecar_path(path))?)?;
    let [views, h, w] = sidecar.dims;
    let mut raw = Vec::new();
    GzDecoder::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.len() != views * h * w || !(1..=2).contains(&views) {
        return Err(SliceVolError::Data(format!("{}: malformed slice2d", path.display())));
    }
    let coronal = Array2::from_shape_vec((h, w), raw[..h * w].to_vec()).expect("length checked");
    let transverse = (views == 2)
        .then(|| Array2::from_shape_vec((h, w), raw[h * w..].to_vec()).expect("length checked"));
    Ok(SlicePair { coronal, transverse, case_id: sidecar.case_id })
}

/// 0/255 PNG export of a slice pair for visual inspection; writes one file per
/// view with `_coronal` / `_transverse` suffixes before the extension.
pub fn export_slice_png(dir: &Path, pair: &SlicePair) -> Result<()> {
    let size = pair.size() as u32;
    let save = |img: &Array2<u8>, name: String| -> Result<()> {
        let buf: Vec<u8> = img.iter().map(|&v| v * 255).collect();
        image::save_buffer(dir.join(name), &buf, size, size, image::ExtendedColorType::L8)
            .map_err(|e| SliceVolError::Data(format!("png export: {e}")))
    };
    save(&pair.coronal, format!("{}_coronal.png", pair.case_id))?;
    if let Some(t) = &pair.transverse {
        save(t, format!("{}_transverse.png", pair.case_id))?;
    }
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["case_id", "volume_mL", "splenomegaly", "L_mm", "W_mm", "Th_mm", "fold"])?;
    for r in records {
        w.write_record([
            r.case_id.clone(),
            format!("{:.6}", r.volume_ml),
            r.splenomegaly.to_string(),
            format!("{:.6}", r.measurements.length_mm),
            format!("{:.6}", r.measurements.max_width_mm),
            format!("{:.6}", r.measurements.thickness_at_hilum_mm),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();
        let parse = |i: usize| -> Result<f64> {
            get(i).parse().map_err(|_| SliceVolError::Data(format!("bad number in manifest: {}", get(i))))
        };
        out.push(CaseRecord {
            case_id: get(0),
            volume_ml: parse(1)?,
            splenomegaly: get(2) == "true",
            measurements: ManualMeasurements {
                length_mm: parse(3)?,
                max_width_mm: parse(4)?,
                thickness_at_hilum_mm: parse(5)?,
            },
            fold: get(6).parse().ok(),
        });
    }
    Ok(out)
}

/// One named tensor in the weights blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

/// Writes tensors as a raw little-endian f32 blob at `blob_path` with a JSON
/// manifest at `manifest_path`.
pub fn write_weights(
    blob_path: &Path,
    manifest_path: &Path,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut blob = File::create(blob_path)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, shape, values) in tensors {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "tensor {name}");
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        for v in values {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += values.len() * 4;
    }
    serde_json::to_writer_pretty(File::create(manifest_path)?, &entries)?;
    Ok(())
}

pub fn read_weights(blob_path: &Path, manifest_path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let entries: Vec<TensorEntry> = serde_json::from_reader(File::open(manifest_path)?)?;
    let mut blob = Vec::new();
    File::open(blob_path)?.read_to_end(&mut blob)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(SliceVolError::Data(format!("unsupported dtype {}", e.dtype)));
        }
        let n = e.shape.iter().product::<usize>();
        let end = e.byte_offset + n * 4;
        if end > blob.len() {
            return Err(SliceVolError::Data(format!("tensor {} overruns blob", e.name)));
        }
        let values: Vec<f32> = blob[e.byte_offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((e.name, e.shape, values));
    }
    Ok(out)
}
