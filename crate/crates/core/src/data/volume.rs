//! Volume preprocessing: pad to a cube, z-score, take middle axial slices.

use super::nifti::{Datatype, Volume};
use super::replicate_channels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-pads every axis to `target`, splitting the deficit evenly with the
/// odd voxel at the end.
pub fn pad_volume(v: &Volume, target: usize) -> Result<Volume> {
    if let Some(&d) = v.dims.iter().find(|&&d| d > target) {
        return Err(Error::Validation(format!(
            "volume dims {:?} exceed padding target {target} (found {d})",
            v.dims
        )));
    }
    let before: [usize; 3] = std::array::from_fn(|a| (target - v.dims[a]) / 2);
    let mut out = Volume {
        dims: [target; 3],
        data: vec![0.0; target * target * target],
        datatype: Datatype::F64,
        scl_slope: 1.0,
        scl_inter: 0.0,
    };
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            let src = v.index(0, y, z);
            let dst = out.index(before[0], y + before[1], z + before[2]);
            out.data[dst..dst + v.dims[0]].copy_from_slice(&v.data[src..src + v.dims[0]]);
        }
    }
    Ok(out)
}

/// Padding per axis as `(before, after)`.
pub fn padding_amounts(dims: [usize; 3], target: usize) -> [(usize, usize); 3] {
    dims.map(|d| {
        let deficit = target.saturating_sub(d);
        (deficit / 2, deficit - deficit / 2)
    })
}

/// `(x − mean) / std` over all voxels with the population std.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().sum::<f64>() / n;
    let var = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Validation("cannot normalize a constant volume".into()));
    }
    let std = var.sqrt();
    Ok(Volume {
        data: v.data.iter().map(|x| (x - mean) / std).collect(),
        datatype: Datatype::F64,
        scl_slope: 1.0,
        scl_inter: 0.0,
        ..v.clone()
    })
}

/// Axial indices of the `n` middle slices.
pub fn middle_slices(z: usize, n: usize) -> Result<std::ops::Range<usize>> {
    if n == 0 || z < n {
        return Err(Error::Validation(format!("cannot take {n} middle slices from an axial extent of {z}")));
    }
    let start = z / 2 - n / 2;
    Ok(start..start + n)
}

/// The `n` middle axial slices as `[3, Y, X]` images (row = y, column = x),
/// each paired with its slice index.
pub fn extract_slices(v: &Volume, n: usize) -> Result<Vec<(usize, Tensor)>> {
    let [nx, ny, _] = v.dims;
    middle_slices(v.dims[2], n)?
        .map(|z| {
            let start = v.index(0, 0, z);
            let plane = &v.data[start..start + nx * ny];
            replicate_channels(plane, ny, nx).map(|img| (z, img))
        })
        .collect()
}
