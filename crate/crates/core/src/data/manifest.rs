//! Dataset manifests: `subject_id,label,path` CSV next to NIfTI sample files.

use std::fs;
use std::path::{Path, PathBuf};

use super::nifti::{read_nifti, write_nifti, Volume};
use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER: [&str; 3] = ["subject_id", "label", "path"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub label: Label,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let p = r.path.to_str().ok_or_else(|| Error::Validation(format!("non UTF-8 path {:?}", r.path)))?;
        w.write_record([r.subject_id.as_str(), &r.label.to_string(), p])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Validation(format!(
            "{}: expected header {}, found {}",
            path.display(),
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let label = rec[1]
            .parse()
            .map_err(|e| Error::Validation(format!("{} row {}: {e}", path.display(), line + 1)))?;
        rows.push(ManifestRow {
            subject_id: rec[0].to_string(),
            label,
            path: PathBuf::from(&rec[2]),
        });
    }
    Ok(rows)
}

/// A `[3, H, W]` image as a float64 volume with x = W, y = H, z = channel.
pub fn image_to_volume(img: &Tensor) -> Result<Volume> {
    match img.shape() {
        &[c, h, w] => Volume::new([w, h, c], img.data().to_vec()),
        s => Err(Error::Dimension(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Inverse of [`image_to_volume`]; a single plane is replicated to 3 channels.
pub fn volume_to_image(v: &Volume) -> Result<Tensor> {
    let [w, h, c] = v.dims;
    match c {
        3 => Tensor::new([3, h, w], v.data.clone()),
        1 => super::replicate_channels(&v.data, h, w),
        _ => Err(Error::Dimension(format!("sample volume has {c} planes, expected 1 or 3"))),
    }
}

/// Slice index encoded as a trailing `_z<digits>` in the file stem.
fn slice_from_path(p: &Path) -> usize {
    p.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit_once("_z"))
        .and_then(|(_, z)| z.parse().ok())
        .unwrap_or(0)
}

pub fn write_sample(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = write_nifti(&image_to_volume(img)?)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

/// Loads every sample listed in the manifest at `manifest`.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let p = dir.join(&row.path);
        let bytes = fs::read(&p).map_err(|e| Error::file(&p, e))?;
        let vol = read_nifti(&bytes).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
        samples.push(Sample {
            image: volume_to_image(&vol)?,
            label: row.label,
            subject: row.subject_id,
            slice: slice_from_path(&row.path),
            augmented: false,
        });
    }
    Ok(Dataset::new(samples))
}

/// Writes each sample as `<subject>_z<slice>.nii` under `dir` and the
/// manifest as `dir/manifest.csv`; returns the manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut rows = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let mut name = format!("{}_z{}", s.subject, s.slice);
        if s.augmented {
            return Err(Error::Validation(format!(
                "{name}: augmented samples are regenerated at training time and are not saved"
            )));
        }
        name.push_str(".nii");
        write_sample(&dir.join(&name), &s.image)?;
        rows.push(ManifestRow {
            subject_id: s.subject.clone(),
            label: s.label,
            path: PathBuf::from(name),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
