//! Single-file NIfTI-1 reading and writing (little-endian, `.nii` or gzip).

use std::io::Read;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Datatype::U8 => b[0] as f64,
            Datatype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Datatype::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Datatype::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) -> Result<()> {
        let int_range = |lo: f64, hi: f64| {
            let r = v.round();
            if !(lo..=hi).contains(&r) {
                return Err(Error::Validation(format!("value {v} does not fit {self:?}")));
            }
            Ok(r)
        };
        match self {
            Datatype::U8 => out.push(int_range(0.0, 255.0)? as u8),
            Datatype::I16 => out.extend((int_range(i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes()),
            Datatype::F32 => out.extend((v as f32).to_le_bytes()),
            Datatype::F64 => out.extend(v.to_le_bytes()),
        }
        Ok(())
    }
}

/// A 3-D scalar volume, values already scaled by slope and intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Extents `(x, y, z)`; `x` varies fastest in `data`.
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    pub datatype: Datatype,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl Volume {
    /// A float64 volume with identity scaling.
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product();
        if dims.contains(&0) || data.len() != n {
            return Err(Error::Length {
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            data,
            datatype: Datatype::F64,
            scl_slope: 1.0,
            scl_inter: 0.0,
        })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Parses a NIfTI-1 file. Gzip input is decompressed first.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| parse_err(0, format!("gzip: {e}")))?;
        return read_nifti(&raw);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_LEN as i32 {
        let msg = if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_LEN as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        };
        return Err(parse_err(0, msg));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(parse_err(344, format!("bad magic {:?}", &bytes[344..348])));
    }
    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(parse_err(40, format!("dim[0] = {ndim} is outside 1..=7")));
    }
    let mut dims = [1usize; 3];
    for i in 1..=ndim as usize {
        let d = i16_at(bytes, 40 + 2 * i);
        if d < 1 {
            return Err(parse_err(40 + 2 * i, format!("dim[{i}] = {d} must be positive")));
        }
        if i <= 3 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(parse_err(40 + 2 * i, format!("only 3-D volumes are supported, dim[{i}] = {d}")));
        }
    }
    let code = i16_at(bytes, 70);
    let datatype =
        Datatype::from_code(code).ok_or_else(|| parse_err(70, format!("unsupported datatype code {code}")))?;
    let bitpix = i16_at(bytes, 72);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(parse_err(72, format!("bitpix {bitpix} does not match {datatype:?}")));
    }
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(parse_err(108, format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let (slope, inter) = (f32_at(bytes, 112) as f64, f32_at(bytes, 116) as f64);
    let n: usize = dims.iter().product();
    let need = start + n * datatype.bytes();
    if bytes.len() < need {
        return Err(Error::Length {
            expected: need,
            found: bytes.len(),
        });
    }
    let scaled = slope != 0.0 && slope.is_finite();
    let data: Vec<f64> = bytes[start..need]
        .chunks_exact(datatype.bytes())
        .map(|c| {
            let raw = datatype.decode(c);
            if scaled {
                raw * slope + inter
            } else {
                raw
            }
        })
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(parse_err(start + i * datatype.bytes(), "non-finite voxel value"));
    }
    Ok(Volume {
        dims,
        data,
        datatype,
        scl_slope: if scaled { slope } else { 1.0 },
        scl_inter: if scaled { inter } else { 0.0 },
    })
}

/// Encodes `vol` with its datatype and scaling: stored values are
/// `(value − scl_inter) / scl_slope`, rounded for integer types.
pub fn write_nifti(vol: &Volume) -> Result<Vec<u8>> {
    if vol.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Validation(format!("volume dims {:?} cannot be stored", vol.dims)));
    }
    if vol.scl_slope == 0.0 {
        return Err(Error::Validation("scl_slope must be nonzero".into()));
    }
    let dt = vol.datatype;
    let mut out = vec![0u8; VOX_OFFSET];
    out[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let dim: [i16; 8] = [3, vol.dims[0] as i16, vol.dims[1] as i16, vol.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        out[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    out[70..72].copy_from_slice(&dt.code().to_le_bytes());
    out[72..74].copy_from_slice(&(8 * dt.bytes() as i16).to_le_bytes());
    for i in 0..4 {
        // pixdim[0] is the qfac; spacing defaults to 1 mm.
        out[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
    }
    out[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    out[112..116].copy_from_slice(&(vol.scl_slope as f32).to_le_bytes());
    out[116..120].copy_from_slice(&(vol.scl_inter as f32).to_le_bytes());
    out[344..348].copy_from_slice(b"n+1\0");
    out.reserve(vol.data.len() * dt.bytes());
    for &v in &vol.data {
        dt.encode((v - vol.scl_inter) / vol.scl_slope, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use proptest::prelude::*;
    use std::io::Write;

    fn vol(dt: Datatype, data: Vec<f64>, slope: f64, inter: f64) -> Volume {
        Volume {
            dims: [2, 2, 2],
            data,
            datatype: dt,
            scl_slope: slope,
            scl_inter: inter,
        }
    }

    #[test]
    fn float32_identity_scaling() {
        let data = vec![0.5, -1.25, 3.0, 7.75, 0.0, 1e3, -2.5, 9.0];
        let v = read_nifti(&write_nifti(&vol(Datatype::F32, data.clone(), 1.0, 0.0)).unwrap()).unwrap();
        assert_eq!(v.data, data);
        assert_eq!(v.dims, [2, 2, 2]);
    }

    #[test]
    fn slope_and_intercept_apply() {
        let mut bytes = write_nifti(&Volume {
            dims: [2, 1, 1],
            data: vec![0.0, 1.0],
            datatype: Datatype::U8,
            scl_slope: 1.0,
            scl_inter: 0.0,
        })
        .unwrap();
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1f32.to_le_bytes());
        assert_eq!(read_nifti(&bytes).unwrap().data, vec![1.0, 3.0]);
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let mut bytes = write_nifti(&vol(Datatype::I16, vec![1.0; 8], 1.0, 0.0)).unwrap();
        bytes[345] = b'x';
        assert!(matches!(read_nifti(&bytes), Err(Error::Parse { offset: 344, .. })));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = write_nifti(&vol(Datatype::F64, vec![1.0; 8], 1.0, 0.0)).unwrap();
        assert!(matches!(read_nifti(&bytes[..bytes.len() - 1]), Err(Error::Length { .. })));
        assert!(matches!(read_nifti(&bytes[..100]), Err(Error::Length { .. })));
    }

    #[test]
    fn unsupported_datatype_and_bitpix() {
        let mut bytes = write_nifti(&vol(Datatype::U8, vec![1.0; 8], 1.0, 0.0)).unwrap();
        bytes[70..72].copy_from_slice(&8i16.to_le_bytes());
        assert!(matches!(read_nifti(&bytes), Err(Error::Parse { offset: 70, .. })));
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        assert!(matches!(read_nifti(&bytes), Err(Error::Parse { offset: 72, .. })));
    }

    #[test]
    fn gzip_pass_through() {
        let v = vol(Datatype::F64, (0..8).map(f64::from).collect(), 1.0, 0.0);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&write_nifti(&v).unwrap()).unwrap();
        assert_eq!(read_nifti(&enc.finish().unwrap()).unwrap(), v);
    }

    #[test]
    fn out_of_range_integers_are_rejected_on_write() {
        assert!(write_nifti(&vol(Datatype::U8, vec![256.0; 8], 1.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_every_datatype(seed in any::<u64>(), dt in prop::sample::select(Datatype::ALL.to_vec())) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..8)
                .map(|_| match dt {
                    Datatype::U8 => rng.random_range(0..=255) as f64,
                    Datatype::I16 => rng.random_range(i16::MIN..=i16::MAX) as f64,
                    // Short mantissas keep the dyadic affine maps below exact.
                    Datatype::F32 => (rng.random::<f32>() * 100.0) as f64,
                    Datatype::F64 => (rng.random::<f32>() as f64 - 0.5) * 1e6,
                })
                .collect();
            for (slope, inter) in [(1.0, 0.0), (2.0, -3.0), (0.5, 1.5)] {
                let data: Vec<f64> = raw.iter().map(|r| r * slope + inter).collect();
                let v = vol(dt, data, slope, inter);
                prop_assert_eq!(read_nifti(&write_nifti(&v).unwrap()).unwrap(), v);
            }
        }
    }
}
