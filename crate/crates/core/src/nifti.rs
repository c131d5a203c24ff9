//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the subset the pipeline needs is supported: 3D grids stored as
//! uint8, int16 or float32, axis-aligned orientation. Spacing comes from
//! `pixdim[1..=3]`; the origin from the sform translation column when
//! `sform_code > 0`, else from the qform offsets. Rotated qform/sform
//! matrices are rejected. Gzip is detected from the leading magic bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMask, Volume3};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    UInt8,
    Int16,
    Float32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::UInt8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::UInt8),
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::UInt8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::UInt8 => "uint8",
            DataType::Int16 => "int16",
            DataType::Float32 => "float32",
        }
    }
}

/// The header fields the pipeline reads.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub geometry: Geometry,
    pub datatype: DataType,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
}

impl NiftiHeader {
    fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope;
        if slope.is_finite() && slope != 0.0 && !(slope == 1.0 && self.scl_inter == 0.0) {
            let inter = if self.scl_inter.is_finite() {
                self.scl_inter
            } else {
                0.0
            };
            Some((slope as f64, inter as f64))
        } else {
            None
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "file too short for a header: {} bytes",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse_header_with::<LittleEndian>(bytes, false)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse_header_with::<BigEndian>(bytes, true)
    } else {
        Err(Error::Nifti("sizeof_hdr is not 348".into()))
    }
}

fn parse_header_with<B: ByteOrder>(bytes: &[u8], big_endian: bool) -> Result<NiftiHeader> {
    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(Error::Nifti(format!(
            "bad magic {:?}, expected \"n+1\\0\"",
            &bytes[offsets::MAGIC..offsets::MAGIC + 4]
        )));
    }
    let i16_at = |off: usize| B::read_i16(&bytes[off..]);
    let f32_at = |off: usize| B::read_f32(&bytes[off..]);

    let ndim = i16_at(offsets::DIM);
    if ndim != 3 {
        return Err(Error::Dimensionality(ndim));
    }
    let mut dims = [0usize; 3];
    for (d, dim) in dims.iter_mut().enumerate() {
        let n = i16_at(offsets::DIM + 2 * (d + 1));
        if n <= 0 {
            return Err(Error::Nifti(format!(
                "dim[{}] = {n} is not positive",
                d + 1
            )));
        }
        *dim = n as usize;
    }
    let datatype = DataType::from_code(i16_at(offsets::DATATYPE))?;
    let bitpix = i16_at(offsets::BITPIX);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::Nifti(format!(
            "bitpix {bitpix} inconsistent with datatype {}",
            datatype.name()
        )));
    }
    let mut spacing = [0f64; 3];
    for (d, s) in spacing.iter_mut().enumerate() {
        *s = f32_at(offsets::PIXDIM + 4 * (d + 1)).abs() as f64;
    }

    let qform_code = i16_at(offsets::QFORM_CODE);
    let sform_code = i16_at(offsets::SFORM_CODE);
    let mut origin = [0f64; 3];
    if sform_code > 0 {
        for row in 0..3 {
            let base = offsets::SROW_X + 16 * row;
            for col in 0..3 {
                if col != row && f32_at(base + 4 * col) != 0.0 {
                    return Err(Error::Nifti(
                        "sform has a rotation component; only axis-aligned grids are supported"
                            .into(),
                    ));
                }
            }
            origin[row] = f32_at(base + 12) as f64;
        }
    } else if qform_code > 0 {
        let rotated = (0..3).any(|k| f32_at(offsets::QUATERN_B + 4 * k).abs() > 1e-6);
        if rotated {
            return Err(Error::Nifti(
                "qform has a rotation component; only axis-aligned grids are supported".into(),
            ));
        }
        for (d, o) in origin.iter_mut().enumerate() {
            *o = f32_at(offsets::QOFFSET_X + 4 * d) as f64;
        }
    }

    let vox_offset = f32_at(offsets::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Nifti(format!("vox_offset {vox_offset} is invalid")));
    }

    Ok(NiftiHeader {
        geometry: Geometry::new(dims, spacing, origin)?,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(offsets::SCL_SLOPE),
        scl_inter: f32_at(offsets::SCL_INTER),
        big_endian,
    })
}

fn decode_payload(bytes: &[u8], header: &NiftiHeader) -> Result<Vec<f64>> {
    let n = header.geometry.len();
    let start = header.vox_offset;
    let end = start + n * header.datatype.bytes();
    if bytes.len() < end {
        return Err(Error::Nifti(format!(
            "payload truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let payload = &bytes[start..end];
    let mut out = Vec::with_capacity(n);
    macro_rules! decode {
        ($order:ty) => {
            match header.datatype {
                DataType::UInt8 => out.extend(payload.iter().map(|&b| b as f64)),
                DataType::Int16 => out.extend(
                    payload
                        .chunks_exact(2)
                        .map(|c| <$order>::read_i16(c) as f64),
                ),
                DataType::Float32 => out.extend(
                    payload
                        .chunks_exact(4)
                        .map(|c| <$order>::read_f32(c) as f64),
                ),
            }
        };
    }
    if header.big_endian {
        decode!(BigEndian);
    } else {
        decode!(LittleEndian);
    }
    if let Some((slope, inter)) = header.scaling() {
        for v in out.iter_mut() {
            *v = *v * slope + inter;
        }
    }
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(out)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    parse_header(&load_bytes(path.as_ref())?)
}

/// Decodes an in-memory NIfTI-1 file as an intensity volume.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume3> {
    let owned;
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("gzip: {e}")))?;
        owned = out;
        &owned[..]
    } else {
        bytes
    };
    let header = parse_header(bytes)?;
    let values = decode_payload(bytes, &header)?;
    Volume3::new(
        header.geometry,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let bytes = load_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let values = decode_payload(&bytes, &header)?;
    Volume3::new(
        header.geometry,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

/// Reads a file with label semantics; every voxel must be exactly 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let bytes = load_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let values = decode_payload(&bytes, &header)?;
    let mut data = Vec::with_capacity(values.len());
    for (index, &value) in values.iter().enumerate() {
        if value == 0.0 {
            data.push(0);
        } else if value == 1.0 {
            data.push(1);
        } else {
            return Err(Error::NonBinaryLabel { index, value });
        }
    }
    LabelMask::new(header.geometry, data)
}

fn encode_header(geom: &Geometry, datatype: DataType) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    LittleEndian::write_i16(&mut h[offsets::DIM..], 3);
    for d in 0..3 {
        let n = i16::try_from(geom.dims[d]).map_err(|_| {
            Error::Nifti(format!(
                "dimension {} exceeds the NIfTI-1 limit",
                geom.dims[d]
            ))
        })?;
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * (d + 1)..], n);
    }
    for d in 4..8 {
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * d..], 1);
    }
    LittleEndian::write_i16(&mut h[offsets::DATATYPE..], datatype.code());
    LittleEndian::write_i16(&mut h[offsets::BITPIX..], 8 * datatype.bytes() as i16);
    // pixdim[0] is qfac
    LittleEndian::write_f32(&mut h[offsets::PIXDIM..], 1.0);
    for d in 0..3 {
        LittleEndian::write_f32(
            &mut h[offsets::PIXDIM + 4 * (d + 1)..],
            geom.spacing[d] as f32,
        );
    }
    for d in 4..8 {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * d..], 1.0);
    }
    LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    // NIFTI_UNITS_MM
    h[offsets::XYZT_UNITS] = 2;
    let descrip = b"aneuseg";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[offsets::QFORM_CODE..], 1);
    LittleEndian::write_i16(&mut h[offsets::SFORM_CODE..], 1);
    for d in 0..3 {
        LittleEndian::write_f32(&mut h[offsets::QOFFSET_X + 4 * d..], geom.origin[d] as f32);
        let base = offsets::SROW_X + 16 * d;
        LittleEndian::write_f32(&mut h[base + 4 * d..], geom.spacing[d] as f32);
        LittleEndian::write_f32(&mut h[base + 12..], geom.origin[d] as f32);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);
    Ok(h)
}

fn check_integral(values: &[f32], lo: f64, hi: f64, datatype: DataType) -> Result<()> {
    for (index, &v) in values.iter().enumerate() {
        let r = (v as f64).round();
        if !(lo..=hi).contains(&r) {
            return Err(Error::OutOfRange {
                index,
                value: v as f64,
                datatype: datatype.name(),
            });
        }
    }
    Ok(())
}

/// Encodes a volume as an uncompressed NIfTI-1 byte stream. Integer
/// datatypes round to nearest and fail on out-of-range values.
pub fn encode_volume(vol: &Volume3, datatype: DataType) -> Result<Vec<u8>> {
    let values = vol.data();
    let mut out = encode_header(vol.geometry(), datatype)?;
    out.reserve(values.len() * datatype.bytes());
    match datatype {
        DataType::Float32 => {
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DataType::Int16 => {
            check_integral(values, i16::MIN as f64, i16::MAX as f64, datatype)?;
            for &v in values {
                out.extend_from_slice(&(v.round() as i16).to_le_bytes());
            }
        }
        DataType::UInt8 => {
            check_integral(values, 0.0, 255.0, datatype)?;
            out.extend(values.iter().map(|&v| v.round() as u8));
        }
    }
    Ok(out)
}

pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>> {
    let mut out = encode_header(mask.geometry(), DataType::UInt8)?;
    out.extend_from_slice(mask.data());
    Ok(out)
}

fn store(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    if gz {
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `vol` to `path`; a `.gz` suffix selects gzip compression.
pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>, datatype: DataType) -> Result<()> {
    store(path.as_ref(), &encode_volume(vol, datatype)?)
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    store(path.as_ref(), &encode_mask(mask)?)
}

/// Writes an intensity volume with label semantics (uint8, values in {0, 1}).
pub fn write_volume_as_label(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    if let Some(index) = vol.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryLabel {
            index,
            value: vol.data()[index] as f64,
        });
    }
    let data = vol.data().iter().map(|&v| v as u8).collect();
    write_mask(&LabelMask::new(*vol.geometry(), data)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dims: [usize; 3]) -> Volume3 {
        let g = Geometry::new(dims, [0.5429; 3], [1.0, -2.0, 3.5]).unwrap();
        Volume3::from_fn(g, |x, y, z| (x as f32) * 0.25 - (y * z) as f32).unwrap()
    }

    #[test]
    fn header_constants() {
        let bytes = encode_volume(&sample([2, 2, 2]), DataType::Float32).unwrap();
        assert_eq!(LittleEndian::read_i32(&bytes[0..4]), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(bytes.len(), 352 + 8 * 4);
    }

    #[test]
    fn float_roundtrip_in_memory() {
        let v = sample([3, 4, 5]);
        let back = decode_volume(&encode_volume(&v, DataType::Float32).unwrap()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.data(), v.data());
        for d in 0..3 {
            assert!((back.spacing()[d] - 0.5429).abs() < 1e-4);
            assert!((back.geometry().origin[d] - v.geometry().origin[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let v = sample([2, 2, 2]);
        let good = encode_volume(&v, DataType::Float32).unwrap();

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_volume(&bad), Err(Error::Nifti(_))));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[70..], 64);
        assert!(matches!(
            decode_volume(&bad),
            Err(Error::UnsupportedDatatype(64))
        ));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[40..], 4);
        assert!(matches!(decode_volume(&bad), Err(Error::Dimensionality(4))));

        let mut bad = good.clone();
        bad[352..356].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_volume(&bad),
            Err(Error::NonFinite { index: 0 })
        ));

        let mut bad = good;
        LittleEndian::write_f32(&mut bad[280 + 4..], 0.1);
        assert!(decode_volume(&bad).is_err());
    }

    #[test]
    fn integer_range_checked() {
        let g = Geometry::unit([2, 1, 1]).unwrap();
        let v = Volume3::new(g, vec![0.0, 300.0]).unwrap();
        assert!(matches!(
            encode_volume(&v, DataType::UInt8),
            Err(Error::OutOfRange { index: 1, .. })
        ));
        assert!(encode_volume(&v, DataType::Int16).is_ok());
    }
}
