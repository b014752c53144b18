//! Minimal single-file little-endian NIfTI-1 reader and writer.
//!
//! Only the fields needed to move scalar volumes in and out are interpreted:
//! `dim`, `pixdim`, `datatype`, `vox_offset`, `scl_slope`/`scl_inter` and the
//! `qoffset` translation (used as the volume origin). Rotations in
//! qform/sform are ignored.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
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
    pub const QFORM_CODE: usize = 252;
    pub const QOFFSET_X: usize = 268;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Int16,
    UInt16,
    Float32,
    Float64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Int16 => 4,
            DataType::UInt16 => 512,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(DataType::Int16),
            512 => Ok(DataType::UInt16),
            16 => Ok(DataType::Float32),
            64 => Ok(DataType::Float64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Int16 | DataType::UInt16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub pixdim: [f64; 3],
    pub datatype: DataType,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
    pub origin: [f64; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::TruncatedData {
                needed: HEADER_SIZE,
                actual: bytes.len(),
            });
        }
        let sizeof_hdr = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::BadMagic(format!(
                "sizeof_hdr reads {sizeof_hdr} as little-endian (big-endian or not NIfTI-1)"
            )));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
        if &magic != MAGIC {
            return Err(Error::BadMagic(format!("magic {magic:?} is not single-file n+1")));
        }

        let dim: Vec<i16> = (0..8)
            .map(|i| LittleEndian::read_i16(&bytes[offsets::DIM + 2 * i..]))
            .collect();
        let ndim = dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::BadMagic(format!("dim[0] = {ndim} out of range")));
        }
        let mut dims = [1usize; 3];
        for (a, d) in dims.iter_mut().enumerate() {
            if (a as i16) < ndim {
                let v = dim[a + 1];
                if v < 1 {
                    return Err(Error::BadMagic(format!("dim[{}] = {v} must be >= 1", a + 1)));
                }
                *d = v as usize;
            }
        }
        if (4..=ndim as usize).any(|i| dim[i] > 1) {
            return Err(Error::BadMagic("only scalar 3D volumes are supported".into()));
        }

        let mut pixdim = [1.0f64; 3];
        for (a, p) in pixdim.iter_mut().enumerate() {
            if (a as i16) < ndim {
                let v = LittleEndian::read_f32(&bytes[offsets::PIXDIM + 4 * (a + 1)..]) as f64;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::BadMagic(format!("pixdim[{}] = {v} must be > 0", a + 1)));
                }
                *p = v;
            }
        }

        let datatype = DataType::from_code(LittleEndian::read_i16(&bytes[offsets::DATATYPE..]))?;
        let vox_offset = LittleEndian::read_f32(&bytes[offsets::VOX_OFFSET..]);
        if !(vox_offset >= HEADER_SIZE as f32) {
            return Err(Error::BadMagic(format!("vox_offset {vox_offset} inside header")));
        }
        let scl_slope = LittleEndian::read_f32(&bytes[offsets::SCL_SLOPE..]) as f64;
        let scl_inter = LittleEndian::read_f32(&bytes[offsets::SCL_INTER..]) as f64;
        let qform_code = LittleEndian::read_i16(&bytes[offsets::QFORM_CODE..]);
        let origin = if qform_code > 0 {
            [0, 1, 2].map(|a| LittleEndian::read_f32(&bytes[offsets::QOFFSET_X + 4 * a..]) as f64)
        } else {
            [0.0; 3]
        };

        Ok(Self {
            dims,
            pixdim,
            datatype,
            scl_slope: if scl_slope.is_finite() { scl_slope } else { 0.0 },
            scl_inter: if scl_inter.is_finite() { scl_inter } else { 0.0 },
            vox_offset: vox_offset as usize,
            origin,
            magic,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Header for a float32 payload at the default offset with identity scaling.
    pub fn for_volume(volume: &Volume) -> Self {
        Self {
            dims: volume.dims(),
            pixdim: volume.spacing(),
            datatype: DataType::Float32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            vox_offset: DEFAULT_VOX_OFFSET,
            origin: volume.origin(),
            magic: *MAGIC,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = vec![0u8; self.vox_offset.max(HEADER_SIZE)];
        LittleEndian::write_i32(&mut buf[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
        buf[38] = b'r';
        let dim: [i16; 8] = [
            3,
            self.dims[0] as i16,
            self.dims[1] as i16,
            self.dims[2] as i16,
            1,
            1,
            1,
            1,
        ];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut buf[offsets::DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut buf[offsets::DATATYPE..], self.datatype.code());
        LittleEndian::write_i16(&mut buf[offsets::BITPIX..], (self.datatype.bytes() * 8) as i16);
        let pixdim = [1.0, self.pixdim[0], self.pixdim[1], self.pixdim[2], 1.0, 1.0, 1.0, 1.0];
        for (i, p) in pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut buf[offsets::PIXDIM + 4 * i..], *p as f32);
        }
        LittleEndian::write_f32(&mut buf[offsets::VOX_OFFSET..], self.vox_offset as f32);
        LittleEndian::write_f32(&mut buf[offsets::SCL_SLOPE..], self.scl_slope as f32);
        LittleEndian::write_f32(&mut buf[offsets::SCL_INTER..], self.scl_inter as f32);
        // millimetres
        buf[offsets::XYZT_UNITS] = 2;
        LittleEndian::write_i16(&mut buf[offsets::QFORM_CODE..], 1);
        for a in 0..3 {
            LittleEndian::write_f32(&mut buf[offsets::QOFFSET_X + 4 * a..], self.origin[a] as f32);
        }
        buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&self.magic);
        buf
    }
}

/// Decode a complete single-file NIfTI-1 image held in memory.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    let header = NiftiHeader::parse(bytes)?;
    let n = header.voxel_count();
    let width = header.datatype.bytes();
    let needed = header.vox_offset + n * width;
    if bytes.len() < needed {
        return Err(Error::TruncatedData {
            needed,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[header.vox_offset..needed];
    let slope = if header.scl_slope == 0.0 { 1.0 } else { header.scl_slope };
    let inter = header.scl_inter;
    let raw: Vec<f64> = match header.datatype {
        DataType::Int16 => payload.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f64).collect(),
        DataType::UInt16 => payload.chunks_exact(2).map(|c| LittleEndian::read_u16(c) as f64).collect(),
        DataType::Float32 => payload.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        DataType::Float64 => payload.chunks_exact(8).map(LittleEndian::read_f64).collect(),
    };
    let data = if slope == 1.0 && inter == 0.0 {
        raw
    } else {
        raw.into_iter().map(|v| v * slope + inter).collect()
    };
    Volume::new(header.dims, header.pixdim, header.origin, data)
}

/// Encode a volume as float32 single-file NIfTI-1.
pub fn encode_nifti(volume: &Volume) -> Vec<u8> {
    let header = NiftiHeader::for_volume(volume);
    let mut buf = header.encode();
    buf.reserve(volume.len() * 4);
    let mut word = [0u8; 4];
    for &v in volume.data() {
        LittleEndian::write_f32(&mut word, v as f32);
        buf.extend_from_slice(&word);
    }
    buf
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes)
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if volume.is_empty() {
        return Err(Error::InvalidVolume("cannot write an empty volume".into()));
    }
    crate::io::write_atomic(path, &encode_nifti(volume))
}
