//! NIfTI-1 single-file (`.nii`) and gzip-compressed (`.nii.gz`) volumes.
//!
//! Reading accepts either byte order (detected from `sizeof_hdr`), the
//! `n+1` and `ni1` magics, and uint8/int16/int32/float32/float64 payloads.
//! Writing always produces little-endian float32 `n+1` files with an sform.
//! Extension records are skipped.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::volume::{Geometry, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const SINGLE_FILE_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn bits_for(datatype: i16) -> Option<i16> {
    match datatype {
        DT_UINT8 => Some(8),
        DT_INT16 => Some(16),
        DT_INT32 => Some(32),
        DT_FLOAT32 => Some(32),
        DT_FLOAT64 => Some(64),
        _ => None,
    }
}

/// Every field of the 348-byte NIfTI-1 header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype: DT_FLOAT32,
            bitpix: 32,
            slice_start: 0,
            pixdim: [1.0; 8],
            vox_offset: SINGLE_FILE_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: *b"n+1\0",
        }
    }
}

/// Sequential little cursor over header bytes.
struct Fields<'a, B> {
    buf: &'a [u8],
    pos: usize,
    _order: std::marker::PhantomData<B>,
}

impl<'a, B: ByteOrder> Fields<'a, B> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, _order: std::marker::PhantomData }
    }
    fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.bytes::<1>()[0]
    }
    fn i16(&mut self) -> i16 {
        let v = B::read_i16(&self.buf[self.pos..]);
        self.pos += 2;
        v
    }
    fn i32(&mut self) -> i32 {
        let v = B::read_i32(&self.buf[self.pos..]);
        self.pos += 4;
        v
    }
    fn f32(&mut self) -> f32 {
        let v = B::read_f32(&self.buf[self.pos..]);
        self.pos += 4;
        v
    }
    fn i16s<const N: usize>(&mut self) -> [i16; N] {
        std::array::from_fn(|_| self.i16())
    }
    fn f32s<const N: usize>(&mut self) -> [f32; N] {
        std::array::from_fn(|_| self.f32())
    }
}

impl NiftiHeader {
    fn parse<B: ByteOrder>(buf: &[u8]) -> Self {
        let mut f = Fields::<B>::new(buf);
        let h = NiftiHeader {
            sizeof_hdr: f.i32(),
            data_type: f.bytes(),
            db_name: f.bytes(),
            extents: f.i32(),
            session_error: f.i16(),
            regular: f.u8(),
            dim_info: f.u8(),
            dim: f.i16s(),
            intent_p1: f.f32(),
            intent_p2: f.f32(),
            intent_p3: f.f32(),
            intent_code: f.i16(),
            datatype: f.i16(),
            bitpix: f.i16(),
            slice_start: f.i16(),
            pixdim: f.f32s(),
            vox_offset: f.f32(),
            scl_slope: f.f32(),
            scl_inter: f.f32(),
            slice_end: f.i16(),
            slice_code: f.u8(),
            xyzt_units: f.u8(),
            cal_max: f.f32(),
            cal_min: f.f32(),
            slice_duration: f.f32(),
            toffset: f.f32(),
            glmax: f.i32(),
            glmin: f.i32(),
            descrip: f.bytes(),
            aux_file: f.bytes(),
            qform_code: f.i16(),
            sform_code: f.i16(),
            quatern_b: f.f32(),
            quatern_c: f.f32(),
            quatern_d: f.f32(),
            qoffset_x: f.f32(),
            qoffset_y: f.f32(),
            qoffset_z: f.f32(),
            srow_x: f.f32s(),
            srow_y: f.f32s(),
            srow_z: f.f32s(),
            intent_name: f.bytes(),
            magic: f.bytes(),
        };
        debug_assert_eq!(f.pos, HEADER_SIZE);
        h
    }

    /// Parse the first 348 bytes, detecting byte order from `sizeof_hdr`.
    /// Returns the header and whether the file is big-endian.
    pub fn from_bytes(buf: &[u8]) -> Result<(Self, bool)> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::TruncatedFile(format!("{} bytes, header needs {HEADER_SIZE}", buf.len())));
        }
        let big_endian = if LittleEndian::read_i32(buf) == HEADER_SIZE as i32 {
            false
        } else if BigEndian::read_i32(buf) == HEADER_SIZE as i32 {
            true
        } else {
            let mut magic = [0; 4];
            magic.copy_from_slice(&buf[344..348]);
            return Err(Error::BadMagic(magic));
        };
        let h = if big_endian { Self::parse::<BigEndian>(buf) } else { Self::parse::<LittleEndian>(buf) };
        Ok((h, big_endian))
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with::<LittleEndian>()
    }

    /// 348-byte encoding in byte order `B`.
    pub fn to_bytes_with<B: ByteOrder>(&self) -> Vec<u8> {
        let mut out = vec![0u8; HEADER_SIZE];
        let mut pos = 0;
        let mut put = |bytes: &[u8]| {
            out[pos..pos + bytes.len()].copy_from_slice(bytes);
            pos += bytes.len();
        };
        let i16b = |v: i16| {
            let mut b = [0; 2];
            B::write_i16(&mut b, v);
            b
        };
        let i32b = |v: i32| {
            let mut b = [0; 4];
            B::write_i32(&mut b, v);
            b
        };
        let f32b = |v: f32| {
            let mut b = [0; 4];
            B::write_f32(&mut b, v);
            b
        };
        put(&i32b(self.sizeof_hdr));
        put(&self.data_type);
        put(&self.db_name);
        put(&i32b(self.extents));
        put(&i16b(self.session_error));
        put(&[self.regular, self.dim_info]);
        self.dim.iter().for_each(|&d| put(&i16b(d)));
        [self.intent_p1, self.intent_p2, self.intent_p3].iter().for_each(|&v| put(&f32b(v)));
        [self.intent_code, self.datatype, self.bitpix, self.slice_start].iter().for_each(|&v| put(&i16b(v)));
        self.pixdim.iter().for_each(|&v| put(&f32b(v)));
        [self.vox_offset, self.scl_slope, self.scl_inter].iter().for_each(|&v| put(&f32b(v)));
        put(&i16b(self.slice_end));
        put(&[self.slice_code, self.xyzt_units]);
        [self.cal_max, self.cal_min, self.slice_duration, self.toffset].iter().for_each(|&v| put(&f32b(v)));
        put(&i32b(self.glmax));
        put(&i32b(self.glmin));
        put(&self.descrip);
        put(&self.aux_file);
        put(&i16b(self.qform_code));
        put(&i16b(self.sform_code));
        [self.quatern_b, self.quatern_c, self.quatern_d, self.qoffset_x, self.qoffset_y, self.qoffset_z]
            .iter()
            .for_each(|&v| put(&f32b(v)));
        for row in [self.srow_x, self.srow_y, self.srow_z] {
            row.iter().for_each(|&v| put(&f32b(v)));
        }
        put(&self.intent_name);
        put(&self.magic);
        debug_assert_eq!(pos, HEADER_SIZE);
        out
    }

    /// Header describing `v` as a float32 single-file image with an sform.
    pub fn for_volume(v: &Volume) -> Result<Self> {
        let dims = v.dims();
        if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::DimOutOfRange(format!("dims {dims:?} do not fit NIfTI-1")));
        }
        let spacing = v.spacing();
        let a = v.geometry().affine();
        let row = |r: usize| [a[(r, 0)] as f32, a[(r, 1)] as f32, a[(r, 2)] as f32, a[(r, 3)] as f32];
        let (lo, hi) = v.intensity_range();
        let mut h = NiftiHeader {
            dim: [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1],
            pixdim: [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0],
            sform_code: 1,
            srow_x: row(0),
            srow_y: row(1),
            srow_z: row(2),
            cal_min: lo,
            cal_max: hi,
            ..Default::default()
        };
        h.descrip[..6].copy_from_slice(b"mganet");
        Ok(h)
    }

    /// Spatial dims from `dim`, validated.
    pub fn spatial_dims(&self) -> Result<[usize; 3]> {
        let rank = self.dim[0];
        if !(1..=7).contains(&rank) {
            return Err(Error::DimOutOfRange(format!("dim[0] = {rank}")));
        }
        let mut dims = [1usize; 3];
        for (axis, d) in dims.iter_mut().enumerate().take(rank as usize) {
            let v = self.dim[axis + 1];
            if v < 1 {
                return Err(Error::DimOutOfRange(format!("dim[{}] = {v}", axis + 1)));
            }
            *d = v as usize;
        }
        for axis in 3..rank as usize {
            if self.dim[axis + 1] < 1 {
                return Err(Error::DimOutOfRange(format!("dim[{}] = {}", axis + 1, self.dim[axis + 1])));
            }
        }
        Ok(dims)
    }

    fn spacing(&self, affine: &Matrix4<f64>) -> [f64; 3] {
        std::array::from_fn(|axis| {
            let p = self.pixdim[axis + 1].abs() as f64;
            if p.is_normal() {
                p
            } else {
                affine.fixed_view::<3, 1>(0, axis).norm()
            }
        })
    }

    /// Index→world: sform if present, else qform, else diagonal pixdim.
    pub fn affine(&self) -> Matrix4<f64> {
        let pix = |i: usize| {
            let p = self.pixdim[i].abs() as f64;
            if p.is_normal() {
                p
            } else {
                1.0
            }
        };
        if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
                for c in 0..4 {
                    m[(r, c)] = row[c] as f64;
                }
            }
            return m;
        }
        if self.qform_code > 0 {
            let (b, c, d) = (self.quatern_b as f64, self.quatern_c as f64, self.quatern_d as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [pix(1), pix(2), qfac * pix(3)];
            let mut m = Matrix4::identity();
            for r in 0..3 {
                for col in 0..3 {
                    m[(r, col)] = rot[r][col] * scale[col];
                }
            }
            m[(0, 3)] = self.qoffset_x as f64;
            m[(1, 3)] = self.qoffset_y as f64;
            m[(2, 3)] = self.qoffset_z as f64;
            return m;
        }
        Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(pix(1), pix(2), pix(3)))
    }
}

fn decompress(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    MultiGzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| {
        Error::TruncatedFile(format!("gzip stream: {e}"))
    })?;
    Ok(out)
}

/// Decode a NIfTI-1 image held in memory (optionally gzip-compressed).
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let owned;
    let bytes = if bytes.starts_with(&GZIP_MAGIC) {
        owned = decompress(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let (h, big_endian) = NiftiHeader::from_bytes(bytes)?;
    if &h.magic != b"n+1\0" && &h.magic != b"ni1\0" {
        return Err(Error::BadMagic(h.magic));
    }
    let dims = h.spatial_dims()?;
    let bits = bits_for(h.datatype).ok_or(Error::UnsupportedDatatype(h.datatype))?;
    if h.bitpix != bits {
        return Err(Error::UnsupportedDatatype(h.datatype));
    }
    let n: usize = dims.iter().product();
    let width = bits as usize / 8;
    let offset = if h.vox_offset.is_finite() && h.vox_offset >= HEADER_SIZE as f32 {
        h.vox_offset as usize
    } else if &h.magic == b"n+1\0" {
        SINGLE_FILE_OFFSET
    } else {
        // A lone `.hdr` of a pair carries no payload.
        return Err(Error::TruncatedFile("header-only file has no voxel data".into()));
    };
    let end = offset.checked_add(n * width).ok_or_else(|| Error::DimOutOfRange(format!("{dims:?}")))?;
    if bytes.len() < end {
        return Err(Error::TruncatedFile(format!("payload needs {end} bytes, file has {}", bytes.len())));
    }
    let raw = &bytes[offset..end];
    let values: Vec<f64> = if big_endian { read_values::<BigEndian>(raw, h.datatype) } else { read_values::<LittleEndian>(raw, h.datatype) };

    let scale = h.scl_slope != 0.0 && h.scl_slope.is_finite();
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let data = values.into_iter().map(|v| if scale { (slope * v + inter) as f32 } else { v as f32 }).collect();

    let affine = h.affine();
    let geom = Geometry::with_affine(dims, h.spacing(&affine), affine)?;
    Volume::new(geom, data)
}

fn read_values<B: ByteOrder>(raw: &[u8], datatype: i16) -> Vec<f64> {
    match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f64).collect(),
        DT_INT16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DT_INT32 => raw.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DT_FLOAT32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DT_FLOAT64 => raw.chunks_exact(8).map(B::read_f64).collect(),
        _ => unreachable!("datatype validated by caller"),
    }
}

/// Encode `v` as a float32 single-file NIfTI-1 image.
pub fn encode_volume(v: &Volume, gzip: bool) -> Result<Vec<u8>> {
    let header = NiftiHeader::for_volume(v)?;
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(&[0; SINGLE_FILE_OFFSET - HEADER_SIZE]);
    bytes.reserve(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    if !gzip {
        return Ok(bytes);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&bytes).and_then(|_| enc.finish()).map_err(|source| Error::IoFailure {
        path: "<memory>".into(),
        source,
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::IoFailure { path: path.to_path_buf(), source })?;
    decode_volume(&bytes)
}

/// Write `v`, gzip-compressed when the file name ends in `.gz`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let gzip = path.extension().is_some_and(|e| e == "gz");
    write_volume_with(v, path, gzip)
}

pub fn write_volume_with(v: &Volume, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
    let bytes = encode_volume(v, gzip)?;
    atomic_write(path.as_ref(), &bytes)
}
