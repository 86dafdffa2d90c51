//! Single-file NIfTI-1 (`.nii`, optionally gzip-compressed) reader and writer.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::bufread::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{DataKind, Geometry, LabelVolume, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct Fields<'a> {
    raw: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        self.raw[off..off + N].try_into().unwrap()
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.bytes(off)),
            Endian::Big => i16::from_be_bytes(self.bytes(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.bytes(off)),
            Endian::Big => f32::from_be_bytes(self.bytes(off)),
        }
    }
}

struct Header {
    endian: Endian,
    shape: [usize; 3],
    kind: DataKind,
    spacing: [f32; 3],
    affine: [[f32; 4]; 4],
    vox_offset: usize,
    scaling: Option<(f32, f32)>,
}

fn header_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Header {
        field,
        detail: detail.into(),
    }
}

fn parse_header(raw: &[u8; HEADER_SIZE]) -> Result<Header> {
    let endian = match (
        i32::from_le_bytes(raw[0..4].try_into().unwrap()),
        i32::from_be_bytes(raw[0..4].try_into().unwrap()),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        (v, _) => return Err(header_err("sizeof_hdr", format!("expected 348, found {v}"))),
    };
    match &raw[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Unsupported("two-file NIfTI (.hdr/.img) pairs".into())),
        m => return Err(header_err("magic", format!("expected \"n+1\", found {m:?}"))),
    }
    let f = Fields { raw, endian };

    let dim: [i16; 8] = std::array::from_fn(|i| f.i16(40 + 2 * i));
    let rank_ok = match dim[0] {
        3 => true,
        4 => dim[4] == 1,
        _ => false,
    };
    if !rank_ok {
        return Err(Error::Dimensionality(format!(
            "dim[0] = {} with dim[4] = {}; only 3D volumes (or 4D with a singleton fourth axis) are supported",
            dim[0], dim[4]
        )));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(header_err("dim", format!("non-positive extent in {:?}", &dim[1..4])));
    }
    let shape = [dim[3] as usize, dim[2] as usize, dim[1] as usize];

    let code = f.i16(70);
    let kind = DataKind::from_nifti_code(code)
        .ok_or_else(|| Error::Unsupported(format!("NIfTI datatype code {code}")))?;
    let bitpix = f.i16(72);
    if bitpix as usize != kind.size() * 8 {
        return Err(header_err(
            "bitpix",
            format!("{bitpix} does not match datatype {kind:?}"),
        ));
    }

    let pixdim: [f32; 8] = std::array::from_fn(|i| f.f32(76 + 4 * i));
    let (dx, dy, dz) = (pixdim[1], pixdim[2], pixdim[3]);
    if [dx, dy, dz].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(header_err("pixdim", format!("non-positive spacing {:?}", &pixdim[1..4])));
    }

    let vox_offset = f.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(header_err("vox_offset", format!("{vox_offset}")));
    }

    let slope = f.f32(112);
    let inter = f.f32(116);
    let scaling = (slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0))
        .then_some((slope, if inter.is_finite() { inter } else { 0.0 }));

    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    let affine = if sform_code > 0 {
        let row = |off: usize| -> [f32; 4] { std::array::from_fn(|i| f.f32(off + 4 * i)) };
        [row(280), row(296), row(312), [0.0, 0.0, 0.0, 1.0]]
    } else if qform_code > 0 {
        let (b, c, d) = (f.f32(256) as f64, f.f32(260) as f64, f.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [dx as f64, dy as f64, dz as f64 * qfac];
        let offset = [f.f32(268), f.f32(272), f.f32(276)];
        let mut m = [[0.0f32; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (r[i][j] * scale[j]) as f32;
            }
            m[i][3] = offset[i];
        }
        m[3][3] = 1.0;
        m
    } else {
        [
            [dx, 0.0, 0.0, 0.0],
            [0.0, dy, 0.0, 0.0],
            [0.0, 0.0, dz, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    };

    Ok(Header {
        endian,
        shape,
        kind,
        spacing: [dz, dy, dx],
        affine,
        vox_offset: vox_offset as usize,
        scaling,
    })
}

fn decode(kind: DataKind, endian: Endian, b: &[u8]) -> f32 {
    macro_rules! num {
        ($t:ty) => {{
            let a = b.try_into().unwrap();
            match endian {
                Endian::Little => <$t>::from_le_bytes(a),
                Endian::Big => <$t>::from_be_bytes(a),
            }
        }};
    }
    match kind {
        DataKind::U8 => b[0] as f32,
        DataKind::I16 => num!(i16) as f32,
        DataKind::U16 => num!(u16) as f32,
        DataKind::I32 => num!(i32) as f32,
        DataKind::F32 => num!(f32),
        DataKind::F64 => num!(f64) as f32,
    }
}

/// Reads a NIfTI-1 volume, transparently decompressing gzip input.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_nifti_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Stream variant of [`read_nifti`]. Besides the header, the only allocation
/// proportional to the volume is the output voxel buffer; raw bytes are
/// converted through a fixed-size chunk.
pub fn read_nifti_from(mut reader: impl BufRead) -> Result<Volume> {
    let gz = {
        let head = reader.fill_buf().map_err(|e| Error::io("<stream>", e))?;
        head.len() >= 2 && head[..2] == GZIP_MAGIC
    };
    if gz {
        read_plain(BufReader::new(MultiGzDecoder::new(reader)))
    } else {
        read_plain(reader)
    }
}

fn read_plain(mut r: impl Read) -> Result<Volume> {
    let io = |e: io::Error| -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            header_err("file", "truncated")
        } else {
            Error::io("<stream>", e)
        }
    };
    let mut raw = [0u8; HEADER_SIZE];
    r.read_exact(&mut raw).map_err(io)?;
    let h = parse_header(&raw)?;
    io::copy(&mut (&mut r).take((h.vox_offset - HEADER_SIZE) as u64), &mut io::sink()).map_err(io)?;

    let n: usize = h.shape.iter().product();
    let size = h.kind.size();
    let mut data = Vec::with_capacity(n);
    let mut buf = vec![0u8; CHUNK - CHUNK % size];
    while data.len() < n {
        let want = ((n - data.len()) * size).min(buf.len());
        r.read_exact(&mut buf[..want]).map_err(io)?;
        data.extend(buf[..want].chunks_exact(size).map(|b| decode(h.kind, h.endian, b)));
    }
    if let Some((slope, inter)) = h.scaling {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let geometry = Geometry::with_affine(h.shape, h.spacing, h.affine)?;
    Ok(Volume {
        geometry,
        data,
        dtype_on_disk: h.kind,
    })
}

/// Anything that can be stored as a NIfTI-1 voxel array.
pub trait NiftiData {
    fn geometry(&self) -> &Geometry;
    fn kind(&self) -> DataKind;
    fn write_voxels(&self, w: &mut dyn Write) -> io::Result<()>;
}

impl NiftiData for Volume {
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn kind(&self) -> DataKind {
        DataKind::F32
    }

    fn write_voxels(&self, w: &mut dyn Write) -> io::Result<()> {
        write_chunked(w, &self.data, |v| v.to_le_bytes())
    }
}

impl NiftiData for LabelVolume {
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn kind(&self) -> DataKind {
        DataKind::U16
    }

    fn write_voxels(&self, w: &mut dyn Write) -> io::Result<()> {
        write_chunked(w, &self.data, |v| v.to_le_bytes())
    }
}

fn write_chunked<T: Copy, const N: usize>(
    w: &mut dyn Write,
    data: &[T],
    enc: impl Fn(T) -> [u8; N],
) -> io::Result<()> {
    let mut buf = Vec::with_capacity(CHUNK);
    for block in data.chunks(CHUNK / N) {
        buf.clear();
        for &v in block {
            buf.extend_from_slice(&enc(v));
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn build_header(g: &Geometry, kind: DataKind) -> Result<[u8; VOX_OFFSET]> {
    let mut h = [0u8; VOX_OFFSET];
    let put = |h: &mut [u8; VOX_OFFSET], off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    put(&mut h, 38, b"r");
    let [d, hh, w] = g.shape;
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for (slot, v) in [(1, w), (2, hh), (3, d)] {
        dim[slot] = i16::try_from(v)
            .map_err(|_| Error::Unsupported(format!("extent {v} exceeds NIfTI-1 limit")))?;
    }
    for (i, v) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &v.to_le_bytes());
    }
    put(&mut h, 70, &kind.nifti_code().to_le_bytes());
    put(&mut h, 72, &((kind.size() * 8) as i16).to_le_bytes());
    let [sz, sy, sx] = g.spacing;
    let pixdim = [1.0f32, sx, sy, sz, 1.0, 1.0, 1.0, 1.0];
    for (i, v) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &v.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    // xyzt_units: millimetres, seconds
    h[123] = 2 | 8;
    put(&mut h, 254, &2i16.to_le_bytes());
    for (r, off) in [(0, 280), (1, 296), (2, 312)] {
        for c in 0..4 {
            put(&mut h, off + 4 * c, &g.affine[r][c].to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    Ok(h)
}

/// Writes `vol` as single-file NIfTI-1, gzip-compressed when `compress`.
/// Labels are stored as u16, images as f32, both little-endian with an sform.
pub fn write_nifti(vol: &dyn NiftiData, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_nifti_to(vol, BufWriter::new(file), compress).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_nifti_to(vol: &dyn NiftiData, w: impl Write, compress: bool) -> Result<()> {
    let header = build_header(vol.geometry(), vol.kind())?;
    let io = |e| Error::io("<stream>", e);
    if compress {
        let mut enc = GzEncoder::new(w, Compression::fast());
        enc.write_all(&header).map_err(io)?;
        vol.write_voxels(&mut enc).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)
    } else {
        let mut w = w;
        w.write_all(&header).map_err(io)?;
        vol.write_voxels(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}
