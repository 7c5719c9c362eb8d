//! Binary volume and checkpoint files, plus raw-array import.
//!
//! All integers and floats are little-endian with no padding.
//!
//! Volume: `"VSEG"`, version `u16`, dtype `u8` (0 = f32 image, 1 = u8
//! labels), channels `u16`, extents `3 × u32`, then the row-major payload.
//!
//! Checkpoint: `"VNET"`, version `u16`, architecture as JSON (`u32` length
//! plus bytes), tensor count `u32`, then per tensor: name length `u16`, name,
//! dtype `u8`, rank `u8`, extents `rank × u32`, payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use vseg_core::{ArchSpec, LabelVolume, Network, Tensor};

use crate::error::{io_err, CliError, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VSEG";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VNET";
pub const VOLUME_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Image(Tensor<f32>),
    Labels(LabelVolume),
}

impl Volume {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            Volume::Image(t) => [t.shape()[1], t.shape()[2], t.shape()[3]],
            Volume::Labels(l) => l.dims(),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(CliError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CliError::Format("payload overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| CliError::Format(format!("{what} {v} does not fit the file format")))
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    let (dtype, channels) = match v {
        Volume::Image(t) => (DTYPE_F32, t.shape()[0]),
        Volume::Labels(_) => (DTYPE_U8, 1),
    };
    out.push(dtype);
    out.extend_from_slice(&narrow::<u16>(channels, "channel count")?.to_le_bytes());
    for e in v.dims() {
        out.extend_from_slice(&narrow::<u32>(e, "extent")?.to_le_bytes());
    }
    match v {
        Volume::Image(t) => put_f32s(&mut out, t.data()),
        Volume::Labels(l) => out.extend_from_slice(l.data()),
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes);
    r.magic(VOLUME_MAGIC)?;
    let version = r.u16()?;
    if version != VOLUME_VERSION {
        return Err(CliError::Format(format!("unsupported volume version {version}")));
    }
    let dtype = r.u8()?;
    let channels = r.u16()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let voxels: usize = dims.iter().product();
    let v = match dtype {
        DTYPE_F32 => {
            let data = r.f32s(channels * voxels)?;
            Volume::Image(Tensor::new(vec![channels, dims[0], dims[1], dims[2]], data)?)
        }
        DTYPE_U8 => {
            if channels != 1 {
                return Err(CliError::Format(format!("label volume with {channels} channels")));
            }
            Volume::Labels(LabelVolume::from_labels(dims, r.take(voxels)?.to_vec())?)
        }
        other => return Err(CliError::Format(format!("unknown dtype code {other}"))),
    };
    r.finish()?;
    Ok(v)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)?).map_err(io_err(path))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    match read_volume(path)? {
        Volume::Image(t) => Ok(t),
        Volume::Labels(_) => Err(CliError::Usage(format!("{} holds labels, expected an image", path.display()))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Labels(l) => Ok(l),
        Volume::Image(_) => Err(CliError::Usage(format!("{} holds an image, expected labels", path.display()))),
    }
}

pub fn encode_checkpoint(net: &Network<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let spec = serde_json::to_vec(net.spec()).map_err(|e| CliError::Format(e.to_string()))?;
    out.extend_from_slice(&narrow::<u32>(spec.len(), "architecture length")?.to_le_bytes());
    out.extend_from_slice(&spec);
    let names: Vec<String> = net.param_names().into_iter().chain(net.buffer_names()).collect();
    let tensors: Vec<&Tensor<f32>> = net.params().into_iter().chain(net.buffers()).collect();
    out.extend_from_slice(&narrow::<u32>(names.len(), "tensor count")?.to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&narrow::<u16>(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(narrow::<u8>(t.rank(), "rank")?);
        for &e in t.shape() {
            out.extend_from_slice(&narrow::<u32>(e, "extent")?.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let spec: ArchSpec = serde_json::from_slice(r.take(len)?).map_err(|e| CliError::Format(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| CliError::Format(e.to_string()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CliError::Format(format!("tensor {name}: dtype {dtype} is not f32")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        if stored.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(CliError::Format(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    let mut net = Network::<f32>::build(&spec, 0)?;
    let params = net.param_names();
    let buffers = net.buffer_names();
    fill(&params, &mut net.params_mut(), &mut stored)?;
    fill(&buffers, &mut net.buffers_mut(), &mut stored)?;
    if let Some(extra) = stored.keys().next() {
        return Err(CliError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(net)
}

fn fill(names: &[String], slots: &mut [&mut Tensor<f32>], stored: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, slot) in names.iter().zip(slots.iter_mut()) {
        let t = stored
            .remove(name)
            .ok_or_else(|| CliError::Format(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(CliError::Format(format!(
                "tensor {name}: stored shape {:?}, architecture expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Network<f32>> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_checkpoint(path: &Path, net: &Network<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(net)?).map_err(io_err(path))
}

/// Path of the dims sidecar for a raw array: `<raw>.dims`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

/// Read a headerless little-endian array. The sidecar holds whitespace
/// separated extents: `D H W` or `C D H W` for images, `D H W` for labels.
pub fn import_raw(raw: &Path, labels: bool) -> Result<Volume> {
    let side = sidecar_path(raw);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let ext = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Format(format!("{}: {e}", side.display())))?;
    let (channels, dims) = match (ext.as_slice(), labels) {
        (&[d, h, w], _) => (1, [d, h, w]),
        (&[c, d, h, w], false) => (c, [d, h, w]),
        _ => {
            return Err(CliError::Format(format!(
                "{}: expected {} extents, got {:?}",
                side.display(),
                if labels { "3" } else { "3 or 4" },
                ext
            )))
        }
    };
    let bytes = fs::read(raw).map_err(io_err(raw))?;
    let voxels: usize = dims.iter().product();
    let mut r = Reader::new(&bytes);
    let v = if labels {
        Volume::Labels(LabelVolume::from_labels(dims, r.take(voxels)?.to_vec())?)
    } else {
        Volume::Image(Tensor::new(vec![channels, dims[0], dims[1], dims[2]], r.f32s(channels * voxels)?)?)
    };
    r.finish()?;
    Ok(v)
}
