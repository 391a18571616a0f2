//! On-disk formats. All integers and floats are little-endian.
//!
//! Dataset file:
//! ```text
//! "ASNO" u16 version
//! u32 grid_n  u32 state_dim  u32 trajectories  u32 steps  u32 hidden_kind  u32 hidden_dim
//! per trajectory: u64 profile_id, steps×state_dim f64 states,
//!                 steps×state_dim f64 forcings, hidden_dim f64 hidden values
//! ```
//! `steps` counts stored states. `grid_n` is 0 for non-grid problems.
//!
//! Tensor container (checkpoints, kernels):
//! ```text
//! "ASNC" u16 version  u32 meta_len  meta_len bytes of JSON  u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 rank, rank×u32 dims, f64 data
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Hidden, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"ASNO";
pub const CONTAINER_MAGIC: &[u8; 4] = b"ASNC";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn err(&self, detail: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail,
        }
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic".into()));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Serialises trajectories that share length, state size and hidden layout.
pub fn encode_dataset(trajs: &[Trajectory], grid_n: usize) -> Result<Vec<u8>> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Usage("cannot write an empty dataset".into()))?;
    let (steps, dim) = (first.len(), first.state_dim());
    let kind = first.hidden.kind_code();
    let hidden_dim = first.hidden.to_values().len();
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [grid_n, dim, trajs.len(), steps, kind as usize, hidden_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in trajs {
        t.validate()?;
        let hidden = t.hidden.to_values();
        if t.len() != steps || t.state_dim() != dim || t.hidden.kind_code() != kind || hidden.len() != hidden_dim {
            return Err(Error::Usage(format!("trajectory {} does not match dataset layout", t.profile_id)));
        }
        out.extend_from_slice(&t.profile_id.to_le_bytes());
        t.states.iter().for_each(|s| put_f64s(&mut out, s));
        t.forcings.iter().for_each(|f| put_f64s(&mut out, f));
        put_f64s(&mut out, &hidden);
    }
    Ok(out)
}

/// Returns `(grid_n, trajectories)`.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<(usize, Vec<Trajectory>)> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    r.header(DATASET_MAGIC)?;
    let grid_n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let steps = r.u32()? as usize;
    let kind = r.u32()?;
    let hidden_dim = r.u32()? as usize;
    let mut trajs = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let states = (0..steps).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let forcings = (0..steps).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let hidden = Hidden::from_values(kind, &r.f64s(hidden_dim)?)?;
        trajs.push(Trajectory::new(states, forcings, hidden, id).map_err(|e| r.err(e.to_string()))?);
    }
    r.finish()?;
    Ok((grid_n, trajs))
}

pub fn write_dataset(path: &Path, trajs: &[Trajectory], grid_n: usize) -> Result<()> {
    write_file(path, &encode_dataset(trajs, grid_n)?)
}

pub fn read_dataset(path: &Path) -> Result<(usize, Vec<Trajectory>)> {
    decode_dataset(&read_file(path)?, path)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

/// Named tensors plus a JSON metadata blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        r.header(CONTAINER_MAGIC)?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

/// Writes a 2-D tensor as headerless CSV with 17 significant digits.
pub fn write_matrix_csv(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2("write_matrix_csv")?;
    let mut s = String::with_capacity(rows * cols * 24);
    for r in 0..rows {
        let line: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: u64) -> Trajectory {
        let states = (0..4).map(|m| vec![m as f64 + 0.25, -(id as f64)]).collect();
        let forcings = (0..4).map(|m| vec![1.0 / (m as f64 + 1.0), 3.0]).collect();
        let hidden = Hidden::Microstructure {
            b: vec![3.0, 12.0],
            alpha: 4.0,
            tau: 5.0,
        };
        Trajectory::new(states, forcings, hidden, id).unwrap()
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let trajs = vec![traj(1), traj(7)];
        let bytes = encode_dataset(&trajs, 0).unwrap();
        assert_eq!(&bytes[..4], b"ASNO");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let (g, back) = decode_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(g, 0);
        assert_eq!(back, trajs);
        assert_eq!(encode_dataset(&back, 0).unwrap(), bytes);
    }

    #[test]
    fn header_is_little_endian_u32s() {
        let bytes = encode_dataset(&[traj(0)], 5).unwrap();
        let u = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        assert_eq!([u(0), u(1), u(2), u(3), u(4), u(5)], [5, 2, 1, 4, 1, 4]);
        assert_eq!(bytes.len(), 6 + 24 + (8 + 2 * 4 * 2 * 8 + 4 * 8));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut bytes = encode_dataset(&[traj(0)], 0).unwrap();
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn container_round_trips() {
        let c = Container {
            meta: serde_json::json!({"kind": "test", "n": 3}),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 * 0.1).collect()).unwrap()),
                ("b".into(), Tensor::scalar(-2.5)),
            ],
        };
        let back = Container::decode(&c.encode().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("b").unwrap().item(), -2.5);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        assert!(matches!(read_dataset(Path::new("/nonexistent/x.bin")), Err(Error::MissingArtifact(_))));
    }
}
