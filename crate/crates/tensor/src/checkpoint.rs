//! Binary weight file.
//!
//! Layout: magic `OPGW`, `u32` version, then records until end of file. Each
//! record is `u32` name length, name bytes, `u32` rank, `rank` x `u32` dims
//! and `product(dims)` little-endian `f32` words. All integers little-endian.
//!
//! Non-tensor state (counters, serialized structs) travels as opaque records
//! whose words are raw bytes; see [`Record::blob`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OPGW";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    /// Raw little-endian payload, `4 * product(dims)` bytes.
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_tensor(name: impl Into<String>, tensor: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            dims: tensor.dims().iter().map(|&d| d as u32).collect(),
            payload: tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let dims: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        let data = self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::from_vec(&dims, data)
    }

    /// Opaque byte payload padded with ASCII spaces to a whole number of words.
    pub fn blob(name: impl Into<String>, bytes: &[u8]) -> Self {
        let mut payload = bytes.to_vec();
        while payload.len() % 4 != 0 {
            payload.push(b' ');
        }
        Self {
            name: name.into(),
            dims: vec![(payload.len() / 4) as u32],
            payload,
        }
    }

    pub fn from_u64(name: impl Into<String>, value: u64) -> Self {
        Self {
            name: name.into(),
            dims: vec![2],
            payload: value.to_le_bytes().to_vec(),
        }
    }

    pub fn as_u64(&self) -> Result<u64> {
        let bytes: [u8; 8] =
            self.payload.as_slice().try_into().map_err(|_| {
                TensorError::Checkpoint(format!("record `{}` is not a u64", self.name))
            })?;
        Ok(u64::from_le_bytes(bytes))
    }
}

pub fn write<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let expected: usize = r.dims.iter().map(|&d| d as usize).product::<usize>() * 4;
        if expected != r.payload.len() {
            return Err(TensorError::Checkpoint(format!(
                "record `{}` payload is {} bytes, dims need {expected}",
                r.name,
                r.payload.len()
            )));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for d in &r.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&r.payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| TensorError::Checkpoint(format!("truncated while reading {what}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]))
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || buf[..4] != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(&buf, &mut pos, "version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let mut records = Vec::new();
    while pos < buf.len() {
        let name_len = read_u32(&buf, &mut pos, "name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(TensorError::Checkpoint(format!(
                "name length {name_len} too large"
            )));
        }
        let name_bytes = buf
            .get(pos..pos + name_len as usize)
            .ok_or_else(|| TensorError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        pos += name_len as usize;
        let rank = read_u32(&buf, &mut pos, "rank")?;
        if rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!(
                "rank {rank} too large in `{name}`"
            )));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&buf, &mut pos, "dims"))
            .collect::<Result<Vec<_>>>()?;
        let n_bytes = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| TensorError::Checkpoint(format!("dims overflow in `{name}`")))?;
        let payload = buf
            .get(pos..pos + n_bytes)
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated payload in `{name}`")))?
            .to_vec();
        pos += n_bytes;
        records.push(Record {
            name,
            dims,
            payload,
        });
    }
    Ok(records)
}

pub fn write_file(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), records)
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    read(BufReader::new(File::open(path)?))
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| TensorError::Checkpoint(format!("missing record `{name}`")))
}

/// Records for every parameter of `store`, plus optimizer moments and the
/// step counter when `with_optimizer` is set. `tag` namespaces the counter.
pub fn store_records(tag: &str, store: &ParamStore<f32>, with_optimizer: bool) -> Vec<Record> {
    let mut out: Vec<Record> = store
        .params()
        .iter()
        .map(|p| Record::from_tensor(p.name.clone(), &p.value))
        .collect();
    if with_optimizer {
        for p in store.params() {
            out.push(Record::from_tensor(
                format!("optim.m.{}", p.name),
                &p.first_moment,
            ));
            out.push(Record::from_tensor(
                format!("optim.v.{}", p.name),
                &p.second_moment,
            ));
        }
        out.push(Record::from_u64(format!("optim.steps.{tag}"), store.steps));
    }
    out
}

/// Overwrite parameters of `store` from `records`. Every parameter must be
/// present with matching dims; optimizer state is restored when present.
pub fn load_store(tag: &str, store: &mut ParamStore<f32>, records: &[Record]) -> Result<()> {
    for p in store.params_mut() {
        let value = find(records, &p.name)?.to_tensor()?;
        if value.dims() != p.value.dims() {
            return Err(TensorError::Checkpoint(format!(
                "`{}` has dims {:?}, expected {:?}",
                p.name,
                value.dims(),
                p.value.dims()
            )));
        }
        p.value = value;
        p.grad.fill(0.0);
        let m = records
            .iter()
            .find(|r| r.name == format!("optim.m.{}", p.name));
        let v = records
            .iter()
            .find(|r| r.name == format!("optim.v.{}", p.name));
        match (m, v) {
            (Some(m), Some(v)) => {
                p.first_moment = m.to_tensor()?;
                p.second_moment = v.to_tensor()?;
                if p.first_moment.dims() != p.value.dims()
                    || p.second_moment.dims() != p.value.dims()
                {
                    return Err(TensorError::Checkpoint(format!(
                        "moment dims for `{}`",
                        p.name
                    )));
                }
            }
            _ => {
                p.first_moment.fill(0.0);
                p.second_moment.fill(0.0);
            }
        }
    }
    store.steps = match records
        .iter()
        .find(|r| r.name == format!("optim.steps.{tag}"))
    {
        Some(r) => r.as_u64()?,
        None => 0,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record::from_tensor(
                "a",
                &Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
            ),
            Record::blob("state", b"{\"x\":1}"),
            Record::from_u64("n", u64::MAX - 3),
        ]
    }

    #[test]
    fn round_trip() {
        let mut bytes = Vec::new();
        write(&mut bytes, &sample()).unwrap();
        assert_eq!(&bytes[..4], b"OPGW");
        let back = read(bytes.as_slice()).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back[2].as_u64().unwrap(), u64::MAX - 3);
        assert_eq!(back[1].payload, b"{\"x\":1} ");
    }

    #[test]
    fn truncation_and_magic_are_errors() {
        let mut bytes = Vec::new();
        write(&mut bytes, &sample()).unwrap();
        for cut in [3, 7, 9, 15, bytes.len() - 1] {
            assert!(read(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read(bad.as_slice()).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(read(bad_version.as_slice()).is_err());
    }
}
