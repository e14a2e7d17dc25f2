//! Binary container for named arrays plus an embedded text block.
//!
//! Used both for training checkpoints and for pretrained-backbone weight
//! files. Layout (all integers little-endian u64):
//!
//! ```text
//! magic "MADARR01"
//! text_len, text bytes (UTF-8 config snapshot / weights manifest)
//! array_count
//! repeat: name_len, name | dtype_len, dtype ("f32"/"f64")
//!         ndim, dim_0..dim_{ndim-1} | raw little-endian element bytes
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MADARR01";

pub struct Container<S: Scalar> {
    pub text: String,
    pub arrays: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Container<S> {
    pub fn new(text: String) -> Self {
        Container {
            text,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::Load(format!("container is missing array `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_bytes(&mut buf, self.text.as_bytes());
        buf.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, tensor) in &self.arrays {
            write_bytes(&mut buf, name.as_bytes());
            write_bytes(&mut buf, S::DTYPE.as_bytes());
            buf.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
            for &d in &tensor.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &tensor.data {
                v.write_le(&mut buf);
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Load(format!(
                "{} is not a container file (bad magic)",
                path.display()
            )));
        }
        let text = String::from_utf8(cur.take_prefixed()?.to_vec())
            .map_err(|_| Error::Load("container text block is not UTF-8".into()))?;
        let count = cur.take_u64()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(cur.take_prefixed()?.to_vec())
                .map_err(|_| Error::Load("array name is not UTF-8".into()))?;
            let dtype = String::from_utf8(cur.take_prefixed()?.to_vec())
                .map_err(|_| Error::Load("dtype tag is not UTF-8".into()))?;
            if dtype != S::DTYPE {
                return Err(Error::Load(format!(
                    "array `{name}` has dtype {dtype} but {} was requested",
                    S::DTYPE
                )));
            }
            let ndim = cur.take_u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.take_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * S::WIDTH)?;
            let data = raw
                .chunks_exact(S::WIDTH)
                .map(|c| S::read_le(c))
                .collect::<Vec<_>>();
            arrays.push((name, Tensor::new(data, shape)));
        }
        Ok(Container { text, arrays })
    }
}

/// Dtype-agnostic entry listing for `describe`.
pub struct EntryInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

pub fn describe(path: &Path) -> Result<(String, Vec<EntryInfo>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Load(format!(
            "{} is not a container file (bad magic)",
            path.display()
        )));
    }
    let text = String::from_utf8(cur.take_prefixed()?.to_vec())
        .map_err(|_| Error::Load("container text block is not UTF-8".into()))?;
    let count = cur.take_u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(cur.take_prefixed()?.to_vec())
            .map_err(|_| Error::Load("array name is not UTF-8".into()))?;
        let dtype = String::from_utf8(cur.take_prefixed()?.to_vec())
            .map_err(|_| Error::Load("dtype tag is not UTF-8".into()))?;
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Load(format!("unknown dtype tag `{other}`"))),
        };
        let ndim = cur.take_u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.take_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        cur.take(numel * width)?;
        entries.push(EntryInfo { name, dtype, shape });
    }
    Ok((text, entries))
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("container file truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        let raw = self.take(8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
    }

    fn take_prefixed(&mut self) -> Result<&'a [u8]> {
        let len = self.take_u64()? as usize;
        self.take(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut c = Container::<f64>::new("k = v\n".into());
        c.push("a.w", Tensor::from_f64_slice(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        c.push("b", Tensor::from_f64_slice(&[5.0], &[1]));
        c.save(&path).unwrap();

        let back = Container::<f64>::load(&path).unwrap();
        assert_eq!(back.text, "k = v\n");
        assert_eq!(back.arrays.len(), 2);
        assert_eq!(back.require("a.w").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(back.require("a.w").unwrap().shape, vec![2, 2]);

        let (text, entries) = describe(&path).unwrap();
        assert_eq!(text, "k = v\n");
        assert_eq!(entries[0].name, "a.w");
        assert_eq!(entries[0].dtype, "f64");
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut c = Container::<f32>::new(String::new());
        c.push("x", Tensor::from_f64_slice(&[1.0], &[1]));
        c.save(&path).unwrap();
        assert!(Container::<f64>::load(&path).is_err());
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a container").unwrap();
        assert!(Container::<f64>::load(&path).is_err());
    }
}
