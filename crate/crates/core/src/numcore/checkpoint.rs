//! Single-file checkpoint: a text manifest followed by little-endian blobs.
//!
//! ```text
//! SFCKPT 1
//! header <key> <value>
//! tensor <name> f64 <d0>x<d1>... <offset> <nbytes>
//! end
//! <raw bytes, offsets relative to the first byte after "end\n">
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "SFCKPT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.header {
            check_token(k)?;
            if v.contains('\n') {
                return Err(Error::parse(format!("header value for {k} contains a newline")));
            }
            manifest.push_str(&format!("header {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token(name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            let nbytes = t.numel() * 8;
            manifest.push_str(&format!("tensor {name} f64 {dims} {offset} {nbytes}\n"));
            offset += nbytes;
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse("unterminated manifest"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::parse("manifest is not UTF-8"))?;
            *pos += nl + 1;
            Ok(line.to_string())
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(Error::parse("bad checkpoint magic"));
        }
        let mut header = Vec::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("header ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                header.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 || f[1] != "f64" {
                    return Err(Error::parse(format!("bad tensor entry: {line}")));
                }
                let shape: Vec<usize> = if f[2] == "scalar" {
                    Vec::new()
                } else {
                    f[2].split('x')
                        .map(|d| d.parse().map_err(|_| Error::parse(format!("bad extent in {line}"))))
                        .collect::<Result<_>>()?
                };
                let offset: usize = f[3].parse().map_err(|_| Error::parse(format!("bad offset in {line}")))?;
                let nbytes: usize = f[4].parse().map_err(|_| Error::parse(format!("bad size in {line}")))?;
                entries.push((f[0].to_string(), shape, offset, nbytes));
            } else {
                return Err(Error::parse(format!("unknown manifest line: {line}")));
            }
        }
        let blob = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset, nbytes) in entries {
            let numel: usize = shape.iter().product();
            if nbytes != numel * 8 || offset + nbytes > blob.len() {
                return Err(Error::parse(format!("tensor {name} does not fit the blob")));
            }
            let data = blob[offset..offset + nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = if shape.is_empty() {
                Tensor::from_parts(shape, data)
            } else {
                Tensor::new(&shape, data)?
            };
            tensors.push((name, t));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) {
        return Err(Error::parse(format!("name {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let weird = vec![f64::MIN_POSITIVE, -0.0, 1e-300, std::f64::consts::PI, -7.25, 5e-324];
        let ck = Checkpoint {
            header: vec![("step".into(), "12".into()), ("dims".into(), "J=2 H=4".into())],
            tensors: vec![
                ("w".into(), Tensor::new(&[2, 3], weird).unwrap()),
                ("b".into(), Tensor::vector(vec![1.0])),
                ("s".into(), Tensor::scalar(0.5)),
            ],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.header_value("dims"), Some("J=2 H=4"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let ck = Checkpoint { header: vec![], tensors: vec![("w".into(), Tensor::ones(&[4]))] };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Parse(_))));
    }
}
