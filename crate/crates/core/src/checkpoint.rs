//! Named-tensor container shared by every model artifact.
//!
//! Layout: a UTF-8 text header terminated by a line `end`, followed by the
//! raw little-endian f32 payload.
//!
//! ```text
//! ADAPTERBOT-TENSORS 1
//! kind backbone
//! meta <key> <json string>
//! tensor <name> <dim,dim,...> <byte offset>
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ADAPTERBOT-TENSORS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint missing meta field {key:?}")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint meta {key:?} = {raw:?} is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            let encoded = serde_json::to_string(v).expect("string serializes");
            header.push_str(&format!("meta {k} {encoded}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", dims.join(",")));
            offset += t.numel() * 4;
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            bytes.extend(t.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
            line_no += 1;
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(line_no, "unterminated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::parse(line_no, "header is not UTF-8"))?
                .to_string();
            *pos += end + 1;
            Ok((line_no, line))
        };

        let (n, first) = next_line(&mut pos)?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::parse(n, "missing container magic"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::parse(n, format!("unsupported format version {version}")));
        }
        let (n, kind_line) = next_line(&mut pos)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::parse(n, "expected kind line"))?
            .to_string();

        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let (n, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::parse(n, "meta line needs key and value"))?;
                let value: String = serde_json::from_str(value)
                    .map_err(|e| Error::parse(n, format!("bad meta value: {e}")))?;
                meta.insert(key.to_string(), value);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dims, offset] = parts[..] else {
                    return Err(Error::parse(n, "tensor line needs name, shape, offset"));
                };
                let shape = dims
                    .split(',')
                    .map(usize::from_str)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::parse(n, format!("bad shape {dims:?}")))?;
                let offset = offset
                    .parse()
                    .map_err(|_| Error::parse(n, format!("bad offset {offset:?}")))?;
                entries.push((name.to_string(), shape, offset));
            } else {
                return Err(Error::parse(n, format!("unrecognized header line {line:?}")));
            }
        }

        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let numel: usize = shape.iter().product();
            let end = offset + numel * 4;
            if end > payload.len() {
                return Err(Error::Config(format!(
                    "tensor {name} needs bytes {offset}..{end}, payload has {}",
                    payload.len()
                )));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
