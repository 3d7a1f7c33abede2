//! Reading and writing the safetensors container layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::dtype::Dtype;
use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Descriptor of one tensor. `byte_offset` is absolute within the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRef {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorRef {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Container {
    pub path: PathBuf,
    pub tensors: Vec<TensorRef>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if file_len < 8 {
            return Err(Error::MalformedHeader(format!(
                "{}: file shorter than the 8-byte length prefix",
                path.display()
            )));
        }
        let mut prefix = [0u8; 8];
        file.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(prefix);
        if header_len > MAX_HEADER_LEN || 8 + header_len > file_len {
            return Err(Error::MalformedHeader(format!(
                "{}: header length {header_len} exceeds file size {file_len}",
                path.display()
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let data_len = file_len - 8 - header_len;
        let (tensors, metadata) = parse_header(&header, 8 + header_len, data_len)?;
        Ok(Container { path: path.to_path_buf(), tensors, metadata })
    }

    pub fn get(&self, name: &str) -> Option<&TensorRef> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn read_raw(&self, tensor: &TensorRef) -> Result<Vec<u8>> {
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(tensor.byte_offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; tensor.byte_length as usize];
        file.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    /// Every tensor with its payload, suitable for re-encoding.
    pub fn read_all(&self) -> Result<Vec<TensorData>> {
        self.tensors
            .iter()
            .map(|t| {
                Ok(TensorData {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    bytes: self.read_raw(t)?,
                })
            })
            .collect()
    }
}

/// Lists the tensors of a container without touching their data.
pub fn parse_container(path: impl AsRef<Path>) -> Result<Vec<TensorRef>> {
    Container::open(path).map(|c| c.tensors)
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn parse_header(
    bytes: &[u8],
    data_start: u64,
    data_len: u64,
) -> Result<(Vec<TensorRef>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("header is not UTF-8"))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| malformed(format!("header JSON: {e}")))?;
    let Value::Object(entries) = value else {
        return Err(malformed("header is not a JSON object"));
    };

    let mut tensors = Vec::with_capacity(entries.len());
    let mut metadata = BTreeMap::new();
    for (name, entry) in entries {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(malformed("__metadata__ is not an object"));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(malformed(format!("metadata value for {k} is not a string")));
                };
                metadata.insert(k, s);
            }
            continue;
        }
        tensors.push(parse_entry(&name, &entry, data_start, data_len)?);
    }
    tensors.sort_by_key(|t| t.byte_offset);
    Ok((tensors, metadata))
}

fn parse_entry(name: &str, entry: &Value, data_start: u64, data_len: u64) -> Result<TensorRef> {
    let obj = entry
        .as_object()
        .ok_or_else(|| malformed(format!("entry {name} is not an object")))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry {name} lacks a dtype")))?;
    let dtype = Dtype::parse(dtype_str)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(format!("entry {name} lacks a shape")))?
        .iter()
        .map(|d| d.as_u64().map(|x| x as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed(format!("entry {name} has a non-integer dimension")))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| malformed(format!("entry {name} has invalid data_offsets")))?;
    let (begin, end) = offsets;
    if end < begin || end > data_len {
        return Err(malformed(format!(
            "entry {name}: offsets [{begin}, {end}) outside data section of {data_len} bytes"
        )));
    }
    let numel = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| malformed(format!("entry {name}: shape overflows")))?;
    let expected = numel
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| malformed(format!("entry {name}: shape overflows")))?;
    if end - begin != expected {
        return Err(malformed(format!(
            "entry {name}: {} bytes declared but shape {:?} of {} needs {expected}",
            end - begin,
            shape,
            dtype.as_str()
        )));
    }
    Ok(TensorRef {
        name: name.to_string(),
        dtype,
        shape,
        byte_offset: data_start + begin,
        byte_length: expected,
    })
}

/// Owned tensor payload for the writer.
#[derive(Clone, Debug)]
pub struct TensorData {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Position of a dtype in the reference layout, widest first.
fn layout_rank(dtype: Dtype) -> u8 {
    match dtype {
        Dtype::F64 => 0,
        Dtype::F32 => 1,
        Dtype::BF16 => 2,
        Dtype::F16 => 3,
    }
}

/// Serializes tensors into container bytes. Tensors are laid out widest
/// dtype first, then by name; header entries follow the layout and the
/// header is space-padded to an 8-byte boundary.
pub fn encode_container(
    tensors: &[TensorData],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut order: Vec<&TensorData> = tensors.iter().collect();
    order.sort_by(|a, b| {
        layout_rank(a.dtype)
            .cmp(&layout_rank(b.dtype))
            .then_with(|| a.name.cmp(&b.name))
    });

    let mut entries = Vec::with_capacity(order.len() + 1);
    if !metadata.is_empty() {
        entries.push(format!("{}:{}", json!(METADATA_KEY), json!(metadata)));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut offset = 0usize;
    for t in &order {
        let expected = t.shape.iter().product::<usize>() * t.dtype.width();
        if expected != t.bytes.len() {
            return Err(Error::ShapeMismatch {
                what: format!("payload of {}", t.name),
                expected: vec![expected],
                found: vec![t.bytes.len()],
            });
        }
        if t.name == METADATA_KEY || !seen.insert(t.name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {}", t.name)));
        }
        entries.push(format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{},{}]}}",
            json!(t.name),
            t.dtype.as_str(),
            json!(t.shape),
            offset,
            offset + t.bytes.len()
        ));
        offset += t.bytes.len();
    }
    let mut header_bytes = format!("{{{}}}", entries.join(",")).into_bytes();
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in order {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}

pub fn write_container(
    path: impl AsRef<Path>,
    tensors: &[TensorData],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors, metadata)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::dtype::encode_values;

    fn minimal() -> Vec<u8> {
        let t = TensorData {
            name: "w".into(),
            dtype: Dtype::F32,
            shape: vec![2, 2],
            bytes: encode_values(&[1.0, 2.0, 3.0, 4.0], Dtype::F32),
        };
        encode_container(&[t], &BTreeMap::new()).unwrap()
    }

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn one_f32_tensor() {
        let f = write_tmp(&minimal());
        let refs = parse_container(f.path()).unwrap();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].shape, vec![2, 2]);
        assert_eq!(refs[0].byte_length, 16);
        assert_eq!(refs[0].dtype, Dtype::F32);
    }

    #[test]
    fn header_is_aligned() {
        let bytes = minimal();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn empty_container() {
        let bytes = encode_container(&[], &BTreeMap::new()).unwrap();
        let f = write_tmp(&bytes);
        assert!(parse_container(f.path()).unwrap().is_empty());
    }

    #[test]
    fn edited_offsets_are_rejected() {
        let bytes = minimal();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        let edited = header.replace("[0,16]", "[0,12]");
        assert_ne!(edited, header);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[8 + n..]);
        let f = write_tmp(&out);
        assert!(matches!(parse_container(f.path()), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn truncated_prefix() {
        let f = write_tmp(&[1, 2, 3]);
        assert!(matches!(parse_container(f.path()), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn oversized_length_prefix() {
        let mut bytes = minimal();
        bytes[..8].copy_from_slice(&10_000u64.to_le_bytes());
        let f = write_tmp(&bytes);
        assert!(matches!(parse_container(f.path()), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn garbage_json() {
        let mut bytes = 8u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{not js}");
        let f = write_tmp(&bytes);
        assert!(matches!(parse_container(f.path()), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn integer_dtype_is_unsupported() {
        let header = br#"{"ids":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        let f = write_tmp(&bytes);
        assert!(matches!(parse_container(f.path()), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn metadata_round_trip() {
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        let f = write_tmp(&encode_container(&[], &meta).unwrap());
        let c = Container::open(f.path()).unwrap();
        assert_eq!(c.metadata, meta);
    }

    #[test]
    fn read_raw_returns_payload() {
        let f = write_tmp(&minimal());
        let c = Container::open(f.path()).unwrap();
        let raw = c.read_raw(&c.tensors[0]).unwrap();
        assert_eq!(raw, encode_values(&[1.0, 2.0, 3.0, 4.0], Dtype::F32));
    }
}
