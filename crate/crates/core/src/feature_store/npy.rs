//! Minimal NPY v1.0 reader/writer: little-endian `<f4`, `<f8`, `<i4`, `<i8`, C order.
//!
//! See <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.
//! Version 2.0 headers (4-byte length) are accepted on read; writes are always 1.0.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
    I4,
    I8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
            Dtype::I4 => "<i4",
            Dtype::I8 => "<i8",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "<f4" => Ok(Dtype::F4),
            "<f8" => Ok(Dtype::F8),
            "<i4" => Ok(Dtype::I4),
            "<i8" => Ok(Dtype::I8),
            other => Err(Error::Format(format!("unsupported dtype descriptor {other:?}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F4 | Dtype::I4 => 4,
            Dtype::F8 | Dtype::I8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: NpyData::F32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: NpyData::F64(data),
        }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        Self {
            shape,
            data: NpyData::I64(data),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            NpyData::F32(_) => Dtype::F4,
            NpyData::F64(_) => Dtype::F8,
            NpyData::I32(_) => Dtype::I4,
            NpyData::I64(_) => Dtype::I8,
        }
    }

    /// Values as `f64` (exact for every supported dtype within 2^53).
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            NpyData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            NpyData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn header_string(header: &Header) -> String {
    let shape = match header.shape.as_slice() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut s = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        header.dtype.descr(),
        shape
    );
    // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of ALIGN
    let unpadded = 10 + s.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    s.extend(std::iter::repeat_n(' ', pad));
    s.push('\n');
    s
}

pub fn encode(array: &NpyArray) -> Result<Vec<u8>> {
    let header = Header {
        dtype: array.dtype(),
        shape: array.shape.clone(),
    };
    let n = header.len();
    let actual = match &array.data {
        NpyData::F32(v) => v.len(),
        NpyData::F64(v) => v.len(),
        NpyData::I32(v) => v.len(),
        NpyData::I64(v) => v.len(),
    };
    if n != actual {
        return Err(Error::Shape(format!(
            "shape {:?} holds {n} values but data has {actual}",
            array.shape
        )));
    }
    let dict = header_string(&header);
    let mut out = Vec::with_capacity(10 + dict.len() + n * header.dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &array.data {
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn write(path: &Path, array: &NpyArray) -> Result<()> {
    let bytes = encode(array)?;
    super::atomic_write(path, &bytes)
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}'");
    let start = dict
        .find(&needle)
        .ok_or_else(|| Error::Format(format!("header missing key {key}")))?;
    let rest = dict[start + needle.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("malformed entry for {key}")))?;
    Ok(rest.trim_start())
}

fn parse_dict(dict: &str) -> Result<Header> {
    let dict = dict.trim();
    if !(dict.starts_with('{') && dict.ends_with('}')) {
        return Err(Error::Format("header is not a dict literal".into()));
    }
    let descr = dict_value(dict, "descr")?;
    let quote = descr
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format("descr is not a string".into()))?;
    let body = &descr[1..];
    let end = body
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated descr".into()))?;
    let dtype = Dtype::parse(&body[..end])?;

    let fortran = dict_value(dict, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Format("fortran_order arrays are not supported".into()));
    } else if !fortran.starts_with("False") {
        return Err(Error::Format("fortran_order is not a bool".into()));
    }

    let shape = dict_value(dict, "shape")?;
    let shape = shape
        .strip_prefix('(')
        .and_then(|s| s.find(')').map(|e| &s[..e]))
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let shape = shape
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header { dtype, shape })
}

fn read_header_from(reader: &mut impl Read) -> Result<Header> {
    let mut prefix = [0u8; 8];
    reader
        .read_exact(&mut prefix)
        .map_err(|_| Error::Format("file too short for an NPY header".into()))?;
    if &prefix[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let header_len = match prefix[6] {
        1 => {
            let mut b = [0u8; 2];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::Format("truncated header".into()))?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::Format("truncated header".into()))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Format(format!("unsupported NPY version {v}.{}", prefix[7]))),
    };
    let mut dict = vec![0u8; header_len];
    reader
        .read_exact(&mut dict)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let dict = std::str::from_utf8(&dict).map_err(|_| Error::Format("header is not text".into()))?;
    parse_dict(dict)
}

/// Reads only the header, for cheap shape checks.
pub fn read_header(path: &Path) -> Result<Header> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(&mut BufReader::new(file))
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    let mut cursor = bytes;
    let header = read_header_from(&mut cursor)?;
    let n = header.len();
    let need = n * header.dtype.size();
    if cursor.len() != need {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {need}",
            cursor.len(),
            header.shape
        )));
    }
    let data = match header.dtype {
        Dtype::F4 => NpyData::F32(
            cursor
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F8 => NpyData::F64(
            cursor
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I4 => NpyData::I32(
            cursor
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I8 => NpyData::I64(
            cursor
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
