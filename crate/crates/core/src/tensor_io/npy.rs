//! Reading and writing the numpy `.npy` v1.0 format.
//!
//! Only the subset needed to carry activation tensors and embeddings is
//! supported: little-endian `f4`/`f8`, C order, and 1-D or 3-D shapes. Anything
//! else is rejected with an explicit error instead of being reinterpreted.

use thiserror::Error;

/// The npy magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const PREAMBLE_LEN: usize = 10;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NpyError {
    #[error("not an npy stream (bad magic)")]
    BadMagic,
    #[error("unsupported npy version {major}.{minor}")]
    UnsupportedVersion { major: u8, minor: u8 },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrderUnsupported,
    #[error("malformed npy header: {0}")]
    HeaderSyntax(String),
    #[error("payload truncated: shape needs {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("non-finite element at flat index {0}")]
    NonFiniteElement(usize),
    #[error("invalid array: {0}")]
    InvalidArray(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match self {
            ArrayData::F32(v) => v.iter().position(|x| !x.is_finite()),
            ArrayData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }
}

/// A validated array: 1-D or 3-D, C order, finite float elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    shape: Vec<usize>,
    data: ArrayData,
}

impl ArrayFile {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self, NpyError> {
        if shape.len() != 1 && shape.len() != 3 {
            return Err(NpyError::InvalidArray(format!(
                "expected 1 or 3 dimensions, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(NpyError::InvalidArray(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let count = element_count(&shape)
            .ok_or_else(|| NpyError::InvalidArray(format!("shape {shape:?} overflows")))?;
        if count != data.len() {
            return Err(NpyError::InvalidArray(format!(
                "shape {shape:?} needs {count} elements, data has {}",
                data.len()
            )));
        }
        if let Some(i) = data.first_non_finite() {
            return Err(NpyError::NonFiniteElement(i));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NpyError> {
        Self::new(shape, ArrayData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NpyError> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    /// Elements widened to `f64` (lossless for both dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Dtype and shape from an npy header, plus the offset of the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload_offset: usize,
}

/// Parses only the preamble and header dictionary.
pub fn read_header(bytes: &[u8]) -> Result<NpyHeader, NpyError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(NpyError::HeaderSyntax(
            "stream ends inside the preamble".into(),
        ));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion { major, minor });
    }
    let header_len = usize::from(u16::from_le_bytes([bytes[8], bytes[9]]));
    let payload_offset = PREAMBLE_LEN + header_len;
    if bytes.len() < payload_offset {
        return Err(NpyError::HeaderSyntax(format!(
            "header declares {header_len} bytes, stream has {}",
            bytes.len() - PREAMBLE_LEN
        )));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_offset])
        .map_err(|_| NpyError::HeaderSyntax("header is not ASCII".into()))?;
    let raw = HeaderParser::new(text).parse()?;

    let dtype = match raw.descr.as_str() {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => return Err(NpyError::UnsupportedDtype(other.to_string())),
    };
    if raw.fortran_order {
        return Err(NpyError::FortranOrderUnsupported);
    }
    if raw.shape.len() != 1 && raw.shape.len() != 3 {
        return Err(NpyError::HeaderSyntax(format!(
            "shape must have 1 or 3 dimensions, got {}",
            raw.shape.len()
        )));
    }
    if raw.shape.contains(&0) {
        return Err(NpyError::HeaderSyntax("zero-sized dimension".into()));
    }
    if element_count(&raw.shape).is_none() {
        return Err(NpyError::HeaderSyntax("shape overflows".into()));
    }
    Ok(NpyHeader {
        dtype,
        shape: raw.shape,
        payload_offset,
    })
}

/// Parses a complete npy v1.0 stream. Bytes after the payload are ignored.
pub fn read_array(bytes: &[u8]) -> Result<ArrayFile, NpyError> {
    let header = read_header(bytes)?;
    let payload = &bytes[header.payload_offset..];
    let count = element_count(&header.shape).expect("checked in read_header");
    let expected = count.saturating_mul(header.dtype.size());
    if payload.len() < expected {
        return Err(NpyError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    let payload = &payload[..expected];
    let data = match header.dtype {
        Dtype::F32 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    ArrayFile::new(header.shape, data)
}

/// Serializes to npy v1.0, little-endian, C order, header padded to 64 bytes.
pub fn write_array(a: &ArrayFile) -> Vec<u8> {
    let shape = match a.shape.as_slice() {
        [d] => format!("({d},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        a.dtype().descr()
    );
    // +1 for the terminating newline
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', padding));
    dict.push('\n');

    let header_len = u16::try_from(dict.len()).expect("npy header exceeds 64 KiB");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len() + a.data.len() * a.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &a.data {
        ArrayData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

struct RawHeader {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Recursive-descent parser for the restricted header dictionary.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    fn err<T>(&self, what: &str) -> Result<T, NpyError> {
        Err(NpyError::HeaderSyntax(format!(
            "{what} at byte {}",
            self.pos
        )))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(&format!("expected '{}'", c as char))
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        self.skip_ws();
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return self.err("expected a quoted string"),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == quote {
                let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        self.err("unterminated string")
    }

    fn boolean(&mut self) -> Result<bool, NpyError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            self.err("expected True or False")
        }
    }

    fn integer(&mut self) -> Result<usize, NpyError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected an integer");
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.err("integer out of range"), Ok)
    }

    fn tuple(&mut self) -> Result<Vec<usize>, NpyError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(b')') {
                self.pos += 1;
                return Ok(dims);
            }
            dims.push(self.integer()?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {}
                _ => return self.err("expected ',' or ')' in shape"),
            }
        }
    }

    fn parse(mut self) -> Result<RawHeader, NpyError> {
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        self.expect(b'{')?;
        loop {
            self.skip_ws();
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            let duplicate = match key.as_str() {
                "descr" => descr.replace(self.string()?).is_some(),
                "fortran_order" => fortran_order.replace(self.boolean()?).is_some(),
                "shape" => shape.replace(self.tuple()?).is_some(),
                _ => return self.err(&format!("unknown key {key:?}")),
            };
            if duplicate {
                return self.err(&format!("duplicate key {key:?}"));
            }
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return self.err("expected ',' or '}'"),
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("trailing characters after dictionary");
        }

        match (descr, fortran_order, shape) {
            (Some(descr), Some(fortran_order), Some(shape)) => Ok(RawHeader {
                descr,
                fortran_order,
                shape,
            }),
            _ => Err(NpyError::HeaderSyntax(
                "header must define descr, fortran_order and shape".into(),
            )),
        }
    }
}
