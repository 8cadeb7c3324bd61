//! Minimal reader/writer for the NumPy `.npy` format.
//!
//! Only C-order arrays of little-endian `f4`/`f8` and single-byte `u1`/`b1`
//! are supported, which covers every array a container or bank holds.
//! Files are written as version 1.0; versions 2.0 and 3.0 are accepted on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
    Bool,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "<f8" => Ok(Dtype::F64),
            "|u1" | "<u1" => Ok(Dtype::U8),
            "|b1" => Ok(Dtype::Bool),
            other => Err(Error::UnsupportedDtype {
                found: other.to_string(),
                expected: "<f4, <f8, |u1 or |b1",
            }),
        }
    }

    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
            Dtype::U8 => "|u1",
            Dtype::Bool => "|b1",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 | Dtype::Bool => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Renders the header dict exactly as `numpy.lib.format` does for v1.0.
    fn dict_string(&self) -> String {
        let shape = match self.shape.len() {
            0 => "()".to_string(),
            1 => format!("({},)", self.shape[0]),
            _ => {
                let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
                format!("({})", dims.join(", "))
            }
        };
        format!(
            "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
            self.dtype.descr(),
            if self.fortran_order { "True" } else { "False" },
            shape
        )
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dict = self.dict_string();
        // magic(6) + version(2) + u16 length(2) + dict + padding + '\n'
        let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
        let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
        let header_len = dict.len() + padding + 1;
        w.write_all(MAGIC)?;
        w.write_all(&[1, 0])?;
        w.write_all(&(header_len as u16).to_le_bytes())?;
        w.write_all(dict.as_bytes())?;
        w.write_all(&vec![b' '; padding])?;
        w.write_all(b"\n")
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Npy("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Npy("bad magic string".into()));
        }
        let mut version = [0u8; 2];
        r.read_exact(&mut version)
            .map_err(|_| Error::Npy("truncated version".into()))?;
        let header_len = match version[0] {
            1 => {
                let mut b = [0u8; 2];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Npy("truncated header length".into()))?;
                u16::from_le_bytes(b) as usize
            }
            2 | 3 => {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| Error::Npy("truncated header length".into()))?;
                u32::from_le_bytes(b) as usize
            }
            v => return Err(Error::Npy(format!("unsupported npy version {v}.{}", version[1]))),
        };
        let mut raw = vec![0u8; header_len];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Npy("truncated header".into()))?;
        let text = std::str::from_utf8(&raw).map_err(|_| Error::Npy("header is not utf-8".into()))?;
        parse_dict(text)
    }
}

fn parse_dict(text: &str) -> Result<Header> {
    let bad = |m: &str| Error::Npy(format!("{m} in header {text:?}"));
    let descr = dict_value(text, "descr").ok_or_else(|| bad("missing 'descr'"))?;
    let descr = descr
        .trim()
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| bad("unquoted 'descr'"))?;
    let fortran = dict_value(text, "fortran_order").ok_or_else(|| bad("missing 'fortran_order'"))?;
    let fortran_order = if fortran.trim_start().starts_with("True") {
        true
    } else if fortran.trim_start().starts_with("False") {
        false
    } else {
        return Err(bad("bad 'fortran_order'"));
    };
    let shape = dict_value(text, "shape").ok_or_else(|| bad("missing 'shape'"))?;
    let shape = shape.trim_start();
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("bad 'shape'"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("non-integer dimension")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        dtype: Dtype::parse(descr)?,
        fortran_order,
        shape,
    })
}

/// Returns the text following `'key':` in a Python dict literal.
fn dict_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}'");
    let start = text.find(&pat)? + pat.len();
    let rest = text[start..].trim_start();
    rest.strip_prefix(':')
}

/// A decoded array with its dtype-specific payload.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

pub fn read_header(path: &Path) -> Result<Header> {
    let file = open(path)?;
    Header::read(&mut BufReader::new(file))
}

pub fn read(path: &Path) -> Result<(Header, NpyData)> {
    let file = open(path)?;
    let mut r = BufReader::new(file);
    let header = Header::read(&mut r)?;
    if header.fortran_order {
        return Err(Error::Npy(format!("{}: fortran order not supported", path.display())));
    }
    let n = header.len();
    let mut bytes = vec![0u8; n * header.dtype.size()];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Npy(format!("{}: payload shorter than header shape", path.display())))?;
    let data = match header.dtype {
        Dtype::F32 => NpyData::F32(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        Dtype::F64 => NpyData::F64(
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 | Dtype::Bool => NpyData::U8(bytes),
    };
    Ok((header, data))
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    match read(path)? {
        (h, NpyData::F32(v)) => Ok((h.shape, v)),
        (h, _) => Err(Error::UnsupportedDtype {
            found: h.dtype.descr().into(),
            expected: "<f4",
        }),
    }
}

/// Reads a float array of either precision, widening to `f64`.
pub fn read_float(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    match read(path)? {
        (h, NpyData::F32(v)) => Ok((h.shape, v.into_iter().map(f64::from).collect())),
        (h, NpyData::F64(v)) => Ok((h.shape, v)),
        (h, _) => Err(Error::UnsupportedDtype {
            found: h.dtype.descr().into(),
            expected: "<f4 or <f8",
        }),
    }
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    match read(path)? {
        (h, NpyData::U8(v)) => Ok((h.shape, v)),
        (h, _) => Err(Error::UnsupportedDtype {
            found: h.dtype.descr().into(),
            expected: "|u1",
        }),
    }
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    write_raw(path, Dtype::F32, shape, data.len(), |w| {
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn write_f64(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    write_raw(path, Dtype::F64, shape, data.len(), |w| {
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    write_raw(path, Dtype::U8, shape, data.len(), |w| w.write_all(data))
}

fn write_raw(
    path: &Path,
    dtype: Dtype,
    shape: &[usize],
    len: usize,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::ShapeMismatch {
            what: format!("npy payload {}", path.display()),
            expected: shape.to_vec(),
            found: vec![len],
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        dtype,
        fortran_order: false,
        shape: shape.to_vec(),
    };
    header
        .write(&mut w)
        .and_then(|_| body(&mut w))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArray(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_64_byte_aligned_and_numpy_shaped() {
        for shape in [vec![], vec![7], vec![3, 4], vec![64, 10, 10]] {
            let h = Header {
                dtype: Dtype::F32,
                fortran_order: false,
                shape: shape.clone(),
            };
            let mut buf = Vec::new();
            h.write(&mut buf).unwrap();
            assert_eq!(buf.len() % 64, 0);
            assert_eq!(*buf.last().unwrap(), b'\n');
            assert_eq!(Header::read(&mut buf.as_slice()).unwrap(), h);
        }
        let h = Header {
            dtype: Dtype::U8,
            fortran_order: false,
            shape: vec![5],
        };
        assert_eq!(h.dict_string(), "{'descr': '|u1', 'fortran_order': False, 'shape': (5,), }");
    }

    #[test]
    fn parses_numpy_written_header() {
        // Verbatim output of numpy 1.26 for np.zeros((2, 3), '<f8')
        let text = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }          ";
        let h = parse_dict(text).unwrap();
        assert_eq!(h.dtype, Dtype::F64);
        assert_eq!(h.shape, vec![2, 3]);
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let err = parse_dict("{'descr': '>i8', 'fortran_order': False, 'shape': (2,), }").unwrap_err();
        assert!(matches!(err, Error::UnsupportedDtype { .. }));
    }

    #[test]
    fn missing_file_is_missing_array() {
        let err = read_header(Path::new("/nonexistent/a.npy")).unwrap_err();
        assert!(matches!(err, Error::MissingArray(_)));
    }

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let data = vec![0.1f32, -0.0, f32::NAN, f32::MIN_POSITIVE, 1e30, 3.5];
        write_f32(&p, &[2, 3], &data).unwrap();
        let (shape, back) = read_f32(&p).unwrap();
        assert_eq!(shape, vec![2, 3]);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&data));
    }

    #[test]
    fn truncated_payload_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        write_f32(&p, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_f32(&p), Err(Error::Npy(_))));
    }
}
