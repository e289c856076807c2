//! Minimal NPY (v1.0) reader/writer.
//!
//! Corpus arrays, masks and checkpoint parameters are stored in this format:
//! a self-describing binary container with shape/dtype header, readable by
//! numpy. Only C-order arrays and the dtypes used by the crate are supported.

use crate::error::{Error, Result};
use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

pub trait Element: Copy + Default {
    const DESCR: &'static str;
    const SIZE: usize;
    fn to_bytes(self, out: &mut Vec<u8>);
    fn from_bytes(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $descr:expr) => {
        impl Element for $t {
            const DESCR: &'static str = $descr;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn to_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn from_bytes(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
        }
    };
}

impl_element!(f64, "<f8");
impl_element!(f32, "<f4");
impl_element!(i64, "<i8");

impl Element for u8 {
    const DESCR: &'static str = "|u1";
    const SIZE: usize = 1;
    fn to_bytes(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn from_bytes(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

fn header_string(descr: &str, shape: &[usize]) -> String {
    let shape_str = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}")
}

pub fn write_npy_to<W: Write, T: Element, S: Data<Elem = T>, D: Dimension>(
    writer: &mut W,
    array: &ArrayBase<S, D>,
) -> Result<()> {
    let mut header = header_string(T::DESCR, array.shape()).into_bytes();
    // Pad so that data start is 64-byte aligned; header ends with '\n'.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');

    writer.write_all(MAGIC)?;
    writer.write_all(&[0x01, 0x00])?;
    writer.write_all(&(header.len() as u16).to_le_bytes())?;
    writer.write_all(&header)?;

    let mut buf = Vec::with_capacity(array.len() * T::SIZE);
    for &v in array.iter() {
        v.to_bytes(&mut buf);
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub fn read_npy_from<R: Read, T: Element>(reader: &mut R) -> Result<ArrayD<T>> {
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::ArrayFormat("bad magic".into()));
    }
    let mut ver = [0u8; 2];
    reader.read_exact(&mut ver)?;
    let header_len = match ver[0] {
        1 => {
            let mut len = [0u8; 2];
            reader.read_exact(&mut len)?;
            u16::from_le_bytes(len) as usize
        }
        2 | 3 => {
            let mut len = [0u8; 4];
            reader.read_exact(&mut len)?;
            u32::from_le_bytes(len) as usize
        }
        v => return Err(Error::ArrayFormat(format!("unsupported npy version {v}"))),
    };
    let mut header = vec![0u8; header_len];
    reader.read_exact(&mut header)?;
    let header = String::from_utf8_lossy(&header);

    let descr = extract_quoted(&header, "'descr'")
        .ok_or_else(|| Error::ArrayFormat("missing descr".into()))?;
    if descr != T::DESCR {
        return Err(Error::ArrayFormat(format!(
            "dtype mismatch: file has {descr}, expected {}",
            T::DESCR
        )));
    }
    if header.contains("'fortran_order': True") {
        return Err(Error::ArrayFormat("fortran order not supported".into()));
    }
    let shape = extract_shape(&header)?;

    let count: usize = shape.iter().product();
    let mut data = vec![0u8; count * T::SIZE];
    reader.read_exact(&mut data)?;
    let values: Vec<T> = data.chunks_exact(T::SIZE).map(T::from_bytes).collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values)
        .map_err(|e| Error::ArrayFormat(format!("shape error: {e}")))
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let at = header.find(key)? + key.len();
    let rest = &header[at..];
    let start = rest.find('\'')? + 1;
    let end = rest[start..].find('\'')? + start;
    Some(rest[start..end].to_string())
}

fn extract_shape(header: &str) -> Result<Vec<usize>> {
    let at = header
        .find("'shape'")
        .ok_or_else(|| Error::ArrayFormat("missing shape".into()))?;
    let rest = &header[at..];
    let open = rest
        .find('(')
        .ok_or_else(|| Error::ArrayFormat("missing shape tuple".into()))?;
    let close = rest[open..]
        .find(')')
        .ok_or_else(|| Error::ArrayFormat("unterminated shape tuple".into()))?
        + open;
    rest[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::ArrayFormat(format!("bad shape entry '{s}': {e}")))
        })
        .collect()
}

pub fn write_npy<T: Element, S: Data<Elem = T>, D: Dimension>(
    path: impl AsRef<Path>,
    array: &ArrayBase<S, D>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_npy_to(&mut w, array)?;
    w.flush()?;
    Ok(())
}

pub fn read_npy<T: Element>(path: impl AsRef<Path>) -> Result<ArrayD<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_npy_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn roundtrip_f64() {
        let a = arr2(&[[1.0f64, -2.5, 3.25], [0.0, f64::MIN_POSITIVE, 1e300]]);
        let mut buf = Vec::new();
        write_npy_to(&mut buf, &a).unwrap();
        let b = read_npy_from::<_, f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(b.shape(), &[2, 3]);
        assert_eq!(a.into_dyn(), b);
    }

    #[test]
    fn roundtrip_u8_3d() {
        let a = Array3::<u8>::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as u8);
        let mut buf = Vec::new();
        write_npy_to(&mut buf, &a).unwrap();
        let b = read_npy_from::<_, u8>(&mut buf.as_slice()).unwrap();
        assert_eq!(a.into_dyn(), b);
    }

    #[test]
    fn dtype_mismatch_is_error() {
        let a = arr2(&[[1.0f64]]);
        let mut buf = Vec::new();
        write_npy_to(&mut buf, &a).unwrap();
        assert!(read_npy_from::<_, u8>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn data_offset_is_aligned() {
        let a = arr2(&[[1.0f64]]);
        let mut buf = Vec::new();
        write_npy_to(&mut buf, &a).unwrap();
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
    }

    #[test]
    fn one_dimensional_shape_parses() {
        let a = ndarray::arr1(&[1.0f64, 2.0]);
        let mut buf = Vec::new();
        write_npy_to(&mut buf, &a).unwrap();
        let b = read_npy_from::<_, f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(b.shape(), &[2]);
    }
}
