//! FSTN binary tensor files.
//!
//! Layout: `b"FSTN"`, version byte (1), dtype byte (0=f32, 1=f64, 2=u8),
//! rank byte, one reserved zero byte, `rank` little-endian u32 extents,
//! then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::tensor::{AnyTensor, DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSTN";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(u8::try_from(t.rank()).expect("rank fits in a byte"));
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

fn format_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

fn decode_payload<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let sz = T::DTYPE.size();
    let data = payload.chunks_exact(sz).map(T::get_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err("magic", "expected \"FSTN\""));
    }
    if bytes.len() < HEADER {
        return Err(format_err("header", "truncated header"));
    }
    if bytes[4] != VERSION {
        return Err(format_err("version", format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_byte(bytes[5])
        .ok_or_else(|| format_err("dtype", format!("unknown dtype byte {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(format_err("reserved", "reserved byte must be zero"));
    }
    let dims_end = HEADER + 4 * rank;
    if bytes.len() < dims_end {
        return Err(format_err("shape", "truncated extents"));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    let want = count * dtype.size();
    if payload.len() != want {
        return Err(format_err(
            "payload",
            format!("expected {} bytes, found {}", want, payload.len()),
        ));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(shape, payload)?),
        DType::U8 => AnyTensor::U8(decode_payload(shape, payload)?),
    })
}

pub fn tensor_write<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a tensor and converts it to `f32` (u8 rescaled to [0,1]).
pub fn tensor_read_f32(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    Ok(tensor_read(path)?.into_f32())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_2x3_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fstn");
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        tensor_write(&p, &t).unwrap();
        let back = tensor_read(&p).unwrap();
        assert_eq!(back, AnyTensor::F32(t.clone()));
        assert_eq!(fs::read(&p).unwrap(), encode(&t));
    }

    #[test]
    fn rank0_scalar() {
        let t = Tensor::scalar(42.5f64);
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 8 + 8);
        assert_eq!(decode(&bytes).unwrap(), AnyTensor::F64(t));
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1u8, 255]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], &[b'F', b'S', b'T', b'N', 1, 2, 2, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..], &[1, 255]);
    }

    #[test]
    fn bad_magic_names_field() {
        let mut b = encode(&Tensor::scalar(1.0f32));
        b[..4].copy_from_slice(b"XXXX");
        match decode(&b) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_version_and_truncation() {
        let mut b = encode(&Tensor::<f32>::zeros(&[4]));
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { field: "version", .. })));
        let b = encode(&Tensor::<f32>::zeros(&[4]));
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(Error::Format { field: "payload", .. })
        ));
        assert!(matches!(decode(&b[..10]), Err(Error::Format { field: "shape", .. })));
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..4, 0..=4)
    }

    proptest! {
        #[test]
        fn round_trip_all_dtypes(shape in shape_strategy(), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let f: Vec<f32> = (0..n).map(|i| ((seed as f32) * 1e-9 + i as f32).sin()).collect();
            let d: Vec<f64> = f.iter().map(|&v| v as f64 * 1.000_000_1).collect();
            let u: Vec<u8> = (0..n).map(|i| (seed as usize + i) as u8).collect();
            let tf = Tensor::new(shape.clone(), f).unwrap();
            let td = Tensor::new(shape.clone(), d).unwrap();
            let tu = Tensor::new(shape, u).unwrap();
            prop_assert_eq!(decode(&encode(&tf)).unwrap(), AnyTensor::F32(tf));
            prop_assert_eq!(decode(&encode(&td)).unwrap(), AnyTensor::F64(td));
            prop_assert_eq!(decode(&encode(&tu)).unwrap(), AnyTensor::U8(tu));
        }
    }
}
