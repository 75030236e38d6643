//! On-disk formats: the "DRT1" tensor container and P5 PGM image export.
//!
//! DRT1 layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4   magic "DRT1"
//! bytes 4..8   rank as u32
//! then         one u32 per extent
//! then         one byte: element width (4 = float32, 8 = float64)
//! then         row-major IEEE-754 payload, little-endian
//! ```
//!
//! Tensors are written as float64 by default; float32 files are accepted on
//! read and widened.

use std::fs;
use std::path::Path;

use crate::error::{DregError, Result};
use crate::tensor::Tensor;

pub const DRT_MAGIC: &[u8; 4] = b"DRT1";

/// On-disk element width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemWidth {
    F32,
    F64,
}

impl ElemWidth {
    fn code(self) -> u8 {
        match self {
            ElemWidth::F32 => 4,
            ElemWidth::F64 => 8,
        }
    }
}

/// Serializes a tensor into DRT1 bytes.
pub fn tensor_to_bytes(t: &Tensor, width: ElemWidth) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.shape().len() + t.numel() * 8);
    out.extend_from_slice(DRT_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(width.code());
    match width {
        ElemWidth::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        ElemWidth::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses DRT1 bytes; `origin` only labels errors.
pub fn tensor_from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |detail: &str| DregError::format(origin, detail);
    if bytes.len() < 9 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != DRT_MAGIC {
        return Err(fail("bad magic, expected \"DRT1\""));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut off = 8;
    if bytes.len() < off + 4 * rank + 1 {
        return Err(fail("truncated extent list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(e);
        off += 4;
    }
    let code = bytes[off];
    off += 1;
    let n: usize = shape.iter().product();
    let payload = &bytes[off..];
    let data = match code {
        4 => {
            if payload.len() != n * 4 {
                return Err(fail("payload length does not match extents"));
            }
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        8 => {
            if payload.len() != n * 8 {
                return Err(fail("payload length does not match extents"));
            }
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        other => return Err(fail(&format!("unknown element width code {other}"))),
    };
    Tensor::new(shape, data)
        .map_err(|_| fail("zero extent"))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor_with_width(path, t, ElemWidth::F64)
}

pub fn write_tensor_with_width(path: impl AsRef<Path>, t: &Tensor, width: ElemWidth) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor_to_bytes(t, width)).map_err(|e| DregError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DregError::io(path, e))?;
    tensor_from_bytes(&bytes, path)
}

/// Writes an 8-bit binary PGM (P5).  Values are mapped from `[lo, hi]` to
/// 0..=255 with clamping; a rank-2 `[H, W]` tensor is expected.
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let path = path.as_ref();
    if t.shape().len() != 2 {
        return Err(DregError::shape(
            "write_pgm",
            format!("expected [H, W], got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        let u = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0);
        u as u8
    }));
    fs::write(path, out).map_err(|e| DregError::io(path, e))
}

/// Tiles same-sized `[H, W]` tensors into a `rows x cols` grid with a 1-px
/// separator, for PGM contact sheets.
pub fn tile_grid(tiles: &[Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if tiles.is_empty() || tiles.len() != rows * cols {
        return Err(DregError::Invalid(format!(
            "tile_grid: {} tiles for a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (h, w) = (tiles[0].shape()[0], tiles[0].shape()[1]);
    for t in tiles {
        if t.shape() != [h, w] {
            return Err(DregError::shape("tile_grid", "tiles differ in size".to_string()));
        }
    }
    let gh = rows * h + rows - 1;
    let gw = cols * w + cols - 1;
    let mut grid = vec![1.0; gh * gw];
    for r in 0..rows {
        for c in 0..cols {
            let t = &tiles[r * cols + c];
            let oy = r * (h + 1);
            let ox = c * (w + 1);
            for y in 0..h {
                let src = &t.data()[y * w..(y + 1) * w];
                let dst = (oy + y) * gw + ox;
                grid[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![gh, gw], grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let bytes = tensor_to_bytes(&t, ElemWidth::F64);
        assert_eq!(&bytes[0..4], b"DRT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes[16], 8);
        assert_eq!(bytes.len(), 17 + 6 * 8);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("mem");
        assert!(tensor_from_bytes(b"XXXX", p).is_err());
        let t = Tensor::scalar(1.0);
        let mut bytes = tensor_to_bytes(&t, ElemWidth::F64);
        bytes[0] = b'X';
        assert!(tensor_from_bytes(&bytes, p).is_err());
        let bytes = tensor_to_bytes(&t, ElemWidth::F64);
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    }

    #[test]
    fn f32_files_are_widened() {
        let t = Tensor::from_vec(vec![0.5, -1.25, 3.0]);
        let bytes = tensor_to_bytes(&t, ElemWidth::F32);
        let back = tensor_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.data(), t.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn f64_roundtrip_is_bitwise(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(values);
            let bytes = tensor_to_bytes(&t, ElemWidth::F64);
            let back = tensor_from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
