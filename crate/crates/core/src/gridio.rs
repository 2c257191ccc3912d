//! Binary grid files: one JSON header line `{"h":H,"w":W,"dtype":"f64"}\n`
//! followed by `H·W` little-endian fp64 values in row-major order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Result, SdcError};
use crate::grid::Grid;

#[derive(Deserialize)]
struct Header {
    h: usize,
    w: usize,
    dtype: String,
}

pub fn write_grid<W: Write>(mut out: W, grid: &Grid) -> Result<()> {
    writeln!(out, "{{\"h\":{},\"w\":{},\"dtype\":\"f64\"}}", grid.height(), grid.width())?;
    let mut buf = Vec::with_capacity(grid.len() * 8);
    for v in grid.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: BufRead>(mut input: R) -> Result<Grid> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(SdcError::Format("missing grid header terminator".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| SdcError::Format(format!("bad grid header: {e}")))?;
    if header.dtype != "f64" {
        return Err(SdcError::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header
        .h
        .checked_mul(header.w)
        .filter(|&n| n > 0 && n <= (1 << 32))
        .ok_or_else(|| SdcError::Format(format!("bad grid size {}x{}", header.h, header.w)))?;
    let mut bytes = vec![0u8; n * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| SdcError::Format(format!("truncated grid payload: {e}")))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(SdcError::Format("trailing bytes after grid payload".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Grid::new(header.h, header.w, data)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let mut buf = Vec::with_capacity(grid.len() * 8 + 40);
    write_grid(&mut buf, grid)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let bytes = fs::read(path)?;
    read_grid(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let g = Grid::from_rows(&[[1.0, 2.0], [3.0, 4.5]]).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        let header = b"{\"h\":2,\"w\":2,\"dtype\":\"f64\"}\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 32);
        assert_eq!(&buf[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(read_grid(&b"{\"h\":1,\"w\":1,\"dtype\":\"f32\"}\n\0\0\0\0"[..]).is_err());
        assert!(read_grid(&b"{\"h\":1,\"w\":2,\"dtype\":\"f64\"}\n\0\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_grid(&b"{\"h\":1,\"w\":1"[..]).is_err());
        let mut extra = Vec::new();
        write_grid(&mut extra, &Grid::zeros(1, 1)).unwrap();
        extra.push(0);
        assert!(read_grid(extra.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1..8usize, w in 1..8usize, seed in prop::collection::vec(any::<f64>(), 64)) {
            let data: Vec<f64> = seed.into_iter().filter(|v| v.is_finite()).chain(std::iter::repeat(0.0)).take(h * w).collect();
            let g = Grid::new(h, w, data).unwrap();
            let mut buf = Vec::new();
            write_grid(&mut buf, &g).unwrap();
            let back = read_grid(buf.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), g.dims());
            for (a, b) in back.values().iter().zip(g.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let mut again = Vec::new();
            write_grid(&mut again, &back).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
