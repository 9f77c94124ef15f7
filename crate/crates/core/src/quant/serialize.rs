//! Binary format for quantized tensors: an 8-byte little-endian header
//! length, a JSON header, the codes as signed bytes, then the scales as
//! little-endian f32.

use super::{max_code, QuantError, QuantizedTensor};
use crate::tensor::{Granularity, GroupLayout};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    bits: u8,
    exponent: f64,
    granularity: String,
    group_size: Option<usize>,
}

fn granularity_to_parts(g: Granularity) -> (String, Option<usize>) {
    match g {
        Granularity::PerTensor => ("per-tensor".into(), None),
        Granularity::PerChannel => ("per-channel".into(), None),
        Granularity::PerGroup(n) => ("per-group".into(), Some(n)),
    }
}

fn granularity_from_parts(name: &str, group: Option<usize>) -> Result<Granularity, QuantError> {
    match (name, group) {
        ("per-tensor", None) => Ok(Granularity::PerTensor),
        ("per-channel", None) => Ok(Granularity::PerChannel),
        ("per-group", Some(n)) => Ok(Granularity::PerGroup(n)),
        _ => Err(QuantError::Header(format!(
            "granularity {name:?} with group_size {group:?}"
        ))),
    }
}

pub fn write_quantized(q: &QuantizedTensor, path: &Path) -> Result<(), QuantError> {
    let (granularity, group_size) = granularity_to_parts(q.granularity());
    let header = Header {
        shape: q.shape().to_vec(),
        bits: q.bits(),
        exponent: q.exponent(),
        granularity,
        group_size,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| QuantError::Header(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let code_bytes: Vec<u8> = q.codes().iter().map(|&c| c as u8).collect();
    f.write_all(&code_bytes)?;
    for &s in q.scales() {
        f.write_all(&(s as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_quantized(path: &Path) -> Result<QuantizedTensor, QuantError> {
    let mut f = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| QuantError::Header(e.to_string()))?;
    if !(2..=8).contains(&header.bits) {
        return Err(QuantError::Bits(header.bits));
    }
    let granularity = granularity_from_parts(&header.granularity, header.group_size)?;
    let layout = GroupLayout::new(&header.shape, granularity)?;
    let numel: usize = header.shape.iter().product();

    let mut code_bytes = vec![0u8; numel];
    f.read_exact(&mut code_bytes)?;
    let b = max_code(header.bits) as i8;
    let codes: Vec<i8> = code_bytes.iter().map(|&c| c as i8).collect();
    if let Some(bad) = codes.iter().find(|&&c| c < -b || c > b) {
        return Err(QuantError::Header(format!(
            "code {bad} outside symmetric range for {} bits",
            header.bits
        )));
    }

    let mut scales = Vec::with_capacity(layout.num_groups());
    for _ in 0..layout.num_groups() {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)?;
        let s = f32::from_le_bytes(buf);
        if !(s.is_finite() && s > 0.0) {
            return Err(QuantError::Header(format!("non-positive scale {s}")));
        }
        scales.push(s as f64);
    }

    Ok(QuantizedTensor {
        codes,
        shape: header.shape,
        scales,
        exponent: header.exponent,
        bits: header.bits,
        granularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, QuantConfig};
    use crate::tensor::Tensor;

    #[test]
    fn file_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::from_vec((0..256).map(|i| (i as f32 - 128.0) / 17.0).collect()).unwrap();
        let cfg = QuantConfig::new(4, 0.5, Granularity::PerGroup(128)).unwrap();
        let q = quantize(&x, &cfg).unwrap();

        let p1 = dir.path().join("a.qt");
        let p2 = dir.path().join("b.qt");
        write_quantized(&q, &p1).unwrap();
        let loaded = read_quantized(&p1).unwrap();
        assert_eq!(loaded.codes(), q.codes());
        assert_eq!(loaded.shape(), q.shape());
        assert_eq!(loaded.exponent(), q.exponent());
        // save(load(file)) reproduces the file bytes exactly
        write_quantized(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let q = quantize(&x, &QuantConfig::uniform(4).unwrap()).unwrap();
        let p = dir.path().join("t.qt");
        write_quantized(&q, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_quantized(&p).is_err());
    }
}
