//! Binary network checkpoints with a JSON sidecar.
//!
//! Layout of the `.bin` file, all integers and floats little-endian:
//!
//! ```text
//! b"DFND"  u32 version  u32 n_dims  u32 dims[n_dims]
//! for each layer: f64 weight[in * out] (row-major, in x out), f64 bias[out]
//! ```
//!
//! The sidecar (`<name>.json`) records the architecture, including the output
//! activation that the binary omits, plus free-form training metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, Dense, DenseNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFND";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub output_activation: Activation,
    pub param_count: usize,
    #[serde(default)]
    pub training: serde_json::Value,
}

pub fn encode(net: &DenseNet) -> Vec<u8> {
    let dims = net.dims();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for slice in net.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_net(mut w: impl Write, net: &DenseNet) -> std::io::Result<()> {
    w.write_all(&encode(net))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint body. `origin` only labels errors.
pub fn decode(bytes: &[u8], output_activation: Activation, origin: &Path) -> Result<DenseNet> {
    let truncated = || Error::format(origin, "truncated checkpoint");
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(Error::format(origin, "bad magic (expected DFND)"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let n_dims = c.u32().ok_or_else(truncated)? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::format(
            origin,
            format!("implausible layer count {n_dims}"),
        ));
    }
    let dims: Vec<usize> = (0..n_dims)
        .map(|_| c.u32().map(|d| d as usize).ok_or_else(truncated))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n_dims - 1);
    for w in dims.windows(2) {
        let (i, o) = (w[0], w[1]);
        let weight: Vec<f64> = (0..i * o)
            .map(|_| c.f64().ok_or_else(truncated))
            .collect::<Result<_>>()?;
        let bias: Vec<f64> = (0..o)
            .map(|_| c.f64().ok_or_else(truncated))
            .collect::<Result<_>>()?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((i, o), weight).expect("sized"),
            bias: Array1::from(bias),
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(
            origin,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    DenseNet::from_layers(layers, output_activation)
}

pub fn read_net(
    mut r: impl Read,
    output_activation: Activation,
    origin: &Path,
) -> Result<DenseNet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(origin, e))?;
    decode(&buf, output_activation, origin)
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (binary) and its `.json` sidecar.
pub fn save(path: &Path, net: &DenseNet, training: serde_json::Value) -> Result<()> {
    let sidecar = Sidecar {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        version: VERSION,
        layer_dims: net.dims(),
        output_activation: net.output_activation(),
        param_count: net.param_count(),
        training,
    };
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DenseNet, Sidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = decode(&bytes, sidecar.output_activation, path)?;
    if net.dims() != sidecar.layer_dims {
        return Err(Error::format(
            path,
            format!(
                "binary dims {:?} disagree with sidecar {:?}",
                net.dims(),
                sidecar.layer_dims
            ),
        ));
    }
    Ok((net, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn header_layout() {
        let net =
            DenseNet::new(&[3, 2], Activation::Identity, &mut rng::stream(0, "init")).unwrap();
        let bytes = encode(&net);
        assert_eq!(&bytes[..4], b"DFND");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 8 * (3 * 2 + 2));
        let w00 = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(w00, net.layers()[0].weight[[0, 0]]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = DenseNet::new(&[4, 5, 3], Activation::Relu, &mut rng::stream(2, "init")).unwrap();
        let path = dir.path().join("enc.bin");
        save(&path, &net, serde_json::json!({"epochs": 3})).unwrap();
        let (back, side) = load(&path).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert_eq!(back.output_activation(), Activation::Relu);
        assert_eq!(side.training["epochs"], 3);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net =
            DenseNet::new(&[2, 2], Activation::Identity, &mut rng::stream(0, "init")).unwrap();
        let bytes = encode(&net);
        let p = Path::new("x.bin");
        assert!(decode(&bytes[..bytes.len() - 1], Activation::Identity, p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Activation::Identity, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, Activation::Identity, p).is_err());
    }
}
