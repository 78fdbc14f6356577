//! Weight container: a flat little-endian binary file plus a JSON sidecar.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "SNWT"
//! version      u32      FORMAT_VERSION
//! layer_count  u32
//! per layer:
//!   kind       u8       0 = dense, 1 = conv
//!   rank       u32
//!   dims       rank × u64
//!   weights    prod(dims) × f64, row-major
//!   has_bias   u8
//!   [bias_len  u64, bias bias_len × f64]
//!   has_state  u8       persistent power-iteration iterate
//!   [seed u64, restarts u64, iterations u64, sigma f64, u_len u64, u u_len × f64]
//! ```
//!
//! The sidecar (`<path>.json`) carries the [`NetworkSpec`]; both must agree.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Layer, LayerKind, Network, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::specnorm::PowerIterState;

pub const MAGIC: &[u8; 4] = b"SNWT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    #[serde(flatten)]
    spec: NetworkSpec,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_weights(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        out.push(match layer.spec.kind {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv { .. } => 1,
        });
        let shape = layer.weight.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, layer.weight.data());
        match &layer.bias {
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                put_f64s(&mut out, b);
            }
            None => out.push(0),
        }
        match &layer.power_iter {
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.seed.to_le_bytes());
                out.extend_from_slice(&st.restarts.to_le_bytes());
                out.extend_from_slice(&st.iterations.to_le_bytes());
                out.extend_from_slice(&st.sigma.to_le_bytes());
                out.extend_from_slice(&(st.u.len() as u64).to_le_bytes());
                put_f64s(&mut out, &st.u);
            }
            None => out.push(0),
        }
    }
    out
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let n = self.u64(what)?;
        // every element is 8 bytes; reject lengths the buffer cannot hold
        if n > ((self.buf.len() - self.pos) / 8) as u64 {
            return Err(Error::format(at, format!("{what} length {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decode a weight container against the architecture it must match.
pub fn decode_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Network> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let count_at = c.pos as u64;
    let count = c.u32("layer count")? as usize;
    if count != spec.layers.len() {
        return Err(Error::format(
            count_at,
            format!("file has {count} layers, sidecar declares {}", spec.layers.len()),
        ));
    }
    let mut layers = Vec::with_capacity(count);
    for ls in &spec.layers {
        let at = c.pos as u64;
        let kind = c.u8("layer kind")?;
        let expected = match ls.kind {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv { .. } => 1,
        };
        if kind != expected {
            return Err(Error::format(at, format!("layer kind tag {kind}, expected {expected}")));
        }
        let rank_at = c.pos as u64;
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(rank_at, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        if shape != ls.weight_shape() {
            return Err(Error::format(
                rank_at,
                format!("weight shape {shape:?} disagrees with sidecar {:?}", ls.weight_shape()),
            ));
        }
        let len = shape.iter().product();
        let data = c.f64s(len, "weights")?;
        let weight = Tensor::new(shape, data).map_err(|e| Error::format(rank_at, e.to_string()))?;
        let flag_at = c.pos as u64;
        let bias = match c.u8("bias flag")? {
            0 => None,
            1 => {
                let n = c.len("bias")?;
                Some(c.f64s(n, "bias")?)
            }
            f => return Err(Error::format(flag_at, format!("bad bias flag {f}"))),
        };
        let state_at = c.pos as u64;
        let power_iter = match c.u8("state flag")? {
            0 => None,
            1 => {
                let seed = c.u64("state seed")?;
                let restarts = c.u64("state restarts")?;
                let iterations = c.u64("state iterations")?;
                let sigma = c.f64("state sigma")?;
                let n = c.len("state vector")?;
                let u = c.f64s(n, "state vector")?;
                Some(PowerIterState {
                    u,
                    iterations,
                    sigma,
                    seed,
                    restarts,
                })
            }
            f => return Err(Error::format(state_at, format!("bad state flag {f}"))),
        };
        let mut layer = Layer::new(*ls, weight, bias).map_err(|e| Error::format(at, e.to_string()))?;
        layer.power_iter = power_iter;
        layers.push(layer);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last layer"));
    }
    Network::from_layers(spec.input_shape.clone(), layers)
}

pub fn encode_sidecar(net: &Network) -> String {
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        spec: net.spec(),
    };
    serde_json::to_string_pretty(&side).expect("spec serializes")
}

/// Write `path` (binary) and `path.json` (sidecar).
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(net))?;
    fs::write(sidecar_path(path), encode_sidecar(net))?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let side_text = fs::read_to_string(sidecar_path(path))?;
    let side: Sidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::format(0, format!("sidecar: {e}")))?;
    if side.format_version != FORMAT_VERSION {
        return Err(Error::format(
            0,
            format!("sidecar format version {} unsupported", side.format_version),
        ));
    }
    let bytes = fs::read(path)?;
    decode_weights(&bytes, &side.spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Activation, ConvGeometry, LayerSpec, Padding};

    fn small_net() -> Network {
        let geom = ConvGeometry::square(1, 5, 2, 3, 2, Padding::Same);
        let spec = NetworkSpec {
            input_shape: vec![1, 5, 5],
            layers: vec![
                LayerSpec::conv(geom, Activation::Elu),
                LayerSpec::dense(geom.output_len(), 3, Activation::Identity).without_bias(),
            ],
        };
        let mut net = Network::new(&spec, 5).unwrap();
        net.layers_mut()[0].power_iter = Some(PowerIterState::new(25, 9));
        net
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let net = small_net();
        let bytes = encode_weights(&net);
        let back = decode_weights(&bytes, &net.spec()).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let net = small_net();
        let bytes = encode_weights(&net);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad, &net.spec()), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        match decode_weights(&bad, &net.spec()) {
            Err(Error::Format { offset: 4, message }) => assert!(message.contains("version")),
            other => panic!("unexpected {other:?}"),
        }

        let truncated = &bytes[..bytes.len() - 3];
        match decode_weights(truncated, &net.spec()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("unexpected {other:?}"),
        }
    }
}
