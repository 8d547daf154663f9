//! Versioned binary checkpoints plus a textual sidecar manifest.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, JSON header
//! (network config), then parameter arrays in declaration order as
//! little-endian f64. The manifest (`<file>.manifest`) lists tensor names,
//! shapes, and checksums, one per line, ending with the whole-file checksum.

use crate::error::{Error, Result};
use crate::net::{NetConfig, ParamVector, VelocityNet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"FLOWCKPT";
const VERSION: u32 = 1;

/// FNV-1a 64 over a byte stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn f64s_to_le_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::config("parameter section length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Checksum of a network's parameters (little-endian byte stream).
pub fn net_checksum(net: &VelocityNet) -> u64 {
    fnv1a(&f64s_to_le_bytes(&net.flat_params()))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

/// Tensor names in declaration order, matching the flat parameter layout.
fn tensor_entries(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, (rows, cols)) in cfg.layer_dims().into_iter().enumerate() {
        out.push((format!("layer{i}.weight"), vec![rows, cols]));
        out.push((format!("layer{i}.bias"), vec![rows]));
    }
    out
}

pub fn save_net(net: &VelocityNet, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(net.config())?;
    let params = net.flat_params();
    let body = f64s_to_le_bytes(&params);

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&body)?;

    let mut manifest = String::new();
    manifest.push_str(&format!("format_version {VERSION}\n"));
    let mut off = 0usize;
    for (name, shape) in tensor_entries(net.config()) {
        let n: usize = shape.iter().product();
        let chunk = f64s_to_le_bytes(&params[off..off + n]);
        off += n;
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} [{}] {:016x}\n", dims.join(","), fnv1a(&chunk)));
    }
    manifest.push_str(&format!("checksum {:016x}\n", fnv1a(&body)));
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<VelocityNet> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::config(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
    if buf.len() < 16 + hlen {
        return Err(Error::config("truncated checkpoint header"));
    }
    let cfg: NetConfig = serde_json::from_slice(&buf[16..16 + hlen])?;
    let params = le_bytes_to_f64s(&buf[16 + hlen..])?;
    if params.len() != cfg.param_count() {
        return Err(Error::shape(
            format!("{}", cfg.param_count()),
            format!("{}", params.len()),
            "checkpoint parameter count",
        ));
    }
    let mut net = VelocityNet::zeros(cfg)?;
    net.set_flat_params(&params);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = RngState::new(17);
        let net = VelocityNet::init(NetConfig::new(2, vec![5, 4]).with_cond(1), &mut rng).unwrap();
        save_net(&net, &path).unwrap();
        let loaded = load_net(&path).unwrap();
        assert_eq!(net.flat_params(), loaded.flat_params());
        assert_eq!(net.config(), loaded.config());
        assert_eq!(net_checksum(&net), net_checksum(&loaded));
        // Manifest exists and carries the whole-file checksum.
        let manifest = std::fs::read_to_string(path.with_extension("ckpt.manifest")).unwrap();
        assert!(manifest.contains("layer0.weight"));
        assert!(manifest.contains("checksum"));
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let net = VelocityNet::init(NetConfig::new(2, vec![6]), &mut RngState::new(4)).unwrap();
        save_net(&net, &a).unwrap();
        save_net(&net, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_net(&path).is_err());
    }
}
