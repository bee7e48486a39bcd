//! Checkpoint files: a short text header followed by raw parameters.
//!
//! ```text
//! advpoison-checkpoint v1
//! arch: input 1x8x8; conv 4 k3 s1 p1; relu; flatten; dense 2
//! params: 1090
//!
//! <params × f64 little-endian>
//! ```

use std::fs;
use std::path::Path;

use super::arch::Arch;
use super::model::Classifier;
use crate::error::{Error, Result};

const MAGIC: &str = "advpoison-checkpoint v1";

pub fn encode(model: &Classifier) -> Vec<u8> {
    let mut out = format!("{MAGIC}\narch: {}\nparams: {}\n\n", model.arch(), model.param_count()).into_bytes();
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Classifier> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[split + 2..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let arch: Arch = lines
        .next()
        .and_then(|l| l.strip_prefix("arch: "))
        .ok_or_else(|| bad("missing arch line"))?
        .parse()?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing params line"))?;
    if body.len() != count * 8 {
        return Err(bad(&format!(
            "header declares {count} parameters, body holds {} bytes",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Classifier::from_params(&arch, params)
}

pub fn save(model: &Classifier, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Classifier> {
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Arch::tiny_cnn(ImageShape::new(1, 5, 5), 2, 3, 3);
        let m = Classifier::init(&arch, 11).unwrap();
        let back = decode(&encode(&m), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_body_is_a_format_error() {
        let arch = Arch::linear(ImageShape::new(1, 2, 2), 2);
        let m = Classifier::init(&arch, 1).unwrap();
        let mut bytes = encode(&m);
        bytes.pop();
        assert!(matches!(decode(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }
}
