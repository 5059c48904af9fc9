//! Named-tensor container: a magic line, one JSON header line, then every
//! tensor as little-endian f64 in header order.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::config::ModelConfig;
use crate::model::params::ParamStore;
use crate::model::transformer::Transformer;

const MAGIC: &str = "ENTMT-CKPT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub config: ModelConfig,
    /// Free-form metadata, e.g. the training step.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorHeader>,
}

pub fn save<T: Real>(path: &Path, model: &Transformer<T>, fingerprint: &str, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        fingerprint: fingerprint.to_string(),
        config: model.config.clone(),
        meta,
        tensors: model
            .params
            .specs()
            .iter()
            .map(|s| TensorHeader {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for &x in model.params.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(open(path)?);
    header_from(&mut r, path)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })
}

fn header_from(r: &mut impl BufRead, path: &Path) -> Result<CheckpointHeader> {
    let name = path.display().to_string();
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::parse(&name, 1, "not a checkpoint file"));
    }
    line.clear();
    r.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| Error::parse(&name, 2, e.to_string()))
}

pub fn load<T: Real>(path: &Path) -> Result<(Transformer<T>, CheckpointHeader)> {
    let mut r = BufReader::new(open(path)?);
    let header = header_from(&mut r, path)?;
    let mut store = ParamStore::<T>::default();
    for t in &header.tensors {
        store.add(&t.name, &t.shape);
    }
    let mut buf = [0u8; 8];
    for x in store.data_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::parse(path.display().to_string(), 3, "truncated tensor data"))?;
        *x = T::of(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::parse(path.display().to_string(), 3, "trailing bytes after tensor data"));
    }
    let model = Transformer::from_params(header.config.clone(), store)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip() {
        let cfg = ModelConfig {
            layers: 1,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 25,
            ..ModelConfig::default()
        };
        let m = Transformer::<f32>::new(cfg, &mut rng::rng(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, "abc", serde_json::json!({"step": 3})).unwrap();
        let (back, h) = load::<f32>(&p).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(h.fingerprint, "abc");
        assert_eq!(h.meta["step"], 3);
        assert!(matches!(load::<f32>(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }
}
