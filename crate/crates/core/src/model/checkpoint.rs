//! Single-file checkpoint format and the training-metrics CSV.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! bytes 0..8   magic  "MGCKPT01"
//! bytes 8..16  manifest length, little-endian u64
//! ...          manifest: JSON {config, dtype, tensors: [{name, rows, cols}]}
//! ...          payload: every tensor in layout order, f32 little-endian
//! ```
//!
//! Parameters are held in f64 in memory and stored as f32 on disk, so a
//! save/load round trip quantizes to f32 precision. `load` rebuilds the
//! layout from the embedded config and refuses manifests that disagree
//! with it, truncated payloads, and trailing garbage.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::HourglassConfig;
use super::params::{build_layout, ParameterSet};
use super::train::StepMetrics;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MGCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: HourglassConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &ParameterSet) -> Result<()> {
    let manifest = Manifest {
        config: model.cfg.clone(),
        dtype: "f32".into(),
        tensors: model
            .layout
            .tensors
            .iter()
            .map(|m| TensorEntry {
                name: m.name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + model.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for &w in &model.data {
        out.extend_from_slice(&(w as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_at = 16usize.checked_add(mlen).ok_or_else(|| {
        Error::Checkpoint("manifest length overflows".into())
    })?;
    if bytes.len() < payload_at {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_at])
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    manifest.config.validate()?;
    let (layout, index) = build_layout(&manifest.config);
    if manifest.tensors.len() != layout.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors but the config implies {}",
            manifest.tensors.len(),
            layout.tensors.len()
        )));
    }
    for (entry, meta) in manifest.tensors.iter().zip(&layout.tensors) {
        if entry.name != meta.name || entry.rows != meta.rows || entry.cols != meta.cols {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: file has {} [{}x{}], config implies {} [{}x{}]",
                entry.name, entry.rows, entry.cols, meta.name, meta.rows, meta.cols
            )));
        }
    }
    let expected = layout.total * 4;
    let payload = &bytes[payload_at..];
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(ParameterSet {
        cfg: manifest.config,
        layout: std::sync::Arc::new(layout),
        index: std::sync::Arc::new(index),
        data,
    })
}

/// Append-style CSV of per-step training metrics.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,loss,ppl,lr,grad_norm,tokens,tokens_per_s\n");
    for m in metrics {
        let rate = if m.seconds > 0.0 {
            m.tokens as f64 / m.seconds
        } else {
            0.0
        };
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.3e},{:.6},{},{:.1}\n",
            m.step, m.loss, m.ppl, m.lr, m.grad_norm, m.tokens, rate
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::forward::{forward, tiny_config};
    use super::super::params::init_model;
    use super::*;

    #[test]
    fn round_trip_preserves_f32_precision_and_behaviour() {
        let cfg = tiny_config();
        let model = init_model(&cfg, 23);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.data.len(), model.data.len());
        for (a, b) in loaded.data.iter().zip(&model.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // A second round trip is lossless: the values are exactly f32.
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded).unwrap();
        let again = load(&path2).unwrap();
        assert_eq!(again.data, loaded.data);
        // And the loaded model runs.
        let toks: Vec<u16> = (0..18).map(|i| (i % 16) as u16).collect();
        let (l1, _) = forward(&loaded, &toks, 0, None).unwrap();
        let (l2, _) = forward(&again, &toks, 0, None).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let cfg = tiny_config();
        let model = init_model(&cfg, 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model).unwrap();
        let good = fs::read(&path).unwrap();

        let cases: Vec<(&str, Vec<u8>)> = vec![
            ("bad magic", {
                let mut b = good.clone();
                b[0] ^= 0xff;
                b
            }),
            ("truncated payload", good[..good.len() - 3].to_vec()),
            ("trailing garbage", {
                let mut b = good.clone();
                b.extend_from_slice(&[0u8; 5]);
                b
            }),
            ("manifest length past end", {
                let mut b = good.clone();
                b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
                b
            }),
            ("mangled manifest json", {
                let mut b = good.clone();
                b[20] = b'!';
                b
            }),
        ];
        for (what, bytes) in cases {
            let p = dir.path().join("bad.ckpt");
            fs::write(&p, &bytes).unwrap();
            let err = load(&p);
            assert!(err.is_err(), "{what} should fail to load");
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let metrics = vec![StepMetrics {
            step: 0,
            loss: 2.5,
            ppl: 2.5f64.exp(),
            lr: 1e-4,
            grad_norm: 0.8,
            tokens: 34,
            seconds: 0.5,
        }];
        write_metrics_csv(&path, &metrics).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,loss,ppl,lr,grad_norm,tokens,tokens_per_s"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,2.5"));
        assert!(row.ends_with("68.0"), "tokens/s column: {row}");
    }
}
