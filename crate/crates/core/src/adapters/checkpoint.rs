//! Adapter checkpoints: a JSON manifest next to `FLYMAT` payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, AdapterConfig, FlyAdapter, LoraAdapter, SplitAdapter};
use crate::error::{Error, Result};
use crate::linalg::{flymat, DenseMatrix, FlyMat};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "flylora-adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: AdapterConfig,
    pub a_file: String,
    pub b_file: String,
    pub base_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_file: Option<String>,
    /// FNV-1a checksum of the frozen sparse projection, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_checksum: Option<u64>,
}

fn row(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.len(), v.to_vec()).expect("finite bias")
}

/// Writes `manifest.json`, `a.flymat`, `b.flymat`, `base.flymat` and, when
/// present, `bias.flymat` / `router.flymat` into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, adapter: &Adapter, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        seed,
        config: adapter.config().clone(),
        a_file: "a.flymat".into(),
        b_file: "b.flymat".into(),
        base_file: "base.flymat".into(),
        bias_file: None,
        router_file: None,
        a_checksum: None,
    };
    let a: FlyMat = match adapter {
        Adapter::Fly(f) => {
            manifest.a_checksum = Some(f.a.checksum());
            f.a.clone().into()
        }
        Adapter::Lora(l) => l.a.clone().into(),
        Adapter::Split(s) => s.a.clone().into(),
    };
    flymat::save(dir.join(&manifest.a_file), &a)?;
    flymat::save(dir.join(&manifest.b_file), &adapter.b().clone().into())?;
    flymat::save(dir.join(&manifest.base_file), &adapter.base().clone().into())?;
    let bias = match adapter {
        Adapter::Fly(f) => Some(&f.balance.bias),
        Adapter::Lora(l) => l.balance.as_ref().map(|b| &b.bias),
        Adapter::Split(_) => None,
    };
    if let Some(bias) = bias {
        manifest.bias_file = Some("bias.flymat".into());
        flymat::save(dir.join("bias.flymat"), &row(bias).into())?;
    }
    if let Adapter::Split(s) = adapter {
        manifest.router_file = Some("router.flymat".into());
        flymat::save(dir.join("router.flymat"), &s.router.clone().into())?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn load_dense(path: &Path) -> Result<DenseMatrix> {
    match flymat::load(path)? {
        FlyMat::Dense(d) => Ok(d),
        FlyMat::Sparse(_) => Err(Error::Parse {
            line: 1,
            msg: format!("{} must be dense", path.display()),
        }),
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != 1 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported checkpoint format {} v{}", m.format, m.version),
        });
    }
    Ok(m)
}

/// Restores an adapter saved by [`save_checkpoint`]. Gradient accumulators
/// and balance counters start empty; the bias is restored.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Adapter, CheckpointManifest)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let b = load_dense(&dir.join(&m.b_file))?;
    let base = load_dense(&dir.join(&m.base_file))?;
    let bias = match &m.bias_file {
        Some(f) => Some(load_dense(&dir.join(f))?),
        None => None,
    };
    let restore_bias = |state: &mut crate::routing::BalanceState, bias: &DenseMatrix| -> Result<()> {
        if bias.shape() != (1, state.rank()) {
            return Err(Error::dim("bias", format!("1×{}", state.rank()), format!("{:?}", bias.shape())));
        }
        state.bias = bias.as_slice().to_vec();
        Ok(())
    };
    let adapter = match m.config.variant {
        super::Variant::FlyLora => {
            let a = match flymat::load(dir.join(&m.a_file))? {
                FlyMat::Sparse(s) => s,
                FlyMat::Dense(_) => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: "flylora projection must be stored sparse".into(),
                    })
                }
            };
            if let Some(sum) = m.a_checksum {
                if a.checksum() != sum {
                    return Err(Error::Contract("projection checksum does not match manifest".into()));
                }
            }
            let mut f = FlyAdapter::from_parts(m.config.clone(), a, b, base)?;
            if let Some(bias) = &bias {
                restore_bias(&mut f.balance, bias)?;
            }
            Adapter::Fly(f)
        }
        super::Variant::SplitLora => {
            let a = load_dense(&dir.join(&m.a_file))?;
            let rf = m
                .router_file
                .as_ref()
                .ok_or_else(|| Error::Contract("split-lora checkpoint lacks a router".into()))?;
            let router = load_dense(&dir.join(rf))?;
            Adapter::Split(SplitAdapter::from_parts(m.config.clone(), a, b, router, base)?)
        }
        _ => {
            let a = load_dense(&dir.join(&m.a_file))?;
            let mut l = LoraAdapter::from_parts(m.config.clone(), a, b, base)?;
            if let (Some(state), Some(bias)) = (l.balance.as_mut(), &bias) {
                restore_bias(state, bias)?;
            }
            Adapter::Lora(l)
        }
    };
    Ok((adapter, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;
    use crate::linalg::SeededStream;

    fn trained(variant: Variant) -> Adapter {
        let cfg = match variant {
            Variant::SplitLora => AdapterConfig::split(4, 16, 2, 2, 1),
            v => AdapterConfig::new(v, 4, 16, 4, 2),
        };
        let mut s = SeededStream::new(8, 8);
        let base = DenseMatrix::from_vec(4, 16, s.normal_vec(64)).unwrap();
        let mut a = Adapter::build(cfg, base, 21).unwrap();
        *a.b_mut() = DenseMatrix::from_vec(4, 4, s.normal_vec(16)).unwrap();
        if let Adapter::Fly(f) = &mut a {
            f.balance.bias = vec![0.001, -0.002, 0.0, 0.003];
        }
        a
    }

    #[test]
    fn round_trip_every_variant() {
        for v in Variant::ALL {
            let a = trained(v);
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(dir.path(), &a, 21).unwrap();
            let (back, m) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(m.seed, 21);
            let x = SeededStream::new(1, 1).normal_vec(16);
            let (p, q) = (a.predict(&x).unwrap(), back.predict(&x).unwrap());
            for (s, t) in p.iter().zip(&q) {
                assert_eq!(s.to_bits(), t.to_bits(), "{v}");
            }
        }
    }

    #[test]
    fn tampered_projection_is_rejected() {
        let a = trained(Variant::FlyLora);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &a, 21).unwrap();
        let other = trained(Variant::FlyLora);
        let Adapter::Fly(mut f) = other else { unreachable!() };
        f.a = f.a.map_values(|v| v * 2.0);
        flymat::save(dir.path().join("a.flymat"), &f.a.into()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Contract(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
    }
}
