//! Self-describing training checkpoints.
//!
//! Layout: a UTF-8 header terminated by a line `data`, then for every tensor
//! in header order its value, first moment, second moment and EMA shadow as
//! little-endian `f32`.
//!
//! ```text
//! foleyflow-checkpoint v1
//! step = 1200
//! seed = 7
//! model.hidden_dim = 64
//! train.base_lr = 0.001
//! tensor empty.visual 1 64
//! data
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::config::{KeyValueConfig, KeyValues, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::mmdit::{check_layout, param_shapes, Model};
use crate::trainer::{EmaState, OptimState, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "foleyflow-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.state.step()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut h = format!("{MAGIC} v{FORMAT_VERSION}\nstep = {}\nseed = {}\n", st.step(), self.train_cfg.seed);
        h += &self.model_cfg.to_text("model");
        h += &self.train_cfg.to_text("train");
        h += &format!("ema.rel_width = {}\n", st.ema.rel_width);
        for (name, v) in st.model.params.iter() {
            h += &format!("tensor {name} {} {}\n", v.nrows(), v.ncols());
        }
        h += "data\n";
        let mut out = h.into_bytes();
        let p = st.model.params.values();
        for i in 0..p.len() {
            for t in [&p[i], &st.optim.m[i], &st.optim.v[i], &st.ema.shadow.values()[i]] {
                for x in t.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a checkpoint. With `expect`, tensor shapes are checked against
    /// that configuration's layout before any payload is decoded.
    pub fn from_bytes(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<Self> {
        let marker = b"\ndata\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Format("checkpoint header is incomplete".into()))?;
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let payload = &bytes[end + marker.len()..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or("");
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().strip_prefix('v'))
            .ok_or_else(|| Error::Format("not a checkpoint file".into()))?;
        let found: u32 = version
            .parse()
            .map_err(|_| Error::Format(format!("bad checkpoint version '{version}'")))?;
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }

        let mut tensors: Vec<(String, (usize, usize))> = Vec::new();
        let mut kv_text = String::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let dims = (f.len() == 3)
                    .then(|| Some((f[1].parse().ok()?, f[2].parse().ok()?)))
                    .flatten()
                    .ok_or_else(|| Error::Format(format!("bad tensor line '{line}'")))?;
                tensors.push((f[0].to_string(), dims));
            } else {
                kv_text += line;
                kv_text.push('\n');
            }
        }
        let kv = KeyValues::parse(&kv_text)?;
        let num = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks '{k}'")))
        };
        let step = num("step")?;
        let mut model_cfg = ModelConfig::preset("tiny")?;
        model_cfg.apply(&kv.section("model"))?;
        let mut train_cfg = TrainConfig::default();
        train_cfg.apply(&kv.section("train"))?;
        let rel_width: f64 = kv
            .get("ema.rel_width")
            .and_then(|v| v.parse().ok())
            .unwrap_or(train_cfg.ema_rel_width);

        if let Some(cfg) = expect {
            check_layout(&param_shapes(cfg)?, tensors.iter().map(|(n, s)| (n.as_str(), *s)))?;
        }
        check_layout(&param_shapes(&model_cfg)?, tensors.iter().map(|(n, s)| (n.as_str(), *s)))?;

        let need: usize = tensors.iter().map(|(_, (r, c))| 4 * r * c * 4).sum();
        if payload.len() != need {
            return Err(Error::Truncated {
                expected: need,
                found: payload.len(),
            });
        }
        let mut cursor = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |r: usize, c: usize| {
            let v: Vec<f32> = cursor.by_ref().take(r * c).collect();
            Array2::from_shape_vec((r, c), v).expect("length checked")
        };
        let (mut params, mut shadow) = (ParamStore::new(), ParamStore::new());
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, (r, c)) in &tensors {
            params.add(name.clone(), take(*r, *c));
            m.push(take(*r, *c));
            v.push(take(*r, *c));
            shadow.add(name.clone(), take(*r, *c));
        }
        let model = Model::from_params(&model_cfg, params)?;
        Ok(Checkpoint {
            model_cfg,
            train_cfg,
            state: TrainState {
                model,
                optim: OptimState { m, v, step },
                ema: EmaState { shadow, rel_width },
            },
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expect)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let train_cfg = TrainConfig {
            seed: 42,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(Model::new(&cfg, 5).unwrap(), &train_cfg);
        state.optim.step = 17;
        for (k, t) in state.optim.m.iter_mut().enumerate() {
            t.mapv_inplace(|_| k as f32 * 0.5 + 0.25);
        }
        for t in state.optim.v.iter_mut() {
            t.fill(1e-7);
        }
        state.ema.shadow.values_mut()[0].fill(-3.0);
        Checkpoint {
            model_cfg: cfg,
            train_cfg,
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Some(&c.model_cfg)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.step(), 17);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = ckpt();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p, None).unwrap(), c);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut b = ckpt().to_bytes();
        b.truncate(b.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&b, None), Err(Error::Truncated { .. })));
        let mut extra = ckpt().to_bytes();
        extra.extend_from_slice(b"junk");
        assert!(matches!(Checkpoint::from_bytes(&extra, None), Err(Error::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_is_its_own_error() {
        let b = ckpt().to_bytes();
        let text = String::from_utf8_lossy(&b[..30]).replace(" v1", " v9");
        let mut changed = text.into_bytes();
        changed.extend_from_slice(&b[30..]);
        assert!(matches!(
            Checkpoint::from_bytes(&changed, None),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn loading_under_another_preset_names_the_tensor() {
        let s16 = ModelConfig::preset("S-16kHz").unwrap();
        match Checkpoint::from_bytes(&ckpt().to_bytes(), Some(&s16)) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "empty.visual"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
