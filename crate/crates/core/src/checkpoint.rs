//! Versioned binary checkpoints made of named blocks.
//!
//! Layout: magic `CGCK`, a little-endian `u32` version and block count, then
//! for every block a `u16` name length, the UTF-8 name, a `u64` payload
//! length and the payload. Matrices are stored as `rows`, `cols` (`u64`)
//! followed by `f64` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ParamId};
use crate::optim::Adam;
use crate::trainer::{EpochRecord, StepLosses, TrainState};

const MAGIC: &[u8; 4] = b"CGCK";
const VERSION: u32 = 1;

/// Training configuration plus the full resumable state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub state: TrainState,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_mat(out: &mut Vec<u8>, m: &Mat) {
    out.write_u64::<LE>(m.nrows() as u64).unwrap();
    out.write_u64::<LE>(m.ncols() as u64).unwrap();
    for v in m.iter() {
        out.write_f64::<LE>(*v).unwrap();
    }
}

fn get_mat(r: &mut Cursor<&[u8]>) -> Result<Mat> {
    let rows = r.read_u64::<LE>().map_err(|_| corrupt("truncated matrix header"))? as usize;
    let cols = r.read_u64::<LE>().map_err(|_| corrupt("truncated matrix header"))? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| corrupt("matrix size overflow"))?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64) * 8 > remaining {
        return Err(corrupt("truncated matrix data"));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data).map_err(|_| corrupt("truncated matrix data"))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| corrupt(e.to_string()))
}

fn f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.write_f64::<LE>(*v).unwrap();
    }
    out
}

fn u64s(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.write_u64::<LE>(*v).unwrap();
    }
    out
}

struct Blocks(BTreeMap<String, Vec<u8>>);

impl Blocks {
    fn get(&self, name: &str) -> Result<&[u8]> {
        self.0.get(name).map(Vec::as_slice).ok_or_else(|| corrupt(format!("missing block `{name}`")))
    }

    fn f64s(&self, name: &str, n: usize) -> Result<Vec<f64>> {
        let b = self.get(name)?;
        if b.len() != n * 8 {
            return Err(corrupt(format!("block `{name}` has {} bytes, expected {}", b.len(), n * 8)));
        }
        let mut out = vec![0.0; n];
        Cursor::new(b).read_f64_into::<LE>(&mut out).unwrap();
        Ok(out)
    }

    fn u64s(&self, name: &str, n: usize) -> Result<Vec<u64>> {
        let b = self.get(name)?;
        if b.len() != n * 8 {
            return Err(corrupt(format!("block `{name}` has {} bytes, expected {}", b.len(), n * 8)));
        }
        let mut out = vec![0; n];
        Cursor::new(b).read_u64_into::<LE>(&mut out).unwrap();
        Ok(out)
    }

    fn mat(&self, name: &str) -> Result<Option<Mat>> {
        match self.0.get(name) {
            None => Ok(None),
            Some(b) => {
                let mut c = Cursor::new(b.as_slice());
                get_mat(&mut c).map(Some)
            }
        }
    }
}

fn put_params(blocks: &mut BTreeMap<String, Vec<u8>>, prefix: &str, p: &ModelParams) {
    for id in ParamId::ALL {
        let mut b = Vec::new();
        put_mat(&mut b, p.get(id));
        blocks.insert(format!("{prefix}param/{}", id.name()), b);
    }
    blocks.insert(format!("{prefix}beta"), f64s(&p.beta));
    blocks.insert(format!("{prefix}bn_running"), f64s(&[p.bn_running_mean, p.bn_running_var]));
}

fn get_params(blocks: &Blocks, prefix: &str, dims: ModelDims) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(dims);
    for id in ParamId::ALL {
        let m = blocks
            .mat(&format!("{prefix}param/{}", id.name()))?
            .ok_or_else(|| corrupt(format!("missing parameter `{}`", id.name())))?;
        p.set(id, m)?;
    }
    let beta = blocks.f64s(&format!("{prefix}beta"), 2)?;
    p.beta = [beta[0], beta[1]];
    let bn = blocks.f64s(&format!("{prefix}bn_running"), 2)?;
    p.bn_running_mean = bn[0];
    p.bn_running_var = bn[1];
    Ok(p)
}

fn put_adam(blocks: &mut BTreeMap<String, Vec<u8>>, name: &str, a: &Adam) {
    let mut header = f64s(&[a.lr, a.beta1, a.beta2, a.eps]);
    header.write_u64::<LE>(a.step).unwrap();
    blocks.insert(format!("adam/{name}"), header);
    for id in ParamId::ALL {
        for (kind, moments) in [("m", &a.first), ("v", &a.second)] {
            if let Some(m) = &moments[id.index()] {
                let mut b = Vec::new();
                put_mat(&mut b, m);
                blocks.insert(format!("adam/{name}/{kind}/{}", id.name()), b);
            }
        }
    }
}

fn get_adam(blocks: &Blocks, name: &str) -> Result<Adam> {
    let h = blocks.get(&format!("adam/{name}"))?;
    if h.len() != 40 {
        return Err(corrupt(format!("optimizer block `{name}` is malformed")));
    }
    let mut c = Cursor::new(h);
    let mut a = Adam::new(c.read_f64::<LE>().unwrap());
    a.beta1 = c.read_f64::<LE>().unwrap();
    a.beta2 = c.read_f64::<LE>().unwrap();
    a.eps = c.read_f64::<LE>().unwrap();
    a.step = c.read_u64::<LE>().unwrap();
    for id in ParamId::ALL {
        a.first[id.index()] = blocks.mat(&format!("adam/{name}/m/{}", id.name()))?;
        a.second[id.index()] = blocks.mat(&format!("adam/{name}/v/{}", id.name()))?;
    }
    Ok(a)
}

fn history_text(h: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in h {
        let l = &r.losses;
        s.push_str(&format!(
            "{} {} {} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
            r.epoch,
            r.steps,
            r.aborted,
            l.kg,
            l.bpr,
            l.adversarial,
            l.contrastive,
            l.regularization,
            l.total,
            l.critic,
            r.val_recall,
            r.beta[0],
            r.beta[1],
            r.seconds
        ));
    }
    s
}

fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 14 {
                return Err(corrupt("malformed history line"));
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|_| corrupt("malformed history line"));
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| corrupt("malformed history line"));
            Ok(EpochRecord {
                epoch: u(0)?,
                steps: u(1)?,
                aborted: u(2)?,
                losses: StepLosses {
                    kg: x(3)?,
                    bpr: x(4)?,
                    adversarial: x(5)?,
                    contrastive: x(6)?,
                    regularization: x(7)?,
                    total: x(8)?,
                    critic: x(9)?,
                },
                val_recall: x(10)?,
                beta: [x(11)?, x(12)?],
                seconds: x(13)?,
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut blocks: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let config = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        blocks.insert("config".into(), config.into_bytes());
        let d = s.params.dims;
        blocks.insert(
            "dims".into(),
            u64s(&[d.users, d.items, d.entities, d.relations, d.text_dim, d.image_dim, d.disc_cols, d.d, d.d_know].map(|v| v as u64)),
        );
        put_params(&mut blocks, "", &s.params);
        put_params(&mut blocks, "best/", &s.best_params);
        put_adam(&mut blocks, "kg", &s.adam_kg);
        put_adam(&mut blocks, "rec", &s.adam_rec);
        put_adam(&mut blocks, "disc", &s.adam_disc);
        let mut rng = s.rng.get_seed().to_vec();
        rng.write_u64::<LE>(s.rng.get_stream()).unwrap();
        rng.write_u128::<LE>(s.rng.get_word_pos()).unwrap();
        blocks.insert("rng".into(), rng);
        blocks.insert(
            "progress".into(),
            u64s(&[s.epoch, s.best_epoch, s.stale_epochs, s.bad_steps].map(|v| v as u64)),
        );
        blocks.insert("best_metric".into(), f64s(&[s.best_metric]));
        blocks.insert("history".into(), history_text(&s.history).into_bytes());

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).unwrap();
        out.write_u32::<LE>(blocks.len() as u32).unwrap();
        for (name, payload) in &blocks {
            out.write_u16::<LE>(name.len() as u16).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LE>(payload.len() as u64).unwrap();
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(|_| corrupt("file too short"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = c.read_u32::<LE>().map_err(|_| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let count = c.read_u32::<LE>().map_err(|_| corrupt("truncated header"))?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let len = c.read_u16::<LE>().map_err(|_| corrupt("truncated block header"))? as usize;
            let mut name = vec![0u8; len];
            c.read_exact(&mut name).map_err(|_| corrupt("truncated block name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("block name is not UTF-8"))?;
            let size = c.read_u64::<LE>().map_err(|_| corrupt("truncated block header"))?;
            if size > bytes.len() as u64 - c.position() {
                return Err(corrupt(format!("block `{name}` is truncated")));
            }
            let mut payload = vec![0u8; size as usize];
            c.read_exact(&mut payload).unwrap();
            map.insert(name, payload);
        }
        let blocks = Blocks(map);
        let config_text = std::str::from_utf8(blocks.get("config")?).map_err(|_| corrupt("config echo is not UTF-8"))?;
        let config: TrainingConfig = toml::from_str(config_text).map_err(|e| corrupt(format!("config echo: {e}")))?;
        let d = blocks.u64s("dims", 9)?;
        let dims = ModelDims {
            users: d[0] as usize,
            items: d[1] as usize,
            entities: d[2] as usize,
            relations: d[3] as usize,
            text_dim: d[4] as usize,
            image_dim: d[5] as usize,
            disc_cols: d[6] as usize,
            d: d[7] as usize,
            d_know: d[8] as usize,
        };
        let rng_bytes = blocks.get("rng")?;
        if rng_bytes.len() != 32 + 8 + 16 {
            return Err(corrupt("malformed rng block"));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&rng_bytes[..32]);
        let mut rc = Cursor::new(&rng_bytes[32..]);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(rc.read_u64::<LE>().unwrap());
        rng.set_word_pos(rc.read_u128::<LE>().unwrap());
        let progress = blocks.u64s("progress", 4)?;
        let history_text = std::str::from_utf8(blocks.get("history")?).map_err(|_| corrupt("history is not UTF-8"))?;
        let state = TrainState {
            params: get_params(&blocks, "", dims)?,
            best_params: get_params(&blocks, "best/", dims)?,
            adam_kg: get_adam(&blocks, "kg")?,
            adam_rec: get_adam(&blocks, "rec")?,
            adam_disc: get_adam(&blocks, "disc")?,
            rng,
            epoch: progress[0] as usize,
            best_epoch: progress[1] as usize,
            stale_epochs: progress[2] as usize,
            bad_steps: progress[3] as usize,
            best_metric: blocks.f64s("best_metric", 1)?[0],
            history: parse_history(history_text)?,
        };
        Ok(Self { config, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_strict_cold_splits, generate_synthetic, SplitRatios, SyntheticSpec};
    use crate::graphs::FrozenGraphBundle;
    use crate::trainer::Trainer;

    #[test]
    fn round_trip_and_exact_resume() {
        let spec = SyntheticSpec {
            users: 30,
            items: 20,
            text_dim: 6,
            image_dim: 6,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let split = build_strict_cold_splits(&data.dataset, 0.2, SplitRatios::default(), 1).unwrap();
        let feats = vec![data.text.clone(), data.image.clone()];
        let bundle = FrozenGraphBundle::build(&split, &data.kg, &feats, 4, 4).unwrap();
        let cfg = TrainingConfig {
            d: 8,
            d_know: 8,
            batch_size: 32,
            epochs: 3,
            patience: 5,
            ..TrainingConfig::default()
        };
        let mut a = Trainer::new(cfg.clone(), &split, &bundle, &feats).unwrap();
        a.run_epoch().unwrap();
        let ck = Checkpoint {
            config: cfg.clone(),
            state: a.state.clone(),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state.params, a.state.params);
        assert_eq!(back.state.adam_rec, a.state.adam_rec);
        assert_eq!(back.state.history, a.state.history);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut b = Trainer::with_state(back.config, back.state, &split, &bundle, &feats).unwrap();
        a.run_epoch().unwrap();
        b.run_epoch().unwrap();
        let (la, lb) = (&a.state.history[1].losses, &b.state.history[1].losses);
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn rejects_corruption() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&7u32.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
