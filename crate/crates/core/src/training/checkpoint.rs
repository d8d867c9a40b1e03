//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FPDM" | u32 version | u32 config length | config text (key=value lines)
//! u64 epoch | u64 updates
//! u32 entry count   | entry records (parameters, then velocities)
//! u32 buffer count  | buffer records (BN running statistics)
//! record = u32 name length | name | u8 dtype tag | u32 rank | u64 extent × rank | values
//! ```

use std::fs;
use std::path::Path;

use super::NesterovSgd;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelGraph};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPDM";
pub const CHECKPOINT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Optimiser updates performed so far.
    pub updates: u64,
    pub params: Vec<(String, Tensor<T>)>,
    /// Same order and names as `params`.
    pub velocities: Vec<Tensor<T>>,
    /// BN running statistics, `<layer>/running_mean` and `<layer>/running_var`.
    pub buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Checkpoint<T> {
    pub fn from_model(
        model: &ModelGraph<T>,
        optimizer: &NesterovSgd<T>,
        epoch: u64,
        updates: u64,
    ) -> Result<Self> {
        if optimizer.velocities().len() != model.params().len() {
            return Err(Error::Contract(
                "optimiser and model disagree on parameter count".into(),
            ));
        }
        let mut buffers = Vec::new();
        for (name, state) in model.bn_states() {
            let c = state.channels();
            buffers.push((
                format!("{}/running_mean", name),
                Tensor::new(&[c], state.running_mean.clone())?,
            ));
            buffers.push((
                format!("{}/running_var", name),
                Tensor::new(&[c], state.running_var.clone())?,
            ));
        }
        Ok(Self {
            model: model.config().clone(),
            epoch,
            updates,
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            velocities: optimizer.velocities().to_vec(),
            buffers,
        })
    }

    /// Parameter plus velocity records.
    pub fn entry_count(&self) -> usize {
        self.params.len() + self.velocities.len()
    }

    /// Rebuilds the network and loads every stored tensor into it.
    pub fn build_model(&self) -> Result<ModelGraph<T>> {
        let mut model = ModelGraph::build(&self.model, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Overwrites the parameters and BN statistics of `model`, checking
    /// names and shapes.
    pub fn apply_to(&self, model: &mut ModelGraph<T>) -> Result<()> {
        if model.params().len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (p, (name, value)) in model.params().iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint entry {} {:?} does not match model parameter {} {:?}",
                    name,
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        if self.buffers.len() != 2 * model.bn_states().len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} BN buffers, model needs {}",
                self.buffers.len(),
                2 * model.bn_states().len()
            )));
        }
        for ((name, state), pair) in model.bn_states().iter().zip(self.buffers.chunks(2)) {
            let expect = [
                format!("{}/running_mean", name),
                format!("{}/running_var", name),
            ];
            for (want, (got, t)) in expect.iter().zip(pair) {
                if want != got || t.shape() != [state.channels()] {
                    return Err(Error::Shape(format!(
                        "checkpoint buffer {} does not match {}",
                        got, want
                    )));
                }
            }
        }
        for (p, (_, value)) in model.params_mut().iter_mut().zip(&self.params) {
            p.value = value.clone();
            p.grad = None;
        }
        for ((_, state), pair) in model.bn_states_mut().iter_mut().zip(self.buffers.chunks(2)) {
            state.running_mean = pair[0].1.data().to_vec();
            state.running_var = pair[1].1.data().to_vec();
        }
        Ok(())
    }

    pub fn optimizer(&self) -> NesterovSgd<T> {
        NesterovSgd::from_velocities(self.velocities.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = config_text(&self.model);
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.updates.to_le_bytes());
        out.extend_from_slice(&(self.entry_count() as u32).to_le_bytes());
        for (name, t) in &self.params {
            write_record(&mut out, name, t);
        }
        for ((name, _), v) in self.params.iter().zip(&self.velocities) {
            write_record(&mut out, &format!("{}{}", VELOCITY_PREFIX, name), v);
        }
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for (name, t) in &self.buffers {
            write_record(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
        let model = parse_config(config)?;
        let epoch = r.u64()?;
        let updates = r.u64()?;
        let entries = r.u32()? as usize;
        if entries % 2 != 0 {
            return Err(Error::Parse(format!(
                "odd checkpoint entry count {}",
                entries
            )));
        }
        let mut params = Vec::with_capacity(entries / 2);
        for _ in 0..entries / 2 {
            params.push(r.record::<T>()?);
        }
        let mut velocities = Vec::with_capacity(entries / 2);
        for (name, value) in &params {
            let (vname, v) = r.record::<T>()?;
            if vname.strip_prefix(VELOCITY_PREFIX) != Some(name.as_str())
                || v.shape() != value.shape()
            {
                return Err(Error::Parse(format!(
                    "velocity record {} does not match parameter {}",
                    vname, name
                )));
            }
            velocities.push(v);
        }
        let n_buffers = r.u32()? as usize;
        let mut buffers = Vec::with_capacity(n_buffers.min(1 << 16));
        for _ in 0..n_buffers {
            buffers.push(r.record::<T>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            epoch,
            updates,
            params,
            velocities,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }
}

fn config_text(cfg: &ModelConfig) -> String {
    format!(
        "arch={}\ndepth={}\nbase_features={}\ndropout_p={}\ninput_height={}\ninput_width={}\n",
        cfg.variant_name(),
        cfg.depth,
        cfg.base_features,
        cfg.dropout_p,
        cfg.input_height,
        cfg.input_width
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let bad = |k: &str, v: &str| Error::Parse(format!("bad checkpoint config {}={}", k, v));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad checkpoint config line {:?}", line)))?;
        match k {
            "arch" => {
                let (arch, bn) = ModelConfig::parse_variant(v).map_err(|_| bad(k, v))?;
                cfg.arch = arch;
                cfg.bn_order = bn;
            }
            "depth" => cfg.depth = v.parse().map_err(|_| bad(k, v))?,
            "base_features" => cfg.base_features = v.parse().map_err(|_| bad(k, v))?,
            "dropout_p" => cfg.dropout_p = v.parse().map_err(|_| bad(k, v))?,
            "input_height" => cfg.input_height = v.parse().map_err(|_| bad(k, v))?,
            "input_width" => cfg.input_width = v.parse().map_err(|_| bad(k, v))?,
            _ => return Err(bad(k, v)),
        }
    }
    cfg.validate()
        .map_err(|e| Error::Parse(format!("checkpoint config: {}", e)))?;
    Ok(cfg)
}

fn write_record<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE_TAG);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Parse(format!(
                    "checkpoint truncated at byte {} (needed {} more)",
                    self.pos, n
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record<T: Float>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = self.take(1)?[0];
        if tag != T::DTYPE_TAG {
            return Err(Error::Parse(format!(
                "tensor {} has dtype tag {}, expected {} ({})",
                name,
                tag,
                T::DTYPE_TAG,
                T::DTYPE_NAME
            )));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Parse(format!("tensor {} has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?)
                .map_err(|_| Error::Parse(format!("tensor {} extent overflows", name)))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Parse(format!("tensor {} is too large", name)))?;
            shape.push(d);
        }
        let size = std::mem::size_of::<T>();
        let raw = self.take(
            count
                .checked_mul(size)
                .ok_or_else(|| Error::Parse(format!("tensor {} is too large", name)))?,
        )?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}
