//! Flat binary checkpoints.
//!
//! ```text
//! magic "VDCK" | version u16 | width u8 | kind u8
//! seed u64 | step u64 | num_classes u32 | sample_rate_hz u32
//! config_len u32 | config text (key = value lines)
//! lambda, target_rate_hz, epsilon, delta, lambda_min, lambda_max: f64
//! tensor_count u32 | tensor_count × { name_len u16 | name | rows u32 | cols u32 | rows·cols values }
//! ```
//!
//! Values are little-endian `f32` or `f64` according to `width`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::Config;
use crate::controller::ControllerState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"VDCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SlowAe,
    Rlt,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::SlowAe => 0,
            ModelKind::Rlt => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::SlowAe),
            1 => Ok(ModelKind::Rlt),
            _ => Err(Error::Format(format!("unknown model kind {tag}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Scalar width in bytes the parameters were trained at.
    pub width: u8,
    pub seed: u64,
    pub step: u64,
    pub num_classes: u32,
    pub sample_rate_hz: u32,
    pub config: Config,
    pub controller: ControllerState,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    /// Snapshot of `store` at precision `T`.
    pub fn from_store<T: Scalar>(kind: ModelKind, store: &ParamStore<T>) -> Self {
        let tensors = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (store.name(id).to_string(), Tensor::new(t.rows, t.cols, t.data.iter().map(|v| v.f64()).collect()))
            })
            .collect();
        Self {
            kind,
            width: T::WIDTH_BYTES,
            seed: 0,
            step: 0,
            num_classes: 0,
            sample_rate_hz: 0,
            config: Config::default(),
            controller: ControllerState::new(Config::default().controller.target_rate_hz),
            tensors,
        }
    }

    /// Copies the stored tensors into `store`, which must have matching names and shapes.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.width != T::WIDTH_BYTES {
            return Err(Error::Format(format!(
                "checkpoint holds {}-byte scalars, model uses {}",
                self.width,
                T::WIDTH_BYTES
            )));
        }
        if self.tensors.len() != store.len() {
            return Err(Error::Format(format!("{} tensors stored, model has {}", self.tensors.len(), store.len())));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.tensors) {
            let dst = store.get(id);
            if store.name(id) != name || (dst.rows, dst.cols) != (t.rows, t.cols) {
                return Err(Error::Format(format!(
                    "tensor {name} {}x{} does not match {} {}x{}",
                    t.rows,
                    t.cols,
                    store.name(id),
                    dst.rows,
                    dst.cols
                )));
            }
            let dst = store.get_mut(id);
            for (d, &s) in dst.data.iter_mut().zip(&t.data) {
                *d = T::of(s);
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.width);
        buf.push(self.kind.tag());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.num_classes.to_le_bytes());
        buf.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        let text = self.config.to_string();
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        let c = &self.controller;
        for v in [c.lambda, c.target_rate_hz, c.epsilon, c.delta, c.lambda_min, c.lambda_max] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::OutOfRange(format!("tensor name {name}")))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for &v in &t.data {
                match self.width {
                    4 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    8 => buf.extend_from_slice(&v.to_le_bytes()),
                    w => return Err(Error::Format(format!("unsupported scalar width {w}"))),
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version as u32, expected: VERSION as u32 });
        }
        let width = cur.u8()?;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported scalar width {width}")));
        }
        let kind = ModelKind::from_tag(cur.u8()?)?;
        let seed = u64::from_le_bytes(cur.array()?);
        let step = u64::from_le_bytes(cur.array()?);
        let num_classes = cur.u32()?;
        let sample_rate_hz = cur.u32()?;
        let text_len = cur.u32()? as usize;
        let text =
            std::str::from_utf8(cur.take(text_len)?).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let config: Config = text.parse()?;
        let mut f = [0.0; 6];
        for v in &mut f {
            *v = cur.f64()?;
        }
        let controller = ControllerState {
            lambda: f[0],
            target_rate_hz: f[1],
            epsilon: f[2],
            delta: f[3],
            lambda_min: f[4],
            lambda_max: f[5],
        };
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.array()?) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let mut data = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                data.push(if width == 4 { f32::from_le_bytes(cur.array()?) as f64 } else { cur.f64()? });
            }
            tensors.push((name, Tensor::new(rows, cols, data)));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { kind, width, seed, step, num_classes, sample_rate_hz, config, controller, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
