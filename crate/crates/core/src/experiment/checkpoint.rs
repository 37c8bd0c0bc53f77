//! Binary checkpoint format.
//!
//! ```text
//! "KDFM"              4 bytes
//! version             u32 LE (currently 1)
//! metadata length     u32 LE, then that many bytes of JSON
//! record count        u32 LE
//! per record:
//!   name length       u32 LE, then UTF-8 name
//!   dtype             u8 (0 = f32, 1 = f64)
//!   rank              u32 LE
//!   extents           rank × u64 LE
//!   payload           little-endian scalars, row-major
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::Method;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, Role};
use crate::tensor::{DType, OptimizerState, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"KDFM";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub role: Role,
    pub arch: Architecture,
    /// Student checkpoints also carry the classifier that reads `G`'s
    /// features.
    pub classifier: Option<Architecture>,
    pub method: Option<Method>,
    pub seed: u64,
    pub epoch: u64,
    /// Hex FNV-1a hash of the experiment config.
    pub config_hash: String,
    /// Shuffle seed the next epoch would use.
    pub rng_state: u64,
    pub optimizer_steps: BTreeMap<String, u64>,
}

impl CheckpointMeta {
    /// Metadata for `arch` with its role filled in and everything else empty.
    pub fn new(arch: Architecture) -> Self {
        CheckpointMeta {
            role: arch.role(),
            arch,
            classifier: None,
            method: None,
            seed: 0,
            epoch: 0,
            config_hash: String::new(),
            rng_state: 0,
            optimizer_steps: BTreeMap::new(),
        }
    }
}

/// One named tensor, kept as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * S::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Record {
            name: name.into(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype != S::DTYPE {
            return Err(Error::config(format!(
                "record {} holds {:?} values, wanted {:?}",
                self.name,
                self.dtype,
                S::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(S::DTYPE.size()).map(S::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: (n - available) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn format(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            reason: reason.into(),
        }
    }
}

fn magic_u32(bytes: [u8; 4]) -> u32 {
    u32::from_be_bytes(bytes)
}

fn decode_prefix(r: &mut Reader<'_>) -> Result<CheckpointMeta> {
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: magic_u32(MAGIC),
            found: magic_u32(magic),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let text = r.take(len)?;
    serde_json::from_slice(text).map_err(|e| r.format(at, format!("metadata: {e}")))
}

fn decode_record(r: &mut Reader<'_>) -> Result<Record> {
    let at = r.pos;
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| r.format(at, "record name is not UTF-8"))?
        .to_string();
    let at = r.pos;
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| r.format(at, format!("unknown dtype tag {tag}")))?;
    let at = r.pos;
    let rank = r.u32()? as usize;
    if rank > MAX_RANK {
        return Err(r.format(at, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u64()?;
        shape.push(usize::try_from(e).map_err(|_| r.format(at, "extent overflows usize"))?);
    }
    let bytes = shape
        .iter()
        .try_fold(dtype.size(), |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| r.format(at, "payload size overflows"))?;
    let payload = r.take(bytes)?.to_vec();
    Ok(Record {
        name,
        dtype,
        shape,
        payload,
    })
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            records: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata always serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let meta = decode_prefix(&mut r)?;
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            records.push(decode_record(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(r.format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, records })
    }

    /// Decodes only the magic, version and metadata.
    pub fn decode_header(bytes: &[u8]) -> Result<CheckpointMeta> {
        decode_prefix(&mut Reader { bytes, pos: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Reads the metadata without touching the parameter records.
    pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; 12];
        let got = read_up_to(&mut file, &mut head).map_err(|e| Error::io(path, e))?;
        let meta_len = if got == head.len() {
            u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize
        } else {
            0
        };
        let mut bytes = head[..got].to_vec();
        let mut rest = Vec::new();
        file.take(meta_len as u64)
            .read_to_end(&mut rest)
            .map_err(|e| Error::io(path, e))?;
        bytes.extend(rest);
        Self::decode_header(&bytes)
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Appends `prefix/<param>` records for parameters and batch-norm
    /// running statistics.
    pub fn push_model<S: Scalar>(&mut self, prefix: &str, model: &Model<S>) {
        for p in model.params() {
            self.records
                .push(Record::from_tensor(format!("{prefix}/{}", p.name), &p.tensor));
        }
        for bn in model.batch_norms() {
            let base = bn_base(&bn.gamma.name);
            self.records.push(Record::from_tensor(
                format!("{prefix}/{base}.running_mean"),
                &bn.running_mean,
            ));
            self.records.push(Record::from_tensor(
                format!("{prefix}/{base}.running_var"),
                &bn.running_var,
            ));
        }
    }

    pub fn push_optimizer<S: Scalar>(&mut self, prefix: &str, opt: &OptimizerState<S>) {
        for (i, v) in opt.velocity.iter().enumerate() {
            self.records
                .push(Record::from_tensor(format!("{prefix}/velocity.{i}"), v));
        }
        self.meta.optimizer_steps.insert(prefix.to_string(), opt.steps);
    }

    fn tensor_for<S: Scalar>(&self, name: &str, expected: &[usize]) -> Result<Tensor<S>> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no record {name}")))?;
        if r.shape != expected {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: r.shape.clone(),
            });
        }
        r.to_tensor()
    }

    /// Loads `prefix/…` records into `model`. Every record is checked
    /// before any parameter is overwritten.
    pub fn restore_model<S: Scalar>(&self, prefix: &str, model: &mut Model<S>) -> Result<()> {
        let params: Vec<Tensor<S>> = model
            .params()
            .into_iter()
            .map(|p| self.tensor_for(&format!("{prefix}/{}", p.name), p.tensor.shape()))
            .collect::<Result<_>>()?;
        let stats: Vec<(Tensor<S>, Tensor<S>)> = model
            .batch_norms()
            .into_iter()
            .map(|bn| {
                let base = bn_base(&bn.gamma.name);
                Ok((
                    self.tensor_for(&format!("{prefix}/{base}.running_mean"), bn.running_mean.shape())?,
                    self.tensor_for(&format!("{prefix}/{base}.running_var"), bn.running_var.shape())?,
                ))
            })
            .collect::<Result<_>>()?;
        for (p, t) in model.params_mut().into_iter().zip(params) {
            p.tensor = t.with_requires_grad(true);
        }
        for (bn, (m, v)) in model.batch_norms_mut().into_iter().zip(stats) {
            bn.running_mean = m;
            bn.running_var = v;
        }
        Ok(())
    }

    pub fn restore_optimizer<S: Scalar>(&self, prefix: &str, opt: &mut OptimizerState<S>) -> Result<()> {
        let velocity: Vec<Tensor<S>> = opt
            .velocity
            .iter()
            .enumerate()
            .map(|(i, v)| self.tensor_for(&format!("{prefix}/velocity.{i}"), v.shape()))
            .collect::<Result<_>>()?;
        opt.velocity = velocity;
        opt.steps = self.meta.optimizer_steps.get(prefix).copied().unwrap_or(0);
        Ok(())
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.meta.role != role {
            return Err(Error::RoleMismatch {
                expected: role.to_string(),
                found: self.meta.role.to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds the teacher stored in a `teacher_T` checkpoint.
    pub fn teacher(&self) -> Result<Model> {
        self.expect_role(Role::TeacherT)?;
        let mut t = self.meta.arch.build()?;
        self.restore_model("T", &mut t)?;
        Ok(t)
    }

    /// Rebuilds `(G, C)` from a `student_G` checkpoint.
    pub fn student(&self) -> Result<(Model, Model)> {
        self.expect_role(Role::StudentG)?;
        let c_arch = self
            .meta
            .classifier
            .as_ref()
            .ok_or_else(|| Error::config("student checkpoint has no classifier"))?;
        let mut g = self.meta.arch.build()?;
        let mut c = c_arch.build()?;
        self.restore_model("G", &mut g)?;
        self.restore_model("C", &mut c)?;
        Ok((g, c))
    }
}

fn bn_base(gamma_name: &str) -> &str {
    gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
