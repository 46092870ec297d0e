//! Model checkpoints.
//!
//! # File layout (version 1, little-endian)
//!
//! ```text
//! magic     8 bytes "MA2TCKPT"
//! version   u32     1
//! arch      u32 length + UTF-8
//! method    u32 length + UTF-8 (e.g. "clean", "ma2t", "pgd_linf")
//! seed      u64
//! epoch     u64     epochs completed
//! frozen    u8 x 5  per-module flag
//! dwaa      u8      0 = absent, 1 = present, then:
//!             weights f64 x 5
//!             last    u8 flag + f64 x 5
//!             prev    u8 flag + f64 x 5
//!             r f64, update_period u64, t u64
//! count     u32     number of parameters
//! per parameter:
//!   module  u8      0 Track .. 4 Plan
//!   name    u32 length + UTF-8
//!   rank    u8, extents u32 x rank, data f64 x prod(extents)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::TrainMethod;
use crate::binio::{Reader, Writer};
use crate::dwaa::DwaaState;
use crate::pipeline::{ModuleId, ModuleNode, Param, PerModule, Pipeline};
use crate::task::model::check_architecture;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MA2TCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub method: TrainMethod,
    pub seed: u64,
    pub epoch: u64,
    pub dwaa: Option<DwaaState>,
}

fn write_opt(out: &mut Writer<'_, impl Write>, v: &Option<PerModule<f64>>) -> Result<()> {
    match v {
        None => out.u8(0),
        Some(v) => {
            out.u8(1)?;
            out.f64s(&v.0)
        }
    }
}

fn read_opt(inp: &mut Reader<'_, impl Read>) -> Result<Option<PerModule<f64>>> {
    match inp.u8()? {
        0 => Ok(None),
        1 => Ok(Some(PerModule(inp.f64_array()?))),
        v => Err(Error::format(format!("bad option flag {v}"))),
    }
}

impl Checkpoint {
    /// Short identifier: method, seed and a prefix of the parameter checksum.
    pub fn id(&self) -> String {
        format!("{}-s{}-{}", self.method.name(), self.seed, &self.pipeline.checksum()[..12])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut out = Writer::new(w);
        out.bytes(MAGIC)?;
        out.u32(VERSION)?;
        out.string(&self.pipeline.arch)?;
        out.string(self.method.name())?;
        out.u64(self.seed)?;
        out.u64(self.epoch)?;
        for m in &self.pipeline.modules {
            out.u8(u8::from(m.frozen))?;
        }
        match &self.dwaa {
            None => out.u8(0)?,
            Some(d) => {
                out.u8(1)?;
                out.f64s(&d.weights.0)?;
                write_opt(&mut out, &d.last)?;
                write_opt(&mut out, &d.previous)?;
                out.f64(d.r)?;
                out.u64(d.update_period as u64)?;
                out.u64(d.t as u64)?;
            }
        }
        out.u32(self.pipeline.params().count() as u32)?;
        for (id, p) in self.pipeline.params() {
            out.u8(id.index() as u8)?;
            out.string(&p.name)?;
            out.tensor(&p.value)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut inp = Reader::new(r);
        if &inp.array::<8>()? != MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = inp.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let arch = inp.string()?;
        let method: TrainMethod = inp.string()?.parse().map_err(|e: Error| Error::format(e.to_string()))?;
        let seed = inp.u64()?;
        let epoch = inp.u64()?;
        let mut frozen = [false; 5];
        for f in &mut frozen {
            *f = inp.u8()? != 0;
        }
        let dwaa = match inp.u8()? {
            0 => None,
            1 => Some(DwaaState {
                weights: PerModule(inp.f64_array()?),
                last: read_opt(&mut inp)?,
                previous: read_opt(&mut inp)?,
                r: inp.f64()?,
                update_period: inp.u64()? as usize,
                t: inp.u64()? as usize,
            }),
            v => return Err(Error::format(format!("bad dwaa flag {v}"))),
        };
        let mut modules: Vec<ModuleNode> =
            ModuleId::ALL.iter().map(|&id| ModuleNode { id, params: Vec::new(), frozen: frozen[id.index()] }).collect();
        let count = inp.u32()?;
        for _ in 0..count {
            let tag = inp.u8()? as usize;
            let node = modules.get_mut(tag).ok_or_else(|| Error::format(format!("bad module tag {tag}")))?;
            let name = inp.string()?;
            let value = inp.tensor()?;
            node.params.push(Param { name, value });
        }
        let pipeline = Pipeline { arch, modules };
        check_architecture(&pipeline).map_err(|e| Error::format(e.to_string()))?;
        Ok(Self { pipeline, method, seed, epoch, dwaa })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
