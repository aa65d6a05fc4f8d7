//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SLFMCKPT`, `u32` version, `u32` config
//! length and the resolved TOML config, `u64` entity / base-relation /
//! query-row counts, `u32` section count, then per section a `u16` name
//! length, the name, `u32` rows, `u32` cols and `rows·cols` `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kgstore::KnowledgeGraph;
use crate::model::Model;
use crate::tape::{Matrix, ParamStore};

const MAGIC: &[u8; 8] = b"SLFMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub num_query_rows: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, kg: &KnowledgeGraph) -> Self {
        Self {
            config: model.config.clone(),
            num_entities: kg.num_entities(),
            num_base_relations: kg.num_base_relations(),
            num_query_rows: model.num_query_rows(),
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        for n in [self.num_entities, self.num_base_relations, self.num_query_rows] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let cfg_bytes = take(&mut r, cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| Error::CorruptCheckpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml_str(cfg_text, &[])?;
        let num_entities = read_u64(&mut r)? as usize;
        let num_base_relations = read_u64(&mut r)? as usize;
        let num_query_rows = read_u64(&mut r)? as usize;
        let sections = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..sections {
            let name_len = read_u16(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("section name is not UTF-8".into()))?
                .to_string();
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("section {name} is truncated")))?;
            let data = take(&mut r, n * 8)?;
            let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.add(name, Matrix::from_shape_vec((rows, cols), values).expect("sized above"));
        }
        if !r.is_empty() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            num_entities,
            num_base_relations,
            num_query_rows,
            params,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Binds the stored parameters to `kg`, which must match the dataset the
    /// checkpoint was trained on.
    pub fn into_model(self, kg: &KnowledgeGraph) -> Result<Model> {
        if kg.num_entities() != self.num_entities || kg.num_base_relations() != self.num_base_relations {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} entities / {} relations, dataset has {} / {}",
                self.num_entities,
                self.num_base_relations,
                kg.num_entities(),
                kg.num_base_relations()
            )));
        }
        let model = Model::from_parts(kg, self.config, self.params)?;
        if model.num_query_rows() != self.num_query_rows {
            return Err(Error::CheckpointMismatch("training query rows differ".into()));
        }
        Ok(model)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::CorruptCheckpoint("unexpected end of file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    Ok(u16::from_le_bytes(take(r, 2)?.try_into().expect("2 bytes")))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
