//! Named trainable tensors and their checkpoint container.
//!
//! A checkpoint directory holds `weights.pmtk` (consecutive raw tensor
//! records) and `manifest.txt` (`name<TAB>shape<TAB>offset` per record, shape
//! written as `AxBxC`, offset in bytes into the weights file).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::ops::Index;
use std::path::Path;

use rand::Rng;

use crate::error::{format_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a store, from [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps tape handles listed in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn from `U(−√(1/fan_in), √(1/fan_in))`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::rand_uniform(shape, -bound, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Same as [`bind`](Self::bind) but as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut weights = BufWriter::new(File::create(dir.join("weights.pmtk"))?);
        let mut manifest = BufWriter::new(File::create(dir.join("manifest.txt"))?);
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            t.write_to(&mut weights)?;
            writeln!(manifest, "{name}\t{}\t{offset}", shape_string(t.shape()))?;
            offset += t.record_len();
        }
        weights.flush()?;
        manifest.flush()?;
        Ok(())
    }

    /// Overwrites this store's values from a checkpoint, matching by name.
    /// Every parameter must be present with an identical shape.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let manifest = BufReader::new(File::open(dir.join("manifest.txt"))?);
        let mut weights = BufReader::new(File::open(dir.join("weights.pmtk"))?);
        let mut seen = vec![false; self.len()];
        for line in manifest.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(format_err!("bad manifest line `{line}`"));
            };
            let offset: u64 = offset.parse().map_err(|_| format_err!("bad offset in `{line}`"))?;
            let id = self.find(name).ok_or_else(|| format_err!("checkpoint has unknown parameter `{name}`"))?;
            weights.seek(SeekFrom::Start(offset))?;
            let t = Tensor::<T>::read_from(&mut weights)?;
            if t.shape() != self.tensors[id.0].shape() || shape != shape_string(t.shape()) {
                return Err(format_err!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format_err!("checkpoint is missing parameter `{}`", self.names[i]));
        }
        Ok(())
    }
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}
