//! Named parameter storage and the `SGV1` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGV1" | version: u16
//! repeated until EOF:
//!   name_len: u16 | name: UTF-8 | rank: u8 | dims: u32 x rank | payload: f64 x prod(dims)
//! ```
//!
//! Entries are written in insertion order, so a store that is written, read
//! and written again produces identical bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::{grad_check, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGV1";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

/// Graph handles for every entry of a [`ParamStore`], keyed by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handle for `name`; panics when the model asks for a parameter it never created.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.values().copied()
    }

    /// Pair `names` with already-created graph handles.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut SeededRng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(rows, cols, bound, rng));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn init_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) {
        self.insert(name, Tensor::filled(rows, cols, v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::format(format!("checkpoint has no entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar values across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Number of scalars in entries whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Put every entry on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Put every entry on `g` as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// [`grad_check`] over every entry of the store plus extra leaf `inputs`.
    /// `f` receives the bound parameters and the handles of `inputs`.
    pub fn grad_check<F>(&self, inputs: &[Tensor], f: F, step: f64) -> Result<f64>
    where
        F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
    {
        let n = self.len();
        let mut leaves: Vec<Tensor> = self.entries.values().cloned().collect();
        leaves.extend_from_slice(inputs);
        grad_check(
            |g, vars| {
                let bound = Bound::from_vars(self.names(), &vars[..n]);
                f(g, &bound, &vars[n..])
            },
            &leaves,
            step,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("entry name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::invalid(format!("rank too large for {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::invalid(format!("dimension too large in {name}")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not an SGV1 checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut store = ParamStore::new();
        while !r.is_empty() {
            let name_len = u16::from_le_bytes(read_array(&mut r, "name length")?) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("entry name is not UTF-8"))?;
            let [rank] = read_array::<1>(&mut r, "rank")?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_array(&mut r, "dimension")?) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > r.len() {
                return Err(Error::format(format!("truncated payload for {name}")));
            }
            let data = (0..numel)
                .map(|_| read_array(&mut r, "payload").map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            if store.contains(&name) {
                return Err(Error::format(format!("duplicate entry {name}")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated checkpoint ({what})")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut &[u8], what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}
