//! Versioned binary checkpoints: parameters, snapshot store and registry.
//!
//! Layout: 8-byte magic, `u32` version, then sections in fixed order. All
//! integers are little-endian `u64`, all reals little-endian `f64`; a matrix
//! is `rows, cols, data…`. Optimizer moments are not saved.

use std::io::{self, Read, Write};

use crate::enhancer::{InstructorHead, Snapshot, SnapshotStore};
use crate::meta::LslrRates;
use crate::numcore::Mat;
use crate::serve_eval::ParamRegistry;
use crate::towers::{EmbeddingTables, Layer, NetParams, TowerNet};

pub const MAGIC: &[u8; 8] = b"PAMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tables: EmbeddingTables,
    pub theta: NetParams,
    pub rates: LslrRates,
    pub head: InstructorHead,
    pub store: SnapshotStore,
    pub registry: ParamRegistry,
}

struct W<'a, T: Write>(&'a mut T);

impl<T: Write> W<'_, T> {
    fn u(&mut self, x: u64) -> io::Result<()> {
        self.0.write_all(&x.to_le_bytes())
    }
    fn f(&mut self, x: f64) -> io::Result<()> {
        self.0.write_all(&x.to_le_bytes())
    }
    fn vec(&mut self, v: &[f64]) -> io::Result<()> {
        self.u(v.len() as u64)?;
        v.iter().try_for_each(|&x| self.f(x))
    }
    fn mat(&mut self, m: &Mat) -> io::Result<()> {
        self.u(m.rows() as u64)?;
        self.u(m.cols() as u64)?;
        m.as_slice().iter().try_for_each(|&x| self.f(x))
    }
    fn mats(&mut self, ms: &[Mat]) -> io::Result<()> {
        self.u(ms.len() as u64)?;
        ms.iter().try_for_each(|m| self.mat(m))
    }
    fn tower(&mut self, t: &TowerNet) -> io::Result<()> {
        self.u(t.layers.len() as u64)?;
        t.layers.iter().try_for_each(|l| {
            self.mat(&l.w)?;
            self.mat(&l.b)
        })
    }
    fn net(&mut self, n: &NetParams) -> io::Result<()> {
        self.tower(&n.user)?;
        self.tower(&n.item)
    }
}

struct R<'a, T: Read>(&'a mut T);

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Upper bound on any length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

impl<T: Read> R<'_, T> {
    fn u(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn len(&mut self) -> io::Result<usize> {
        let n = self.u()?;
        if n > MAX_LEN {
            return Err(bad("length field out of range"));
        }
        Ok(n as usize)
    }
    fn f(&mut self) -> io::Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn vec(&mut self) -> io::Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f()).collect()
    }
    fn mat(&mut self) -> io::Result<Mat> {
        let r = self.len()?;
        let c = self.len()?;
        let n = r
            .checked_mul(c)
            .filter(|&n| n as u64 <= MAX_LEN)
            .ok_or_else(|| bad("matrix too large"))?;
        let data = (0..n).map(|_| self.f()).collect::<io::Result<Vec<_>>>()?;
        Mat::new(r, c, data).map_err(|e| bad(&e.to_string()))
    }
    fn mats(&mut self) -> io::Result<Vec<Mat>> {
        let n = self.len()?;
        (0..n).map(|_| self.mat()).collect()
    }
    fn tower(&mut self) -> io::Result<TowerNet> {
        let n = self.len()?;
        let layers = (0..n)
            .map(|_| {
                Ok(Layer {
                    w: self.mat()?,
                    b: self.mat()?,
                })
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(TowerNet { layers })
    }
    fn net(&mut self) -> io::Result<NetParams> {
        Ok(NetParams {
            user: self.tower()?,
            item: self.tower()?,
        })
    }
}

impl Checkpoint {
    pub fn write<T: Write>(&self, out: &mut T) -> io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let mut w = W(out);
        w.mats(&self.tables.user)?;
        w.mats(&self.tables.item)?;
        w.net(&self.theta)?;
        w.u(self.rates.steps.len() as u64)?;
        for s in &self.rates.steps {
            w.vec(s)?;
        }
        w.mat(&self.head.w)?;
        w.mat(&self.head.b)?;
        w.u(self.store.capacity() as u64)?;
        w.u(self.store.len() as u64)?;
        for (id, snap) in self.store.items_by_age() {
            w.u(id)?;
            w.u(snap.period as u64)?;
            w.u(snap.slots.len() as u64)?;
            for s in &snap.slots {
                w.vec(s)?;
            }
        }
        w.u(self.registry.len() as u64)?;
        for (&(period, task), net) in self.registry.iter() {
            w.u(period as u64)?;
            w.u(task as u64)?;
            w.net(net)?;
        }
        Ok(())
    }

    pub fn read<T: Read>(input: &mut T) -> io::Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut v = [0u8; 4];
        input.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut r = R(input);
        let tables = EmbeddingTables {
            user: r.mats()?,
            item: r.mats()?,
        };
        let theta = r.net()?;
        let n_steps = r.len()?;
        let steps = (0..n_steps)
            .map(|_| r.vec())
            .collect::<io::Result<Vec<_>>>()?;
        let head = InstructorHead {
            w: r.mat()?,
            b: r.mat()?,
        };
        let mut store = SnapshotStore::new(r.len()?);
        let n_snap = r.len()?;
        for _ in 0..n_snap {
            let id = r.u()?;
            let period = r.len()?;
            let n_slots = r.len()?;
            let slots = (0..n_slots)
                .map(|_| r.vec())
                .collect::<io::Result<Vec<_>>>()?;
            store.put(id, Snapshot { slots, period });
        }
        let mut registry = ParamRegistry::new();
        let n_reg = r.len()?;
        for _ in 0..n_reg {
            let period = r.len()?;
            let task = r.len()?;
            registry.store_params(period, task, &r.net()?);
        }
        Ok(Self {
            tables,
            theta,
            rates: LslrRates { steps },
            head,
            store,
            registry,
        })
    }
}
