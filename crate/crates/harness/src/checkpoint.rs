//! Binary checkpoint format: versioned magic, epoch, RNG state, named
//! parameter tensors and optional optimizer moments. Round trips are
//! bit-exact.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use sovstg_core::nn::ParamSet;
use sovstg_core::optim::AdamW;
use sovstg_core::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SOVSTG\x01\x00";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: u32,
    pub rng_state: [u64; 4],
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptState>,
}

#[derive(Clone, Debug)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rows() as u32).to_le_bytes());
    out.extend((t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn read_tensor(cur: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rows = read_u32(cur)? as usize;
    let cols = read_u32(cur)? as usize;
    let mut data = vec![0.0f64; rows * cols];
    for v in data.iter_mut() {
        let mut buf = [0u8; 8];
        cur.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(cur: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut buf = [0u8; 8];
    cur.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

impl Checkpoint {
    pub fn capture(
        params: &ParamSet,
        epoch: u32,
        rng_state: [u64; 4],
        optimizer: Option<&AdamW>,
    ) -> Self {
        Checkpoint {
            epoch,
            rng_state,
            params: params
                .iter()
                .map(|(_, name, value)| (name.to_string(), value.clone()))
                .collect(),
            optimizer: optimizer.map(|opt| {
                let (step, m, v) = opt.state();
                OptState {
                    step,
                    m: m.to_vec(),
                    v: v.to_vec(),
                }
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.epoch.to_le_bytes());
        for s in self.rng_state {
            out.extend(s.to_le_bytes());
        }
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let bytes = name.as_bytes();
            out.extend((bytes.len() as u16).to_le_bytes());
            out.extend(bytes);
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend(opt.step.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    write_tensor(&mut out, t);
                }
            }
        }
        let mut file =
            fs::File::create(path).with_context(|| format!("create {}", path.display()))?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
        let mut cur = Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!("{} is not a checkpoint (bad magic)", path.display());
        }
        let epoch = read_u32(&mut cur)?;
        let mut rng_state = [0u64; 4];
        for s in rng_state.iter_mut() {
            *s = read_u64(&mut cur)?;
        }
        let count = read_u32(&mut cur)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            cur.read_exact(&mut len_buf)?;
            let len = u16::from_le_bytes(len_buf) as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name)?;
            let name = String::from_utf8(name).context("parameter name")?;
            params.push((name, read_tensor(&mut cur)?));
        }
        let mut flag = [0u8; 1];
        cur.read_exact(&mut flag)?;
        let optimizer = if flag[0] == 1 {
            let step = read_u64(&mut cur)?;
            let m: Vec<Tensor> = (0..count)
                .map(|_| read_tensor(&mut cur))
                .collect::<Result<_>>()?;
            let v: Vec<Tensor> = (0..count)
                .map(|_| read_tensor(&mut cur))
                .collect::<Result<_>>()?;
            Some(OptState { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            epoch,
            rng_state,
            params,
            optimizer,
        })
    }

    /// Copy values into `params` by name. With `strict`, every name must
    /// match both ways; otherwise unmatched entries are counted and skipped
    /// (partial initialization of a larger model).
    pub fn apply_params(&self, params: &mut ParamSet, strict: bool) -> Result<(usize, usize)> {
        let mut loaded = 0usize;
        let mut skipped = 0usize;
        for (name, tensor) in &self.params {
            match params.find(name) {
                Some(id) => {
                    if params.get(id).shape() != tensor.shape() {
                        bail!(
                            "parameter {name}: checkpoint shape {:?} vs model {:?}",
                            tensor.shape(),
                            params.get(id).shape()
                        );
                    }
                    *params.get_mut(id) = tensor.clone();
                    loaded += 1;
                }
                None if strict => bail!("checkpoint parameter {name} missing from the model"),
                None => skipped += 1,
            }
        }
        if strict && loaded != params.len() {
            bail!(
                "model has {} parameters but the checkpoint restored {loaded}",
                params.len()
            );
        }
        Ok((loaded, skipped))
    }
}
