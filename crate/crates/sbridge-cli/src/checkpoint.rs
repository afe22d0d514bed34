use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use sbridge::nets::PolicyNetwork;
use sbridge::training::OptimizerState;

use crate::config::RunConfig;

const MAGIC: &[u8; 8] = b"SBCKPT\0\0";
const VERSION: u32 = 1;

/// Adaptive-moment optimizer state in serializable form.
#[derive(Debug, Clone, Default)]
pub struct OptBlob {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptBlob {
    pub fn of(state: &OptimizerState) -> Self {
        let (m, v) = state.moments();
        Self {
            m: m.to_vec(),
            v: v.to_vec(),
            step: state.step_count(),
        }
    }
}

/// On-disk training state: both policies with their EMA shadows, optimizer
/// moments, and the full run configuration. The container is a magic tag,
/// a format version, a JSON metadata preamble, and length-prefixed arrays
/// of little-endian 64-bit floats; round-trips are bit-exact.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub z: Vec<f64>,
    pub zhat: Vec<f64>,
    pub z_ema: Vec<f64>,
    pub zhat_ema: Vec<f64>,
    pub opt_z: OptBlob,
    pub opt_zhat: OptBlob,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Metadata {
    config: RunConfig,
    iteration: u64,
    opt_z_step: u64,
    opt_zhat_step: u64,
}

fn write_array(out: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(input: &mut impl Read) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let n = u64::from_le_bytes(len) as usize;
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            iteration: self.iteration,
            opt_z_step: self.opt_z.step,
            opt_zhat_step: self.opt_zhat.step,
        })?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for arr in [
            &self.z,
            &self.zhat,
            &self.z_ema,
            &self.zhat_ema,
            &self.opt_z.m,
            &self.opt_z.v,
            &self.opt_zhat.m,
            &self.opt_zhat.v,
        ] {
            write_array(&mut out, arr)?;
        }
        std::fs::write(path, out)
            .with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let mut input = bytes.as_slice();
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .context("checkpoint too short for magic")?;
        if &magic != MAGIC {
            anyhow::bail!("{} is not a checkpoint file", path.display());
        }
        let mut ver = [0u8; 4];
        input.read_exact(&mut ver)?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            anyhow::bail!(
                "checkpoint format version {version} is not supported (expected {VERSION})"
            );
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        let (meta_bytes, mut rest) = input
            .split_at_checked(n)
            .context("checkpoint truncated inside metadata")?;
        let meta: Metadata =
            serde_json::from_slice(meta_bytes).context("parsing checkpoint metadata")?;
        let z = read_array(&mut rest)?;
        let zhat = read_array(&mut rest)?;
        let z_ema = read_array(&mut rest)?;
        let zhat_ema = read_array(&mut rest)?;
        let opt_z = OptBlob {
            m: read_array(&mut rest)?,
            v: read_array(&mut rest)?,
            step: meta.opt_z_step,
        };
        let opt_zhat = OptBlob {
            m: read_array(&mut rest)?,
            v: read_array(&mut rest)?,
            step: meta.opt_zhat_step,
        };
        Ok(Self {
            config: meta.config,
            iteration: meta.iteration,
            z,
            zhat,
            z_ema,
            zhat_ema,
            opt_z,
            opt_zhat,
        })
    }

    fn network_from(&self, flat: &[f64], tag: usize) -> PolicyNetwork {
        let mut net = PolicyNetwork::init(self.config.network.clone(), tag, 0, true);
        net.set_from_flat(flat);
        net
    }

    /// EMA parameter networks, the ones used for sampling and evaluation.
    pub fn ema_networks(&self) -> (PolicyNetwork, PolicyNetwork) {
        (self.network_from(&self.z_ema, 0), self.network_from(&self.zhat_ema, 1))
    }

    pub fn live_networks(&self) -> (PolicyNetwork, PolicyNetwork) {
        (self.network_from(&self.z, 0), self.network_from(&self.zhat, 1))
    }
}
