//! Binary model checkpoints with a JSON provenance sidecar.
//!
//! Layout (all integers little-endian): a 4-byte magic, a u16 format
//! version, a u8 net kind, then class count, layer count, and per layer an
//! activation tag plus its dimensions, followed by the flat f64 parameter
//! arrays in layer order. Deterministic nets store weights then biases per
//! layer; variational nets store weight means, weight rhos, bias means,
//! bias rhos. A `<file>.json` sidecar records seed, config hash, and
//! provenance for humans and tests; loading never requires it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vcotta::varnet::{Activation, GaussianParamTensor, VariationalLayer, VariationalNet};
use vcotta::warmup::{DetLayer, DeterministicNet};
use vcotta::Tensor2;

const MAGIC: [u8; 4] = *b"VNCP";
const FORMAT_VERSION: u16 = 1;
const KIND_DETERMINISTIC: u8 = 0;
const KIND_VARIATIONAL: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarMeta {
    pub seed: u64,
    pub config_sha256: String,
    pub created_by: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_error: Option<f64>,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_sidecar(checkpoint: &Path, meta: &SidecarMeta) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, json)
        .with_context(|| format!("cannot write sidecar {}", path.display()))
}

pub fn load_sidecar(checkpoint: &Path) -> Result<SidecarMeta> {
    let path = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read sidecar {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("sidecar {} is not valid", path.display()))
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

fn activation_from_tag(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Identity),
        other => bail!("unknown activation tag {other}"),
    }
}

struct CheckpointWriter<W: Write> {
    inner: W,
}

impl<W: Write> CheckpointWriter<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v]).context("write failed")
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).context("write failed")
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes()).context("write failed")
    }

    fn floats(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.inner.write_all(&v.to_le_bytes()).context("write failed")?;
        }
        Ok(())
    }
}

struct CheckpointReader<R: Read> {
    inner: R,
}

impl<R: Read> CheckpointReader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b).context("checkpoint truncated")?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.inner.read_exact(&mut b).context("checkpoint truncated")?;
        Ok(u16::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).context("checkpoint truncated")?;
        Ok(u64::from_le_bytes(b))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v == 0 || v > 1 << 24 {
            bail!("implausible {what} ({v}) in checkpoint");
        }
        Ok(v as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.inner.read_exact(&mut b).context("checkpoint truncated")?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => bail!("trailing data after checkpoint payload"),
        }
    }
}

fn open_for_kind(path: &Path, kind: u8) -> Result<CheckpointReader<BufReader<File>>> {
    let file =
        File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    let mut reader = CheckpointReader {
        inner: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    reader
        .inner
        .read_exact(&mut magic)
        .context("checkpoint truncated")?;
    if magic != MAGIC {
        bail!("{} is not a checkpoint file (bad magic)", path.display());
    }
    let version = reader.u16()?;
    if version != FORMAT_VERSION {
        bail!("unsupported checkpoint format version {version}");
    }
    let found = reader.u8()?;
    if found != kind {
        let name = |k| if k == KIND_DETERMINISTIC { "deterministic" } else { "variational" };
        bail!(
            "{} holds a {} net, expected {}",
            path.display(),
            name(found),
            name(kind)
        );
    }
    Ok(reader)
}

pub fn save_variational(path: &Path, net: &VariationalNet, meta: &SidecarMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file =
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = CheckpointWriter {
        inner: BufWriter::new(file),
    };
    w.inner.write_all(&MAGIC)?;
    w.u16(FORMAT_VERSION)?;
    w.u8(KIND_VARIATIONAL)?;
    w.u64(net.class_count as u64)?;
    w.u64(net.layers.len() as u64)?;
    for layer in &net.layers {
        w.u8(activation_tag(layer.activation))?;
        w.u64(layer.in_dim() as u64)?;
        w.u64(layer.out_dim() as u64)?;
    }
    for layer in &net.layers {
        w.floats(layer.weights.mu.as_slice())?;
        w.floats(layer.weights.rho.as_slice())?;
        w.floats(layer.biases.mu.as_slice())?;
        w.floats(layer.biases.rho.as_slice())?;
    }
    w.inner.flush()?;
    write_sidecar(path, meta)
}

pub fn load_variational(path: &Path) -> Result<VariationalNet> {
    let mut r = open_for_kind(path, KIND_VARIATIONAL)?;
    let class_count = r.dim("class count")?;
    let layer_count = r.dim("layer count")?;
    let mut shapes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let activation = activation_from_tag(r.u8()?)?;
        let in_dim = r.dim("input dimension")?;
        let out_dim = r.dim("output dimension")?;
        shapes.push((activation, in_dim, out_dim));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for (index, (activation, in_dim, out_dim)) in shapes.into_iter().enumerate() {
        let w_mu = Tensor2::new(in_dim, out_dim, r.floats(in_dim * out_dim)?)?;
        let w_rho = Tensor2::new(in_dim, out_dim, r.floats(in_dim * out_dim)?)?;
        let b_mu = Tensor2::new(1, out_dim, r.floats(out_dim)?)?;
        let b_rho = Tensor2::new(1, out_dim, r.floats(out_dim)?)?;
        layers.push(VariationalLayer {
            weights: GaussianParamTensor::new(w_mu, w_rho)
                .with_context(|| format!("layer {index} weights are inconsistent"))?,
            biases: GaussianParamTensor::new(b_mu, b_rho)
                .with_context(|| format!("layer {index} biases are inconsistent"))?,
            activation,
        });
    }
    r.expect_end()?;
    VariationalNet::from_parts(layers, class_count)
        .with_context(|| format!("{} holds an inconsistent net", path.display()))
}

pub fn save_deterministic(path: &Path, net: &DeterministicNet, meta: &SidecarMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file =
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = CheckpointWriter {
        inner: BufWriter::new(file),
    };
    w.inner.write_all(&MAGIC)?;
    w.u16(FORMAT_VERSION)?;
    w.u8(KIND_DETERMINISTIC)?;
    w.u64(net.class_count as u64)?;
    w.u64(net.layers.len() as u64)?;
    for layer in &net.layers {
        w.u8(activation_tag(layer.activation))?;
        w.u64(layer.w.rows() as u64)?;
        w.u64(layer.w.cols() as u64)?;
    }
    for layer in &net.layers {
        w.floats(layer.w.as_slice())?;
        w.floats(layer.b.as_slice())?;
    }
    w.inner.flush()?;
    write_sidecar(path, meta)
}

pub fn load_deterministic(path: &Path) -> Result<DeterministicNet> {
    let mut r = open_for_kind(path, KIND_DETERMINISTIC)?;
    let class_count = r.dim("class count")?;
    let layer_count = r.dim("layer count")?;
    let mut shapes = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let activation = activation_from_tag(r.u8()?)?;
        let in_dim = r.dim("input dimension")?;
        let out_dim = r.dim("output dimension")?;
        shapes.push((activation, in_dim, out_dim));
    }
    let mut layers = Vec::with_capacity(layer_count);
    let mut previous_out: Option<usize> = None;
    for (index, (activation, in_dim, out_dim)) in shapes.into_iter().enumerate() {
        if let Some(prev) = previous_out {
            if prev != in_dim {
                bail!("layer {index} expects {in_dim} inputs but layer {} yields {prev}",
                    index - 1);
            }
        }
        previous_out = Some(out_dim);
        layers.push(DetLayer {
            w: Tensor2::new(in_dim, out_dim, r.floats(in_dim * out_dim)?)?,
            b: Tensor2::new(1, out_dim, r.floats(out_dim)?)?,
            activation,
        });
    }
    r.expect_end()?;
    match previous_out {
        Some(out) if out == class_count => {}
        _ => bail!("{} final layer does not match its class count", path.display()),
    }
    Ok(DeterministicNet {
        layers,
        class_count,
    })
}
