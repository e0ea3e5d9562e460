//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CNRM"                      magic
//! u32                         format version (1)
//! u32 len, [u8; len]          RNG algorithm identifier (UTF-8)
//! u32 rank, [u32; rank]       per-example input shape
//! u32                         layer count (the softmax head counts as a layer)
//! per layer:
//!   u8                        kind tag
//!   u32 n, [u64; n]           kind-specific metadata
//!   u32 m, m × tensor         parameters / statistics
//! u8                          1 if an EMA section follows
//!   f64                       decay
//!   u32 m, m × tensor         shadow parameters in `Network::params` order
//!
//! tensor: u32 rank, [u32; rank] dims, [f64; product(dims)] values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::SimilarityKind;
use crate::layers::{BatchNorm, ConvLayer, DenseLayer, LayerNorm, Relu, SoftmaxRescale};
use crate::network::{Layer, Network};
use crate::rng::RNG_ALGORITHM;
use crate::tensor::{PatchGeometry, Tensor};
use crate::train::Ema;

pub const MAGIC: &[u8; 4] = b"CNRM";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_LAYERNORM: u8 = 4;
const TAG_BATCHNORM: u8 = 5;
const TAG_SOFTMAX: u8 = 6;

/// A network plus its optional parameter average.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub ema: Option<Ema>,
    /// Generator identifier recorded by the writer.
    pub rng_algorithm: String,
}

impl Checkpoint {
    pub fn new(network: Network, ema: Option<Ema>) -> Self {
        Self {
            network,
            ema,
            rng_algorithm: RNG_ALGORITHM.to_string(),
        }
    }

    /// Network with averaged parameters substituted when present.
    pub fn eval_network(&self) -> Result<Network> {
        let mut net = self.network.clone();
        if let Some(e) = &self.ema {
            e.apply_to(&mut net)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.rng_algorithm.len() as u32);
        w.0.extend_from_slice(self.rng_algorithm.as_bytes());
        let shape = self.network.input_shape();
        w.u32(shape.len() as u32);
        shape.iter().for_each(|&d| w.u32(d as u32));

        let layers = self.network.layers();
        w.u32(layers.len() as u32 + 1);
        for layer in layers {
            let (tag, meta, tensors): (u8, Vec<u64>, Vec<&Tensor>) = match layer {
                Layer::Dense(l) => (
                    TAG_DENSE,
                    vec![u64::from(l.kind().tag()), l.bias_input().to_bits()],
                    l.params().into_iter().map(|p| &p.value).collect(),
                ),
                Layer::Conv(l) => {
                    let g = l.geometry();
                    (
                        TAG_CONV,
                        [
                            u64::from(l.kind().tag()),
                            l.bias_input().to_bits(),
                            g.channels as u64,
                            g.height as u64,
                            g.width as u64,
                            g.field.0 as u64,
                            g.field.1 as u64,
                            g.stride as u64,
                        ]
                        .to_vec(),
                        l.params().into_iter().map(|p| &p.value).collect(),
                    )
                }
                Layer::Relu(_) => (TAG_RELU, Vec::new(), Vec::new()),
                Layer::LayerNorm(l) => (
                    TAG_LAYERNORM,
                    vec![l.width() as u64, u64::from(l.is_affine())],
                    l.params().into_iter().map(|p| &p.value).collect(),
                ),
                Layer::BatchNorm(l) => {
                    let mut t: Vec<&Tensor> = l.params().into_iter().map(|p| &p.value).collect();
                    t.push(l.running_mean());
                    t.push(l.running_var());
                    (TAG_BATCHNORM, vec![l.features() as u64, u64::from(l.is_affine())], t)
                }
            };
            w.layer(tag, &meta, &tensors);
        }
        w.layer(TAG_SOFTMAX, &[], &[&self.network.head().param().value]);

        match &self.ema {
            None => w.0.push(0),
            Some(e) => {
                w.0.push(1);
                w.f64(e.decay());
                w.u32(e.shadow().len() as u32);
                e.shadow().iter().for_each(|t| w.tensor(t));
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes (expected CNRM)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let rng_algorithm = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("RNG identifier is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;

        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        let mut head = None;
        for i in 0..count {
            let tag = r.u8()?;
            let n_meta = r.u32()? as usize;
            let meta = (0..n_meta).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n_t = r.u32()? as usize;
            let mut tensors = (0..n_t).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?.into_iter();
            let bad = |what: &str| Error::Checkpoint(format!("layer {i}: {what}"));
            let kernel = |m: u64| {
                u8::try_from(m)
                    .ok()
                    .and_then(SimilarityKind::from_tag)
                    .ok_or_else(|| bad("unknown kernel tag"))
            };
            let expect = |meta_len: usize, tensor_len: usize| {
                if meta.len() == meta_len && n_t == tensor_len {
                    Ok(())
                } else {
                    Err(bad("unexpected record layout"))
                }
            };
            match tag {
                TAG_DENSE => {
                    let kind = kernel(meta.first().copied().unwrap_or(u64::MAX))?;
                    expect(2, if kind == SimilarityKind::WeightNorm { 2 } else { 1 })?;
                    let w = tensors.next().unwrap();
                    let layer = DenseLayer::from_augmented(kind, w, tensors.next(), f64::from_bits(meta[1]))?;
                    layers.push(Layer::Dense(layer));
                }
                TAG_CONV => {
                    let kind = kernel(meta.first().copied().unwrap_or(u64::MAX))?;
                    expect(8, if kind == SimilarityKind::WeightNorm { 2 } else { 1 })?;
                    let m: Vec<usize> = meta[2..].iter().map(|&v| v as usize).collect();
                    let geo = PatchGeometry::new(m[0], m[1], m[2], (m[3], m[4]), m[5])?;
                    let w = tensors.next().unwrap();
                    let layer = ConvLayer::from_augmented(kind, geo, w, tensors.next(), f64::from_bits(meta[1]))?;
                    layers.push(Layer::Conv(layer));
                }
                TAG_RELU => {
                    expect(0, 0)?;
                    layers.push(Layer::Relu(Relu::new()));
                }
                TAG_LAYERNORM => {
                    let affine = meta.get(1) == Some(&1);
                    expect(2, if affine { 2 } else { 0 })?;
                    let mut ln = LayerNorm::new(meta[0] as usize, affine)?;
                    let mut params = ln.params_mut();
                    for p in params.iter_mut() {
                        p.value = checked(tensors.next().unwrap(), p.value.shape())?;
                    }
                    layers.push(Layer::LayerNorm(ln));
                }
                TAG_BATCHNORM => {
                    let affine = meta.get(1) == Some(&1);
                    expect(2, if affine { 4 } else { 2 })?;
                    let mut bn = BatchNorm::new(meta[0] as usize, affine);
                    for p in bn.params_mut() {
                        p.value = checked(tensors.next().unwrap(), p.value.shape())?;
                    }
                    let mean = tensors.next().unwrap();
                    let var = tensors.next().unwrap();
                    layers.push(Layer::BatchNorm(bn.with_running(mean, var)?));
                }
                TAG_SOFTMAX if i + 1 == count => {
                    expect(0, 1)?;
                    let s = checked(tensors.next().unwrap(), &[1])?;
                    head = Some(SoftmaxRescale::new(s.data()[0]));
                }
                _ => return Err(bad(&format!("unexpected kind tag {tag}"))),
            }
        }
        let head = head.ok_or_else(|| Error::Checkpoint("missing softmax head".into()))?;
        let network = Network::from_layers(input_shape, layers, head)?;

        let ema = match r.u8()? {
            0 => None,
            1 => {
                let decay = r.f64()?;
                let n = r.u32()? as usize;
                let shadow = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let params = network.params();
                if shadow.len() != params.len()
                    || shadow.iter().zip(&params).any(|(s, p)| s.shape() != p.value.shape())
                {
                    return Err(Error::Checkpoint("EMA shadow does not match the network".into()));
                }
                Some(Ema::from_shadow(decay, shadow))
            }
            f => return Err(Error::Checkpoint(format!("bad EMA flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            network,
            ema,
            rng_algorithm,
        })
    }
}

fn checked(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        Ok(t)
    } else {
        Err(Error::Checkpoint(format!(
            "tensor shape {:?} where {shape:?} was expected",
            t.shape()
        )))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        t.shape().iter().for_each(|&d| self.u32(d as u32));
        t.data().iter().for_each(|&v| self.f64(v));
    }

    fn layer(&mut self, tag: u8, meta: &[u64], tensors: &[&Tensor]) {
        self.0.push(tag);
        self.u32(meta.len() as u32);
        meta.iter().for_each(|m| self.0.extend_from_slice(&m.to_le_bytes()));
        self.u32(tensors.len() as u32);
        tensors.iter().for_each(|t| self.tensor(t));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
