//! Binary weights container for trained networks and template banks.
//!
//! Layout, all integers little-endian u32 and all floats f32:
//!   magic "SPNW1"
//!   input shape: 3 values (channels, height, width)
//!   record count
//!   per record: kind, header length, header values, weights tensor, bias
//!   tensor. Tensors are ndim, extents, then data. Stateless layers store
//!   two empty tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerParams, LayerSpec, Network, NetworkSpec, PATCH};
use crate::template::TemplateBank;
use crate::tensor::{ConvSpec, Padding, Tensor};

const MAGIC: &[u8; 5] = b"SPNW1";

const KIND_CONV: u32 = 0;
const KIND_MAXPOOL: u32 = 1;
const KIND_DENSE: u32 = 2;
const KIND_RELU: u32 = 3;
const KIND_SIGMOID: u32 = 4;
const KIND_TEMPLATES: u32 = 5;

// A tensor larger than this is corruption, not a model.
const MAX_TENSOR_LEN: u64 = 1 << 28;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer {
            buf: MAGIC.to_vec(),
        }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize, what: &str) -> Result<()> {
        u32::try_from(v)
            .map_err(|_| Error::invalid("weights", format!("{what} {v} exceeds u32")))
            .map(|v| self.u32(v))
    }

    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.usize(t.shape().len(), "tensor rank")?;
        for &e in t.shape() {
            self.usize(e, "tensor extent")?;
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::parse(
            format!("{} at byte {}", self.path.display(), self.pos),
            reason.into(),
        )
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!("file truncated reading {what}")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let ndim = self.u32(what)? as usize;
        if ndim > 8 {
            return Err(self.fail(format!("{what} rank {ndim} is implausible")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len: u64 = 1;
        for _ in 0..ndim {
            let e = self.u32(what)? as usize;
            len = len.saturating_mul(e as u64);
            shape.push(e);
        }
        if ndim == 0 {
            return Ok(Tensor::empty());
        }
        if len > MAX_TENSOR_LEN {
            return Err(self.fail(format!("{what} with {len} elements is implausible")));
        }
        let bytes = self.take(len as usize * 4, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::from_vec(&shape, data)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn layer_record(layer: &LayerSpec) -> Result<(u32, Vec<u32>)> {
    Ok(match layer {
        LayerSpec::Conv(c) => {
            let pad = match c.padding {
                Padding::Valid => 0,
                Padding::Same => 1,
            };
            (
                KIND_CONV,
                vec![
                    c.out_channels as u32,
                    c.kernel_h as u32,
                    c.kernel_w as u32,
                    pad,
                    c.stride as u32,
                ],
            )
        }
        LayerSpec::MaxPool { size } => (KIND_MAXPOOL, vec![*size as u32]),
        LayerSpec::Dense { out } => (KIND_DENSE, vec![*out as u32]),
        LayerSpec::Relu => (KIND_RELU, vec![]),
        LayerSpec::Sigmoid => (KIND_SIGMOID, vec![]),
    })
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let mut w = Writer::new();
    for &e in &net.spec.input {
        w.usize(e, "input extent")?;
    }
    w.usize(net.spec.layers.len(), "record count")?;
    for (layer, params) in net.spec.layers.iter().zip(&net.params) {
        let (kind, header) = layer_record(layer)?;
        w.u32(kind);
        w.usize(header.len(), "header length")?;
        for v in header {
            w.u32(v);
        }
        w.tensor(&params.weights)?;
        w.tensor(&params.bias)?;
    }
    std::fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

pub fn save_templates(path: &Path, bank: &TemplateBank) -> Result<()> {
    let mut w = Writer::new();
    for e in [1usize, PATCH, PATCH] {
        w.usize(e, "input extent")?;
    }
    w.u32(1);
    w.u32(KIND_TEMPLATES);
    w.u32(1);
    w.usize(bank.len(), "template count")?;
    let mut stacked = Vec::with_capacity(bank.len() * PATCH * PATCH);
    for t in bank.templates() {
        stacked.extend_from_slice(t.data());
    }
    w.tensor(&Tensor::from_vec(&[bank.len(), PATCH, PATCH], stacked)?)?;
    w.tensor(&Tensor::empty())?;
    std::fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

/// Either kind of payload the container holds.
#[derive(Debug)]
pub enum WeightsFile {
    Network(Network),
    Templates(TemplateBank),
}

impl WeightsFile {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WeightsFile::Network(_) => "network",
            WeightsFile::Templates(_) => "templates",
        }
    }
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(r.fail("not a weights file (bad magic)"));
    }
    let input = [
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
    ];
    let count = r.u32("record count")? as usize;
    if count > 1024 {
        return Err(r.fail(format!("{count} records is implausible")));
    }

    let mut layers = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    let mut templates: Option<TemplateBank> = None;
    for i in 0..count {
        let what = format!("record {i}");
        let kind = r.u32(&what)?;
        let header_len = r.u32(&what)? as usize;
        if header_len > 16 {
            return Err(r.fail(format!("{what}: header length {header_len} is implausible")));
        }
        let mut header = Vec::with_capacity(header_len);
        for _ in 0..header_len {
            header.push(r.u32(&what)?);
        }
        let need = match kind {
            KIND_CONV => 5,
            KIND_MAXPOOL | KIND_DENSE | KIND_TEMPLATES => 1,
            KIND_RELU | KIND_SIGMOID => 0,
            other => return Err(r.fail(format!("{what}: unknown record kind {other}"))),
        };
        if header.len() != need {
            return Err(r.fail(format!(
                "{what}: kind {kind} expects {need} header values, got {}",
                header.len()
            )));
        }
        let weights = r.tensor(&what)?;
        let bias = r.tensor(&what)?;
        match kind {
            KIND_CONV => {
                let padding = match header[3] {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    other => return Err(r.fail(format!("{what}: unknown padding code {other}"))),
                };
                layers.push(LayerSpec::Conv(ConvSpec {
                    out_channels: header[0] as usize,
                    kernel_h: header[1] as usize,
                    kernel_w: header[2] as usize,
                    padding,
                    stride: header[4] as usize,
                }));
                params.push(LayerParams { weights, bias });
            }
            KIND_MAXPOOL => {
                layers.push(LayerSpec::MaxPool {
                    size: header[0] as usize,
                });
                params.push(LayerParams { weights, bias });
            }
            KIND_DENSE => {
                layers.push(LayerSpec::Dense {
                    out: header[0] as usize,
                });
                params.push(LayerParams { weights, bias });
            }
            KIND_RELU => {
                layers.push(LayerSpec::Relu);
                params.push(LayerParams { weights, bias });
            }
            KIND_SIGMOID => {
                layers.push(LayerSpec::Sigmoid);
                params.push(LayerParams { weights, bias });
            }
            KIND_TEMPLATES => {
                if count != 1 {
                    return Err(r.fail("template banks must be the only record"));
                }
                let t = header[0] as usize;
                if weights.shape() != [t, PATCH, PATCH] {
                    return Err(r.fail(format!(
                        "template tensor shape {:?} does not match count {t}",
                        weights.shape()
                    )));
                }
                let mut list = Vec::with_capacity(t);
                for k in 0..t {
                    let plane = &weights.data()[k * PATCH * PATCH..(k + 1) * PATCH * PATCH];
                    list.push(Tensor::from_vec(&[1, PATCH, PATCH], plane.to_vec())?);
                }
                templates = Some(TemplateBank::new(list)?);
            }
            _ => unreachable!("kind validated above"),
        }
    }
    if !r.done() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if let Some(bank) = templates {
        return Ok(WeightsFile::Templates(bank));
    }
    let net = Network::from_parts(NetworkSpec { input, layers }, params)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Ok(WeightsFile::Network(net))
}

pub fn load_network(path: &Path) -> Result<Network> {
    match load_weights(path)? {
        WeightsFile::Network(net) => Ok(net),
        WeightsFile::Templates(_) => Err(Error::invalid(
            "load_network",
            format!("{} holds a template bank, not a network", path.display()),
        )),
    }
}

pub fn load_templates(path: &Path) -> Result<TemplateBank> {
    match load_weights(path)? {
        WeightsFile::Templates(bank) => Ok(bank),
        WeightsFile::Network(_) => Err(Error::invalid(
            "load_templates",
            format!("{} holds a network, not a template bank", path.display()),
        )),
    }
}
