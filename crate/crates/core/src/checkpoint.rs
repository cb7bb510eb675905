//! Single-file checkpoints: magic, format version, JSON header echoing the
//! training config, then little-endian parameter and Adam-moment blobs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::{Float, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MSKDEPTH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub params: Vec<TensorEntry>,
}

pub struct Checkpoint<F> {
    pub config: TrainConfig,
    pub step: u64,
    pub model: Model<F>,
    pub opt: Adam<F>,
}

fn dtype<F: Float>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn put<F: Float>(buf: &mut Vec<u8>, t: &Tensor<F>) {
    for &x in t.data() {
        if std::mem::size_of::<F>() == 4 {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint<F: Float>(path: &Path, config: &TrainConfig, step: u64, model: &Model<F>, opt: &Adam<F>) -> Result<()> {
    let header = Header {
        config: config.clone(),
        step,
        adam_t: opt.t,
        dtype: dtype::<F>().into(),
        params: model
            .store
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.store.iter() {
        put(&mut buf, &p.value);
    }
    for t in opt.m.iter().chain(&opt.v) {
        put(&mut buf, t);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor<F: Float>(&mut self, shape: &[usize], width: usize) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * width)?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    F::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                } else {
                    F::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        Ok(Tensor::new(shape.to_vec(), data))
    }
}

pub fn read_header(path: &Path) -> Result<Header> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&buf, path).map(|(h, _)| h)
}

fn parse_header(buf: &[u8], path: &Path) -> Result<(Header, usize)> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, r.pos))
}

/// Loads into precision `F`, rebuilding the architecture from the stored
/// config and checking every parameter name and shape.
pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, pos) = parse_header(&buf, path)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return Err(Error::format(path, format!("unknown dtype {d}"))),
    };
    let mut model = Model::<F>::new(header.config.model.clone(), header.config.seed)?;
    if model.store.len() != header.params.len() {
        return Err(Error::format(
            path,
            format!("{} parameters stored, architecture has {}", header.params.len(), model.store.len()),
        ));
    }
    let mut r = Reader { buf: &buf, pos, path };
    for (p, e) in model.store.iter_mut().zip(&header.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::format(
                path,
                format!("parameter {} {:?} does not match stored {} {:?}", p.name, p.value.shape(), e.name, e.shape),
            ));
        }
        p.value = std::rc::Rc::new(r.tensor(&e.shape, width)?);
    }
    let mut opt = Adam::new(header.config.adam(), &model.store);
    for t in opt.m.iter_mut() {
        *t = r.tensor(&t.shape().to_vec(), width)?;
    }
    for t in opt.v.iter_mut() {
        *t = r.tensor(&t.shape().to_vec(), width)?;
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    opt.t = header.adam_t;
    Ok(Checkpoint { config: header.config, step: header.step, model, opt })
}
