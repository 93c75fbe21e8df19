//! On-disk model bundles: a `meta.json` plus one checksummed tensor file per
//! array.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! magic    12 bytes  "STOPREC_TNSR"
//! version  u32
//! name     u32 length + UTF-8 bytes
//! dtype    u8        0 = f32, 1 = u16, 2 = u32
//! rank     u32
//! dims     rank x u64
//! payload  product(dims) elements
//! crc32    u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::graph_embedding::StructEmbedding;
use crate::recommender::Model;
use crate::text_autoencoder::{DenseLayer, SdaeParams};
use crate::topic_model::TopicState;

pub const MAGIC: &[u8; 12] = b"STOPREC_TNSR";
pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U16(_) => 1,
            TensorData::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U16(_) => "u16",
            TensorData::U32(_) => "u32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32_from(name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Self {
        Self {
            name: name.to_string(),
            shape,
            data: TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
        }
    }

    fn matrix(name: &str, m: &Array2<f64>) -> Self {
        Self::f32_from(name, vec![m.nrows(), m.ncols()], m.iter().copied())
    }

    fn vector(name: &str, v: impl ExactSizeIterator<Item = f64>) -> Self {
        Self::f32_from(name, vec![v.len()], v)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Bundle(format!(
                "tensor {} has shape {:?} but {} elements",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        let mut out = Vec::with_capacity(64 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.data.tag());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Bundle(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(bad("tensor file is truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("tensor checksum mismatch"));
        }
        let mut r = Reader { buf: body, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a tensor file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "tensor format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("tensor shape overflows"))?;
        let data = match tag {
            0 => TensorData::F32(
                r.take(count.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            ),
            1 => TensorData::U16(
                r.take(count.checked_mul(2).ok_or_else(|| bad("tensor too large"))?)?
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            ),
            2 => TensorData::U32(
                r.take(count.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("chunk")))
                    .collect(),
            ),
            t => return Err(Error::Bundle(format!("unknown dtype tag {t}"))),
        };
        if r.at != body.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self { name, shape, data })
    }

    fn f32_values(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            other => Err(Error::Bundle(format!(
                "tensor {} is {}, expected f32",
                self.name,
                other.dtype_name()
            ))),
        }
    }

    fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Bundle(format!(
                "tensor {} has shape {:?}, expected {shape:?}",
                self.name, self.shape
            )));
        }
        Ok(())
    }

    fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Bundle(format!("tensor {} is not a matrix", self.name)));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.f32_values()?)
            .map_err(|e| Error::Bundle(format!("tensor {}: {e}", self.name)))
    }

    fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Bundle(format!("tensor {} is not a vector", self.name)));
        }
        Ok(Array1::from(self.f32_values()?))
    }

    fn scalar(&self) -> Result<f64> {
        self.expect_shape(&[1])?;
        Ok(self.f32_values()?[0])
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Bundle("tensor file is truncated".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaeMeta {
    pub layers: usize,
    pub corruption_rate: f64,
    pub weight_decay: f64,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u32,
    pub k: usize,
    pub num_papers: usize,
    pub num_datasets: usize,
    pub vocab_size: usize,
    pub config: serde_json::Value,
    pub sdae: SdaeMeta,
    pub paper_ids: Vec<String>,
    pub dataset_ids: Vec<String>,
    pub words: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

fn write_tensors(dir: &Path, tensors: &[Tensor]) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir)?;
    tensors
        .iter()
        .map(|t| {
            let bytes = t.encode()?;
            let file = format!("{}.tensor", t.name);
            fs::write(dir.join(&file), &bytes)?;
            let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"));
            Ok(TensorEntry {
                name: t.name.clone(),
                file,
                dtype: t.data.dtype_name().to_string(),
                shape: t.shape.clone(),
                crc32: crc,
            })
        })
        .collect()
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?;
    let t = Tensor::decode(&bytes).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?;
    if t.name != entry.name || t.shape != entry.shape || t.data.dtype_name() != entry.dtype {
        return Err(Error::Bundle(format!(
            "{} does not match its meta entry",
            path.display()
        )));
    }
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"));
    if crc != entry.crc32 {
        return Err(Error::Bundle(format!("{} checksum differs from meta", path.display())));
    }
    Ok(t)
}

fn ragged(name: &str, rows: &[Vec<u16>]) -> [Tensor; 2] {
    let flat: Vec<u16> = rows.iter().flatten().copied().collect();
    [
        Tensor {
            name: name.to_string(),
            shape: vec![flat.len()],
            data: TensorData::U16(flat),
        },
        Tensor {
            name: format!("{name}_lengths"),
            shape: vec![rows.len()],
            data: TensorData::U32(rows.iter().map(|r| r.len() as u32).collect()),
        },
    ]
}

fn unragged(flat: &Tensor, lengths: &Tensor) -> Result<Vec<Vec<u16>>> {
    let (TensorData::U16(flat), TensorData::U32(lengths)) = (&flat.data, &lengths.data) else {
        return Err(Error::Bundle("assignment tensors have the wrong dtype".into()));
    };
    if lengths.iter().map(|&l| l as usize).sum::<usize>() != flat.len() {
        return Err(Error::Bundle("assignment lengths do not cover the assignments".into()));
    }
    let mut at = 0;
    Ok(lengths
        .iter()
        .map(|&l| {
            let row = flat[at..at + l as usize].to_vec();
            at += l as usize;
            row
        })
        .collect())
}

fn sdae_tensors(sdae: &SdaeParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (kind, layers) in [("enc", &sdae.encoders), ("dec", &sdae.decoders)] {
        for (i, layer) in layers.iter().enumerate() {
            out.push(Tensor::matrix(&format!("sdae_{kind}{i}_weight"), &layer.weight));
            out.push(Tensor::vector(
                &format!("sdae_{kind}{i}_bias"),
                layer.bias.iter().copied(),
            ));
        }
    }
    out
}

fn structure_tensors(s: &StructEmbedding) -> Vec<Tensor> {
    vec![
        Tensor::matrix("struct_center", &s.center),
        Tensor::matrix("struct_context", &s.context),
        Tensor::vector("struct_negative_dist", s.negative_dist.iter().copied()),
    ]
}

fn model_tensors(model: &Model) -> Vec<Tensor> {
    let p = &model.params;
    let mut out = vec![
        Tensor::matrix("V", &p.v),
        Tensor::vector("kappa", [p.kappa].into_iter()),
        Tensor::vector("beta0", [p.beta0].into_iter()),
        Tensor::vector("beta1", p.beta1.iter().copied()),
        Tensor::matrix("psi_w", &model.topics.psi_w),
        Tensor::matrix("psi_d", &model.topics.psi_d),
    ];
    out.extend(ragged("z_w", &model.topics.z_w));
    out.extend(ragged("z_d", &model.topics.z_d));
    out.extend(sdae_tensors(&model.sdae));
    out.extend(structure_tensors(&model.structure));
    out
}

fn write_meta(dir: &Path, meta: &BundleMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(dir.join(META_FILE), text)?;
    Ok(())
}

/// Writes `model` into `dir`. The output depends only on the model.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    let entries = write_tensors(dir, &model_tensors(model))?;
    let meta = BundleMeta {
        format_version: FORMAT_VERSION,
        k: model.num_topics(),
        num_papers: model.paper_ids.len(),
        num_datasets: model.dataset_ids.len(),
        vocab_size: model.words.len(),
        config: model.config.clone(),
        sdae: SdaeMeta {
            layers: model.sdae.encoders.len(),
            corruption_rate: model.sdae.corruption_rate,
            weight_decay: model.sdae.weight_decay,
            leaky_slope: model.sdae.leaky_slope,
        },
        paper_ids: model.paper_ids.clone(),
        dataset_ids: model.dataset_ids.clone(),
        words: model.words.clone(),
        tensors: entries,
    };
    write_meta(dir, &meta)
}

struct Loaded<'a> {
    dir: &'a Path,
    meta: &'a BundleMeta,
}

impl Loaded<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .meta
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Bundle(format!("meta lists no tensor named {name}")))?;
        read_tensor(self.dir, entry)
    }

    fn sdae(&self, meta: &SdaeMeta) -> Result<SdaeParams> {
        let layer = |kind: &str, i: usize| -> Result<DenseLayer> {
            let weight = self.get(&format!("sdae_{kind}{i}_weight"))?.to_matrix()?;
            let bias = self.get(&format!("sdae_{kind}{i}_bias"))?.to_vector()?;
            Ok(DenseLayer { weight, bias })
        };
        let params = SdaeParams {
            encoders: (0..meta.layers).map(|i| layer("enc", i)).collect::<Result<_>>()?,
            decoders: (0..meta.layers).map(|i| layer("dec", i)).collect::<Result<_>>()?,
            corruption_rate: meta.corruption_rate,
            weight_decay: meta.weight_decay,
            leaky_slope: meta.leaky_slope,
        };
        params.validate()?;
        Ok(params)
    }

    fn structure(&self) -> Result<StructEmbedding> {
        Ok(StructEmbedding {
            center: self.get("struct_center")?.to_matrix()?,
            context: self.get("struct_context")?.to_matrix()?,
            negative_dist: self.get("struct_negative_dist")?.to_vector()?.to_vec(),
        })
    }
}

fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Bundle(format!(
            "bundle format version {}, this build reads {FORMAT_VERSION}",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Reads a bundle written by [`save_model`], checking every checksum and shape.
pub fn load_model(dir: &Path) -> Result<Model> {
    let meta = read_meta(dir)?;
    let l = Loaded { dir, meta: &meta };
    let (k, n, d, w) = (meta.k, meta.num_papers, meta.num_datasets, meta.vocab_size);
    if meta.paper_ids.len() != n || meta.dataset_ids.len() != d || meta.words.len() != w {
        return Err(Error::Bundle("id tables disagree with the declared sizes".into()));
    }
    let v = l.get("V")?;
    v.expect_shape(&[n, k])?;
    let beta1 = l.get("beta1")?;
    beta1.expect_shape(&[k])?;
    let psi_w = l.get("psi_w")?;
    psi_w.expect_shape(&[k, w])?;
    let psi_d = l.get("psi_d")?;
    psi_d.expect_shape(&[k, d])?;
    let params = FusionParams {
        v: v.to_matrix()?,
        kappa: l.get("kappa")?.scalar()?,
        beta0: l.get("beta0")?.scalar()?,
        beta1: beta1.to_vector()?,
    };
    let topics = TopicState {
        psi_w: psi_w.to_matrix()?,
        psi_d: psi_d.to_matrix()?,
        z_w: unragged(&l.get("z_w")?, &l.get("z_w_lengths")?)?,
        z_d: unragged(&l.get("z_d")?, &l.get("z_d_lengths")?)?,
    };
    if topics.z_w.len() != n || topics.z_d.len() != n {
        return Err(Error::Bundle("assignments do not cover every paper".into()));
    }
    if topics.z_w.iter().chain(&topics.z_d).flatten().any(|&z| z as usize >= k) {
        return Err(Error::Bundle("topic assignment out of range".into()));
    }
    Model::new(
        params,
        topics,
        l.sdae(&meta.sdae)?,
        l.structure()?,
        meta.paper_ids.clone(),
        meta.dataset_ids.clone(),
        meta.words.clone(),
        meta.config.clone(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartMeta {
    format_version: u32,
    kind: String,
    sdae: Option<SdaeMeta>,
    /// Seed the random walks were generated with, so they can be regenerated.
    walk_seed: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn read_part(dir: &Path, kind: &str) -> Result<PartMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?;
    let meta: PartMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION || meta.kind != kind {
        return Err(Error::Bundle(format!(
            "{} is not a {kind} bundle of version {FORMAT_VERSION}",
            dir.display()
        )));
    }
    Ok(meta)
}

fn write_part(dir: &Path, meta: &PartMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(dir.join(META_FILE), text)?;
    Ok(())
}

/// Stores a pretrained autoencoder on its own.
pub fn save_sdae(sdae: &SdaeParams, dir: &Path) -> Result<()> {
    let tensors = write_tensors(dir, &sdae_tensors(sdae))?;
    write_part(
        dir,
        &PartMeta {
            format_version: FORMAT_VERSION,
            kind: "sdae".into(),
            sdae: Some(SdaeMeta {
                layers: sdae.encoders.len(),
                corruption_rate: sdae.corruption_rate,
                weight_decay: sdae.weight_decay,
                leaky_slope: sdae.leaky_slope,
            }),
            walk_seed: None,
            tensors,
        },
    )
}

pub fn load_sdae(dir: &Path) -> Result<SdaeParams> {
    let meta = read_part(dir, "sdae")?;
    let bundle = BundleMeta {
        format_version: FORMAT_VERSION,
        k: 0,
        num_papers: 0,
        num_datasets: 0,
        vocab_size: 0,
        config: serde_json::Value::Null,
        sdae: meta
            .sdae
            .clone()
            .ok_or_else(|| Error::Bundle("sdae bundle lacks layer metadata".into()))?,
        paper_ids: vec![],
        dataset_ids: vec![],
        words: vec![],
        tensors: meta.tensors,
    };
    Loaded { dir, meta: &bundle }.sdae(&bundle.sdae)
}

/// Stores a pretrained structure embedding and the seed of its walks.
pub fn save_structure(s: &StructEmbedding, walk_seed: u64, dir: &Path) -> Result<()> {
    let tensors = write_tensors(dir, &structure_tensors(s))?;
    write_part(
        dir,
        &PartMeta {
            format_version: FORMAT_VERSION,
            kind: "structure".into(),
            sdae: None,
            walk_seed: Some(walk_seed),
            tensors,
        },
    )
}

pub fn load_structure(dir: &Path) -> Result<(StructEmbedding, u64)> {
    let meta = read_part(dir, "structure")?;
    let seed = meta
        .walk_seed
        .ok_or_else(|| Error::Bundle("structure bundle lacks its walk seed".into()))?;
    let bundle = BundleMeta {
        format_version: FORMAT_VERSION,
        k: 0,
        num_papers: 0,
        num_datasets: 0,
        vocab_size: 0,
        config: serde_json::Value::Null,
        sdae: SdaeMeta {
            layers: 0,
            corruption_rate: 0.0,
            weight_decay: 0.0,
            leaky_slope: 0.0,
        },
        paper_ids: vec![],
        dataset_ids: vec![],
        words: vec![],
        tensors: meta.tensors,
    };
    let s = Loaded { dir, meta: &bundle }.structure()?;
    if s.center.dim() != s.context.dim() || s.negative_dist.len() != s.center.nrows() {
        return Err(Error::Bundle("structure tensors disagree in shape".into()));
    }
    Ok((s, seed))
}
