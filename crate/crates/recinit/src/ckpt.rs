//! Checkpoint container: `RICKPT01`, a little-endian u64 manifest length, a
//! tab-separated text manifest, then every tensor's little-endian f32
//! payload in manifest order.
//!
//! Manifest lines:
//! ```text
//! format  1
//! kind    encoder
//! meta    <key>   <value>
//! tensor  <name>  <d0,d1,...>  <trainable 0|1>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use recinit_core::corpus::{EvalInstance, ItemId, SequenceDataset, UserSequence};
use recinit_core::seqmodels::{BackboneConfig, BackboneKind, EmbeddingTable, Provenance, SeqModel};
use recinit_core::textenc::{Encoder, EncoderConfig};
use recinit_core::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RICKPT01";
pub const FORMAT_VERSION: u32 = 1;

/// Largest integer an f32 payload carries exactly.
const MAX_EXACT_INT: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    /// Trainability travels as each tensor's `requires_grad`.
    pub tensors: Vec<(String, Tensor)>,
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Format(format!("{what} {s:?} is empty or contains a tab or newline")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks meta `{key}`", self.kind)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("{} checkpoint meta `{key}` = {v:?} does not parse", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks tensor `{name}`", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_field("kind", &self.kind)?;
        let mut manifest = format!("format\t{FORMAT_VERSION}\nkind\t{}\n", self.kind);
        for (k, v) in &self.meta {
            check_field("meta key", k)?;
            if v.contains(['\t', '\n', '\r']) {
                return Err(Error::Format(format!("meta `{k}` value contains a tab or newline")));
            }
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for (name, t) in &self.tensors {
            check_field("tensor name", name)?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor\t{name}\t{}\t{}\n", dims.join(","), u8::from(t.requires_grad())));
        }
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(Error::Format(format!("manifest length {mlen} exceeds file")));
        }
        let manifest = std::str::from_utf8(&body[..mlen]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let mut payload = &body[mlen..];
        let mut kind = None;
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["format", v] => {
                    if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(bad(&format!("unsupported format version {v}")));
                    }
                }
                ["kind", k] => kind = Some(k.to_string()),
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dims, flag] => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad shape"))?;
                    let n: usize = shape.iter().product();
                    if payload.len() < n * 4 {
                        return Err(bad("payload shorter than manifest"));
                    }
                    let data = payload[..n * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    payload = &payload[n * 4..];
                    let trainable = match *flag {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("trainable flag must be 0 or 1")),
                    };
                    let t = Tensor::new(shape, data)?.with_requires_grad(trainable);
                    tensors.push((name.to_string(), t));
                }
                _ => return Err(bad("unrecognised record")),
            }
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            kind: kind.ok_or_else(|| Error::Format("manifest has no kind".into()))?,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(self)
    }

    fn store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            s.add(n, t.clone())?;
        }
        Ok(s)
    }
}

fn from_store(kind: &str, store: &ParamStore) -> Checkpoint {
    let mut c = Checkpoint::new(kind);
    c.tensors = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    c
}

/// `tokenizer` is the content hash of the vocabulary the encoder was built for.
pub fn encoder_to_ckpt(enc: &Encoder, tokenizer: &str) -> Checkpoint {
    let c = enc.config;
    let mut ck = from_store("encoder", &enc.store)
        .with_meta("layers", c.layers)
        .with_meta("heads", c.heads)
        .with_meta("dim", c.dim)
        .with_meta("ffn", c.ffn)
        .with_meta("max_tokens", c.max_tokens)
        .with_meta("vocab_size", c.vocab_size)
        .with_meta("dropout", c.dropout);
    ck.meta.insert("tokenizer".into(), tokenizer.to_string());
    ck
}

/// Returns the encoder and the tokenizer hash it was saved with.
pub fn encoder_from_ckpt(ck: Checkpoint) -> Result<(Encoder, String)> {
    let ck = ck.expect_kind("encoder")?;
    let config = EncoderConfig {
        layers: ck.meta_parse("layers")?,
        heads: ck.meta_parse("heads")?,
        dim: ck.meta_parse("dim")?,
        ffn: ck.meta_parse("ffn")?,
        max_tokens: ck.meta_parse("max_tokens")?,
        vocab_size: ck.meta_parse("vocab_size")?,
        dropout: ck.meta_parse("dropout")?,
    };
    let tok = ck.meta("tokenizer")?.to_string();
    Ok((Encoder::from_store(config, ck.store()?)?, tok))
}

pub fn model_to_ckpt(m: &SeqModel) -> Checkpoint {
    let c = m.config;
    let mut ck = from_store("backbone", &m.store)
        .with_meta("backbone", c.kind.as_str())
        .with_meta("layers", c.layers)
        .with_meta("heads", c.heads)
        .with_meta("dim", c.dim)
        .with_meta("max_items", c.max_items)
        .with_meta("dropout", c.dropout)
        .with_meta("mask_prob", c.mask_prob)
        .with_meta("provenance", m.provenance().as_str());
    if let Some(s) = &m.source {
        ck.meta.insert("source".into(), s.clone());
    }
    ck
}

pub fn model_from_ckpt(ck: Checkpoint) -> Result<SeqModel> {
    let ck = ck.expect_kind("backbone")?;
    let config = BackboneConfig {
        kind: BackboneKind::parse(ck.meta("backbone")?)?,
        layers: ck.meta_parse("layers")?,
        heads: ck.meta_parse("heads")?,
        dim: ck.meta_parse("dim")?,
        max_items: ck.meta_parse("max_items")?,
        dropout: ck.meta_parse("dropout")?,
        mask_prob: ck.meta_parse("mask_prob")?,
    };
    let provenance = Provenance::parse(ck.meta("provenance")?)?;
    let source = ck.meta.get("source").cloned();
    Ok(SeqModel::from_store(config, provenance, source, ck.store()?)?)
}

pub fn table_to_ckpt(t: &EmbeddingTable) -> Checkpoint {
    let mut ck = Checkpoint::new("table").with_meta("provenance", t.provenance().as_str());
    if let Some(s) = &t.source {
        ck.meta.insert("source".into(), s.clone());
    }
    ck.tensors
        .push(("matrix".into(), t.matrix().clone().with_requires_grad(t.trainable)));
    ck
}

pub fn table_from_ckpt(ck: Checkpoint) -> Result<EmbeddingTable> {
    let ck = ck.expect_kind("table")?;
    let m = ck.tensor("matrix")?.clone();
    let trainable = m.requires_grad();
    let mut t = EmbeddingTable::new(m.with_requires_grad(false), Provenance::parse(ck.meta("provenance")?)?, trainable)?;
    t.source = ck.meta.get("source").cloned();
    Ok(t)
}

/// Plain matrix export: `rows cols provenance\n` then row-major LE f32.
pub fn table_to_matrix_file(t: &EmbeddingTable) -> Vec<u8> {
    let mut out = format!("{} {} {}\n", t.rows(), t.dim(), t.provenance().as_str()).into_bytes();
    out.extend_from_slice(&t.matrix().le_bytes());
    out
}

pub fn table_from_matrix_file(bytes: &[u8]) -> Result<EmbeddingTable> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("matrix file has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("matrix header is not UTF-8".into()))?;
    let f: Vec<&str> = header.split(' ').collect();
    let [rows, cols, prov] = f.as_slice() else {
        return Err(Error::Format(format!("matrix header {header:?} is not `rows cols provenance`")));
    };
    let rows: usize = rows.parse().map_err(|_| Error::Format("bad row count".into()))?;
    let cols: usize = cols.parse().map_err(|_| Error::Format("bad column count".into()))?;
    let body = &bytes[nl + 1..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!("matrix body has {} bytes, header implies {}", body.len(), rows * cols * 4)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(EmbeddingTable::new(Tensor::new(vec![rows, cols], data)?, Provenance::parse(prov)?, false)?)
}

fn ints_tensor(values: &[u64]) -> Result<Tensor> {
    if let Some(v) = values.iter().find(|&&v| v > MAX_EXACT_INT) {
        return Err(Error::Format(format!("id {v} is too large for an f32 payload")));
    }
    // a zero-length tensor still needs a positive shape entry, so lead with the count
    let mut data = Vec::with_capacity(values.len() + 1);
    data.push(values.len() as f32);
    data.extend(values.iter().map(|&v| v as f32));
    Ok(Tensor::new(vec![data.len()], data)?)
}

fn tensor_ints(t: &Tensor) -> Result<Vec<u64>> {
    let d = t.data();
    let ok = |v: f32| v >= 0.0 && v.fract() == 0.0 && (v as u64) <= MAX_EXACT_INT;
    if d.is_empty() || !d.iter().all(|&v| ok(v)) || d[0] as usize != d.len() - 1 {
        return Err(Error::Format("integer tensor is malformed".into()));
    }
    Ok(d[1..].iter().map(|&v| v as u64).collect())
}

/// A built dataset: filtered sequences plus the frozen evaluation instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSnapshot {
    pub dataset: SequenceDataset,
    pub train: Vec<UserSequence>,
    pub valid: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
}

fn push_sequences(ck: &mut Checkpoint, prefix: &str, seqs: &[UserSequence]) -> Result<()> {
    let users: Vec<u64> = seqs.iter().map(|u| u.user as u64).collect();
    let lens: Vec<u64> = seqs.iter().map(|u| u.items.len() as u64).collect();
    let items: Vec<u64> = seqs.iter().flat_map(|u| u.items.iter().map(|&i| i as u64)).collect();
    ck.tensors.push((format!("{prefix}.user"), ints_tensor(&users)?));
    ck.tensors.push((format!("{prefix}.len"), ints_tensor(&lens)?));
    ck.tensors.push((format!("{prefix}.items"), ints_tensor(&items)?));
    Ok(())
}

fn read_sequences(ck: &Checkpoint, prefix: &str) -> Result<Vec<UserSequence>> {
    let users = tensor_ints(ck.tensor(&format!("{prefix}.user"))?)?;
    let lens = tensor_ints(ck.tensor(&format!("{prefix}.len"))?)?;
    let items = tensor_ints(ck.tensor(&format!("{prefix}.items"))?)?;
    if users.len() != lens.len() || lens.iter().sum::<u64>() as usize != items.len() {
        return Err(Error::Format(format!("{prefix}: sequence lengths do not add up")));
    }
    let mut at = 0;
    Ok(users
        .iter()
        .zip(&lens)
        .map(|(&u, &n)| {
            let s = UserSequence {
                user: u as u32,
                items: items[at..at + n as usize].iter().map(|&i| i as ItemId).collect(),
            };
            at += n as usize;
            s
        })
        .collect())
}

fn push_instances(ck: &mut Checkpoint, prefix: &str, inst: &[EvalInstance]) -> Result<()> {
    let seqs: Vec<UserSequence> = inst
        .iter()
        .map(|i| UserSequence {
            user: i.user,
            items: i.prefix.clone(),
        })
        .collect();
    push_sequences(ck, &format!("{prefix}.prefix"), &seqs)?;
    let pos: Vec<u64> = inst.iter().map(|i| i.positive as u64).collect();
    let neg: Vec<UserSequence> = inst
        .iter()
        .map(|i| UserSequence {
            user: i.user,
            items: i.negatives.clone(),
        })
        .collect();
    ck.tensors.push((format!("{prefix}.positive"), ints_tensor(&pos)?));
    push_sequences(ck, &format!("{prefix}.negatives"), &neg)
}

fn read_instances(ck: &Checkpoint, prefix: &str) -> Result<Vec<EvalInstance>> {
    let pre = read_sequences(ck, &format!("{prefix}.prefix"))?;
    let pos = tensor_ints(ck.tensor(&format!("{prefix}.positive"))?)?;
    let neg = read_sequences(ck, &format!("{prefix}.negatives"))?;
    if pre.len() != pos.len() || pre.len() != neg.len() {
        return Err(Error::Format(format!("{prefix}: instance fields differ in length")));
    }
    Ok(pre
        .into_iter()
        .zip(pos)
        .zip(neg)
        .map(|((p, positive), n)| EvalInstance {
            user: p.user,
            prefix: p.items,
            positive: positive as ItemId,
            negatives: n.items,
        })
        .collect())
}

pub fn dataset_to_ckpt(s: &DatasetSnapshot) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("dataset").with_meta("num_items", s.dataset.num_items);
    push_sequences(&mut ck, "users", &s.dataset.users)?;
    push_sequences(&mut ck, "train", &s.train)?;
    push_instances(&mut ck, "valid", &s.valid)?;
    push_instances(&mut ck, "test", &s.test)?;
    Ok(ck)
}

pub fn dataset_from_ckpt(ck: Checkpoint) -> Result<DatasetSnapshot> {
    let ck = ck.expect_kind("dataset")?;
    Ok(DatasetSnapshot {
        dataset: SequenceDataset {
            users: read_sequences(&ck, "users")?,
            num_items: ck.meta_parse("num_items")?,
        },
        train: read_sequences(&ck, "train")?,
        valid: read_instances(&ck, "valid")?,
        test: read_instances(&ck, "test")?,
    })
}
