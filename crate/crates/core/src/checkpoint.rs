//! QCK1 checkpoints: the model configuration, the vocabulary it was
//! trained on, an index of named tensors (parameters, then normalization
//! buffers), and a little-endian `f32` blob in index order.
//! Predicted kernels are recomputed on every forward pass and never stored.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, FormatError, Result};
use crate::format::{crc32, frame, read_file, unframe, write_file, Header};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, Role};

const MAGIC: &[u8; 4] = b"QCK1";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub vocab: Vocab,
    pub model: Model,
    pub store: ParamStore<f32>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// `(name, role tag, shape)` of every stored tensor, in blob order.
fn index(store: &ParamStore<f32>) -> Vec<(String, &'static str, Vec<usize>)> {
    let params = store
        .metas()
        .iter()
        .map(|m| (m.name.clone(), m.role.tag(), m.shape.clone()));
    let buffers = store
        .buffer_names()
        .iter()
        .zip(store.buffers())
        .map(|(n, t)| (n.clone(), "buffer", t.shape().to_vec()));
    params.chain(buffers).collect()
}

pub fn to_bytes(model: &ModelConfig, vocab: &Vocab, store: &ParamStore<f32>) -> Vec<u8> {
    let mut blob =
        Vec::with_capacity(4 * (store.total_elements() + store.buffers().iter().map(|b| b.numel()).sum::<usize>()));
    for t in store.values().iter().chain(store.buffers()) {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Header::default();
    h.push("version", VERSION);
    for (k, v) in RunConfig::model_entries(model) {
        h.push(&format!("config.{}", k.strip_prefix("model.").expect("model key")), v);
    }
    h.push("vocab", vocab.words.join(","));
    h.push("answers", vocab.answers.join(","));
    let mut offset = 0;
    for (name, role, shape) in index(store) {
        h.push("tensor", format!("{name},{role},{},{offset}", shape_text(&shape)));
        offset += 4 * shape.iter().product::<usize>();
    }
    h.push("blob_crc32", format!("{:08x}", crc32(&blob)));
    frame(MAGIC, &h.render(), &blob)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (text, blob) = unframe(MAGIC, bytes)?;
    let h = Header::parse(text)?;
    let version: u32 = h.parse_value("version")?;
    if version != VERSION {
        return Err(FormatError::Header(format!("unsupported checkpoint version {version}")).into());
    }
    let expected = h.parse_hex("blob_crc32")?;
    let computed = crc32(blob);
    if computed != expected {
        return Err(FormatError::Checksum {
            what: "checkpoint blob".into(),
            expected,
            computed,
        }
        .into());
    }
    let config = RunConfig::model_from_entries(&h.section("config."))?;
    let vocab = Vocab {
        words: h.get("vocab")?.split(',').map(str::to_string).collect(),
        answers: h.get("answers")?.split(',').map(str::to_string).collect(),
    };
    let mut store = ParamStore::<f32>::new(0);
    let model = Model::declare(&mut store, &config)?;
    let want = index(&store);
    let got: Vec<&str> = h.all("tensor").collect();
    if got.len() != want.len() {
        return Err(FormatError::Header(format!("{} tensors stored, model declares {}", got.len(), want.len())).into());
    }
    let mut offset = 0usize;
    let n_params = store.len();
    for (i, (line, (name, role, shape))) in got.iter().zip(&want).enumerate() {
        let expect = format!("{name},{role},{},{offset}", shape_text(shape));
        if *line != expect {
            return Err(FormatError::Header(format!("tensor entry {line:?}, expected {expect:?}")).into());
        }
        let n = shape.iter().product::<usize>();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(FormatError::Truncated(format!("tensor {name}")).into());
        }
        let values: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let dst = if i < n_params {
            &mut store.values_mut()[i]
        } else {
            &mut store.buffers_mut()[i - n_params]
        };
        dst.data_mut().copy_from_slice(&values);
        offset = end;
    }
    if offset != blob.len() {
        return Err(FormatError::Header(format!("{} trailing blob bytes", blob.len() - offset)).into());
    }
    Ok(Checkpoint { vocab, model, store })
}

pub fn save(path: &Path, model: &ModelConfig, vocab: &Vocab, store: &ParamStore<f32>) -> Result<()> {
    write_file(path, &to_bytes(model, vocab, store))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&read_file(path)?)
}

/// Errors unless `data` uses exactly the checkpoint's words and answers.
pub fn check_vocab(checkpoint: &Vocab, data: &Vocab) -> Result<()> {
    if checkpoint.answers != data.answers {
        return Err(FormatError::VocabMismatch(format!(
            "answer list differs: checkpoint [{}], dataset [{}]",
            checkpoint.answers.join(","),
            data.answers.join(",")
        ))
        .into());
    }
    if checkpoint.words != data.words {
        return Err(FormatError::VocabMismatch("question vocabulary differs".into()).into());
    }
    Ok(())
}

/// Role tag of every stored tensor, for inspection.
pub fn roles(bytes: &[u8]) -> Result<Vec<(String, Option<Role>)>> {
    let (text, _) = unframe(MAGIC, bytes)?;
    Header::parse(text)?
        .all("tensor")
        .map(|l| {
            let mut parts = l.split(',');
            let name = parts.next().unwrap_or_default().to_string();
            let tag = parts
                .next()
                .ok_or_else(|| Error::Format(FormatError::Header(format!("bad tensor entry {l:?}"))))?;
            Ok((name, Role::from_tag(tag)))
        })
        .collect()
}
