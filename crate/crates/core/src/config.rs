//! Text run configuration: one `key=value` per line, `#` comments allowed.
//! Emission is canonical (sorted keys, every key present).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Fusion, Head, ModelConfig};
use crate::qghc::VariantKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab = crate::data::Vocab::default();
        Self {
            model: ModelConfig::toy(vocab.words.len(), vocab.answers.len()),
            train: TrainConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn optional<V: std::str::FromStr>(key: &str, v: &str, none: &str) -> Result<Option<V>> {
    if v.trim() == none {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl RunConfig {
    /// Model keys as emitted into config files and checkpoint headers.
    pub fn model_entries(m: &ModelConfig) -> BTreeMap<&'static str, String> {
        let q = &m.qghc;
        BTreeMap::from([
            ("model.answers", m.answers.to_string()),
            ("model.c_in", q.c_in.to_string()),
            ("model.c_out", q.c_out.to_string()),
            ("model.d_q", q.d_q.to_string()),
            ("model.dynamic", q.dynamic.to_string()),
            ("model.embed", m.embed.to_string()),
            (
                "model.encoder_widths",
                format!("{},{}", m.encoder_widths[0], m.encoder_widths[1]),
            ),
            ("model.fusion", m.fusion.name().to_string()),
            ("model.groups", q.groups.to_string()),
            ("model.head", m.head.name().to_string()),
            ("model.hidden", q.hidden.to_string()),
            (
                "model.index_seed",
                q.index_seed.map_or("none".into(), |s| s.to_string()),
            ),
            ("model.kind", m.kind.name().to_string()),
            ("model.mid_width", q.mid_width.map_or("auto".into(), |s| s.to_string())),
            ("model.modules", q.modules.to_string()),
            ("model.vocab", m.vocab.to_string()),
        ])
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut e = Self::model_entries(&self.model);
        let t = &self.train;
        e.insert("train.batch", t.batch.to_string());
        e.insert("train.epochs", t.epochs.to_string());
        e.insert("train.eval_every", t.eval_every.to_string());
        e.insert("train.lr", t.lr.to_string());
        e.insert("train.seed", t.seed.to_string());
        e
    }

    /// Applies one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model.answers" => m.answers = parse(key, value)?,
            "model.c_in" => m.qghc.c_in = parse(key, value)?,
            "model.c_out" => m.qghc.c_out = parse(key, value)?,
            "model.d_q" => m.qghc.d_q = parse(key, value)?,
            "model.dynamic" => m.qghc.dynamic = parse(key, value)?,
            "model.embed" => m.embed = parse(key, value)?,
            "model.encoder_widths" => {
                let w: Vec<usize> = value.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?;
                m.encoder_widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs two comma-separated widths")))?;
            }
            "model.fusion" => m.fusion = Fusion::parse(value.trim())?,
            "model.groups" => m.qghc.groups = parse(key, value)?,
            "model.head" => m.head = Head::parse(value.trim())?,
            "model.hidden" => m.qghc.hidden = parse(key, value)?,
            "model.index_seed" => m.qghc.index_seed = optional(key, value, "none")?,
            "model.kind" => m.kind = VariantKind::parse(value.trim()).map_err(|e| Error::Config(e.to_string()))?,
            "model.mid_width" => m.qghc.mid_width = optional(key, value, "auto")?,
            "model.modules" => m.qghc.modules = parse(key, value)?,
            "model.vocab" => m.vocab = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Starts from the defaults and applies every line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(k.trim(), v)?;
        }
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn emit(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Builds a model config from checkpoint header entries.
    pub fn model_from_entries(entries: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let mut c = Self::default();
        for key in Self::model_entries(&c.model).keys() {
            let v = entries
                .get(key.strip_prefix("model.").expect("model key"))
                .ok_or_else(|| Error::Config(format!("missing {key}")))?;
            c.set(key, v)?;
        }
        c.model.validate()?;
        Ok(c.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emit_parse_is_canonical() {
        let mut c = RunConfig::default();
        c.set("model.head", "attention").unwrap();
        c.set("model.index_seed", "7").unwrap();
        c.set("train.lr", "0.001").unwrap();
        let text = c.emit();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.emit(), text);
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("model.width=3").is_err());
        assert!(RunConfig::parse("train.batch=1").is_err());
        assert!(RunConfig::parse("model.groups=x").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("# comment\n\ntrain.epochs=2\n").is_ok());
    }
}
