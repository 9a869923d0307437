//! Versioned text checkpoints.
//!
//! ```text
//! serl-checkpoint 1
//! temperature 0.05
//! frozen 1
//! array extractor.0.weight 2 16
//! <32 space-separated values>
//! array extractor.0.bias 1 16
//! ...
//! array classifier.weight 5 8
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a load after a
//! save reproduces the parameters bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Classifier, FeatureExtractor, Linear, Model};
use crate::tensor::Tensor;

pub const MAGIC: &str = "serl-checkpoint";
pub const VERSION: u32 = 1;

pub fn to_string(model: &Model) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    let cl = &model.classifier;
    writeln!(out, "temperature {}", cl.temperature).unwrap();
    writeln!(out, "frozen {}", u8::from(cl.is_frozen())).unwrap();
    let mut push = |name: String, t: &Tensor| {
        writeln!(out, "array {name} {} {}", t.rows(), t.cols()).unwrap();
        let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    };
    for (i, l) in model.extractor.layers.iter().enumerate() {
        push(format!("extractor.{i}.weight"), &l.weight);
        push(format!("extractor.{i}.bias"), &l.bias);
    }
    push("classifier.weight".into(), &cl.weight);
    out
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_str(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: u64,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        let (i, l) = self.inner.next().ok_or_else(|| Error::Parse {
            line: self.line + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })?;
        self.line = i as u64 + 1;
        Ok(l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next(key)?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{key} <value>`")))
    }

    fn array(&mut self) -> Result<Option<(String, Tensor)>> {
        let Some((i, header)) = self.inner.next() else {
            return Ok(None);
        };
        self.line = i as u64 + 1;
        if header.trim().is_empty() {
            return self.array();
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [tag, name, rows, cols] = parts[..] else {
            return Err(self.err("expected `array <name> <rows> <cols>`"));
        };
        if tag != "array" {
            return Err(self.err(format!("expected `array`, found `{tag}`")));
        }
        let rows: usize = rows.parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| self.err("bad column count"))?;
        let body = self.next("array values")?;
        let data = body
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| self.err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(rows, cols, data).map_err(|e| self.err(e.to_string()))?;
        Ok(Some((name.to_string(), t)))
    }
}

pub fn from_str(text: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let version = lines.keyed(MAGIC)?;
    if version != VERSION.to_string() {
        return Err(lines.err(format!("unsupported checkpoint version {version}")));
    }
    let temperature: f64 = lines
        .keyed("temperature")?
        .parse()
        .map_err(|_| lines.err("bad temperature"))?;
    let frozen = match lines.keyed("frozen")? {
        "0" => false,
        "1" => true,
        other => return Err(lines.err(format!("bad frozen flag `{other}`"))),
    };

    let mut layers: Vec<Linear> = Vec::new();
    let mut head = None;
    while let Some((name, t)) = lines.array()? {
        if name == "classifier.weight" {
            head = Some(t);
            continue;
        }
        let idx = layers.len();
        if name == format!("extractor.{idx}.weight") {
            layers.push(Linear {
                weight: t,
                bias: Tensor::zeros(0, 0),
            });
        } else if idx > 0 && name == format!("extractor.{}.bias", idx - 1) {
            layers[idx - 1].bias = t;
        } else {
            return Err(lines.err(format!("unexpected array `{name}`")));
        }
    }
    let weight = head.ok_or_else(|| lines.err("missing classifier.weight"))?;
    if layers.is_empty() {
        return Err(lines.err("no extractor layers"));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.bias.shape() != (1, l.weight.cols()) {
            return Err(lines.err(format!("extractor.{i}.bias missing or misshapen")));
        }
        if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
            return Err(lines.err(format!("extractor.{i}.weight does not chain")));
        }
    }
    let mut classifier = Classifier::new(weight, temperature);
    if frozen {
        classifier.freeze();
    }
    Ok(Model {
        extractor: FeatureExtractor { layers },
        classifier,
    })
}
