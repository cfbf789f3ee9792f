//! Encoder checkpoints.
//!
//! Layout: the first line is a compact JSON manifest; everything after the
//! newline is the payload, a concatenation of tensors in the text format.
//! Entry offsets and lengths are byte positions within the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};
use crate::layer::{CodaConfig, CodaLayerParams, FrozenLayerWeights, TrainableLayerParams};
use crate::tensor::{Matrix, Rng};
use crate::training::Encoder;

pub const FORMAT: &str = "coda-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub section: Section,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: CodaConfig,
    pub layers: usize,
    pub entries: Vec<Entry>,
}

fn named_tensors(model: &Encoder) -> Vec<(String, Section, &Matrix)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, m) in layer.frozen.tensors() {
            out.push((format!("layer{i}.{name}"), Section::Frozen, m));
        }
        for (name, m) in layer.trainable.tensors() {
            out.push((format!("layer{i}.{name}"), Section::Trainable, m));
        }
    }
    out.push(("head_w".to_string(), Section::Trainable, &model.head_w));
    out.push(("head_b".to_string(), Section::Trainable, &model.head_b));
    out
}

pub fn to_string(model: &Encoder) -> Result<String> {
    let mut payload = String::new();
    let mut entries = Vec::new();
    for (name, section, m) in named_tensors(model) {
        let text = m.to_text();
        entries.push(Entry {
            name,
            section,
            rows: m.rows(),
            cols: m.cols(),
            offset: payload.len(),
            length: text.len(),
        });
        payload.push_str(&text);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        layers: model.layers.len(),
        entries,
    };
    let mut out = serde_json::to_string(&manifest)?;
    out.push('\n');
    out.push_str(&payload);
    Ok(out)
}

pub fn from_str(text: &str) -> Result<Encoder> {
    let (head, payload) = text
        .split_once('\n')
        .ok_or_else(|| CodaError::Parse("checkpoint has no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_str(head)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CodaError::Parse(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;

    // Build a correctly shaped skeleton, then overwrite every tensor.
    let cfg = &manifest.config;
    let mut rng = Rng::new(0);
    let mut model = Encoder {
        config: cfg.clone(),
        layers: (0..manifest.layers)
            .map(|_| CodaLayerParams {
                frozen: FrozenLayerWeights::zeros(cfg.d, cfg.d_ffn, cfg.heads),
                trainable: TrainableLayerParams::init(cfg, &mut rng),
            })
            .collect(),
        head_w: Matrix::zeros(cfg.d, 2),
        head_b: Matrix::zeros(1, 2),
    };
    let expected: Vec<(String, Section, (usize, usize))> = named_tensors(&model)
        .into_iter()
        .map(|(n, s, m)| (n, s, m.shape()))
        .collect();
    if expected.len() != manifest.entries.len() {
        return Err(CodaError::Parse(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.entries.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, section, shape)) in manifest.entries.iter().zip(&expected) {
        if &entry.name != name || entry.section != *section || (entry.rows, entry.cols) != *shape {
            return Err(CodaError::Parse(format!(
                "entry {:?} ({:?} {}x{}) does not match expected {name:?} ({section:?} {}x{})",
                entry.name, entry.section, entry.rows, entry.cols, shape.0, shape.1
            )));
        }
        let chunk = payload
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| CodaError::Parse(format!("entry {name:?} runs past the payload")))?;
        let m = Matrix::from_text(chunk)?;
        if m.shape() != *shape {
            return Err(CodaError::Parse(format!("payload of {name:?} has shape {:?}", m.shape())));
        }
        loaded.push(m);
    }
    let mut slots: Vec<&mut Matrix> = Vec::new();
    for layer in &mut model.layers {
        slots.extend(layer.frozen.tensors_mut().into_iter().map(|(_, m)| m));
        slots.extend(layer.trainable.tensors_mut().into_iter().map(|(_, m)| m));
    }
    slots.push(&mut model.head_w);
    slots.push(&mut model.head_b);
    for (slot, m) in slots.into_iter().zip(loaded) {
        *slot = m;
    }
    Ok(model)
}

pub fn save(model: &Encoder, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Encoder> {
    from_str(&std::fs::read_to_string(path)?)
}
