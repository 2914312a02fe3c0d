use std::collections::BTreeMap;
use std::path::Path;

use super::{DsFeat, NetworkConfig, NetworkError};
use crate::autodiff::{ParamSet, Tensor};
use crate::binio::{parse_key_values, put_u16, put_u32, Cursor, DecodeError};

const MAGIC: &[u8; 4] = b"DSFW";
const VERSION: u16 = 1;

/// Raw content of a weight file: named layers plus the trailing key=value
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub layers: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

fn format_err(e: DecodeError) -> NetworkError {
    NetworkError::Format(e.to_string())
}

pub fn encode_weight_file(file: &WeightFile) -> Result<Vec<u8>, NetworkError> {
    let count = u16::try_from(file.layers.len())
        .map_err(|_| NetworkError::Format("more than 65535 layers".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(&mut out, count);
    for (name, t) in &file.layers {
        let name_len = u16::try_from(name.len())
            .map_err(|_| NetworkError::Format(format!("layer name too long: {name}")))?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        let lead = shape.iter().take(3).take_while(|&&e| e == 1).count();
        let extents = &shape[lead..];
        out.push(extents.len() as u8);
        for &e in extents {
            let e = u32::try_from(e)
                .map_err(|_| NetworkError::Format(format!("layer {name} extent too large")))?;
            put_u32(&mut out, e);
        }
        crate::binio::put_f32s(&mut out, t.data());
    }
    for (k, v) in &file.meta {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    Ok(out)
}

pub fn decode_weight_file(bytes: &[u8]) -> Result<WeightFile, NetworkError> {
    let mut c = Cursor::new(bytes);
    c.magic(MAGIC).map_err(format_err)?;
    let version = c.u16("version").map_err(format_err)?;
    if version != VERSION {
        return Err(NetworkError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = c.u16("layer count").map_err(format_err)?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16("name length").map_err(format_err)? as usize;
        let at = c.pos();
        let name = std::str::from_utf8(c.take(len, "layer name").map_err(format_err)?)
            .map_err(|_| NetworkError::Format(format!("byte {at}: layer name is not UTF-8")))?
            .to_string();
        let rank = c.u8("rank").map_err(format_err)? as usize;
        if !(1..=4).contains(&rank) {
            return Err(NetworkError::Format(format!(
                "byte {}: layer {name} has rank {rank}, expected 1 to 4",
                c.pos() - 1
            )));
        }
        let mut shape = [1usize; 4];
        for slot in &mut shape[4 - rank..] {
            *slot = c.u32("extent").map_err(format_err)? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| NetworkError::Format(format!("layer {name} is too large")))?;
        let data = c.f32s(n, "layer data").map_err(format_err)?;
        layers.push((name, Tensor::new(shape, data)?));
    }
    let at = c.pos();
    let text = std::str::from_utf8(c.rest())
        .map_err(|_| NetworkError::Format(format!("byte {at}: config block is not UTF-8")))?;
    let meta = parse_key_values(text)
        .map_err(|(line, msg)| NetworkError::Format(format!("config block line {line}: {msg}")))?
        .into_iter()
        .collect();
    Ok(WeightFile { layers, meta })
}

pub fn write_weight_file(path: &Path, file: &WeightFile) -> Result<(), NetworkError> {
    std::fs::write(path, encode_weight_file(file)?)?;
    Ok(())
}

pub fn read_weight_file(path: &Path) -> Result<WeightFile, NetworkError> {
    decode_weight_file(&std::fs::read(path)?)
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize, NetworkError> {
    let v = meta
        .get(key)
        .ok_or_else(|| NetworkError::Format(format!("config block lacks {key}")))?;
    v.parse()
        .map_err(|_| NetworkError::Format(format!("config block: {key}={v} is not an integer")))
}

impl NetworkConfig {
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("input_channels".into(), self.input_channels.to_string()),
            ("downsample_count".into(), self.downsample_count.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("convs_per_block".into(), self.convs_per_block.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("input_scaling".into(), "unit_range".into()),
        ])
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, NetworkError> {
        if let Some(s) = meta.get("input_scaling") {
            if s != "unit_range" {
                return Err(NetworkError::Format(format!("unsupported input_scaling={s}")));
            }
        }
        let cfg = Self {
            input_channels: meta_usize(meta, "input_channels")?,
            downsample_count: meta_usize(meta, "downsample_count")?,
            base_channels: meta_usize(meta, "base_channels")?,
            convs_per_block: meta_usize(meta, "convs_per_block")?,
            seed: meta_usize(meta, "seed")? as u64,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl DsFeat {
    /// Serializes parameters and config, adding `extra` entries to the
    /// trailing block.
    pub fn to_weight_file(&self, extra: &BTreeMap<String, String>) -> WeightFile {
        let mut meta = self.config.to_meta();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        WeightFile {
            layers: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            meta,
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), NetworkError> {
        write_weight_file(path, &self.to_weight_file(&BTreeMap::new()))
    }

    /// Rebuilds a model from the config recorded in the file.
    pub fn from_weight_file(file: &WeightFile) -> Result<Self, NetworkError> {
        let config = NetworkConfig::from_meta(&file.meta)?;
        let mut model = Self::from_parts(config, ParamSet::new());
        for (name, shape) in model.config.layer_shapes() {
            model.params.push(name, crate::autodiff::Tensor::zeros(shape));
        }
        model.assign(file)?;
        Ok(model)
    }

    pub fn load_weights(path: &Path) -> Result<Self, NetworkError> {
        Self::from_weight_file(&read_weight_file(path)?)
    }

    /// Loads a weight file into this model's existing layout.
    pub fn load_into(&mut self, path: &Path) -> Result<(), NetworkError> {
        self.assign(&read_weight_file(path)?)
    }

    fn assign(&mut self, file: &WeightFile) -> Result<(), NetworkError> {
        let mut incoming = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            let Some((_, t)) = file.layers.iter().find(|(n, _)| *n == p.name) else {
                return Err(NetworkError::MissingLayer {
                    layer: p.name.clone(),
                });
            };
            if t.shape() != p.tensor.shape() {
                return Err(NetworkError::LayerMismatch {
                    layer: p.name.clone(),
                    expected: p.tensor.shape(),
                    found: t.shape(),
                });
            }
            incoming.push(t.clone());
        }
        if file.layers.len() != self.params.len() {
            return Err(NetworkError::Format(format!(
                "file has {} layers, model has {}",
                file.layers.len(),
                self.params.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(incoming) {
            p.tensor = t;
        }
        Ok(())
    }
}
