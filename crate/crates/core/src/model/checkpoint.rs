//! Model checkpoints: tensors in the container format, the config as JSON
//! next to them (`<path>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{LayerWeights, Model, ModelConfig, LAYER_TENSORS};
use crate::error::{Error, Result};
use crate::numeric::{DType, TensorFile};

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    pub fn to_tensor_file(&self, dtype: DType) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("tok_emb", dtype, self.tok_emb.clone());
        f.push("pos_emb", dtype, self.pos_emb.clone());
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, m) in LAYER_TENSORS.iter().zip(lw.tensors()) {
                f.push(format!("layers.{l}.{name}"), dtype, m.clone());
            }
        }
        f.push("lnf_gain", dtype, self.lnf_gain.clone());
        f.push("lnf_bias", dtype, self.lnf_bias.clone());
        f
    }

    pub fn from_tensor_file(config: ModelConfig, file: &TensorFile) -> Result<Self> {
        let mut m = Model::zeroed(config)?;
        let (v, d, s) = (m.config.vocab_size, m.config.d_model, m.config.max_seq);
        m.tok_emb = file.expect("tok_emb", v, d)?;
        m.pos_emb = file.expect("pos_emb", s, d)?;
        for (l, lw) in m.layers.iter_mut().enumerate() {
            let lw: &mut LayerWeights = lw;
            for (name, slot) in LAYER_TENSORS.iter().zip(lw.tensors_mut()) {
                let (r, c) = slot.shape();
                *slot = file.expect(&format!("layers.{l}.{name}"), r, c)?;
            }
        }
        m.lnf_gain = file.expect("lnf_gain", 1, d)?;
        m.lnf_bias = file.expect("lnf_bias", 1, d)?;
        Ok(m)
    }

    /// Writes `path` (tensors) and `<path>.json` (config).
    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        self.to_tensor_file(dtype).save(path)?;
        fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let cfg_text = fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Format(format!("model config {}: {e}", cfg_path.display())))?;
        let config: ModelConfig = serde_json::from_str(&cfg_text)?;
        Model::from_tensor_file(config, &TensorFile::load(path)?)
    }

    /// Rounds every weight to the nearest `f32`, so that an `f32`
    /// checkpoint reloads to exactly this model.
    pub fn round_to_f32(&mut self) {
        let r = |m: &mut crate::Matrix| *m = m.map(|v| v as f32 as f64);
        r(&mut self.tok_emb);
        r(&mut self.pos_emb);
        r(&mut self.lnf_gain);
        r(&mut self.lnf_bias);
        for l in &mut self.layers {
            for m in l.tensors_mut() {
                r(m);
            }
        }
    }
}
