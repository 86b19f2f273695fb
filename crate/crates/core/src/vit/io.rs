//! Model persistence: one tensor file with canonical names plus a JSON
//! sidecar holding the architecture and kept widths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Block, LayerNorm, VitConfig, VitError, VitModel};
use crate::linalg::Matrix;
use crate::tensorfile::{read_tensorfile, write_tensorfile, Tensor, TensorFile, TensorFileError};

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Shape(#[from] VitError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: VitConfig,
    pub mlp_hidden: Vec<usize>,
    pub qk_dims: Vec<Vec<usize>>,
}

/// `model.ctf` → `model.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

fn mat(m: &Matrix) -> Tensor {
    Tensor::from_f64(vec![m.rows(), m.cols()], m.data())
}

fn vec1(v: &[f64]) -> Tensor {
    Tensor::from_f64(vec![v.len()], v)
}

fn get_mat(f: &TensorFile, name: &str, rows: usize, cols: usize) -> Result<Matrix, ModelFileError> {
    let t = f.require(name)?;
    if t.shape != [rows, cols] {
        return Err(VitError::ShapeMismatch(format!("{name}: {:?}, expected [{rows}, {cols}]", t.shape)).into());
    }
    Ok(Matrix::from_vec(rows, cols, t.to_f64()))
}

fn get_vec(f: &TensorFile, name: &str, len: usize) -> Result<Vec<f64>, ModelFileError> {
    let t = f.require(name)?;
    if t.shape != [len] {
        return Err(VitError::ShapeMismatch(format!("{name}: {:?}, expected [{len}]", t.shape)).into());
    }
    Ok(t.to_f64())
}

impl VitModel {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config,
            mlp_hidden: self.blocks.iter().map(Block::mlp_hidden).collect(),
            qk_dims: self.blocks.iter().map(|b| b.qk_dims.clone()).collect(),
        }
    }

    pub fn to_tensorfile(&self) -> TensorFile {
        let mut e: Vec<(String, Tensor)> = vec![
            ("patch_embed.weight".into(), mat(&self.patch_w)),
            ("patch_embed.bias".into(), vec1(&self.patch_b)),
            ("cls_token".into(), vec1(&self.cls_token)),
            ("pos_embed".into(), mat(&self.pos_embed)),
            ("norm.gamma".into(), vec1(&self.norm.gamma)),
            ("norm.beta".into(), vec1(&self.norm.beta)),
            ("head.weight".into(), mat(&self.head_w)),
            ("head.bias".into(), vec1(&self.head_b)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block.{i}.{s}");
            e.extend([
                (p("ln1.gamma"), vec1(&b.ln1.gamma)),
                (p("ln1.beta"), vec1(&b.ln1.beta)),
                (p("attn.wq"), mat(&b.wq)),
                (p("attn.bq"), vec1(&b.bq)),
                (p("attn.wk"), mat(&b.wk)),
                (p("attn.bk"), vec1(&b.bk)),
                (p("attn.wv"), mat(&b.wv)),
                (p("attn.bv"), vec1(&b.bv)),
                (p("attn.wo"), mat(&b.wo)),
                (p("attn.bo"), vec1(&b.bo)),
                (p("ln2.gamma"), vec1(&b.ln2.gamma)),
                (p("ln2.beta"), vec1(&b.ln2.beta)),
                (p("mlp.w1"), mat(&b.w1)),
                (p("mlp.b1"), vec1(&b.b1)),
                (p("mlp.w2"), mat(&b.w2)),
                (p("mlp.b2"), vec1(&b.b2)),
            ]);
        }
        TensorFile::from_entries(e).expect("canonical names are unique")
    }

    pub fn from_tensorfile(f: &TensorFile, meta: &ModelMeta) -> Result<VitModel, ModelFileError> {
        let c = meta.config;
        c.validate()?;
        if meta.mlp_hidden.len() != c.depth || meta.qk_dims.len() != c.depth {
            return Err(ModelFileError::Sidecar("kept widths do not match depth".into()));
        }
        let d = c.dim;
        let ln = |g: &str, b: &str| -> Result<LayerNorm, ModelFileError> {
            Ok(LayerNorm { gamma: get_vec(f, g, d)?, beta: get_vec(f, b, d)? })
        };
        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let p = |s: &str| format!("block.{i}.{s}");
            let qk: usize = meta.qk_dims[i].iter().sum();
            let hid = meta.mlp_hidden[i];
            blocks.push(Block {
                ln1: ln(&p("ln1.gamma"), &p("ln1.beta"))?,
                wq: get_mat(f, &p("attn.wq"), d, qk)?,
                bq: get_vec(f, &p("attn.bq"), qk)?,
                wk: get_mat(f, &p("attn.wk"), d, qk)?,
                bk: get_vec(f, &p("attn.bk"), qk)?,
                wv: get_mat(f, &p("attn.wv"), d, d)?,
                bv: get_vec(f, &p("attn.bv"), d)?,
                wo: get_mat(f, &p("attn.wo"), d, d)?,
                bo: get_vec(f, &p("attn.bo"), d)?,
                ln2: ln(&p("ln2.gamma"), &p("ln2.beta"))?,
                w1: get_mat(f, &p("mlp.w1"), hid, d)?,
                b1: get_vec(f, &p("mlp.b1"), hid)?,
                w2: get_mat(f, &p("mlp.w2"), d, hid)?,
                b2: get_vec(f, &p("mlp.b2"), d)?,
                qk_dims: meta.qk_dims[i].clone(),
            });
        }
        let model = VitModel {
            config: c,
            patch_w: get_mat(f, "patch_embed.weight", d, c.patch_len())?,
            patch_b: get_vec(f, "patch_embed.bias", d)?,
            cls_token: get_vec(f, "cls_token", d)?,
            pos_embed: get_mat(f, "pos_embed", c.tokens(), d)?,
            blocks,
            norm: ln("norm.gamma", "norm.beta")?,
            head_w: get_mat(f, "head.weight", c.num_classes, d)?,
            head_b: get_vec(f, "head.bias", c.num_classes)?,
        };
        model.validate()?;
        Ok(model)
    }

    /// Writes the tensor file and its JSON sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
        let path = path.as_ref();
        write_tensorfile(path, &self.to_tensorfile())?;
        let json = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        std::fs::write(sidecar_path(path), json + "\n").map_err(TensorFileError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VitModel, ModelFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(sidecar_path(path)).map_err(TensorFileError::from)?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| ModelFileError::Sidecar(e.to_string()))?;
        VitModel::from_tensorfile(&read_tensorfile(path)?, &meta)
    }
}
