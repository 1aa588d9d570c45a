//! Toy-model checkpoints stored in the `KPT1` container.

use std::path::Path;

use kronykit_core::ffn::{DenseFfn, FactorizedFfn};
use kronykit_core::io::{Container, Dtype, Role};
use kronykit_core::{Error, Result};

use crate::config::ToyModelConfig;
use crate::data::Vocab;
use crate::model::{Attention, Block, Ffn, LayerNorm, Model};

pub const KIND_KEY: &str = "kind";
pub const KIND: &str = "kronykit-toy-model";
pub const CONFIG_KEY: &str = "config";
pub const VOCAB_KEY: &str = "vocab";

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

fn ffn_name(layer: usize, part: &str) -> String {
    format!("h.{layer}.ffn.{part}")
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let m = &self.model;
        let mut c = Container::new();
        c.metadata.insert(KIND_KEY.into(), KIND.into());
        c.metadata.insert(
            CONFIG_KEY.into(),
            serde_json::to_string(&m.config).map_err(|e| Error::Data(e.to_string()))?,
        );
        c.metadata.insert(VOCAB_KEY.into(), self.vocab.to_json());
        let f64_ = Dtype::F64;
        c.push_matrix("wte", &m.wte, f64_)?;
        c.push_matrix("wpe", &m.wpe, f64_)?;
        for (l, b) in m.blocks.iter().enumerate() {
            let p = format!("h.{l}");
            c.push_vector(&format!("{p}.ln1.gain"), Role::Dense, &b.ln1.gain, f64_)?;
            c.push_vector(&format!("{p}.ln1.bias"), Role::Bias, &b.ln1.bias, f64_)?;
            c.push_matrix(&format!("{p}.attn.w_qkv"), &b.attn.w_qkv, f64_)?;
            c.push_vector(&format!("{p}.attn.b_qkv"), Role::Bias, &b.attn.b_qkv, f64_)?;
            c.push_matrix(&format!("{p}.attn.w_proj"), &b.attn.w_proj, f64_)?;
            c.push_vector(&format!("{p}.attn.b_proj"), Role::Bias, &b.attn.b_proj, f64_)?;
            c.push_vector(&format!("{p}.ln2.gain"), Role::Dense, &b.ln2.gain, f64_)?;
            c.push_vector(&format!("{p}.ln2.bias"), Role::Bias, &b.ln2.bias, f64_)?;
            match &b.ffn {
                Ffn::Dense(d) => {
                    c.push_matrix(&ffn_name(l, "w_in"), &d.w_in, f64_)?;
                    c.push_vector(&ffn_name(l, "b_in"), Role::Bias, &d.b_in, f64_)?;
                    c.push_matrix(&ffn_name(l, "w_out"), &d.w_out, f64_)?;
                    c.push_vector(&ffn_name(l, "b_out"), Role::Bias, &d.b_out, f64_)?;
                }
                Ffn::Factorized(k) => {
                    c.push_kron_sum(&ffn_name(l, "w_in"), &k.w_in, f64_)?;
                    c.push_vector(&ffn_name(l, "b_in"), Role::Bias, &k.b_in, f64_)?;
                    c.push_kron_sum(&ffn_name(l, "w_out"), &k.w_out, f64_)?;
                    c.push_vector(&ffn_name(l, "b_out"), Role::Bias, &k.b_out, f64_)?;
                }
            }
        }
        c.push_vector("ln_f.gain", Role::Dense, &m.ln_f.gain, f64_)?;
        c.push_vector("ln_f.bias", Role::Bias, &m.ln_f.bias, f64_)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get(KIND_KEY).map(String::as_str) != Some(KIND) {
            return Err(Error::Data(format!("not a toy-model checkpoint (missing `{KIND_KEY}={KIND}`)")));
        }
        let config: ToyModelConfig = serde_json::from_str(
            c.metadata
                .get(CONFIG_KEY)
                .ok_or_else(|| Error::Data("checkpoint has no model config".into()))?,
        )
        .map_err(|e| Error::Data(format!("model config: {e}")))?;
        config.validate()?;
        let vocab = Vocab::from_json(
            c.metadata
                .get(VOCAB_KEY)
                .ok_or_else(|| Error::Data("checkpoint has no vocabulary".into()))?,
        )?;
        if vocab.len() != config.vocab {
            return Err(Error::Data(format!(
                "vocabulary has {} characters, config says {}",
                vocab.len(),
                config.vocab
            )));
        }
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: c.vector(&format!("{prefix}.gain"))?,
                bias: c.vector(&format!("{prefix}.bias"))?,
            })
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("h.{l}");
            let ffn = if c.contains(&ffn_name(l, "w_in")) {
                Ffn::Dense(DenseFfn::new(
                    c.matrix(&ffn_name(l, "w_in"))?,
                    c.vector(&ffn_name(l, "b_in"))?,
                    c.matrix(&ffn_name(l, "w_out"))?,
                    c.vector(&ffn_name(l, "b_out"))?,
                )?)
            } else {
                Ffn::Factorized(FactorizedFfn::new(
                    c.kron_sum(&ffn_name(l, "w_in"))?,
                    c.vector(&ffn_name(l, "b_in"))?,
                    c.kron_sum(&ffn_name(l, "w_out"))?,
                    c.vector(&ffn_name(l, "b_out"))?,
                )?)
            };
            blocks.push(Block {
                ln1: ln(&format!("{p}.ln1"))?,
                attn: Attention {
                    w_qkv: c.matrix(&format!("{p}.attn.w_qkv"))?,
                    b_qkv: c.vector(&format!("{p}.attn.b_qkv"))?,
                    w_proj: c.matrix(&format!("{p}.attn.w_proj"))?,
                    b_proj: c.vector(&format!("{p}.attn.b_proj"))?,
                },
                ln2: ln(&format!("{p}.ln2"))?,
                ffn,
            });
        }
        let model = Model {
            config,
            wte: c.matrix("wte")?,
            wpe: c.matrix("wpe")?,
            blocks,
            ln_f: ln("ln_f")?,
        };
        check_shapes(&model)?;
        Ok(Self { model, vocab })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn check_shapes(m: &Model) -> Result<()> {
    let cfg = &m.config;
    let d = cfg.d_model;
    let bad = |what: &str| Err(Error::Data(format!("checkpoint tensor `{what}` has the wrong shape")));
    if m.wte.shape() != (cfg.vocab, d) {
        return bad("wte");
    }
    if m.wpe.shape() != (cfg.context, d) {
        return bad("wpe");
    }
    if m.ln_f.gain.len() != d || m.ln_f.bias.len() != d {
        return bad("ln_f");
    }
    for (l, b) in m.blocks.iter().enumerate() {
        let ok = b.ln1.gain.len() == d
            && b.ln1.bias.len() == d
            && b.ln2.gain.len() == d
            && b.ln2.bias.len() == d
            && b.attn.w_qkv.shape() == (3 * d, d)
            && b.attn.b_qkv.len() == 3 * d
            && b.attn.w_proj.shape() == (d, d)
            && b.attn.b_proj.len() == d;
        let (hidden, model_dim) = match &b.ffn {
            Ffn::Dense(f) => (f.hidden_dim(), f.model_dim()),
            Ffn::Factorized(f) => (f.hidden_dim(), f.model_dim()),
        };
        if !ok || hidden != cfg.ffn_dim || model_dim != d {
            return bad(&format!("h.{l}"));
        }
    }
    Ok(())
}
