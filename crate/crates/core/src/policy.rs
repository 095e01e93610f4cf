//! The full encoder-decoder policy, its configuration presets and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoder::moe::{expert_hidden, MoeLayer, RoutingTrace};
use crate::decoder::{ntp_loss, Decoder, DecoderConfig, Heads, MoeSpec};
use crate::encoder::{Encoder, EncoderConfig, UserContext};
use crate::error::{invalid, Result};
use crate::nn::FeedForward;
use crate::numerics::{Graph, ParamGroup, ParamStore, Var};
use crate::rng::substream;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeLoc {
    None,
    Decoder,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Dense FFN hidden width.
    pub ffn_hidden: usize,
    pub experts: usize,
    pub active_experts: usize,
    pub moe_loc: MoeLoc,
    /// Expert widths are rounded up to this multiple.
    pub expert_multiple: usize,
    pub n_t: usize,
    pub l_t: usize,
    pub l_s: usize,
    pub l_p: usize,
    pub l_l: usize,
    pub n_q: usize,
    pub lifelong_blocks: usize,
    pub compress_m: usize,
    pub feature_ratio: f64,
    pub users: usize,
    pub items: usize,
    pub authors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        preset("toy-m").expect("built-in preset")
    }
}

/// Shared toy-scale shape: short sequences and a small codebook.
fn toy(name: &str, d_model: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        d_model,
        heads,
        enc_layers: layers,
        dec_layers: layers,
        ffn_hidden: 2 * d_model,
        experts: 0,
        active_experts: 0,
        moe_loc: MoeLoc::None,
        expert_multiple: 8,
        n_t: 64,
        l_t: 3,
        l_s: 8,
        l_p: 16,
        l_l: 64,
        n_q: 8,
        lifelong_blocks: 2,
        compress_m: 8,
        feature_ratio: 1.0 / 16.0,
        users: 256,
        items: 1024,
        authors: 64,
    }
}

fn full_size(
    name: &str,
    layers: usize,
    d_model: usize,
    ffn: usize,
    heads: usize,
    moe: Option<(usize, usize, MoeLoc)>,
) -> ModelConfig {
    let (experts, active, loc) = moe.unwrap_or((0, 0, MoeLoc::None));
    ModelConfig {
        name: name.into(),
        d_model,
        heads,
        enc_layers: layers / 2,
        dec_layers: layers / 2,
        ffn_hidden: ffn,
        experts,
        active_experts: active,
        moe_loc: loc,
        expert_multiple: 128,
        n_t: 8192,
        l_t: 3,
        l_s: 20,
        l_p: 256,
        l_l: 2000,
        n_q: 128,
        lifelong_blocks: 2,
        compress_m: 8,
        feature_ratio: 1.0,
        users: 1 << 20,
        items: 1 << 20,
        authors: 1 << 16,
    }
}

pub const PRESETS: [&str; 8] = [
    "onerec-0.015b",
    "onerec-0.121b",
    "onerec-0.935b",
    "onerec-2.633b",
    "toy-s",
    "toy-m",
    "toy-l",
    "toy-moe",
];

/// Named architectures: the four published shapes and their toy analogues.
/// The toy trio keeps the dense rows' ratios (FFN = 2 * d_model, equal
/// encoder/decoder split) while growing depth and width.
pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "onerec-0.015b" => full_size(name, 4, 128, 256, 4, None),
        "onerec-0.121b" => full_size(name, 8, 1024, 2048, 8, None),
        "onerec-0.935b" => full_size(name, 8, 1024, 2048, 8, Some((24, 2, MoeLoc::Decoder))),
        "onerec-2.633b" => full_size(
            name,
            24,
            1024,
            2048,
            8,
            Some((24, 4, MoeLoc::EncoderDecoder)),
        ),
        "toy-s" => toy(name, 8, 2, 1),
        "toy-m" => toy(name, 16, 2, 1),
        "toy-l" => toy(name, 32, 4, 2),
        "toy-moe" => ModelConfig {
            experts: 4,
            active_experts: 2,
            moe_loc: MoeLoc::Decoder,
            ..toy(name, 16, 2, 1)
        },
        other => return invalid(format!("unknown model preset {other:?}")),
    })
}

impl ModelConfig {
    fn moe_spec(&self) -> Option<MoeSpec> {
        (self.experts > 0).then(|| MoeSpec {
            experts: self.experts,
            active: self.active_experts,
            hidden: expert_hidden(self.d_model, self.expert_multiple),
        })
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.enc_layers,
            ffn_hidden: self.ffn_hidden,
            moe: if self.moe_loc == MoeLoc::EncoderDecoder {
                self.moe_spec()
            } else {
                None
            },
            l_s: self.l_s,
            l_p: self.l_p,
            l_l: self.l_l,
            n_q: self.n_q,
            lifelong_blocks: self.lifelong_blocks,
            compress_m: self.compress_m,
            feature_ratio: self.feature_ratio,
            users: self.users,
            items: self.items,
            authors: self.authors,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.dec_layers,
            ffn_hidden: self.ffn_hidden,
            moe: if self.moe_loc == MoeLoc::None {
                None
            } else {
                self.moe_spec()
            },
            n_t: self.n_t,
            l_t: self.l_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.moe_loc != MoeLoc::None
            && (self.active_experts == 0 || self.active_experts > self.experts)
        {
            return invalid("MoE needs 1 <= active experts <= experts");
        }
        if self.l_t == 0 || self.n_t < 2 {
            return invalid("need L_t >= 1 and N_t >= 2");
        }
        self.encoder().validate()
    }

    /// Untrained-model NTP loss under uniform logits.
    pub fn uniform_loss(&self) -> f64 {
        self.l_t as f64 * (self.n_t as f64).ln()
    }
}

#[derive(Clone, Debug)]
pub struct Policy<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// One next-token training example: encoder row block `owner` and target codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub owner: usize,
    pub codes: Vec<usize>,
}

impl<T: Scalar> Policy<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "policy-init");
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.encoder(), 0)?;
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder(), cfg.enc_layers)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.encoder().seq_len()
    }

    pub fn encode(
        &self,
        g: &mut Graph<T>,
        ctxs: &[&UserContext],
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        self.encoder.encode(g, &self.store, ctxs, trace)
    }

    /// Logits for every code position of complete target sequences.
    pub fn target_logits(
        &self,
        g: &mut Graph<T>,
        z_enc: Var,
        targets: &[Target],
        trace: &mut RoutingTrace,
    ) -> Result<Vec<Var>> {
        let l_t = self.cfg.l_t;
        let prefixes: Vec<&[usize]> = targets.iter().map(|t| &t.codes[..l_t - 1]).collect();
        let owners: Vec<usize> = targets.iter().map(|t| t.owner).collect();
        self.decoder.forward(
            g,
            &self.store,
            z_enc,
            self.seq_len(),
            &prefixes,
            &owners,
            Heads::All,
            trace,
        )
    }

    /// Mean NTP loss over `targets`, each attached to one of `ctxs`.
    pub fn ntp_loss(
        &self,
        g: &mut Graph<T>,
        ctxs: &[&UserContext],
        targets: &[Target],
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        if targets
            .iter()
            .any(|t| t.codes.len() != self.cfg.l_t || t.owner >= ctxs.len())
        {
            return invalid("targets need L_t codes and a valid owner");
        }
        let z = self.encode(g, ctxs, trace)?;
        let logits = self.target_logits(g, z, targets, trace)?;
        let codes: Vec<&[usize]> = targets.iter().map(|t| t.codes.as_slice()).collect();
        ntp_loss(g, &logits, &codes)
    }

    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.encoder
            .blocks
            .iter()
            .chain(&self.decoder.blocks)
            .filter_map(|b| match &b.ffn {
                FeedForward::Moe(m) => Some(m),
                FeedForward::Dense(_) => None,
            })
            .collect()
    }

    /// Loss-free balancing step for every MoE layer that saw tokens.
    pub fn balance(&mut self, trace: &RoutingTrace, u: f64) -> Result<()> {
        let layers: Vec<MoeLayer> = self.moe_layers().into_iter().cloned().collect();
        for m in layers {
            if let Some(loads) = trace.loads.get(&m.layer) {
                m.update_bias(&mut self.store, loads, u)?;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.group != ParamGroup::Buffer)
            .map(|(_, p)| p.value().len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Policy<U> {
        Policy {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CKPT_MAGIC, &self.cfg, &self.store)
    }

    /// Rebuilds the architecture from the stored config, then loads values.
    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(
            path,
            CKPT_MAGIC,
            |cfg: &ModelConfig| Self::new(cfg, 0),
            |p: &mut Self| &mut p.store,
        )
    }
}

const CKPT_MAGIC: &[u8; 4] = b"ORCK";
