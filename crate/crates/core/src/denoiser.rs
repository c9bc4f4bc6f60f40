//! Small U-Net noise predictor ε_θ(x_t, t).
//!
//! Layout, with `ch(i) = base_channels · 2^i` for level `i < depth`:
//!
//! * time MLP: sinusoidal(t, E) → linear E→E → SiLU → linear E→E
//! * `conv_in`: 3×3, image_channels → ch(0)
//! * encoder level `i`: `blocks_per_stage` residual blocks (first one maps
//!   ch(i−1) → ch(i), with ch(−1) = ch(0)), the output is kept as a skip,
//!   then a 2× average-pool
//! * `mid`: one residual block ch(depth−1) → ch(depth−1)
//! * decoder level `i` (from depth−1 down to 0): 2× nearest upsample,
//!   concatenation with skip `i`, then residual blocks; the first maps
//!   (h + ch(i)) → ch(i) where h is ch(depth−1) at the deepest level and
//!   ch(i+1) otherwise
//! * `conv_out`: 3×3, ch(0) → image_channels
//!
//! A residual block `in → out` computes
//! `conv2(silu(gn2(conv1(silu(gn1(x))) + proj(silu(temb))))) + skip(x)`,
//! where `skip` is a 1×1 convolution when `in ≠ out` and the identity
//! otherwise. Its parameter count is
//! `2·in + (9·in·out + out) + (E·out + out) + 2·out + (9·out·out + out)`
//! plus `in·out + out` for the 1×1 skip. The whole network adds
//! `2·(E·E + E)` for the time MLP, `9·C·ch(0) + ch(0)` for `conv_in` and
//! `9·ch(0)·C + C` for `conv_out`.
//!
//! For the desk configuration (C = 1, side 8, base 16, depth 2, one block
//! per stage, E = 32) that totals 84 641 parameters.
//!
//! The personalization unit is the last residual block of decoder level 0,
//! `up.0.block.{blocks_per_stage − 1}`; everything else, `conv_out`
//! included, is base.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::numeric::{
    read_tensor_record, write_tensor, Cursor, Graph, NamedTensors, NodeId, Padding, ParamTable, Tensor,
};
use crate::rng::{self, Rng};

pub const DEFAULT_NORM_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub image_side: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub time_embed_dim: usize,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
}

fn default_groups() -> usize {
    DEFAULT_NORM_GROUPS
}

impl DenoiserConfig {
    /// 1×8×8 images, CPU-trainable in minutes.
    pub fn desk() -> Self {
        DenoiserConfig {
            image_channels: 1,
            image_side: 8,
            base_channels: 16,
            depth: 2,
            blocks_per_stage: 1,
            time_embed_dim: 32,
            norm_groups: DEFAULT_NORM_GROUPS,
        }
    }

    /// CIFAR-sized layout with four down and four up stages.
    pub fn paper() -> Self {
        DenoiserConfig {
            image_channels: 3,
            image_side: 32,
            base_channels: 64,
            depth: 4,
            blocks_per_stage: 1,
            time_embed_dim: 128,
            norm_groups: DEFAULT_NORM_GROUPS,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.depth < 1 || self.blocks_per_stage < 1 {
            return bad(format!(
                "depth ({}) and blocks_per_stage ({}) must be >= 1",
                self.depth, self.blocks_per_stage
            ));
        }
        if self.image_channels < 1 || self.base_channels < 1 {
            return bad("channel counts must be positive".into());
        }
        if self.image_side == 0 || self.image_side % (1 << self.depth) != 0 {
            return bad(format!(
                "image_side {} not divisible by 2^{}",
                self.image_side, self.depth
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_side, self.image_side]
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        for level in 0..self.depth {
            for j in 0..self.blocks_per_stage {
                let input = if j > 0 {
                    self.channels(level)
                } else if level == 0 {
                    self.channels(0)
                } else {
                    self.channels(level - 1)
                };
                out.push(BlockSpec {
                    prefix: format!("down.{level}.block.{j}"),
                    input,
                    output: self.channels(level),
                });
            }
        }
        let deepest = self.channels(self.depth - 1);
        out.push(BlockSpec {
            prefix: "mid.block".into(),
            input: deepest,
            output: deepest,
        });
        for level in (0..self.depth).rev() {
            let below = if level == self.depth - 1 {
                deepest
            } else {
                self.channels(level + 1)
            };
            for j in 0..self.blocks_per_stage {
                let input = if j == 0 {
                    below + self.channels(level)
                } else {
                    self.channels(level)
                };
                out.push(BlockSpec {
                    prefix: format!("up.{level}.block.{j}"),
                    input,
                    output: self.channels(level),
                });
            }
        }
        out
    }

    /// Name prefix of the personalization block.
    pub fn personal_prefix(&self) -> String {
        format!("up.0.block.{}", self.blocks_per_stage - 1)
    }
}

#[derive(Debug, Clone)]
struct BlockSpec {
    prefix: String,
    input: usize,
    output: usize,
}

/// U-Net parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamTable,
}

struct Init<'a> {
    table: ParamTable,
    rng: &'a mut Rng,
    personal_prefix: String,
}

impl Init<'_> {
    fn add(&mut self, name: String, tensor: Tensor) -> Result<()> {
        let personal = name.starts_with(&format!("{}.", self.personal_prefix));
        self.table.insert(name, tensor, personal)
    }

    /// Weight ~ N(0, 1/fan_in), bias zero.
    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> Result<()> {
        let fan_in = (in_ch * k * k) as f32;
        let w = Tensor::randn(&[out_ch, in_ch, k, k], 1.0 / fan_in.sqrt(), self.rng);
        self.add(format!("{name}.weight"), w)?;
        self.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        let w = Tensor::randn(&[input, output], 1.0 / (input as f32).sqrt(), self.rng);
        self.add(format!("{name}.weight"), w)?;
        self.add(format!("{name}.bias"), Tensor::zeros(&[output]))
    }

    fn norm(&mut self, name: &str, ch: usize) -> Result<()> {
        self.add(format!("{name}.gamma"), Tensor::full(&[ch], 1.0))?;
        self.add(format!("{name}.beta"), Tensor::zeros(&[ch]))
    }
}

/// Builds the U-Net with weights drawn from the stream seeded by `seed`.
pub fn build_unet(config: &DenoiserConfig, seed: u64) -> Result<DenoiserModel> {
    config.validate()?;
    let mut r = rng::substream(seed, &[rng::STREAM_INIT]);
    let e = config.time_embed_dim;
    let mut init = Init {
        table: ParamTable::new(),
        rng: &mut r,
        personal_prefix: config.personal_prefix(),
    };
    init.linear("time_mlp.0", e, e)?;
    init.linear("time_mlp.1", e, e)?;
    init.conv("conv_in", config.base_channels, config.image_channels, 3)?;
    for b in config.blocks() {
        let p = &b.prefix;
        init.norm(&format!("{p}.norm1"), b.input)?;
        init.conv(&format!("{p}.conv1"), b.output, b.input, 3)?;
        init.linear(&format!("{p}.time_proj"), e, b.output)?;
        init.norm(&format!("{p}.norm2"), b.output)?;
        init.conv(&format!("{p}.conv2"), b.output, b.output, 3)?;
        if b.input != b.output {
            init.conv(&format!("{p}.skip"), b.output, b.input, 1)?;
        }
    }
    init.conv("conv_out", config.image_channels, config.base_channels, 3)?;
    Ok(DenoiserModel {
        config: *config,
        params: init.table,
    })
}

/// Sinusoidal embedding of a single step.
pub fn time_embedding(t: u32, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Argument(format!("embedding dim {dim} must be even")));
    }
    Ok(crate::numeric::kernels::sinusoidal(&[t], dim))
}

/// (base, personal) partition of the parameters.
pub fn split_parameters(model: &DenoiserModel) -> (NamedTensors, NamedTensors) {
    model.params.split()
}

struct Builder<'a> {
    g: &'a mut Graph,
    groups: usize,
}

impl Builder<'_> {
    fn conv(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.g.param(format!("{name}.weight"));
        let b = self.g.param(format!("{name}.bias"));
        self.g.conv2d(x, w, Some(b), Padding::Same)
    }

    fn linear(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.g.param(format!("{name}.weight"));
        let b = self.g.param(format!("{name}.bias"));
        let y = self.g.matmul(x, w);
        self.g.add_row_bias(y, b)
    }

    fn norm(&mut self, x: NodeId, name: &str) -> NodeId {
        let gamma = self.g.param(format!("{name}.gamma"));
        let beta = self.g.param(format!("{name}.beta"));
        self.g.group_norm(x, gamma, beta, self.groups)
    }

    fn block(&mut self, x: NodeId, temb_act: NodeId, spec: &BlockSpec) -> NodeId {
        let p = &spec.prefix;
        let h = self.norm(x, &format!("{p}.norm1"));
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{p}.conv1"));
        let t = self.linear(temb_act, &format!("{p}.time_proj"));
        let h = self.g.add_channel(h, t);
        let h = self.norm(h, &format!("{p}.norm2"));
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{p}.conv2"));
        let skip = if spec.input != spec.output {
            self.conv_1x1(x, &format!("{p}.skip"))
        } else {
            x
        };
        self.g.add(h, skip)
    }

    fn conv_1x1(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.g.param(format!("{name}.weight"));
        let b = self.g.param(format!("{name}.bias"));
        self.g.conv2d(x, w, Some(b), Padding::Valid)
    }
}

/// A configuration paired with a borrowed parameter table, e.g. a global
/// model with one client's personal block swapped in.
#[derive(Debug, Clone, Copy)]
pub struct UNetView<'a> {
    pub config: &'a DenoiserConfig,
    pub params: &'a ParamTable,
}

impl NoisePredictor for DenoiserModel {
    fn params(&self) -> &ParamTable {
        &self.params
    }

    fn build(&self, graph: &mut Graph, x: NodeId, steps: &[u32]) -> Result<NodeId> {
        build_graph(&self.config, graph, x, steps)
    }
}

impl NoisePredictor for UNetView<'_> {
    fn params(&self) -> &ParamTable {
        self.params
    }

    fn build(&self, graph: &mut Graph, x: NodeId, steps: &[u32]) -> Result<NodeId> {
        build_graph(self.config, graph, x, steps)
    }
}

fn build_graph(c: &DenoiserConfig, graph: &mut Graph, x: NodeId, steps: &[u32]) -> Result<NodeId> {
    let mut b = Builder {
        g: graph,
        groups: c.norm_groups,
    };
    let emb = b.g.time_embedding(steps, c.time_embed_dim);
    let temb = b.linear(emb, "time_mlp.0");
    let temb = b.g.silu(temb);
    let temb = b.linear(temb, "time_mlp.1");
    let temb_act = b.g.silu(temb);

    let blocks = c.blocks();
    let mut it = blocks.iter();
    let mut h = b.conv(x, "conv_in");
    let mut skips = Vec::with_capacity(c.depth);
    for _ in 0..c.depth {
        for _ in 0..c.blocks_per_stage {
            h = b.block(h, temb_act, it.next().expect("block list"));
        }
        skips.push(h);
        h = b.g.avgpool2x(h);
    }
    h = b.block(h, temb_act, it.next().expect("mid block"));
    for _ in 0..c.depth {
        h = b.g.upsample2x(h);
        h = b.g.concat(h, skips.pop().expect("skip per level"));
        for _ in 0..c.blocks_per_stage {
            h = b.block(h, temb_act, it.next().expect("block list"));
        }
    }
    Ok(b.conv(h, "conv_out"))
}

impl DenoiserModel {
    /// ε̂ for a batch `[n, c, h, w]` at per-row steps.
    pub fn predict_noise(&self, x_t: &Tensor, steps: &[u32]) -> Result<Tensor> {
        let want = self.config.sample_shape();
        if x_t.rank() != 4 || x_t.shape()[1..] != want {
            return Err(Error::Argument(format!(
                "input {:?} does not match image shape {want:?}",
                x_t.shape()
            )));
        }
        if steps.len() != x_t.shape()[0] {
            return Err(Error::Argument(format!(
                "{} steps for batch of {}",
                steps.len(),
                x_t.shape()[0]
            )));
        }
        self.predict(x_t, steps)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

// Checkpoint format (`PHXC`): magic, u16 version = 1, u32 parameter count,
// then per parameter: u16 name length, UTF-8 name, u8 flags (bit 0 =
// personal), and an embedded PHXT tensor record.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHXC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ParamTable) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(u8::from(e.personal));
        write_tensor(&mut buf, &e.tensor).expect("Vec write");
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamTable> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "checkpoint magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = cur.u16("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = cur.u32("parameter count")?;
    let mut table = ParamTable::new();
    for k in 0..count {
        let at = cur.offset();
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "parameter name")?).map_err(|_| Error::Format {
            offset: at + 2,
            detail: format!("record {k}: name is not UTF-8"),
        })?;
        let flags = cur.u8("flags")?;
        let tensor = read_tensor_record(&mut cur).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("record {k} (`{name}`): {detail}"),
            },
            other => other,
        })?;
        table.insert(name, tensor, flags & 1 == 1).map_err(|_| Error::Format {
            offset: at,
            detail: format!("record {k}: duplicate parameter `{name}`"),
        })?;
    }
    if !cur.is_empty() {
        return Err(Error::Format {
            offset: cur.offset(),
            detail: "trailing bytes after checkpoint".into(),
        });
    }
    Ok(table)
}

pub fn save_checkpoint(path: &Path, params: &ParamTable) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against the parameter layout of `config`.
pub fn load_model(path: &Path, config: &DenoiserConfig) -> Result<DenoiserModel> {
    let params = load_checkpoint(path)?;
    let reference = build_unet(config, 0)?;
    for e in reference.params.entries() {
        match params.get(&e.name) {
            Some(t) if t.shape() == e.tensor.shape() => {}
            Some(t) => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!(
                        "parameter `{}` has shape {:?}, config expects {:?}",
                        e.name,
                        t.shape(),
                        e.tensor.shape()
                    ),
                })
            }
            None => {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("checkpoint lacks parameter `{}`", e.name),
                })
            }
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                reference.params.len()
            ),
        });
    }
    Ok(DenoiserModel {
        config: *config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let c = DenoiserConfig::desk();
        assert_eq!(build_unet(&c, 3).unwrap(), build_unet(&c, 3).unwrap());
        assert_ne!(build_unet(&c, 3).unwrap(), build_unet(&c, 4).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = DenoiserConfig::desk();
        c.image_side = 6;
        assert!(build_unet(&c, 0).is_err());
        let mut c = DenoiserConfig::desk();
        c.depth = 0;
        assert!(build_unet(&c, 0).is_err());
        let mut c = DenoiserConfig::desk();
        c.time_embed_dim = 7;
        assert!(build_unet(&c, 0).is_err());
    }

    #[test]
    fn personal_set_is_final_decoder_block() {
        let m = build_unet(&DenoiserConfig::desk(), 0).unwrap();
        let personal = m.params.personal_names();
        assert!(!personal.is_empty());
        assert!(personal.iter().all(|n| n.starts_with("up.0.block.0.")));
        let expected: Vec<String> = m
            .params
            .names()
            .filter(|n| n.starts_with("up.0.block.0."))
            .map(String::from)
            .collect();
        assert_eq!(personal, expected);
        assert!(m.params.is_personal("conv_out.weight") == Some(false));
        assert!(personal.iter().any(|n| n.contains("norm")));
    }

    #[test]
    fn embedding_rejects_odd_dim_and_pairs_are_unit() {
        assert!(time_embedding(3, 7).is_err());
        let e = time_embedding(123, 16).unwrap();
        for pair in e.chunks(2) {
            assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let m = build_unet(&DenoiserConfig::desk(), 1).unwrap();
        for n in [1, 3] {
            let mut r = rng::substream(9, &[n as u64]);
            let x = Tensor::randn(&[n, 1, 8, 8], 1.0, &mut r);
            let y = m.predict_noise(&x, &vec![5; n]).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
        let bad = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(m.predict_noise(&bad, &[1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = build_unet(&DenoiserConfig::desk(), 2).unwrap();
        let bytes = encode_checkpoint(&m.params);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m.params);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
