//! Sectioned binary checkpoint.
//!
//! Layout: magic `GPAC`, version `u32`, then blocks until end of file. Each
//! block is a name (`u16` length + UTF-8 bytes), rank `u8`, one `u32` per
//! extent, then the row-major `f32` values. All integers and floats are
//! little-endian.
//!
//! Besides learnable tensors a model checkpoint carries `*.running_mean` /
//! `*.running_var` batch-norm statistics, the normalization constants under
//! `data.norm.*`, and the architecture under `meta.*`. Small integers are
//! stored as `f32`; `f64` reals as the two halves of their bit pattern
//! (low word first) so they survive the round trip exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{BnStats, Tensor};
use crate::backbone::BackboneConfig;
use crate::datasets::NormStats;
use crate::error::{Error, Result};
use crate::head::{Components, HeadConfig, HeadParams};
use crate::io::write_atomic;
use crate::model::GpaModel;

pub const MAGIC: &[u8; 4] = b"GPAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    fn vector(name: impl Into<String>, data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data)
    }
}

pub fn encode_blocks(blocks: &[Block]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for b in blocks {
        let name = b.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("block name too long: {}", b.name)))?;
        let rank = u8::try_from(b.shape.len()).map_err(|_| Error::Data(format!("rank too large in {}", b.name)))?;
        if b.shape.iter().product::<usize>() != b.data.len() {
            return Err(Error::shape("checkpoint", &b.shape, &[b.data.len()]));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &e in &b.shape {
            let e = u32::try_from(e).map_err(|_| Error::Data(format!("extent too large in {}", b.name)))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<Block>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut blocks = Vec::new();
    while c.pos < bytes.len() {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Data("block name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        blocks.push(Block { name, shape, data });
    }
    Ok(blocks)
}

fn components_code(c: Components) -> f32 {
    match c {
        Components::Both => 0.0,
        Components::GlobalOnly => 1.0,
        Components::LocalOnly => 2.0,
    }
}

fn components_from(code: f32) -> Result<Components> {
    match code as i32 {
        0 => Ok(Components::Both),
        1 => Ok(Components::GlobalOnly),
        2 => Ok(Components::LocalOnly),
        other => Err(Error::Data(format!("unknown components code {other}"))),
    }
}

fn reals(v: &[f64]) -> Vec<f32> {
    v.iter()
        .flat_map(|x| {
            let b = x.to_bits();
            [f32::from_bits(b as u32), f32::from_bits((b >> 32) as u32)]
        })
        .collect()
}

fn ints(v: &[usize]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

pub fn model_to_blocks(model: &GpaModel) -> Vec<Block> {
    let bc = &model.backbone_config;
    let hc = &model.head_config;
    let mut blocks = vec![
        Block::vector("meta.backbone.channels", ints(&bc.channels)),
        Block::vector("meta.backbone.strides", ints(&bc.strides)),
        Block::vector("meta.backbone.last_stage_stride", vec![bc.last_stage_stride as f32]),
        Block::vector("meta.backbone.input_size", vec![bc.input_size as f32]),
        Block::vector("meta.backbone.bn", reals(&[bc.bn_momentum, bc.bn_eps])),
        Block::vector("meta.head.scheme", vec![hc.h_parts as f32, hc.v_parts as f32]),
        Block::vector("meta.head.reduction_dim", vec![hc.reduction_dim as f32]),
        Block::vector("meta.head.dropout", reals(&[hc.dropout])),
        Block::vector("meta.head.components", vec![components_code(hc.components)]),
        Block::vector("meta.num_classes", vec![model.num_classes() as f32]),
        Block::vector("data.norm.mean", model.norm.mean.to_vec()),
        Block::vector("data.norm.std", model.norm.std.to_vec()),
    ];
    let mut m = model.clone();
    m.visit_params_mut(&mut |name, _, t| {
        blocks.push(Block::new(name, t.shape().to_vec(), t.data().to_vec()));
    });
    let stats: Vec<(String, BnStats<f32>)> = m
        .backbone
        .stats_mut()
        .chain(m.head.stats_mut())
        .map(|(n, s)| (n, s.clone()))
        .collect();
    for (name, s) in stats {
        blocks.push(Block::vector(format!("{name}.running_mean"), s.mean));
        blocks.push(Block::vector(format!("{name}.running_var"), s.var));
    }
    blocks
}

struct BlockMap(BTreeMap<String, Block>);

impl BlockMap {
    fn get(&self, name: &str) -> Result<&Block> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing block {name:?}")))
    }

    fn scalar(&self, name: &str) -> Result<f32> {
        self.get(name)?
            .data
            .first()
            .copied()
            .ok_or_else(|| Error::Data(format!("block {name:?} is empty")))
    }

    fn usizes(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.data.iter().map(|v| *v as usize).collect())
    }

    fn reals(&self, name: &str) -> Result<Vec<f64>> {
        let d = &self.get(name)?.data;
        if d.len() % 2 != 0 {
            return Err(Error::Data(format!("block {name:?} has an odd word count")));
        }
        Ok(d.chunks(2)
            .map(|w| f64::from_bits(w[0].to_bits() as u64 | (w[1].to_bits() as u64) << 32))
            .collect())
    }

    fn array3(&self, name: &str) -> Result<[f32; 3]> {
        self.get(name)?
            .data
            .as_slice()
            .try_into()
            .map_err(|_| Error::Data(format!("block {name:?} must hold 3 values")))
    }
}

pub fn model_from_blocks(blocks: Vec<Block>) -> Result<GpaModel> {
    let map = BlockMap(blocks.into_iter().map(|b| (b.name.clone(), b)).collect());
    let bn = map.reals("meta.backbone.bn")?;
    if bn.len() != 2 {
        return Err(Error::Data("meta.backbone.bn must hold momentum and eps".into()));
    }
    let backbone_config = BackboneConfig {
        channels: map.usizes("meta.backbone.channels")?,
        strides: map.usizes("meta.backbone.strides")?,
        last_stage_stride: map.scalar("meta.backbone.last_stage_stride")? as usize,
        input_size: map.scalar("meta.backbone.input_size")? as usize,
        bn_momentum: bn[0],
        bn_eps: bn[1],
    };
    let dropout = map.reals("meta.head.dropout")?;
    if dropout.len() != 1 {
        return Err(Error::Data("meta.head.dropout must hold one value".into()));
    }
    let scheme = map.usizes("meta.head.scheme")?;
    if scheme.len() != 2 {
        return Err(Error::Data("meta.head.scheme must hold two counts".into()));
    }
    let head_config = HeadConfig {
        h_parts: scheme[0],
        v_parts: scheme[1],
        reduction_dim: map.scalar("meta.head.reduction_dim")? as usize,
        dropout: dropout[0],
        components: components_from(map.scalar("meta.head.components")?)?,
    };
    let norm = NormStats {
        mean: map.array3("data.norm.mean")?,
        std: map.array3("data.norm.std")?,
    };
    let classes = map.scalar("meta.num_classes")? as usize;
    let mut model = GpaModel::new(backbone_config, head_config, classes, norm, 0)?;

    let mut failure = None;
    model.visit_params_mut(&mut |name, _, t| {
        if failure.is_some() {
            return;
        }
        match map.get(name) {
            Ok(b) if b.shape == t.shape() => t.data_mut().copy_from_slice(&b.data),
            Ok(b) => failure = Some(Error::shape("checkpoint", t.shape(), &b.shape)),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let load_stats = |name: &str, s: &mut BnStats<f32>| -> Result<()> {
        let mean = &map.get(&format!("{name}.running_mean"))?.data;
        let var = &map.get(&format!("{name}.running_var"))?.data;
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::shape("checkpoint", &[s.mean.len()], &[mean.len()]));
        }
        s.mean.copy_from_slice(mean);
        s.var.copy_from_slice(var);
        Ok(())
    };
    for (name, s) in model.backbone.stats_mut() {
        load_stats(&name, s)?;
    }
    let head: &mut HeadParams = &mut model.head;
    for (name, s) in head.stats_mut() {
        load_stats(&name, s)?;
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &GpaModel) -> Result<()> {
    write_atomic(path, &encode_blocks(&model_to_blocks(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<GpaModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_blocks(decode_blocks(&bytes)?)
}

/// Raw tensor view of one block.
pub fn block_tensor(block: &Block) -> Result<Tensor<f32>> {
    Tensor::new(block.shape.clone(), block.data.clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_bytes() {
        let bytes = encode_blocks(&[Block::new("w", vec![1, 2], vec![1.0, -2.0])]).unwrap();
        assert_eq!(&bytes[..4], b"GPAC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(bytes[10], b'w');
        assert_eq!(bytes[11], 2);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_blocks(b"NOPE\x01\x00\x00\x00").is_err());
        let mut bytes = encode_blocks(&[Block::new("w", vec![3], vec![1.0, 2.0, 3.0])]).unwrap();
        bytes.pop();
        assert!(decode_blocks(&bytes).is_err());
    }

    #[test]
    fn model_round_trip() {
        let bc = BackboneConfig { channels: vec![4, 6], strides: vec![2, 2], input_size: 16, ..Default::default() };
        let hc = HeadConfig { h_parts: 2, v_parts: 2, reduction_dim: 5, components: Components::LocalOnly, ..Default::default() };
        let norm = NormStats { mean: [0.1, 0.2, 0.3], std: [0.4, 0.5, 0.6] };
        let mut m = GpaModel::new(bc, hc, 3, norm, 9).unwrap();
        m.backbone.stages[0].stats.mean[1] = 0.25;
        m.head.parts[3].stats.var[2] = 4.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gpac");
        save_checkpoint(&path, &m).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn blocks_round_trip(
            blocks in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..3))
                    .prop_flat_map(|(n, shape)| {
                        let len = shape.iter().product::<usize>();
                        (Just(n), Just(shape), prop::collection::vec(-1e6f32..1e6, len))
                    }),
                0..5,
            )
        ) {
            let blocks: Vec<Block> = blocks.into_iter().map(|(n, s, d)| Block::new(n, s, d)).collect();
            prop_assert_eq!(decode_blocks(&encode_blocks(&blocks).unwrap()).unwrap(), blocks);
        }
    }
}
