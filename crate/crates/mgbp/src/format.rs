//! Binary weight container.
//!
//! One file holds a set of named parameter blocks behind a fixed magic, a
//! format version, and a text descriptor of the network that produced them.
//! Blocks appear in plan order, each carrying its name, shape, and raw f32
//! payload in little-endian order, so the file size is exactly the header
//! plus four bytes per parameter and a load faithfully reproduces every bit.

use std::fs;
use std::path::Path;

use crate::discriminator::{CriticConfig, CriticWeights, PYRAMID_FACTORS};
use crate::error::{Error, Result};
use crate::generator::{ConvParams, GeneratorWeights};
use crate::plan::{unfold, NetworkPlan, PlanConfig};
use crate::tensor::{ConvSpec, Shape, Tensor};

pub const CONTAINER_MAGIC: [u8; 8] = *b"MGBPWGT\0";
pub const CONTAINER_VERSION: u32 = 1;

/// One named parameter array inside a container.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serialize blocks behind the magic, version, and descriptor.
pub fn write_container(path: &Path, descriptor: &str, blocks: &[WeightBlock]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    push_u32(&mut out, CONTAINER_VERSION);
    push_str(&mut out, descriptor);
    push_u32(&mut out, blocks.len() as u32);
    for b in blocks {
        if b.data.len() != b.shape.numel() {
            return Err(Error::format(format!(
                "block {} carries {} values for shape {}",
                b.name,
                b.data.len(),
                b.shape
            )));
        }
        push_str(&mut out, &b.name);
        for dim in [b.shape.batch, b.shape.channels, b.shape.height, b.shape.width] {
            push_u32(&mut out, dim as u32);
        }
        push_u32(&mut out, (b.data.len() * 4) as u32);
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated container: wanted {} bytes at offset {}, file ends at {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::format("container holds a non-UTF-8 string"))
    }
}

/// Parse a container, verifying magic and version.
pub fn read_container(path: &Path) -> Result<(String, Vec<WeightBlock>)> {
    let bytes =
        fs::read(path).map_err(|e| Error::format(format!("{}: {}", path.display(), e)))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}: not a weight container",
            magic
        )));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(format!(
            "container version {} is not the supported {}",
            version, CONTAINER_VERSION
        )));
    }
    let descriptor = r.string()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let dims: Vec<usize> = (0..4)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r.u32()? as usize;
        if payload != shape.numel() * 4 {
            return Err(Error::format(format!(
                "block {}: payload {} bytes does not match shape {}",
                name, payload, shape
            )));
        }
        let raw = r.take(payload)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(WeightBlock { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    Ok((descriptor, blocks))
}

/// Text form of a generator configuration, stored in its containers.
pub fn plan_descriptor(config: &PlanConfig) -> String {
    let schedule: Vec<String> = config.schedule.iter().map(|w| w.to_string()).collect();
    format!(
        "generator mu={} levels={} schedule={} filter={}",
        config.mu,
        config.levels,
        schedule.join(","),
        config.filter
    )
}

/// Parse the descriptor a generator container stores back into the
/// configuration it names, so a weight file alone is enough to rebuild the
/// network that uses it.
pub fn parse_plan_descriptor(descriptor: &str) -> Result<PlanConfig> {
    let bad = |detail: String| Error::format(format!("descriptor \"{}\": {}", descriptor, detail));
    let mut fields = descriptor.split(' ');
    if fields.next() != Some("generator") {
        return Err(bad("does not describe a generator".into()));
    }
    let number = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| bad(format!("\"{}\" is not a count", v)))
    };
    let (mut mu, mut levels, mut schedule, mut filter) = (None, None, None, None);
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("field \"{}\" is not key=value", field)))?;
        match key {
            "mu" => mu = Some(number(value)?),
            "levels" => levels = Some(number(value)?),
            "schedule" => {
                schedule = Some(value.split(',').map(number).collect::<Result<Vec<_>>>()?)
            }
            "filter" => filter = Some(number(value)?),
            _ => return Err(bad(format!("unknown field \"{}\"", key))),
        }
    }
    match (mu, levels, schedule, filter) {
        (Some(mu), Some(levels), Some(schedule), Some(filter)) => {
            Ok(PlanConfig::new(mu, levels, schedule, filter))
        }
        _ => Err(bad("missing one of mu, levels, schedule, filter".into())),
    }
}

fn param_blocks(name: &str, params: &ConvParams) -> [WeightBlock; 2] {
    [
        WeightBlock {
            name: format!("{}/kernel", name),
            shape: params.kernel.shape(),
            data: params.kernel.data().to_vec(),
        },
        WeightBlock {
            name: format!("{}/bias", name),
            shape: params.bias.shape(),
            data: params.bias.data().to_vec(),
        },
    ]
}

fn params_from_blocks(
    name: &str,
    spec: &ConvSpec,
    kernel: &WeightBlock,
    bias: &WeightBlock,
) -> Result<ConvParams> {
    for (block, part, want) in [
        (kernel, "kernel", spec.weight_shape()),
        (bias, "bias", spec.bias_shape()),
    ] {
        let expect = format!("{}/{}", name, part);
        if block.name != expect {
            return Err(Error::format(format!(
                "expected block {}, found {}",
                expect, block.name
            )));
        }
        if block.shape != want {
            return Err(Error::format(format!(
                "block {}: shape {} does not match the plan's {}",
                block.name, block.shape, want
            )));
        }
    }
    Ok(ConvParams {
        kernel: Tensor::param(kernel.shape, kernel.data.clone())?,
        bias: Tensor::param(bias.shape, bias.data.clone())?,
    })
}

/// Save generator weights in plan order.
pub fn save_weights(path: &Path, plan: &NetworkPlan, weights: &GeneratorWeights) -> Result<()> {
    if weights.params.len() != plan.instances.len() {
        return Err(Error::format(format!(
            "{} parameter sets for a plan of {} instances",
            weights.params.len(),
            plan.instances.len()
        )));
    }
    let mut blocks = Vec::with_capacity(plan.instances.len() * 2);
    for (inst, params) in plan.instances.iter().zip(&weights.params) {
        blocks.extend(param_blocks(&inst.tag.name(), params));
    }
    write_container(path, &plan_descriptor(&plan.config), &blocks)
}

fn weights_for_plan(plan: &NetworkPlan, blocks: &[WeightBlock]) -> Result<GeneratorWeights> {
    if blocks.len() != plan.instances.len() * 2 {
        return Err(Error::format(format!(
            "{} blocks for a plan of {} instances",
            blocks.len(),
            plan.instances.len()
        )));
    }
    let params = plan
        .instances
        .iter()
        .zip(blocks.chunks_exact(2))
        .map(|(inst, pair)| params_from_blocks(&inst.tag.name(), &inst.spec, &pair[0], &pair[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratorWeights { params })
}

/// Load generator weights for a specific plan, verifying the descriptor and
/// every block name and shape against it.
pub fn load_weights(path: &Path, plan: &NetworkPlan) -> Result<GeneratorWeights> {
    let (descriptor, blocks) = read_container(path)?;
    let expected = plan_descriptor(&plan.config);
    if descriptor != expected {
        return Err(Error::format(format!(
            "container was written for \"{}\", plan is \"{}\"",
            descriptor, expected
        )));
    }
    weights_for_plan(plan, &blocks)
}

/// Load generator weights from a container alone: the stored descriptor
/// rebuilds the plan, then every block is verified against it as usual.
pub fn load_weights_auto(path: &Path) -> Result<(NetworkPlan, GeneratorWeights)> {
    let (descriptor, blocks) = read_container(path)?;
    let config = parse_plan_descriptor(&descriptor)?;
    let plan = unfold(config)?;
    let weights = weights_for_plan(&plan, &blocks)?;
    Ok((plan, weights))
}

/// Text form of a critic configuration.
pub fn critic_descriptor(config: &CriticConfig) -> String {
    let widths: Vec<String> = config.widths.iter().map(|w| w.to_string()).collect();
    format!("critic widths={}", widths.join(","))
}

/// Save critic weights: per-level CNNs in pyramid order, then the head.
pub fn save_critic(path: &Path, weights: &CriticWeights) -> Result<()> {
    let mut blocks = Vec::new();
    for (k, level) in weights.levels.iter().enumerate() {
        for (i, params) in level.iter().enumerate() {
            blocks.extend(param_blocks(&format!("level{}.conv{}", k, i), params));
        }
    }
    blocks.extend(param_blocks("head", &weights.head));
    write_container(path, &critic_descriptor(&weights.config), &blocks)
}

/// Load critic weights for a configuration, verifying descriptor, names, and
/// shapes.
pub fn load_critic(path: &Path, config: &CriticConfig) -> Result<CriticWeights> {
    let (descriptor, blocks) = read_container(path)?;
    let expected = critic_descriptor(config);
    if descriptor != expected {
        return Err(Error::format(format!(
            "container was written for \"{}\", requested \"{}\"",
            descriptor, expected
        )));
    }
    let want_blocks =
        ((0..PYRAMID_FACTORS.len()).map(|k| config.level_specs(k).len()).sum::<usize>() + 1) * 2;
    if blocks.len() != want_blocks {
        return Err(Error::format(format!(
            "{} blocks where the critic needs {}",
            blocks.len(),
            want_blocks
        )));
    }
    let mut pairs = blocks.chunks_exact(2);
    let mut levels = Vec::with_capacity(PYRAMID_FACTORS.len());
    for k in 0..PYRAMID_FACTORS.len() {
        let specs = config.level_specs(k);
        let mut level = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let pair = pairs
                .next()
                .ok_or_else(|| Error::format(format!("missing blocks for level{}.conv{}", k, i)))?;
            level.push(params_from_blocks(
                &format!("level{}.conv{}", k, i),
                spec,
                &pair[0],
                &pair[1],
            )?);
        }
        levels.push(level);
    }
    let pair = pairs
        .next()
        .ok_or_else(|| Error::format("missing blocks for the head"))?;
    let head = params_from_blocks("head", &config.head_spec(), &pair[0], &pair[1])?;
    if pairs.next().is_some() {
        return Err(Error::format("container holds more blocks than the critic"));
    }
    Ok(CriticWeights {
        config: config.clone(),
        levels,
        head,
    })
}
