//! Static network plans: unfolding the multigrid back-projection recursion
//! into a flat, tagged list of convolution instances.
//!
//! The network is defined by a recursion over resolution levels. Level `L` is
//! full resolution; level 1 is the coarsest. At each level above the coarsest,
//! the state is refined `mu` times: downscale, recurse one level lower,
//! upscale together with that level's analysis features, and add the result
//! back. Unfolding the recursion names every convolution instance with a
//! [`ModuleTag`], and the same walk drives weight initialization, the forward
//! pass, shape prediction, and cost accounting, so they cannot drift apart.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Number of extra noise channels appended to the RGB input.
pub const NOISE_CHANNELS: usize = 1;

/// Default feature widths for six levels, coarsest level first. Width shrinks
/// toward full resolution, where planes are largest.
pub const DEFAULT_SCHEDULE: [usize; 6] = [256, 192, 128, 92, 48, 9];

/// Feature widths sized for a single desk machine: four levels, planes
/// narrow enough that training and inference fit in ordinary RAM.
pub const DESK_SCHEDULE: [usize; 4] = [32, 24, 16, 8];

/// Feature schedule used when none is given: the last `levels` entries of
/// [`DEFAULT_SCHEDULE`], which keeps the narrow widths at the finest levels.
pub fn default_schedule(levels: usize) -> Result<Vec<usize>> {
    if levels == 0 || levels > DEFAULT_SCHEDULE.len() {
        return Err(Error::invalid(
            "default_schedule",
            format!("no default for {} levels; pass an explicit schedule", levels),
        ));
    }
    Ok(DEFAULT_SCHEDULE[DEFAULT_SCHEDULE.len() - levels..].to_vec())
}

/// The role a convolution instance plays in the unfolded network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Analysis,
    Downscale,
    Upscale,
    Synthesis,
}

impl ModuleKind {
    fn as_str(&self) -> &'static str {
        match self {
            ModuleKind::Analysis => "analysis",
            ModuleKind::Downscale => "downscale",
            ModuleKind::Upscale => "upscale",
            ModuleKind::Synthesis => "synthesis",
        }
    }
}

/// Identity of one convolution instance in the unfolded recursion.
///
/// `level` is the resolution level the instance produces or consumes
/// (1 = coarsest). `path` lists the refinement-step indices (1-based) taken
/// from the top of the recursion down to this instance; analysis and synthesis
/// instances sit outside the recursion and have an empty path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModuleTag {
    pub kind: ModuleKind,
    pub level: usize,
    pub path: Vec<u8>,
}

impl ModuleTag {
    pub fn analysis(level: usize) -> ModuleTag {
        ModuleTag {
            kind: ModuleKind::Analysis,
            level,
            path: Vec::new(),
        }
    }

    pub fn synthesis(level: usize) -> ModuleTag {
        ModuleTag {
            kind: ModuleKind::Synthesis,
            level,
            path: Vec::new(),
        }
    }

    /// Stable text form, also used as the block-name prefix in weight files:
    /// `analysis.l2`, `downscale.l1.p2_1`, `synthesis.l4`.
    pub fn name(&self) -> String {
        let mut s = self.kind.as_str().to_string();
        s.push_str(&format!(".l{}", self.level));
        if !self.path.is_empty() {
            s.push_str(".p");
            for (i, p) in self.path.iter().enumerate() {
                if i > 0 {
                    s.push('_');
                }
                s.push_str(&p.to_string());
            }
        }
        s
    }

    /// Parse the text form produced by [`ModuleTag::name`].
    pub fn parse(text: &str) -> Result<ModuleTag> {
        let bad = || Error::format(format!("bad module tag {:?}", text));
        let mut parts = text.split('.');
        let kind = match parts.next() {
            Some("analysis") => ModuleKind::Analysis,
            Some("downscale") => ModuleKind::Downscale,
            Some("upscale") => ModuleKind::Upscale,
            Some("synthesis") => ModuleKind::Synthesis,
            _ => return Err(bad()),
        };
        let mut level = 0;
        let mut path = Vec::new();
        for part in parts {
            if let Some(rest) = part.strip_prefix('l') {
                level = rest.parse::<usize>().map_err(|_| bad())?;
            } else if let Some(rest) = part.strip_prefix('p') {
                for seg in rest.split('_') {
                    path.push(seg.parse::<u8>().map_err(|_| bad())?);
                }
            } else {
                return Err(bad());
            }
        }
        Ok(ModuleTag { kind, level, path })
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// One convolution instance: its identity and its static shape contract.
#[derive(Debug, Clone)]
pub struct PlanInstance {
    pub tag: ModuleTag,
    pub spec: ConvSpec,
}

/// Scalar configuration of a network, sufficient to rebuild its plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanConfig {
    /// Refinement steps per level transition.
    pub mu: usize,
    /// Number of resolution levels (1 = coarsest in level indexing).
    pub levels: usize,
    /// Feature width per level, coarse to fine: `schedule[k-1]` is the width
    /// at level `k`.
    pub schedule: Vec<usize>,
    /// Odd kernel size used by stride-1 convolutions; strided transitions use
    /// `filter + 1`.
    pub filter: usize,
}

impl PlanConfig {
    pub fn new(mu: usize, levels: usize, schedule: Vec<usize>, filter: usize) -> PlanConfig {
        PlanConfig {
            mu,
            levels,
            schedule,
            filter,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mu == 0 {
            return Err(Error::invalid("unfold", "mu must be at least 1"));
        }
        if self.levels == 0 {
            return Err(Error::invalid("unfold", "levels must be at least 1"));
        }
        if self.schedule.len() != self.levels {
            return Err(Error::invalid(
                "unfold",
                format!(
                    "schedule has {} widths for {} levels",
                    self.schedule.len(),
                    self.levels
                ),
            ));
        }
        if self.schedule.iter().any(|w| *w == 0) {
            return Err(Error::invalid("unfold", "feature widths must be positive"));
        }
        if self.filter == 0 || self.filter % 2 == 0 {
            return Err(Error::invalid(
                "unfold",
                format!("filter size must be odd and positive, got {}", self.filter),
            ));
        }
        Ok(())
    }

    /// Width at level `k` (1-based, 1 = coarsest).
    pub fn width(&self, k: usize) -> usize {
        self.schedule[k - 1]
    }

    /// Analysis convolution for level `k`: stride `2^(levels-k)` brings the
    /// full-resolution input down to level `k` in one hop.
    pub fn analysis_spec(&self, k: usize) -> ConvSpec {
        let stride = 1usize << (self.levels - k);
        let (kernel, padding) = if stride > 1 {
            (2 * stride, stride / 2)
        } else {
            (self.filter, (self.filter - 1) / 2)
        };
        ConvSpec::normal(3 + NOISE_CHANNELS, self.width(k), kernel, stride, padding)
    }

    /// Downscale convolution for the transition into level `k` from level
    /// `k+1`: stride 2, halving the spatial size (inputs are padded to even
    /// dimensions first).
    pub fn downscale_spec(&self, k: usize) -> ConvSpec {
        ConvSpec::normal(
            self.width(k + 1),
            self.width(k),
            self.filter + 1,
            2,
            (self.filter - 1) / 2,
        )
    }

    /// Upscale convolution for the transition out of level `k` back to level
    /// `k+1`: transposed, stride 2, consuming the concatenation of the
    /// level-`k` analysis features and the refined level-`k` state.
    pub fn upscale_spec(&self, k: usize) -> ConvSpec {
        ConvSpec::transposed(
            2 * self.width(k),
            self.width(k + 1),
            self.filter + 1,
            2,
            self.filter / 2,
        )
    }

    /// Synthesis convolution: stride 1 at full resolution, features to RGB.
    pub fn synthesis_spec(&self) -> ConvSpec {
        ConvSpec::normal(
            self.width(self.levels),
            3,
            self.filter,
            1,
            (self.filter - 1) / 2,
        )
    }

    /// Spatial granularity of the plan: inputs are padded per instance, and
    /// outputs keep the input's size, so any size at least
    /// [`PlanConfig::min_input`] works.
    pub fn min_input(&self) -> usize {
        // The coarsest level sees the input shrunk by 2^(levels-1); keep at
        // least a 4x4 plane there so kernels have something to look at.
        4 << (self.levels - 1)
    }
}

/// An unfolded network: configuration plus the flat instance list in
/// execution order.
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub config: PlanConfig,
    pub instances: Vec<PlanInstance>,
}

/// Walks the recursion, producing a value per intermediate state. Implemented
/// by the real forward pass, by weight initialization, and by the shape
/// simulator, all of which therefore agree on traversal order.
pub(crate) trait RecursionVisitor {
    type Value: Clone;

    /// The network input (RGB plus noise channels) at full resolution.
    fn input(&mut self) -> Result<Self::Value>;
    /// Apply one tagged convolution instance.
    fn apply(&mut self, tag: &ModuleTag, spec: &ConvSpec, input: &Self::Value)
        -> Result<Self::Value>;
    /// Concatenate two feature states along channels.
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Elementwise sum of the running state and an upscaled correction; the
    /// correction is first trimmed to the state's spatial size.
    fn add_trimmed(&mut self, state: &Self::Value, correction: &Self::Value)
        -> Result<Self::Value>;
}

/// Drive a visitor through the full network: analysis at every level, the
/// back-projection recursion from the coarsest state, then synthesis.
pub(crate) fn drive<V: RecursionVisitor>(config: &PlanConfig, visitor: &mut V) -> Result<V::Value> {
    let x = visitor.input()?;
    let mut pyramid = Vec::with_capacity(config.levels);
    for k in 1..=config.levels {
        let tag = ModuleTag::analysis(k);
        pyramid.push(visitor.apply(&tag, &config.analysis_spec(k), &x)?);
    }
    let top = pyramid[config.levels - 1].clone();
    let mut path = Vec::new();
    let refined = refine(config, visitor, config.levels, top, &pyramid, &mut path)?;
    let tag = ModuleTag::synthesis(config.levels);
    visitor.apply(&tag, &config.synthesis_spec(), &refined)
}

fn refine<V: RecursionVisitor>(
    config: &PlanConfig,
    visitor: &mut V,
    k: usize,
    state: V::Value,
    pyramid: &[V::Value],
    path: &mut Vec<u8>,
) -> Result<V::Value> {
    if k == 1 {
        return Ok(state);
    }
    let mut out = state;
    for s in 1..=config.mu {
        path.push(s as u8);
        let tag = ModuleTag {
            kind: ModuleKind::Downscale,
            level: k - 1,
            path: path.clone(),
        };
        let coarse = visitor.apply(&tag, &config.downscale_spec(k - 1), &out)?;
        let refined = refine(config, visitor, k - 1, coarse, pyramid, path)?;
        let joined = visitor.concat(&pyramid[k - 2], &refined)?;
        let tag = ModuleTag {
            kind: ModuleKind::Upscale,
            level: k - 1,
            path: path.clone(),
        };
        let up = visitor.apply(&tag, &config.upscale_spec(k - 1), &joined)?;
        out = visitor.add_trimmed(&out, &up)?;
        path.pop();
    }
    Ok(out)
}

/// Collects `(tag, spec)` pairs in traversal order without touching data.
struct Collector {
    instances: Vec<PlanInstance>,
}

impl RecursionVisitor for Collector {
    type Value = ();

    fn input(&mut self) -> Result<()> {
        Ok(())
    }

    fn apply(&mut self, tag: &ModuleTag, spec: &ConvSpec, _input: &()) -> Result<()> {
        self.instances.push(PlanInstance {
            tag: tag.clone(),
            spec: *spec,
        });
        Ok(())
    }

    fn concat(&mut self, _a: &(), _b: &()) -> Result<()> {
        Ok(())
    }

    fn add_trimmed(&mut self, _state: &(), _correction: &()) -> Result<()> {
        Ok(())
    }
}

/// Unfold the recursion for the given configuration into a flat plan.
pub fn unfold(config: PlanConfig) -> Result<NetworkPlan> {
    config.validate()?;
    let mut collector = Collector {
        instances: Vec::new(),
    };
    drive(&config, &mut collector)?;
    Ok(NetworkPlan {
        config,
        instances: collector.instances,
    })
}

impl NetworkPlan {
    /// Instances of one kind, in execution order.
    pub fn count_kind(&self, kind: ModuleKind) -> usize {
        self.instances.iter().filter(|i| i.tag.kind == kind).count()
    }

    /// Total trainable parameters across all instances.
    pub fn param_count(&self) -> u64 {
        self.instances.iter().map(|i| i.spec.param_count()).sum()
    }

    /// Map from tag to instance position.
    pub fn index(&self) -> HashMap<ModuleTag, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.tag.clone(), i))
            .collect()
    }
}

/// One step of the shape simulation: spatial size per recursion state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-instance record from a shape simulation.
#[derive(Debug, Clone)]
pub struct CostRecord {
    pub tag: ModuleTag,
    pub input: SimShape,
    pub output: SimShape,
    pub macs: u64,
}

struct Simulator<'a> {
    plan: &'a NetworkPlan,
    cursor: usize,
    height: usize,
    width: usize,
    records: Vec<CostRecord>,
}

impl RecursionVisitor for Simulator<'_> {
    type Value = SimShape;

    fn input(&mut self) -> Result<SimShape> {
        Ok(SimShape {
            channels: 3 + NOISE_CHANNELS,
            height: self.height,
            width: self.width,
        })
    }

    fn apply(&mut self, tag: &ModuleTag, spec: &ConvSpec, input: &SimShape) -> Result<SimShape> {
        let inst = self.plan.instances.get(self.cursor).ok_or_else(|| {
            Error::invalid("simulate", format!("plan ended before instance {}", tag))
        })?;
        if &inst.tag != tag || inst.spec != *spec {
            return Err(Error::invalid(
                "simulate",
                format!("plan order mismatch: expected {}, walked {}", inst.tag, tag),
            ));
        }
        self.cursor += 1;

        // Strided forward convolutions first pad the input up to a multiple
        // of the stride, so the output covers ceil(len / stride) positions.
        let (h, w) = if !spec.transposed && spec.stride > 1 {
            (
                input.height.next_multiple_of(spec.stride),
                input.width.next_multiple_of(spec.stride),
            )
        } else {
            (input.height, input.width)
        };
        let padded = SimShape {
            channels: input.channels,
            height: h,
            width: w,
        };
        let (oh, ow) = spec.out_hw(padded.height, padded.width)?;
        let output = SimShape {
            channels: spec.out_channels,
            height: oh,
            width: ow,
        };
        self.records.push(CostRecord {
            tag: tag.clone(),
            input: padded,
            output,
            macs: spec.mac_count(padded.height, padded.width)?,
        });
        Ok(output)
    }

    fn concat(&mut self, a: &SimShape, b: &SimShape) -> Result<SimShape> {
        if a.height != b.height || a.width != b.width {
            return Err(Error::shape(
                "simulate",
                format!(
                    "concat operands disagree: {}x{} vs {}x{}",
                    a.height, a.width, b.height, b.width
                ),
            ));
        }
        Ok(SimShape {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
        })
    }

    fn add_trimmed(&mut self, state: &SimShape, correction: &SimShape) -> Result<SimShape> {
        if correction.height < state.height || correction.width < state.width {
            return Err(Error::shape(
                "simulate",
                format!(
                    "correction {}x{} smaller than state {}x{}",
                    correction.height, correction.width, state.height, state.width
                ),
            ));
        }
        Ok(*state)
    }
}

/// Walk the plan on a symbolic input of the given size, checking that the
/// stored instance order matches the recursion, and report every instance's
/// input and output shape along with its multiply-accumulate count.
pub fn simulate_shapes(plan: &NetworkPlan, height: usize, width: usize) -> Result<Vec<CostRecord>> {
    let min = plan.config.min_input();
    if height < min || width < min {
        return Err(Error::ImageTooSmall {
            height,
            width,
            min,
        });
    }
    let mut sim = Simulator {
        plan,
        cursor: 0,
        height,
        width,
        records: Vec::new(),
    };
    drive(&plan.config, &mut sim)?;
    if sim.cursor != plan.instances.len() {
        return Err(Error::invalid(
            "simulate",
            format!(
                "walked {} instances, plan has {}",
                sim.cursor,
                plan.instances.len()
            ),
        ));
    }
    Ok(sim.records)
}

/// Total multiply-accumulate count for one forward pass at the given input
/// size.
pub fn count_cost(plan: &NetworkPlan, height: usize, width: usize) -> Result<u64> {
    Ok(simulate_shapes(plan, height, width)?
        .iter()
        .map(|r| r.macs)
        .sum())
}
