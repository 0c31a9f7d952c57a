use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gistats::Weighting;
use crate::pooling::{PoolConfig, PoolMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// `(x - mean) * scale`, elementwise.
    Normalize {
        mean: f64,
        scale: f64,
    },
    Pool {
        config: PoolConfig,
    },
    /// Inverts the pool at layer index `pool` using its recorded provenance.
    Unpool {
        pool: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    /// Stores the current activation in `slot`; identity otherwise.
    SkipSave {
        slot: usize,
    },
    /// Adds the activation stored in `slot`.
    SkipAdd {
        slot: usize,
    },
    /// Marks the logits; must be last.
    SoftmaxCeHead {
        num_classes: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }
}

pub type Shape = (usize, usize, usize);

/// A validated layer list with every intermediate shape resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    num_classes: usize,
}

impl Architecture {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let mismatch = |i: usize, msg: String| Error::GeometryMismatch(format!("layer {i}: {msg}"));
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(Error::ZeroDimension(vec![input.0, input.1, input.2]));
        }
        let mut shapes = vec![input];
        let mut slots: Vec<Option<Shape>> = Vec::new();
        let mut num_classes = None;
        for (i, layer) in layers.iter().enumerate() {
            let (c, h, w) = *shapes.last().expect("non-empty");
            if num_classes.is_some() {
                return Err(mismatch(i, "layers after the softmax head".into()));
            }
            let next = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if *in_channels != c {
                        return Err(mismatch(i, format!("conv expects {in_channels} channels, got {c}")));
                    }
                    if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                        return Err(mismatch(i, "conv kernel, stride and width must be positive".into()));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(mismatch(i, format!("kernel {kernel} larger than padded {h}x{w}")));
                    }
                    (
                        *out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    )
                }
                LayerSpec::Relu => (c, h, w),
                LayerSpec::Normalize { mean, scale } => {
                    if !(mean.is_finite() && scale.is_finite() && *scale != 0.0) {
                        return Err(mismatch(i, format!("normalize mean {mean} scale {scale} invalid")));
                    }
                    (c, h, w)
                }
                LayerSpec::Pool { config } => {
                    config.validate()?;
                    let k = config.stride;
                    if h % k != 0 || w % k != 0 {
                        return Err(mismatch(i, format!("{h}x{w} not divisible by pool stride {k}")));
                    }
                    (c, h / k, w / k)
                }
                LayerSpec::Unpool { pool } => {
                    let Some(LayerSpec::Pool { .. }) = layers.get(*pool).filter(|_| *pool < i) else {
                        return Err(mismatch(
                            i,
                            format!("unpool refers to layer {pool}, which is not an earlier pool"),
                        ));
                    };
                    if shapes[*pool + 1] != (c, h, w) {
                        return Err(mismatch(
                            i,
                            format!(
                                "unpool input {:?} differs from pool output {:?}",
                                (c, h, w),
                                shapes[*pool + 1]
                            ),
                        ));
                    }
                    shapes[*pool]
                }
                LayerSpec::UpsampleNearest { factor } => {
                    if *factor == 0 {
                        return Err(mismatch(i, "upsample factor must be positive".into()));
                    }
                    (c, h * factor, w * factor)
                }
                LayerSpec::SkipSave { slot } => {
                    if slots.len() <= *slot {
                        slots.resize(*slot + 1, None);
                    }
                    slots[*slot] = Some((c, h, w));
                    (c, h, w)
                }
                LayerSpec::SkipAdd { slot } => {
                    match slots.get(*slot).copied().flatten() {
                        Some(s) if s == (c, h, w) => {}
                        Some(s) => {
                            return Err(mismatch(
                                i,
                                format!("skip slot {slot} holds {s:?}, current is {:?}", (c, h, w)),
                            ))
                        }
                        None => return Err(mismatch(i, format!("skip slot {slot} never saved"))),
                    }
                    (c, h, w)
                }
                LayerSpec::SoftmaxCeHead { num_classes: k } => {
                    if *k != c {
                        return Err(mismatch(i, format!("head expects {k} class planes, got {c}")));
                    }
                    num_classes = Some(*k);
                    (c, h, w)
                }
            };
            shapes.push(next);
        }
        let num_classes =
            num_classes.ok_or_else(|| Error::InvalidArgument("architecture must end in a softmax head".into()))?;
        if shapes.last().map(|s| (s.1, s.2)) != Some((input.1, input.2)) {
            return Err(Error::GeometryMismatch(format!(
                "output {:?} does not match input resolution {:?}",
                shapes.last(),
                (input.1, input.2)
            )));
        }
        Ok(Self {
            layers,
            shapes,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    /// Input shape of layer `i`; `i == layers().len()` gives the output.
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shapes of every learnable tensor, weight then bias per conv layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (n, layer) in self.conv_layers().enumerate() {
            if let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } = layer
            {
                out.push((
                    format!("conv{n}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                ));
                out.push((format!("conv{n}.bias"), vec![*out_channels]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Indices of G-pooling layers, in forward order.
    pub fn gpool_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Pool { config } if config.mode == PoolMode::GPool))
            .map(|(i, _)| i)
            .collect()
    }

    /// Same layers with every G-pooling threshold replaced.
    pub fn with_gpool_threshold(&self, threshold: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Pool { config } if config.mode == PoolMode::GPool => LayerSpec::Pool {
                    config: PoolConfig { threshold, ..*config },
                },
                other => other.clone(),
            })
            .collect();
        Self::new(self.shapes[0], layers)
    }
}

/// Pooling rule of one experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Arm {
    #[serde(rename = "gpool")]
    GPool {
        threshold: f64,
        #[serde(default)]
        weighting: Weighting,
    },
    Max,
    #[serde(rename = "avg")]
    Average,
    Stride,
}

impl Arm {
    pub fn gpool(threshold: f64) -> Self {
        Arm::GPool {
            threshold,
            weighting: Weighting::Distance,
        }
    }

    pub fn mode(&self) -> PoolMode {
        match self {
            Arm::GPool { .. } => PoolMode::GPool,
            Arm::Max => PoolMode::Max,
            Arm::Average => PoolMode::Average,
            Arm::Stride => PoolMode::StrideSubsample,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            Arm::GPool { threshold, .. } => Some(*threshold),
            _ => None,
        }
    }

    /// Pools that together downsample by 4: one 4×4 G-pool, or two 2×2
    /// pools of the arm's mode.
    pub fn stage(&self) -> Result<Vec<PoolConfig>> {
        match *self {
            Arm::GPool { threshold, weighting } => Ok(vec![
                PoolConfig::new(PoolMode::GPool, 4, threshold)?.with_weighting(weighting)
            ]),
            other => {
                let c = PoolConfig::new(other.mode(), 2, 0.0)?;
                Ok(vec![c, c])
            }
        }
    }

    /// Short label such as `gpool-1.5` or `max`.
    pub fn label(&self) -> String {
        match self {
            Arm::GPool { threshold, weighting } => {
                let suffix = match weighting {
                    Weighting::Distance => "",
                    Weighting::InverseDistance => "-inv",
                };
                format!("gpool-{threshold}{suffix}")
            }
            other => other.mode().name().to_string(),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Arm {
    type Err = Error;

    /// Accepts `gpool` (threshold 1.5), `gpool-<t>`, `max`, `avg`, `stride`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(t) = s.strip_prefix("gpool-") {
            let threshold = t
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad threshold in arm {s:?}")))?;
            return Ok(Arm::gpool(threshold));
        }
        match s.parse::<PoolMode>()? {
            PoolMode::GPool => Ok(Arm::gpool(1.5)),
            PoolMode::Max => Ok(Arm::Max),
            PoolMode::Average => Ok(Arm::Average),
            PoolMode::StrideSubsample => Ok(Arm::Stride),
        }
    }
}

/// The two-stage encoder-decoder used for every experiment arm.
///
/// ```text
/// normalize [0, 1] → [-1, 1]
/// conv 3→8, relu, conv 8→8, relu, save s0, STAGE-A (×4 down)
/// conv 8→16, relu, conv 16→16, relu, save s1, STAGE-B (×4 down)
/// conv 16→16, relu
/// unpool STAGE-B, add s1, conv 16→8, relu
/// unpool STAGE-A, add s0, conv 8→8, relu
/// conv 1×1 8→K, softmax head
/// ```
pub struct ReferenceArchitecture;

impl ReferenceArchitecture {
    pub fn build(arm: Arm, input: Shape, num_classes: usize) -> Result<Architecture> {
        let mut layers = vec![
            LayerSpec::Normalize { mean: 0.5, scale: 2.0 },
            LayerSpec::conv(input.0, 8, 3),
            LayerSpec::Relu,
            LayerSpec::conv(8, 8, 3),
            LayerSpec::Relu,
            LayerSpec::SkipSave { slot: 0 },
        ];
        let stage_a = push_stage(&mut layers, arm)?;
        layers.extend([
            LayerSpec::conv(8, 16, 3),
            LayerSpec::Relu,
            LayerSpec::conv(16, 16, 3),
            LayerSpec::Relu,
            LayerSpec::SkipSave { slot: 1 },
        ]);
        let stage_b = push_stage(&mut layers, arm)?;
        layers.extend([LayerSpec::conv(16, 16, 3), LayerSpec::Relu]);
        layers.extend(stage_b.iter().rev().map(|&pool| LayerSpec::Unpool { pool }));
        layers.extend([
            LayerSpec::SkipAdd { slot: 1 },
            LayerSpec::conv(16, 8, 3),
            LayerSpec::Relu,
        ]);
        layers.extend(stage_a.iter().rev().map(|&pool| LayerSpec::Unpool { pool }));
        layers.extend([
            LayerSpec::SkipAdd { slot: 0 },
            LayerSpec::conv(8, 8, 3),
            LayerSpec::Relu,
            LayerSpec::conv(8, num_classes, 1),
            LayerSpec::SoftmaxCeHead { num_classes },
        ]);
        Architecture::new(input, layers)
    }
}

fn push_stage(layers: &mut Vec<LayerSpec>, arm: Arm) -> Result<Vec<usize>> {
    let mut idx = Vec::new();
    for config in arm.stage()? {
        idx.push(layers.len());
        layers.push(LayerSpec::Pool { config });
    }
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_share_geometry_and_parameter_count() {
        let arms = [Arm::gpool(1.5), Arm::Max, Arm::Average, Arm::Stride];
        let built: Vec<Architecture> = arms
            .iter()
            .map(|&a| ReferenceArchitecture::build(a, (3, 64, 64), 4).unwrap())
            .collect();
        for a in &built {
            assert_eq!(a.shape_at(a.layers().len()), (4, 64, 64));
            assert_eq!(a.parameter_count(), built[0].parameter_count());
            assert_eq!(a.param_shapes(), built[0].param_shapes());
        }
        assert_eq!(built[0].gpool_layers().len(), 2);
        assert!(built[1].gpool_layers().is_empty());
    }

    #[test]
    fn rejects_bad_compositions() {
        let head = LayerSpec::SoftmaxCeHead { num_classes: 2 };
        assert!(Architecture::new((3, 4, 4), vec![LayerSpec::conv(2, 2, 1), head.clone()]).is_err());
        assert!(Architecture::new((2, 4, 4), vec![LayerSpec::Relu]).is_err());
        assert!(Architecture::new(
            (2, 6, 6),
            vec![
                LayerSpec::Pool {
                    config: PoolConfig::gpool(1.0)
                },
                head.clone()
            ]
        )
        .is_err());
        assert!(Architecture::new((2, 4, 4), vec![LayerSpec::Unpool { pool: 0 }, head.clone()]).is_err());
        assert!(Architecture::new((2, 4, 4), vec![LayerSpec::SkipAdd { slot: 0 }, head.clone()]).is_err());
        // Downsampled output with no way back up.
        assert!(Architecture::new(
            (2, 4, 4),
            vec![
                LayerSpec::Pool {
                    config: PoolConfig::max2()
                },
                head.clone()
            ]
        )
        .is_err());
        assert!(Architecture::new(
            (2, 4, 4),
            vec![
                LayerSpec::Pool {
                    config: PoolConfig::max2()
                },
                LayerSpec::UpsampleNearest { factor: 2 },
                head
            ]
        )
        .is_ok());
    }

    #[test]
    fn arm_labels_parse() {
        for arm in [Arm::gpool(1.5), Arm::gpool(2.0), Arm::Max, Arm::Average, Arm::Stride] {
            assert_eq!(arm.label().parse::<Arm>().unwrap(), arm);
        }
        assert_eq!("gpool".parse::<Arm>().unwrap(), Arm::gpool(1.5));
    }

    #[test]
    fn threshold_rewrite() {
        let a = ReferenceArchitecture::build(Arm::gpool(1.0), (3, 16, 16), 2).unwrap();
        let b = a.with_gpool_threshold(2.0).unwrap();
        for &i in &b.gpool_layers() {
            let LayerSpec::Pool { config } = &b.layers()[i] else {
                unreachable!()
            };
            assert_eq!(config.threshold, 2.0);
        }
    }
}
