//! Non-overlapping downsampling with recorded provenance.
//!
//! Every pooling call returns a [`PoolResult`] that remembers, per output
//! cell, which input cells produced the value and with what coefficients.
//! The backward pass and unpooling are both a scatter along that record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::gistats::{center_indices, gather_window, pooled_geometry, GiKernel, GiStarMap, Weighting};
use crate::grid::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[serde(rename = "gpool")]
    GPool,
    Max,
    #[serde(rename = "avg")]
    Average,
    #[serde(rename = "stride")]
    StrideSubsample,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::GPool => "gpool",
            PoolMode::Max => "max",
            PoolMode::Average => "avg",
            PoolMode::StrideSubsample => "stride",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpool" => Ok(PoolMode::GPool),
            "max" => Ok(PoolMode::Max),
            "avg" | "average" => Ok(PoolMode::Average),
            "stride" | "stride_subsample" => Ok(PoolMode::StrideSubsample),
            other => Err(Error::InvalidArgument(format!("unknown pool mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub window: usize,
    pub stride: usize,
    pub mode: PoolMode,
    /// Gi* cutoff; only read by [`PoolMode::GPool`].
    pub threshold: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

impl PoolConfig {
    /// Non-overlapping config (`stride == window`) with distance weights.
    pub fn new(mode: PoolMode, window: usize, threshold: f64) -> Result<Self> {
        let config = Self {
            window,
            stride: window,
            mode,
            threshold,
            weighting: Weighting::Distance,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn gpool(threshold: f64) -> Self {
        Self::new(PoolMode::GPool, 4, threshold).expect("valid gpool config")
    }

    pub fn max2() -> Self {
        Self::new(PoolMode::Max, 2, 0.0).expect("valid max config")
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window != self.stride {
            return Err(Error::InvalidConfig(format!(
                "window {} must equal stride {}",
                self.window, self.stride
            )));
        }
        if !matches!(self.window, 2 | 4) {
            return Err(Error::InvalidConfig(format!(
                "window {} not supported (use 2 or 4)",
                self.window
            )));
        }
        if self.mode == PoolMode::GPool && self.window != 4 {
            return Err(Error::InvalidConfig("gpool requires a 4x4 window".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "threshold {} is not finite",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Where one output cell came from. Source indices are flat indices into the
/// pooling input.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Linear combination of sources; coefficients sum to 1.
    Hotspot { sources: SmallVec<[(usize, f64); 4]> },
    /// Single selected source.
    Max { source: usize },
}

#[derive(Debug, Clone)]
pub struct PoolResult {
    config: PoolConfig,
    input_shape: (usize, usize, usize),
    output: FeatureMap,
    provenance: Vec<Provenance>,
    hotspot_flags: Vec<bool>,
    gi_star: Option<GiStarMap>,
}

impl PoolResult {
    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn output(&self) -> &FeatureMap {
        &self.output
    }

    pub fn into_output(self) -> FeatureMap {
        self.output
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn hotspot_flags(&self) -> &[bool] {
        &self.hotspot_flags
    }

    /// Per-window Gi* values, present for G-pooling results.
    pub fn gi_star(&self) -> Option<&GiStarMap> {
        self.gi_star.as_ref()
    }

    /// Hotspot flags as a 0/1 map on the output grid.
    pub fn flags_map(&self) -> FeatureMap {
        let (c, h, w) = self.output.shape();
        let data = self.hotspot_flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        FeatureMap::from_vec(c, h, w, data).expect("flags match output geometry")
    }

    /// Percentage of windows that took the hotspot branch.
    pub fn hotspot_rate(&self) -> f64 {
        let hits = self.hotspot_flags.iter().filter(|&&f| f).count();
        100.0 * hits as f64 / self.hotspot_flags.len() as f64
    }

    /// Smallest `|Gi* − threshold|` over all windows; `None` for non-G-pooling.
    pub fn threshold_margin(&self) -> Option<f64> {
        let t = self.config.threshold;
        self.gi_star
            .as_ref()
            .map(|g| g.values().iter().map(|v| (v - t).abs()).fold(f64::INFINITY, f64::min))
    }
}

/// Dispatches on `config.mode`.
pub fn pool(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    config.validate()?;
    run(map, config)
}

fn expect_mode(config: &PoolConfig, mode: PoolMode) -> Result<()> {
    config.validate()?;
    if config.mode != mode {
        return Err(Error::WrongMode {
            expected: mode.name(),
            actual: config.mode.name(),
        });
    }
    Ok(())
}

/// Hotspot windows (Gi* ≥ threshold) emit the center value, the rest the max.
pub fn g_pool(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    expect_mode(config, PoolMode::GPool)?;
    run(map, config)
}

pub fn max_pool(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    expect_mode(config, PoolMode::Max)?;
    run(map, config)
}

pub fn avg_pool(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    expect_mode(config, PoolMode::Average)?;
    run(map, config)
}

/// Keeps the top-left element of each window.
pub fn stride_subsample(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    expect_mode(config, PoolMode::StrideSubsample)?;
    run(map, config)
}

/// Lowest in-window index holding the maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

fn run(map: &FeatureMap, config: &PoolConfig) -> Result<PoolResult> {
    let k = config.window;
    let (oh, ow) = pooled_geometry(map, k, config.stride)?;
    let (channels, height, width) = map.shape();
    let cells = channels * oh * ow;
    let kernel = (config.mode == PoolMode::GPool).then(|| GiKernel::new(k, config.weighting));
    let centers = center_indices(k);

    let mut out = Vec::with_capacity(cells);
    let mut provenance = Vec::with_capacity(cells);
    let mut flags = Vec::with_capacity(cells);
    let mut gi_values = Vec::with_capacity(if kernel.is_some() { cells } else { 0 });
    let mut buf = vec![0.0; k * k];

    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                gather_window(map, c, oy, ox, k, &mut buf);
                let source = |j: usize| (c * height + oy * k + j / k) * width + ox * k + j % k;
                let mut hotspot = false;
                let (value, prov) = match config.mode {
                    PoolMode::GPool => {
                        let g = kernel.as_ref().expect("gpool kernel").evaluate(&buf);
                        gi_values.push(g);
                        if g >= config.threshold {
                            hotspot = true;
                            spread(&buf, centers.iter().copied(), source)
                        } else {
                            let j = argmax(&buf);
                            (buf[j], Provenance::Max { source: source(j) })
                        }
                    }
                    PoolMode::Max => {
                        let j = argmax(&buf);
                        (buf[j], Provenance::Max { source: source(j) })
                    }
                    PoolMode::Average => spread(&buf, 0..k * k, source),
                    PoolMode::StrideSubsample => (buf[0], Provenance::Max { source: source(0) }),
                };
                out.push(value);
                provenance.push(prov);
                flags.push(hotspot);
            }
        }
    }

    let gi_star = if kernel.is_some() {
        Some(GiStarMap::from_feature_map(FeatureMap::from_vec(
            channels, oh, ow, gi_values,
        )?))
    } else {
        None
    };
    Ok(PoolResult {
        config: *config,
        input_shape: map.shape(),
        output: FeatureMap::from_vec(channels, oh, ow, out)?,
        provenance,
        hotspot_flags: flags,
        gi_star,
    })
}

/// Uniform mean over the selected in-window indices.
fn spread(
    buf: &[f64],
    picks: impl Iterator<Item = usize> + Clone,
    source: impl Fn(usize) -> usize,
) -> (f64, Provenance) {
    let count = picks.clone().count();
    let coef = 1.0 / count as f64;
    let value = picks.clone().map(|j| buf[j]).sum::<f64>() / count as f64;
    let sources = picks.map(|j| (source(j), coef)).collect();
    (value, Provenance::Hotspot { sources })
}

fn scatter(result: &PoolResult, values: &FeatureMap) -> Result<FeatureMap> {
    if values.shape() != result.output.shape() {
        return Err(Error::GeometryMismatch(format!(
            "expected {:?} on the pooled grid, got {:?}",
            result.output.shape(),
            values.shape()
        )));
    }
    let (c, h, w) = result.input_shape;
    let mut grad = vec![0.0; c * h * w];
    for (prov, &v) in result.provenance.iter().zip(values.data()) {
        match prov {
            Provenance::Max { source } => grad[*source] += v,
            Provenance::Hotspot { sources } => {
                for &(s, coef) in sources {
                    grad[s] += coef * v;
                }
            }
        }
    }
    FeatureMap::from_vec(c, h, w, grad)
}

/// Gradient with respect to the pooling input, holding the branch decision and
/// argmax fixed.
pub fn pool_backward(result: &PoolResult, upstream_grad: &FeatureMap) -> Result<FeatureMap> {
    scatter(result, upstream_grad)
}

/// Places pooled values back at their recorded sources on a grid of the
/// original input size.
pub fn unpool(
    result: &PoolResult,
    pooled: &FeatureMap,
    target_height: usize,
    target_width: usize,
) -> Result<FeatureMap> {
    let (_, h, w) = result.input_shape;
    if (target_height, target_width) != (h, w) {
        return Err(Error::GeometryMismatch(format!(
            "unpool target {target_height}x{target_width} differs from pooled input {h}x{w}"
        )));
    }
    scatter(result, pooled)
}

/// Gather along provenance: the adjoint of [`unpool`].
pub(crate) fn unpool_backward(result: &PoolResult, grad: &[f64]) -> Vec<f64> {
    result
        .provenance
        .iter()
        .map(|prov| match prov {
            Provenance::Max { source } => grad[*source],
            Provenance::Hotspot { sources } => sources.iter().map(|&(s, coef)| coef * grad[s]).sum(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotStats {
    pub threshold: f64,
    /// One percentage per result, averaged over its channels.
    pub per_layer_rate: Vec<f64>,
    /// Percentage over every window of every layer and channel.
    pub overall_rate: f64,
}

pub fn hotspot_stats(results: &[&PoolResult], threshold: f64) -> Result<HotspotStats> {
    if results.is_empty() {
        return Err(Error::Empty("hotspot_stats needs at least one pooling result"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut per_layer_rate = Vec::with_capacity(results.len());
    for r in results {
        if r.config.mode != PoolMode::GPool {
            return Err(Error::WrongMode {
                expected: PoolMode::GPool.name(),
                actual: r.config.mode.name(),
            });
        }
        if r.config.threshold != threshold {
            return Err(Error::InvalidArgument(format!(
                "result pooled at threshold {} but stats requested at {threshold}",
                r.config.threshold
            )));
        }
        let (c, oh, ow) = r.output.shape();
        let plane = oh * ow;
        let mean_rate = (0..c)
            .map(|ch| {
                let n = r.hotspot_flags[ch * plane..(ch + 1) * plane]
                    .iter()
                    .filter(|&&f| f)
                    .count();
                100.0 * n as f64 / plane as f64
            })
            .sum::<f64>()
            / c as f64;
        per_layer_rate.push(mean_rate);
        hits += r.hotspot_flags.iter().filter(|&&f| f).count();
        total += r.hotspot_flags.len();
    }
    Ok(HotspotStats {
        threshold,
        per_layer_rate,
        overall_rate: 100.0 * hits as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Rng;

    fn single(h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::from_vec(1, h, w, data).unwrap()
    }

    fn cfg(mode: PoolMode, k: usize) -> PoolConfig {
        PoolConfig::new(mode, k, 1.5).unwrap()
    }

    fn center_block(block: [f64; 4]) -> FeatureMap {
        FeatureMap::from_fn(1, 4, 4, |_, y, x| {
            if (1..3).contains(&y) && (1..3).contains(&x) {
                block[(y - 1) * 2 + (x - 1)]
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PoolConfig::new(PoolMode::GPool, 2, 1.0).is_err());
        assert!(PoolConfig::new(PoolMode::Max, 3, 1.0).is_err());
        assert!(PoolConfig::new(PoolMode::GPool, 4, f64::NAN).is_err());
        let mut c = PoolConfig::max2();
        c.stride = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gpool_constant_takes_max_branch() {
        let m = FeatureMap::new(1, 4, 4, 0.7).unwrap();
        let r = g_pool(&m, &PoolConfig::gpool(1.5)).unwrap();
        assert_eq!(r.output().data(), &[0.7]);
        assert_eq!(r.hotspot_flags(), &[false]);
    }

    #[test]
    fn gpool_branches_on_threshold() {
        let m = center_block([8.0, 10.0, 9.0, 9.0]);
        let g = r_gi(&m);
        let hot = g_pool(&m, &PoolConfig::gpool(g - 0.1)).unwrap();
        assert_eq!(hot.output().data(), &[9.0]);
        assert_eq!(hot.hotspot_flags(), &[true]);
        let cold = g_pool(&m, &PoolConfig::gpool(g + 0.1)).unwrap();
        assert_eq!(cold.output().data(), &[10.0]);
        assert_eq!(cold.hotspot_flags(), &[false]);
        // Equality goes to the hotspot branch.
        let tie = g_pool(&m, &PoolConfig::gpool(g)).unwrap();
        assert_eq!(tie.hotspot_flags(), &[true]);
    }

    fn r_gi(m: &FeatureMap) -> f64 {
        crate::gistats::gi_star_map(m, &PoolConfig::gpool(0.0))
            .unwrap()
            .values()[0]
    }

    #[test]
    fn gpool_high_threshold_is_max_pool() {
        let m = center_block([10.0; 4]);
        let r = g_pool(&m, &PoolConfig::gpool(1e6)).unwrap();
        assert_eq!(r.output().data(), &[10.0]);
        assert_eq!(r.hotspot_flags(), &[false]);
        let mx = max_pool(&m, &cfg(PoolMode::Max, 4)).unwrap();
        assert_eq!(r.output(), mx.output());
    }

    #[test]
    fn wrong_mode_rejected() {
        let m = FeatureMap::new(1, 4, 4, 0.0).unwrap();
        assert!(matches!(
            g_pool(&m, &cfg(PoolMode::Max, 4)),
            Err(Error::WrongMode { .. })
        ));
        assert!(max_pool(&m, &PoolConfig::gpool(1.0)).is_err());
    }

    #[test]
    fn max_avg_stride_basics() {
        let m = single(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap().output().data(), &[4.0]);
        assert_eq!(
            avg_pool(&m, &cfg(PoolMode::Average, 2)).unwrap().output().data(),
            &[2.5]
        );
        assert_eq!(
            stride_subsample(&m, &cfg(PoolMode::StrideSubsample, 2))
                .unwrap()
                .output()
                .data(),
            &[1.0]
        );
        let ramp = single(4, 4, (0..16).map(f64::from).collect());
        assert_eq!(
            stride_subsample(&ramp, &cfg(PoolMode::StrideSubsample, 2))
                .unwrap()
                .output()
                .data(),
            &[0.0, 2.0, 8.0, 10.0]
        );
    }

    #[test]
    fn max_ties_pick_lowest_index() {
        let m = FeatureMap::new(1, 2, 2, 3.0).unwrap();
        let r = max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap();
        assert_eq!(r.provenance(), &[Provenance::Max { source: 0 }]);
        let m = single(2, 2, vec![1.0, 5.0, 5.0, 0.0]);
        let r = max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap();
        assert_eq!(r.provenance(), &[Provenance::Max { source: 1 }]);
    }

    #[test]
    fn backward_scatter_rules() {
        let m = single(2, 2, vec![1.0, 2.0, 4.0, 3.0]);
        let r = max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap();
        let g = pool_backward(&r, &FeatureMap::new(1, 1, 1, 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);

        let r = g_pool(&center_block([1.0, 2.0, 3.0, 4.0]), &PoolConfig::gpool(-1e6)).unwrap();
        let g = pool_backward(&r, &FeatureMap::new(1, 1, 1, 1.0).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (1..3).contains(&y) && (1..3).contains(&x) {
                    0.25
                } else {
                    0.0
                };
                assert_eq!(g.get(0, y, x), expect);
            }
        }
    }

    #[test]
    fn backward_geometry_checked() {
        let m = FeatureMap::new(1, 4, 4, 1.0).unwrap();
        let r = max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap();
        assert!(pool_backward(&r, &FeatureMap::new(1, 1, 1, 1.0).unwrap()).is_err());
        assert!(unpool(&r, r.output(), 8, 8).is_err());
    }

    #[test]
    fn unpool_uniform_coefficients() {
        let m = single(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = avg_pool(&m, &cfg(PoolMode::Average, 2)).unwrap();
        let up = unpool(&r, r.output(), 2, 2).unwrap();
        assert_eq!(up.data(), &[0.625; 4]);
    }

    #[test]
    fn unpool_max_places_at_argmax() {
        let mut rng = Rng::new(5);
        let m = FeatureMap::from_fn(2, 8, 8, |_, _, _| rng.normal()).unwrap();
        let r = max_pool(&m, &cfg(PoolMode::Max, 2)).unwrap();
        let up = unpool(&r, r.output(), 8, 8).unwrap();
        let mut nonzero = 0;
        for (i, &v) in up.data().iter().enumerate() {
            if v != 0.0 {
                nonzero += 1;
                assert_eq!(v, m.data()[i]);
            }
        }
        assert_eq!(nonzero, r.output().len());
    }

    #[test]
    fn unpool_adjoint() {
        let mut rng = Rng::new(9);
        let m = FeatureMap::from_fn(1, 8, 8, |_, _, _| rng.normal()).unwrap();
        let r = g_pool(&m, &PoolConfig::gpool(0.0)).unwrap();
        let p = FeatureMap::from_fn(1, 2, 2, |_, _, _| rng.normal()).unwrap();
        let q: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let up = unpool(&r, &p, 8, 8).unwrap();
        let lhs: f64 = up.data().iter().zip(&q).map(|(a, b)| a * b).sum();
        let back = unpool_backward(&r, &q);
        let rhs: f64 = back.iter().zip(p.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stats_counting() {
        let m = FeatureMap::new(1, 8, 8, 1.0).unwrap();
        let mut r = g_pool(&m, &PoolConfig::gpool(1.0)).unwrap();
        assert_eq!(hotspot_stats(&[&r], 1.0).unwrap().overall_rate, 0.0);
        r.hotspot_flags = vec![true; 4];
        assert_eq!(hotspot_stats(&[&r], 1.0).unwrap().overall_rate, 100.0);
        r.hotspot_flags = vec![true, false, false, false];
        let s = hotspot_stats(&[&r], 1.0).unwrap();
        assert_eq!(s.per_layer_rate, vec![25.0]);
        assert_eq!(s.overall_rate, 25.0);
        assert!(hotspot_stats(&[], 1.0).is_err());
        assert!(hotspot_stats(&[&r], 2.0).is_err());
    }

    #[test]
    fn mode_names_parse() {
        for mode in [
            PoolMode::GPool,
            PoolMode::Max,
            PoolMode::Average,
            PoolMode::StrideSubsample,
        ] {
            assert_eq!(mode.name().parse::<PoolMode>().unwrap(), mode);
        }
        assert!("median".parse::<PoolMode>().is_err());
    }
}
