//! Getis-Ord Gi* over a square pooling window.
//!
//! The statistic is evaluated at the geometric center of the window. Weights
//! are the Euclidean distances from that center to each pixel, so they depend
//! only on the window side and are precomputed once per side in [`GiKernel`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::pooling::PoolConfig;

/// How pixel distances from the window center turn into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w = d`, the raw Euclidean distance.
    #[default]
    Distance,
    /// `w = 1 / (1 + d)`, closer pixels weigh more.
    InverseDistance,
}

impl Weighting {
    fn apply(self, distance: f64) -> f64 {
        match self {
            Weighting::Distance => distance,
            Weighting::InverseDistance => 1.0 / (1.0 + distance),
        }
    }
}

/// Values of a full `side × side` lattice, row-major, whose top-left pixel
/// sits at `origin` (x, y) on the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    side: usize,
    origin: (usize, usize),
    values: Vec<f64>,
}

impl Window {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        Self::at(side, (0, 0), values)
    }

    pub fn at(side: usize, origin: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidArgument(format!(
                "window side must be at least 2, got {side}"
            )));
        }
        if values.len() != side * side {
            return Err(Error::LengthMismatch {
                shape: vec![side, side],
                expected: side * side,
                actual: values.len(),
            });
        }
        Ok(Self { side, origin, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Image-plane `(x, y)` of the `j`-th value.
    pub fn position(&self, j: usize) -> (f64, f64) {
        (
            (self.origin.0 + j % self.side) as f64,
            (self.origin.1 + j / self.side) as f64,
        )
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|j| self.position(j)).collect()
    }
}

/// Centroid of the lattice. On a pixel for odd sides, between pixels for even.
pub fn window_center(window: &Window) -> (f64, f64) {
    let half = (window.side - 1) as f64 / 2.0;
    (window.origin.0 as f64 + half, window.origin.1 as f64 + half)
}

/// Flat in-window indices of the pixels that define the center value: the
/// center pixel for odd sides, the central 2×2 block for even sides.
pub fn center_indices(side: usize) -> Vec<usize> {
    let mid = side / 2;
    if side % 2 == 1 {
        vec![mid * side + mid]
    } else {
        vec![
            (mid - 1) * side + mid - 1,
            (mid - 1) * side + mid,
            mid * side + mid - 1,
            mid * side + mid,
        ]
    }
}

/// Value at the window center, averaging the adjacent pixels when the center
/// falls between them.
pub fn center_value(window: &Window) -> f64 {
    let idx = center_indices(window.side);
    idx.iter().map(|&j| window.values[j]).sum::<f64>() / idx.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub center: (f64, f64),
    pub weights: Vec<f64>,
}

pub fn weight_matrix(window: &Window) -> WeightMatrix {
    weight_matrix_with(window, Weighting::Distance)
}

pub fn weight_matrix_with(window: &Window, weighting: Weighting) -> WeightMatrix {
    let center = window_center(window);
    let weights = (0..window.len())
        .map(|j| {
            let (x, y) = window.position(j);
            let (dx, dy) = (center.0 - x, center.1 - y);
            weighting.apply((dx * dx + dy * dy).sqrt())
        })
        .collect();
    WeightMatrix { center, weights }
}

pub fn window_mean(window: &Window) -> f64 {
    window.values.iter().sum::<f64>() / window.len() as f64
}

/// Population standard deviation via the raw second moment.
pub fn window_std(window: &Window) -> f64 {
    moments_std(&window.values)
}

fn moments_std(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let (sum, sum_sq) = values.iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x));
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0).sqrt()
}

pub fn gi_star(window: &Window) -> f64 {
    GiKernel::new(window.side, Weighting::Distance).evaluate(&window.values)
}

pub fn gi_star_with(window: &Window, weighting: Weighting) -> f64 {
    GiKernel::new(window.side, weighting).evaluate(&window.values)
}

/// The value-independent half of Gi* for one window side.
#[derive(Debug, Clone)]
pub struct GiKernel {
    side: usize,
    weights: Vec<f64>,
    sum_w: f64,
    // sqrt((n Σw² − (Σw)²) / (n − 1)), zero when degenerate.
    spread: f64,
}

impl GiKernel {
    pub fn new(side: usize, weighting: Weighting) -> Self {
        assert!(side >= 2, "window side must be at least 2");
        let n = side * side;
        let window = Window {
            side,
            origin: (0, 0),
            values: vec![0.0; n],
        };
        let weights = weight_matrix_with(&window, weighting).weights;
        let sum_w: f64 = weights.iter().sum();
        let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
        let n = n as f64;
        let spread = ((n * sum_w2 - sum_w * sum_w) / (n - 1.0)).max(0.0).sqrt();
        Self {
            side,
            weights,
            sum_w,
            spread,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Gi* of a row-major window of this kernel's side. Constant windows and a
    /// degenerate weight spread give 0.
    pub fn evaluate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        if self.spread == 0.0 || values.iter().all(|&v| v == values[0]) {
            return 0.0;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let s = moments_std(values);
        if s == 0.0 {
            return 0.0;
        }
        let sum_wx: f64 = self.weights.iter().zip(values).map(|(w, x)| w * x).sum();
        (sum_wx - mean * self.sum_w) / (s * self.spread)
    }
}

/// Per-window Gi* on the pooled-output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GiStarMap {
    values: FeatureMap,
}

impl GiStarMap {
    pub(crate) fn from_feature_map(values: FeatureMap) -> Self {
        Self { values }
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    pub fn out_height(&self) -> usize {
        self.values.height()
    }

    pub fn out_width(&self) -> usize {
        self.values.width()
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn get(&self, c: usize, oy: usize, ox: usize) -> f64 {
        self.values.get(c, oy, ox)
    }

    pub fn as_feature_map(&self) -> &FeatureMap {
        &self.values
    }

    pub fn into_feature_map(self) -> FeatureMap {
        self.values
    }
}

/// Checks `window == stride` and divisibility; returns the output height/width.
pub(crate) fn pooled_geometry(map: &FeatureMap, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window != stride || window == 0 {
        return Err(Error::InvalidConfig(format!(
            "window {window} must equal stride {stride}"
        )));
    }
    if !map.height().is_multiple_of(stride) || !map.width().is_multiple_of(stride) {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} input is not divisible by stride {stride}",
            map.height(),
            map.width()
        )));
    }
    Ok((map.height() / stride, map.width() / stride))
}

/// Copies the `k × k` window at output cell `(oy, ox)` of channel `c` into
/// `buf`, row-major.
pub(crate) fn gather_window(map: &FeatureMap, c: usize, oy: usize, ox: usize, k: usize, buf: &mut [f64]) {
    let plane = map.channel(c);
    let w = map.width();
    for dy in 0..k {
        let row = (oy * k + dy) * w + ox * k;
        buf[dy * k..(dy + 1) * k].copy_from_slice(&plane[row..row + k]);
    }
}

pub fn gi_star_map(map: &FeatureMap, config: &PoolConfig) -> Result<GiStarMap> {
    let k = config.window;
    let (oh, ow) = pooled_geometry(map, k, config.stride)?;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("window {k} too small for Gi*")));
    }
    let kernel = GiKernel::new(k, config.weighting);
    let mut buf = vec![0.0; k * k];
    let values = FeatureMap::from_fn(map.channels(), oh, ow, |c, oy, ox| {
        gather_window(map, c, oy, ox, k, &mut buf);
        kernel.evaluate(&buf)
    })?;
    Ok(GiStarMap { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Rng;
    use crate::pooling::PoolMode;

    fn lattice(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Window {
        let values = (0..side * side).map(|j| f(j % side, j / side)).collect();
        Window::new(side, values).unwrap()
    }

    fn center_cluster() -> Window {
        lattice(4, |x, y| {
            if (1..3).contains(&x) && (1..3).contains(&y) {
                10.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn centers() {
        assert_eq!(window_center(&lattice(3, |_, _| 0.0)), (1.0, 1.0));
        assert_eq!(window_center(&lattice(4, |_, _| 0.0)), (1.5, 1.5));
        assert_eq!(window_center(&lattice(2, |_, _| 0.0)), (0.5, 0.5));
        let shifted = Window::at(2, (4, 8), vec![0.0; 4]).unwrap();
        assert_eq!(window_center(&shifted), (4.5, 8.5));
    }

    #[test]
    fn center_values() {
        let w = lattice(3, |x, y| if (x, y) == (1, 1) { 7.0 } else { -1.0 });
        assert_eq!(center_value(&w), 7.0);
        let block = [[1.0, 2.0], [3.0, 4.0]];
        let w = lattice(4, |x, y| {
            if (1..3).contains(&x) && (1..3).contains(&y) {
                block[y - 1][x - 1]
            } else {
                100.0
            }
        });
        assert_eq!(center_value(&w), 2.5);
        assert_eq!(center_value(&lattice(4, |_, _| 3.25)), 3.25);
    }

    #[test]
    fn weights() {
        let wm = weight_matrix(&lattice(4, |_, _| 0.0));
        assert_eq!(wm.weights[0], 2.1213203435596424);
        assert!(wm.weights.iter().all(|&w| w > 0.0));
        let wm = weight_matrix(&lattice(3, |_, _| 0.0));
        assert_eq!(wm.weights[4], 0.0);
    }

    #[test]
    fn weights_match_pointwise_distance() {
        let w = lattice(4, |_, _| 0.0);
        let wm = weight_matrix(&w);
        for j in 0..16 {
            let (px, py) = ((j % 4) as f64, (j / 4) as f64);
            let d = ((1.5 - px) * (1.5 - px) + (1.5 - py) * (1.5 - py)).sqrt();
            assert!((wm.weights[j] - d).abs() <= 1e-15, "j={j}");
        }
    }

    #[test]
    fn mean_and_std() {
        let w = Window::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(window_mean(&w), 2.5);
        let w = Window::new(2, vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(window_std(&w), 1.7320508075688772);
        let c = lattice(4, |_, _| 0.1);
        assert_eq!(window_std(&c), 0.0);
        assert!((window_mean(&c) - 0.1).abs() < 1e-16);
    }

    #[test]
    fn mean_matches_pairwise_sum() {
        fn pairwise(v: &[f64]) -> f64 {
            if v.len() == 1 {
                v[0]
            } else {
                let (a, b) = v.split_at(v.len() / 2);
                pairwise(a) + pairwise(b)
            }
        }
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let w = lattice(4, |_, _| rng.range(0.0, 100.0));
            let reference = pairwise(w.values()) / 16.0;
            let got = window_mean(&w);
            assert!(
                (got - reference).abs() <= 1e-14 * reference.abs().max(1e-300),
                "{got} {reference}"
            );
        }
    }

    #[test]
    fn std_matches_two_pass() {
        let mut rng = Rng::new(12);
        for _ in 0..200 {
            let w = lattice(4, |_, _| rng.normal());
            let mean = w.values().iter().sum::<f64>() / 16.0;
            let var = w.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            let reference = var.sqrt();
            let got = window_std(&w);
            assert!((got - reference).abs() <= 1e-12 * reference, "{got} {reference}");
        }
    }

    #[test]
    fn constant_window_is_zero() {
        assert_eq!(gi_star(&lattice(4, |_, _| 0.3)), 0.0);
        assert_eq!(gi_star(&lattice(3, |_, _| -2.0)), 0.0);
    }

    #[test]
    fn center_cluster_sign_depends_on_weighting() {
        // Distance weights favour the rim, so a bright center reads as a coldspot.
        let w = center_cluster();
        assert!(gi_star(&w) < 0.0);
        assert!(gi_star_with(&w, Weighting::InverseDistance) > 0.0);
        let ring = lattice(4, |x, y| {
            if (1..3).contains(&x) && (1..3).contains(&y) {
                0.0
            } else {
                10.0
            }
        });
        assert!(gi_star(&ring) > 0.0);
    }

    #[test]
    fn map_geometry() {
        let cfg = PoolConfig::new(PoolMode::GPool, 4, 1.5).unwrap();
        let m = FeatureMap::new(1, 8, 8, 2.0).unwrap();
        let g = gi_star_map(&m, &cfg).unwrap();
        assert_eq!((g.channels(), g.out_height(), g.out_width()), (1, 2, 2));
        assert!(g.values().iter().all(|&v| v == 0.0));

        let m = FeatureMap::from_vec(1, 4, 4, center_cluster().values().to_vec()).unwrap();
        let g = gi_star_map(&m, &cfg).unwrap();
        assert_eq!(g.values(), &[gi_star(&center_cluster())]);

        let m = FeatureMap::new(1, 6, 4, 0.0).unwrap();
        let err = gi_star_map(&m, &cfg).unwrap_err();
        assert!(err.to_string().contains("geometry mismatch"), "{err}");
    }

    #[test]
    fn window_validation() {
        assert!(Window::new(1, vec![1.0]).is_err());
        assert!(Window::new(3, vec![1.0; 8]).is_err());
    }
}
