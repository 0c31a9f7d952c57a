use std::path::Path;

use super::arch::{Architecture, LayerSpec};
use super::layers::{
    conv_backward, conv_forward, relu_backward, relu_forward, upsample_backward, upsample_forward, ConvGeometry,
};
use crate::error::{Error, Result};
use crate::grid::{read_tensor_set, write_tensor_set, FeatureMap, Rng};
use crate::pooling::{pool, pool_backward, unpool, unpool_backward, PoolResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Learnable tensors in architecture order (weight, bias per conv).
///
/// `version` increases with every optimizer update so that caches built
/// against older parameters can be detected.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<ParamTensor>,
    version: u64,
}

impl ModelParams {
    /// He fan-in initialization: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Self {
        let tensors = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let data = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    (0..len).map(|_| rng.normal() * std).collect()
                } else {
                    vec![0.0; len]
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Self { tensors, version: 0 }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let tensors = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| ParamTensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Self { tensors, version: 0 }
    }

    pub fn from_tensors(tensors: Vec<ParamTensor>) -> Result<Self> {
        for t in &tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::LengthMismatch {
                    shape: t.shape.clone(),
                    expected: t.shape.iter().product(),
                    actual: t.data.len(),
                });
            }
        }
        Ok(Self { tensors, version: 0 })
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that tensor names and shapes match `arch`.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.param_shapes();
        let found: Vec<(String, Vec<usize>)> = self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != found {
            return Err(Error::GeometryMismatch(format!(
                "parameters {found:?} do not match architecture {expected:?}"
            )));
        }
        Ok(())
    }

    /// Writes a GIPL tensor set; conv weights are stored as
    /// `(out, in, k·k)` maps and biases as `(1, 1, out)`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let dims = match t.shape.as_slice() {
                    [o, i, kh, kw] => (*o, *i, kh * kw),
                    [n] => (1, 1, *n),
                    other => {
                        return Err(Error::InvalidArgument(format!("cannot store shape {other:?}")));
                    }
                };
                Ok((
                    t.name.clone(),
                    FeatureMap::from_vec(dims.0, dims.1, dims.2, t.data.clone())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        write_tensor_set(&entries, path)
    }

    pub fn load(arch: &Architecture, path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_tensor_set(path)?;
        let shapes = arch.param_shapes();
        if entries.len() != shapes.len() {
            return Err(Error::GeometryMismatch(format!(
                "checkpoint has {} tensors, architecture needs {}",
                entries.len(),
                shapes.len()
            )));
        }
        let tensors = entries
            .into_iter()
            .zip(shapes)
            .map(|((name, map), (want_name, shape))| {
                if name != want_name || map.len() != shape.iter().product::<usize>() {
                    return Err(Error::GeometryMismatch(format!(
                        "checkpoint tensor {name} does not fit {want_name} {shape:?}"
                    )));
                }
                Ok(ParamTensor {
                    name,
                    shape,
                    data: map.into_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tensors, version: 0 })
    }
}

/// Gradients aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    /// Layer input, kept for conv and relu backward.
    Input(FeatureMap),
    Pool(PoolResult, FeatureMap),
    None,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn params_version(&self) -> u64 {
        self.version
    }

    /// Pool results in forward order, with their layer indices.
    pub fn pool_results(&self) -> impl Iterator<Item = (usize, &PoolResult)> {
        self.layers.iter().enumerate().filter_map(|(i, c)| match c {
            LayerCache::Pool(r, _) => Some((i, r)),
            _ => None,
        })
    }

    pub fn pool_result(&self, layer: usize) -> Option<&PoolResult> {
        match self.layers.get(layer) {
            Some(LayerCache::Pool(r, _)) => Some(r),
            _ => None,
        }
    }

    /// Feature map that entered the pool at `layer`.
    pub fn pool_input(&self, layer: usize) -> Option<&FeatureMap> {
        match self.layers.get(layer) {
            Some(LayerCache::Pool(_, input)) => Some(input),
            _ => None,
        }
    }

    /// Input activation of a conv or relu layer.
    pub fn layer_input(&self, layer: usize) -> Option<&FeatureMap> {
        match self.layers.get(layer) {
            Some(LayerCache::Input(m)) => Some(m),
            _ => None,
        }
    }
}

fn conv_geometry(layer: &LayerSpec, (_, h, w): (usize, usize, usize)) -> ConvGeometry {
    let LayerSpec::Conv {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
    } = *layer
    else {
        unreachable!("conv geometry of a non-conv layer")
    };
    ConvGeometry {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding,
        in_h: h,
        in_w: w,
    }
}

/// Runs one image through the network; returns `(num_classes, H, W)` logits.
pub fn forward(params: &ModelParams, arch: &Architecture, image: &FeatureMap) -> Result<(FeatureMap, ForwardCache)> {
    if image.shape() != arch.input_shape() {
        return Err(Error::GeometryMismatch(format!(
            "image {:?} does not match architecture input {:?}",
            image.shape(),
            arch.input_shape()
        )));
    }
    params.check(arch)?;
    let mut x = image.clone();
    let mut caches = Vec::with_capacity(arch.layers().len());
    let mut slots: Vec<Option<FeatureMap>> = Vec::new();
    let mut conv_idx = 0;
    for (i, layer) in arch.layers().iter().enumerate() {
        let out_shape = arch.shape_at(i + 1);
        let (next, cache) = match layer {
            LayerSpec::Conv { .. } => {
                let g = conv_geometry(layer, x.shape());
                let w = &params.tensors[2 * conv_idx].data;
                let b = &params.tensors[2 * conv_idx + 1].data;
                conv_idx += 1;
                let out = conv_forward(&g, x.data(), w, b);
                (from_vec(out_shape, out)?, LayerCache::Input(x))
            }
            LayerSpec::Relu => {
                let out = relu_forward(x.data());
                (from_vec(out_shape, out)?, LayerCache::Input(x))
            }
            LayerSpec::Normalize { mean, scale } => (x.map(|v| (v - mean) * scale)?, LayerCache::None),
            LayerSpec::Pool { config } => {
                let r = pool(&x, config)?;
                (r.output().clone(), LayerCache::Pool(r, x))
            }
            LayerSpec::Unpool { pool: p } => {
                let LayerCache::Pool(r, _) = &caches[*p] else {
                    unreachable!("validated architecture")
                };
                (unpool(r, &x, out_shape.1, out_shape.2)?, LayerCache::None)
            }
            LayerSpec::UpsampleNearest { factor } => {
                let out = upsample_forward(x.data(), x.shape(), *factor);
                (from_vec(out_shape, out)?, LayerCache::None)
            }
            LayerSpec::SkipSave { slot } => {
                if slots.len() <= *slot {
                    slots.resize(*slot + 1, None);
                }
                slots[*slot] = Some(x.clone());
                (x, LayerCache::None)
            }
            LayerSpec::SkipAdd { slot } => {
                let saved = slots[*slot].as_ref().expect("validated architecture");
                let out = x.data().iter().zip(saved.data()).map(|(a, b)| a + b).collect();
                (from_vec(out_shape, out)?, LayerCache::None)
            }
            LayerSpec::SoftmaxCeHead { .. } => (x, LayerCache::None),
        };
        caches.push(cache);
        x = next;
    }
    Ok((
        x,
        ForwardCache {
            version: params.version,
            layers: caches,
        },
    ))
}

fn from_vec((c, h, w): (usize, usize, usize), data: Vec<f64>) -> Result<FeatureMap> {
    FeatureMap::from_vec(c, h, w, data)
}

/// Reverse-mode gradients of a scalar loss given `d loss / d logits`.
///
/// Pool branch decisions and argmax positions are held fixed, so the result
/// is exact wherever they are locally constant.
pub fn backward(
    params: &ModelParams,
    arch: &Architecture,
    cache: &ForwardCache,
    grad_logits: &FeatureMap,
) -> Result<Gradients> {
    if cache.version != params.version {
        return Err(Error::StaleCache {
            cache: cache.version,
            params: params.version,
        });
    }
    if cache.layers.len() != arch.layers().len() {
        return Err(Error::GeometryMismatch(
            "cache was built for a different architecture".into(),
        ));
    }
    let out_shape = arch.shape_at(arch.layers().len());
    if grad_logits.shape() != out_shape {
        return Err(Error::GeometryMismatch(format!(
            "logit gradient {:?} does not match output {out_shape:?}",
            grad_logits.shape()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut grad: Vec<f64> = grad_logits.data().to_vec();
    let mut skip_grads: Vec<Option<Vec<f64>>> = Vec::new();
    let first_conv = arch.layers().iter().position(|l| matches!(l, LayerSpec::Conv { .. }));
    let mut conv_idx = arch
        .layers()
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv { .. }))
        .count();
    for (i, layer) in arch.layers().iter().enumerate().rev() {
        let in_shape = arch.shape_at(i);
        grad = match (layer, &cache.layers[i]) {
            (LayerSpec::Conv { .. }, LayerCache::Input(input)) => {
                conv_idx -= 1;
                let g = conv_geometry(layer, in_shape);
                let need_input = first_conv != Some(i);
                let (gi, gw, gb) =
                    conv_backward(&g, input.data(), &params.tensors[2 * conv_idx].data, &grad, need_input);
                grads.tensors[2 * conv_idx] = gw;
                grads.tensors[2 * conv_idx + 1] = gb;
                match gi {
                    Some(gi) => gi,
                    // Nothing upstream of the first conv needs a gradient.
                    None => break,
                }
            }
            (LayerSpec::Relu, LayerCache::Input(input)) => relu_backward(input.data(), &grad),
            (LayerSpec::Normalize { scale, .. }, _) => grad.iter().map(|g| g * scale).collect(),
            (LayerSpec::Pool { .. }, LayerCache::Pool(r, _)) => {
                let (c, h, w) = r.output().shape();
                pool_backward(r, &FeatureMap::from_vec(c, h, w, grad)?)?.into_vec()
            }
            (LayerSpec::Unpool { pool: p }, _) => {
                let LayerCache::Pool(r, _) = &cache.layers[*p] else {
                    return Err(Error::GeometryMismatch(format!("layer {p} has no pool cache")));
                };
                unpool_backward(r, &grad)
            }
            (LayerSpec::UpsampleNearest { factor }, _) => upsample_backward(&grad, in_shape, *factor),
            (LayerSpec::SkipAdd { slot }, _) => {
                if skip_grads.len() <= *slot {
                    skip_grads.resize(*slot + 1, None);
                }
                match &mut skip_grads[*slot] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    empty => *empty = Some(grad.clone()),
                }
                grad
            }
            (LayerSpec::SkipSave { slot }, _) => {
                if let Some(extra) = skip_grads.get_mut(*slot).and_then(Option::take) {
                    for (g, e) in grad.iter_mut().zip(extra) {
                        *g += e;
                    }
                }
                grad
            }
            (LayerSpec::SoftmaxCeHead { .. }, _) => grad,
            _ => {
                return Err(Error::GeometryMismatch(format!(
                    "cache entry {i} does not match layer kind"
                )))
            }
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::arch::ReferenceArchitecture;
    use crate::micronet::Arm;

    #[test]
    fn zero_weights_give_bias_logits() {
        let arch = ReferenceArchitecture::build(Arm::Max, (3, 16, 16), 3).unwrap();
        let mut params = ModelParams::zeros(&arch);
        let last = params.tensors.len() - 1;
        params.tensors[last].data = vec![0.5, -1.0, 2.0];
        let mut rng = Rng::new(1);
        let img = FeatureMap::from_fn(3, 16, 16, |_, _, _| rng.uniform()).unwrap();
        let (logits, _) = forward(&params, &arch, &img).unwrap();
        for (c, want) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            assert!(logits.channel(c).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn identity_conv() {
        let arch = Architecture::new(
            (2, 5, 5),
            vec![LayerSpec::conv(2, 2, 1), LayerSpec::SoftmaxCeHead { num_classes: 2 }],
        )
        .unwrap();
        let params = ModelParams::from_tensors(vec![
            ParamTensor {
                name: "conv0.weight".into(),
                shape: vec![2, 2, 1, 1],
                data: vec![1.0, 0.0, 0.0, 1.0],
            },
            ParamTensor {
                name: "conv0.bias".into(),
                shape: vec![2],
                data: vec![0.0, 0.0],
            },
        ])
        .unwrap();
        let mut rng = Rng::new(2);
        let img = FeatureMap::from_fn(2, 5, 5, |_, _, _| rng.normal()).unwrap();
        let (out, _) = forward(&params, &arch, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn stale_cache_rejected() {
        let arch = ReferenceArchitecture::build(Arm::Max, (3, 16, 16), 2).unwrap();
        let mut params = ModelParams::init(&arch, &mut Rng::new(3));
        let img = FeatureMap::new(3, 16, 16, 0.5).unwrap();
        let (logits, cache) = forward(&params, &arch, &img).unwrap();
        params.bump_version();
        let grad = FeatureMap::new(2, 16, 16, 0.0).unwrap();
        assert!(matches!(
            backward(&params, &arch, &cache, &grad),
            Err(Error::StaleCache { cache: 0, params: 1 })
        ));
        assert_eq!(logits.shape(), (2, 16, 16));
    }

    #[test]
    fn input_geometry_checked() {
        let arch = ReferenceArchitecture::build(Arm::Max, (3, 16, 16), 2).unwrap();
        let params = ModelParams::zeros(&arch);
        let img = FeatureMap::new(3, 8, 8, 0.5).unwrap();
        assert!(matches!(forward(&params, &arch, &img), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ReferenceArchitecture::build(Arm::gpool(1.5), (3, 16, 16), 4).unwrap();
        let params = ModelParams::init(&arch, &mut Rng::new(4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gipls");
        params.save(&path).unwrap();
        let back = ModelParams::load(&arch, &path).unwrap();
        assert_eq!(back, params);
        let other = ReferenceArchitecture::build(Arm::gpool(1.5), (3, 16, 16), 3).unwrap();
        assert!(ModelParams::load(&other, &path).is_err());
    }
}
