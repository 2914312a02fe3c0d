//! The stability network: a shallow U-Net emitting a one-channel sigmoid map
//! at input resolution.

mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{bilinear_taps, AutodiffError, Graph, NodeId, ParamSet, Real, Tensor};

pub use weights::{
    decode_weight_file, encode_weight_file, read_weight_file, write_weight_file, WeightFile,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input {h}x{w} is not divisible by {factor}; pad to {pad_h}x{pad_w}")]
    Indivisible {
        h: usize,
        w: usize,
        factor: usize,
        pad_h: usize,
        pad_w: usize,
    },
    #[error("input must be [1, {expected}, H, W], got {shape:?}")]
    InputShape { expected: usize, shape: [usize; 4] },
    #[error("layer {layer}: expected shape {expected:?}, file has {found:?}")]
    LayerMismatch {
        layer: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("layer {layer} missing from weight file")]
    MissingLayer { layer: String },
    #[error("weight file: {0}")]
    Format(String),
    #[error("sample point ({x}, {y}) outside {width}x{height} map")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub downsample_count: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            downsample_count: 2,
            base_channels: 16,
            convs_per_block: 2,
            seed: 7,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_channels == 0 {
            return Err(NetworkError::Config("input_channels must be >= 1".into()));
        }
        if self.downsample_count == 0 {
            return Err(NetworkError::Config("downsample_count must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(NetworkError::Config("base_channels must be >= 1".into()));
        }
        if self.convs_per_block == 0 {
            return Err(NetworkError::Config("convs_per_block must be >= 1".into()));
        }
        if self.downsample_count > 8 {
            return Err(NetworkError::Config("downsample_count must be <= 8".into()));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsample_count
    }

    /// Channel width at encoder level `level`; level `downsample_count` is the
    /// bottleneck.
    pub fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in registration order.
    pub fn layer_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), [cout, cin, k, k]));
            out.push((format!("{name}.bias"), [1, 1, 1, cout]));
        };
        let mut cin = self.input_channels;
        for level in 0..self.downsample_count {
            let c = self.width_at(level);
            for i in 0..self.convs_per_block {
                conv(format!("enc{level}.conv{i}"), cin, c, 3);
                cin = c;
            }
        }
        let mid = self.width_at(self.downsample_count);
        for i in 0..self.convs_per_block {
            conv(format!("mid.conv{i}"), cin, mid, 3);
            cin = mid;
        }
        for level in (0..self.downsample_count).rev() {
            let c = self.width_at(level);
            cin += c;
            for i in 0..self.convs_per_block {
                conv(format!("dec{level}.conv{i}"), cin, c, 3);
                cin = c;
            }
        }
        conv("head".into(), cin, 1, 1);
        out
    }
}

/// Per-pixel stability values in the open interval (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, NetworkError> {
        if values.len() != height * width {
            return Err(NetworkError::Format(format!(
                "activation map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// A map holding `value` everywhere.
    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_grid(
            self.height,
            self.width,
            self.values.iter().map(|v| T::from_f64(*v as f64)).collect(),
        )
        .expect("map extents")
    }

    /// Bilinear interpolation at pixel position `(x, y)`, `x` along columns.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Result<f64, NetworkError> {
        let taps: [(usize, f64); 4] =
            bilinear_taps(self.width, self.height, x, y).ok_or(NetworkError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            })?;
        Ok(taps.iter().map(|(i, w)| self.values[*i] as f64 * w).sum())
    }
}

/// The stability network with `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DsFeat {
    config: NetworkConfig,
    params: ParamSet<f32>,
}

impl DsFeat {
    /// Builds a model with Xavier-uniform kernels and zero biases drawn from
    /// the config seed.
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layer_shapes() {
            let n = shape.iter().product();
            let tensor = if name.ends_with(".weight") {
                let [cout, cin, kh, kw] = shape;
                let fan_in = (cin * kh * kw) as f64;
                let fan_out = (cout * kh * kw) as f64;
                let s = (6.0 / (fan_in + fan_out)).sqrt();
                let data = (0..n).map(|_| rng.random_range(-s..s) as f32).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            params.push(name, tensor);
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: ParamSet<f32>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// Rejects inputs the network cannot process.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<(), NetworkError> {
        let [n, c, h, w] = shape;
        if n != 1 || c != self.config.input_channels {
            return Err(NetworkError::InputShape {
                expected: self.config.input_channels,
                shape,
            });
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(NetworkError::Indivisible {
                h,
                w,
                factor: m,
                pad_h: h.div_ceil(m).max(1) * m,
                pad_w: w.div_ceil(m).max(1) * m,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the `[1, 1, H, W]`
    /// activation node. `params` must follow [`NetworkConfig::layer_shapes`];
    /// their leaves are registered here.
    pub fn record<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        image: &Tensor<T>,
    ) -> Result<NodeId, NetworkError> {
        self.check_input(image.shape())?;
        let ids = params.register(g);
        let x = g.input(image.clone());
        Ok(record_unet(&self.config, g, &ids, x)?)
    }

    /// Activation map for a `[1, C, H, W]` image with values in `[0, 1]`.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<ActivationMap, NetworkError> {
        let mut g = Graph::new();
        let out = self.record(&mut g, &self.params, image)?;
        let [_, _, h, w] = image.shape();
        ActivationMap::new(h, w, g.value(out).data().to_vec())
    }
}

fn record_unet<T: Real>(
    cfg: &NetworkConfig,
    g: &mut Graph<T>,
    ids: &[NodeId],
    input: NodeId,
) -> Result<NodeId, AutodiffError> {
    let mut next = ids.iter().copied();
    let mut conv_relu = |g: &mut Graph<T>, x: NodeId, relu: bool| -> Result<NodeId, AutodiffError> {
        let k = next.next().expect("kernel param");
        let b = next.next().expect("bias param");
        let y = g.conv2d(x, k, b)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    };
    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.downsample_count);
    for _ in 0..cfg.downsample_count {
        for _ in 0..cfg.convs_per_block {
            x = conv_relu(g, x, true)?;
        }
        skips.push(x);
        x = g.pool_down(x)?;
    }
    for _ in 0..cfg.convs_per_block {
        x = conv_relu(g, x, true)?;
    }
    for skip in skips.into_iter().rev() {
        let up = g.upsample(x)?;
        x = g.concat_channels(up, skip)?;
        for _ in 0..cfg.convs_per_block {
            x = conv_relu(g, x, true)?;
        }
    }
    let logits = conv_relu(g, x, false)?;
    g.sigmoid(logits)
}

#[cfg(test)]
mod tests;
