use rand::Rng;

use super::{fan_in_uniform, BatchNormLayer, Mode};
use crate::error::Result;
use crate::tensor::{ConvGeometry, Graph, ParamKind, ParamStore, Real, Tensor, Var};

/// 2D convolution; weight `C_out×C_in×k_h×k_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub bias: bool,
}

impl Conv2dLayer {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Self {
        Conv2dLayer { prefix: prefix.into(), in_channels, out_channels, kernel, stride, padding, bias: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel[0], self.kernel[1]]
    }

    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let fan_in = self.in_channels * self.kernel[0] * self.kernel[1];
        store.insert(self.weight_name(), fan_in_uniform(&self.weight_shape(), fan_in, rng), ParamKind::Weight);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([self.out_channels]), ParamKind::Bias);
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = if self.bias { Some(g.param(store, &self.bias_name())?) } else { None };
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// 3D convolution; weight `C_out×C_in×k_t×k_h×k_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dLayer {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl Conv3dLayer {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        Conv3dLayer {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel,
            geometry: ConvGeometry { stride, padding },
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kt, kh, kw]
    }

    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let fan_in = self.in_channels * self.kernel.iter().product::<usize>();
        store.insert(self.weight_name(), fan_in_uniform(&self.weight_shape(), fan_in, rng), ParamKind::Weight);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([self.out_channels]), ParamKind::Bias);
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = if self.bias { Some(g.param(store, &self.bias_name())?) } else { None };
        g.conv3d(x, w, b, self.geometry)
    }

    /// Number of frames lost (or gained, through padding) along time.
    pub fn temporal_output(&self, frames: usize) -> Option<usize> {
        crate::tensor::conv_output_len(frames, self.kernel[0], self.geometry.stride[0], self.geometry.padding[0])
    }
}

/// Intermediate width of a (2+1)D block chosen so its parameter count
/// matches the full `k_t×k_h×k_w` kernel it replaces.
pub fn mid_channels(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> usize {
    let [kt, kh, kw] = kernel;
    let full = kt * kh * kw * in_channels * out_channels;
    let per_mid = kh * kw * in_channels + kt * out_channels;
    (full / per_mid).max(1)
}

/// Spatial `1×k_h×k_w` convolution into `M` channels, optional
/// normalization, then temporal `k_t×1×1` convolution into `C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2Plus1dLayer {
    pub spatial: Conv3dLayer,
    pub mid_norm: Option<BatchNormLayer>,
    pub temporal: Conv3dLayer,
}

impl Conv2Plus1dLayer {
    /// Factorizes a `kernel` convolution with the given stride/padding.
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let mid = mid_channels(in_channels, out_channels, kernel);
        Self::with_mid(prefix, in_channels, mid, out_channels, kernel, stride, padding)
    }

    pub fn with_mid(
        prefix: &str,
        in_channels: usize,
        mid: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        let [kt, kh, kw] = kernel;
        Conv2Plus1dLayer {
            spatial: Conv3dLayer::new(
                format!("{prefix}.conv_spatial"),
                in_channels,
                mid,
                [1, kh, kw],
                [1, stride[1], stride[2]],
                [0, padding[1], padding[2]],
            ),
            mid_norm: Some(BatchNormLayer::new(format!("{prefix}.bn_mid"), mid)),
            temporal: Conv3dLayer::new(
                format!("{prefix}.conv_temporal"),
                mid,
                out_channels,
                [kt, 1, 1],
                [stride[0], 1, 1],
                [padding[0], 0, 0],
            ),
        }
    }

    /// Drops the middle normalization, making the block one linear operator.
    pub fn without_mid_norm(mut self) -> Self {
        self.mid_norm = None;
        self
    }

    pub fn mid(&self) -> usize {
        self.spatial.out_channels
    }

    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        self.spatial.init(store, rng);
        if let Some(bn) = &self.mid_norm {
            bn.init(store, rng);
        }
        self.temporal.init(store, rng);
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.spatial.forward(g, store, x)?;
        if let Some(bn) = &self.mid_norm {
            h = bn.forward(g, store, h, mode)?;
        }
        self.temporal.forward(g, store, h)
    }

    /// The full `C_out×C_in×k_t×k_h×k_w` kernel this block computes when the
    /// middle normalization is absent: `K[o,i,t,h,w] = Σ_m T[o,m,t]·S[m,i,h,w]`.
    pub fn composed_kernel<S: Real>(&self, store: &ParamStore<S>) -> Result<Tensor<S>> {
        let s = store.value(&self.spatial.weight_name())?;
        let t = store.value(&self.temporal.weight_name())?;
        let (ci, co, m) = (self.spatial.in_channels, self.temporal.out_channels, self.mid());
        let [_, kh, kw] = self.spatial.kernel;
        let kt = self.temporal.kernel[0];
        let mut k = vec![0.0f64; co * ci * kt * kh * kw];
        for o in 0..co {
            for i in 0..ci {
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let acc: f64 = (0..m)
                                .map(|mm| {
                                    t.data()[(o * m + mm) * kt + dt].as_f64()
                                        * s.data()[((mm * ci + i) * kh + dh) * kw + dw].as_f64()
                                })
                                .sum();
                            k[(((o * ci + i) * kt + dt) * kh + dh) * kw + dw] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_f64([co, ci, kt, kh, kw], &k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_channel_parameter_parity() {
        // 3x3x3, 64 -> 64: 110592 / (576 + 192) = 144
        assert_eq!(mid_channels(64, 64, [3, 3, 3]), 144);
        assert_eq!(mid_channels(8, 8, [3, 3, 3]), 18);
        assert_eq!(mid_channels(1, 1, [1, 1, 1]), 1);
        let (ci, co, k) = (8, 16, [3, 3, 3]);
        let m = mid_channels(ci, co, k);
        let full = 27 * ci * co;
        let factored = m * (9 * ci + 3 * co);
        assert!(factored <= full && full - factored < 9 * ci + 3 * co);
    }
}
