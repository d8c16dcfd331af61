use super::kernels::{self, ConvDims};
use super::ops::Op;
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Exponential moving averages of per-channel batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Fresh statistics that refuse eval-mode use until a train step ran.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    /// Zero mean, unit variance, usable in eval mode immediately.
    pub fn identity(channels: usize) -> Self {
        Self { initialized: true, ..Self::new(channels) }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>, initialized: bool) -> Self {
        Self { mean, var, initialized }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn update(&mut self, mean: &[T], biased_var: &[T], n: usize) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let correction = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * mean[c];
            self.var[c] = keep * self.var[c] + m * biased_var[c] * correction;
        }
        self.initialized = true;
    }
}

/// Batchnorm behaviour: batch statistics (and a running-stat update) or
/// frozen running statistics.
pub enum BnMode<'a, T> {
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

/// Views a 3-D `[C, H, W]` or 4-D `[B, C, H, W]` shape as 4-D.
fn as_batched(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w] => Ok([1, c, h, w]),
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 cross-correlation with square `[Cout, Cin, K, K]` weights and
    /// `pad` zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let [batch, c_in, height, width] = as_batched("conv2d", &xs)?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("weight {ws:?} incompatible with input {xs:?}")));
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::shape("conv2d", format!("kernel {kernel} larger than padded input {xs:?}")));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} filters", self.shape(b))));
            }
        }
        let dims = ConvDims { batch, c_in, height, width, c_out, kernel, pad };
        let data = kernels::conv2d_forward(self.data(x), self.data(w), bias.map(|b| self.data(b)), &dims);
        let shape = if xs.len() == 3 {
            vec![c_out, dims.out_height(), dims.out_width()]
        } else {
            vec![batch, c_out, dims.out_height(), dims.out_width()]
        };
        self.push(
            "conv2d",
            Tensor::from_parts(shape, data),
            Op::Conv2d { x: x.id, w: w.id, b: bias.map(|b| b.id), dims },
        )
    }

    /// 2×2 max pooling with stride 2 over the last two dims. Odd extents
    /// drop their last row/column; extents below 2 are rejected.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(Error::shape("maxpool2", format!("spatial extent too small in {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).numel() / (h * w);
        let (data, argmax) = kernels::maxpool2_forward(self.data(x), planes, h, w);
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = h / 2;
        shape[nd - 1] = w / 2;
        self.push("maxpool2", Tensor::from_parts(shape, data), Op::MaxPool2 { x: x.id, argmax })
    }

    /// Per-channel normalization of a `[B, C, H, W]` batch.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batchnorm", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma {:?} / beta {:?} for {channels} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let stats_channels = match &mode {
            BnMode::Train(st) => st.channels(),
            BnMode::Eval(st) => st.channels(),
        };
        if stats_channels != channels {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats for {stats_channels} channels, input has {channels}"),
            ));
        }
        let eps = T::lit(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train(stats) => {
                let (mean, var) = kernels::channel_stats(self.data(x), batch, channels, plane);
                stats.update(&mean, &var, batch * plane);
                (mean, var, true)
            }
            BnMode::Eval(stats) => {
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStats);
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        self.push(
            "batchnorm",
            Tensor::from_parts(s, out),
            Op::BatchNorm { x: x.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats },
        )
    }

    /// Multiplies channel `c` of a `[B, C, H, W]` batch by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(s) != [xs[1]] {
            return Err(Error::shape("scale_channels", format!("input {xs:?}, scale {:?}", self.shape(s))));
        }
        let plane = xs[2] * xs[3];
        let sv = self.data(s);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * sv[(i / plane) % xs[1]]).collect();
        self.push("scale_channels", Tensor::from_parts(xs, data), Op::ScaleChannels { x: x.id, s: s.id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conv_zero_weight_single_pixel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new(vec![2, 4, 4], img.clone()).unwrap());
        let mut wd = vec![0.0; 2 * 2 * 9];
        wd[4] = 1.0; // out 0 <- in 0 centre
        wd[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = tape.constant(Tensor::new(vec![2, 2, 3, 3], wd).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(tape.data(y), img.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, 1).unwrap_err().to_string();
        assert!(err.contains("[2, 2, 3, 3]") && err.contains("[3, 4, 4]"), "{err}");
    }

    #[test]
    fn maxpool_single_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 4, 4], 2.0));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.data(y), &[2.0; 4]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        let expected = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g, &expected);
    }

    #[test]
    fn maxpool_floors_odd_extent_and_rejects_tiny() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 7, 7]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3]);
        let t = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(tape.maxpool2(t).is_err());
    }

    fn bn_input(tape: &mut Tape<f64>) -> Var {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7 % 11) as f64) * 0.3 - 1.0).collect();
        tape.constant(Tensor::new(vec![2, 3, 2, 2], data).unwrap())
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = bn_input(&mut tape);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        let y = tape.batchnorm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        let (mean, var) = kernels::channel_stats(tape.data(y), 2, 3, 4);
        for c in 0..3 {
            assert_abs_diff_eq!(mean[c], 0.0, epsilon = 1e-5);
            // eps in the denominator keeps variance a hair below 1
            assert_abs_diff_eq!(var[c], 1.0, epsilon = 1e-4);
        }
        assert!(stats.is_initialized());
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = bn_input(&mut tape);
        let g = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let mut stats = RunningStats::new(3);
        let y = tape.batchnorm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        for (i, &v) in tape.data(y).iter().enumerate() {
            assert_eq!(v, [0.5, -1.0, 2.0][(i / 4) % 3]);
        }
    }

    #[test]
    fn batchnorm_eval_requires_initialized_stats() {
        let mut tape = Tape::<f64>::new();
        let x = bn_input(&mut tape);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        assert!(matches!(tape.batchnorm(x, g, b, BnMode::Eval(&stats)), Err(Error::UninitializedStats)));
        tape.batchnorm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        assert!(tape.batchnorm(x, g, b, BnMode::Eval(&stats)).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        tape.batchnorm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        // batch mean 2, unbiased var 2
        assert_abs_diff_eq!(stats.mean[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.var[0], 0.9 + 0.2, epsilon = 1e-12);
    }
}
