//! Four-block convolutional backbone and its query variant whose last
//! convolution is factorized around an externally supplied channel vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{BnMode, RunningStats, Scalar, Tape, Tensor, Var};

pub const BLOCKS: usize = 4;
/// Index of the factorized block's running stats in a model's stats list.
pub const FACTORIZED_STATS: usize = BLOCKS;

/// Spatial extent left after the backbone's four floor-halving pools.
pub fn final_extent(extent: usize) -> usize {
    (0..BLOCKS).fold(extent, |s, _| s / 2)
}

/// Conv 3×3 → batchnorm → ReLU → maxpool 2×2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Scalar> ConvBlockParams<T> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, filters: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[filters, c_in, 3, 3], bound, rng),
            bias: Tensor::zeros(&[filters]),
            gamma: Tensor::full(&[filters], T::one()),
            beta: Tensor::zeros(&[filters]),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> ConvBlockVars {
        let v = ConvBlockVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
            gamma: tape.param(self.gamma.clone()),
            beta: tape.param(self.beta.clone()),
        };
        flat.extend([v.weight, v.bias, v.gamma, v.beta]);
        v
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (n, t) in [("weight", &self.weight), ("bias", &self.bias), ("gamma", &self.gamma), ("beta", &self.beta)] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend([&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]);
    }
}

/// Shared embedding network: four conv blocks of `filters` channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub blocks: Vec<ConvBlockParams<T>>,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub blocks: Vec<ConvBlockVars>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, filters: usize, rng: &mut R) -> Self {
        let blocks = (0..BLOCKS)
            .map(|i| ConvBlockParams::init(if i == 0 { in_channels } else { filters }, filters, rng))
            .collect();
        Self { blocks }
    }

    pub fn filters(&self) -> usize {
        self.blocks[0].weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> BackboneVars {
        BackboneVars { blocks: self.blocks.iter().map(|b| b.bind(tape, flat)).collect() }
    }

    pub fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("backbone.block{}", i + 1), out);
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        for b in &mut self.blocks {
            b.tensors_mut(out);
        }
    }
}

/// Replacement for the query network's last convolution:
/// `M_out ∘ diag(W) ∘ M_in` plus bias, with `M_in: F → D_w` and
/// `M_out: D_w → F` learned 1×1 convolutions and `W` predicted per episode.
/// The block keeps its own batchnorm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedConvSpec<T> {
    pub m_in: Tensor<T>,
    pub m_out: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct FactorizedVars {
    pub m_in: Var,
    pub m_out: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Scalar> FactorizedConvSpec<T> {
    pub fn init<R: Rng + ?Sized>(filters: usize, predicted: usize, rng: &mut R) -> Self {
        Self {
            m_in: Tensor::uniform(&[predicted, filters, 1, 1], 1.0 / (filters as f64).sqrt(), rng),
            m_out: Tensor::uniform(&[filters, predicted, 1, 1], 1.0 / (predicted as f64).sqrt(), rng),
            bias: Tensor::zeros(&[filters]),
            gamma: Tensor::full(&[filters], T::one()),
            beta: Tensor::zeros(&[filters]),
        }
    }

    /// Length `D_w` of the predicted vector.
    pub fn predicted_len(&self) -> usize {
        self.m_in.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> FactorizedVars {
        let v = FactorizedVars {
            m_in: tape.param(self.m_in.clone()),
            m_out: tape.param(self.m_out.clone()),
            bias: tape.param(self.bias.clone()),
            gamma: tape.param(self.gamma.clone()),
            beta: tape.param(self.beta.clone()),
        };
        flat.extend([v.m_in, v.m_out, v.bias, v.gamma, v.beta]);
        v
    }

    pub fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (n, t) in [
            ("m_in", &self.m_in),
            ("m_out", &self.m_out),
            ("bias", &self.bias),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            out.push((format!("factorized.{n}"), t));
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend([&mut self.m_in, &mut self.m_out, &mut self.bias, &mut self.gamma, &mut self.beta]);
    }
}

/// Batchnorm running statistics of a whole model, indexed by layer: the
/// backbone blocks first, then the factorized block.
pub enum StatsAccess<'a, T> {
    Train(&'a mut [RunningStats<T>]),
    Eval(&'a [RunningStats<T>]),
}

impl<T: Scalar> StatsAccess<'_, T> {
    pub fn mode(&mut self, layer: usize) -> BnMode<'_, T> {
        match self {
            StatsAccess::Train(s) => BnMode::Train(&mut s[layer]),
            StatsAccess::Eval(s) => BnMode::Eval(&s[layer]),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, StatsAccess::Train(_))
    }

    fn layers(&self) -> usize {
        match self {
            StatsAccess::Train(s) => s.len(),
            StatsAccess::Eval(s) => s.len(),
        }
    }
}

fn finish_block<T: Scalar>(tape: &mut Tape<T>, conv: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
    let y = tape.batchnorm(conv, gamma, beta, mode)?;
    let y = tape.relu(y)?;
    tape.maxpool2(y)
}

pub fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, block: &ConvBlockVars, mode: BnMode<'_, T>) -> Result<Var> {
    let y = tape.conv2d(x, block.weight, Some(block.bias), 1)?;
    finish_block(tape, y, block.gamma, block.beta, mode)
}

fn check_images<T: Scalar>(tape: &Tape<T>, images: Var, bb: &BackboneVars, stats: &StatsAccess<'_, T>) -> Result<()> {
    let s = tape.shape(images);
    let c_in = tape.shape(bb.blocks[0].weight)[1];
    if s.len() != 4 || s[1] != c_in || final_extent(s[2]) == 0 || final_extent(s[3]) == 0 {
        return Err(Error::shape("embed", format!("expected [B, {c_in}, H, W] with H, W >= 16, got {s:?}")));
    }
    if stats.layers() != BLOCKS + 1 {
        return Err(Error::shape(
            "embed",
            format!("expected {} running-stat layers, got {}", BLOCKS + 1, stats.layers()),
        ));
    }
    Ok(())
}

fn flatten_batch<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let batch = s[0];
    let width = s[1..].iter().product();
    tape.reshape(x, &[batch, width])
}

/// Raw support features `z`: `[B, C, H, W]` images to `[B, D_z]`.
pub fn embed_raw<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    bb: &BackboneVars,
    stats: &mut StatsAccess<'_, T>,
) -> Result<Var> {
    check_images(tape, images, bb, stats)?;
    let mut x = images;
    for (i, block) in bb.blocks.iter().enumerate() {
        x = conv_block(tape, x, block, stats.mode(i))?;
    }
    flatten_batch(tape, x)
}

/// `M_out(diag(w) · M_in(x)) + bias` on a `[B, F, H, W]` batch.
pub fn factorized_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, fz: &FactorizedVars, w: Var) -> Result<Var> {
    let d_w = tape.shape(fz.m_in)[0];
    if tape.shape(w) != [d_w] {
        return Err(Error::shape("factorized_conv", format!("predicted vector {:?}, expected [{d_w}]", tape.shape(w))));
    }
    let inner = tape.conv2d(x, fz.m_in, None, 0)?;
    let scaled = tape.scale_channels(inner, w)?;
    tape.conv2d(scaled, fz.m_out, Some(fz.bias), 0)
}

/// Query features: the backbone with its last convolution replaced by the
/// factorized layer driven by `w`.
pub fn embed_query<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    bb: &BackboneVars,
    fz: &FactorizedVars,
    w: Var,
    stats: &mut StatsAccess<'_, T>,
) -> Result<Var> {
    check_images(tape, images, bb, stats)?;
    let mut x = images;
    for (i, block) in bb.blocks[..BLOCKS - 1].iter().enumerate() {
        x = conv_block(tape, x, block, stats.mode(i))?;
    }
    let y = factorized_conv(tape, x, fz, w)?;
    let y = finish_block(tape, y, fz.gamma, fz.beta, stats.mode(FACTORIZED_STATS))?;
    flatten_batch(tape, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(filters: usize) -> Vec<RunningStats<f64>> {
        (0..=BLOCKS).map(|_| RunningStats::identity(filters)).collect()
    }

    #[test]
    fn omniglot_and_miniimagenet_feature_dims() {
        assert_eq!(64 * final_extent(28).pow(2), 64);
        assert_eq!(64 * final_extent(84).pow(2), 1600);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = BackboneParams::<f64>::init(1, 64, &mut rng);
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape, &mut Vec::new());
        let img = tape.constant(Tensor::uniform(&[1, 1, 28, 28], 1.0, &mut rng));
        let mut st = stats(64);
        let z = embed_raw(&mut tape, img, &vars, &mut StatsAccess::Eval(&st)).unwrap();
        assert_eq!(tape.shape(z), &[1, 64]);
        let z = embed_raw(&mut tape, img, &vars, &mut StatsAccess::Train(&mut st)).unwrap();
        assert_eq!(tape.shape(z), &[1, 64]);
    }

    #[test]
    fn zero_weights_zero_beta_give_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bb = BackboneParams::<f64>::init(1, 4, &mut rng);
        for b in &mut bb.blocks {
            b.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape, &mut Vec::new());
        let img = tape.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let mut st = stats(4);
        let z = embed_raw(&mut tape, img, &vars, &mut StatsAccess::Train(&mut st)).unwrap();
        assert!(tape.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_in_a_batch_embed_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = BackboneParams::<f64>::init(1, 4, &mut rng);
        let one: Tensor<f64> = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let other: Tensor<f64> = Tensor::uniform(&[1, 16, 16], 1.0, &mut rng);
        let mut data = one.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(one.data());
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape, &mut Vec::new());
        let img = tape.constant(Tensor::new(vec![3, 1, 16, 16], data).unwrap());
        let mut st = stats(4);
        let z = embed_raw(&mut tape, img, &vars, &mut StatsAccess::Train(&mut st)).unwrap();
        let z = tape.data(z);
        assert_eq!(&z[0..4], &z[8..12]);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = BackboneParams::<f64>::init(1, 4, &mut rng);
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape, &mut Vec::new());
        let st = stats(4);
        let small = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(embed_raw(&mut tape, small, &vars, &mut StatsAccess::Eval(&st)).is_err());
        let rgb = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(embed_raw(&mut tape, rgb, &vars, &mut StatsAccess::Eval(&st)).is_err());
    }

    #[test]
    fn zero_predicted_vector_leaves_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fz = FactorizedConvSpec::<f64>::init(4, 3, &mut rng);
        fz.bias = Tensor::vector(vec![0.5, -1.0, 0.25, 2.0]);
        let mut tape = Tape::new();
        let v = fz.bind(&mut tape, &mut Vec::new());
        let x = tape.constant(Tensor::uniform(&[2, 4, 3, 3], 1.0, &mut rng));
        let w = tape.constant(Tensor::zeros(&[3]));
        let y = factorized_conv(&mut tape, x, &v, w).unwrap();
        for (i, &val) in tape.data(y).iter().enumerate() {
            assert_eq!(val, [0.5, -1.0, 0.25, 2.0][(i / 9) % 4]);
        }
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(factorized_conv(&mut tape, x, &v, bad).is_err());
    }

    #[test]
    fn unit_vector_matches_composed_one_by_one_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fz = FactorizedConvSpec::<f64>::init(4, 3, &mut rng);
        let (f, dw) = (4, 3);
        // reference weight: (M_out · M_in)[o][i] = Σ_k M_out[o][k] M_in[k][i]
        let mut composed = vec![0.0; f * f];
        for o in 0..f {
            for i in 0..f {
                composed[o * f + i] = (0..dw).map(|k| fz.m_out.data()[o * dw + k] * fz.m_in.data()[k * f + i]).sum();
            }
        }
        let x: Tensor<f64> = Tensor::uniform(&[2, 4, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = fz.bind(&mut tape, &mut Vec::new());
        let xv = tape.constant(x.clone());
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let y = factorized_conv(&mut tape, xv, &v, ones).unwrap();
        let y = tape.data(y);
        for b in 0..2 {
            for o in 0..f {
                for p in 0..9 {
                    let expect: f64 = (0..f).map(|i| composed[o * f + i] * x.data()[(b * f + i) * 9 + p]).sum::<f64>()
                        + fz.bias.data()[o];
                    assert!((y[(b * f + o) * 9 + p] - expect).abs() < 1e-6);
                }
            }
        }
    }
}
