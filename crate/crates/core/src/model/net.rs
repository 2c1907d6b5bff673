//! Encoder/decoder pair for CSI images.
//!
//! Encoder: 3×3 conv (2→2) → BN → LeakyReLU → Non-Local block(s) → flatten → dense `L → K`.
//! Decoder: dense `K → L` → reshape to `2 × H × W` → Non-Local block(s) → Refine-net blocks
//! → 3×3 conv (2→2) → sigmoid.
//!
//! The CsiNet baseline is the same graph with no Non-Local blocks and
//! all-3×3 Refine-net kernels; both come out of [`ModelConfig`].

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{NonLocalBlock, RefineBlock};
use super::config::ModelConfig;
use super::layers::{join, BatchNorm2d, Conv2d, Dense, LeakyRelu, Param, Parametric, Scalar, Sigmoid};
use crate::error::{Error, Result};

const PLANES: usize = 2;

#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    pub act: LeakyRelu<F>,
    pub nonlocal: Vec<NonLocalBlock<F>>,
    pub dense: Dense<F>,
}

#[derive(Debug, Clone)]
pub struct Decoder<F: Scalar> {
    pub dense: Dense<F>,
    pub nonlocal: Vec<NonLocalBlock<F>>,
    pub refine: Vec<RefineBlock<F>>,
    pub conv: Conv2d<F>,
    pub sigmoid: Sigmoid<F>,
}

#[derive(Debug, Clone)]
pub struct Autoencoder<F: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
}

fn flatten<F: Scalar>(x: Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    x.into_shape_with_order((n, c * h * w)).expect("standard layout flatten")
}

fn unflatten<F: Scalar>(x: Array2<F>, h: usize, w: usize) -> Array4<F> {
    let n = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, PLANES, h, w))
        .expect("standard layout reshape")
}

impl<F: Scalar> Encoder<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Encoder {
            conv: Conv2d::same(PLANES, PLANES, 3, rng),
            bn: BatchNorm2d::new(PLANES),
            act: LeakyRelu::new(cfg.leaky_slope),
            nonlocal: (0..cfg.encoder_nonlocal_blocks)
                .map(|_| NonLocalBlock::new(PLANES, cfg.nl_downsampled_channels, cfg.nl_embed_channels, rng))
                .collect(),
            dense: Dense::new(cfg.flattened_length(), cfg.codeword_length(), rng),
        }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array2<F> {
        let mut h = self.act.infer(&self.bn.infer(&self.conv.infer(x)));
        for block in &self.nonlocal {
            h = block.infer(&h);
        }
        self.dense.infer(&flatten(h))
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array2<F> {
        let h = self.conv.forward(x);
        let mut h = self.act.forward(&self.bn.forward(&h));
        for block in &mut self.nonlocal {
            h = block.forward(&h);
        }
        self.dense.forward(&flatten(h))
    }

    pub fn backward(&mut self, d_code: &Array2<F>, h: usize, w: usize) -> Array4<F> {
        let mut d = unflatten(self.dense.backward(d_code), h, w);
        for block in self.nonlocal.iter_mut().rev() {
            d = block.backward(&d);
        }
        self.conv.backward(&self.bn.backward(&self.act.backward(&d)))
    }
}

impl<F: Scalar> Parametric<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        for (i, block) in self.nonlocal.iter().enumerate() {
            block.visit(&join(prefix, &format!("nonlocal{i}")), f);
        }
        self.dense.visit(&join(prefix, "dense"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        for (i, block) in self.nonlocal.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("nonlocal{i}")), f);
        }
        self.dense.visit_mut(&join(prefix, "dense"), f);
    }
}

impl<F: Scalar> Decoder<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            dense: Dense::new(cfg.codeword_length(), cfg.flattened_length(), rng),
            nonlocal: (0..cfg.decoder_nonlocal_blocks)
                .map(|_| NonLocalBlock::new(PLANES, cfg.nl_downsampled_channels, cfg.nl_embed_channels, rng))
                .collect(),
            refine: (0..cfg.refine_blocks)
                .map(|_| RefineBlock::new(PLANES, cfg.refine_channels, cfg.refine_kernels, cfg.leaky_slope, rng))
                .collect(),
            conv: Conv2d::same(PLANES, PLANES, 3, rng),
            sigmoid: Sigmoid::new(),
        }
    }

    pub fn infer(&self, code: &Array2<F>, h: usize, w: usize) -> Array4<F> {
        let mut x = unflatten(self.dense.infer(code), h, w);
        for block in &self.nonlocal {
            x = block.infer(&x);
        }
        for block in &self.refine {
            x = block.infer(&x);
        }
        self.sigmoid.infer(&self.conv.infer(&x))
    }

    pub fn forward(&mut self, code: &Array2<F>, h: usize, w: usize) -> Array4<F> {
        let mut x = unflatten(self.dense.forward(code), h, w);
        for block in &mut self.nonlocal {
            x = block.forward(&x);
        }
        for block in &mut self.refine {
            x = block.forward(&x);
        }
        let x = self.conv.forward(&x);
        self.sigmoid.forward(&x)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array2<F> {
        let mut d = self.conv.backward(&self.sigmoid.backward(dy));
        for block in self.refine.iter_mut().rev() {
            d = block.backward(&d);
        }
        for block in self.nonlocal.iter_mut().rev() {
            d = block.backward(&d);
        }
        self.dense.backward(&flatten(d))
    }
}

impl<F: Scalar> Parametric<F> for Decoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.dense.visit(&join(prefix, "dense"), f);
        for (i, block) in self.nonlocal.iter().enumerate() {
            block.visit(&join(prefix, &format!("nonlocal{i}")), f);
        }
        for (i, block) in self.refine.iter().enumerate() {
            block.visit(&join(prefix, &format!("refine{i}")), f);
        }
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        for (i, block) in self.nonlocal.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("nonlocal{i}")), f);
        }
        for (i, block) in self.refine.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("refine{i}")), f);
        }
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

impl<F: Scalar> Autoencoder<F> {
    /// Builds a freshly initialized model; the same `(config, seed)` always gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        Ok(Autoencoder { config, encoder, decoder })
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (PLANES, self.config.height, self.config.width)
    }

    pub fn check_images(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.image_dims() {
            return Err(Error::shape(format!("[n, {:?}]", self.image_dims()), format!("{:?}", x.dim())));
        }
        Ok(())
    }

    pub fn check_codewords(&self, code: &Array2<F>) -> Result<()> {
        let k = self.config.codeword_length();
        if code.ncols() != k {
            return Err(Error::shape(format!("[n, {k}]"), format!("{:?}", code.dim())));
        }
        Ok(())
    }

    /// Compresses a batch of normalized images into codewords.
    pub fn encode(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_images(x)?;
        Ok(self.encoder.infer(x))
    }

    /// Reconstructs images from codewords; every output lies in `(0, 1)`.
    pub fn decode(&self, code: &Array2<F>) -> Result<Array4<F>> {
        self.check_codewords(code)?;
        Ok(self.decoder.infer(code, self.config.height, self.config.width))
    }

    pub fn reconstruct(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.decode(&self.encode(x)?)
    }

    /// Training-mode pass (batch statistics, caches kept for [`Autoencoder::backward`]).
    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_images(x)?;
        let code = self.encoder.forward(x);
        Ok(self.decoder.forward(&code, self.config.height, self.config.width))
    }

    /// Backpropagates the gradient of the loss with respect to the reconstruction.
    pub fn backward(&mut self, d_out: &Array4<F>) -> Array4<F> {
        let d_code = self.decoder.backward(d_out);
        self.encoder.backward(&d_code, self.config.height, self.config.width)
    }

    /// Converts parameters to another precision (used for f64 gradient checks).
    pub fn cast<G: Scalar>(&self) -> Autoencoder<G> {
        let mut out = Autoencoder::<G>::new(self.config.clone(), 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.mapv(|v| G::of(v.as_f64()))));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| p.value = it.next().expect("matching layout"));
        out
    }
}

impl<F: Scalar> Parametric<F> for Autoencoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Architecture;
    use rand::Rng;

    fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 2, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn codeword_lengths() {
        for (cr, k) in [(16, 128), (32, 64), (64, 32)] {
            let model = Autoencoder::<f32>::new(ModelConfig::extend_nlnet(cr), 1).unwrap();
            let code = model.encode(&random_images(2, 32, 32, 1)).unwrap();
            assert_eq!(code.dim(), (2, k));
        }
    }

    #[test]
    fn shape_closure_and_sigmoid_range() {
        for arch in [Architecture::ExtendNlNet, Architecture::CsiNet] {
            let model = Autoencoder::<f32>::new(ModelConfig::new(arch, 32), 2).unwrap();
            let x = random_images(3, 32, 32, 2);
            let y = model.reconstruct(&x).unwrap();
            assert_eq!(y.dim(), x.dim());
            assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_codeword() {
        let mut model = Autoencoder::<f64>::new(ModelConfig::extend_nlnet(16), 3).unwrap();
        // Zero the pre-dense path so the dense layer sees exact zeros.
        model.encoder.conv.bias.value.fill(0.0);
        model.encoder.nonlocal[0].up.bias.value.fill(0.0);
        model.encoder.nonlocal[0].up.weight.value.fill(0.0);
        model.encoder.dense.bias.value.fill(0.0);
        let code = model.encode(&Array4::zeros((1, 2, 32, 32))).unwrap();
        assert!(code.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_codeword_gives_constant_planes() {
        let mut model = Autoencoder::<f64>::new(ModelConfig::extend_nlnet(16), 4).unwrap();
        model.decoder.dense.weight.value.fill(0.0);
        model.decoder.dense.bias.value.fill(0.0);
        for block in &mut model.decoder.nonlocal {
            block.up.weight.value.fill(0.0);
            block.up.bias.value.fill(0.0);
        }
        for block in &mut model.decoder.refine {
            block.visit_mut("", &mut |name, p| {
                if name.starts_with("conv") {
                    p.value.fill(0.0)
                }
            });
        }
        let out = model.decode(&Array2::zeros((1, 128))).unwrap();
        for plane in 0..2 {
            let b = model.decoder.conv.bias.value[plane];
            let expected = 1.0 / (1.0 + (-b).exp());
            for i in 0..32 {
                for j in 0..32 {
                    assert!((out[[0, plane, i, j]] - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn flatten_is_row_major_plane_first() {
        // One-hot image position (p, i, j) must reach dense input column p·H·W + i·W + j.
        let (h, w) = (32, 32);
        for &(p, i, j) in &[(0, 0, 0), (0, 3, 17), (1, 0, 0), (1, 31, 31)] {
            let mut x = Array4::<f64>::zeros((1, 2, h, w));
            x[[0, p, i, j]] = 1.0;
            let flat = flatten(x);
            let hot: Vec<usize> = flat.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(k, _)| k).collect();
            assert_eq!(hot, vec![p * h * w + i * w + j]);
        }
    }

    #[test]
    fn shape_errors() {
        let model = Autoencoder::<f32>::new(ModelConfig::csinet(16), 5).unwrap();
        assert!(matches!(model.encode(&Array4::zeros((1, 2, 16, 32))), Err(Error::Shape { .. })));
        assert!(matches!(model.decode(&Array2::zeros((1, 64))), Err(Error::Shape { .. })));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Autoencoder::<f32>::new(ModelConfig::extend_nlnet(64), 9).unwrap();
        let b = Autoencoder::<f32>::new(ModelConfig::extend_nlnet(64), 9).unwrap();
        let x = random_images(2, 32, 32, 3);
        assert_eq!(a.reconstruct(&x).unwrap(), b.reconstruct(&x).unwrap());
    }
}
