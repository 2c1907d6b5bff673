//! Non-Local (embedded Gaussian self-attention) and Refine-net residual blocks.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::layers::{join, BatchNorm2d, Conv2d, ConvTranspose2d, LeakyRelu, Param, Parametric, Scalar};

fn sample_matrix<F>(a: &Array4<F>, b: usize) -> ArrayView2<'_, F> {
    let (_, c, h, w) = a.dim();
    let n = h * w;
    let s = &a.as_slice().expect("standard layout")[b * c * n..(b + 1) * c * n];
    ArrayView2::from_shape((c, n), s).expect("matrix view")
}

fn sample_matrix_mut<F>(a: &mut Array4<F>, b: usize) -> ArrayViewMut2<'_, F> {
    let (_, c, h, w) = a.dim();
    let n = h * w;
    let s = &mut a.as_slice_mut().expect("standard layout")[b * c * n..(b + 1) * c * n];
    ArrayViewMut2::from_shape((c, n), s).expect("matrix view")
}

/// Row-wise softmax in place.
fn softmax_rows<F: Scalar>(s: &mut Array2<F>) {
    for mut row in s.outer_iter_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: F = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

#[derive(Debug, Clone)]
struct AttentionCache<F> {
    theta: Array4<F>,
    phi: Array4<F>,
    g: Array4<F>,
    attention: Array3<F>,
}

/// Non-Local block:
///
/// 1. stride-2 3×3 convolution `C → m` halving the grid,
/// 2. 1×1 embeddings θ, φ, g (`m → e`),
/// 3. `y_i = Σ_j softmax_j(θ_iᵀ φ_j) g_j` over all positions of the halved grid,
/// 4. 1×1 projection `e → m` followed by batch normalization,
/// 5. stride-2 transposed 3×3 convolution `m → C` back to the input grid,
/// 6. residual sum with the block input.
#[derive(Debug, Clone)]
pub struct NonLocalBlock<F: Scalar> {
    pub down: Conv2d<F>,
    pub theta: Conv2d<F>,
    pub phi: Conv2d<F>,
    pub g: Conv2d<F>,
    pub project: Conv2d<F>,
    pub project_bn: BatchNorm2d<F>,
    pub up: ConvTranspose2d<F>,
    cache: Option<AttentionCache<F>>,
}

impl<F: Scalar> NonLocalBlock<F> {
    pub fn new<R: Rng + ?Sized>(channels: usize, downsampled: usize, embed: usize, rng: &mut R) -> Self {
        NonLocalBlock {
            down: Conv2d::new(channels, downsampled, 3, 2, 1, rng),
            theta: Conv2d::new(downsampled, embed, 1, 1, 0, rng),
            phi: Conv2d::new(downsampled, embed, 1, 1, 0, rng),
            g: Conv2d::new(downsampled, embed, 1, 1, 0, rng),
            project: Conv2d::new(embed, downsampled, 1, 1, 0, rng),
            project_bn: BatchNorm2d::new(downsampled),
            up: ConvTranspose2d::new(downsampled, channels, 3, 2, 1, 1, rng),
            cache: None,
        }
    }

    fn check_input(&self, x: &Array4<F>) {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.down.in_channels, "Non-Local input channels");
        assert!(h % 2 == 0 && w % 2 == 0, "Non-Local block needs an even spatial size, got {h}×{w}");
    }

    /// Attention-weighted values and the `[batch, N, N]` attention matrices.
    fn attend(theta: &Array4<F>, phi: &Array4<F>, g: &Array4<F>) -> (Array4<F>, Array3<F>) {
        let (n, _, h, w) = theta.dim();
        let positions = h * w;
        let mut attention = Array3::zeros((n, positions, positions));
        let mut y = Array4::zeros(g.dim());
        for b in 0..n {
            let (th, ph, gb) = (sample_matrix(theta, b), sample_matrix(phi, b), sample_matrix(g, b));
            let mut scores = th.t().dot(&ph);
            softmax_rows(&mut scores);
            general_mat_mul(F::one(), &gb, &scores.t(), F::zero(), &mut sample_matrix_mut(&mut y, b));
            attention.index_axis_mut(Axis(0), b).assign(&scores);
        }
        (y, attention)
    }

    /// Row-stochastic attention matrices over the downsampled positions (evaluation mode).
    pub fn attention_map(&self, x: &Array4<F>) -> Array3<F> {
        self.check_input(x);
        let d = self.down.infer(x);
        Self::attend(&self.theta.infer(&d), &self.phi.infer(&d), &self.g.infer(&d)).1
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        self.check_input(x);
        let d = self.down.infer(x);
        let (y, _) = Self::attend(&self.theta.infer(&d), &self.phi.infer(&d), &self.g.infer(&d));
        let branch = self.up.infer(&self.project_bn.infer(&self.project.infer(&y)));
        branch + x
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        self.check_input(x);
        let d = self.down.forward(x);
        let theta = self.theta.forward(&d);
        let phi = self.phi.forward(&d);
        let g = self.g.forward(&d);
        let (y, attention) = Self::attend(&theta, &phi, &g);
        let projected = self.project_bn.forward(&self.project.forward(&y));
        let branch = self.up.forward(&projected);
        self.cache = Some(AttentionCache { theta, phi, g, attention });
        branch + x
    }

    pub fn backward(&mut self, dz: &Array4<F>) -> Array4<F> {
        let AttentionCache { theta, phi, g, attention } =
            self.cache.take().expect("NonLocalBlock::backward without forward");
        let dy = self.project.backward(&self.project_bn.backward(&self.up.backward(dz)));
        let mut d_theta = Array4::zeros(theta.dim());
        let mut d_phi = Array4::zeros(phi.dim());
        let mut d_g = Array4::zeros(g.dim());
        for b in 0..theta.dim().0 {
            let a = attention.index_axis(Axis(0), b);
            let dyb = sample_matrix(&dy, b);
            let (th, ph, gb) = (sample_matrix(&theta, b), sample_matrix(&phi, b), sample_matrix(&g, b));
            general_mat_mul(F::one(), &dyb, &a, F::zero(), &mut sample_matrix_mut(&mut d_g, b));
            // Softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
            let mut ds = dyb.t().dot(&gb);
            for (mut ds_row, a_row) in ds.outer_iter_mut().zip(a.outer_iter()) {
                let dot: F = ds_row.iter().zip(a_row.iter()).map(|(&d, &p)| d * p).sum();
                ds_row.iter_mut().zip(a_row.iter()).for_each(|(d, &p)| *d = p * (*d - dot));
            }
            general_mat_mul(F::one(), &ph, &ds.t(), F::zero(), &mut sample_matrix_mut(&mut d_theta, b));
            general_mat_mul(F::one(), &th, &ds, F::zero(), &mut sample_matrix_mut(&mut d_phi, b));
        }
        let dd = self.theta.backward(&d_theta) + self.phi.backward(&d_phi) + self.g.backward(&d_g);
        self.down.backward(&dd) + dz
    }
}

impl<F: Scalar> Parametric<F> for NonLocalBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.down.visit(&join(prefix, "down"), f);
        self.theta.visit(&join(prefix, "theta"), f);
        self.phi.visit(&join(prefix, "phi"), f);
        self.g.visit(&join(prefix, "g"), f);
        self.project.visit(&join(prefix, "project"), f);
        self.project_bn.visit(&join(prefix, "project_bn"), f);
        self.up.visit(&join(prefix, "up"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.theta.visit_mut(&join(prefix, "theta"), f);
        self.phi.visit_mut(&join(prefix, "phi"), f);
        self.g.visit_mut(&join(prefix, "g"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
        self.project_bn.visit_mut(&join(prefix, "project_bn"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// Refine-net residual block: three "same" convolutions `2 → c1 → c2 → 2`,
/// each batch-normalized, LeakyReLU between them, and the block input added
/// back before the final LeakyReLU.
#[derive(Debug, Clone)]
pub struct RefineBlock<F: Scalar> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    pub act1: LeakyRelu<F>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub act2: LeakyRelu<F>,
    pub conv3: Conv2d<F>,
    pub bn3: BatchNorm2d<F>,
    pub act_out: LeakyRelu<F>,
}

impl<F: Scalar> RefineBlock<F> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: [usize; 2],
        kernels: [usize; 3],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        RefineBlock {
            conv1: Conv2d::same(channels, hidden[0], kernels[0], rng),
            bn1: BatchNorm2d::new(hidden[0]),
            act1: LeakyRelu::new(slope),
            conv2: Conv2d::same(hidden[0], hidden[1], kernels[1], rng),
            bn2: BatchNorm2d::new(hidden[1]),
            act2: LeakyRelu::new(slope),
            conv3: Conv2d::same(hidden[1], channels, kernels[2], rng),
            bn3: BatchNorm2d::new(channels),
            act_out: LeakyRelu::new(slope),
        }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let h = self.act1.infer(&self.bn1.infer(&self.conv1.infer(x)));
        let h = self.act2.infer(&self.bn2.infer(&self.conv2.infer(&h)));
        let h = self.bn3.infer(&self.conv3.infer(&h));
        self.act_out.infer(&(h + x))
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let h = self.conv1.forward(x);
        let h = self.act1.forward(&self.bn1.forward(&h));
        let h = self.conv2.forward(&h);
        let h = self.act2.forward(&self.bn2.forward(&h));
        let h = self.bn3.forward(&self.conv3.forward(&h));
        self.act_out.forward(&(h + x))
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d_sum = self.act_out.backward(dy);
        let d = self.conv3.backward(&self.bn3.backward(&d_sum));
        let d = self.conv2.backward(&self.bn2.backward(&self.act2.backward(&d)));
        let d = self.conv1.backward(&self.bn1.backward(&self.act1.backward(&d)));
        d + d_sum
    }
}

impl<F: Scalar> Parametric<F> for RefineBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
    }
}
