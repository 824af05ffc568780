//! LoRA adapter arithmetic: factored forward passes, backpropagation to the
//! effective layer weights, the chain rule onto the adapter factors, and the
//! local SGD update.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::Matrix;

/// Standard deviation of the Gaussian used for freshly initialized `A` factors.
pub const A_INIT_STD: f64 = 0.02;

/// One layer's low-rank update `ΔW = B·A` with `A: r×d_in` and `B: d_out×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    a: Matrix,
    b: Matrix,
}

impl AdapterPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        ensure_dim("adapter rank (columns of B)", rank, b.cols())?;
        if rank > a.cols().min(b.rows()) {
            return Err(Error::InvalidArgument(format!(
                "adapter rank {rank} exceeds min(d_in={}, d_out={})",
                a.cols(),
                b.rows()
            )));
        }
        Ok(AdapterPair { a, b })
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize) -> Result<Self> {
        AdapterPair::new(Matrix::zeros(rank, d_in), Matrix::zeros(d_out, rank))
    }

    /// Gaussian `A` (std [`A_INIT_STD`]) and zero `B`, so `ΔW = 0` at start.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        AdapterPair::new(
            Matrix::gaussian(rank, d_in, A_INIT_STD, rng),
            Matrix::zeros(d_out, rank),
        )
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// Mutable access to `(A, B)`. Shapes must be left unchanged.
    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `B·(A·x)` through the rank-r bottleneck.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.b.matvec(&self.a.matvec(x))
    }

    /// Dense `B·A`.
    pub fn product(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter factors share the rank dimension")
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }

    pub fn same_shape(&self, other: &AdapterPair) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// The frozen base network. Layer `l` maps `d_{l-1} → d_l`; the activation
/// follows every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    layers: Vec<Matrix>,
    activation: Activation,
}

impl FrozenBackbone {
    pub fn new(layers: Vec<Matrix>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            ensure_dim(
                &format!("backbone layer {} input width", l + 2),
                pair[0].rows(),
                pair[1].cols(),
            )?;
        }
        Ok(FrozenBackbone { layers, activation })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// The bare network without adapters.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, w) in self.layers.iter().enumerate() {
            h = w.matvec(&h);
            if l < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }
}

/// A client's adapters for one layer: the trainable cluster expert, the
/// frozen external expert and the mixing coefficient `λ`.
///
/// Invariants: `λ ∈ [0, 1]`; a zeroed external carries all-zero factors and
/// pins `λ` at 1 with `lambda_frozen` set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExperts {
    pub(crate) cluster: AdapterPair,
    pub(crate) external: AdapterPair,
    pub(crate) lambda: f64,
    pub(crate) external_zeroed: bool,
    pub(crate) lambda_frozen: bool,
}

impl LayerExperts {
    /// Cluster expert only: zero external, `λ = 1` frozen.
    pub fn solo(cluster: AdapterPair) -> Self {
        let external = AdapterPair::zeros(cluster.d_in(), cluster.d_out(), cluster.rank())
            .expect("shape copied from a valid pair");
        LayerExperts {
            cluster,
            external,
            lambda: 1.0,
            external_zeroed: true,
            lambda_frozen: true,
        }
    }

    pub fn mixed(cluster: AdapterPair, external: AdapterPair, lambda: f64) -> Result<Self> {
        if !cluster.same_shape(&external) {
            return Err(Error::InvalidArgument(
                "cluster and external experts must share shapes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(LayerExperts {
            cluster,
            external,
            lambda,
            external_zeroed: false,
            lambda_frozen: false,
        })
    }

    pub fn cluster(&self) -> &AdapterPair {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut AdapterPair {
        &mut self.cluster
    }

    pub fn external(&self) -> &AdapterPair {
        &self.external
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn external_zeroed(&self) -> bool {
        self.external_zeroed
    }

    pub fn lambda_frozen(&self) -> bool {
        self.lambda_frozen
    }

    pub fn into_cluster(self) -> AdapterPair {
        self.cluster
    }

    /// Effective weight `W0 + λ·B_c A_c + (1-λ)·B_e A_e`.
    pub fn effective_weight(&self, w0: &Matrix) -> Result<Matrix> {
        check_layer(w0, &self.cluster)?;
        let mut w = w0.clone();
        w.add_scaled(&self.cluster.product(), self.lambda)?;
        if !self.external_zeroed {
            w.add_scaled(&self.external.product(), 1.0 - self.lambda)?;
        }
        Ok(w)
    }
}

/// A supervised pair `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Per-layer `∂loss/∂W_l` at the effective weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGradient {
    pub layers: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub b: Matrix,
    pub a: Matrix,
    pub lambda: f64,
}

/// What to do with `λ` after an SGD step. `Unprojected` exists only so the
/// verification battery can prove it notices a missing clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaProjection {
    #[default]
    Clamp,
    Unprojected,
}

fn check_layer(w0: &Matrix, pair: &AdapterPair) -> Result<()> {
    ensure_dim("adapter d_in vs W0 columns", w0.cols(), pair.d_in())?;
    ensure_dim("adapter d_out vs W0 rows", w0.rows(), pair.d_out())
}

/// `W0·x + B·(A·x)`, never forming `B·A`.
pub fn lora_forward(w0: &Matrix, pair: &AdapterPair, x: &[f64]) -> Result<Vec<f64>> {
    check_layer(w0, pair)?;
    ensure_dim("input vector length", w0.cols(), x.len())?;
    let mut out = w0.matvec(x);
    for (o, d) in out.iter_mut().zip(pair.apply(x)) {
        *o += d;
    }
    Ok(out)
}

/// `W0·x + λ·B_c A_c x + (1-λ)·B_e A_e x`.
pub fn mixed_forward(w0: &Matrix, e: &LayerExperts, x: &[f64]) -> Result<Vec<f64>> {
    check_layer(w0, &e.cluster)?;
    ensure_dim("input vector length", w0.cols(), x.len())?;
    let mut out = w0.matvec(x);
    let lambda = e.lambda;
    for (o, d) in out.iter_mut().zip(e.cluster.apply(x)) {
        *o += lambda * d;
    }
    if !e.external_zeroed {
        for (o, d) in out.iter_mut().zip(e.external.apply(x)) {
            *o += (1.0 - lambda) * d;
        }
    }
    Ok(out)
}

pub fn model_forward(backbone: &FrozenBackbone, experts: &[LayerExperts], x: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("expert list length", backbone.depth(), experts.len())?;
    let last = backbone.depth() - 1;
    let mut h = x.to_vec();
    for (l, (w0, e)) in backbone.layers.iter().zip(experts).enumerate() {
        h = mixed_forward(w0, e, &h)?;
        if l < last {
            for v in h.iter_mut() {
                *v = backbone.activation.apply(*v);
            }
        }
    }
    Ok(h)
}

fn check_batch<S: Borrow<Sample>>(backbone: &FrozenBackbone, batch: &[S]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    for s in batch {
        let s = s.borrow();
        ensure_dim("sample input length", backbone.input_dim(), s.x.len())?;
        ensure_dim("sample target length", backbone.output_dim(), s.y.len())?;
    }
    Ok(())
}

/// Mean squared error `(1/n)·Σ‖ŷ − y‖²` using the factored forward pass.
pub fn batch_loss<S: Borrow<Sample>>(backbone: &FrozenBackbone, experts: &[LayerExperts], batch: &[S]) -> Result<f64> {
    check_batch(backbone, batch)?;
    let mut total = 0.0;
    for s in batch {
        let s = s.borrow();
        let pred = model_forward(backbone, experts, &s.x)?;
        total += pred.iter().zip(&s.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// MSE loss and its gradient with respect to every effective layer weight.
pub fn backprop_effective<S: Borrow<Sample>>(
    backbone: &FrozenBackbone,
    experts: &[LayerExperts],
    batch: &[S],
) -> Result<(f64, EffectiveGradient)> {
    ensure_dim("expert list length", backbone.depth(), experts.len())?;
    check_batch(backbone, batch)?;
    let weights = backbone
        .layers
        .iter()
        .zip(experts)
        .map(|(w0, e)| e.effective_weight(w0))
        .collect::<Result<Vec<_>>>()?;
    let act = backbone.activation;
    let depth = weights.len();
    let n = batch.len() as f64;

    let mut grads: Vec<Matrix> = weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut loss = 0.0;
    // inputs[l] feeds layer l; pre[l] is layer l's pre-activation.
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth);

    for s in batch {
        let s = s.borrow();
        inputs.clear();
        pre.clear();
        let mut h = s.x.clone();
        for (l, (w0, e)) in backbone.layers.iter().zip(experts).enumerate() {
            let z = mixed_forward(w0, e, &h)?;
            inputs.push(h);
            h = if l + 1 < depth {
                z.iter().map(|&v| act.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let residual: Vec<f64> = h.iter().zip(&s.y).map(|(p, y)| p - y).collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>();

        let mut delta: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
        for l in (0..depth).rev() {
            grads[l].add_outer(&delta, &inputs[l], 1.0);
            if l > 0 {
                let back = weights[l].t_matvec(&delta);
                delta = back
                    .iter()
                    .zip(&pre[l - 1])
                    .map(|(g, &z)| g * act.derivative(z))
                    .collect();
            }
        }
    }
    Ok((loss / n, EffectiveGradient { layers: grads }))
}

/// Chain rule from `G_l = ∂loss/∂W_l` onto the cluster factors and `λ`:
/// `∇B = λ·G·Aᵀ`, `∇A = λ·Bᵀ·G`, `∇λ = ⟨B_c A_c − B_e A_e, G⟩_F`.
pub fn adapter_gradients(e: &LayerExperts, g: &Matrix) -> Result<AdapterGradients> {
    ensure_dim("gradient rows vs d_out", e.cluster.d_out(), g.rows())?;
    ensure_dim("gradient cols vs d_in", e.cluster.d_in(), g.cols())?;
    let g_at = g.matmul(&e.cluster.a.transpose())?;
    let bt_g = e.cluster.b.transpose().matmul(g)?;
    let lambda_grad = if e.lambda_frozen {
        0.0
    } else {
        // <B A, G> = <B, G Aᵀ>
        let clus = e.cluster.b.frobenius_inner(&g_at)?;
        let ext = if e.external_zeroed {
            0.0
        } else {
            let g_at_ext = g.matmul(&e.external.a.transpose())?;
            e.external.b.frobenius_inner(&g_at_ext)?
        };
        clus - ext
    };
    Ok(AdapterGradients {
        b: g_at.scaled(e.lambda),
        a: bt_g.scaled(e.lambda),
        lambda: lambda_grad,
    })
}

/// One SGD step on the cluster expert and `λ`; the external expert is untouched.
pub fn sgd_step(e: &LayerExperts, grads: &AdapterGradients, eta: f64) -> Result<LayerExperts> {
    sgd_step_with(e, grads, eta, LambdaProjection::Clamp)
}

pub fn sgd_step_with(
    e: &LayerExperts,
    grads: &AdapterGradients,
    eta: f64,
    projection: LambdaProjection,
) -> Result<LayerExperts> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size {eta} must be finite and >= 0"
        )));
    }
    if !(grads.a.is_finite() && grads.b.is_finite() && grads.lambda.is_finite()) {
        return Err(Error::Numeric("non-finite adapter gradient".into()));
    }
    let mut next = e.clone();
    next.cluster.a.add_scaled(&grads.a, -eta)?;
    next.cluster.b.add_scaled(&grads.b, -eta)?;
    if !e.lambda_frozen {
        let raw = e.lambda - eta * grads.lambda;
        next.lambda = match projection {
            LambdaProjection::Clamp => raw.clamp(0.0, 1.0),
            LambdaProjection::Unprojected => raw,
        };
    }
    Ok(next)
}

/// Loss plus adapter gradients for every layer of one batch.
pub fn local_gradients<S: Borrow<Sample>>(
    backbone: &FrozenBackbone,
    experts: &[LayerExperts],
    batch: &[S],
) -> Result<(f64, Vec<AdapterGradients>)> {
    let (loss, eff) = backprop_effective(backbone, experts, batch)?;
    let grads = experts
        .iter()
        .zip(&eff.layers)
        .map(|(e, g)| adapter_gradients(e, g))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grads))
}
