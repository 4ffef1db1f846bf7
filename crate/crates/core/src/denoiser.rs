//! Shared-trunk noise predictor with modality decoder heads.
//!
//! Layout, for `L` hidden layers of width `H`:
//!
//! ```text
//! temb = W_t * sinusoid(t / T) + b_t
//! h_1  = W_1 [z_t ; temb] + b_1 (+ W_c * sum_i e_i + b_c)         // X variant adds W_c
//! m_l  = (W_l h_{l-1} + b_l) * (1 + S_l temb + s_l) + U_l temb + u_l  // l = 2..L
//! h_l  = h_{l-1} + silu(m_l)
//! eps  = W_o h_L + b_o
//! head = W_2 silu(W_1 h_tap + b_1) + b_2                            // tap = ceil(L/2) or L
//! ```
//!
//! Everything is batched row-wise; gradients are exact reverse-mode.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffusion::{EncodedBundle, LatentState};
use crate::error::{check_dim, Error, Result};
use crate::modalities::{HeadPlacement, ModalitySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Inputs `(z_t, t)`.
    U,
    /// Inputs `(z_t, X, t)`.
    X,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::U => "U",
            Variant::X => "X",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "U" | "u" => Ok(Variant::U),
            "X" | "x" => Ok(Variant::X),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub placement: HeadPlacement,
    pub out_dim: usize,
}

impl From<&ModalitySpec> for HeadConfig {
    fn from(spec: &ModalitySpec) -> Self {
        Self {
            placement: spec.head,
            out_dim: spec.head_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Diffusion-space dimension `D`.
    pub dim: usize,
    /// Number of diffusion steps `T`, used to normalize the time input.
    pub steps: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Width of the projected time embedding.
    pub time_embed: usize,
    pub head_width: usize,
    pub variant: Variant,
    pub heads: Vec<HeadConfig>,
}

impl DenoiserConfig {
    /// Default widths: 3 hidden layers of 256, 64 time features.
    pub fn new(dim: usize, steps: usize, variant: Variant, specs: &[ModalitySpec]) -> Self {
        Self {
            dim,
            steps,
            hidden_width: 256,
            hidden_layers: 3,
            time_features: 64,
            time_embed: 64,
            head_width: 128,
            variant,
            heads: specs.iter().map(HeadConfig::from).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.dim == 0 || self.steps == 0 {
            return bad("dimension and step count must be positive");
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.head_width == 0 {
            return bad("trunk and head widths must be positive");
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) || self.time_embed == 0 {
            return bad("time features must be a positive even number");
        }
        if self.heads.iter().any(|h| h.out_dim == 0) {
            return bad("head outputs must be non-empty");
        }
        Ok(())
    }

    /// 1-based index of the hidden layer a head reads from.
    pub fn tap_layer(&self, placement: HeadPlacement) -> usize {
        match placement {
            HeadPlacement::MidTrunk => self.hidden_layers.div_ceil(2),
            HeadPlacement::EndTrunk => self.hidden_layers,
        }
    }
}

/// Affine map `y = x W + b` on row batches; `weight` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    fn accumulate_only(x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| x * sigmoid(x))
}

/// `dy * silu'(a)`.
fn silu_backward(a: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(a).for_each(|g, &x| {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    });
    out
}

/// Sinusoidal features of `t / T`, phases on a 1000-step scale.
pub fn time_features(t: &[usize], steps: usize, features: usize) -> Array2<f64> {
    let half = features / 2;
    let mut out = Array2::zeros((t.len(), features));
    for (row, &step) in t.iter().enumerate() {
        let phase = step as f64 / steps as f64 * 1000.0;
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out[[row, k]] = (phase * freq).sin();
            out[[row, half + k]] = (phase * freq).cos();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub placement: HeadPlacement,
    pub hidden: Linear,
    pub out: Linear,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub time_embed: Linear,
    pub input: Linear,
    pub cond: Option<Linear>,
    /// Residual layers 2..=L.
    pub hidden: Vec<Linear>,
    /// Per-residual-layer time shift `U_l`.
    pub time_proj: Vec<Linear>,
    /// Per-residual-layer time gain `S_l`, zero at initialization.
    pub time_scale: Vec<Linear>,
    pub eps_out: Linear,
    pub heads: Vec<Head>,
}

impl DenoiserParams {
    /// He-normal trunk, zero-initialized head output layers.
    pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let w = cfg.hidden_width;
        let time_embed = Linear::he(cfg.time_features, cfg.time_embed, rng);
        let input = Linear::he(cfg.dim + cfg.time_embed, w, rng);
        let cond = (cfg.variant == Variant::X).then(|| Linear::he(cfg.dim, w, rng));
        let hidden = (1..cfg.hidden_layers).map(|_| Linear::he(w, w, rng)).collect();
        let time_proj = (1..cfg.hidden_layers)
            .map(|_| Linear::he(cfg.time_embed, w, rng))
            .collect();
        let time_scale = (1..cfg.hidden_layers)
            .map(|_| Linear::zeros(cfg.time_embed, w))
            .collect();
        let eps_out = Linear::he(w, cfg.dim, rng);
        let heads = cfg
            .heads
            .iter()
            .map(|h| Head {
                placement: h.placement,
                hidden: Linear::he(w, cfg.head_width, rng),
                out: Linear::zeros(cfg.head_width, h.out_dim),
            })
            .collect();
        Self {
            time_embed,
            input,
            cond,
            hidden,
            time_proj,
            time_scale,
            eps_out,
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            time_embed: self.time_embed.zeros_like(),
            input: self.input.zeros_like(),
            cond: self.cond.as_ref().map(Linear::zeros_like),
            hidden: self.hidden.iter().map(Linear::zeros_like).collect(),
            time_proj: self.time_proj.iter().map(Linear::zeros_like).collect(),
            time_scale: self.time_scale.iter().map(Linear::zeros_like).collect(),
            eps_out: self.eps_out.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    placement: h.placement,
                    hidden: h.hidden.zeros_like(),
                    out: h.out.zeros_like(),
                })
                .collect(),
        }
    }

    /// Every affine layer with a stable name, in a fixed order.
    pub fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![
            ("time_embed".to_owned(), &self.time_embed),
            ("input".to_owned(), &self.input),
        ];
        if let Some(c) = &self.cond {
            out.push(("cond".to_owned(), c));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{}", i + 2), l));
            out.push((format!("hidden.{}.shift", i + 2), &self.time_proj[i]));
            out.push((format!("hidden.{}.gain", i + 2), &self.time_scale[i]));
        }
        out.push(("eps_out".to_owned(), &self.eps_out));
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head.{i}.hidden"), &h.hidden));
            out.push((format!("head.{i}.out"), &h.out));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.time_embed, &mut self.input];
        if let Some(c) = &mut self.cond {
            out.push(c);
        }
        for ((l, tp), ts) in self
            .hidden
            .iter_mut()
            .zip(self.time_proj.iter_mut())
            .zip(self.time_scale.iter_mut())
        {
            out.push(l);
            out.push(tp);
            out.push(ts);
        }
        out.push(&mut self.eps_out);
        for h in &mut self.heads {
            out.push(&mut h.hidden);
            out.push(&mut h.out);
        }
        out
    }

    /// Flat views of every tensor (`<layer>.weight`, `<layer>.bias`).
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((
                format!("{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.shape().to_vec(),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Batched denoiser inputs; row `b` of `z` is at timestep `t[b]`.
#[derive(Debug, Clone)]
pub struct DenoiserInput<'a> {
    pub z: ArrayView2<'a, f64>,
    pub t: &'a [usize],
    /// Row-wise sum of the active encodings (X variant).
    pub cond: Option<ArrayView2<'a, f64>>,
}

/// Single-example output: predicted noise and one prediction per head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Vec<f64>,
    pub head_outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub eps: Array2<f64>,
    pub heads: Vec<Array2<f64>>,
}

impl BatchOutput {
    pub fn row(&self, b: usize) -> DenoiserOutput {
        DenoiserOutput {
            eps_hat: self.eps.row(b).to_vec(),
            head_outputs: self.heads.iter().map(|h| h.row(b).to_vec()).collect(),
        }
    }
}

/// Upstream gradients of the scalar loss with respect to each output.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub eps: Array2<f64>,
    pub heads: Vec<Array2<f64>>,
}

/// Activations retained by [`Denoiser::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Array2<f64>,
    temb: Array2<f64>,
    /// Residual-layer affine outputs before time modulation.
    lin: Vec<Array2<f64>>,
    /// Residual-layer time gains.
    gain: Vec<Array2<f64>>,
    trunk_in: Array2<f64>,
    cond: Option<Array2<f64>>,
    /// Pre-activations of hidden layers 1..=L.
    pre: Vec<Array2<f64>>,
    /// Activations of hidden layers 1..=L.
    act: Vec<Array2<f64>>,
    head_pre: Vec<Array2<f64>>,
    head_act: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = DenoiserParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: DenoiserParams) -> Result<Self> {
        config.validate()?;
        let expected = DenoiserParams::init(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        let shapes = |p: &DenoiserParams| -> Vec<(String, Vec<usize>)> {
            p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::Config("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn validate_input(&self, input: &DenoiserInput<'_>) -> Result<()> {
        let rows = input.z.nrows();
        check_dim("denoiser latent width", self.config.dim, input.z.ncols())?;
        check_dim("denoiser timesteps", rows, input.t.len())?;
        if let Some(&t) = input.t.iter().find(|&&t| t > self.config.steps) {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        if self.config.variant == Variant::X {
            let cond = input.cond.as_ref().ok_or(Error::MissingBundle)?;
            check_dim("conditioning rows", rows, cond.nrows())?;
            check_dim("conditioning width", self.config.dim, cond.ncols())?;
        }
        Ok(())
    }

    pub fn forward_batch(&self, input: &DenoiserInput<'_>) -> Result<BatchOutput> {
        self.forward_train(input).map(|(out, _)| out)
    }

    /// Forward pass keeping the activations needed by [`Denoiser::backward`].
    pub fn forward_train(&self, input: &DenoiserInput<'_>) -> Result<(BatchOutput, ForwardCache)> {
        self.validate_input(input)?;
        let cfg = &self.config;
        let p = &self.params;

        let features = time_features(input.t, cfg.steps, cfg.time_features);
        let temb = p.time_embed.apply(&features.view());
        let trunk_in = concatenate(Axis(1), &[input.z, temb.view()]).expect("row counts agree");
        let mut a1 = p.input.apply(&trunk_in.view());
        let cond = match (cfg.variant, &p.cond, &input.cond) {
            (Variant::X, Some(proj), Some(c)) => {
                a1 += &proj.apply(c);
                Some(c.to_owned())
            }
            _ => None,
        };
        let mut act = vec![a1.clone()];
        let mut pre = vec![a1];
        let mut lin = Vec::with_capacity(p.hidden.len());
        let mut gain = Vec::with_capacity(p.hidden.len());
        for ((layer, tp), ts) in p.hidden.iter().zip(&p.time_proj).zip(&p.time_scale) {
            let prev = act.last().expect("at least one layer");
            let u = layer.apply(&prev.view());
            let g = ts.apply(&temb.view()) + 1.0;
            let a = &u * &g + tp.apply(&temb.view());
            lin.push(u);
            gain.push(g);
            let h = prev + &silu(&a);
            pre.push(a);
            act.push(h);
        }
        let eps = p.eps_out.apply(&act.last().expect("trunk").view());

        let mut heads = Vec::with_capacity(p.heads.len());
        let mut head_pre = Vec::with_capacity(p.heads.len());
        let mut head_act = Vec::with_capacity(p.heads.len());
        for head in &p.heads {
            let tap = &act[cfg.tap_layer(head.placement) - 1];
            let u_pre = head.hidden.apply(&tap.view());
            let u = silu(&u_pre);
            heads.push(head.out.apply(&u.view()));
            head_pre.push(u_pre);
            head_act.push(u);
        }

        let cache = ForwardCache {
            features,
            temb,
            lin,
            gain,
            trunk_in,
            cond,
            pre,
            act,
            head_pre,
            head_act,
        };
        Ok((BatchOutput { eps, heads }, cache))
    }

    /// Exact parameter gradients of a scalar loss given its output gradients.
    pub fn backward(&self, cache: &ForwardCache, grads: &OutputGrads) -> Result<DenoiserParams> {
        let cfg = &self.config;
        let p = &self.params;
        let rows = cache.trunk_in.nrows();
        check_dim("eps gradient rows", rows, grads.eps.nrows())?;
        check_dim("eps gradient width", cfg.dim, grads.eps.ncols())?;
        check_dim("head gradient count", p.heads.len(), grads.heads.len())?;

        let mut g = p.zeros_like();
        let layers = cfg.hidden_layers;
        let mut d_act: Vec<Array2<f64>> = (0..layers)
            .map(|_| Array2::zeros((rows, cfg.hidden_width)))
            .collect();

        d_act[layers - 1] += &p
            .eps_out
            .backward(&cache.act[layers - 1].view(), &grads.eps, &mut g.eps_out);

        for (i, head) in p.heads.iter().enumerate() {
            let dy = &grads.heads[i];
            check_dim("head gradient width", head.out.bias.len(), dy.ncols())?;
            let du = head
                .out
                .backward(&cache.head_act[i].view(), dy, &mut g.heads[i].out);
            let du_pre = silu_backward(&cache.head_pre[i], &du);
            let tap = cfg.tap_layer(head.placement) - 1;
            d_act[tap] += &head
                .hidden
                .backward(&cache.act[tap].view(), &du_pre, &mut g.heads[i].hidden);
        }

        let mut d_temb = Array2::zeros(cache.temb.raw_dim());
        for l in (1..layers).rev() {
            let dh = d_act[l].clone();
            let dm = silu_backward(&cache.pre[l], &dh);
            let k = l - 1;
            d_temb += &p.time_proj[k].backward(&cache.temb.view(), &dm, &mut g.time_proj[k]);
            let dgain = &dm * &cache.lin[k];
            d_temb += &p.time_scale[k].backward(&cache.temb.view(), &dgain, &mut g.time_scale[k]);
            let da = &dm * &cache.gain[k];
            let dprev = p.hidden[l - 1].backward(&cache.act[l - 1].view(), &da, &mut g.hidden[l - 1]);
            d_act[l - 1] += &dh;
            d_act[l - 1] += &dprev;
        }

        let da1 = &d_act[0];
        if let (Some(c), Some(gc)) = (&cache.cond, &mut g.cond) {
            Linear::accumulate_only(&c.view(), da1, gc);
        }
        let d_in = p.input.backward(&cache.trunk_in.view(), da1, &mut g.input);
        d_temb += &d_in.slice(s![.., cfg.dim..]);
        Linear::accumulate_only(&cache.features.view(), &d_temb, &mut g.time_embed);

        if !g.all_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        Ok(g)
    }

    /// Single-example forward pass.
    ///
    /// The U variant ignores `bundle`; the X variant requires it and feeds
    /// the sum of its active encodings.
    pub fn forward(&self, zt: &LatentState, bundle: Option<&EncodedBundle>) -> Result<DenoiserOutput> {
        let dim = self.config.dim;
        check_dim("latent", dim, zt.dim())?;
        let z = Array2::from_shape_vec((1, dim), zt.z.clone()).expect("shape checked");
        let cond = match self.config.variant {
            Variant::U => None,
            Variant::X => {
                let b = bundle.ok_or(Error::MissingBundle)?;
                for e in &b.enc {
                    check_dim("modality encoding", dim, e.len())?;
                }
                Some(Array2::from_shape_vec((1, dim), b.active_sum(dim)).expect("shape checked"))
            }
        };
        let t = [zt.t];
        let input = DenoiserInput {
            z: z.view(),
            t: &t,
            cond: cond.as_ref().map(|c| c.view()),
        };
        Ok(self.forward_batch(&input)?.row(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modalities::{EncoderKind, ModalitySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant, placement: HeadPlacement) -> Denoiser {
        let specs = [ModalitySpec::categorical(3, placement).unwrap()];
        let mut cfg = DenoiserConfig::new(4, 20, variant, &specs);
        cfg.hidden_width = 8;
        cfg.hidden_layers = 3;
        cfg.time_features = 6;
        cfg.time_embed = 5;
        cfg.head_width = 7;
        Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        let d = small(Variant::U, HeadPlacement::MidTrunk);
        let out = d.forward(&LatentState::new(vec![0.3, 0.1, -0.2, 1.0], 7), None).unwrap();
        assert_eq!(out.eps_hat.len(), 4);
        assert_eq!(out.head_outputs[0], vec![0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let d = small(Variant::X, HeadPlacement::EndTrunk);
        let b = EncodedBundle::new(vec![vec![0.5, -0.5, 0.0, 1.0]]);
        let z = LatentState::new(vec![0.3, 0.1, -0.2, 1.0], 3);
        assert_eq!(d.forward(&z, Some(&b)).unwrap(), d.forward(&z, Some(&b)).unwrap());
        assert!(matches!(d.forward(&z, None), Err(Error::MissingBundle)));
    }

    #[test]
    fn affine_gradient_is_outer_product() {
        // eps_out with identity activation upstream: dW = h^T g.
        let d = small(Variant::U, HeadPlacement::EndTrunk);
        let z = Array2::from_shape_vec((1, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let input = DenoiserInput {
            z: z.view(),
            t: &[5],
            cond: None,
        };
        let (_, cache) = d.forward_train(&input).unwrap();
        let mut ge = Array2::zeros((1, 4));
        ge[[0, 1]] = 2.0;
        let grads = OutputGrads {
            eps: ge,
            heads: vec![Array2::zeros((1, 3))],
        };
        let g = d.backward(&cache, &grads).unwrap();
        let h = cache.act.last().unwrap();
        for j in 0..8 {
            assert_eq!(g.eps_out.weight[[j, 1]], h[[0, j]] * 2.0);
            assert_eq!(g.eps_out.weight[[j, 0]], 0.0);
        }
        assert_eq!(g.eps_out.bias[1], 2.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let d = small(Variant::X, HeadPlacement::MidTrunk);
        let z = Array2::from_elem((2, 4), 0.3);
        let c = Array2::from_elem((2, 4), -0.1);
        let input = DenoiserInput {
            z: z.view(),
            t: &[1, 20],
            cond: Some(c.view()),
        };
        let (_, cache) = d.forward_train(&input).unwrap();
        let g = d
            .backward(
                &cache,
                &OutputGrads {
                    eps: Array2::zeros((2, 4)),
                    heads: vec![Array2::zeros((2, 3))],
                },
            )
            .unwrap();
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn continuous_head_shape() {
        let specs = [
            ModalitySpec::continuous(4, EncoderKind::Identity, HeadPlacement::EndTrunk).unwrap(),
            ModalitySpec::categorical(5, HeadPlacement::MidTrunk).unwrap(),
        ];
        let mut cfg = DenoiserConfig::new(4, 10, Variant::U, &specs);
        cfg.hidden_width = 16;
        let d = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = d.forward(&LatentState::new(vec![0.0; 4], 1), None).unwrap();
        assert_eq!(out.head_outputs[0].len(), 4);
        assert_eq!(out.head_outputs[1].len(), 5);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let d = small(Variant::U, HeadPlacement::MidTrunk);
        let mut cfg = d.config.clone();
        assert!(Denoiser::from_parts(cfg.clone(), d.params.clone()).is_ok());
        cfg.hidden_width = 9;
        assert!(Denoiser::from_parts(cfg, d.params.clone()).is_err());
    }
}
