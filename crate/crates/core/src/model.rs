//! The multiscale fixed-point map `f_θ = post ∘ fusion ∘ residual`, its
//! parameters, input injection, classifier head and projection pass.
//!
//! Branch `i` (zero-based) runs at `H/2^i × W/2^i` with `Cᵢ` channels.
//! Per branch:
//!
//! ```text
//! g(zᵢ) = MGN₂(Drop(Conv⋆₂(SReLU(MGN₁(Conv⋆₁(zᵢ))))) + [u(x) on branch 0])
//! ẑᵢ    = SReLU(MGN₃((1−α₁)zᵢ + α₁g(zᵢ)))
//! z̃ᵢ    = (1−α₂)ẑᵢ + α₂ Σ_{j≠i} wᵢⱼ Fuseᵢⱼ(ẑⱼ)
//! z̄ᵢ    = SReLU(MGN(Conv⋆(z̃ᵢ)))
//! ```
//!
//! A finer partner is brought down by strided `Conv⋆ → MGN` hops, with the
//! activation between hops; a coarser one by a 1×1 `Conv⋆ → MGN` followed
//! by nearest-neighbour upsampling. The baseline variant keeps the topology
//! and swaps in standard group norm, ReLU, plain sums and unprojected convs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::budget::{fusion_row_bound, network_bound, BudgetReport, LipschitzConfig, PathBound};
use crate::equilibrium::EquilibriumMap;
use crate::lipops::{
    clamp_affine, conv2d, conv2d_input_vjp, conv2d_param_vjp, default_groups, dropout, fusion_weights, group_norm,
    group_norm_vjp, norm_bound, project_weights, scaled_relu, scaled_relu_vjp, spectral_norm, upsample_nearest,
    upsample_nearest_vjp, ConvGeometry, NormKind, PowerState,
};
use crate::{Error, Mode, MultiscaleState, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelMode {
    #[default]
    Lipschitz,
    Baseline,
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lipschitz" => Ok(ModelMode::Lipschitz),
            "baseline" => Ok(ModelMode::Baseline),
            other => Err(Error::Config(format!("unknown model mode {other:?}"))),
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Lipschitz => "lipschitz",
            ModelMode::Baseline => "baseline",
        })
    }
}

/// Individual switches between the constrained and the baseline layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    /// Mean-only group norm instead of variance-normalizing.
    pub mean_only_norm: bool,
    pub clamp_affine: bool,
    /// Project conv kernels onto the `c` ball.
    pub constrain_conv: bool,
    /// Softmax fusion weights instead of all ones.
    pub softmax_fusion: bool,
    /// `(1−α₁)z + α₁g` instead of `z + g`.
    pub convex_residual: bool,
    /// `(1−α₂)ẑᵢ + α₂Σ…` instead of `ẑᵢ + Σ…`.
    pub convex_fusion: bool,
    /// Activation slope `a` instead of 1.
    pub scaled_activation: bool,
}

impl Variant {
    pub fn lipschitz() -> Self {
        Self {
            mean_only_norm: true,
            clamp_affine: true,
            constrain_conv: true,
            softmax_fusion: true,
            convex_residual: true,
            convex_fusion: true,
            scaled_activation: true,
        }
    }

    pub fn baseline() -> Self {
        Self {
            mean_only_norm: false,
            clamp_affine: false,
            constrain_conv: false,
            softmax_fusion: false,
            convex_residual: false,
            convex_fusion: false,
            scaled_activation: false,
        }
    }

    pub fn for_mode(mode: ModelMode) -> Self {
        match mode {
            ModelMode::Lipschitz => Self::lipschitz(),
            ModelMode::Baseline => Self::baseline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `C₁..Cₙ`; the branch count is its length.
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub lip: LipschitzConfig,
    pub mode: ModelMode,
    pub variant: Variant,
    pub classes: usize,
    pub seed: u64,
    /// Power iterations at build time.
    pub build_iters: usize,
    /// Power iterations per projection during training.
    pub step_iters: usize,
    /// Epsilon of the baseline group norm.
    pub gn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![4, 4, 8, 8],
            input_channels: 1,
            height: 32,
            width: 32,
            lip: LipschitzConfig::default(),
            mode: ModelMode::Lipschitz,
            variant: Variant::lipschitz(),
            classes: 3,
            seed: 0,
            build_iters: 50,
            step_iters: 1,
            gn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn branches(&self) -> usize {
        self.channels.len()
    }

    /// Switch mode and reset the variant switches to that mode's defaults.
    pub fn with_mode(mut self, mode: ModelMode) -> Self {
        self.mode = mode;
        self.variant = Variant::for_mode(mode);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.branches();
        if n == 0 || self.channels.contains(&0) {
            return Err(Error::Config(format!("channels must be positive, got {:?}", self.channels)));
        }
        if self.lip.branches != n {
            return Err(Error::Config(format!(
                "{} channel entries for {} branches",
                n, self.lip.branches
            )));
        }
        if !self.lip.upsample_includes_conv {
            return Err(Error::Config("the model always matches channels on upsample paths".into()));
        }
        self.lip.validate()?;
        let div = 1usize << (n - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} for {n} branches",
                self.height,
                self.width,
                n - 1
            )));
        }
        if self.input_channels == 0 || self.classes == 0 {
            return Err(Error::Config("input channels and classes must be positive".into()));
        }
        if !(self.gn_eps > 0.0) {
            return Err(Error::Config(format!("gn_eps must be > 0, got {}", self.gn_eps)));
        }
        Ok(())
    }

    pub fn resolution(&self, i: usize) -> (usize, usize) {
        (self.height >> i, self.width >> i)
    }

    /// Shapes of the state branches for a batch.
    pub fn state_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.branches())
            .map(|i| {
                let (h, w) = self.resolution(i);
                vec![batch, self.channels[i], h, w]
            })
            .collect()
    }

    fn norm_kind(&self) -> NormKind {
        if self.variant.mean_only_norm {
            NormKind::MeanOnly
        } else {
            NormKind::Full { eps: self.gn_eps }
        }
    }

    fn slope(&self) -> f64 {
        if self.variant.scaled_activation {
            self.lip.slope
        } else {
            1.0
        }
    }

    fn residual_mix(&self) -> (f64, f64) {
        if self.variant.convex_residual {
            (1.0 - self.lip.alpha1, self.lip.alpha1)
        } else {
            (1.0, 1.0)
        }
    }

    fn fusion_mix(&self) -> (f64, f64) {
        if self.variant.convex_fusion {
            (1.0 - self.lip.alpha2, self.lip.alpha2)
        } else {
            (1.0, 1.0)
        }
    }
}

/// Coarse grouping of parameters, used for sampling and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFamily {
    Kernel,
    Bias,
    Gamma,
    Beta,
    Head,
}

/// Flat list of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: vec![],
            tensors: vec![],
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn family(&self, id: usize) -> ParamFamily {
        let name = &self.names[id];
        if name.starts_with("head.") {
            ParamFamily::Head
        } else if name.ends_with(".weight") {
            ParamFamily::Kernel
        } else if name.ends_with(".bias") {
            ParamFamily::Bias
        } else if name.ends_with(".gamma") {
            ParamFamily::Gamma
        } else {
            ParamFamily::Beta
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero cotangents aligned with the store.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(Tensor::zeros_like).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    geom: ConvGeometry,
    constrained: bool,
    power: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Conv(ConvLayer),
    Norm(NormLayer),
    Act,
    Drop,
    Up(usize),
}

#[derive(Debug, Clone)]
struct BranchLayers {
    /// `Conv⋆₁ → MGN₁ → SReLU → Conv⋆₂ → Drop`
    pre: Vec<Step>,
    norm2: NormLayer,
    norm3: NormLayer,
    /// `Conv⋆ → MGN → SReLU`
    post: Vec<Step>,
}

#[derive(Debug, Clone)]
struct FusePath {
    out: usize,
    input: usize,
    weight: f64,
    steps: Vec<Step>,
}

/// Persisted power-iteration state of one conv.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerEntry<T> {
    /// Name of the kernel tensor.
    pub name: String,
    pub state: PowerState<T>,
    /// Latest spectral-norm estimate.
    pub sigma: f64,
}

/// Everything fixed for one solve.
#[derive(Debug, Clone)]
pub struct ModelContext<T> {
    pub x: Tensor<T>,
    pub mode: Mode,
    /// One keep-mask per branch, present in train mode when `p > 0`.
    pub masks: Vec<Option<Tensor<T>>>,
    injection: Tensor<T>,
}

impl<T: Real> ModelContext<T> {
    pub fn batch(&self) -> usize {
        self.x.batch()
    }
}

/// Intermediates of one evaluation of `f_θ`.
#[derive(Debug, Clone)]
pub struct ModelTrace<T> {
    pre: Vec<Vec<Tensor<T>>>,
    d: Vec<Tensor<T>>,
    m: Vec<Tensor<T>>,
    n3: Vec<Tensor<T>>,
    paths: Vec<Vec<Tensor<T>>>,
    post: Vec<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    power: Vec<PowerEntry<T>>,
    branches: Vec<BranchLayers>,
    paths: Vec<FusePath>,
    inject: ConvLayer,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    power: Vec<PowerEntry<T>>,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeometry, constrained: bool) -> ConvLayer {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(rng.gen_range(-bound..bound)));
        let b = Tensor::from_fn(&[cout], |_| T::lit(rng.gen_range(-bound..bound)));
        let seed = self.rng.gen();
        let w_id = self.params.push(format!("{name}.weight"), w);
        let b_id = self.params.push(format!("{name}.bias"), b);
        self.power.push(PowerEntry {
            name: format!("{name}.weight"),
            state: PowerState::new(cin, geom, seed),
            sigma: 0.0,
        });
        ConvLayer {
            w: w_id,
            b: b_id,
            geom,
            constrained,
            power: self.power.len() - 1,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        let g0 = if self.cfg.variant.clamp_affine {
            self.cfg.lip.gamma_bar
        } else {
            1.0
        };
        NormLayer {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[channels], T::lit(g0))),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: default_groups(channels),
        }
    }
}

impl<T: Real> Model<T> {
    /// Draw, project and clamp all parameters. Deterministic in `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.branches();
        let constrained = cfg.variant.constrain_conv;
        let mut b = Builder {
            params: ParamStore::new(),
            power: vec![],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        };
        let mut branches = Vec::with_capacity(n);
        for i in 0..n {
            let c = cfg.channels[i];
            let same = ConvGeometry::same(3, cfg.resolution(i));
            let conv1 = b.conv(&format!("branch{i}.conv1"), c, c, 3, same, constrained);
            let norm1 = b.norm(&format!("branch{i}.norm1"), c);
            let conv2 = b.conv(&format!("branch{i}.conv2"), c, c, 3, same, constrained);
            let norm2 = b.norm(&format!("branch{i}.norm2"), c);
            let norm3 = b.norm(&format!("branch{i}.norm3"), c);
            branches.push(BranchLayers {
                pre: vec![Step::Conv(conv1), Step::Norm(norm1), Step::Act, Step::Conv(conv2), Step::Drop],
                norm2,
                norm3,
                post: vec![],
            });
        }
        let mut paths = Vec::new();
        for i in 0..n {
            let row = fusion_weights(n, i);
            for e in &row.entries {
                let j = e.partner;
                let weight = if cfg.variant.softmax_fusion { e.weight } else { 1.0 };
                let mut steps = Vec::new();
                if j < i {
                    let hops = i - j;
                    for k in 0..hops {
                        let cout = if k + 1 == hops { cfg.channels[i] } else { cfg.channels[j] };
                        let geom = ConvGeometry::new(2, 1, cfg.resolution(j + k));
                        let name = format!("fuse{i}_{j}.hop{k}");
                        steps.push(Step::Conv(b.conv(&name, cfg.channels[j], cout, 3, geom, constrained)));
                        steps.push(Step::Norm(b.norm(&format!("{name}.norm"), cout)));
                        if k + 1 < hops {
                            steps.push(Step::Act);
                        }
                    }
                } else {
                    let name = format!("fuse{i}_{j}");
                    let geom = ConvGeometry::same(1, cfg.resolution(j));
                    steps.push(Step::Conv(b.conv(&format!("{name}.conv"), cfg.channels[j], cfg.channels[i], 1, geom, constrained)));
                    steps.push(Step::Norm(b.norm(&format!("{name}.norm"), cfg.channels[i])));
                    steps.push(Step::Up(1 << (j - i)));
                }
                paths.push(FusePath {
                    out: i,
                    input: j,
                    weight,
                    steps,
                });
            }
        }
        for (i, br) in branches.iter_mut().enumerate() {
            let c = cfg.channels[i];
            let conv = b.conv(&format!("post{i}.conv"), c, c, 3, ConvGeometry::same(3, cfg.resolution(i)), constrained);
            let norm = b.norm(&format!("post{i}.norm"), c);
            br.post = vec![Step::Conv(conv), Step::Norm(norm), Step::Act];
        }
        let inject = b.conv(
            "inject",
            cfg.input_channels,
            cfg.channels[0],
            3,
            ConvGeometry::same(3, cfg.resolution(0)),
            false,
        );
        let feat: usize = cfg.channels.iter().sum();
        let hb = 1.0 / (feat as f64).sqrt();
        let rng = &mut b.rng;
        let hw = Tensor::from_fn(&[cfg.classes, feat], |_| T::lit(rng.gen_range(-hb..hb)));
        let head_w = b.params.push("head.weight".into(), hw);
        let head_b = b.params.push("head.bias".into(), Tensor::zeros(&[cfg.classes]));

        let mut model = Self {
            cfg: cfg.clone(),
            params: b.params,
            power: b.power,
            branches,
            paths,
            inject,
            head_w,
            head_b,
        };
        model.refresh_estimates(cfg.build_iters)?;
        model.project_all_with(cfg.build_iters)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn power_states(&self) -> &[PowerEntry<T>] {
        &self.power
    }

    pub fn power_states_mut(&mut self) -> &mut [PowerEntry<T>] {
        &mut self.power
    }

    /// Ids of the classifier head `(weight, bias)`.
    pub fn head_ids(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            power: self
                .power
                .iter()
                .map(|p| PowerEntry {
                    name: p.name.clone(),
                    state: PowerState { u: p.state.u.cast() },
                    sigma: p.sigma,
                })
                .collect(),
            branches: self.branches.clone(),
            paths: self.paths.clone(),
            inject: self.inject,
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        let steps = self
            .branches
            .iter()
            .flat_map(|b| b.pre.iter().chain(&b.post))
            .chain(self.paths.iter().flat_map(|p| &p.steps));
        steps.filter_map(|s| match s {
            Step::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn norm_layers(&self) -> Vec<NormLayer> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.push(b.norm2);
            out.push(b.norm3);
            for s in b.pre.iter().chain(&b.post) {
                if let Step::Norm(n) = s {
                    out.push(*n);
                }
            }
        }
        for p in &self.paths {
            for s in &p.steps {
                if let Step::Norm(n) = s {
                    out.push(*n);
                }
            }
        }
        out
    }

    /// Re-estimate the spectral norm of every conv inside `f_θ`.
    pub fn refresh_estimates(&mut self, iters: usize) -> Result<()> {
        let layers: Vec<ConvLayer> = self.conv_layers().copied().collect();
        for c in layers {
            let entry = &mut self.power[c.power];
            let s = spectral_norm(self.params.get(c.w), c.geom, iters, &mut entry.state)?;
            entry.sigma = s.as_f64();
        }
        Ok(())
    }

    /// Project every constrained kernel onto the `c` ball and clamp every
    /// norm scale into `[−γ̄, γ̄]`, advancing the power iteration by the
    /// configured per-step count. A no-op where the variant disables it.
    pub fn project_all(&mut self) -> Result<()> {
        self.project_all_with(self.cfg.step_iters)
    }

    pub fn project_all_with(&mut self, iters: usize) -> Result<()> {
        if self.cfg.variant.constrain_conv {
            let c = T::lit(self.cfg.lip.target_norm);
            let layers: Vec<ConvLayer> = self.conv_layers().filter(|l| l.constrained).copied().collect();
            for l in layers {
                let entry = &mut self.power[l.power];
                let (w, sigma) = project_weights(self.params.get(l.w), c, l.geom, iters, &mut entry.state)?;
                entry.sigma = sigma.min(c).as_f64();
                *self.params.get_mut(l.w) = w;
            }
        }
        if self.cfg.variant.clamp_affine {
            let g = T::lit(self.cfg.lip.gamma_bar);
            for n in self.norm_layers() {
                let clamped = clamp_affine(self.params.get(n.gamma), g);
                *self.params.get_mut(n.gamma) = clamped;
            }
        }
        Ok(())
    }

    fn conv_bound(&self, c: &ConvLayer) -> f64 {
        if c.constrained {
            self.cfg.lip.target_norm
        } else {
            self.power[c.power].sigma
        }
    }

    fn norm_bound_of(&self, n: &NormLayer) -> f64 {
        norm_bound(self.params.get(n.gamma), self.cfg.norm_kind()).as_f64()
    }

    fn chain_bound(&self, steps: &[Step], mode: Mode) -> f64 {
        steps
            .iter()
            .map(|s| match s {
                Step::Conv(c) => self.conv_bound(c),
                Step::Norm(n) => self.norm_bound_of(n),
                Step::Act => self.cfg.slope(),
                Step::Drop => match mode {
                    Mode::Train => self.cfg.lip.dropout_bound(),
                    Mode::Eval => 1.0,
                },
                Step::Up(s) => *s as f64,
            })
            .product()
    }

    /// Lipschitz bound of `f_θ` in `z`, composed op by op along the actual
    /// graph with the current parameters. Unconstrained convs contribute
    /// their latest power-iteration estimate.
    pub fn bound(&self, mode: Mode) -> BudgetReport {
        let (skip1, mix1) = self.cfg.residual_mix();
        let (skip2, mix2) = self.cfg.fusion_mix();
        let a = self.cfg.slope();
        let mut residual: f64 = 0.0;
        let mut post: f64 = 0.0;
        for b in &self.branches {
            let inner = self.norm_bound_of(&b.norm2) * self.chain_bound(&b.pre, mode);
            let h = a * self.norm_bound_of(&b.norm3) * (skip1 + mix1 * inner);
            residual = residual.max(h);
            post = post.max(self.chain_bound(&b.post, mode));
        }
        let mut paths = Vec::new();
        let mut fusion = Vec::new();
        for i in 0..self.cfg.branches() {
            let terms: Vec<(f64, f64)> = self
                .paths
                .iter()
                .filter(|p| p.out == i)
                .map(|p| {
                    let bound = self.chain_bound(&p.steps, mode);
                    paths.push(PathBound {
                        out: i,
                        input: p.input,
                        weight: p.weight,
                        bound,
                    });
                    (p.weight, bound)
                })
                .collect();
            fusion.push(fusion_row_bound(skip2, mix2, terms));
        }
        BudgetReport {
            residual,
            post_fusion: post,
            overall: network_bound(residual, &fusion, post),
            fusion,
            paths,
        }
    }

    /// Per-branch dropout keep-masks, constant over space (variational) and
    /// over the iterations of a solve. `None` everywhere when `p = 0`.
    pub fn draw_masks<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Option<Tensor<T>>> {
        let p = self.cfg.lip.dropout;
        (0..self.cfg.branches())
            .map(|i| {
                if p == 0.0 {
                    return None;
                }
                let (h, w) = self.cfg.resolution(i);
                let c = self.cfg.channels[i];
                let keep: Vec<bool> = (0..batch * c).map(|_| rng.gen::<f64>() >= p).collect();
                Some(Tensor::from_fn(&[batch, c, h, w], |k| {
                    if keep[k / (h * w)] {
                        T::one()
                    } else {
                        T::zero()
                    }
                }))
            })
            .collect()
    }

    /// Fix the input and masks for a solve. Masks are ignored in eval mode.
    pub fn context(&self, x: &Tensor<T>, mode: Mode, masks: Vec<Option<Tensor<T>>>) -> Result<ModelContext<T>> {
        let (_, cin, h, w) = x.dims4()?;
        if cin != self.cfg.input_channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::shape(format!(
                "input {:?} does not match configured {}x{}x{}",
                x.shape(),
                self.cfg.input_channels,
                self.cfg.height,
                self.cfg.width
            )));
        }
        let masks = match mode {
            Mode::Eval => vec![None; self.cfg.branches()],
            Mode::Train => {
                if masks.len() != self.cfg.branches() {
                    return Err(Error::shape(format!("{} masks for {} branches", masks.len(), self.cfg.branches())));
                }
                masks
            }
        };
        if mode == Mode::Train && self.cfg.lip.dropout > 0.0 && masks.iter().any(Option::is_none) {
            return Err(Error::shape("train mode with dropout needs a mask per branch"));
        }
        let injection = self.conv_forward(&self.inject, x)?;
        Ok(ModelContext {
            x: x.clone(),
            mode,
            masks,
            injection,
        })
    }

    /// Eval-mode context (dropout off).
    pub fn eval_context(&self, x: &Tensor<T>) -> Result<ModelContext<T>> {
        self.context(x, Mode::Eval, vec![])
    }

    fn conv_forward(&self, c: &ConvLayer, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self.params.get(c.w), Some(self.params.get(c.b)), c.geom)
    }

    fn step_forward(&self, step: &Step, x: &Tensor<T>, ctx: &ModelContext<T>, branch: usize) -> Result<Tensor<T>> {
        match step {
            Step::Conv(c) => self.conv_forward(c, x),
            Step::Norm(n) => group_norm(
                x,
                self.params.get(n.gamma),
                self.params.get(n.beta),
                n.groups,
                self.cfg.norm_kind(),
            ),
            Step::Act => Ok(scaled_relu(x, T::lit(self.cfg.slope()))),
            Step::Drop => match &ctx.masks[branch] {
                Some(m) if ctx.mode == Mode::Train => dropout(x, m, self.cfg.lip.dropout),
                _ => Ok(x.clone()),
            },
            Step::Up(s) => upsample_nearest(x, *s, *s),
        }
    }

    fn step_backward(
        &self,
        step: &Step,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        ctx: &ModelContext<T>,
        branch: usize,
        grads: &mut Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        match step {
            Step::Conv(c) => {
                let w = self.params.get(c.w);
                if let Some(g) = grads.as_deref_mut() {
                    let (gw, gb) = conv2d_param_vjp(x, gy, w.shape(), c.geom)?;
                    g[c.w].add_scaled(T::one(), &gw)?;
                    g[c.b].add_scaled(T::one(), &gb)?;
                }
                conv2d_input_vjp(gy, w, c.geom)
            }
            Step::Norm(n) => {
                let (gx, gg, gb) = group_norm_vjp(x, self.params.get(n.gamma), gy, n.groups, self.cfg.norm_kind())?;
                if let Some(g) = grads.as_deref_mut() {
                    g[n.gamma].add_scaled(T::one(), &gg)?;
                    g[n.beta].add_scaled(T::one(), &gb)?;
                }
                Ok(gx)
            }
            Step::Act => scaled_relu_vjp(x, T::lit(self.cfg.slope()), gy),
            Step::Drop => match &ctx.masks[branch] {
                Some(m) if ctx.mode == Mode::Train => dropout(gy, m, self.cfg.lip.dropout),
                _ => Ok(gy.clone()),
            },
            Step::Up(s) => upsample_nearest_vjp(gy, *s, *s),
        }
    }

    fn chain_forward(
        &self,
        steps: &[Step],
        x: &Tensor<T>,
        ctx: &ModelContext<T>,
        branch: usize,
        mut cache: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for s in steps {
            let next = self.step_forward(s, &cur, ctx, branch)?;
            if let Some(c) = cache.as_deref_mut() {
                c.push(cur);
            }
            cur = next;
        }
        Ok(cur)
    }

    fn chain_backward(
        &self,
        steps: &[Step],
        inputs: &[Tensor<T>],
        gy: Tensor<T>,
        ctx: &ModelContext<T>,
        branch: usize,
        grads: &mut Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let mut g = gy;
        for (s, x) in steps.iter().zip(inputs).rev() {
            g = self.step_backward(s, x, &g, ctx, branch, grads)?;
        }
        Ok(g)
    }

    fn norm_forward(&self, n: &NormLayer, x: &Tensor<T>) -> Result<Tensor<T>> {
        group_norm(x, self.params.get(n.gamma), self.params.get(n.beta), n.groups, self.cfg.norm_kind())
    }

    fn forward(
        &self,
        ctx: &ModelContext<T>,
        z: &MultiscaleState<T>,
        mut trace: Option<&mut ModelTrace<T>>,
    ) -> Result<MultiscaleState<T>> {
        z.check_shapes(&self.cfg.state_shapes(ctx.batch()))?;
        let zhat = self.residual_stage_traced(ctx, z, trace.as_deref_mut())?;
        let ztilde = self.fusion_stage_traced(ctx, &zhat, trace.as_deref_mut())?;
        self.post_stage_traced(ctx, &ztilde, trace)
    }

    fn residual_stage_traced(
        &self,
        ctx: &ModelContext<T>,
        z: &MultiscaleState<T>,
        mut trace: Option<&mut ModelTrace<T>>,
    ) -> Result<MultiscaleState<T>> {
        let (skip1, mix1) = self.cfg.residual_mix();
        let slope = T::lit(self.cfg.slope());
        let mut zhat = Vec::with_capacity(z.len());
        for (i, br) in self.branches.iter().enumerate() {
            let mut cache = trace.as_ref().map(|_| Vec::new());
            let mut d = self.chain_forward(&br.pre, z.branch(i), ctx, i, cache.as_mut())?;
            if i == 0 {
                d.add_scaled(T::one(), &ctx.injection)?;
            }
            let g = self.norm_forward(&br.norm2, &d)?;
            let m = Tensor::lincomb(T::lit(skip1), z.branch(i), T::lit(mix1), &g)?;
            let n3 = self.norm_forward(&br.norm3, &m)?;
            zhat.push(scaled_relu(&n3, slope));
            if let Some(t) = trace.as_deref_mut() {
                t.pre.push(cache.unwrap_or_default());
                t.d.push(d);
                t.m.push(m);
                t.n3.push(n3);
            }
        }
        MultiscaleState::new(zhat)
    }

    fn fusion_stage_traced(
        &self,
        ctx: &ModelContext<T>,
        zhat: &MultiscaleState<T>,
        mut trace: Option<&mut ModelTrace<T>>,
    ) -> Result<MultiscaleState<T>> {
        let (skip2, mix2) = self.cfg.fusion_mix();
        let mut ztilde: Vec<Tensor<T>> = zhat.branches().iter().map(|t| t.scale(T::lit(skip2))).collect();
        for p in &self.paths {
            let mut cache = trace.as_ref().map(|_| Vec::new());
            let y = self.chain_forward(&p.steps, zhat.branch(p.input), ctx, p.input, cache.as_mut())?;
            ztilde[p.out].add_scaled(T::lit(mix2 * p.weight), &y)?;
            if let Some(t) = trace.as_deref_mut() {
                t.paths.push(cache.unwrap_or_default());
            }
        }
        MultiscaleState::new(ztilde)
    }

    fn post_stage_traced(
        &self,
        ctx: &ModelContext<T>,
        ztilde: &MultiscaleState<T>,
        mut trace: Option<&mut ModelTrace<T>>,
    ) -> Result<MultiscaleState<T>> {
        let mut out = Vec::with_capacity(ztilde.len());
        for (i, br) in self.branches.iter().enumerate() {
            let mut cache = trace.as_ref().map(|_| Vec::new());
            out.push(self.chain_forward(&br.post, ztilde.branch(i), ctx, i, cache.as_mut())?);
            if let Some(t) = trace.as_deref_mut() {
                t.post.push(cache.unwrap_or_default());
            }
        }
        MultiscaleState::new(out)
    }

    /// `ẑ = f̂(z)`: the residual block on every branch.
    pub fn residual_stage(&self, ctx: &ModelContext<T>, z: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        z.check_shapes(&self.cfg.state_shapes(ctx.batch()))?;
        self.residual_stage_traced(ctx, z, None)
    }

    /// `z̃ = f̃(ẑ)`: cross-branch fusion.
    pub fn fusion_stage(&self, ctx: &ModelContext<T>, zhat: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        zhat.check_shapes(&self.cfg.state_shapes(ctx.batch()))?;
        self.fusion_stage_traced(ctx, zhat, None)
    }

    /// `z̄ = f̄(z̃)`: the post-fusion block on every branch.
    pub fn post_stage(&self, ctx: &ModelContext<T>, ztilde: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        ztilde.check_shapes(&self.cfg.state_shapes(ctx.batch()))?;
        self.post_stage_traced(ctx, ztilde, None)
    }

    /// Reverse pass through one evaluation; accumulates parameter
    /// cotangents into `grads` when given.
    fn backward(
        &self,
        ctx: &ModelContext<T>,
        trace: &ModelTrace<T>,
        v: &MultiscaleState<T>,
        mut grads: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<MultiscaleState<T>> {
        v.check_shapes(&self.cfg.state_shapes(ctx.batch()))?;
        let (skip1, mix1) = self.cfg.residual_mix();
        let (skip2, mix2) = self.cfg.fusion_mix();
        let slope = T::lit(self.cfg.slope());

        let mut g_tilde = Vec::with_capacity(v.len());
        for (i, br) in self.branches.iter().enumerate() {
            g_tilde.push(self.chain_backward(&br.post, &trace.post[i], v.branch(i).clone(), ctx, i, &mut grads)?);
        }

        let mut g_hat: Vec<Tensor<T>> = g_tilde.iter().map(|t| t.scale(T::lit(skip2))).collect();
        for (p, cache) in self.paths.iter().zip(&trace.paths) {
            let gy = g_tilde[p.out].scale(T::lit(mix2 * p.weight));
            let gx = self.chain_backward(&p.steps, cache, gy, ctx, p.input, &mut grads)?;
            g_hat[p.input].add_scaled(T::one(), &gx)?;
        }

        let mut out = Vec::with_capacity(v.len());
        for (i, br) in self.branches.iter().enumerate() {
            let g_n3 = scaled_relu_vjp(&trace.n3[i], slope, &g_hat[i])?;
            let g_m = self.step_backward(&Step::Norm(br.norm3), &trace.m[i], &g_n3, ctx, i, &mut grads)?;
            let g_g = g_m.scale(T::lit(mix1));
            let g_d = self.step_backward(&Step::Norm(br.norm2), &trace.d[i], &g_g, ctx, i, &mut grads)?;
            if i == 0 {
                if let Some(g) = grads.as_deref_mut() {
                    let w = self.params.get(self.inject.w);
                    let (gw, gb) = conv2d_param_vjp(&ctx.x, &g_d, w.shape(), self.inject.geom)?;
                    g[self.inject.w].add_scaled(T::one(), &gw)?;
                    g[self.inject.b].add_scaled(T::one(), &gb)?;
                }
            }
            let mut gz = self.chain_backward(&br.pre, &trace.pre[i], g_d, ctx, i, &mut grads)?;
            gz.add_scaled(T::lit(skip1), &g_m)?;
            out.push(gz);
        }
        MultiscaleState::new(out)
    }

    /// `f_θ(z; x)`.
    pub fn apply_f_theta(&self, ctx: &ModelContext<T>, z: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        self.forward(ctx, z, None)
    }

    /// Sign of every activation input in one evaluation of `f_θ` at `z`.
    /// `f_θ` is smooth in `z` and the parameters wherever this pattern is
    /// locally constant.
    pub fn activation_pattern(&self, ctx: &ModelContext<T>, z: &MultiscaleState<T>) -> Result<Vec<bool>> {
        let mut tr = ModelTrace {
            pre: vec![],
            d: vec![],
            m: vec![],
            n3: vec![],
            paths: vec![],
            post: vec![],
        };
        self.forward(ctx, z, Some(&mut tr))?;
        let mut out = Vec::new();
        let mut push = |steps: &[Step], inputs: &[Tensor<T>]| {
            for (s, x) in steps.iter().zip(inputs) {
                if matches!(s, Step::Act) {
                    out.extend(x.data().iter().map(|v| *v > T::zero()));
                }
            }
        };
        for (i, br) in self.branches.iter().enumerate() {
            push(&br.pre, &tr.pre[i]);
            push(&br.post, &tr.post[i]);
        }
        for (p, cache) in self.paths.iter().zip(&tr.paths) {
            push(&p.steps, cache);
        }
        for n3 in &tr.n3 {
            out.extend(n3.data().iter().map(|v| *v > T::zero()));
        }
        Ok(out)
    }

    /// Global average pool of every branch, concatenated: `(B, ΣCᵢ)`.
    pub fn pool(&self, z: &MultiscaleState<T>) -> Result<Tensor<T>> {
        let batch = z.batch();
        let feat: usize = self.cfg.channels.iter().sum();
        let mut out = Tensor::zeros(&[batch, feat]);
        let mut off = 0;
        for t in z.branches() {
            let (_, c, h, w) = t.dims4()?;
            let inv = T::lit(1.0 / (h * w) as f64);
            for s in 0..batch {
                let src = t.sample(s);
                let dst = out.sample_mut(s);
                for ch in 0..c {
                    let sum: T = src[ch * h * w..(ch + 1) * h * w].iter().copied().sum();
                    dst[off + ch] = sum * inv;
                }
            }
            off += c;
        }
        if off != feat {
            return Err(Error::shape(format!("{off} pooled channels, configured {feat}")));
        }
        Ok(out)
    }

    /// Affine head on the pooled features: `(B, classes)` logits.
    pub fn classify(&self, z: &MultiscaleState<T>) -> Result<Tensor<T>> {
        let p = self.pool(z)?;
        let w = self.params.get(self.head_w);
        let b = self.params.get(self.head_b);
        let (k, feat) = (self.cfg.classes, p.sample_len());
        Ok(Tensor::from_fn(&[p.batch(), k], |idx| {
            let (s, c) = (idx / k, idx % k);
            crate::tensors::dot(&w.data()[c * feat..(c + 1) * feat], p.sample(s)) + b.data()[c]
        }))
    }

    /// Reverse of [`Model::classify`]: `(∂ℓ/∂z, ∂ℓ/∂W, ∂ℓ/∂b)`.
    pub fn classify_vjp(
        &self,
        z: &MultiscaleState<T>,
        g_logits: &Tensor<T>,
    ) -> Result<(MultiscaleState<T>, Tensor<T>, Tensor<T>)> {
        let p = self.pool(z)?;
        let w = self.params.get(self.head_w);
        let (k, feat) = (self.cfg.classes, p.sample_len());
        if g_logits.shape() != [p.batch(), k] {
            return Err(Error::shape(format!("logit cotangent {:?}", g_logits.shape())));
        }
        let mut gw = Tensor::zeros(&[k, feat]);
        let mut gb = Tensor::zeros(&[k]);
        let mut gp = Tensor::<T>::zeros(&[p.batch(), feat]);
        for s in 0..p.batch() {
            let gl = g_logits.sample(s);
            for c in 0..k {
                gb.data_mut()[c] += gl[c];
                for f in 0..feat {
                    gw.data_mut()[c * feat + f] += gl[c] * p.sample(s)[f];
                    gp.data_mut()[s * feat + f] += gl[c] * w.data()[c * feat + f];
                }
            }
        }
        let mut gz = z.zeros_like();
        let mut off = 0;
        for t in gz.branches_mut() {
            let (_, c, h, wd) = t.dims4()?;
            let inv = T::lit(1.0 / (h * wd) as f64);
            for s in 0..p.batch() {
                let dst = t.sample_mut(s);
                for ch in 0..c {
                    let v = gp.sample(s)[off + ch] * inv;
                    dst[ch * h * wd..(ch + 1) * h * wd].iter_mut().for_each(|d| *d = v);
                }
            }
            off += c;
        }
        Ok((gz, gw, gb))
    }
}

/// Mean softmax cross-entropy, its logit cotangent and the count of
/// correct argmax predictions.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, usize)> {
    let batch = logits.batch();
    if labels.len() != batch {
        return Err(Error::shape(format!("{} labels for {batch} logit rows", labels.len())));
    }
    let k = logits.sample_len();
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    let mut correct = 0;
    let inv_b = T::lit(1.0 / batch as f64);
    for (s, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.sample(s);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += (z.ln() + mx - row[y]) * inv_b;
        let argmax = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        if argmax == y {
            correct += 1;
        }
        let g = grad.sample_mut(s);
        for c in 0..k {
            let p = exps[c] / z;
            g[c] = (p - if c == y { T::one() } else { T::zero() }) * inv_b;
        }
    }
    Ok((loss, grad, correct))
}

impl<T: Real> EquilibriumMap<T> for Model<T> {
    type Context = ModelContext<T>;
    type Trace = ModelTrace<T>;

    fn initial_state(&self, ctx: &ModelContext<T>) -> Result<MultiscaleState<T>> {
        MultiscaleState::new(
            self.cfg
                .state_shapes(ctx.batch())
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
        )
    }

    fn apply(&self, ctx: &ModelContext<T>, z: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        self.forward(ctx, z, None)
    }

    fn linearize(&self, ctx: &ModelContext<T>, z: &MultiscaleState<T>) -> Result<ModelTrace<T>> {
        let mut t = ModelTrace {
            pre: vec![],
            d: vec![],
            m: vec![],
            n3: vec![],
            paths: vec![],
            post: vec![],
        };
        self.forward(ctx, z, Some(&mut t))?;
        Ok(t)
    }

    fn vjp_state(&self, ctx: &ModelContext<T>, trace: &ModelTrace<T>, v: &MultiscaleState<T>) -> Result<MultiscaleState<T>> {
        self.backward(ctx, trace, v, None)
    }

    fn vjp_params(&self, ctx: &ModelContext<T>, trace: &ModelTrace<T>, v: &MultiscaleState<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.params.zeros_like();
        self.backward(ctx, trace, v, Some(&mut grads))?;
        Ok(grads)
    }

    fn certificate(&self) -> Option<f64> {
        Some(self.bound(Mode::Train).overall)
    }
}
