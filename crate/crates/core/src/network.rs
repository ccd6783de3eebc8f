//! The two-branch embedding network.
//!
//! Post branch: text features and visual features each pass through a
//! fully-connected ReLU layer, are concatenated, and fused by another
//! fully-connected ReLU layer into the post descriptor. User branch: the
//! bag-of-clusters histogram passes through a stack of fully-connected ReLU
//! layers into the user descriptor. Each descriptor then runs through its own
//! embedding stack (linear layers with ReLU and inverted dropout between them),
//! batch normalization right after the last linear layer, and L2
//! normalization. Both branches end in the same embedding dimension.
//!
//! All passes are batched: one sample per matrix row. Gradients are derived by
//! hand per layer; [`backward`] consumes the traces recorded by the forward
//! passes.

use serde::{Deserialize, Serialize};

use crate::encoding::{EncoderConfig, PostDescriptorInput, UserDescriptor};
use crate::error::{Error, Result};
use crate::numkernel::{dot, matmul, matmul_nt, matmul_tn, DenseMatrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Width of the text sub-branch layer.
    pub text_hidden: usize,
    /// Width of the visual sub-branch layer.
    pub visual_hidden: usize,
    /// Width of the post and user descriptors.
    pub descriptor_dim: usize,
    /// Fully-connected layers from user histogram to user descriptor.
    pub user_layers: usize,
    /// Linear layers per embedding stack.
    pub embed_layers: usize,
    pub embed_hidden: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            text_hidden: 128,
            visual_hidden: 128,
            descriptor_dim: 64,
            user_layers: 2,
            embed_layers: 2,
            embed_hidden: 64,
            embedding_dim: 64,
            dropout: 0.5,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.text_hidden,
            self.visual_hidden,
            self.descriptor_dim,
            self.user_layers,
            self.embed_layers,
            self.embed_hidden,
            self.embedding_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("network widths and depths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_momentum must lie in [0, 1) and bn_eps be positive".into()));
        }
        Ok(())
    }
}

/// Input widths fixed by the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub text: usize,
    pub visual: usize,
    pub user: usize,
    pub learnable_no_image: bool,
}

impl From<&EncoderConfig> for InputDims {
    fn from(cfg: &EncoderConfig) -> Self {
        Self {
            text: cfg.text_dim,
            visual: cfg.visual_dim,
            user: cfg.user_clusters,
            learnable_no_image: cfg.learnable_no_image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    NoImage,
}

impl TensorKind {
    /// Whether weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Weight | TensorKind::BnScale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub weight: DenseMatrix,
    /// `1 × out`.
    pub bias: DenseMatrix,
}

impl Dense {
    fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: DenseMatrix::he_uniform(input, output, rng),
            bias: DenseMatrix::zeros(1, output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: DenseMatrix::zeros(1, self.bias.cols()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = matmul(x, &self.weight)?;
        z.add_row_broadcast(self.bias.data())?;
        Ok(z)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x` when asked.
    fn backward(&self, x: &DenseMatrix, dz: &DenseMatrix, grad: &mut Dense, want_input: bool) -> Result<Option<DenseMatrix>> {
        grad.weight.axpy(1.0, &matmul_tn(x, dz)?)?;
        for (g, s) in grad.bias.data_mut().iter_mut().zip(dz.column_sums()) {
            *g += s;
        }
        if want_input {
            Ok(Some(matmul_nt(dz, &self.weight)?))
        } else {
            Ok(None)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: DenseMatrix,
    pub shift: DenseMatrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            scale: DenseMatrix::new(1, dim, vec![1.0; dim]).expect("finite"),
            shift: DenseMatrix::zeros(1, dim),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    fn zeros_like(&self) -> Self {
        let d = self.scale.cols();
        Self {
            scale: DenseMatrix::zeros(1, d),
            shift: DenseMatrix::zeros(1, d),
            running_mean: vec![0.0; d],
            running_var: vec![0.0; d],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStack {
    pub layers: Vec<Dense>,
    pub norm: BatchNorm,
}

impl EmbeddingStack {
    fn init(input: usize, cfg: &NetworkConfig, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.embed_layers);
        let mut width = input;
        for i in 0..cfg.embed_layers {
            let out = if i + 1 == cfg.embed_layers { cfg.embedding_dim } else { cfg.embed_hidden };
            layers.push(Dense::init(width, out, rng));
            width = out;
        }
        Self {
            layers,
            norm: BatchNorm::new(cfg.embedding_dim),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            norm: self.norm.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostBranch {
    pub text_fc: Dense,
    pub visual_fc: Dense,
    pub fuse_fc: Dense,
    /// Learned replacement for missing visual features, `1 × visual_dim`.
    pub no_image: Option<DenseMatrix>,
    pub embed: EmbeddingStack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserBranch {
    pub fc: Vec<Dense>,
    pub embed: EmbeddingStack,
}

/// All learnable state plus batch-normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub inputs: InputDims,
    pub post: PostBranch,
    pub user: UserBranch,
}

/// Gradients share the parameter layout; running statistics stay zero.
pub type ParamGradients = NetworkParams;

impl NetworkParams {
    /// He-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(cfg: &NetworkConfig, inputs: InputDims, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if inputs.text == 0 || inputs.visual == 0 || inputs.user == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        let post = PostBranch {
            text_fc: Dense::init(inputs.text, cfg.text_hidden, rng),
            visual_fc: Dense::init(inputs.visual, cfg.visual_hidden, rng),
            fuse_fc: Dense::init(cfg.text_hidden + cfg.visual_hidden, cfg.descriptor_dim, rng),
            no_image: inputs
                .learnable_no_image
                .then(|| DenseMatrix::zeros(1, inputs.visual)),
            embed: EmbeddingStack::init(cfg.descriptor_dim, cfg, rng),
        };
        let mut fc = Vec::with_capacity(cfg.user_layers);
        let mut width = inputs.user;
        for _ in 0..cfg.user_layers {
            fc.push(Dense::init(width, cfg.descriptor_dim, rng));
            width = cfg.descriptor_dim;
        }
        let user = UserBranch {
            fc,
            embed: EmbeddingStack::init(cfg.descriptor_dim, cfg, rng),
        };
        Ok(Self {
            config: cfg.clone(),
            inputs,
            post,
            user,
        })
    }

    pub fn zeros_like(&self) -> ParamGradients {
        Self {
            config: self.config.clone(),
            inputs: self.inputs,
            post: PostBranch {
                text_fc: self.post.text_fc.zeros_like(),
                visual_fc: self.post.visual_fc.zeros_like(),
                fuse_fc: self.post.fuse_fc.zeros_like(),
                no_image: self.post.no_image.as_ref().map(|m| DenseMatrix::zeros(m.rows(), m.cols())),
                embed: self.post.embed.zeros_like(),
            },
            user: UserBranch {
                fc: self.user.fc.iter().map(Dense::zeros_like).collect(),
                embed: self.user.embed.zeros_like(),
            },
        }
    }

    /// Learnable tensors in checkpoint order: post text, visual and fusion
    /// layers, the post no-image vector when present, the post embedding
    /// stack and its batch-norm scale/shift, then the user layers, the user
    /// embedding stack and its batch-norm scale/shift. Weights precede biases.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &DenseMatrix)> {
        let mut out = Vec::new();
        fn dense<'a>(out: &mut Vec<(String, TensorKind, &'a DenseMatrix)>, name: String, d: &'a Dense) {
            out.push((format!("{name}.weight"), TensorKind::Weight, &d.weight));
            out.push((format!("{name}.bias"), TensorKind::Bias, &d.bias));
        }
        dense(&mut out, "post.text_fc".into(), &self.post.text_fc);
        dense(&mut out, "post.visual_fc".into(), &self.post.visual_fc);
        dense(&mut out, "post.fuse_fc".into(), &self.post.fuse_fc);
        if let Some(v) = &self.post.no_image {
            out.push(("post.no_image".into(), TensorKind::NoImage, v));
        }
        for (i, l) in self.post.embed.layers.iter().enumerate() {
            dense(&mut out, format!("post.embed.{i}"), l);
        }
        out.push(("post.bn.scale".into(), TensorKind::BnScale, &self.post.embed.norm.scale));
        out.push(("post.bn.shift".into(), TensorKind::BnShift, &self.post.embed.norm.shift));
        for (i, l) in self.user.fc.iter().enumerate() {
            dense(&mut out, format!("user.fc.{i}"), l);
        }
        for (i, l) in self.user.embed.layers.iter().enumerate() {
            dense(&mut out, format!("user.embed.{i}"), l);
        }
        out.push(("user.bn.scale".into(), TensorKind::BnScale, &self.user.embed.norm.scale));
        out.push(("user.bn.shift".into(), TensorKind::BnShift, &self.user.embed.norm.shift));
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        let p = &mut self.post;
        for d in [&mut p.text_fc, &mut p.visual_fc, &mut p.fuse_fc] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        if let Some(v) = p.no_image.as_mut() {
            out.push(v);
        }
        for d in p.embed.layers.iter_mut() {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut p.embed.norm.scale);
        out.push(&mut p.embed.norm.shift);
        let u = &mut self.user;
        for d in u.fc.iter_mut().chain(u.embed.layers.iter_mut()) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut u.embed.norm.scale);
        out.push(&mut u.embed.norm.shift);
        out
    }

    /// Running statistics: post mean, post variance, user mean, user variance.
    pub fn running_stats(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("post.bn.running_mean", &self.post.embed.norm.running_mean),
            ("post.bn.running_var", &self.post.embed.norm.running_var),
            ("user.bn.running_mean", &self.user.embed.norm.running_mean),
            ("user.bn.running_var", &self.user.embed.norm.running_var),
        ]
    }

    pub fn running_stats_mut(&mut self) -> [&mut Vec<f64>; 4] {
        let (p, u) = (&mut self.post.embed.norm, &mut self.user.embed.norm);
        [&mut p.running_mean, &mut p.running_var, &mut u.running_mean, &mut u.running_var]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
            && self.running_stats().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Folds the batch statistics recorded in a train-mode trace into the
    /// running averages: `running ← momentum·running + (1 − momentum)·batch`,
    /// with the unbiased batch variance.
    pub fn update_running_stats(&mut self, post: Option<&PostTrace>, user: Option<&UserTrace>) {
        let m = self.config.bn_momentum;
        let fold = |norm: &mut BatchNorm, cache: &BnCache| {
            if !cache.train {
                return;
            }
            let n = cache.batch as f64;
            let correction = if cache.batch > 1 { n / (n - 1.0) } else { 1.0 };
            for j in 0..norm.running_mean.len() {
                norm.running_mean[j] = m * norm.running_mean[j] + (1.0 - m) * cache.mean[j];
                norm.running_var[j] = m * norm.running_var[j] + (1.0 - m) * cache.var[j] * correction;
            }
        };
        if let Some(t) = post {
            fold(&mut self.post.embed.norm, &t.embed.bn);
        }
        if let Some(t) = user {
            fold(&mut self.user.embed.norm, &t.embed.bn);
        }
    }
}

#[derive(Clone, Debug)]
struct ReluTrace {
    input: DenseMatrix,
    pre: DenseMatrix,
    mask: Option<DenseMatrix>,
}

#[derive(Clone, Debug)]
struct BnCache {
    train: bool,
    batch: usize,
    x_hat: DenseMatrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EmbedTrace {
    hidden: Vec<ReluTrace>,
    last_input: DenseMatrix,
    bn: BnCache,
    norms: Vec<f64>,
    output: DenseMatrix,
}

/// Everything the backward pass of one post batch needs.
#[derive(Clone, Debug)]
pub struct PostTrace {
    text: ReluTrace,
    visual: ReluTrace,
    fuse: ReluTrace,
    missing_image: Vec<bool>,
    embed: EmbedTrace,
}

#[derive(Clone, Debug)]
pub struct UserTrace {
    fc: Vec<ReluTrace>,
    embed: EmbedTrace,
}

impl PostTrace {
    pub fn batch(&self) -> usize {
        self.embed.output.rows()
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embed.output
    }
}

impl UserTrace {
    pub fn batch(&self) -> usize {
        self.embed.output.rows()
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embed.output
    }
}

fn relu_layer(layer: &Dense, input: DenseMatrix) -> Result<(DenseMatrix, ReluTrace)> {
    let pre = layer.forward(&input)?;
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    Ok((act, ReluTrace { input, pre, mask: None }))
}

/// Inverted dropout: kept units are scaled by `1 / (1 − rate)`.
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> DenseMatrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    DenseMatrix::new(rows, cols, data).expect("finite mask")
}

fn relu_backward_in_place(trace: &ReluTrace, grad: &mut DenseMatrix) {
    if let Some(mask) = &trace.mask {
        for (g, m) in grad.data_mut().iter_mut().zip(mask.data()) {
            *g *= m;
        }
    }
    for (g, z) in grad.data_mut().iter_mut().zip(trace.pre.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn embed_forward(
    stack: &EmbeddingStack,
    cfg: &NetworkConfig,
    input: DenseMatrix,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(DenseMatrix, EmbedTrace)> {
    let n = input.rows();
    let last = stack.layers.len() - 1;
    let mut hidden = Vec::with_capacity(last);
    let mut h = input;
    for layer in &stack.layers[..last] {
        let (mut act, mut trace) = relu_layer(layer, h)?;
        if mode == Mode::Train && cfg.dropout > 0.0 {
            let mask = dropout_mask(act.rows(), act.cols(), cfg.dropout, rng);
            for (a, m) in act.data_mut().iter_mut().zip(mask.data()) {
                *a *= m;
            }
            trace.mask = Some(mask);
        }
        hidden.push(trace);
        h = act;
    }
    let z = stack.layers[last].forward(&h)?;
    let dim = z.cols();

    let norm = &stack.norm;
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Degenerate(
                    "train-mode batch normalization needs at least 2 samples".into(),
                ));
            }
            let mean: Vec<f64> = z.column_sums().iter().map(|s| s / n as f64).collect();
            let mut var = vec![0.0; dim];
            for r in 0..n {
                for (j, x) in z.row(r).iter().enumerate() {
                    var[j] += (x - mean[j]) * (x - mean[j]);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var)
        }
        Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();
    let mut x_hat = z;
    let mut y = DenseMatrix::zeros(n, dim);
    for r in 0..n {
        for j in 0..dim {
            let xh = (x_hat.get(r, j) - mean[j]) * inv_std[j];
            x_hat.set(r, j, xh);
            y.set(r, j, norm.scale.data()[j] * xh + norm.shift.data()[j]);
        }
    }

    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = y.row_mut(r);
        let len = dot(row, row).sqrt();
        if !len.is_finite() {
            return Err(Error::Numeric(format!("embedding row {r} has norm {len} before L2 normalization")));
        }
        if len == 0.0 {
            // No direction to keep: fall back to a fixed unit vector, with
            // zero gradient (see `embed_backward`).
            let c = 1.0 / (dim as f64).sqrt();
            row.iter_mut().for_each(|x| *x = c);
        } else {
            row.iter_mut().for_each(|x| *x /= len);
        }
        norms.push(len);
    }
    let trace = EmbedTrace {
        hidden,
        last_input: h,
        bn: BnCache {
            train: mode == Mode::Train,
            batch: n,
            x_hat,
            inv_std,
            mean,
            var,
        },
        norms,
        output: y.clone(),
    };
    Ok((y, trace))
}

/// Returns the gradient with respect to the stack input.
fn embed_backward(stack: &EmbeddingStack, trace: &EmbedTrace, upstream: &DenseMatrix, grad: &mut EmbeddingStack) -> Result<DenseMatrix> {
    let e = &trace.output;
    let (n, dim) = e.shape();
    if upstream.shape() != e.shape() {
        return Err(Error::State(format!(
            "upstream gradient {} does not match recorded batch {}",
            upstream.shape_str(),
            e.shape_str()
        )));
    }
    // L2 normalization: ∂e/∂y = (I − e eᵀ) / ‖y‖, zero for a zero row
    let mut dy = DenseMatrix::zeros(n, dim);
    for r in 0..n {
        if trace.norms[r] == 0.0 {
            continue;
        }
        let (er, gr) = (e.row(r), upstream.row(r));
        let proj = dot(er, gr);
        for (j, d) in dy.row_mut(r).iter_mut().enumerate() {
            *d = (gr[j] - er[j] * proj) / trace.norms[r];
        }
    }

    let bn = &trace.bn;
    let scale = stack.norm.scale.data();
    let mut dz = DenseMatrix::zeros(n, dim);
    for j in 0..dim {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for r in 0..n {
            sum_g += dy.get(r, j);
            sum_gx += dy.get(r, j) * bn.x_hat.get(r, j);
        }
        grad.norm.scale.data_mut()[j] += sum_gx;
        grad.norm.shift.data_mut()[j] += sum_g;
        for r in 0..n {
            let dxh = dy.get(r, j) * scale[j];
            let v = if bn.train {
                bn.inv_std[j] / n as f64
                    * (n as f64 * dxh - scale[j] * sum_g - bn.x_hat.get(r, j) * scale[j] * sum_gx)
            } else {
                dxh * bn.inv_std[j]
            };
            dz.set(r, j, v);
        }
    }

    let last = stack.layers.len() - 1;
    let mut g = stack.layers[last]
        .backward(&trace.last_input, &dz, &mut grad.layers[last], true)?
        .expect("input gradient requested");
    for i in (0..last).rev() {
        let t = &trace.hidden[i];
        relu_backward_in_place(t, &mut g);
        g = stack.layers[i]
            .backward(&t.input, &g, &mut grad.layers[i], true)?
            .expect("input gradient requested");
    }
    Ok(g)
}

fn check_width(found: usize, expected: usize, what: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::shape(found, expected, what));
    }
    Ok(())
}

/// Embeds a batch of posts. Row `i` of the result is the unit-norm embedding
/// of `inputs[i]`.
pub fn forward_posts(params: &NetworkParams, inputs: &[&PostDescriptorInput], mode: Mode, rng: &mut Rng) -> Result<(DenseMatrix, PostTrace)> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Degenerate("empty post batch".into()));
    }
    let (td, vd) = (params.inputs.text, params.inputs.visual);
    let mut text = Vec::with_capacity(n * td);
    let mut visual = Vec::with_capacity(n * vd);
    let mut missing = Vec::with_capacity(n);
    for inp in inputs {
        check_width(inp.text_vector.dim(), td, "post text vector vs network text input")?;
        check_width(inp.visual_vector.len(), vd, "post visual vector vs network visual input")?;
        text.extend_from_slice(&inp.text_vector.values);
        match (&params.post.no_image, inp.has_image) {
            (Some(learned), false) => visual.extend_from_slice(learned.data()),
            _ => visual.extend_from_slice(&inp.visual_vector),
        }
        missing.push(!inp.has_image);
    }
    let p = &params.post;
    let (t_act, t_trace) = relu_layer(&p.text_fc, DenseMatrix::new(n, td, text)?)?;
    let (v_act, v_trace) = relu_layer(&p.visual_fc, DenseMatrix::new(n, vd, visual)?)?;
    let fused_in = DenseMatrix::hstack(&t_act, &v_act)?;
    let (descriptor, f_trace) = relu_layer(&p.fuse_fc, fused_in)?;
    let (out, embed) = embed_forward(&p.embed, &params.config, descriptor, mode, rng)?;
    Ok((
        out,
        PostTrace {
            text: t_trace,
            visual: v_trace,
            fuse: f_trace,
            missing_image: missing,
            embed,
        },
    ))
}

pub fn forward_users(params: &NetworkParams, descs: &[&UserDescriptor], mode: Mode, rng: &mut Rng) -> Result<(DenseMatrix, UserTrace)> {
    let n = descs.len();
    if n == 0 {
        return Err(Error::Degenerate("empty user batch".into()));
    }
    let ud = params.inputs.user;
    let mut data = Vec::with_capacity(n * ud);
    for d in descs {
        check_width(d.values.len(), ud, "user descriptor vs network user input")?;
        data.extend_from_slice(&d.values);
    }
    let mut h = DenseMatrix::new(n, ud, data)?;
    let mut fc = Vec::with_capacity(params.user.fc.len());
    for layer in &params.user.fc {
        let (act, trace) = relu_layer(layer, h)?;
        fc.push(trace);
        h = act;
    }
    let (out, embed) = embed_forward(&params.user.embed, &params.config, h, mode, rng)?;
    Ok((out, UserTrace { fc, embed }))
}

/// Single-post convenience wrapper around [`forward_posts`]. Train mode needs
/// a batch, so in practice this is used with [`Mode::Eval`].
pub fn embed_post(params: &NetworkParams, input: &PostDescriptorInput, mode: Mode, rng: &mut Rng) -> Result<(Vec<f64>, PostTrace)> {
    let (out, trace) = forward_posts(params, &[input], mode, rng)?;
    Ok((out.into_data(), trace))
}

pub fn embed_user(params: &NetworkParams, desc: &UserDescriptor, mode: Mode, rng: &mut Rng) -> Result<(Vec<f64>, UserTrace)> {
    let (out, trace) = forward_users(params, &[desc], mode, rng)?;
    Ok((out.into_data(), trace))
}

fn check_trace_dense(layer: &Dense, trace: &ReluTrace, name: &str) -> Result<()> {
    if trace.input.cols() != layer.in_dim() || trace.pre.cols() != layer.out_dim() {
        return Err(Error::State(format!(
            "{name}: trace {}→{} does not match parameters {}x{}",
            trace.input.cols(),
            trace.pre.cols(),
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    Ok(())
}

fn check_embed_trace(stack: &EmbeddingStack, trace: &EmbedTrace, name: &str) -> Result<()> {
    if trace.hidden.len() + 1 != stack.layers.len() {
        return Err(Error::State(format!("{name}: trace depth does not match parameters")));
    }
    for (layer, t) in stack.layers.iter().zip(&trace.hidden) {
        check_trace_dense(layer, t, name)?;
    }
    let last = stack.layers.last().expect("non-empty stack");
    if trace.last_input.cols() != last.in_dim() || trace.output.cols() != last.out_dim() {
        return Err(Error::State(format!("{name}: final layer trace does not match parameters")));
    }
    Ok(())
}

/// Accumulates post-branch gradients for `upstream = ∂L/∂embeddings`.
pub fn backward_posts(params: &NetworkParams, trace: &PostTrace, upstream: &DenseMatrix, grad: &mut ParamGradients) -> Result<()> {
    let p = &params.post;
    check_trace_dense(&p.text_fc, &trace.text, "post.text_fc")?;
    check_trace_dense(&p.visual_fc, &trace.visual, "post.visual_fc")?;
    check_trace_dense(&p.fuse_fc, &trace.fuse, "post.fuse_fc")?;
    check_embed_trace(&p.embed, &trace.embed, "post.embed")?;
    if p.no_image.is_some() != grad.post.no_image.is_some() {
        return Err(Error::State("gradient buffer layout differs from parameters".into()));
    }

    let mut g = embed_backward(&p.embed, &trace.embed, upstream, &mut grad.post.embed)?;
    relu_backward_in_place(&trace.fuse, &mut g);
    let g_fused = p
        .fuse_fc
        .backward(&trace.fuse.input, &g, &mut grad.post.fuse_fc, true)?
        .expect("input gradient requested");
    let (mut g_text, mut g_vis) = g_fused.hsplit(p.text_fc.out_dim());
    relu_backward_in_place(&trace.text, &mut g_text);
    p.text_fc.backward(&trace.text.input, &g_text, &mut grad.post.text_fc, false)?;
    relu_backward_in_place(&trace.visual, &mut g_vis);
    let want_visual = p.no_image.is_some() && trace.missing_image.iter().any(|&m| m);
    let g_in = p
        .visual_fc
        .backward(&trace.visual.input, &g_vis, &mut grad.post.visual_fc, want_visual)?;
    if let (Some(g_in), Some(g_no_image)) = (g_in, grad.post.no_image.as_mut()) {
        for (r, _) in trace.missing_image.iter().enumerate().filter(|(_, &m)| m) {
            for (dst, src) in g_no_image.data_mut().iter_mut().zip(g_in.row(r)) {
                *dst += src;
            }
        }
    }
    Ok(())
}

pub fn backward_users(params: &NetworkParams, trace: &UserTrace, upstream: &DenseMatrix, grad: &mut ParamGradients) -> Result<()> {
    let u = &params.user;
    if trace.fc.len() != u.fc.len() {
        return Err(Error::State("user trace depth does not match parameters".into()));
    }
    for (i, (layer, t)) in u.fc.iter().zip(&trace.fc).enumerate() {
        check_trace_dense(layer, t, &format!("user.fc.{i}"))?;
    }
    check_embed_trace(&u.embed, &trace.embed, "user.embed")?;
    let mut g = embed_backward(&u.embed, &trace.embed, upstream, &mut grad.user.embed)?;
    for i in (0..u.fc.len()).rev() {
        relu_backward_in_place(&trace.fc[i], &mut g);
        match u.fc[i].backward(&trace.fc[i].input, &g, &mut grad.user.fc[i], i > 0)? {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(())
}

/// Gradients of every parameter given the upstream gradients of both
/// branches' embeddings.
pub fn backward(
    params: &NetworkParams,
    post_trace: &PostTrace,
    post_upstream: &DenseMatrix,
    user_trace: &UserTrace,
    user_upstream: &DenseMatrix,
) -> Result<ParamGradients> {
    let mut grad = params.zeros_like();
    backward_posts(params, post_trace, post_upstream, &mut grad)?;
    backward_users(params, user_trace, user_upstream, &mut grad)?;
    Ok(grad)
}
