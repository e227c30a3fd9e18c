//! 3D split-attention residual network.
//!
//! Layout: a stem (3x3x3 conv with stride (1,2,2), batchnorm, relu, 3x3x3 max
//! pool stride 2) followed by four stages of bottleneck blocks and a global
//! average pool feeding a dense classifier. Every bottleneck's 3x3x3 stage is
//! a split-attention unit; the first block of stages 2 to 4 halves the spatial
//! extents, pooling before the strided path's final conv and using an
//! average-pool-then-projection shortcut.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Mode, RunningStats, Tape, Tensor, TensorError, TensorId};

const BN_MOMENTUM: f32 = 0.1;
const BN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    InvalidConfig(String),
    #[error("{stage}: {source}")]
    Forward {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("input must be [N, {expect_c}, D, H, W], got {got:?}")]
    BadInput { expect_c: usize, got: Vec<usize> },
    #[error("no parameter or state entry named {0:?}")]
    NoSuchEntry(String),
    #[error("entry {name}: expected {expect} values, got {got}")]
    EntrySize {
        name: String,
        expect: usize,
        got: usize,
    },
}

fn at_stage<T>(stage: &str, r: Result<T, TensorError>) -> Result<T, ModelError> {
    r.map_err(|source| ModelError::Forward { stage: stage.to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_blocks: [usize; 4],
    pub stem_channels: usize,
    pub stage_widths: [usize; 4],
    pub radix: usize,
    pub cardinality: usize,
    pub bottleneck_expansion: usize,
    pub num_classes: usize,
    /// Nominal (C, D, H, W) training input; forward accepts any batch whose
    /// extents survive the downsampling chain.
    pub input_shape: (usize, usize, usize, usize),
    /// Lower bound on the attention bottleneck width inside each unit.
    pub inter_floor: usize,
}

impl ModelConfig {
    /// Full-scale depth-50 layout.
    pub fn resnest50_3d() -> Self {
        ModelConfig {
            stage_blocks: [3, 4, 6, 3],
            stem_channels: 64,
            stage_widths: [64, 128, 256, 512],
            radix: 2,
            cardinality: 1,
            bottleneck_expansion: 4,
            num_classes: 2,
            input_shape: (1, 64, 256, 256),
            inter_floor: 32,
        }
    }

    /// Small variant with the same topology, practical for CPU training.
    pub fn tiny3d() -> Self {
        ModelConfig {
            stage_blocks: [1, 1, 1, 1],
            stem_channels: 8,
            stage_widths: [8, 16, 32, 64],
            radix: 2,
            cardinality: 1,
            bottleneck_expansion: 4,
            num_classes: 2,
            input_shape: (1, 16, 32, 32),
            inter_floor: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |d: String| Err(ModelError::InvalidConfig(d));
        if self.radix < 1 || self.cardinality < 1 {
            return bad(format!(
                "radix {} and cardinality {} must be at least 1",
                self.radix, self.cardinality
            ));
        }
        if self.stem_channels == 0 || self.bottleneck_expansion == 0 || self.inter_floor == 0 {
            return bad("stem channels, expansion, and inter floor must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if self.input_shape.0 != 1 {
            return bad(format!("input channel count {} must be 1", self.input_shape.0));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return bad(format!("every stage needs at least one block: {:?}", self.stage_blocks));
        }
        let kr = self.radix * self.cardinality;
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 || w % kr != 0 {
                return bad(format!(
                    "stage {} width {w} must be a positive multiple of radix*cardinality = {kr}",
                    i + 1
                ));
            }
        }
        Ok(())
    }

    /// Attention bottleneck width for a unit of the given channel width:
    /// `max(width*radix/4, inter_floor)`, rounded up to a cardinality multiple
    /// so the grouped dense layers stay well-formed.
    pub fn inter_channels(&self, width: usize) -> usize {
        let raw = (width * self.radix / 4).max(self.inter_floor);
        raw.div_ceil(self.cardinality) * self.cardinality
    }
}

// ---------------------------------------------------------------------------
// Parameter storage and seeded construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Param {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    stride: [usize; 3],
    padding: [usize; 3],
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    w: usize,
    b: Option<usize>,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    conv: Conv,
    norm: Norm,
    fc1: DenseLayer,
    norm_fc: Norm,
    fc2: DenseLayer,
    width: usize,
    radix: usize,
    cardinality: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    splat: Splat,
    /// Downsample the attention output with a 3x3x3 stride-2 average pool.
    avd: bool,
    conv3: Conv,
    norm3: Norm,
    shortcut: Option<Shortcut>,
}

#[derive(Debug, Clone, Copy)]
struct Shortcut {
    pool: bool,
    conv: Conv,
    norm: Norm,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    bn: Vec<(String, RunningStats<f32>)>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new(), bn: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> usize {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    fn fan_in_weight(&mut self, name: String, shape: Vec<usize>) -> usize {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.push(name, shape, data)
    }

    fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Conv {
        let shape = vec![cout, cin / groups, kernel[0], kernel[1], kernel[2]];
        let w = self.fan_in_weight(format!("{prefix}.weight"), shape);
        Conv { w, stride, padding, groups }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Norm {
        let gamma = self.push(format!("{prefix}.gamma"), vec![channels], vec![1.0; channels]);
        let beta = self.push(format!("{prefix}.beta"), vec![channels], vec![0.0; channels]);
        self.bn.push((prefix.to_string(), RunningStats::new(channels)));
        Norm { gamma, beta, stats: self.bn.len() - 1 }
    }

    fn dense(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        bias: bool,
    ) -> DenseLayer {
        let w = self.fan_in_weight(format!("{prefix}.weight"), vec![cout, cin / groups]);
        let b = bias.then(|| self.push(format!("{prefix}.bias"), vec![cout], vec![0.0; cout]));
        DenseLayer { w, b, groups }
    }

    fn splat(&mut self, prefix: &str, cfg: &ModelConfig, width: usize) -> Splat {
        let (r, k) = (cfg.radix, cfg.cardinality);
        let inter = cfg.inter_channels(width);
        let conv = self.conv(
            &format!("{prefix}.conv"),
            width,
            width * r,
            [3; 3],
            [1; 3],
            [1; 3],
            k * r,
        );
        let norm = self.norm(&format!("{prefix}.bn"), width * r);
        // No bias on fc1: the following batchnorm's mean subtraction would
        // cancel it exactly, leaving a parameter with identically zero
        // gradient in training mode.
        let fc1 = self.dense(&format!("{prefix}.fc1"), width, inter, k, false);
        let norm_fc = self.norm(&format!("{prefix}.bn_fc"), inter);
        let fc2 = self.dense(&format!("{prefix}.fc2"), inter, width * r, k, true);
        Splat { conv, norm, fc1, norm_fc, fc2, width, radix: r, cardinality: k }
    }
}

// ---------------------------------------------------------------------------
// Forward-pass context
// ---------------------------------------------------------------------------

/// Per-forward state: leafs each parameter into the tape once and applies
/// layers with stage context attached to any shape error.
struct Ctx<'t, 'm> {
    tape: &'t mut Tape<f32>,
    params: &'m [Param],
    bn: &'m mut [(String, RunningStats<f32>)],
    ids: Vec<Option<TensorId>>,
    mode: Mode,
}

impl<'t, 'm> Ctx<'t, 'm> {
    fn new(
        tape: &'t mut Tape<f32>,
        params: &'m [Param],
        bn: &'m mut [(String, RunningStats<f32>)],
        mode: Mode,
    ) -> Self {
        let ids = vec![None; params.len()];
        Ctx { tape, params, bn, ids, mode }
    }

    fn p(&mut self, idx: usize) -> TensorId {
        *self.ids[idx].get_or_insert_with(|| {
            let p = &self.params[idx];
            self.tape.leaf(Tensor::new(p.shape.clone(), p.data.clone()).unwrap(), true)
        })
    }

    fn conv(&mut self, stage: &str, c: &Conv, x: TensorId) -> Result<TensorId, ModelError> {
        let w = self.p(c.w);
        at_stage(stage, self.tape.conv3d(x, w, None, c.stride, c.padding, c.groups))
    }

    fn norm(&mut self, stage: &str, n: &Norm, x: TensorId) -> Result<TensorId, ModelError> {
        let gamma = self.p(n.gamma);
        let beta = self.p(n.beta);
        let Ctx { tape, bn, mode, .. } = self;
        at_stage(
            stage,
            tape.batchnorm(x, gamma, beta, &mut bn[n.stats].1, *mode, BN_MOMENTUM, BN_EPS),
        )
    }

    fn dense(&mut self, stage: &str, d: &DenseLayer, x: TensorId) -> Result<TensorId, ModelError> {
        let w = self.p(d.w);
        let b = d.b.map(|i| self.p(i));
        at_stage(stage, self.tape.dense(x, w, b, d.groups))
    }

    fn splat(&mut self, prefix: &str, s: &Splat, x: TensorId) -> Result<SplatPass, ModelError> {
        let (r, width) = (s.radix, s.width);
        let conv = self.conv(&format!("{prefix} splat conv"), &s.conv, x)?;
        let normed = self.norm(&format!("{prefix} splat norm"), &s.norm, conv)?;
        let act = self.tape.relu(normed);
        let fused = if r == 1 {
            act
        } else {
            let mut acc = at_stage(
                &format!("{prefix} splat sum"),
                self.tape.channel_slice(act, 0, width),
            )?;
            for i in 1..r {
                let part = at_stage(
                    &format!("{prefix} splat sum"),
                    self.tape.channel_slice(act, i * width, (i + 1) * width),
                )?;
                acc = at_stage(&format!("{prefix} splat sum"), self.tape.add(acc, part))?;
            }
            acc
        };
        let pooled = at_stage(&format!("{prefix} splat pool"), self.tape.global_avg_pool(fused))?;
        let z = self.dense(&format!("{prefix} splat fc1"), &s.fc1, pooled)?;
        let zn = self.norm(&format!("{prefix} splat fc norm"), &s.norm_fc, z)?;
        let za = self.tape.relu(zn);
        let logits = self.dense(&format!("{prefix} splat fc2"), &s.fc2, za)?;
        let attention = at_stage(
            &format!("{prefix} splat attention"),
            self.tape.radix_softmax(logits, r, s.cardinality),
        )?;
        let output = if r == 1 {
            at_stage(
                &format!("{prefix} splat scale"),
                self.tape.scale_channels(fused, attention),
            )?
        } else {
            let mut acc = None;
            for i in 0..r {
                let stage = format!("{prefix} splat scale");
                let att_i =
                    at_stage(&stage, self.tape.channel_slice(attention, i * width, (i + 1) * width))?;
                let split_i =
                    at_stage(&stage, self.tape.channel_slice(act, i * width, (i + 1) * width))?;
                let scaled = at_stage(&stage, self.tape.scale_channels(split_i, att_i))?;
                acc = Some(match acc {
                    None => scaled,
                    Some(a) => at_stage(&stage, self.tape.add(a, scaled))?,
                });
            }
            acc.unwrap()
        };
        Ok(SplatPass { output, attention, fused })
    }

    fn block(&mut self, prefix: &str, blk: &Block, x: TensorId) -> Result<TensorId, ModelError> {
        let c1 = self.conv(&format!("{prefix} conv1"), &blk.conv1, x)?;
        let n1 = self.norm(&format!("{prefix} norm1"), &blk.norm1, c1)?;
        let a1 = self.tape.relu(n1);
        let mut main = self.splat(prefix, &blk.splat, a1)?.output;
        if blk.avd {
            main = at_stage(
                &format!("{prefix} avd pool"),
                self.tape.avg_pool3d_opts(main, [3; 3], [2; 3], [1; 3], true, false),
            )?;
        }
        let c3 = self.conv(&format!("{prefix} conv3"), &blk.conv3, main)?;
        let n3 = self.norm(&format!("{prefix} norm3"), &blk.norm3, c3)?;
        let residual = match &blk.shortcut {
            None => x,
            Some(sc) => {
                let mut s = x;
                if sc.pool {
                    s = at_stage(
                        &format!("{prefix} shortcut pool"),
                        self.tape.avg_pool3d_opts(s, [2; 3], [2; 3], [0; 3], false, true),
                    )?;
                }
                let sconv = self.conv(&format!("{prefix} shortcut conv"), &sc.conv, s)?;
                self.norm(&format!("{prefix} shortcut norm"), &sc.norm, sconv)?
            }
        };
        let sum = at_stage(&format!("{prefix} residual add"), self.tape.add(n3, residual))?;
        Ok(self.tape.relu(sum))
    }

    fn finish(self, logits: TensorId) -> ForwardPass {
        let param_ids = self
            .ids
            .into_iter()
            .map(|id| id.expect("every parameter participates in the forward pass"))
            .collect();
        ForwardPass { logits, param_ids }
    }
}

/// Intermediate handles of one split-attention application.
pub struct SplatPass {
    /// Attention-weighted sum over radix splits, same shape as the unit input.
    pub output: TensorId,
    /// Attention weights `[N, width*radix]` in radix-major channel order.
    pub attention: TensorId,
    /// Sum over radix splits before attention is applied.
    pub fused: TensorId,
}

/// Handles returned by a model forward pass. `param_ids[i]` is the tape leaf
/// of the i-th trainable parameter, aligned with the model's parameter order.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: TensorId,
    pub param_ids: Vec<TensorId>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    name_index: HashMap<String, usize>,
    bn: Vec<(String, RunningStats<f32>)>,
    stem_conv: Conv,
    stem_norm: Norm,
    stages: Vec<Vec<Block>>,
    head: DenseLayer,
}

/// Builds a network with fan-in-scaled uniform weights drawn from
/// `init_seed`, zero biases, and batchnorm gamma 1 / beta 0.
pub fn build_model(config: ModelConfig, init_seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut b = Builder::new(init_seed);
    let stem_conv = b.conv("stem.conv", 1, config.stem_channels, [3; 3], [1, 2, 2], [1; 3], 1);
    let stem_norm = b.norm("stem.bn", config.stem_channels);

    let mut stages = Vec::with_capacity(4);
    let mut in_ch = config.stem_channels;
    for s in 0..4 {
        let width = config.stage_widths[s];
        let out_ch = width * config.bottleneck_expansion;
        let mut blocks = Vec::with_capacity(config.stage_blocks[s]);
        for i in 0..config.stage_blocks[s] {
            let prefix = format!("stage{}.block{}", s + 1, i + 1);
            let strided = s > 0 && i == 0;
            let conv1 = b.conv(&format!("{prefix}.conv1"), in_ch, width, [1; 3], [1; 3], [0; 3], 1);
            let norm1 = b.norm(&format!("{prefix}.bn1"), width);
            let splat = b.splat(&format!("{prefix}.splat"), &config, width);
            let conv3 = b.conv(&format!("{prefix}.conv3"), width, out_ch, [1; 3], [1; 3], [0; 3], 1);
            let norm3 = b.norm(&format!("{prefix}.bn3"), out_ch);
            let shortcut = if i == 0 && (in_ch != out_ch || strided) {
                let conv = b.conv(
                    &format!("{prefix}.shortcut.conv"),
                    in_ch,
                    out_ch,
                    [1; 3],
                    [1; 3],
                    [0; 3],
                    1,
                );
                let norm = b.norm(&format!("{prefix}.shortcut.bn"), out_ch);
                Some(Shortcut { pool: strided, conv, norm })
            } else {
                None
            };
            blocks.push(Block { conv1, norm1, splat, avd: strided, conv3, norm3, shortcut });
            in_ch = out_ch;
        }
        stages.push(blocks);
    }
    let head = b.dense("head", in_ch, config.num_classes, 1, true);

    let name_index = b
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    Ok(Model {
        config,
        params: b.params,
        name_index,
        bn: b.bn,
        stem_conv,
        stem_norm,
        stages,
        head,
    })
}

fn forward_impl(
    tape: &mut Tape<f32>,
    input: Tensor<f32>,
    mode: Mode,
    expect_c: usize,
    params: &[Param],
    bn: &mut [(String, RunningStats<f32>)],
    stem_conv: &Conv,
    stem_norm: &Norm,
    stages: &[Vec<Block>],
    head: &DenseLayer,
) -> Result<ForwardPass, ModelError> {
    if input.rank() != 5 || input.shape()[1] != expect_c {
        return Err(ModelError::BadInput { expect_c, got: input.shape().to_vec() });
    }
    let mut ctx = Ctx::new(tape, params, bn, mode);
    let x = ctx.tape.leaf(input, false);
    let c = ctx.conv("stem conv", stem_conv, x)?;
    let n = ctx.norm("stem norm", stem_norm, c)?;
    let a = ctx.tape.relu(n);
    let mut x = at_stage("stem pool", ctx.tape.max_pool3d(a, [3; 3], [2; 3]))?;
    for (s, blocks) in stages.iter().enumerate() {
        for (i, blk) in blocks.iter().enumerate() {
            x = ctx.block(&format!("stage{} block{}", s + 1, i + 1), blk, x)?;
        }
    }
    let pooled = at_stage("head pool", ctx.tape.global_avg_pool(x))?;
    let logits = ctx.dense("head", head, pooled)?;
    Ok(ctx.finish(logits))
}

impl Model {
    /// Training-mode forward: batchnorm uses batch statistics and updates the
    /// model's running estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<f32>,
        input: Tensor<f32>,
    ) -> Result<ForwardPass, ModelError> {
        forward_impl(
            tape,
            input,
            Mode::Train,
            self.config.input_shape.0,
            &self.params,
            &mut self.bn,
            &self.stem_conv,
            &self.stem_norm,
            &self.stages,
            &self.head,
        )
    }

    /// Eval-mode forward: batchnorm uses running statistics and the model is
    /// left untouched, so concurrent readers may share it.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<f32>,
        input: Tensor<f32>,
    ) -> Result<ForwardPass, ModelError> {
        let mut bn = self.bn.clone();
        forward_impl(
            tape,
            input,
            Mode::Eval,
            self.config.input_shape.0,
            &self.params,
            &mut bn,
            &self.stem_conv,
            &self.stem_norm,
            &self.stages,
            &self.head,
        )
    }

    /// Number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn param_data_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.params[i].data
    }

    /// All persistent entries in a fixed order: trainable parameters first,
    /// then batchnorm running statistics.
    pub fn entries(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.as_slice()))
            .collect();
        for (prefix, stats) in &self.bn {
            let c = stats.mean.len();
            out.push((format!("{prefix}.running_mean"), vec![c], stats.mean.as_slice()));
            out.push((format!("{prefix}.running_var"), vec![c], stats.var.as_slice()));
        }
        out
    }

    pub fn set_entry(&mut self, name: &str, values: &[f32]) -> Result<(), ModelError> {
        let size_err = |expect: usize| ModelError::EntrySize {
            name: name.to_string(),
            expect,
            got: values.len(),
        };
        if let Some(&i) = self.name_index.get(name) {
            if values.len() != self.params[i].data.len() {
                return Err(size_err(self.params[i].data.len()));
            }
            self.params[i].data.copy_from_slice(values);
            return Ok(());
        }
        if let Some(rest) = name.strip_suffix(".running_mean") {
            if let Some((_, stats)) = self.bn.iter_mut().find(|(p, _)| p == rest) {
                if values.len() != stats.mean.len() {
                    return Err(size_err(stats.mean.len()));
                }
                stats.mean.copy_from_slice(values);
                return Ok(());
            }
        }
        if let Some(rest) = name.strip_suffix(".running_var") {
            if let Some((_, stats)) = self.bn.iter_mut().find(|(p, _)| p == rest) {
                if values.len() != stats.var.len() {
                    return Err(size_err(stats.var.len()));
                }
                stats.var.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(ModelError::NoSuchEntry(name.to_string()))
    }

    /// Redraws a trainable parameter in place: weights get fresh fan-in-scaled
    /// uniforms from `rng`, biases and batchnorm offsets their construction
    /// constants.
    pub fn reinit_param(&mut self, name: &str, rng: &mut ChaCha8Rng) -> Result<(), ModelError> {
        let &i = self
            .name_index
            .get(name)
            .ok_or_else(|| ModelError::NoSuchEntry(name.to_string()))?;
        let p = &mut self.params[i];
        if p.shape.len() >= 2 {
            let fan_in: usize = p.shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f32).sqrt();
            for x in &mut p.data {
                *x = rng.gen_range(-bound..bound);
            }
        } else if p.name.ends_with(".gamma") {
            p.data.fill(1.0);
        } else {
            p.data.fill(0.0);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Standalone split-attention unit
// ---------------------------------------------------------------------------

/// A single split-attention unit with its own parameters, usable outside a
/// full network for direct inspection of attention weights.
pub struct SplitAttentionUnit {
    params: Vec<Param>,
    bn: Vec<(String, RunningStats<f32>)>,
    splat: Splat,
}

impl SplitAttentionUnit {
    pub fn new(
        width: usize,
        radix: usize,
        cardinality: usize,
        inter_floor: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let cfg = ModelConfig {
            stage_widths: [width; 4],
            radix,
            cardinality,
            inter_floor,
            ..ModelConfig::tiny3d()
        };
        cfg.validate()?;
        let mut b = Builder::new(seed);
        let splat = b.splat("unit", &cfg, width);
        Ok(SplitAttentionUnit { params: b.params, bn: b.bn, splat })
    }

    /// Applies the unit to `[N, width, D, H, W]` input.
    pub fn forward(
        &mut self,
        tape: &mut Tape<f32>,
        input: Tensor<f32>,
        mode: Mode,
    ) -> Result<SplatPass, ModelError> {
        let mut ctx = Ctx::new(tape, &self.params, &mut self.bn, mode);
        let x = ctx.tape.leaf(input, false);
        ctx.splat("unit", &self.splat, x)
    }

    /// Zeroes the attention projection so every attention logit is 0.
    pub fn zero_attention_projection(&mut self) {
        let w = self.splat.fc2.w;
        let b = self.splat.fc2.b.expect("fc2 always carries a bias");
        self.params[w].data.fill(0.0);
        self.params[b].data.fill(0.0);
    }

    /// Drives the attention projection bias far positive so sigmoid attention
    /// saturates at exactly 1 (radix 1 only).
    pub fn saturate_attention(&mut self) {
        let w = self.splat.fc2.w;
        let b = self.splat.fc2.b.expect("fc2 always carries a bias");
        self.params[w].data.fill(0.0);
        self.params[b].data.fill(100.0);
    }
}
