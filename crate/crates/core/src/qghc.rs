//! Question-guided hybrid convolution.
//!
//! A module splits its input into `N` channel groups and runs each through a
//! 1×1 → 3×3 → 1×1 bottleneck. In the 3×3 stage, `n` of the `N` group
//! kernels are produced per sample by a two-layer kernel predictor from the
//! question feature; the remaining `N - n` are ordinary trained kernels.
//! A channel shuffle after the 3×3 stage mixes question-guided and free
//! groups, and a learned 1×1 shortcut closes the residual.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{channel_shuffle, conv2d_grouped, BatchNorm2d, Conv2d, ConvSpec, Linear};
use crate::params::{Forward, Init, ParamId, ParamStore, Role};
use crate::tensor::{Rng, Scalar};

/// Structural description of a stack of hybrid modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QghcConfig {
    /// Input channels of the first module.
    pub c_in: usize,
    /// Output channels of every module.
    pub c_out: usize,
    /// Group count `N`.
    pub groups: usize,
    /// Question-guided groups per module, `0 ..= N`.
    pub dynamic: usize,
    /// Question feature width.
    pub d_q: usize,
    /// Kernel predictor hidden width.
    pub hidden: usize,
    /// Number of stacked modules.
    pub modules: usize,
    /// Overrides the per-group mid width, normally `C_i / 2N`.
    pub mid_width: Option<usize>,
    /// When set, each module draws its question-guided group slots from
    /// this seed at construction; otherwise slots `0..n` are used.
    pub index_seed: Option<u64>,
}

impl QghcConfig {
    /// `N = 8`, `C_i = C_o = 512`, one guided group, `h = 198`, three
    /// modules, 2400-wide question features.
    pub fn reference() -> Self {
        Self {
            c_in: 512,
            c_out: 512,
            groups: 8,
            dynamic: 1,
            d_q: 2400,
            hidden: 198,
            modules: 3,
            mid_width: None,
            index_seed: None,
        }
    }

    /// Per-group mid channels of module `k`: `C_i / 2N` unless overridden.
    pub fn mid(&self, k: usize) -> usize {
        self.mid_width.unwrap_or(self.module_in(k) / (2 * self.groups))
    }

    pub fn module_in(&self, k: usize) -> usize {
        if k == 0 {
            self.c_in
        } else {
            self.c_out
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.modules == 0 || self.d_q == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("zero-sized hybrid configuration {self:?}")));
        }
        if self.mid_width == Some(0) {
            return Err(Error::Config("mid width must be positive".into()));
        }
        for k in 0..self.modules {
            let ci = self.module_in(k);
            if !ci.is_multiple_of(self.groups) || (self.mid_width.is_none() && !ci.is_multiple_of(2 * self.groups)) {
                return Err(Error::Config(format!(
                    "module {k}: input channels {ci} not divisible by 2N = {}",
                    2 * self.groups
                )));
            }
        }
        if !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "C_o = {} not divisible by N = {}",
                self.c_out, self.groups
            )));
        }
        if self.dynamic > self.groups {
            return Err(Error::Config(format!(
                "n = {} exceeds N = {}",
                self.dynamic, self.groups
            )));
        }
        Ok(())
    }

    /// Question-guided group slots for module `k`, ascending.
    pub fn dynamic_indices(&self, k: usize) -> Vec<usize> {
        match self.index_seed {
            None => (0..self.dynamic).collect(),
            Some(seed) => {
                let mut slots: Vec<usize> = (0..self.groups).collect();
                Rng::for_stream(seed, k as u64).shuffle(&mut slots);
                let mut chosen = slots[..self.dynamic].to_vec();
                chosen.sort_unstable();
                chosen
            }
        }
    }
}

/// Ablation structures of the hybrid module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// `n` of `N` stage-2 groups predicted.
    Hybrid,
    /// One ungrouped 3×3 convolution with every kernel value predicted.
    Naive,
    /// Ungrouped bottleneck with residual; the 3×3 kernel fully predicted.
    Full,
    /// Grouped bottleneck with every stage-2 group predicted (`n = N`).
    Group,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Hybrid,
        VariantKind::Naive,
        VariantKind::Full,
        VariantKind::Group,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Hybrid => "hybrid",
            VariantKind::Naive => "naive",
            VariantKind::Full => "full",
            VariantKind::Group => "group",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown variant kind {s:?}; expected one of hybrid, naive, full, group"
            ))
        })
    }

    /// The configuration a module of this kind is actually built from.
    pub fn effective_config(self, cfg: &QghcConfig) -> QghcConfig {
        let mut c = cfg.clone();
        match self {
            VariantKind::Hybrid | VariantKind::Naive => {}
            VariantKind::Group => c.dynamic = c.groups,
            VariantKind::Full => {
                c.groups = 1;
                c.dynamic = 1;
                c.mid_width = None;
                c.index_seed = None;
            }
        }
        c
    }
}

/// Two FC layers with a ReLU between them, mapping the question feature to
/// `out_channels` weight-normalized kernels of shape `(in_channels, 3, 3)`
/// per sample.
#[derive(Clone, Debug)]
pub struct KernelPredictor {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

impl KernelPredictor {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_q: usize,
        hidden: usize,
        out_channels: usize,
        in_channels: usize,
    ) -> Result<Self> {
        let kernel = 3;
        let len = out_channels * in_channels * kernel * kernel;
        Ok(Self {
            fc1: Linear::declare(store, &format!("{name}.fc1"), d_q, hidden, Role::QdPredictor)?,
            // A nonzero bias keeps predicted rows away from zero norm even when
            // every hidden unit of a sample is inactive.
            fc2: Linear::declare_with(
                store,
                &format!("{name}.fc2"),
                (hidden, len),
                Role::QdPredictor,
                Init::KaimingUniform { fan_in: hidden },
                Init::KaimingUniform { fan_in: hidden },
            )?,
            out_channels,
            in_channels,
            kernel,
        })
    }

    /// Predicted kernel elements per sample.
    pub fn output_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// `f_q[B, d_q]` → kernels `[B, out, in, 3, 3]`, unit norm per output
    /// channel. Regenerated on every call.
    pub fn predict<T: Scalar>(&self, fw: &mut Forward<'_, T>, f_q: Var) -> Result<Var> {
        let q = fw.tape.shape(f_q).to_vec();
        if q.len() != 2 || q[1] != self.fc1.d_in {
            return Err(Error::Shape(format!(
                "question feature {q:?} for a predictor expecting width {}",
                self.fc1.d_in
            )));
        }
        let batch = q[0];
        let h = self.fc1.forward(fw, f_q)?;
        let h = fw.tape.relu(h);
        let raw = self.fc2.forward(fw, h)?;
        let k2 = self.kernel * self.kernel;
        let rows = fw
            .tape
            .reshape(raw, &[batch * self.out_channels, self.in_channels * k2])?;
        let unit = fw.tape.weight_norm(rows, None)?;
        fw.tape.reshape(
            unit,
            &[batch, self.out_channels, self.in_channels, self.kernel, self.kernel],
        )
    }
}

/// Free stage-2 kernel of one group, weight-normalized with a learned gain.
#[derive(Clone, Debug)]
pub struct FreeGroupKernel {
    pub group: usize,
    pub direction: ParamId,
    pub gain: ParamId,
}

/// One hybrid residual bottleneck.
#[derive(Clone, Debug)]
pub struct QghcModule {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub mid: usize,
    pub dynamic_indices: Vec<usize>,
    pub stage1: Conv2d,
    pub bn1: BatchNorm2d,
    pub free: Vec<FreeGroupKernel>,
    pub predictor: Option<KernelPredictor>,
    pub bn2: BatchNorm2d,
    pub stage3: Conv2d,
    pub bn3: BatchNorm2d,
    pub shortcut: Conv2d,
}

impl QghcModule {
    /// Builds module `k` of `cfg`.
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &QghcConfig, k: usize) -> Result<Self> {
        cfg.validate()?;
        let (c_in, c_out, groups) = (cfg.module_in(k), cfg.c_out, cfg.groups);
        let mid = cfg.mid(k);
        let width = groups * mid;
        let dynamic_indices = cfg.dynamic_indices(k);
        let stage1 = Conv2d::declare(
            store,
            &format!("{name}.stage1"),
            ConvSpec::new(c_in, width, groups, 1)?,
            1,
        )?;
        let bn1 = BatchNorm2d::declare(store, &format!("{name}.bn1"), width)?;
        let mut free = Vec::new();
        for g in (0..groups).filter(|g| !dynamic_indices.contains(g)) {
            let base = format!("{name}.stage2.free.{g}");
            free.push(FreeGroupKernel {
                group: g,
                direction: store.declare(
                    &base,
                    &[mid, mid, 3, 3],
                    Role::QiFree,
                    Init::KaimingUniform { fan_in: mid * 9 },
                )?,
                gain: store.declare(format!("{base}.gain"), &[mid], Role::QiFree, Init::Ones)?,
            });
        }
        let predictor = if dynamic_indices.is_empty() {
            None
        } else {
            Some(KernelPredictor::declare(
                store,
                &format!("{name}.predictor"),
                cfg.d_q,
                cfg.hidden,
                dynamic_indices.len() * mid,
                mid,
            )?)
        };
        let bn2 = BatchNorm2d::declare(store, &format!("{name}.bn2"), width)?;
        let stage3 = Conv2d::declare(
            store,
            &format!("{name}.stage3"),
            ConvSpec::new(width, c_out, groups, 1)?,
            1,
        )?;
        let bn3 = BatchNorm2d::declare(store, &format!("{name}.bn3"), c_out)?;
        let shortcut = Conv2d::declare(store, &format!("{name}.shortcut"), ConvSpec::new(c_in, c_out, 1, 1)?, 1)?;
        Ok(Self {
            c_in,
            c_out,
            groups,
            mid,
            dynamic_indices,
            stage1,
            bn1,
            free,
            predictor,
            bn2,
            stage3,
            bn3,
            shortcut,
        })
    }

    fn group_channels(&self, groups: impl IntoIterator<Item = usize>) -> Vec<usize> {
        groups
            .into_iter()
            .flat_map(|g| g * self.mid..(g + 1) * self.mid)
            .collect()
    }

    /// Stage-2 convolution: predicted kernels on the guided groups, free
    /// kernels elsewhere, outputs returned in group order.
    pub fn hybrid_conv<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, f_q: Var) -> Result<Var> {
        let mut outputs = Vec::with_capacity(2);
        let mut order: Vec<usize> = Vec::with_capacity(self.groups);
        if let Some(pred) = &self.predictor {
            let n = self.dynamic_indices.len();
            let input = fw
                .tape
                .gather_channels(x, &self.group_channels(self.dynamic_indices.iter().copied()))?;
            let kernels = pred.predict(fw, f_q)?;
            let spec = ConvSpec::new(n * self.mid, n * self.mid, n, 3)?;
            outputs.push(conv2d_grouped(&mut fw.tape, input, kernels, &spec)?);
            order.extend(&self.dynamic_indices);
        }
        if !self.free.is_empty() {
            let f = self.free.len();
            let input = fw
                .tape
                .gather_channels(x, &self.group_channels(self.free.iter().map(|k| k.group)))?;
            let dirs: Vec<Var> = self.free.iter().map(|k| fw.param(k.direction)).collect();
            let gains: Vec<Var> = self.free.iter().map(|k| fw.param(k.gain)).collect();
            let v = if f == 1 { dirs[0] } else { fw.tape.concat(&dirs, 0)? };
            let g = if f == 1 { gains[0] } else { fw.tape.concat(&gains, 0)? };
            let kernel = fw.tape.weight_norm(v, Some(g))?;
            let spec = ConvSpec::new(f * self.mid, f * self.mid, f, 3)?;
            outputs.push(conv2d_grouped(&mut fw.tape, input, kernel, &spec)?);
            order.extend(self.free.iter().map(|k| k.group));
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            fw.tape.concat(&outputs, 1)?
        };
        if order.iter().enumerate().all(|(i, &g)| i == g) {
            return Ok(joined);
        }
        let mut restore = vec![0; self.groups * self.mid];
        for (slot, &g) in order.iter().enumerate() {
            for j in 0..self.mid {
                restore[g * self.mid + j] = slot * self.mid + j;
            }
        }
        fw.tape.gather_channels(joined, &restore)
    }

    /// `x[B, C_i, H, W]`, `f_q[B, d_q]` → `[B, C_o, H, W]`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, f_q: Var) -> Result<Var> {
        let s = fw.tape.shape(x);
        if s.len() != 4 || s[1] != self.c_in {
            return Err(Error::Shape(format!(
                "module input {s:?}, expected {} channels",
                self.c_in
            )));
        }
        if let Some(p) = &self.predictor {
            let q = fw.tape.shape(f_q);
            if q.len() != 2 || q[1] != p.fc1.d_in || q[0] != s[0] {
                return Err(Error::Shape(format!(
                    "question feature {q:?} for batch {} width {}",
                    s[0], p.fc1.d_in
                )));
            }
        }
        let a = self.stage1.forward(fw, x)?;
        let a = self.bn1.forward(fw, a)?;
        let a = fw.tape.relu(a);
        let b = self.hybrid_conv(fw, a, f_q)?;
        let b = self.bn2.forward(fw, b)?;
        let b = fw.tape.relu(b);
        let b = channel_shuffle(&mut fw.tape, b, self.groups)?;
        let c = self.stage3.forward(fw, b)?;
        let c = self.bn3.forward(fw, c)?;
        let sc = self.shortcut.forward(fw, x)?;
        let sum = fw.tape.add(c, sc)?;
        Ok(fw.tape.relu(sum))
    }
}

/// Single ungrouped 3×3 convolution whose kernel is predicted in full,
/// followed by ReLU. No normalization, no residual.
#[derive(Clone, Debug)]
pub struct NaiveBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub predictor: KernelPredictor,
}

impl NaiveBlock {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &QghcConfig, k: usize) -> Result<Self> {
        let c_in = cfg.module_in(k);
        Ok(Self {
            c_in,
            c_out: cfg.c_out,
            predictor: KernelPredictor::declare(
                store,
                &format!("{name}.predictor"),
                cfg.d_q,
                cfg.hidden,
                cfg.c_out,
                c_in,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, f_q: Var) -> Result<Var> {
        let kernels = self.predictor.predict(fw, f_q)?;
        let spec = ConvSpec::new(self.c_in, self.c_out, 1, 3)?;
        let y = conv2d_grouped(&mut fw.tape, x, kernels, &spec)?;
        Ok(fw.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
// A handful per model, so the size gap is not worth a box.
#[allow(clippy::large_enum_variant)]
pub enum Block {
    Hybrid(QghcModule),
    Naive(NaiveBlock),
}

impl Block {
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, f_q: Var) -> Result<Var> {
        match self {
            Block::Hybrid(m) => m.forward(fw, x, f_q),
            Block::Naive(m) => m.forward(fw, x, f_q),
        }
    }

    pub fn predictor(&self) -> Option<&KernelPredictor> {
        match self {
            Block::Hybrid(m) => m.predictor.as_ref(),
            Block::Naive(m) => Some(&m.predictor),
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Block::Hybrid(m) => m.c_out,
            Block::Naive(m) => m.c_out,
        }
    }
}

/// `K` blocks applied in sequence; every block sees the same question
/// feature and owns its own predictor.
#[derive(Clone, Debug)]
pub struct QghcStack {
    pub kind: VariantKind,
    pub config: QghcConfig,
    pub blocks: Vec<Block>,
}

impl QghcStack {
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, f_v: Var, f_q: Var) -> Result<Var> {
        let mut x = f_v;
        for b in &self.blocks {
            x = b.forward(fw, x, f_q)?;
        }
        Ok(x)
    }

    pub fn c_out(&self) -> usize {
        self.config.c_out
    }
}

/// Declares a `kind` stack under `prefix` (blocks are named `prefix.k`).
pub fn make_variant<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kind: VariantKind,
    cfg: &QghcConfig,
) -> Result<QghcStack> {
    let eff = kind.effective_config(cfg);
    eff.validate()?;
    let blocks = (0..eff.modules)
        .map(|k| {
            let name = format!("{prefix}.{k}");
            Ok(match kind {
                VariantKind::Naive => Block::Naive(NaiveBlock::declare(store, &name, &eff, k)?),
                _ => Block::Hybrid(QghcModule::declare(store, &name, &eff, k)?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(QghcStack {
        kind,
        config: eff,
        blocks,
    })
}
