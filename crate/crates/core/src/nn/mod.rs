//! Neural building blocks: grouped convolution, channel shuffle, batch and
//! weight normalization, pooling, linear and embedding layers, and a GRU
//! question encoder.

pub mod conv;

use crate::autodiff::{BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BnUpdate, BufferId, Forward, Init, ParamId, ParamStore, Role};
use crate::tensor::{Scalar, Tensor};

/// Stride-1, zero-padded, bias-free grouped convolution description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Square kernel extent, 1 or 3.
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, kernel: usize) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::Shape(format!(
                "{in_channels}->{out_channels} channels not divisible into {groups} groups"
            )));
        }
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("kernel extent {kernel} (expected 1 or 3)")));
        }
        Ok(Self {
            in_channels,
            out_channels,
            groups,
            kernel,
        })
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn kernel_elements(&self) -> usize {
        self.kernel_shape().iter().product()
    }
}

/// Grouped convolution under `spec`. `kernels` is either the shared kernel
/// `[C_out, C_in/G, k, k]` or a per-sample `[B, C_out, C_in/G, k, k]` stack,
/// and may be a leaf or the output of upstream operations.
pub fn conv2d_grouped<T: Scalar>(tape: &mut Tape<T>, input: Var, kernels: Var, spec: &ConvSpec) -> Result<Var> {
    let ks = tape.shape(kernels);
    let expected = spec.kernel_shape();
    if ks[ks.len().saturating_sub(4)..] != expected {
        return Err(Error::Shape(format!("kernel {ks:?} does not match spec {expected:?}")));
    }
    let is = tape.shape(input);
    if is.len() != 4 || is[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "input {is:?} for a {}-channel convolution",
            spec.in_channels
        )));
    }
    tape.conv2d(input, kernels, 1, spec.padding(), spec.groups)
}

/// Output channel `j*g + i` takes input channel `i*(C/g) + j`.
pub fn channel_shuffle_perm(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::Shape(format!("{channels} channels not divisible by {groups}")));
    }
    let per = channels / groups;
    let mut perm = vec![0; channels];
    for i in 0..groups {
        for j in 0..per {
            perm[j * groups + i] = i * per + j;
        }
    }
    Ok(perm)
}

pub fn channel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, groups: usize) -> Result<Var> {
    let c = *tape
        .shape(x)
        .get(1)
        .ok_or_else(|| Error::Shape("channel shuffle needs a channel axis".into()))?;
    let perm = channel_shuffle_perm(c, groups)?;
    tape.gather_channels(x, &perm)
}

/// Per-output-channel reparameterization `gain * v / ||v||`; gain 1 when
/// `gain` is `None`.
pub fn weight_normalize<T: Scalar>(tape: &mut Tape<T>, v: Var, gain: Option<Var>) -> Result<Var> {
    tape.weight_norm(v, gain)
}

pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

/// `x[B, D_in] · w[D_in, D_out] + b[D_out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub fn embedding_lookup<T: Scalar>(tape: &mut Tape<T>, tokens: &[usize], table: Var) -> Result<Var> {
    tape.embedding(table, tokens)
}

/// Convolution layer owning its kernel parameter.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub spec: ConvSpec,
    pub stride: usize,
}

impl Conv2d {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, stride: usize) -> Result<Self> {
        let kernel = store.declare(
            name,
            &spec.kernel_shape(),
            Role::QiFree,
            Init::KaimingUniform { fan_in: spec.fan_in() },
        )?;
        Ok(Self { kernel, spec, stride })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let k = fw.param(self.kernel);
        if self.stride == 1 {
            conv2d_grouped(&mut fw.tape, x, k, &self.spec)
        } else {
            fw.tape.conv2d(x, k, self.stride, self.spec.padding(), self.spec.groups)
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over (B, H, W) with learned affine and running
/// statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.declare(format!("{name}.gamma"), &[channels], Role::QiFree, Init::Ones)?,
            beta: store.declare(format!("{name}.beta"), &[channels], Role::QiFree, Init::Zeros)?,
            running_mean: store.declare_buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.declare_buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Train mode normalizes by batch statistics and queues a running
    /// statistics update on `fw`; eval mode uses the running statistics.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = fw.param(self.gamma);
        let beta = fw.param(self.beta);
        match fw.mode() {
            crate::params::Mode::Train => {
                let (y, stats) = fw.tape.batch_norm(x, gamma, beta, BnStats::Batch { eps: self.eps })?;
                let (batch_mean, batch_var) = stats.expect("batch statistics in train mode");
                fw.record_bn(BnUpdate {
                    mean_buf: self.running_mean,
                    var_buf: self.running_var,
                    momentum: self.momentum,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            crate::params::Mode::Eval => {
                let store = fw.store();
                let (mean, var) = (
                    store.buffer(self.running_mean).data(),
                    store.buffer(self.running_var).data(),
                );
                let (y, _) = fw.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnStats::Running {
                        mean,
                        var,
                        eps: self.eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        role: Role,
    ) -> Result<Self> {
        Self::declare_with(
            store,
            name,
            (d_in, d_out),
            role,
            Init::KaimingUniform { fan_in: d_in },
            Init::Zeros,
        )
    }

    /// As [`Linear::declare`] with explicit weight and bias initializers.
    pub fn declare_with<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (d_in, d_out): (usize, usize),
        role: Role,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.declare(format!("{name}.weight"), &[d_in, d_out], role, weight)?,
            bias: store.declare(format!("{name}.bias"), &[d_out], role, bias)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        linear(&mut fw.tape, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub width: usize,
}

impl Embedding {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, vocab: usize, width: usize) -> Result<Self> {
        Ok(Self {
            table: store.declare(
                format!("{name}.table"),
                &[vocab, width],
                Role::QiFree,
                Init::KaimingUniform { fan_in: width },
            )?,
            vocab,
            width,
        })
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, tokens: &[usize]) -> Result<Var> {
        let t = fw.param(self.table);
        embedding_lookup(&mut fw.tape, tokens, t)
    }
}

/// Single-layer GRU:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h~ = tanh(x·Wh + (r⊙h)·Uh + bh)
/// h' = (1 - z)⊙h~ + z⊙h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut decl = |gate: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                store.declare(
                    format!("{name}.w_{gate}"),
                    &[input, hidden],
                    Role::QiFree,
                    Init::KaimingUniform { fan_in: input },
                )?,
                store.declare(
                    format!("{name}.u_{gate}"),
                    &[hidden, hidden],
                    Role::QiFree,
                    Init::KaimingUniform { fan_in: hidden },
                )?,
                store.declare(format!("{name}.b_{gate}"), &[hidden], Role::QiFree, Init::Zeros)?,
            ))
        };
        let z = decl("z")?;
        let r = decl("r")?;
        let h = decl("h")?;
        Ok(Self {
            w: [z.0, r.0, h.0],
            u: [z.1, r.1, h.1],
            b: [z.2, r.2, h.2],
            input,
            hidden,
        })
    }

    /// Runs the recurrence over `steps` (each `[B, E]`) from a zero state
    /// and returns the final state `[B, D]`. Sample `i` stops updating after
    /// `lengths[i]` steps.
    pub fn encode<T: Scalar>(&self, fw: &mut Forward<'_, T>, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::Shape("GRU over an empty sequence".into()))?;
        let batch = fw.tape.shape(first)[0];
        if lengths.len() != batch {
            return Err(Error::Shape(format!("{} lengths for batch {batch}", lengths.len())));
        }
        if lengths.contains(&0) {
            return Err(Error::Shape("GRU over an empty sequence".into()));
        }
        let [wz, wr, wh] = self.w.map(|p| fw.param(p));
        let [uz, ur, uh] = self.u.map(|p| fw.param(p));
        let [bz, br, bh] = self.b.map(|p| fw.param(p));
        let mut h = fw.tape.constant(Tensor::zeros(&[batch, self.hidden])?);
        for (t, &x) in steps.iter().enumerate() {
            let tape = &mut fw.tape;
            let gate = |tape: &mut Tape<T>, w: Var, hin: Var, u: Var, b: Var| -> Result<Var> {
                let a = tape.matmul(x, w)?;
                let c = tape.matmul(hin, u)?;
                let s = tape.add(a, c)?;
                tape.add_bias(s, b)
            };
            let z = gate(tape, wz, h, uz, bz)?;
            let z = tape.sigmoid(z);
            let r = gate(tape, wr, h, ur, br)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h)?;
            let cand = gate(tape, wh, rh, uh, bh)?;
            let cand = tape.tanh(cand);
            let one_minus_z = tape.affine(z, -1.0, 1.0);
            let keep_new = tape.mul(one_minus_z, cand)?;
            let keep_old = tape.mul(z, h)?;
            let next = tape.add(keep_new, keep_old)?;
            h = if lengths.iter().all(|&l| l > t) {
                next
            } else {
                let mask: Vec<T> = lengths
                    .iter()
                    .flat_map(|&l| std::iter::repeat_n(if l > t { T::one() } else { T::zero() }, self.hidden))
                    .collect();
                let inv: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
                let m = tape.constant(Tensor::new(&[batch, self.hidden], mask)?);
                let im = tape.constant(Tensor::new(&[batch, self.hidden], inv)?);
                let a = tape.mul(m, next)?;
                let b = tape.mul(im, h)?;
                tape.add(a, b)?
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_store, finite_diff_check, CheckOptions};
    use crate::params::Mode;
    use crate::tensor::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_one_by_one_kernels() {
        let spec = ConvSpec::new(4, 4, 4, 1).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::ones(&spec.kernel_shape()).unwrap());
        let y = conv2d_grouped(&mut tape, xv, k, &spec).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn three_by_three_ones_on_two_by_two() {
        let spec = ConvSpec::new(1, 1, 1, 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = conv2d_grouped(&mut tape, x, k, &spec).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_spec_divisibility() {
        assert!(ConvSpec::new(6, 4, 4, 1).is_err());
        assert!(ConvSpec::new(4, 4, 2, 5).is_err());
        assert_eq!(ConvSpec::new(8, 4, 2, 3).unwrap().kernel_shape(), [4, 4, 3, 3]);
    }

    #[test]
    fn shuffle_examples() {
        assert_eq!(channel_shuffle_perm(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(channel_shuffle_perm(6, 2).unwrap(), vec![0, 3, 1, 4, 2, 5]);
        assert!(channel_shuffle_perm(6, 4).is_err());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[0.0, 1.0, 2.0, 3.0]));
        let a = channel_shuffle(&mut tape, x, 2).unwrap();
        let b = channel_shuffle(&mut tape, a, 2).unwrap();
        assert_eq!(tape.value(b).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    fn bn_fixture(store: &mut ParamStore<f64>) -> BatchNorm2d {
        BatchNorm2d::declare(store, "bn", 2).unwrap()
    }

    #[test]
    fn batch_norm_constant_input_gives_beta() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = bn_fixture(&mut store);
        *store.value_mut(bn.beta) = t(&[2], &[0.5, -0.25]);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let x = fw
            .tape
            .constant(t(&[2, 2, 1, 2], &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]));
        let y = bn.forward(&mut fw, x).unwrap();
        assert_eq!(
            fw.tape.value(y).data(),
            &[0.5, 0.5, -0.25, -0.25, 0.5, 0.5, -0.25, -0.25]
        );
    }

    #[test]
    fn batch_norm_eval_identity_with_unit_stats() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = bn_fixture(&mut store);
        let x0 = Tensor::uniform(&[1, 2, 2, 2], -3.0, 3.0, &mut Rng::new(2)).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval, false);
        let x = fw.tape.constant(x0.clone());
        let y = bn.forward(&mut fw, x).unwrap();
        assert!(fw.tape.value(y).max_abs_diff(&x0) < 1e-5 * 3.0);
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = bn_fixture(&mut store);
        let x0 = Tensor::uniform(&[4, 2, 3, 3], -2.0, 5.0, &mut Rng::new(3)).unwrap();
        let mut fw = Forward::new(&store, Mode::Train, false);
        let x = fw.tape.constant(x0);
        let y = bn.forward(&mut fw, x).unwrap();
        let yv = fw.tape.value(y).clone();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| yv.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let upd = fw.finish();
        upd.apply(&mut store);
        assert!(store.buffer(bn.running_var).data().iter().all(|&v| v >= 0.0));
        assert!(store.buffer(bn.running_mean).data()[0] != 0.0);
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = bn_fixture(&mut store);
        let mut fw = Forward::new(&store, Mode::Train, false);
        let x = fw.tape.constant(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        assert!(bn.forward(&mut fw, x).is_err());
    }

    #[test]
    fn batch_norm_eval_is_per_channel_affine() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = bn_fixture(&mut store);
        *store.value_mut(bn.gamma) = t(&[2], &[1.5, -0.5]);
        *store.value_mut(bn.beta) = t(&[2], &[0.2, 0.3]);
        *store.buffer_mut(bn.running_mean) = t(&[2], &[1.0, -2.0]);
        *store.buffer_mut(bn.running_var) = t(&[2], &[4.0, 0.25]);
        let x0 = Tensor::uniform(&[2, 2, 2, 2], -3.0, 3.0, &mut Rng::new(4)).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval, false);
        let x = fw.tape.constant(x0.clone());
        let y = bn.forward(&mut fw, x).unwrap();
        let yv = fw.tape.value(y);
        let coef = [
            (1.5 / (4.0f64 + 1e-5).sqrt(), 1.0, 0.2),
            (-0.5 / (0.25f64 + 1e-5).sqrt(), -2.0, 0.3),
        ];
        for (i, (&xi, &yi)) in x0.data().iter().zip(yv.data()).enumerate() {
            let (a, m, b) = coef[(i / 4) % 2];
            assert!((yi - (a * (xi - m) + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let g = tape.constant(t(&[1], &[2.0]));
        let w = weight_normalize(&mut tape, v, Some(g)).unwrap();
        let d = tape.value(w).data();
        assert!((d[0] - 1.2).abs() < 1e-12 && (d[1] - 1.6).abs() < 1e-12);

        let unit = tape.constant(t(&[2, 2], &[0.6, 0.8, 1.0, 0.0]));
        let w = weight_normalize(&mut tape, unit, None).unwrap();
        assert!(tape.value(w).max_abs_diff(tape.value(unit)) < 1e-15);

        let scaled = tape.affine(unit, 5.0, 0.0);
        let w2 = weight_normalize(&mut tape, scaled, None).unwrap();
        assert!(tape.value(w2).max_abs_diff(tape.value(w)) < 1e-15);

        let zero = tape.constant(Tensor::zeros(&[1, 3]).unwrap());
        let wz = weight_normalize(&mut tape, zero, None).unwrap();
        assert_eq!(tape.value(wz).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 3, 3]).unwrap());
        let p = global_avg_pool(&mut tape, a).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0]);
        let b = tape.constant(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let p = global_avg_pool(&mut tape, b).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
        let c = tape.constant(t(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = global_avg_pool(&mut tape, c).unwrap();
        assert_eq!(tape.shape(p), &[2, 3]);
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let eye = tape.constant(Tensor::identity(2).unwrap());
        let zb = tape.constant(Tensor::zeros(&[2]).unwrap());
        let y = linear(&mut tape, x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let z = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        let bb = tape.constant(t(&[2], &[0.5, -1.0]));
        let y = linear(&mut tape, z, eye, bb).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert!(linear(&mut tape, x, z, bb).is_err());
    }

    #[test]
    fn embedding_examples() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = embedding_lookup(&mut tape, &[0], table).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.0]);
        let e = embedding_lookup(&mut tape, &[2, 2, 1], table).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 5.0, 6.0, 3.0, 4.0]);
        let l = tape.sum(e);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(table).data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(embedding_lookup(&mut tape, &[3], table), Err(Error::Index(_))));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let table = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut Rng::new(8)).unwrap();
        let r = finite_diff_check(
            &[table],
            |tape, v| {
                let e = tape.embedding(v[0], &[1, 3, 1])?;
                let s = tape.mul(e, e)?;
                Ok(tape.sum(s))
            },
            &CheckOptions {
                coords_per_param: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);
    }

    fn gru_fixture(seed: u64) -> (ParamStore<f64>, Embedding, Gru) {
        let mut store = ParamStore::<f64>::new(seed);
        let emb = Embedding::declare(&mut store, "emb", 5, 3).unwrap();
        let gru = Gru::declare(&mut store, "gru", 3, 4).unwrap();
        (store, emb, gru)
    }

    fn run_gru(store: &ParamStore<f64>, emb: &Embedding, gru: &Gru, seqs: &[Vec<usize>]) -> (Tensor<f64>, usize) {
        let mut fw = Forward::new(store, Mode::Eval, false);
        let t_max = seqs.iter().map(Vec::len).max().unwrap();
        let steps: Vec<Var> = (0..t_max)
            .map(|t| {
                let toks: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
                emb.forward(&mut fw, &toks).unwrap()
            })
            .collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let h = gru.encode(&mut fw, &steps, &lens).unwrap();
        (fw.tape.value(h).clone(), fw.tape.len())
    }

    #[test]
    fn gru_zero_weights_give_zero_state() {
        let (mut store, emb, gru) = gru_fixture(1);
        for id in gru.w.iter().chain(&gru.u).chain(&gru.b) {
            let shape = store.meta(*id).shape.clone();
            *store.value_mut(*id) = Tensor::zeros(&shape).unwrap();
        }
        let (h, _) = run_gru(&store, &emb, &gru, &[vec![1, 2, 3]]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_applies_one_update_per_token() {
        let (store, emb, gru) = gru_fixture(2);
        let (h1, n1) = run_gru(&store, &emb, &gru, &[vec![2]]);
        let (h2, n2) = run_gru(&store, &emb, &gru, &[vec![2, 2]]);
        let (_, n3) = run_gru(&store, &emb, &gru, &[vec![2, 2, 2]]);
        assert_eq!(n3 - n2, n2 - n1);
        assert_ne!(h1, h2);
    }

    #[test]
    fn gru_masking_matches_unpadded_run() {
        let (store, emb, gru) = gru_fixture(3);
        let (alone, _) = run_gru(&store, &emb, &gru, &[vec![1, 4]]);
        let (batched, _) = run_gru(&store, &emb, &gru, &[vec![1, 4], vec![3, 2, 2, 1]]);
        assert!(alone
            .data()
            .iter()
            .zip(&batched.data()[..4])
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let mut fw = Forward::new(&store, Mode::Eval, false);
        assert!(gru.encode(&mut fw, &[], &[]).is_err());
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let (store, emb, gru) = gru_fixture(4);
        let seqs = [vec![1, 2, 4], vec![3, 1]];
        let r = check_store(
            &store,
            None,
            Mode::Eval,
            |fw| {
                let steps: Vec<Var> = (0..3)
                    .map(|t| {
                        let toks: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
                        emb.forward(fw, &toks)
                    })
                    .collect::<Result<_>>()?;
                let h = gru.encode(fw, &steps, &[3, 2])?;
                let sq = fw.tape.mul(h, h)?;
                Ok(fw.tape.sum(sq))
            },
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);
    }
}
