//! Finite-difference checks of every differentiable operation and of the
//! end-to-end hybrid path, in 64-bit arithmetic on small random instances.

use crate::autodiff::gradcheck::{check_store, finite_diff_check, CheckOptions, CheckReport};
use crate::autodiff::{BnStats, Tape, Var};
use crate::error::Result;
use crate::model::{Fusion, Head, Model, ModelConfig};
use crate::nn::{channel_shuffle, conv2d_grouped, ConvSpec, Gru};
use crate::params::{Forward, Mode, ParamStore};
use crate::qghc::{make_variant, QghcConfig, VariantKind};
use crate::tensor::{Rng, Tensor};

pub struct OpCheck {
    pub name: &'static str,
    pub report: CheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: Objective,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// `sum(y ⊙ probe)` with a fixed random probe, so every output element
/// carries a distinct weight.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let p = Tensor::uniform(t.shape(y), -1.0, 1.0, &mut Rng::new(seed ^ 0x9e37))?;
    let p = t.constant(p);
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

fn cases() -> Vec<Case> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 1)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 2)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 3)
        }),
        case("scale", &[&[5]], |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            probe(t, y, 4)
        }),
        case("relu", &[&[4, 5]], |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, 5)
        }),
        case("sigmoid", &[&[4, 5]], |t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y, 6)
        }),
        case("tanh", &[&[4, 5]], |t, v| {
            let y = t.tanh(v[0]);
            probe(t, y, 7)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 8)
        }),
        case("add_bias", &[&[3, 4], &[4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y, 9)
        }),
        case("sum", &[&[2, 3]], |t, v| {
            let s = t.sum(v[0]);
            let y = t.mul(s, s)?;
            Ok(t.sum(y))
        }),
        case("mean", &[&[2, 3]], |t, v| {
            let s = t.mean(v[0]);
            let y = t.mul(s, s)?;
            Ok(t.sum(y))
        }),
        case("reshape", &[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            probe(t, y, 10)
        }),
        case("concat", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            probe(t, y, 11)
        }),
        case("gather_channels", &[&[2, 4, 2, 2]], |t, v| {
            let y = t.gather_channels(v[0], &[2, 0, 3, 1])?;
            probe(t, y, 12)
        }),
        case("channel_shuffle", &[&[2, 6, 2, 2]], |t, v| {
            let y = channel_shuffle(t, v[0], 3)?;
            probe(t, y, 13)
        }),
        case("conv2d_grouped", &[&[2, 4, 5, 5], &[6, 2, 3, 3]], |t, v| {
            let y = conv2d_grouped(t, v[0], v[1], &ConvSpec::new(4, 6, 2, 3)?)?;
            probe(t, y, 14)
        }),
        case("conv2d_pointwise", &[&[2, 4, 3, 3], &[4, 1, 1, 1]], |t, v| {
            let y = conv2d_grouped(t, v[0], v[1], &ConvSpec::new(4, 4, 4, 1)?)?;
            probe(t, y, 15)
        }),
        case("conv2d_strided", &[&[2, 3, 5, 5], &[4, 3, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1, 1)?;
            probe(t, y, 16)
        }),
        case("conv2d_per_sample", &[&[2, 4, 4, 4], &[2, 4, 2, 3, 3]], |t, v| {
            let y = conv2d_grouped(t, v[0], v[1], &ConvSpec::new(4, 4, 2, 3)?)?;
            probe(t, y, 17)
        }),
        case("batch_norm_train", &[&[3, 2, 3, 3], &[2], &[2]], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 })?;
            probe(t, y, 18)
        }),
        case("batch_norm_eval", &[&[3, 2, 3, 3], &[2], &[2]], |t, v| {
            let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
            let (y, _) = t.batch_norm(
                v[0],
                v[1],
                v[2],
                BnStats::Running {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                },
            )?;
            probe(t, y, 19)
        }),
        case("weight_norm", &[&[3, 2, 3, 3], &[3]], |t, v| {
            let y = t.weight_norm(v[0], Some(v[1]))?;
            probe(t, y, 20)
        }),
        case("weight_norm_unit", &[&[3, 8]], |t, v| {
            let y = t.weight_norm(v[0], None)?;
            probe(t, y, 21)
        }),
        case("global_avg_pool", &[&[2, 3, 4, 4]], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            probe(t, y, 22)
        }),
        case("add_spatial", &[&[2, 3, 2, 2], &[2, 3]], |t, v| {
            let y = t.add_spatial(v[0], v[1])?;
            probe(t, y, 23)
        }),
        case("spatial_softmax", &[&[2, 1, 3, 3]], |t, v| {
            let y = t.spatial_softmax(v[0])?;
            probe(t, y, 24)
        }),
        case("weighted_spatial_sum", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| {
            let y = t.weighted_spatial_sum(v[0], v[1])?;
            probe(t, y, 25)
        }),
        case("embedding", &[&[5, 3]], |t, v| {
            let y = t.embedding(v[0], &[1, 4, 1, 0, 1])?;
            probe(t, y, 26)
        }),
        case("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2])),
    ]
}

fn random_params(shapes: &[Vec<usize>], rng: &mut Rng) -> Result<Vec<Tensor<f64>>> {
    shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, rng)).collect()
}

/// Every check of the suite, each listed once.
pub fn run(seed: u64, tol: f64) -> Result<Vec<OpCheck>> {
    let opts = CheckOptions {
        eps: 1e-5,
        tol,
        coords_per_param: Some(12),
        seed,
    };
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for c in cases() {
        let params = random_params(&c.shapes, &mut rng)?;
        let report = finite_diff_check(&params, &c.f, &opts)?;
        out.push(OpCheck { name: c.name, report });
    }
    out.push(OpCheck {
        name: "gru",
        report: gru_check(seed, &opts)?,
    });
    out.push(OpCheck {
        name: "qghc_module",
        report: module_check(seed, &opts)?,
    });
    out.push(OpCheck {
        name: "hybrid_path",
        report: hybrid_path_check(seed, &opts, Head::Gap)?,
    });
    out.push(OpCheck {
        name: "hybrid_path_attention",
        report: hybrid_path_check(seed, &opts, Head::Attention)?,
    });
    Ok(out)
}

fn gru_check(seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let mut store = ParamStore::<f64>::new(seed);
    let gru = Gru::declare(&mut store, "gru", 3, 4)?;
    let mut rng = Rng::new(seed + 1);
    let steps: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng))
        .collect::<Result<_>>()?;
    check_store(
        &store,
        None,
        Mode::Train,
        |fw| {
            let xs: Vec<Var> = steps.iter().map(|s| fw.tape.constant(s.clone())).collect();
            let h = gru.encode(fw, &xs, &[3, 2])?;
            probe(&mut fw.tape, h, 27)
        },
        opts,
    )
}

/// One hybrid module: `C_i = 8`, `N = 2`, `n = 1`, 4×4 maps.
fn module_check(seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let cfg = QghcConfig {
        c_in: 8,
        c_out: 8,
        groups: 2,
        dynamic: 1,
        d_q: 5,
        hidden: 6,
        modules: 1,
        mid_width: None,
        index_seed: None,
    };
    let mut store = ParamStore::<f64>::new(seed + 2);
    let stack = make_variant(&mut store, "qghc", VariantKind::Hybrid, &cfg)?;
    let mut rng = Rng::new(seed + 3);
    let x = Tensor::uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng)?;
    let q = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng)?;
    check_store(
        &store,
        None,
        Mode::Train,
        |fw| {
            let xv = fw.tape.constant(x.clone());
            let qv = fw.tape.constant(q.clone());
            let y = stack.forward(fw, xv, qv)?;
            probe(&mut fw.tape, y, 28)
        },
        opts,
    )
}

/// Question encoder → predictor → dynamic kernels → grouped conv →
/// shuffle → residual → pooling → classifier → cross-entropy, for every
/// parameter of a small complete model.
fn hybrid_path_check(seed: u64, opts: &CheckOptions, head: Head) -> Result<CheckReport> {
    let mut cfg = ModelConfig::toy(7, 4);
    cfg.encoder_widths = [3, 4];
    cfg.embed = 4;
    cfg.qghc = QghcConfig {
        c_in: 8,
        c_out: 8,
        groups: 2,
        dynamic: 1,
        d_q: 5,
        hidden: 4,
        modules: 2,
        mid_width: None,
        index_seed: None,
    };
    cfg.head = head;
    cfg.fusion = Fusion::Qghc;
    let mut store = ParamStore::<f64>::new(seed + 4);
    let model = Model::declare(&mut store, &cfg)?;
    // The classifier's output layer starts near zero, which would leave
    // upstream gradients too small to compare against finite differences.
    let w = model.classifier.fc2.weight;
    let shape = store.meta(w).shape.clone();
    *store.value_mut(w) = Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed + 6))?;
    let images = Tensor::uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut Rng::new(seed + 5))?;
    let questions = vec![vec![1, 2, 3], vec![4, 5], vec![6, 1, 2, 3]];
    check_store(
        &store,
        None,
        Mode::Train,
        |fw: &mut Forward<'_, f64>| {
            let out = model.forward(fw, Some(&images), &questions)?;
            fw.tape.cross_entropy(out.logits, &[0, 3, 1])
        },
        &CheckOptions {
            coords_per_param: Some(3),
            ..opts.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_lists_each_check_once() {
        let r = run(0, 1e-4).unwrap();
        for c in &r {
            assert!(c.passed(), "{}: {:?}", c.name, c.report.worst());
        }
        let mut names: Vec<&str> = r.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), r.len());
    }

    #[test]
    fn zero_tolerance_fails() {
        assert!(run(0, 0.0).unwrap().iter().any(|c| !c.passed()));
    }
}
