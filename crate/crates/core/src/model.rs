//! Answer models: image and question encoders, the hybrid stack or a
//! baseline fusion, pooling, and the answer classifier. Also class
//! activation maps and their PGM export.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Embedding, Gru, Linear};
use crate::params::{Forward, Init, ParamStore, Role};
use crate::qghc::{make_variant, QghcConfig, QghcStack, VariantKind};
use crate::tensor::{Scalar, Tensor};

/// How the pooled visual features are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    /// Global average pooling.
    Gap,
    /// Question-conditioned spatial attention.
    Attention,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Gap => "gap",
            Head::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Head::Gap),
            "attention" => Ok(Head::Attention),
            _ => Err(Error::Config(format!("unknown head {s:?}; expected gap or attention"))),
        }
    }
}

/// Where image and question meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// Only through the predicted kernels.
    Qghc,
    /// Predicted kernels, plus the question feature concatenated to the
    /// pooled output.
    QghcConcat,
    /// Pooled encoder features concatenated with the question feature.
    ConcatBaseline,
    /// Question only.
    Blind,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Qghc, Fusion::QghcConcat, Fusion::ConcatBaseline, Fusion::Blind];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Qghc => "qghc",
            Fusion::QghcConcat => "qghc+concat",
            Fusion::ConcatBaseline => "concat-baseline",
            Fusion::Blind => "blind",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion {s:?}")))
    }

    pub fn uses_image(self) -> bool {
        self != Fusion::Blind
    }

    pub fn uses_stack(self) -> bool {
        matches!(self, Fusion::Qghc | Fusion::QghcConcat)
    }
}

/// Names accepted by `--variant`.
pub const VARIANT_NAMES: [&str; 6] = ["qghc", "naive", "full", "group", "concat", "blind"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Widths of the two stride-2 encoder blocks; the third block reaches
    /// `qghc.c_in`.
    pub encoder_widths: [usize; 2],
    pub vocab: usize,
    pub embed: usize,
    /// Stack structure. `qghc.d_q` is the question encoder width.
    pub qghc: QghcConfig,
    pub kind: VariantKind,
    pub head: Head,
    pub fusion: Fusion,
    pub answers: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for the synthetic task.
    pub fn toy(vocab: usize, answers: usize) -> Self {
        Self {
            encoder_widths: [8, 16],
            vocab,
            embed: 32,
            qghc: QghcConfig {
                c_in: 32,
                c_out: 32,
                groups: 4,
                dynamic: 1,
                d_q: 64,
                hidden: 64,
                modules: 3,
                mid_width: None,
                index_seed: None,
            },
            kind: VariantKind::Hybrid,
            head: Head::Gap,
            fusion: Fusion::Qghc,
            answers,
        }
    }

    /// Applies a `--variant` name.
    pub fn set_variant(&mut self, name: &str) -> Result<()> {
        let (fusion, kind) = match name {
            "qghc" => (Fusion::Qghc, VariantKind::Hybrid),
            "naive" => (Fusion::Qghc, VariantKind::Naive),
            "full" => (Fusion::Qghc, VariantKind::Full),
            "group" => (Fusion::Qghc, VariantKind::Group),
            "concat" => (Fusion::ConcatBaseline, self.kind),
            "blind" => (Fusion::Blind, self.kind),
            _ => {
                return Err(Error::Usage(format!(
                    "unknown variant {name:?}; expected one of {{{}}}",
                    VARIANT_NAMES.join(", ")
                )))
            }
        };
        self.fusion = fusion;
        self.kind = kind;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers < 2 {
            return Err(Error::Config(format!("answer count {} < 2", self.answers)));
        }
        if self.vocab < 2 || self.embed == 0 || self.encoder_widths.contains(&0) {
            return Err(Error::Config("empty vocabulary or encoder width".into()));
        }
        self.qghc.validate()
    }

    /// Width of the pooled visual vector.
    pub fn pooled_width(&self) -> usize {
        match self.fusion {
            Fusion::Qghc | Fusion::QghcConcat => self.qghc.c_out,
            Fusion::ConcatBaseline => self.qghc.c_in,
            Fusion::Blind => 0,
        }
    }

    pub fn classifier_input(&self) -> usize {
        match self.fusion {
            Fusion::Qghc => self.qghc.c_out,
            Fusion::QghcConcat => self.qghc.c_out + self.qghc.d_q,
            Fusion::ConcatBaseline => self.qghc.c_in + self.qghc.d_q,
            Fusion::Blind => self.qghc.d_q,
        }
    }
}

/// Logits and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

impl<T: Scalar> AnswerDistribution<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        let [_, a] = logits.dims2()?;
        let mut p = logits.data().to_vec();
        for row in p.chunks_mut(a) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let probabilities = Tensor::new(logits.shape(), p)?;
        Ok(Self { logits, probabilities })
    }

    /// Per-row argmax of the logits; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        let a = self.logits.shape()[1];
        self.logits
            .data()
            .chunks(a)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

/// Three 3×3 conv + BN + ReLU blocks, the first two with stride 2.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub blocks: Vec<(Conv2d, BatchNorm2d)>,
}

impl ImageEncoder {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, widths: [usize; 2], out: usize) -> Result<Self> {
        let chans = [3, widths[0], widths[1], out];
        let blocks = (0..3)
            .map(|i| {
                let spec = ConvSpec::new(chans[i], chans[i + 1], 1, 3)?;
                let stride = if i < 2 { 2 } else { 1 };
                Ok((
                    Conv2d::declare(store, &format!("{name}.conv{i}"), spec, stride)?,
                    BatchNorm2d::declare(store, &format!("{name}.bn{i}"), chans[i + 1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `[B, 3, H, W]` → `[B, C_i, H/4, W/4]`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, image: Var) -> Result<Var> {
        let s = fw.tape.shape(image);
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "image batch {s:?}: expected [B, 3, H, W] with H, W divisible by 4"
            )));
        }
        let mut x = image;
        for (conv, bn) in &self.blocks {
            x = conv.forward(fw, x)?;
            x = bn.forward(fw, x)?;
            x = fw.tape.relu(x);
        }
        Ok(x)
    }
}

/// Word embedding followed by a GRU; the final state is the question
/// feature.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embedding: Embedding,
    pub gru: Gru,
}

impl QuestionEncoder {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        embed: usize,
        d_q: usize,
    ) -> Result<Self> {
        Ok(Self {
            embedding: Embedding::declare(store, &format!("{name}.embedding"), vocab, embed)?,
            gru: Gru::declare(store, &format!("{name}.gru"), embed, d_q)?,
        })
    }

    /// Questions are token lists without padding, each nonempty.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, questions: &[Vec<usize>]) -> Result<Var> {
        let lengths: Vec<usize> = questions.iter().map(Vec::len).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        if questions.is_empty() || lengths.contains(&0) {
            return Err(Error::Shape("empty question batch or question".into()));
        }
        if let Some(&t) = questions.iter().flatten().find(|&&t| t >= self.embedding.vocab) {
            return Err(Error::Index(format!(
                "token {t} outside vocabulary of {}",
                self.embedding.vocab
            )));
        }
        let table = fw.param(self.embedding.table);
        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            let column: Vec<usize> = questions.iter().map(|q| q.get(t).copied().unwrap_or(0)).collect();
            xs.push(fw.tape.embedding(table, &column)?);
        }
        self.gru.encode(fw, &xs, &lengths)
    }
}

/// 1×1 score convolution over question-shifted features, spatial softmax,
/// weighted sum.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub score: Conv2d,
    pub project: Linear,
}

/// Intermediate values of an attention pooling.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub pooled: Var,
    /// `f + proj(f_q)`, `[B, C, H, W]`.
    pub shifted: Var,
    /// `[B, 1, H, W]`, each plane summing to 1.
    pub weights: Var,
}

impl AttentionHead {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, d_q: usize) -> Result<Self> {
        Ok(Self {
            score: Conv2d::declare(store, &format!("{name}.score"), ConvSpec::new(channels, 1, 1, 1)?, 1)?,
            project: Linear::declare(store, &format!("{name}.project"), d_q, channels, Role::QiFree)?,
        })
    }

    pub fn pool<T: Scalar>(&self, fw: &mut Forward<'_, T>, f: Var, f_q: Var) -> Result<Attended> {
        let q = self.project.forward(fw, f_q)?;
        let shifted = fw.tape.add_spatial(f, q)?;
        let scores = self.score.forward(fw, shifted)?;
        let weights = fw.tape.spatial_softmax(scores)?;
        let pooled = fw.tape.weighted_spatial_sum(shifted, weights)?;
        Ok(Attended {
            pooled,
            shifted,
            weights,
        })
    }
}

const OUTPUT_INIT_BOUND: f64 = 0.05;

/// Two-layer classifier with hidden width `2A`.
#[derive(Clone, Debug)]
pub struct AnswerMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AnswerMlp {
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, answers: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::declare(store, &format!("{name}.fc1"), d_in, 2 * answers, Role::QiFree)?,
            // Small output weights start the answer distribution near uniform.
            fc2: Linear::declare_with(
                store,
                &format!("{name}.fc2"),
                (2 * answers, answers),
                Role::QiFree,
                Init::Uniform {
                    bound: OUTPUT_INIT_BOUND,
                },
                Init::Zeros,
            )?,
        })
    }

    /// Returns the logits and the post-ReLU hidden layer.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<(Var, Var)> {
        let h = self.fc1.forward(fw, x)?;
        let h = fw.tape.relu(h);
        Ok((self.fc2.forward(fw, h)?, h))
    }
}

/// Tape nodes of one forward evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub question: Var,
    /// Topmost feature map entering the head.
    pub features: Option<Var>,
    /// The map whose global average equals the pooled vector: the features
    /// themselves under GAP, `H·W·α ⊙ f'` under attention.
    pub evidence: Option<Var>,
    pub pooled: Option<Var>,
    pub attention: Option<Var>,
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub image: Option<ImageEncoder>,
    pub question: QuestionEncoder,
    pub stack: Option<QghcStack>,
    pub attention: Option<AttentionHead>,
    pub classifier: AnswerMlp,
}

impl Model {
    /// Declares every parameter of `config` in `store`.
    pub fn declare<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let image = if c.fusion.uses_image() {
            Some(ImageEncoder::declare(store, "encoder", c.encoder_widths, c.qghc.c_in)?)
        } else {
            None
        };
        let question = QuestionEncoder::declare(store, "question", c.vocab, c.embed, c.qghc.d_q)?;
        let stack = if c.fusion.uses_stack() {
            Some(make_variant(store, "qghc", c.kind, &c.qghc)?)
        } else {
            None
        };
        let attention = if c.head == Head::Attention && c.fusion.uses_image() {
            Some(AttentionHead::declare(
                store,
                "attention",
                c.pooled_width(),
                c.qghc.d_q,
            )?)
        } else {
            None
        };
        let classifier = AnswerMlp::declare(store, "classifier", c.classifier_input(), c.answers)?;
        Ok(Self {
            config: config.clone(),
            image,
            question,
            stack,
            attention,
            classifier,
        })
    }

    /// `images` may be `None` only for the blind model, which never reads
    /// it.
    pub fn forward<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        images: Option<&Tensor<T>>,
        questions: &[Vec<usize>],
    ) -> Result<ModelOutput> {
        let f_q = self.question.forward(fw, questions)?;
        let mut out = ModelOutput {
            logits: f_q,
            question: f_q,
            features: None,
            evidence: None,
            pooled: None,
            attention: None,
            hidden: f_q,
        };
        let input = match &self.image {
            None => f_q,
            Some(enc) => {
                let images = images.ok_or_else(|| Error::Shape("image batch required by this model".into()))?;
                if images.shape().first() != Some(&questions.len()) {
                    return Err(Error::Shape(format!(
                        "{} images for {} questions",
                        images.shape().first().unwrap_or(&0),
                        questions.len()
                    )));
                }
                let x = fw.tape.constant(images.clone());
                let f_v = enc.forward(fw, x)?;
                let f = match &self.stack {
                    Some(stack) => stack.forward(fw, f_v, f_q)?,
                    None => f_v,
                };
                out.features = Some(f);
                let pooled = match &self.attention {
                    None => {
                        out.evidence = Some(f);
                        fw.tape.global_avg_pool(f)?
                    }
                    Some(head) => {
                        let a = head.pool(fw, f, f_q)?;
                        let s = fw.tape.shape(f).to_vec();
                        let scale = (s[2] * s[3]) as f64;
                        let w = fw.tape.scale(a.weights, scale);
                        let w = expand_channels(fw, w, s[1])?;
                        out.evidence = Some(fw.tape.mul(a.shifted, w)?);
                        out.attention = Some(a.weights);
                        a.pooled
                    }
                };
                out.pooled = Some(pooled);
                match self.config.fusion {
                    Fusion::Qghc => pooled,
                    _ => fw.tape.concat(&[pooled, f_q], 1)?,
                }
            }
        };
        let (logits, hidden) = self.classifier.forward(fw, input)?;
        out.logits = logits;
        out.hidden = hidden;
        Ok(out)
    }

    /// Eval-mode answer distribution, no gradients.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: Option<&Tensor<T>>,
        questions: &[Vec<usize>],
    ) -> Result<AnswerDistribution<T>> {
        let mut fw = Forward::new(store, crate::params::Mode::Eval, false);
        let out = self.forward(&mut fw, images, questions)?;
        AnswerDistribution::from_logits(fw.tape.value(out.logits).clone())
    }

    /// Channel-to-answer weights `[C, A]` seen by the pooled features of
    /// sample `b`: `W1[:C] · diag(1[h_b > 0]) · W2`. With these the global
    /// average of the activation map equals the answer's logit contribution
    /// from the pooled features.
    pub fn cam_weights<T: Scalar>(&self, fw: &Forward<'_, T>, out: &ModelOutput, b: usize) -> Result<Tensor<f64>> {
        let c = self.config.pooled_width();
        if c == 0 {
            return Err(Error::Config("blind models have no activation maps".into()));
        }
        let store = fw.store();
        let w1 = store.value(self.classifier.fc1.weight);
        let w2 = store.value(self.classifier.fc2.weight);
        let hidden = fw.tape.value(out.hidden);
        let (j, a) = (w2.shape()[0], w2.shape()[1]);
        let gates = &hidden.data()[b * j..(b + 1) * j];
        let mut w = vec![0.0; c * a];
        for ci in 0..c {
            for (jj, g) in gates.iter().enumerate() {
                if *g > T::zero() {
                    let s = w1.data()[ci * j + jj].as_f64();
                    for ai in 0..a {
                        w[ci * a + ai] += s * w2.data()[jj * a + ai].as_f64();
                    }
                }
            }
        }
        Tensor::new(&[c, a], w)
    }
}

fn expand_channels<T: Scalar>(fw: &mut Forward<'_, T>, w: Var, channels: usize) -> Result<Var> {
    let parts = vec![w; channels];
    fw.tape.concat(&parts, 1)
}

/// `M_a[b, y, x] = Σ_c w[c, a] · f[b, c, y, x]`.
pub fn cam_map(f: &Tensor<f64>, w: &Tensor<f64>, answer: usize) -> Result<Tensor<f64>> {
    let [b, c, h, wd] = f.dims4()?;
    let [wc, a] = w.dims2()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "CAM weights for {wc} channels on a {c}-channel map"
        )));
    }
    if answer >= a {
        return Err(Error::Index(format!("answer {answer} out of range for {a} answers")));
    }
    let plane = h * wd;
    let mut out = vec![0.0; b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for ci in 0..c {
            let k = w.data()[ci * a + answer];
            let src = &f.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
        }
    }
    Tensor::new(&[b, h, wd], out)
}

/// Min-max normalization to `[0, 1]`; a flat map becomes all zeros.
pub fn normalize_heatmap(m: &[f64]) -> Vec<f64> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; m.len()]
    }
}

/// Row-major index of the first maximum.
pub fn argmax(m: &[f64]) -> usize {
    m.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Nearest-neighbour upsampling of an `h×w` map by integer `factor`.
pub fn upsample_nearest(m: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    (0..oh * ow)
        .map(|i| m[(i / ow / factor) * w + (i % ow) / factor])
        .collect()
}

/// Binary 8-bit PGM of a `[0, 1]` map.
pub fn encode_pgm(m: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(m.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
