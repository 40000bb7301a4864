//! Per-sample activation maps for the predicted answer, and the
//! localization score used to sanity-check them.

use crate::data::{generate_example, Dataset, Question, CELL, GRID, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::{argmax, cam_map, encode_pgm, normalize_heatmap, upsample_nearest, Model};
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::Scalar;
use crate::train::Batch;

/// Activation map of one sample at feature resolution, normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SampleCam {
    pub index: usize,
    pub question: String,
    pub predicted: usize,
    pub truth: usize,
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

pub const CSV_HEADER: &str = "sample,question,predicted,true,argmax_row,argmax_col";

impl SampleCam {
    /// Integer factor from the feature grid to image pixels.
    pub fn factor(&self) -> usize {
        IMAGE_SIZE / self.height
    }

    /// The map upsampled to image resolution by nearest neighbour.
    pub fn image_map(&self) -> Vec<f64> {
        upsample_nearest(&self.map, self.height, self.width, self.factor())
    }

    pub fn pgm(&self) -> Vec<u8> {
        encode_pgm(&self.image_map(), IMAGE_SIZE, IMAGE_SIZE)
    }

    /// Pixel `(row, col)` of the first maximum of the upsampled map.
    pub fn peak(&self) -> (usize, usize) {
        let i = argmax(&self.image_map());
        (i / IMAGE_SIZE, i % IMAGE_SIZE)
    }

    /// Grid cell holding the peak.
    pub fn peak_cell(&self) -> usize {
        let (r, c) = self.peak();
        (r / CELL) * GRID + c / CELL
    }

    pub fn csv_row(&self, data: &Dataset) -> String {
        let (r, c) = self.peak();
        format!(
            "{},{},{},{},{r},{c}",
            self.index, self.question, data.vocab.answers[self.predicted], data.vocab.answers[self.truth]
        )
    }
}

/// Eval-mode forward of sample `index` and its map for the predicted answer.
pub fn sample_cam<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset, index: usize) -> Result<SampleCam> {
    if index >= data.len() {
        return Err(Error::Index(format!(
            "sample {index} of a {}-sample dataset",
            data.len()
        )));
    }
    if !model.config.fusion.uses_image() {
        return Err(Error::Config("blind models have no activation maps".into()));
    }
    let batch = Batch::<T>::gather(data, &[index], true)?;
    let mut fw = Forward::new(store, Mode::Eval, false);
    let out = model.forward(&mut fw, batch.images.as_ref(), &batch.questions)?;
    let evidence = out
        .evidence
        .ok_or_else(|| Error::Config("model exposes no feature map".into()))?;
    let f = fw.tape.value(evidence).cast::<f64>();
    let logits: Vec<f64> = fw.tape.value(out.logits).data().iter().map(|v| v.as_f64()).collect();
    let predicted = argmax(&logits);
    let w = model.cam_weights(&fw, &out, 0)?;
    let m = cam_map(&f, &w, predicted)?;
    let (height, width) = (m.shape()[1], m.shape()[2]);
    if height == 0 || !IMAGE_SIZE.is_multiple_of(height) || height != width {
        return Err(Error::Shape(format!(
            "{height}×{width} feature map does not tile the image"
        )));
    }
    Ok(SampleCam {
        index,
        question: data.vocab.render(&data.samples[index].tokens),
        predicted,
        truth: data.samples[index].answer as usize,
        map: normalize_heatmap(m.data()),
        height,
        width,
    })
}

/// Localization over correctly answered colour-of-shape questions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub hits: usize,
    pub total: usize,
}

impl Localization {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Fraction of correctly answered "what color is the <shape>" samples whose
/// map peaks in the queried object's cell. Scenes are regenerated from the
/// dataset seed, so `data` must be an unmodified generated corpus.
pub fn localization<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<Localization> {
    let mut hits = 0;
    let mut total = 0;
    for i in 0..data.len() {
        let s = &data.samples[i];
        let Some(q @ Question::ColorOf(_)) = Question::parse(&s.tokens, &data.vocab) else {
            continue;
        };
        let cam = sample_cam(model, store, data, i)?;
        if cam.predicted != cam.truth {
            continue;
        }
        let ex = generate_example(&data.vocab, data.seed, i);
        if ex.sample != *s {
            return Err(Error::Config(format!(
                "sample {i} does not match the corpus for seed {}",
                data.seed
            )));
        }
        let cell = q
            .referent(&ex.scene)
            .ok_or_else(|| Error::Config(format!("sample {i} has no unique referent")))?;
        total += 1;
        hits += usize::from(cam.peak_cell() == cell);
    }
    Ok(Localization { hits, total })
}
