use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, LossBreakdown};
use super::model::DetectorModel;
use super::postprocess::{image_tensor, Letterbox};
use super::target::{assign_targets, Targets};
use crate::alignment::LabeledFrame;
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::geometry::GrayImage;
use crate::nn::{Adam, Tensor};

/// One training image pair at network resolution with its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub ir: GrayImage,
    pub thermal: GrayImage,
    pub boxes: Vec<GroundTruthBox>,
}

impl TrainSample {
    /// Letterboxes a dataset frame to `size` and maps its boxes along.
    pub fn from_frame(frame: &LabeledFrame, size: usize) -> Self {
        let (w, h) = frame.pair.ir.dims();
        if (w, h) == (size, size) {
            return Self {
                ir: frame.pair.ir.clone(),
                thermal: frame.pair.thermal_warped.clone(),
                boxes: frame.boxes.clone(),
            };
        }
        let lb = Letterbox::new(w, h, size);
        let boxes = frame
            .boxes
            .iter()
            .map(|b| {
                let (cx, cy) = lb.forward_point(b.cx, b.cy);
                GroundTruthBox::new(cx, cy, b.w * lb.scale_x, b.h * lb.scale_y, b.class_id)
            })
            .collect();
        Self {
            ir: lb.apply(&frame.pair.ir),
            thermal: lb.apply(&frame.pair.thermal_warped),
            boxes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.003,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses.
    pub loss: LossBreakdown,
    pub steps: usize,
}

/// Stacks samples into network input tensors.
pub fn batch_tensors(samples: &[&TrainSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let ir: Vec<Tensor<f32>> = samples.iter().map(|s| image_tensor(&s.ir)).collect();
    let th: Vec<Tensor<f32>> = samples.iter().map(|s| image_tensor(&s.thermal)).collect();
    Ok((Tensor::stack(&ir)?, Tensor::stack(&th)?))
}

/// One optimizer step on a minibatch.
pub fn train_step(
    model: &mut DetectorModel<f32>,
    samples: &[&TrainSample],
    targets: &[Targets],
    adam: &Adam,
) -> Result<LossBreakdown> {
    let (ir, th) = batch_tensors(samples)?;
    let raw = model.forward(Some(&ir), Some(&th), true)?;
    let (loss, grad) = detection_loss(&raw, targets, model.config())?;
    if !loss.total.is_finite() {
        return Err(Error::Invalid(format!("training loss became {}", loss.total)));
    }
    model.backward(&grad)?;
    for p in model.params_mut() {
        adam.step(p);
        p.zero_grad();
    }
    Ok(loss)
}

/// Shuffled minibatch Adam. The shuffle order and therefore the whole run
/// are fixed by `options.seed`; `on_epoch` sees the model after each epoch.
pub fn train(
    model: &mut DetectorModel<f32>,
    samples: &[TrainSample],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog, &DetectorModel<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if options.batch_size == 0 || options.epochs == 0 || !(options.lr > 0.0) {
        return Err(Error::Config(format!("invalid training options {options:?}")));
    }
    let s = model.config().input_size;
    for (i, smp) in samples.iter().enumerate() {
        if smp.ir.dims() != (s, s) || smp.thermal.dims() != (s, s) {
            return Err(Error::Shape(format!("sample {i} is not {s}x{s}")));
        }
    }
    let targets: Vec<Targets> = samples
        .iter()
        .map(|smp| assign_targets(&smp.boxes, model.config()))
        .collect::<Result<_>>()?;
    let adam = Adam::new(options.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(options.epochs);
    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let tg: Vec<Targets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let l = train_step(model, &batch, &tg, &adam)?;
            let k = chunk.len() as f64;
            sum.total += l.total * k;
            sum.loc += l.loc * k;
            sum.obj += l.obj * k;
            sum.cls += l.cls * k;
            steps += 1;
        }
        let m = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown {
                total: sum.total / m,
                loc: sum.loc / m,
                obj: sum.obj / m,
                cls: sum.cls / m,
            },
            steps,
        };
        on_epoch(&entry, model)?;
        log.push(entry);
    }
    Ok(log)
}

/// `epoch,loss_total,loss_loc,loss_obj,loss_cls` rows.
pub fn loss_curve_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_total,loss_loc,loss_obj,loss_cls\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            e.epoch, e.loss.total, e.loss.loc, e.loss.obj, e.loss.cls
        ));
    }
    out
}
