//! Dual-stream IR/thermal detector in the YOLOv4-Tiny style: two CSP-Tiny
//! backbones, concat-and-reduce fusion at strides 16 and 32, a tiny FPN neck
//! and two anchor heads, plus the training loss, decoding and NMS.

mod config;
mod jet;
mod loss;
mod model;
mod postprocess;
mod target;
mod train;

pub use crate::boxes::GroundTruthBox;
pub use config::{LocLoss, LossWeights, Mode, ModelConfig, ANCHORS_416};
pub use jet::Jet;
pub use loss::{bce_with_logits, ciou, detection_loss, iou_ciou_jet, loc_loss, LossBreakdown};
pub use model::{build_model, sidecar_path, BackboneFeatures, DetectorModel, RawPrediction};
pub use postprocess::{
    draw_boxes, image_tensor, infer_pair, nms, FrameDetections, Letterbox, OutputBox, DEFAULT_CONF_THRESHOLD,
    DEFAULT_NMS_IOU,
};
pub use target::{
    assign_targets, cell_of, decode_box, decode_predictions, encode_box, shape_iou, slot_values, Detection, Positive,
    Slot, Targets, MAX_LOG_SCALE,
};
pub use train::{batch_tensors, loss_curve_csv, train, train_step, EpochLog, TrainOptions, TrainSample};
