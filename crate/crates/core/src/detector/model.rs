use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::weights::{load_weights, save_weights};
use crate::nn::{
    concat_channels, split_channels, upsample_nearest, upsample_nearest_backward, ActivationKind, Conv2d, ConvBlock,
    Float, MaxPool2d, Parameter, Record, Tensor,
};

/// Objectness bias at initialization: logit of a 1% prior.
const OBJECTNESS_PRIOR: f64 = -4.59511985013459;

/// Backbone taps at stride 16 and stride 32.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures<T> {
    pub p4: Tensor<T>,
    pub p5: Tensor<T>,
}

/// Raw head outputs, stride-16 scale first.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T> {
    pub scales: [Tensor<T>; 2],
}

/// Cross-stage-partial stage: conv, split, two convs on the kept half,
/// concat, 1×1 merge, concat with the stage conv, max-pool.
#[derive(Clone, Debug)]
struct CspStage<T> {
    conv: ConvBlock<T>,
    part_a: ConvBlock<T>,
    part_b: ConvBlock<T>,
    merge: ConvBlock<T>,
    pool: MaxPool2d,
}

impl<T: Float> CspStage<T> {
    fn new(cin: usize, c: usize, act: ActivationKind, rng: &mut ChaCha8Rng) -> Self {
        let half = c - c / 2;
        Self {
            conv: ConvBlock::new(cin, c, 3, 1, act, rng),
            part_a: ConvBlock::new(half, half, 3, 1, act, rng),
            part_b: ConvBlock::new(half, half, 3, 1, act, rng),
            merge: ConvBlock::new(2 * half, c, 1, 1, act, rng),
            pool: MaxPool2d::new(2, 2),
        }
    }

    fn out_channels(&self) -> usize {
        self.conv.cout() + self.merge.cout()
    }

    /// Returns the merge output (the stage's side tap) and the pooled output.
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = self.conv.forward(x, train)?;
        let (_, kept) = split_channels(&t, t.c() / 2)?;
        let a = self.part_a.forward(&kept, train)?;
        let b = self.part_b.forward(&a, train)?;
        let f = self.merge.forward(&concat_channels(&b, &a)?, train)?;
        let out = self.pool.forward(&concat_channels(&t, &f)?)?;
        Ok((f, out))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = self.conv.infer(x)?;
        let (_, kept) = split_channels(&t, t.c() / 2)?;
        let a = self.part_a.infer(&kept)?;
        let b = self.part_b.infer(&a)?;
        let f = self.merge.infer(&concat_channels(&b, &a)?)?;
        let out = self.pool.infer(&concat_channels(&t, &f)?)?;
        Ok((f, out))
    }

    fn backward(&mut self, d_out: &Tensor<T>, d_tap: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let c = self.conv.cout();
        let d_cat = self.pool.backward(d_out)?;
        let (mut d_t, mut d_f) = split_channels(&d_cat, c)?;
        if let Some(extra) = d_tap {
            d_f.add_assign(extra)?;
        }
        let d_merge = self.merge.backward(&d_f)?;
        let (d_b, mut d_a) = split_channels(&d_merge, self.part_b.cout())?;
        d_a.add_assign(&self.part_b.backward(&d_b)?)?;
        let d_kept = self.part_a.backward(&d_a)?;
        let [n, _, h, w] = d_t.shape();
        let d_dropped = Tensor::zeros([n, c / 2, h, w]);
        d_t.add_assign(&concat_channels(&d_dropped, &d_kept)?)?;
        self.conv.backward(&d_t)
    }

    fn blocks_mut(&mut self) -> [&mut ConvBlock<T>; 4] {
        [&mut self.conv, &mut self.part_a, &mut self.part_b, &mut self.merge]
    }

    fn blocks(&self) -> [&ConvBlock<T>; 4] {
        [&self.conv, &self.part_a, &self.part_b, &self.merge]
    }
}

/// CSP-Tiny feature extractor for one modality.
#[derive(Clone, Debug)]
struct Backbone<T> {
    stem: [ConvBlock<T>; 2],
    stages: [CspStage<T>; 3],
}

impl<T: Float> Backbone<T> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let act = cfg.activation;
        let (c32, c64, c128, c256) = (cfg.width(32), cfg.width(64), cfg.width(128), cfg.width(256));
        let stem = [
            ConvBlock::new(1, c32, 3, 2, act, rng),
            ConvBlock::new(c32, c64, 3, 2, act, rng),
        ];
        let s1 = CspStage::new(c64, c64, act, rng);
        let s2 = CspStage::new(s1.out_channels(), c128, act, rng);
        let s3 = CspStage::new(s2.out_channels(), c256, act, rng);
        Self {
            stem,
            stages: [s1, s2, s3],
        }
    }

    fn p4_channels(&self) -> usize {
        self.stages[2].merge.cout()
    }

    fn p5_channels(&self) -> usize {
        self.stages[2].out_channels()
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<BackboneFeatures<T>> {
        let mut y = self.stem[0].forward(x, train)?;
        y = self.stem[1].forward(&y, train)?;
        y = self.stages[0].forward(&y, train)?.1;
        y = self.stages[1].forward(&y, train)?.1;
        let (p4, p5) = self.stages[2].forward(&y, train)?;
        Ok(BackboneFeatures { p4, p5 })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<BackboneFeatures<T>> {
        let mut y = self.stem[1].infer(&self.stem[0].infer(x)?)?;
        y = self.stages[0].infer(&y)?.1;
        y = self.stages[1].infer(&y)?.1;
        let (p4, p5) = self.stages[2].infer(&y)?;
        Ok(BackboneFeatures { p4, p5 })
    }

    fn backward(&mut self, d: &BackboneFeatures<T>) -> Result<()> {
        let mut g = self.stages[2].backward(&d.p5, Some(&d.p4))?;
        g = self.stages[1].backward(&g, None)?;
        g = self.stages[0].backward(&g, None)?;
        g = self.stem[1].backward(&g)?;
        self.stem[0].backward(&g)?;
        Ok(())
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBlock<T>> {
        let [a, b] = &mut self.stem;
        let mut v = vec![a, b];
        for s in &mut self.stages {
            v.extend(s.blocks_mut());
        }
        v
    }

    fn blocks(&self) -> Vec<&ConvBlock<T>> {
        let mut v: Vec<&ConvBlock<T>> = self.stem.iter().collect();
        for s in &self.stages {
            v.extend(s.blocks());
        }
        v
    }
}

/// The dual-stream (or single-stream) detector.
#[derive(Clone, Debug)]
pub struct DetectorModel<T> {
    config: ModelConfig,
    backbones: Vec<Backbone<T>>,
    fuse: Option<[ConvBlock<T>; 2]>,
    neck_reduce: ConvBlock<T>,
    head5_conv: ConvBlock<T>,
    head5_out: Conv2d<T>,
    neck_up: ConvBlock<T>,
    head4_conv: ConvBlock<T>,
    head4_out: Conv2d<T>,
    up_channels: usize,
}

/// Builds a freshly initialized model; all weights come from `seed`.
pub fn build_model<T: Float>(config: &ModelConfig, seed: u64) -> Result<DetectorModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = config.activation;
    let backbones: Vec<Backbone<T>> = (0..config.mode.streams()).map(|_| Backbone::new(config, &mut rng)).collect();
    let (p4c, p5c) = (backbones[0].p4_channels(), backbones[0].p5_channels());
    let fuse = (config.mode == Mode::Fusion).then(|| {
        [
            ConvBlock::new(2 * p4c, p4c, 1, 1, act, &mut rng),
            ConvBlock::new(2 * p5c, p5c, 1, 1, act, &mut rng),
        ]
    });
    let (c128, c256, c512) = (config.width(128), config.width(256), config.width(512));
    let hc = config.head_channels();
    let head = |cin: usize, rng: &mut ChaCha8Rng| {
        let mut conv = Conv2d::new(cin, hc, 1, 1, 0, true, rng);
        let per = config.outputs_per_anchor();
        let bias = conv.bias.as_mut().expect("head conv has a bias");
        for a in 0..3 {
            bias.value.data_mut()[a * per + 4] = T::c(OBJECTNESS_PRIOR);
        }
        conv
    };
    let neck_reduce = ConvBlock::new(p5c, c256, 1, 1, act, &mut rng);
    let head5_conv = ConvBlock::new(c256, c512, 3, 1, act, &mut rng);
    let head5_out = head(c512, &mut rng);
    let neck_up = ConvBlock::new(c256, c128, 1, 1, act, &mut rng);
    let head4_conv = ConvBlock::new(c128 + p4c, c256, 3, 1, act, &mut rng);
    let head4_out = head(c256, &mut rng);
    Ok(DetectorModel {
        config: config.clone(),
        backbones,
        fuse,
        neck_reduce,
        head5_conv,
        head5_out,
        neck_up,
        head4_conv,
        head4_out,
        up_channels: c128,
    })
}

impl<T: Float> DetectorModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: Option<&Tensor<T>>, name: &str) -> Result<()> {
        let s = self.config.input_size;
        match x {
            None => Err(Error::Invalid(format!(
                "{:?} model needs a {name} input",
                self.config.mode
            ))),
            Some(t) if t.shape()[1..] != [1, s, s] => Err(Error::Shape(format!(
                "{name} input {:?}, expected (N, 1, {s}, {s})",
                t.shape()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Picks the stream inputs the mode consumes.
    fn inputs<'a>(&self, ir: Option<&'a Tensor<T>>, thermal: Option<&'a Tensor<T>>) -> Result<Vec<&'a Tensor<T>>> {
        let picked = match self.config.mode {
            Mode::Fusion => {
                self.check_input(ir, "IR")?;
                self.check_input(thermal, "thermal")?;
                let (a, b) = (ir.unwrap(), thermal.unwrap());
                if a.n() != b.n() {
                    return Err(Error::Shape(format!(
                        "IR batch {:?} and thermal batch {:?} differ",
                        a.shape(),
                        b.shape()
                    )));
                }
                vec![a, b]
            }
            Mode::SingleIr => {
                self.check_input(ir, "IR")?;
                vec![ir.unwrap()]
            }
            Mode::SingleThermal => {
                self.check_input(thermal, "thermal")?;
                vec![thermal.unwrap()]
            }
        };
        Ok(picked)
    }

    /// Fuses the two streams' taps: channel concat, then a 1×1 reduction.
    pub fn fuse_features(
        &mut self,
        ir: &BackboneFeatures<T>,
        thermal: &BackboneFeatures<T>,
        train: bool,
    ) -> Result<BackboneFeatures<T>> {
        let fuse = self
            .fuse
            .as_mut()
            .ok_or_else(|| Error::Invalid("only fusion models fuse features".into()))?;
        Ok(BackboneFeatures {
            p4: fuse[0].forward(&concat_channels(&ir.p4, &thermal.p4)?, train)?,
            p5: fuse[1].forward(&concat_channels(&ir.p5, &thermal.p5)?, train)?,
        })
    }

    fn head(
        &mut self,
        f: &BackboneFeatures<T>,
        train: bool,
    ) -> Result<RawPrediction<T>> {
        let n5 = self.neck_reduce.forward(&f.p5, train)?;
        let out5 = self.head5_out.forward(&self.head5_conv.forward(&n5, train)?)?;
        let up = upsample_nearest(&self.neck_up.forward(&n5, train)?, 2);
        let cat = concat_channels(&up, &f.p4)?;
        let out4 = self.head4_out.forward(&self.head4_conv.forward(&cat, train)?)?;
        Ok(RawPrediction { scales: [out4, out5] })
    }

    /// Training-capable forward pass; caches what [`Self::backward`] needs.
    /// Single-stream modes ignore the input they do not use.
    pub fn forward(
        &mut self,
        ir: Option<&Tensor<T>>,
        thermal: Option<&Tensor<T>>,
        train: bool,
    ) -> Result<RawPrediction<T>> {
        let inputs = self.inputs(ir, thermal)?;
        let mut feats = Vec::with_capacity(inputs.len());
        for (b, x) in self.backbones.iter_mut().zip(&inputs) {
            feats.push(b.forward(x, train)?);
        }
        let f = if feats.len() == 2 {
            self.fuse_features(&feats[0], &feats[1], train)?
        } else {
            feats.pop().expect("one stream")
        };
        self.head(&f, train)
    }

    /// Eval-mode forward through `&self`; safe to share across threads.
    pub fn infer(&self, ir: Option<&Tensor<T>>, thermal: Option<&Tensor<T>>) -> Result<RawPrediction<T>> {
        let inputs = self.inputs(ir, thermal)?;
        let feats: Vec<_> = self
            .backbones
            .iter()
            .zip(&inputs)
            .map(|(b, x)| b.infer(x))
            .collect::<Result<_>>()?;
        let f = match &self.fuse {
            Some([f4, f5]) => BackboneFeatures {
                p4: f4.infer(&concat_channels(&feats[0].p4, &feats[1].p4)?)?,
                p5: f5.infer(&concat_channels(&feats[0].p5, &feats[1].p5)?)?,
            },
            None => feats.into_iter().next().expect("one stream"),
        };
        let n5 = self.neck_reduce.infer(&f.p5)?;
        let out5 = self.head5_out.infer(&self.head5_conv.infer(&n5)?)?;
        let up = upsample_nearest(&self.neck_up.infer(&n5)?, 2);
        let out4 = self
            .head4_out
            .infer(&self.head4_conv.infer(&concat_channels(&up, &f.p4)?)?)?;
        Ok(RawPrediction { scales: [out4, out5] })
    }

    /// Accumulates parameter gradients for the upstream gradient `grad`.
    pub fn backward(&mut self, grad: &RawPrediction<T>) -> Result<()> {
        let d_h4 = self.head4_out.backward(&grad.scales[0])?;
        let d_cat = self.head4_conv.backward(&d_h4)?;
        let (d_up, d_p4) = split_channels(&d_cat, self.up_channels)?;
        let mut d_n5 = self.neck_up.backward(&upsample_nearest_backward(&d_up, 2))?;
        let d_h5 = self.head5_out.backward(&grad.scales[1])?;
        d_n5.add_assign(&self.head5_conv.backward(&d_h5)?)?;
        let d_p5 = self.neck_reduce.backward(&d_n5)?;
        match &mut self.fuse {
            Some([f4, f5]) => {
                let g4 = f4.backward(&d_p4)?;
                let g5 = f5.backward(&d_p5)?;
                let (ir4, th4) = split_channels(&g4, g4.c() / 2)?;
                let (ir5, th5) = split_channels(&g5, g5.c() / 2)?;
                self.backbones[0].backward(&BackboneFeatures { p4: ir4, p5: ir5 })?;
                self.backbones[1].backward(&BackboneFeatures { p4: th4, p5: th5 })?;
            }
            None => self.backbones[0].backward(&BackboneFeatures { p4: d_p4, p5: d_p5 })?,
        }
        Ok(())
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBlock<T>> {
        let mut v = Vec::new();
        for b in &mut self.backbones {
            v.extend(b.blocks_mut());
        }
        if let Some([a, b]) = &mut self.fuse {
            v.push(a);
            v.push(b);
        }
        v.push(&mut self.neck_reduce);
        v.push(&mut self.head5_conv);
        v.push(&mut self.neck_up);
        v.push(&mut self.head4_conv);
        v
    }

    fn blocks(&self) -> Vec<&ConvBlock<T>> {
        let mut v = Vec::new();
        for b in &self.backbones {
            v.extend(b.blocks());
        }
        if let Some(f) = &self.fuse {
            v.extend(f.iter());
        }
        v.extend([&self.neck_reduce, &self.head5_conv, &self.neck_up, &self.head4_conv]);
        v
    }

    /// Every trainable parameter in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let Self {
            backbones,
            fuse,
            neck_reduce,
            head5_conv,
            head5_out,
            neck_up,
            head4_conv,
            head4_out,
            ..
        } = self;
        let mut blocks: Vec<&mut ConvBlock<T>> = Vec::new();
        for b in backbones {
            blocks.extend(b.blocks_mut());
        }
        if let Some(f) = fuse {
            blocks.extend(f.iter_mut());
        }
        blocks.extend([neck_reduce, head5_conv, neck_up, head4_conv]);
        let mut v: Vec<&mut Parameter<T>> = blocks.into_iter().flat_map(|b| b.params_mut()).collect();
        v.extend(head5_out.params_mut());
        v.extend(head4_out.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.param_count()).sum::<usize>()
            + self.head5_out.param_count()
            + self.head4_out.param_count()
    }

    /// Weight records in the same order as [`Self::params_mut`]; batch-norm
    /// records carry the running statistics.
    pub fn records(&self) -> Vec<Record> {
        let mut r: Vec<Record> = self.blocks().iter().flat_map(|b| b.records()).collect();
        r.extend(self.head5_out.records());
        r.extend(self.head4_out.records());
        r
    }

    pub fn load_records(&mut self, records: Vec<Record>) -> Result<()> {
        let mut it = records.into_iter();
        for b in self.blocks_mut() {
            b.load_records(&mut it)?;
        }
        self.head5_out.load_records(&mut it)?;
        self.head4_out.load_records(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Invalid("weights hold more records than the model".into()));
        }
        Ok(())
    }

    /// Writes `<stem>.fvw` weights and the `<stem>.json` config sidecar.
    pub fn save(&self, weights: &Path) -> Result<()> {
        save_weights(weights, &self.records())?;
        self.config.save(&sidecar_path(weights))
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let config = ModelConfig::load(&sidecar_path(weights))?;
        let mut model = build_model(&config, 0)?;
        model.load_records(load_weights(weights)?)?;
        Ok(model)
    }
}

pub fn sidecar_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("json")
}
