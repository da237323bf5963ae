use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::coder::{decode, encode};
use super::nms::{batched_nms, nms};
use super::targets::{assign_rpn_targets, sample_pos_neg};
use crate::autograd::{Tape, Var};
use crate::backbone::{extract_taps, taps_on_tape, BottleneckParams, DiffusionBackbone, FeatureExtractionConfig, NoiseMode, PlainCnn, PYRAMID_STRIDES};
use crate::boxes::{BBox, BoxSet};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernels::roi_align_plan;
use crate::nn::{Conv2d, Linear};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DETECTOR_CHECKPOINT_VERSION: &str = "ddt-detector/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub image_side: usize,
    /// Channel widths of P2..P5 produced by either backbone.
    pub pyramid_widths: [usize; 4],
    /// Bottleneck rank is `pyramid_width / bottleneck_rank_divisor`.
    pub bottleneck_rank_divisor: usize,
    pub neck_width: usize,
    pub anchor_sizes: [f64; 4],
    pub anchor_ratios: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_top_n: usize,
    pub rpn_nms: f64,
    pub post_nms_top_n: usize,
    pub roi_size: usize,
    pub roi_hidden: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_pos_iou: f64,
    /// Box side mapped to P2 by the level-assignment rule.
    pub roi_canonical_size: f64,
    pub roi_box_weights: [f64; 4],
    pub det_nms: f64,
    pub max_detections: usize,
    pub smooth_l1_beta: f64,
    /// Proposals and detections narrower or shorter than this are dropped.
    pub min_box_size: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            image_side: 96,
            pyramid_widths: [64, 128, 256, 512],
            bottleneck_rank_divisor: 8,
            neck_width: 64,
            anchor_sizes: [8.0, 16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            pre_nms_top_n: 300,
            rpn_nms: 0.7,
            post_nms_top_n: 100,
            roi_size: 7,
            roi_hidden: 256,
            roi_batch: 64,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            roi_canonical_size: 16.0,
            roi_box_weights: [10.0, 10.0, 5.0, 5.0],
            det_nms: 0.5,
            max_detections: 100,
            smooth_l1_beta: 1.0,
            min_box_size: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.image_side < 8 {
            return bad("image_side must be at least 8");
        }
        if self.pyramid_widths.iter().any(|&w| w == 0) || self.neck_width == 0 || self.roi_hidden == 0 || self.roi_size == 0 {
            return bad("layer widths must be positive");
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad("anchor_ratios must be non-empty and positive");
        }
        if self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return bad("anchor_sizes must be positive");
        }
        if !(0.0 < self.rpn_neg_iou && self.rpn_neg_iou <= self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return bad("need 0 < rpn_neg_iou <= rpn_pos_iou <= 1");
        }
        for (n, v) in [
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("roi_pos_fraction", self.roi_pos_fraction),
            ("roi_pos_iou", self.roi_pos_iou),
            ("rpn_nms", self.rpn_nms),
            ("det_nms", self.det_nms),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{n} must lie in [0, 1]"));
            }
        }
        if self.rpn_batch == 0 || self.roi_batch == 0 || self.post_nms_top_n == 0 || self.pre_nms_top_n == 0 {
            return bad("sampling and proposal counts must be positive");
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.roi_canonical_size > 0.0) {
            return bad("smooth_l1_beta and roi_canonical_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Plain,
    Diffusion,
}

#[derive(Clone, Debug)]
enum BackboneImpl<T: Scalar> {
    Plain(PlainCnn),
    Diffusion(DiffusionBackbone<T>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Heads {
    lateral: [Conv2d; 4],
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_delta: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    bbox: Linear,
}

impl Heads {
    fn new<T: Scalar, R: Rng + ?Sized>(cfg: &DetectorConfig, ps: &mut ParamSet<T>, rng: &mut R) -> Self {
        let n = cfg.neck_width;
        let a = cfg.anchor_ratios.len();
        let k = cfg.num_classes;
        let lateral = std::array::from_fn(|l| Conv2d::new(ps, &format!("neck.lat{}", l + 2), cfg.pyramid_widths[l], n, 1, 1, true, rng));
        let rpn_conv = Conv2d::new(ps, "rpn.conv", n, n, 3, 1, true, rng);
        let rpn_obj = Conv2d::with_std(ps, "rpn.obj", n, a, 1, 0.01, rng);
        let rpn_delta = Conv2d::with_std(ps, "rpn.delta", n, 4 * a, 1, 0.01, rng);
        let din = n * cfg.roi_size * cfg.roi_size;
        let fc1 = Linear::with_std(ps, "roi.fc1", din, cfg.roi_hidden, (2.0 / din as f64).sqrt(), rng);
        let fc2 = Linear::with_std(ps, "roi.fc2", cfg.roi_hidden, cfg.roi_hidden, (2.0 / cfg.roi_hidden as f64).sqrt(), rng);
        let cls = Linear::with_std(ps, "roi.cls", cfg.roi_hidden, k + 1, 0.01, rng);
        let bbox = Linear::with_std(ps, "roi.bbox", cfg.roi_hidden, 4 * k, 0.001, rng);
        Heads { lateral, rpn_conv, rpn_obj, rpn_delta, fc1, fc2, cls, bbox }
    }
}

/// One image for the detector: `[3, H, W]` in `[-1, 1]`, its dataset id
/// (seeds the diffusion noise) and a seed used only in fresh-noise mode.
#[derive(Clone, Copy, Debug)]
pub struct DetInput<'a, T: Scalar> {
    pub image: &'a Tensor<T>,
    pub image_id: u64,
    pub noise_seed: u64,
}

impl<'a, T: Scalar> DetInput<'a, T> {
    pub fn new(image: &'a Tensor<T>, image_id: u64) -> Self {
        DetInput { image, image_id, noise_seed: 0 }
    }
}

/// The four loss terms of one image (or a sum over images).
pub struct DetectionLosses<'t, T: Scalar> {
    pub rpn_cls: Var<'t, T>,
    pub rpn_reg: Var<'t, T>,
    pub roi_cls: Var<'t, T>,
    pub roi_reg: Var<'t, T>,
}

impl<'t, T: Scalar> DetectionLosses<'t, T> {
    pub fn total(&self) -> Var<'t, T> {
        self.rpn_cls.add(self.rpn_reg).add(self.roi_cls).add(self.roi_reg)
    }

    pub fn values(&self) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg].map(|v| v.value().item().as_f64())
    }

    pub fn add(&self, other: &Self) -> Self {
        DetectionLosses {
            rpn_cls: self.rpn_cls.add(other.rpn_cls),
            rpn_reg: self.rpn_reg.add(other.rpn_reg),
            roi_cls: self.roi_cls.add(other.roi_cls),
            roi_reg: self.roi_reg.add(other.roi_reg),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        DetectionLosses {
            rpn_cls: self.rpn_cls.scale(s),
            rpn_reg: self.rpn_reg.scale(s),
            roi_cls: self.roi_cls.scale(s),
            roi_reg: self.roi_reg.scale(s),
        }
    }
}

pub const LOSS_TERMS: [&str; 4] = ["rpn_cls", "rpn_reg", "roi_cls", "roi_reg"];

#[derive(Clone, Debug)]
pub struct Detector<T: Scalar> {
    pub config: DetectorConfig,
    pub params: ParamSet<T>,
    backbone: BackboneImpl<T>,
    heads: Heads,
    anchors: Arc<Vec<BBox>>,
}

impl<T: Scalar> Detector<T> {
    /// Detector over the plain trainable CNN.
    pub fn plain<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let cnn = PlainCnn::new(&mut ps, "backbone", config.pyramid_widths, rng);
        Ok(Self::assemble(config, ps, BackboneImpl::Plain(cnn), rng))
    }

    /// Detector over the frozen denoiser; only the bottleneck and heads are
    /// parameters of the detector.
    pub fn diffusion<R: Rng + ?Sized>(
        config: DetectorConfig,
        denoiser: Arc<Denoiser<T>>,
        schedule: Arc<NoiseSchedule>,
        features: FeatureExtractionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        features.validate(schedule.t_max)?;
        if denoiser.arch().image_side != config.image_side {
            return Err(Error::Config(format!(
                "denoiser side {} differs from detector image side {}",
                denoiser.arch().image_side,
                config.image_side
            )));
        }
        let mut ps = ParamSet::new();
        let bottleneck = BottleneckParams::new(
            &mut ps,
            "bottleneck",
            denoiser.arch().stage_channels,
            features.save_steps,
            config.pyramid_widths,
            config.bottleneck_rank_divisor,
            rng,
        );
        let bb = DiffusionBackbone { denoiser, schedule, features, bottleneck };
        Ok(Self::assemble(config, ps, BackboneImpl::Diffusion(bb), rng))
    }

    fn assemble<R: Rng + ?Sized>(config: DetectorConfig, mut ps: ParamSet<T>, backbone: BackboneImpl<T>, rng: &mut R) -> Self {
        let heads = Heads::new(&config, &mut ps, rng);
        let anchors = AnchorSet::generate(config.image_side, config.image_side, &config.anchor_sizes, &config.anchor_ratios);
        Detector { config, params: ps, backbone, heads, anchors: Arc::new(anchors.all()) }
    }

    pub fn kind(&self) -> BackboneKind {
        match self.backbone {
            BackboneImpl::Plain(_) => BackboneKind::Plain,
            BackboneImpl::Diffusion(_) => BackboneKind::Diffusion,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Trainable weights on the backbone path (the bottleneck for the
    /// diffusion backbone).
    pub fn backbone_params(&self) -> usize {
        self.params.numel_with_prefix("backbone.") + self.params.numel_with_prefix("bottleneck.")
    }

    pub fn denoiser(&self) -> Option<&Arc<Denoiser<T>>> {
        match &self.backbone {
            BackboneImpl::Diffusion(d) => Some(&d.denoiser),
            BackboneImpl::Plain(_) => None,
        }
    }

    pub fn schedule(&self) -> Option<&Arc<NoiseSchedule>> {
        match &self.backbone {
            BackboneImpl::Diffusion(d) => Some(&d.schedule),
            BackboneImpl::Plain(_) => None,
        }
    }

    pub fn features(&self) -> Option<&FeatureExtractionConfig> {
        match &self.backbone {
            BackboneImpl::Diffusion(d) => Some(&d.features),
            BackboneImpl::Plain(_) => None,
        }
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    /// Same architecture with other weights.
    pub fn with_params(&self, params: ParamSet<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Shape("detector weights do not match the architecture".into()));
        }
        Ok(Detector { params, ..self.clone() })
    }

    fn check_input(&self, input: &DetInput<'_, T>) -> Result<()> {
        let s = self.config.image_side;
        if input.image.shape() != [3, s, s] {
            return Err(Error::Shape(format!("detector expects [3, {s}, {s}], got {:?}", input.image.shape())));
        }
        Ok(())
    }

    /// Backbone pyramid P2..P5 for one image.
    pub fn pyramid<'t>(&self, p: &Bound<'t, T>, input: &DetInput<'_, T>) -> Result<[Var<'t, T>; 4]> {
        self.check_input(input)?;
        let tape = p.tape();
        match &self.backbone {
            BackboneImpl::Plain(cnn) => {
                let s = self.config.image_side;
                Ok(cnn.forward(p, tape.constant(input.image.clone().reshape(&[1, 3, s, s]))))
            }
            BackboneImpl::Diffusion(d) => {
                let mut fresh = ChaCha8Rng::seed_from_u64(input.noise_seed ^ input.image_id.rotate_left(32));
                let rng: Option<&mut dyn RngCore> =
                    if d.features.noise_mode == NoiseMode::FreshRandom { Some(&mut fresh) } else { None };
                let taps = extract_taps(&d.denoiser, &d.schedule, input.image, &d.features, input.image_id, rng)?;
                d.bottleneck.project(p, &taps_on_tape(p, taps), self.config.image_side)
            }
        }
    }

    fn neck<'t>(&self, p: &Bound<'t, T>, pyr: [Var<'t, T>; 4]) -> [Var<'t, T>; 4] {
        let lat: Vec<Var<'t, T>> = (0..4).map(|l| self.heads.lateral[l].forward(p, pyr[l])).collect();
        let mut out = lat.clone();
        for l in (0..3).rev() {
            let s = lat[l].shape();
            out[l] = lat[l].add(out[l + 1].bilinear_resize(s[2], s[3]));
        }
        [out[0], out[1], out[2], out[3]]
    }

    /// Objectness logits `[A, 1]` and deltas `[A, 4]` over all anchors.
    fn rpn<'t>(&self, p: &Bound<'t, T>, feats: &[Var<'t, T>; 4]) -> (Var<'t, T>, Var<'t, T>) {
        let a = self.config.anchor_ratios.len();
        let mut obj = Vec::with_capacity(4);
        let mut del = Vec::with_capacity(4);
        for f in feats {
            let h = self.heads.rpn_conv.forward(p, *f).relu();
            let s = h.shape();
            let cells = s[2] * s[3];
            obj.push(self.heads.rpn_obj.forward(p, h).chw_to_rows().reshape(&[cells * a, 1]));
            del.push(self.heads.rpn_delta.forward(p, h).chw_to_rows().reshape(&[cells * a, 4]));
        }
        (Var::concat_rows(&obj), Var::concat_rows(&del))
    }

    fn proposals(&self, obj: &Tensor<T>, del: &Tensor<T>) -> Vec<BBox> {
        let c = &self.config;
        let side = c.image_side as f64;
        let mut order: Vec<usize> = (0..self.anchors.len()).collect();
        order.sort_by(|&a, &b| obj.data()[b].as_f64().total_cmp(&obj.data()[a].as_f64()).then(a.cmp(&b)));
        order.truncate(c.pre_nms_top_n);
        let mut boxes = Vec::with_capacity(order.len());
        let mut scores = Vec::with_capacity(order.len());
        for &i in &order {
            let d: [f64; 4] = std::array::from_fn(|k| del.data()[i * 4 + k].as_f64());
            let b = decode(d, &self.anchors[i], [1.0; 4]).clip(side, side);
            if b.w >= c.min_box_size && b.h >= c.min_box_size {
                boxes.push(b);
                scores.push(obj.data()[i].as_f64());
            }
        }
        let mut keep = nms(&boxes, &scores, c.rpn_nms);
        keep.truncate(c.post_nms_top_n);
        keep.into_iter().map(|i| boxes[i]).collect()
    }

    fn roi_level(&self, b: &BBox) -> usize {
        let s = (b.w * b.h).sqrt().max(1e-9);
        (2.0 + (s / self.config.roi_canonical_size).log2()).floor().clamp(2.0, 5.0) as usize - 2
    }

    /// ROI head outputs for `rois`: class logits `[R, K + 1]` (background
    /// last) and class-specific deltas `[R, 4K]`, in input order.
    fn roi_head<'t>(&self, p: &Bound<'t, T>, feats: &[Var<'t, T>; 4], rois: &[BBox]) -> (Var<'t, T>, Var<'t, T>) {
        let c = &self.config;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rois.len());
        for (lvl, f) in feats.iter().enumerate() {
            let idx: Vec<usize> = (0..rois.len()).filter(|&i| self.roi_level(&rois[i]) == lvl).collect();
            if idx.is_empty() {
                continue;
            }
            let s = PYRAMID_STRIDES[lvl] as f64;
            let fr: Vec<[f64; 4]> = idx.iter().map(|&i| rois[i].corners().map(|v| v / s)).collect();
            let shape = f.shape();
            let plan = Rc::new(roi_align_plan(&fr, shape[2], shape[3], c.roi_size));
            parts.push(f.roi_align(plan).reshape(&[idx.len(), shape[1] * c.roi_size * c.roi_size]));
            order.extend(idx);
        }
        let x = Var::concat_rows(&parts);
        let mut inverse = vec![0; rois.len()];
        for (row, &i) in order.iter().enumerate() {
            inverse[i] = row;
        }
        let x = x.gather_rows(&inverse);
        let h = self.heads.fc1.forward(p, x).relu();
        let h = self.heads.fc2.forward(p, h).relu();
        (self.heads.cls.forward(p, h), self.heads.bbox.forward(p, h))
    }

    /// The four training losses for one image. `fixed_proposals` replaces
    /// the RPN proposals (ground-truth boxes are still appended).
    pub fn detection_loss<'t>(
        &self,
        p: &Bound<'t, T>,
        input: &DetInput<'_, T>,
        gt: &BoxSet,
        rng: &mut dyn RngCore,
        fixed_proposals: Option<&[BBox]>,
    ) -> Result<DetectionLosses<'t, T>> {
        let c = &self.config;
        if gt.labels.iter().any(|&l| l >= c.num_classes) {
            return Err(Error::Range(format!("ground-truth label outside 0..{}", c.num_classes)));
        }
        let feats = self.neck(p, self.pyramid(p, input)?);
        let (obj, del) = self.rpn(p, &feats);
        let n = self.anchors.len();

        let t = assign_rpn_targets(&self.anchors, gt, c.rpn_pos_iou, c.rpn_neg_iou);
        let (pos, neg) = sample_pos_neg(&t.positives(), &t.negatives(), c.rpn_batch, c.rpn_pos_fraction, rng);
        let norm = T::lit(1.0 / (pos.len() + neg.len()).max(1) as f64);
        let mut targets = vec![T::zero(); n];
        let mut weights = vec![T::zero(); n];
        let mut reg_t = Tensor::zeros(&[n, 4]);
        let mut reg_w = Tensor::zeros(&[n, 4]);
        for &i in &pos {
            targets[i] = T::one();
            weights[i] = norm;
            for k in 0..4 {
                reg_t.data_mut()[i * 4 + k] = T::lit(t.deltas[i][k]);
                reg_w.data_mut()[i * 4 + k] = norm;
            }
        }
        for &i in &neg {
            weights[i] = norm;
        }
        let rpn_cls = obj.bce_with_logits(&targets, &weights);
        let rpn_reg = del.smooth_l1(&reg_t, &reg_w, c.smooth_l1_beta);

        let mut rois = match fixed_proposals {
            Some(f) => f.to_vec(),
            None => self.proposals(&obj.value(), &del.value()),
        };
        rois.extend_from_slice(&gt.boxes);
        let k = c.num_classes;
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut match_of = vec![None; rois.len()];
        for (i, r) in rois.iter().enumerate() {
            let best = gt.boxes.iter().enumerate().map(|(j, g)| (j, r.iou(g))).fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
            if best.1 >= c.roi_pos_iou {
                fg.push(i);
                match_of[i] = Some(best.0);
            } else {
                bg.push(i);
            }
        }
        let (fg, bg) = sample_pos_neg(&fg, &bg, c.roi_batch, c.roi_pos_fraction, rng);
        let sampled: Vec<usize> = fg.iter().chain(&bg).copied().collect();
        let roi_cls;
        let roi_reg;
        if sampled.is_empty() {
            roi_cls = p.tape().constant(Tensor::scalar(T::zero()));
            roi_reg = p.tape().constant(Tensor::scalar(T::zero()));
        } else {
            let boxes: Vec<BBox> = sampled.iter().map(|&i| rois[i]).collect();
            let (logits, deltas) = self.roi_head(p, &feats, &boxes);
            let r = sampled.len();
            let w = T::lit(1.0 / r as f64);
            let mut labels = vec![k; r];
            let mut bt = Tensor::zeros(&[r, 4 * k]);
            let mut bw = Tensor::zeros(&[r, 4 * k]);
            for (row, &i) in sampled.iter().enumerate() {
                if let Some(j) = match_of[i] {
                    let cls = gt.labels[j];
                    labels[row] = cls;
                    let d = encode(&gt.boxes[j], &rois[i], c.roi_box_weights);
                    for q in 0..4 {
                        bt.data_mut()[row * 4 * k + 4 * cls + q] = T::lit(d[q]);
                        bw.data_mut()[row * 4 * k + 4 * cls + q] = w;
                    }
                }
            }
            roi_cls = logits.softmax_cross_entropy(&labels, &vec![w; r]);
            roi_reg = deltas.smooth_l1(&bt, &bw, c.smooth_l1_beta);
        }
        let losses = DetectionLosses { rpn_cls, rpn_reg, roi_cls, roi_reg };
        for (name, v) in LOSS_TERMS.iter().zip(losses.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: (*name).into(), step: 0, detail: format!("image {}", input.image_id) });
            }
        }
        Ok(losses)
    }

    /// Scored detections with score strictly above `score_floor`.
    pub fn detect(&self, input: &DetInput<'_, T>, score_floor: f64) -> Result<BoxSet> {
        self.detect_with(&self.params, input, score_floor)
    }

    /// [`Detector::detect`] with another set of weights of this architecture.
    pub fn detect_with(&self, params: &ParamSet<T>, input: &DetInput<'_, T>, score_floor: f64) -> Result<BoxSet> {
        if !self.params.same_layout(params) {
            return Err(Error::Shape("detector weights do not match the architecture".into()));
        }
        let c = &self.config;
        let tape = Tape::inference();
        let p = params.bind(&tape, false);
        let feats = self.neck(&p, self.pyramid(&p, input)?);
        let (obj, del) = self.rpn(&p, &feats);
        let props = self.proposals(&obj.value(), &del.value());
        if props.is_empty() {
            return Ok(BoxSet::scored(vec![], vec![], vec![]));
        }
        let (logits, deltas) = self.roi_head(&p, &feats, &props);
        let (logits, deltas) = (logits.value(), deltas.value());
        let k = c.num_classes;
        let side = c.image_side as f64;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (r, prop) in props.iter().enumerate() {
            let row: Vec<f64> = logits.data()[r * (k + 1)..(r + 1) * (k + 1)].iter().map(|v| v.as_f64()).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for cls in 0..k {
                let s = (row[cls] - m).exp() / z;
                if !(s > score_floor) {
                    continue;
                }
                let d: [f64; 4] = std::array::from_fn(|q| deltas.data()[r * 4 * k + 4 * cls + q].as_f64());
                let b = decode(d, prop, c.roi_box_weights).clip(side, side);
                if b.w >= c.min_box_size && b.h >= c.min_box_size {
                    boxes.push(b);
                    scores.push(s.clamp(0.0, 1.0));
                    labels.push(cls);
                }
            }
        }
        let mut keep = batched_nms(&boxes, &scores, &labels, c.det_nms);
        keep.truncate(c.max_detections);
        Ok(BoxSet::scored(
            keep.iter().map(|&i| boxes[i]).collect(),
            keep.iter().map(|&i| labels[i]).collect(),
            keep.iter().map(|&i| scores[i]).collect(),
        ))
    }

    /// [`Detector::detect_with`] over many images, in parallel.
    pub fn detect_batch(&self, params: &ParamSet<T>, inputs: &[DetInput<'_, T>], score_floor: f64) -> Result<Vec<BoxSet>> {
        inputs.par_iter().map(|x| self.detect_with(params, x, score_floor)).collect()
    }

    pub fn checkpoint(&self) -> DetectorCheckpoint<T> {
        DetectorCheckpoint {
            version: DETECTOR_CHECKPOINT_VERSION.into(),
            scalar: T::NAME.into(),
            kind: self.kind(),
            config: self.config.clone(),
            features: self.features().cloned(),
            denoiser_checksum: self.denoiser().map(|d| d.params.checksum()),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a detector from a checkpoint. Diffusion detectors need the
    /// same frozen denoiser they were trained with.
    pub fn from_checkpoint(ck: DetectorCheckpoint<T>, diffusion: Option<(Arc<Denoiser<T>>, Arc<NoiseSchedule>)>) -> Result<Self> {
        if ck.version != DETECTOR_CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported detector checkpoint version {:?}", ck.version)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fresh = match (ck.kind, diffusion) {
            (BackboneKind::Plain, _) => Self::plain(ck.config, &mut rng)?,
            (BackboneKind::Diffusion, Some((den, sched))) => {
                if ck.denoiser_checksum.as_deref() != Some(den.params.checksum().as_str()) {
                    return Err(Error::Checkpoint("checkpoint was trained on a different denoiser".into()));
                }
                let features = ck.features.ok_or_else(|| Error::Checkpoint("missing feature extraction config".into()))?;
                Self::diffusion(ck.config, den, sched, features, &mut rng)?
            }
            (BackboneKind::Diffusion, None) => {
                return Err(Error::Checkpoint("diffusion detector checkpoint needs its denoiser".into()));
            }
        };
        fresh.with_params(ck.params)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DetectorCheckpoint<T: Scalar> {
    pub version: String,
    pub scalar: String,
    pub kind: BackboneKind,
    pub config: DetectorConfig,
    pub features: Option<FeatureExtractionConfig>,
    pub denoiser_checksum: Option<String>,
    pub params: ParamSet<T>,
}
