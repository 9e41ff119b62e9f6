//! Forward and backward passes of the detector's building blocks, and the
//! eval/train forward API.

use serde::{Deserialize, Serialize};

use super::arch::{ArchConfig, BoxMode};
use super::ops::{add_bias, col_sums, gemm, relu_backward, relu_inplace, ConvShape};
use super::params::{layout, Layout, ModelParameters, ParamSet, StageLayout};
use super::roi::{FeatureGeometry, RoiTaps};
use crate::error::{Error, Result};
use crate::geometry::{nms, nms_agnostic, BoxXYXY, ScoredBox};
use crate::image::Image;
use crate::losses::sigmoid;

pub const RPN_NMS_IOU: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// Sigmoid kept strictly inside `(0, 1)`.
pub fn score(z: f64) -> f64 {
    sigmoid(z).clamp(1e-15, 1.0 - 1e-15)
}

pub(crate) struct ConvCache {
    pub shape: ConvShape,
    pub cols: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) struct BackboneCache {
    pub convs: Vec<ConvCache>,
}

impl BackboneCache {
    pub fn features(&self) -> &[f64] {
        &self.convs.last().expect("three conv layers").out
    }
}

pub(crate) struct RpnCache {
    pub conv: ConvCache,
    /// One logit per anchor.
    pub logits: Vec<f64>,
    /// Four deltas per anchor.
    pub deltas: Vec<f64>,
}

pub(crate) struct StageCache {
    pub taps: Vec<RoiTaps>,
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl StageCache {
    pub fn rows(&self) -> usize {
        self.taps.len()
    }
}

/// Parameters bound to their architecture, with tensor indices resolved.
pub struct Network<'a> {
    pub arch: &'a ArchConfig,
    pub params: &'a ModelParameters,
    pub layout: Layout,
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a ArchConfig, params: &'a ModelParameters) -> Result<Self> {
        arch.validate()?;
        let expected = super::params::zero_params(arch);
        if !expected.same_layout(params) {
            return Err(Error::Invalid(
                "parameters do not match the architecture".into(),
            ));
        }
        Ok(Self {
            arch,
            params,
            layout: layout(arch),
        })
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.params.tensors[i].data
    }

    pub fn geometry(&self) -> FeatureGeometry {
        FeatureGeometry {
            size: self.arch.feature_size(),
            channels: self.arch.feature_channels(),
            stride: self.arch.stride(),
        }
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.arch.image_size;
        if image.height != s || image.width != s || image.channels != self.arch.in_channels {
            return Err(Error::Invalid(format!(
                "image is {}x{}x{}, the network expects {s}x{s}x{}",
                image.height, image.width, image.channels, self.arch.in_channels
            )));
        }
        Ok(())
    }

    pub(crate) fn backbone_forward(&self, image: &Image) -> BackboneCache {
        let mut input = image.data.clone();
        let (mut h, mut cin) = (self.arch.image_size, self.arch.in_channels);
        let mut convs = Vec::with_capacity(3);
        for (i, &cout) in self.arch.backbone_channels.iter().enumerate() {
            let shape = ConvShape {
                h,
                w: h,
                cin,
                cout,
                stride: 2,
            };
            let (w, b) = self.layout.conv[i];
            let (mut out, cols) = shape.forward(&input, self.t(w), self.t(b));
            relu_inplace(&mut out);
            input = out.clone();
            convs.push(ConvCache { shape, cols, out });
            h = shape.out_h();
            cin = cout;
        }
        BackboneCache { convs }
    }

    pub(crate) fn backbone_backward(
        &self,
        cache: &BackboneCache,
        mut dout: Vec<f64>,
        grads: &mut ParamSet,
    ) {
        for i in (0..cache.convs.len()).rev() {
            let c = &cache.convs[i];
            relu_backward(&c.out, &mut dout);
            let (w, b) = self.layout.conv[i];
            let mut dinput = if i > 0 {
                Some(vec![0.0; cache.convs[i - 1].out.len()])
            } else {
                None
            };
            let (gw, gb) = two_mut(&mut grads.tensors, w, b);
            c.shape
                .backward(&c.cols, self.t(w), &dout, &mut gw.data, &mut gb.data, dinput.as_deref_mut());
            match dinput {
                Some(d) => dout = d,
                None => break,
            }
        }
    }

    pub(crate) fn rpn_forward(&self, features: &[f64]) -> RpnCache {
        let f = self.arch.feature_size();
        let shape = ConvShape {
            h: f,
            w: f,
            cin: self.arch.feature_channels(),
            cout: self.arch.rpn_channels,
            stride: 1,
        };
        let (w, b) = self.layout.rpn_conv;
        let (mut out, cols) = shape.forward(features, self.t(w), self.t(b));
        relu_inplace(&mut out);
        let cells = f * f;
        let a = self.arch.anchors_per_cell();
        let c = self.arch.rpn_channels;
        let mut logits = vec![0.0; cells * a];
        let (ow, ob) = self.layout.rpn_obj;
        gemm(cells, c, a, &out, false, self.t(ow), false, &mut logits, false);
        add_bias(&mut logits, self.t(ob));
        let mut deltas = vec![0.0; cells * 4 * a];
        let (dw, db) = self.layout.rpn_delta;
        gemm(cells, c, 4 * a, &out, false, self.t(dw), false, &mut deltas, false);
        add_bias(&mut deltas, self.t(db));
        RpnCache {
            conv: ConvCache { shape, cols, out },
            logits,
            deltas,
        }
    }

    /// Backward through the RPN head; accumulates into `dfeatures`.
    pub(crate) fn rpn_backward(
        &self,
        cache: &RpnCache,
        dlogits: &[f64],
        ddeltas: &[f64],
        grads: &mut ParamSet,
        dfeatures: &mut [f64],
    ) {
        let f = self.arch.feature_size();
        let cells = f * f;
        let a = self.arch.anchors_per_cell();
        let c = self.arch.rpn_channels;
        let h = &cache.conv.out;
        let mut dh = vec![0.0; cells * c];
        let (ow, ob) = self.layout.rpn_obj;
        {
            let (gw, gb) = two_mut(&mut grads.tensors, ow, ob);
            gemm(c, cells, a, h, true, dlogits, false, &mut gw.data, true);
            col_sums(dlogits, &mut gb.data);
        }
        gemm(cells, a, c, dlogits, false, self.t(ow), true, &mut dh, true);
        let (dw, db) = self.layout.rpn_delta;
        {
            let (gw, gb) = two_mut(&mut grads.tensors, dw, db);
            gemm(c, cells, 4 * a, h, true, ddeltas, false, &mut gw.data, true);
            col_sums(ddeltas, &mut gb.data);
        }
        gemm(cells, 4 * a, c, ddeltas, false, self.t(dw), true, &mut dh, true);
        relu_backward(h, &mut dh);
        let (w, b) = self.layout.rpn_conv;
        let (gw, gb) = two_mut(&mut grads.tensors, w, b);
        let mut dfeat = vec![0.0; dfeatures.len()];
        cache
            .conv
            .shape
            .backward(&cache.conv.cols, self.t(w), &dh, &mut gw.data, &mut gb.data, Some(&mut dfeat));
        for (d, v) in dfeatures.iter_mut().zip(dfeat) {
            *d += v;
        }
    }

    /// Decoded, clipped, class-agnostic NMS'd proposals with objectness
    /// scores, at most `cap` of them.
    pub(crate) fn proposals(&self, rpn: &RpnCache, cap: Option<usize>) -> (Vec<BoxXYXY>, Vec<f64>) {
        let size = self.arch.image_size as f64;
        let anchors = self.arch.anchors();
        let boxes: Vec<BoxXYXY> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                self.arch
                    .rpn_coder
                    .decode(a, &rpn.deltas[4 * i..4 * i + 4])
                    .clip(size, size, 1.0)
            })
            .collect();
        let scores: Vec<f64> = rpn.logits.iter().map(|&z| score(z)).collect();
        let mut keep = nms_agnostic(&boxes, &scores, RPN_NMS_IOU);
        if let Some(cap) = cap {
            keep.truncate(cap);
        }
        (
            keep.iter().map(|&i| boxes[i]).collect(),
            keep.iter().map(|&i| scores[i]).collect(),
        )
    }

    pub(crate) fn stage_forward(&self, stage: usize, features: &[f64], boxes: &[BoxXYXY]) -> StageCache {
        let sl: &StageLayout = &self.layout.stages[stage];
        let geom = self.geometry();
        let n = boxes.len();
        let d = self.arch.roi_dim();
        let hdim = self.arch.hidden;
        let k = self.arch.num_classes;
        let bo = self.arch.box_outputs();
        let mut pooled = vec![0.0; n * d];
        let taps: Vec<RoiTaps> = boxes
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let t = RoiTaps::new(geom, self.arch.roi_size, self.arch.roi_samples, b);
                t.forward(features, geom.channels, &mut pooled[r * d..(r + 1) * d]);
                t
            })
            .collect();
        let mut hidden = vec![0.0; n * hdim];
        gemm(n, d, hdim, &pooled, false, self.t(sl.fc.0), false, &mut hidden, false);
        add_bias(&mut hidden, self.t(sl.fc.1));
        relu_inplace(&mut hidden);
        let mut logits = vec![0.0; n * k];
        gemm(n, hdim, k, &hidden, false, self.t(sl.cls.0), false, &mut logits, false);
        add_bias(&mut logits, self.t(sl.cls.1));
        let mut deltas = vec![0.0; n * bo];
        gemm(n, hdim, bo, &hidden, false, self.t(sl.bbox.0), false, &mut deltas, false);
        add_bias(&mut deltas, self.t(sl.bbox.1));
        StageCache {
            taps,
            pooled,
            hidden,
            logits,
            deltas,
        }
    }

    pub(crate) fn stage_backward(
        &self,
        stage: usize,
        cache: &StageCache,
        dlogits: &[f64],
        ddeltas: &[f64],
        grads: &mut ParamSet,
        dfeatures: &mut [f64],
    ) {
        let sl = &self.layout.stages[stage];
        let n = cache.rows();
        if n == 0 {
            return;
        }
        let d = self.arch.roi_dim();
        let hdim = self.arch.hidden;
        let k = self.arch.num_classes;
        let bo = self.arch.box_outputs();
        let mut dh = vec![0.0; n * hdim];
        {
            let (gw, gb) = two_mut(&mut grads.tensors, sl.cls.0, sl.cls.1);
            gemm(hdim, n, k, &cache.hidden, true, dlogits, false, &mut gw.data, true);
            col_sums(dlogits, &mut gb.data);
        }
        gemm(n, k, hdim, dlogits, false, self.t(sl.cls.0), true, &mut dh, true);
        {
            let (gw, gb) = two_mut(&mut grads.tensors, sl.bbox.0, sl.bbox.1);
            gemm(hdim, n, bo, &cache.hidden, true, ddeltas, false, &mut gw.data, true);
            col_sums(ddeltas, &mut gb.data);
        }
        gemm(n, bo, hdim, ddeltas, false, self.t(sl.bbox.0), true, &mut dh, true);
        relu_backward(&cache.hidden, &mut dh);
        {
            let (gw, gb) = two_mut(&mut grads.tensors, sl.fc.0, sl.fc.1);
            gemm(d, n, hdim, &cache.pooled, true, &dh, false, &mut gw.data, true);
            col_sums(&dh, &mut gb.data);
        }
        let mut dpooled = vec![0.0; n * d];
        gemm(n, hdim, d, &dh, false, self.t(sl.fc.0), true, &mut dpooled, false);
        let ch = self.arch.feature_channels();
        for (r, t) in cache.taps.iter().enumerate() {
            t.backward(&dpooled[r * d..(r + 1) * d], ch, dfeatures);
        }
    }

    /// Highest-scoring class of row `r` (lowest index on ties).
    pub fn argmax_class(logits: &[f64], k: usize, r: usize) -> usize {
        let row = &logits[r * k..(r + 1) * k];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    }

    /// Box-delta channel that feeds the next stage for row `r`.
    pub fn resample_channel(&self, cache_logits: &[f64], r: usize) -> usize {
        match self.arch.box_mode {
            BoxMode::Shared => 0,
            BoxMode::CategorySpecific => {
                Self::argmax_class(cache_logits, self.arch.num_classes, r)
            }
        }
    }

    /// Decode `deltas[r]` at `channel` relative to `boxes[r]` with the
    /// stage's coder and clip to the image.
    pub fn decode_row(
        &self,
        stage: usize,
        boxes: &[BoxXYXY],
        deltas: &[f64],
        r: usize,
        channel: usize,
    ) -> BoxXYXY {
        let size = self.arch.image_size as f64;
        let bo = self.arch.box_outputs();
        let base = r * bo + 4 * channel;
        self.arch.stage_coders[stage]
            .decode(&boxes[r], &deltas[base..base + 4])
            .clip(size, size, 1.0)
    }

    /// Input boxes of stage `stage + 1`.
    pub(crate) fn refine(&self, stage: usize, boxes: &[BoxXYXY], cache: &StageCache) -> Vec<BoxXYXY> {
        (0..boxes.len())
            .map(|r| {
                let ch = self.resample_channel(&cache.logits, r);
                self.decode_row(stage, boxes, &cache.deltas, r, ch)
            })
            .collect()
    }

    /// Full forward pass for a batch of images.
    ///
    /// Train phase keeps the top proposals (`train_cap`) and appends
    /// `extra[i]` to image `i`'s proposals; eval phase keeps every post-NMS
    /// proposal and ignores `extra`.
    pub fn forward(
        &self,
        images: &[Image],
        phase: Phase,
        train_cap: usize,
        extra: &[Vec<BoxXYXY>],
    ) -> Result<Vec<NetworkOutputs>> {
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                self.check_image(img)?;
                let bb = self.backbone_forward(img);
                let rpn = self.rpn_forward(bb.features());
                let cap = match phase {
                    Phase::Train => Some(train_cap),
                    Phase::Eval => None,
                };
                let (mut boxes, mut proposal_scores) = self.proposals(&rpn, cap);
                if phase == Phase::Train {
                    if let Some(e) = extra.get(i) {
                        boxes.extend_from_slice(e);
                        proposal_scores.extend(std::iter::repeat(1.0).take(e.len()));
                    }
                }
                let proposals = boxes.clone();
                let mut stages = Vec::with_capacity(self.arch.num_stages());
                for s in 0..self.arch.num_stages() {
                    let cache = self.stage_forward(s, bb.features(), &boxes);
                    let next = self.refine(s, &boxes, &cache);
                    let k = self.arch.num_classes;
                    let bo = self.arch.box_outputs();
                    stages.push(StageOutputs {
                        boxes: std::mem::replace(&mut boxes, next),
                        scores: cache
                            .logits
                            .chunks(k)
                            .map(|row| row.iter().map(|&z| score(z)).collect())
                            .collect(),
                        deltas: cache.deltas.chunks(bo).map(<[f64]>::to_vec).collect(),
                    });
                }
                Ok(NetworkOutputs {
                    features: bb.features().to_vec(),
                    objectness: rpn.logits,
                    rpn_deltas: rpn.deltas,
                    proposals,
                    proposal_scores,
                    stages,
                })
            })
            .collect()
    }

    /// Eval-phase detections of one image.
    pub fn detect(&self, image: &Image, cfg: &DetectConfig) -> Result<Vec<ScoredBox>> {
        let out = self.forward(std::slice::from_ref(image), Phase::Eval, 0, &[])?;
        Ok(out[0].detections(self, cfg))
    }
}

/// Mutable references to two distinct tensors.
fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    /// Input boxes of the stage, one per proposal.
    pub boxes: Vec<BoxXYXY>,
    /// Sigmoid class scores over the unified space.
    pub scores: Vec<Vec<f64>>,
    /// Raw box deltas (4 or 4K per row).
    pub deltas: Vec<Vec<f64>>,
}

/// Everything a forward pass produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutputs {
    /// `size x size x channels` feature map.
    pub features: Vec<f64>,
    pub objectness: Vec<f64>,
    pub rpn_deltas: Vec<f64>,
    pub proposals: Vec<BoxXYXY>,
    pub proposal_scores: Vec<f64>,
    pub stages: Vec<StageOutputs>,
}

/// Post-processing of eval-phase outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub min_score: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            min_score: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl NetworkOutputs {
    pub fn final_stage(&self) -> &StageOutputs {
        self.stages.last().expect("at least one stage")
    }

    /// Final box of proposal `r` for class `c`: the class's own channel in
    /// category-specific mode, the shared channel otherwise.
    pub fn class_box(&self, net: &Network<'_>, r: usize, c: usize) -> BoxXYXY {
        let s = self.stages.len() - 1;
        let st = &self.stages[s];
        let channel = match net.arch.box_mode {
            BoxMode::Shared => 0,
            BoxMode::CategorySpecific => c,
        };
        net.decode_row(s, std::slice::from_ref(&st.boxes[r]), &st.deltas[r], 0, channel)
    }

    pub fn detections(&self, net: &Network<'_>, cfg: &DetectConfig) -> Vec<ScoredBox> {
        let st = self.final_stage();
        let mut dets = Vec::new();
        for (r, row) in st.scores.iter().enumerate() {
            for (c, &p) in row.iter().enumerate() {
                if p >= cfg.min_score {
                    let b = self.class_box(net, r, c);
                    dets.push(ScoredBox {
                        bbox: b,
                        class_id: c,
                        score: p,
                    });
                }
            }
        }
        let mut keep = nms(&dets, cfg.nms_iou);
        keep.truncate(cfg.max_detections);
        keep.into_iter().map(|i| dets[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    fn image(seed: u64) -> Image {
        let mut rng = crate::rng::SplitMix64::new(seed);
        let data = (0..64 * 64 * 3).map(|_| rng.next_f64()).collect();
        Image::new(64, 64, 3, data).unwrap()
    }

    #[test]
    fn batch_shapes() {
        let arch = ArchConfig::default();
        let p = init_params(&arch, 0).unwrap();
        let net = Network::new(&arch, &p).unwrap();
        let imgs: Vec<Image> = (0..4).map(image).collect();
        let out = net.forward(&imgs, Phase::Eval, 0, &[]).unwrap();
        assert_eq!(out.len(), 4);
        for o in &out {
            assert_eq!(o.features.len(), 8 * 8 * 32);
            assert_eq!(o.objectness.len(), 192);
            assert!(o.proposals.len() <= 192 && !o.proposals.is_empty());
            assert_eq!(o.stages.len(), 2);
            for s in &o.stages {
                assert!(s.scores.iter().flatten().all(|&p| p > 0.0 && p < 1.0));
            }
        }
        let train = net
            .forward(&imgs[..1], Phase::Train, 5, &[vec![BoxXYXY::new(1., 1., 9., 9.).unwrap()]])
            .unwrap();
        assert_eq!(train[0].proposals.len(), 6);
    }

    #[test]
    fn deterministic_forward() {
        let arch = ArchConfig::default();
        let p = init_params(&arch, 3).unwrap();
        let net = Network::new(&arch, &p).unwrap();
        let a = net.forward(&[image(1)], Phase::Eval, 0, &[]).unwrap();
        let b = net.forward(&[image(1)], Phase::Eval, 0, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_features_give_prior_scores() {
        let arch = ArchConfig::default();
        let mut p = init_params(&arch, 0).unwrap();
        for t in &mut p.tensors {
            if t.name.starts_with("rcn") && t.name.ends_with("fc.weight") {
                t.data.fill(0.0);
            }
        }
        let net = Network::new(&arch, &p).unwrap();
        let out = net.forward(&[image(0)], Phase::Eval, 0, &[]).unwrap();
        let s = out[0].stages[0].scores[0][0];
        assert!((s - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((s - 0.119).abs() < 1e-3);
    }

    #[test]
    fn category_specific_resamples_argmax_class() {
        let arch = ArchConfig::with_classes(6, BoxMode::CategorySpecific);
        let p = init_params(&arch, 0).unwrap();
        let net = Network::new(&arch, &p).unwrap();
        let mut logits = vec![-5.0; 6];
        logits[2] = (0.9f64 / 0.1).ln();
        logits[5] = (0.4f64 / 0.6).ln();
        assert_eq!(net.resample_channel(&logits, 0), 2);
    }

    #[test]
    fn equal_channels_match_shared_mode() {
        let shared = ArchConfig::default();
        let specific = ArchConfig::with_classes(12, BoxMode::CategorySpecific);
        let ps = init_params(&shared, 5).unwrap();
        let mut pc = init_params(&specific, 5).unwrap();
        for (a, b) in pc.tensors.iter_mut().zip(&ps.tensors) {
            if a.shape == b.shape {
                a.data.clone_from(&b.data);
            } else {
                // tile the shared 4-wide box head over every class channel
                let (rows, w) = if a.shape.len() == 2 { (a.shape[0], a.shape[1]) } else { (1, a.shape[0]) };
                for r in 0..rows {
                    for c in 0..w {
                        a.data[r * w + c] = b.data[r * 4 + c % 4];
                    }
                }
            }
        }
        let img = image(9);
        let o1 = Network::new(&shared, &ps).unwrap().forward(&[img.clone()], Phase::Eval, 0, &[]).unwrap();
        let o2 = Network::new(&specific, &pc).unwrap().forward(&[img], Phase::Eval, 0, &[]).unwrap();
        assert_eq!(o1[0].stages[1].boxes, o2[0].stages[1].boxes);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let arch = ArchConfig::default();
        let p = init_params(&arch, 0).unwrap();
        let net = Network::new(&arch, &p).unwrap();
        let img = Image::filled(32, 32, 3, 0.0);
        assert!(net.forward(&[img], Phase::Eval, 0, &[]).is_err());
    }
}
