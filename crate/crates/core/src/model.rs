//! The full U-shaped segmentation network: a DDC + encoder-block-pair
//! hierarchy, a bottleneck pair, a mirrored DUC + decoder-block-pair path
//! consuming the encoder skips, and two softmax heads (segmentation at 1/4
//! resolution via a 4× DUC, auxiliary at 1/8 via an 8× DUC).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Mask;
use crate::nn::{
    BnStats, Conv2dLayer, Ddc, DecoderBlockPair, DecoderMode, Duc, EncoderBlockPair, Param,
};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Static shape plan of the network. The stage lists must have equal
/// length; stage i runs at 1/(∏ downsamples[..=i]) of the input resolution.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stage_downsamples: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub use_conv_projection: bool,
    pub use_cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_base_channels(32)
    }
}

impl ModelConfig {
    pub fn with_base_channels(c0: usize) -> Self {
        ModelConfig {
            in_channels: 1,
            base_channels: c0,
            stage_downsamples: vec![4, 2, 2],
            stage_channels: vec![c0, 2 * c0, 4 * c0],
            heads: vec![2, 4, 8],
            window_size: 4,
            num_classes: 2,
            mlp_ratio: 4,
            use_conv_projection: true,
            use_cross_attention: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_downsamples.len()
    }

    /// Cumulative downsample factor after each stage.
    pub fn cumulative_downsamples(&self) -> Vec<usize> {
        self.stage_downsamples
            .iter()
            .scan(1usize, |acc, &d| {
                *acc *= d;
                Some(*acc)
            })
            .collect()
    }

    /// Input H and W must be divisible by this for every stage to tile into
    /// windows.
    pub fn input_divisor(&self) -> usize {
        self.cumulative_downsamples().last().copied().unwrap_or(1) * self.window_size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n < 2 {
            return Err(Error::InvalidConfig(
                "at least 2 stages are required (the auxiliary head taps the second stage's resolution)".into(),
            ));
        }
        if self.stage_channels.len() != n || self.heads.len() != n {
            return Err(Error::InvalidConfig(format!(
                "stage_downsamples ({n}), stage_channels ({}) and heads ({}) must have equal length",
                self.stage_channels.len(),
                self.heads.len()
            )));
        }
        if self.stage_downsamples.iter().any(|&d| d < 2) {
            return Err(Error::InvalidConfig("stage downsample factors must be >= 2".into()));
        }
        for (c, h) in self.stage_channels.iter().zip(self.heads.iter()) {
            if *h == 0 || c % h != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage channels {c} must be divisible by heads {h}"
                )));
            }
        }
        if self.window_size < 2 {
            return Err(Error::InvalidConfig("window_size must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("in_channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidConfig(format!(
                "expected input [B, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        for (i, cum) in self.cumulative_downsamples().iter().enumerate() {
            let need = cum * self.window_size;
            if shape[2] % need != 0 || shape[3] % need != 0 {
                return Err(Error::InvalidConfig(format!(
                    "input {}x{} does not tile stage {i}: H and W must be divisible by {need}",
                    shape[2], shape[3]
                )));
            }
        }
        Ok(())
    }
}

/// The two softmax maps produced in training mode.
#[derive(Debug, Clone, Copy)]
pub struct PredictionPair {
    pub p_s: TensorId,
    pub p_a: TensorId,
}

struct EncoderStage {
    ddc: Ddc,
    pair: EncoderBlockPair,
}

struct DecoderStage {
    duc: Option<Duc>,
    pair: DecoderBlockPair,
}

struct Head {
    duc: Duc,
    conv: Conv2dLayer,
}

impl Head {
    fn forward(&self, t: &mut Tape, x: TensorId, train: bool) -> Result<TensorId> {
        let up = self.duc.forward(t, x, train)?;
        let logits = self.conv.forward(t, up)?;
        Ok(t.softmax(logits, 1)?)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.duc.collect_params(&format!("{prefix}.duc"), out);
        self.conv.collect_params(&format!("{prefix}.conv"), out);
    }
}

pub struct Model {
    pub config: ModelConfig,
    encoder: Vec<EncoderStage>,
    bottleneck: EncoderBlockPair,
    decoder: Vec<DecoderStage>,
    seg_head: Head,
    aux_head: Head,
}

impl Model {
    /// Deterministically initialize the network from a seed; the parameter
    /// set is a pure function of `(config, seed)`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let n = config.stages();
        let ch = &config.stage_channels;
        let conv_proj = config.use_conv_projection;
        let mode = if config.use_cross_attention {
            DecoderMode::CrossAttention
        } else {
            DecoderMode::ConcatFuse
        };

        let mut encoder = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { config.in_channels } else { ch[i - 1] };
            encoder.push(EncoderStage {
                ddc: Ddc::new(r, c_in, ch[i], config.stage_downsamples[i]),
                pair: EncoderBlockPair::new(
                    r,
                    ch[i],
                    config.heads[i],
                    config.window_size,
                    config.mlp_ratio,
                    conv_proj,
                )
                .map_err(Error::Tensor)?,
            });
        }
        let bottleneck = EncoderBlockPair::new(
            r,
            ch[n - 1],
            config.heads[n - 1],
            config.window_size,
            config.mlp_ratio,
            conv_proj,
        )
        .map_err(Error::Tensor)?;

        let mut decoder_rev = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let duc = if i < n - 1 {
                Some(Duc::new(r, ch[i + 1], ch[i], config.stage_downsamples[i + 1]))
            } else {
                None
            };
            let pair = DecoderBlockPair::new(
                r,
                ch[i],
                config.heads[i],
                config.window_size,
                config.mlp_ratio,
                conv_proj,
                mode,
            )
            .map_err(Error::Tensor)?;
            decoder_rev.push(DecoderStage { duc, pair });
        }
        decoder_rev.reverse();

        let cum = config.cumulative_downsamples();
        let seg_head = Head {
            duc: Duc::new(r, ch[0], ch[0], cum[0]),
            conv: Conv2dLayer::new(r, ch[0], config.num_classes, 1, 1, 0, 1),
        };
        let aux_head = Head {
            duc: Duc::new(r, ch[1], ch[0], cum[1]),
            conv: Conv2dLayer::new(r, ch[0], config.num_classes, 1, 1, 0, 1),
        };

        Ok(Model { config, encoder, bottleneck, decoder: decoder_rev, seg_head, aux_head })
    }

    /// Run the network. Training mode updates batch-norm running statistics
    /// and always produces both heads; in eval mode the auxiliary head is
    /// computed only when `with_aux` asks for it.
    pub fn forward(
        &self,
        t: &mut Tape,
        x: TensorId,
        train: bool,
        with_aux: bool,
    ) -> Result<(TensorId, Option<TensorId>)> {
        self.config.validate_input(t.shape(x))?;
        let n = self.encoder.len();
        let mut cur = x;
        let mut skips = Vec::with_capacity(n);
        for stage in &self.encoder {
            cur = stage.ddc.forward(t, cur, train)?;
            cur = stage.pair.forward(t, cur)?;
            skips.push(cur);
        }
        cur = self.bottleneck.forward(t, cur)?;
        let mut dec_feats: Vec<Option<TensorId>> = vec![None; n];
        for i in (0..n).rev() {
            if let Some(duc) = &self.decoder[i].duc {
                cur = duc.forward(t, cur, train)?;
            }
            cur = self.decoder[i].pair.forward(t, cur, skips[i])?;
            dec_feats[i] = Some(cur);
        }
        let p_s = self.seg_head.forward(t, dec_feats[0].expect("stage 0 decoded"), train)?;
        let p_a = if train || with_aux {
            Some(self.aux_head.forward(t, dec_feats[1].expect("stage 1 decoded"), train)?)
        } else {
            None
        };
        Ok((p_s, p_a))
    }

    /// Training forward: both heads, batch-norm on batch statistics.
    pub fn forward_train(&self, t: &mut Tape, x: TensorId) -> Result<PredictionPair> {
        let (p_s, p_a) = self.forward(t, x, true, true)?;
        Ok(PredictionPair { p_s, p_a: p_a.expect("training forward produces the auxiliary head") })
    }

    /// Inference on one `[C,H,W]` image, returning the argmax mask; exact
    /// probability ties resolve to background.
    pub fn predict_mask(&self, image: &Tensor) -> Result<Mask> {
        if image.shape.len() != 3 {
            return Err(Error::InvalidConfig(format!("expected [C,H,W] image, got {:?}", image.shape)));
        }
        let (h, w) = (image.shape[1], image.shape[2]);
        let mut t = Tape::new();
        let x = t.constant(batch_of_one(image)?);
        let (p_s, _) = self.forward(&mut t, x, false, false)?;
        Ok(mask_from_probs(t.data(p_s), self.config.num_classes, h, w, 0))
    }

    /// Eval-mode forward of one `[C,H,W]` image with both heads, for
    /// uncertainty rendering.
    pub fn predict_with_aux(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut t = Tape::new();
        let x = t.constant(batch_of_one(image)?);
        let (p_s, p_a) = self.forward(&mut t, x, false, true)?;
        Ok((t.export(p_s), t.export(p_a.expect("aux requested"))))
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            stage.ddc.collect_params(&format!("enc{i}.ddc"), &mut out);
            stage.pair.collect_params(&format!("enc{i}.pair"), &mut out);
        }
        self.bottleneck.collect_params("bottleneck", &mut out);
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            if let Some(duc) = stage.duc.as_mut() {
                duc.collect_params(&format!("dec{i}.duc"), &mut out);
            }
            stage.pair.collect_params(&format!("dec{i}.pair"), &mut out);
        }
        self.seg_head.collect_params("seg_head", &mut out);
        self.aux_head.collect_params("aux_head", &mut out);
        out
    }

    /// Batch-norm running statistics, keyed alongside the parameters.
    pub fn named_buffers(&self) -> Vec<(String, &std::cell::RefCell<BnStats>)> {
        let mut out = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            stage.ddc.collect_buffers(&format!("enc{i}.ddc"), &mut out);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            if let Some(duc) = stage.duc.as_ref() {
                duc.collect_buffers(&format!("dec{i}.duc"), &mut out);
            }
        }
        self.seg_head.duc.collect_buffers("seg_head.duc", &mut out);
        self.aux_head.duc.collect_buffers("aux_head.duc", &mut out);
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, p)| p.numel()).sum()
    }
}

fn batch_of_one(image: &Tensor) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::InvalidConfig(format!("expected [C,H,W] image, got {:?}", image.shape)));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&image.shape);
    Tensor::new(shape, image.data.as_ref().clone()).map_err(Error::Tensor)
}

/// Argmax over the class axis of a `[B,C,H,W]` probability map for batch
/// element `b`; ties resolve to the lowest class index, so an exact
/// 0.5/0.5 pixel maps to background.
pub fn mask_from_probs(probs: &[f64], classes: usize, h: usize, w: usize, b: usize) -> Mask {
    let plane = h * w;
    let base = b * classes * plane;
    let mut data = vec![0u8; plane];
    for p in 0..plane {
        let mut best = 0usize;
        let mut best_v = probs[base + p];
        for c in 1..classes {
            let v = probs[base + c * plane + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        data[p] = best as u8;
    }
    Mask { width: w, height: h, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::with_base_channels(8);
        c.heads = vec![2, 2, 2];
        c
    }

    fn hash_params(model: &mut Model) -> u64 {
        let mut h = crc32fast::Hasher::new();
        for (name, p) in model.named_params_mut() {
            h.update(name.as_bytes());
            for v in p.value.data.iter() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize() as u64
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let mut a = Model::build(small_config(), 5).unwrap();
        let mut b = Model::build(small_config(), 5).unwrap();
        assert_eq!(hash_params(&mut a), hash_params(&mut b));
        let mut c = Model::build(small_config(), 6).unwrap();
        assert_ne!(hash_params(&mut a), hash_params(&mut c));
    }

    #[test]
    fn stage_resolutions_from_64() {
        let cfg = small_config();
        assert_eq!(cfg.cumulative_downsamples(), vec![4, 8, 16]);
        assert_eq!(cfg.input_divisor(), 64);
        // 64x64 input: stages at 16, 8, 4; decoder returns to 16
        let model = Model::build(cfg, 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 64, 64]));
        let (p_s, p_a) = model.forward(&mut t, x, false, true).unwrap();
        assert_eq!(t.shape(p_s), &[1, 2, 64, 64]);
        assert_eq!(t.shape(p_a.unwrap()), &[1, 2, 64, 64]);
    }

    #[test]
    fn linear_projection_changes_parameter_count_by_count_oracle() {
        let mut with_conv = Model::build(small_config(), 1).unwrap();
        let mut cfg = small_config();
        cfg.use_conv_projection = false;
        let mut with_linear = Model::build(cfg, 1).unwrap();
        // per projection: conv = depthwise (9C + C) + pointwise (C² + C);
        // linear = C² + C; difference 10C. three projections per block,
        // two blocks per pair, pairs: encoder n, bottleneck 1, decoder n.
        let cfg = small_config();
        let per_stage: usize = cfg.stage_channels.iter().map(|c| 2 * 3 * 10 * c).sum();
        let expected_delta = 2 * per_stage + 2 * 3 * 10 * cfg.stage_channels[2];
        let delta = with_conv.parameter_count() - with_linear.parameter_count();
        assert_eq!(delta, expected_delta);
    }

    #[test]
    fn per_pixel_class_sums_are_one() {
        let model = Model::build(small_config(), 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 64, 64], data).unwrap());
        let (p_s, p_a) = model.forward(&mut t, x, true, true).unwrap();
        for id in [p_s, p_a.unwrap()] {
            let d = t.data(id);
            let plane = 64 * 64;
            for p in 0..plane {
                let s = d[p] + d[plane + p];
                assert!((s - 1.0).abs() <= 1e-9);
                assert!(d[p] >= 0.0 && d[plane + p] >= 0.0);
            }
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let model = Model::build(small_config(), 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Tensor::new(vec![1, 64, 64], data).unwrap();
        let run = |m: &Model| {
            let mask = m.predict_mask(&image).unwrap();
            let (p_s, _) = m.predict_with_aux(&image).unwrap();
            (mask.data, p_s.data.as_ref().clone())
        };
        let (m1, p1) = run(&model);
        let (m2, p2) = run(&model);
        assert_eq!(m1, m2);
        assert!(p1.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn predict_mask_matches_argmax_oracle_and_tie_rule() {
        // one-hot iris everywhere
        let plane = 4;
        let onehot = Tensor::new(vec![1, 2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let m = mask_from_probs(&onehot.data, 2, 2, 2, 0);
        assert_eq!(m.data, vec![1, 1, 1, 1]);

        // uniform: the tie resolves to background
        let uniform = vec![0.5; 2 * plane];
        let m = mask_from_probs(&uniform, 2, 2, 2, 0);
        assert_eq!(m.data, vec![0, 0, 0, 0]);

        // random probabilities against a per-pixel loop
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p0: Vec<f64> = (0..plane).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut probs = Vec::new();
        probs.extend(p0.iter().copied());
        probs.extend(p0.iter().map(|v| 1.0 - v));
        let m = mask_from_probs(&probs, 2, 2, 2, 0);
        for p in 0..plane {
            let expect = if 1.0 - p0[p] > p0[p] { 1 } else { 0 };
            assert_eq!(m.data[p], expect);
        }
    }

    #[test]
    fn argmax_is_invariant_under_monotone_logit_rescaling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let plane = 16 * 16;
        let l0: Vec<f64> = (0..plane).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let l1: Vec<f64> = (0..plane).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let softmax_pair = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let build = |f: &dyn Fn(f64) -> f64| {
            let mut probs = vec![0.0; 2 * plane];
            for p in 0..plane {
                let (a, b) = softmax_pair(f(l0[p]), f(l1[p]));
                probs[p] = a;
                probs[plane + p] = b;
            }
            mask_from_probs(&probs, 2, 16, 16, 0)
        };
        let base = build(&|x| x);
        let affine = build(&|x| 3.0 * x + 1.0);
        let cubic = build(&|x| x * x * x + x);
        assert_eq!(base.data, affine.data);
        assert_eq!(base.data, cubic.data);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = small_config();
        cfg.heads = vec![3, 2, 2];
        assert!(Model::build(cfg, 0).is_err());

        let model = Model::build(small_config(), 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 48, 48]));
        assert!(model.forward(&mut t, x, false, false).is_err());
    }
}
