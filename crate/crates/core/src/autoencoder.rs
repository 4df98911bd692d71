//! Phase 1: a residual autoencoder built from resolution stages and trained
//! greedily, one stage at a time, with mean absolute error.
//!
//! Encoder stage `i` is `residual block -> 2×2 average pool -> 1×1 conv`
//! (channel change after the downsample). Decoder stage `i` mirrors it as
//! `nearest ×2 upsample -> 3×3 conv + lrelu -> residual block`. A 3×3 stem
//! runs at full resolution before stage 1 and a tanh-bounded 3×3 projection
//! maps back to RGB after decoder stage 1.

use ndarray::{Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSet;
use crate::nn::{
    avg_pool2, avg_pool2_backward, cast, leaky_relu, leaky_relu_backward, scoped, tanh, tanh_backward, upsample2,
    upsample2_backward, zero_grads, Adam, AdamConfig, Conv2d, ConvCache, Mode, Param, Parameterized, Real,
    ResidualBlock, ResidualCache, LEAKY_SLOPE,
};
use crate::{Error, Result};

/// Resolution → filter count for every block.
pub const FILTER_SCHEDULE: [(usize, usize); 6] = [(256, 32), (128, 64), (64, 128), (32, 256), (16, 512), (8, 512)];

pub const BOTTLENECK_RESOLUTION: usize = 8;
pub const MIN_INPUT_RESOLUTION: usize = 32;
pub const MAX_INPUT_RESOLUTION: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1-based.
    pub index: usize,
    pub input_resolution: usize,
    pub output_resolution: usize,
    pub filters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub input_resolution: usize,
    pub stem_filters: usize,
    pub stages: Vec<StageSpec>,
}

fn filters_at(resolution: usize) -> Option<usize> {
    FILTER_SCHEDULE.iter().find(|(r, _)| *r == resolution).map(|(_, f)| *f)
}

/// Schedule for a square input: stem at full resolution, then one stage per
/// halving down to the 8×8 bottleneck.
pub fn build_schedule(input_resolution: usize) -> Result<StageSchedule> {
    if !input_resolution.is_power_of_two()
        || !(MIN_INPUT_RESOLUTION..=MAX_INPUT_RESOLUTION).contains(&input_resolution)
    {
        return Err(Error::invalid(format!(
            "input resolution must be a power of two in [{MIN_INPUT_RESOLUTION}, {MAX_INPUT_RESOLUTION}], got {input_resolution}"
        )));
    }
    let stem_filters = filters_at(input_resolution).expect("resolution in schedule");
    let mut stages = Vec::new();
    let mut res = input_resolution;
    while res > BOTTLENECK_RESOLUTION {
        let out = res / 2;
        stages.push(StageSpec {
            index: stages.len() + 1,
            input_resolution: res,
            output_resolution: out,
            filters: filters_at(out).expect("resolution in schedule"),
        });
        res = out;
    }
    Ok(StageSchedule {
        input_resolution,
        stem_filters,
        stages,
    })
}

impl StageSchedule {
    /// Arbitrary schedule, mainly for toy-sized networks. `filters[i]` is the
    /// width after stage `i + 1`.
    pub fn custom(input_resolution: usize, stem_filters: usize, filters: &[usize]) -> Result<Self> {
        if filters.is_empty() || stem_filters == 0 || filters.contains(&0) {
            return Err(Error::invalid("custom schedule needs at least one stage and non-zero widths"));
        }
        if !input_resolution.is_multiple_of(1 << filters.len()) {
            return Err(Error::invalid(format!(
                "resolution {input_resolution} cannot be halved {} times",
                filters.len()
            )));
        }
        let stages = filters
            .iter()
            .enumerate()
            .map(|(i, &f)| StageSpec {
                index: i + 1,
                input_resolution: input_resolution >> i,
                output_resolution: input_resolution >> (i + 1),
                filters: f,
            })
            .collect();
        Ok(StageSchedule {
            input_resolution,
            stem_filters,
            stages,
        })
    }

    /// Divides every width by `divisor` (at least one filter remains).
    pub fn narrowed(&self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::invalid("width divisor must be >= 1"));
        }
        let mut s = self.clone();
        s.stem_filters = (s.stem_filters / divisor).max(1);
        for st in &mut s.stages {
            st.filters = (st.filters / divisor).max(1);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Channel count after stage `k` (`k == 0` is the stem).
    pub fn channels(&self, k: usize) -> usize {
        if k == 0 {
            self.stem_filters
        } else {
            self.stages[k - 1].filters
        }
    }

    /// Spatial size after stage `k`.
    pub fn resolution(&self, k: usize) -> usize {
        self.input_resolution >> k
    }

    /// `(resolution, channels)` of the deepest feature block.
    pub fn bottleneck(&self) -> (usize, usize) {
        (self.resolution(self.len()), self.channels(self.len()))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage<T> {
    pub block: ResidualBlock<T>,
    /// 1×1 channel change, applied after the downsample.
    pub channel: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage<T> {
    /// 3×3 conv after the upsample, also changes channels.
    pub conv: Conv2d<T>,
    pub block: ResidualBlock<T>,
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub schedule: StageSchedule,
    pub stem: Conv2d<T>,
    pub encoder: Vec<EncoderStage<T>>,
    pub decoder: Vec<DecoderStage<T>>,
    pub output: Conv2d<T>,
}

struct EncStageCache<T> {
    block: ResidualCache<T>,
    channel: ConvCache<T>,
}

/// Cache of an encoder pass; stages are stored in forward order.
pub struct EncoderCache<T> {
    stem: ConvCache<T>,
    stem_act: Array4<T>,
    stages: Vec<EncStageCache<T>>,
}

struct DecStageCache<T> {
    conv: ConvCache<T>,
    act: Array4<T>,
    block: ResidualCache<T>,
}

/// Cache of a decoder pass; `stages[0]` belongs to the deepest stage.
pub struct DecoderCache<T> {
    from_stage: usize,
    stages: Vec<DecStageCache<T>>,
    output: ConvCache<T>,
    image: Array4<T>,
}

/// Which parameters receive gradients and optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainScope {
    /// Only encoder/decoder stage `k`; stage 1 also owns the stem and the
    /// output projection.
    Stage(usize),
    All,
    None,
}

impl TrainScope {
    /// `part == 0` addresses the stem/output projection.
    pub fn includes(&self, part: usize) -> bool {
        match *self {
            TrainScope::Stage(k) => part == k || (k == 1 && part == 0),
            TrainScope::All => true,
            TrainScope::None => false,
        }
    }

    fn mode(&self, stage: usize) -> Mode {
        if self.includes(stage) {
            Mode::Train
        } else {
            Mode::Infer
        }
    }
}

impl<T: Real> Autoencoder<T> {
    pub fn new(schedule: StageSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(3, 3, schedule.stem_filters, &mut rng);
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for k in 1..=schedule.len() {
            let (cin, cout) = (schedule.channels(k - 1), schedule.channels(k));
            encoder.push(EncoderStage {
                block: ResidualBlock::new(cin, cin, &mut rng),
                channel: Conv2d::new(1, cin, cout, &mut rng),
            });
            decoder.push(DecoderStage {
                conv: Conv2d::new(3, cout, cin, &mut rng),
                block: ResidualBlock::new(cin, cin, &mut rng),
            });
        }
        let output = Conv2d::new(3, schedule.stem_filters, 3, &mut rng);
        Autoencoder {
            schedule,
            stem,
            encoder,
            decoder,
            output,
        }
    }

    pub fn stages(&self) -> usize {
        self.schedule.len()
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k > self.stages() {
            return Err(Error::invalid(format!("stage {k} out of range 0..={}", self.stages())));
        }
        Ok(())
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, h, w, c) = x.dim();
        let r = self.schedule.input_resolution;
        if (h, w, c) != (r, r, 3) {
            return Err(Error::shape(format!("expected (batch, {r}, {r}, 3) input, got {:?}", x.dim())));
        }
        Ok(())
    }

    fn check_features(&self, t: &Array4<T>, k: usize) -> Result<()> {
        let (_, h, w, c) = t.dim();
        let (r, ch) = (self.schedule.resolution(k), self.schedule.channels(k));
        if (h, w, c) != (r, r, ch) {
            return Err(Error::shape(format!(
                "stage {k} features must be (batch, {r}, {r}, {ch}), got {:?}",
                t.dim()
            )));
        }
        Ok(())
    }

    /// Stem plus stages `1..=k` in inference mode; `k == 0` is the stem
    /// output alone.
    pub fn encode_to_stage(&self, x: &Array4<T>, k: usize) -> Result<Array4<T>> {
        self.check_stage(k)?;
        self.check_input(x)?;
        let mut h = leaky_relu(&self.stem.infer(x)?, LEAKY_SLOPE);
        for st in &self.encoder[..k] {
            h = st.block.infer(&h)?;
            h = st.channel.infer(&avg_pool2(&h)?)?;
        }
        Ok(h)
    }

    /// Decoder stages `k..=1` then the bounded RGB projection.
    pub fn decode_from_stage(&self, t: &Array4<T>, k: usize) -> Result<Array4<T>> {
        self.check_stage(k)?;
        self.check_features(t, k)?;
        let mut h = t.clone();
        for st in self.decoder[..k].iter().rev() {
            h = leaky_relu(&st.conv.infer(&upsample2(&h))?, LEAKY_SLOPE);
            h = st.block.infer(&h)?;
        }
        Ok(tanh(&self.output.infer(&h)?))
    }

    pub fn reconstruct(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let k = self.stages();
        self.decode_from_stage(&self.encode_to_stage(x, k)?, k)
    }

    /// Training-path encoder pass through stages `1..=k`. Stages outside
    /// `scope` run in inference mode so their statistics stay frozen.
    pub fn encode_train(&mut self, x: &Array4<T>, k: usize, scope: TrainScope) -> Result<(Array4<T>, EncoderCache<T>)> {
        self.check_stage(k)?;
        self.check_input(x)?;
        let (h, stem) = self.stem.forward(x)?;
        let stem_act = leaky_relu(&h, LEAKY_SLOPE);
        let mut h = stem_act.clone();
        let mut stages = Vec::with_capacity(k);
        for (i, st) in self.encoder[..k].iter_mut().enumerate() {
            let (b, block) = st.block.forward(&h, scope.mode(i + 1))?;
            let (c, channel) = st.channel.forward(&avg_pool2(&b)?)?;
            stages.push(EncStageCache { block, channel });
            h = c;
        }
        Ok((h, EncoderCache { stem, stem_act, stages }))
    }

    /// Backpropagates an encoder pass down to the input of stage `lowest`
    /// (`0` reaches the image) and returns that gradient.
    pub fn encode_backward(
        &mut self,
        cache: &EncoderCache<T>,
        grad: &Array4<T>,
        scope: TrainScope,
        lowest: usize,
    ) -> Array4<T> {
        let mut g = grad.clone();
        for i in (lowest.max(1)..=cache.stages.len()).rev() {
            let c = &cache.stages[i - 1];
            let st = &mut self.encoder[i - 1];
            g = st.channel.backward(&c.channel, &g, scope.includes(i));
            g = avg_pool2_backward(&g);
            g = st.block.backward(&c.block, &g, scope.includes(i));
        }
        if lowest == 0 {
            g = leaky_relu_backward(&cache.stem_act, &g, LEAKY_SLOPE);
            g = self.stem.backward(&cache.stem, &g, scope.includes(0));
        }
        g
    }

    pub fn decode_train(&mut self, t: &Array4<T>, k: usize, scope: TrainScope) -> Result<(Array4<T>, DecoderCache<T>)> {
        self.check_stage(k)?;
        self.check_features(t, k)?;
        let mut h = t.clone();
        let mut stages = Vec::with_capacity(k);
        for i in (1..=k).rev() {
            let st = &mut self.decoder[i - 1];
            let (c, conv) = st.conv.forward(&upsample2(&h))?;
            let act = leaky_relu(&c, LEAKY_SLOPE);
            let (b, block) = st.block.forward(&act, scope.mode(i))?;
            stages.push(DecStageCache { conv, act, block });
            h = b;
        }
        let (o, output) = self.output.forward(&h)?;
        let image = tanh(&o);
        Ok((
            image.clone(),
            DecoderCache {
                from_stage: k,
                stages,
                output,
                image,
            },
        ))
    }

    /// Backpropagates a decoder pass and returns the gradient with respect
    /// to the stage-`k` feature block.
    pub fn decode_backward(&mut self, cache: &DecoderCache<T>, grad: &Array4<T>, scope: TrainScope) -> Array4<T> {
        let g = tanh_backward(&cache.image, grad);
        let mut g = self.output.backward(&cache.output, &g, scope.includes(0));
        for (j, c) in cache.stages.iter().enumerate().rev() {
            let i = cache.from_stage - j;
            let st = &mut self.decoder[i - 1];
            g = st.block.backward(&c.block, &g, scope.includes(i));
            g = leaky_relu_backward(&c.act, &g, LEAKY_SLOPE);
            g = st.conv.backward(&c.conv, &g, scope.includes(i));
            g = upsample2_backward(&g);
        }
        g
    }

    /// One optimisation step on `decode(encode(x, k), k)` with MAE.
    /// Only parameters inside `scope` change.
    pub fn train_step(&mut self, adam: &mut Adam<T>, x: &Array4<T>, k: usize, scope: TrainScope) -> Result<f64> {
        zero_grads(self);
        let (t, enc) = self.encode_train(x, k, scope)?;
        let (y, dec) = self.decode_train(&t, k, scope)?;
        let (loss, dy) = mae_loss_grad(x, &y)?;
        let dt = self.decode_backward(&dec, &dy, scope);
        let lowest = match scope {
            TrainScope::Stage(s) if s > 1 => s,
            _ => 0,
        };
        self.encode_backward(&enc, &dt, scope, lowest);
        adam.step(&mut ScopedParams { ae: self, scope }, "");
        Ok(loss.to_f64().unwrap_or(f64::NAN))
    }

    /// Mean MAE of `decode(encode(x, k), k)` over a set, in inference mode.
    pub fn evaluate_mae(&self, data: &ImageSet, k: usize, batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in data.sequential(batch_size) {
            let x = batch.mapv(|v| cast::<T>(v as f64));
            let y = self.decode_from_stage(&self.encode_to_stage(&x, k)?, k)?;
            total += mae_loss(&x, &y)?.to_f64().unwrap_or(f64::NAN) * x.len() as f64;
            count += x.len();
        }
        if count == 0 {
            return Err(Error::invalid("empty evaluation set"));
        }
        Ok(total / count as f64)
    }
}

impl<T: Real> Parameterized<T> for Autoencoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&scoped(prefix, "stem"), f);
        for (i, st) in self.encoder.iter().enumerate() {
            let p = scoped(prefix, &format!("encoder.{}", i + 1));
            st.block.visit(&scoped(&p, "block"), f);
            st.channel.visit(&scoped(&p, "channel"), f);
        }
        for (i, st) in self.decoder.iter().enumerate() {
            let p = scoped(prefix, &format!("decoder.{}", i + 1));
            st.conv.visit(&scoped(&p, "conv"), f);
            st.block.visit(&scoped(&p, "block"), f);
        }
        self.output.visit(&scoped(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        ScopedParams {
            ae: self,
            scope: TrainScope::All,
        }
        .visit_mut(prefix, f)
    }
}

/// Mutable view over the parameters inside one [`TrainScope`], with the
/// same names as the full autoencoder.
pub struct ScopedParams<'a, T> {
    pub ae: &'a mut Autoencoder<T>,
    pub scope: TrainScope,
}

impl<T: Real> Parameterized<T> for ScopedParams<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let scope = self.scope;
        self.ae.visit(prefix, &mut |name, p| {
            if scope_of(name).is_some_and(|part| scope.includes(part)) {
                f(name, p)
            }
        });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let scope = self.scope;
        let ae = &mut *self.ae;
        if scope.includes(0) {
            ae.stem.visit_mut(&scoped(prefix, "stem"), f);
        }
        for (i, st) in ae.encoder.iter_mut().enumerate() {
            if scope.includes(i + 1) {
                let p = scoped(prefix, &format!("encoder.{}", i + 1));
                st.block.visit_mut(&scoped(&p, "block"), f);
                st.channel.visit_mut(&scoped(&p, "channel"), f);
            }
        }
        for (i, st) in ae.decoder.iter_mut().enumerate() {
            if scope.includes(i + 1) {
                let p = scoped(prefix, &format!("decoder.{}", i + 1));
                st.conv.visit_mut(&scoped(&p, "conv"), f);
                st.block.visit_mut(&scoped(&p, "block"), f);
            }
        }
        if scope.includes(0) {
            ae.output.visit_mut(&scoped(prefix, "output"), f);
        }
    }
}

/// Stage index owning a parameter name (`0` for stem and output).
pub fn scope_of(name: &str) -> Option<usize> {
    let mut parts = name.split('.');
    match parts.next()? {
        "stem" | "output" => Some(0),
        "encoder" | "decoder" => parts.next()?.parse().ok(),
        _ => None,
    }
}

fn check_same_shape<T: Real>(x: &Array4<T>, y: &Array4<T>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("mae inputs differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.is_empty() {
        return Err(Error::shape("mae of empty arrays"));
    }
    Ok(())
}

/// Mean over all elements of `|x − x′|`.
pub fn mae_loss<T: Real>(x: &Array4<T>, x_prime: &Array4<T>) -> Result<T> {
    check_same_shape(x, x_prime)?;
    let mut acc = T::zero();
    Zip::from(x).and(x_prime).for_each(|&a, &b| acc += (a - b).abs());
    Ok(acc / cast(x.len() as f64))
}

/// MAE and its gradient `sign(x′ − x) / N` with respect to `x_prime`.
pub fn mae_loss_grad<T: Real>(x: &Array4<T>, x_prime: &Array4<T>) -> Result<(T, Array4<T>)> {
    let loss = mae_loss(x, x_prime)?;
    let inv: T = cast(1.0 / x.len() as f64);
    let mut grad = Array4::zeros(x.raw_dim());
    Zip::from(&mut grad).and(x).and(x_prime).for_each(|g, &a, &b| {
        let d = b - a;
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    });
    Ok((loss, grad))
}

/// Seed of the batch order for one stage; stage 0 is fine-tuning.
pub fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_add((stage as u64 + 1).wrapping_mul(1_000_003))
}

/// Runs one epoch of scoped training and returns the mean batch loss.
pub fn train_epoch(
    ae: &mut Autoencoder<f32>,
    adam: &mut Adam<f32>,
    data: &ImageSet,
    k: usize,
    scope: TrainScope,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for batch in data.batches(batch_size, seed, epoch) {
        total += ae.train_step(adam, &batch, k, scope)?;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::Training("no training data".into()));
    }
    Ok(total / batches as f64)
}

/// Greedy training of stage `k` with everything below it locked. Returns
/// the per-epoch mean training loss.
pub fn train_stage_greedy(
    ae: &mut Autoencoder<f32>,
    k: usize,
    data: &ImageSet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs < 1 {
        return Err(Error::Training("epochs must be >= 1".into()));
    }
    if k < 1 || k > ae.stages() {
        return Err(Error::invalid(format!("stage {k} out of range 1..={}", ae.stages())));
    }
    let mut adam = Adam::new(AdamConfig::new(lr));
    (0..epochs)
        .map(|e| {
            train_epoch(
                ae,
                &mut adam,
                data,
                k,
                TrainScope::Stage(k),
                batch_size,
                stage_seed(seed, k),
                e as u64,
            )
        })
        .collect()
}

/// End-to-end fine-tuning of every parameter with a single optimizer.
pub fn finetune_all(
    ae: &mut Autoencoder<f32>,
    data: &ImageSet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs < 1 {
        return Err(Error::Training("epochs must be >= 1".into()));
    }
    let k = ae.stages();
    let mut adam = Adam::new(AdamConfig::new(lr));
    (0..epochs)
        .map(|e| {
            train_epoch(
                ae,
                &mut adam,
                data,
                k,
                TrainScope::All,
                batch_size,
                stage_seed(seed, 0),
                e as u64,
            )
        })
        .collect()
}
