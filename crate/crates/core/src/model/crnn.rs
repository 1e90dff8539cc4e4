use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, Prediction, SedModel};
use crate::autodiff::{
    Activation, ActivationLayer, Array, BatchNorm, BiGru, Conv2d, Dense, Dropout, Layer,
    MaxPoolFreq, Mode, Tensor,
};
use crate::kv::{join_list, KeyValues};
use crate::{Error, Result};

/// One convolutional block: `filters` 3×3 kernels followed by max-pooling
/// of the frequency axis by `pool`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_bands: usize,
    pub conv: Vec<ConvSpec>,
    /// Hidden size of each GRU direction.
    pub gru_units: usize,
    /// Widths of the time-distributed strong head; the last equals `num_classes`.
    pub strong_dense: Vec<usize>,
    /// Widths of the weak head; the last equals `num_classes`.
    pub weak_dense: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 17 classes over 40 mel bands, 213,618 trainable parameters.
    fn default() -> Self {
        Self::with_classes(17, 40)
    }
}

impl ModelConfig {
    /// Default architecture for `num_classes` outputs and 40 bands
    /// (pools 5·4·2); other band counts need their own pools.
    pub fn with_classes(num_classes: usize, input_bands: usize) -> Self {
        let conv = [5, 4, 2]
            .into_iter()
            .map(|pool| ConvSpec { filters: 96, pool })
            .collect();
        Self {
            num_classes,
            input_bands,
            conv,
            gru_units: 48,
            strong_dense: vec![32, num_classes],
            weak_dense: vec![16, num_classes],
            dropout: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.input_bands == 0 || self.gru_units == 0 {
            return fail("classes, bands and GRU units must be positive".into());
        }
        if self.conv.is_empty() {
            return fail("at least one convolutional block is required".into());
        }
        if self.conv.iter().any(|c| c.filters == 0 || c.pool == 0) {
            return fail("conv filters and pools must be positive".into());
        }
        let product: usize = self.conv.iter().map(|c| c.pool).product();
        if product != self.input_bands {
            return fail(format!(
                "frequency pools multiply to {product}, must equal the {} input bands",
                self.input_bands
            ));
        }
        for (name, head) in [("strong", &self.strong_dense), ("weak", &self.weak_dense)] {
            if head.last() != Some(&self.num_classes) {
                return fail(format!(
                    "{name} head must end in {} units, got {head:?}",
                    self.num_classes
                ));
            }
            if head.contains(&0) {
                return fail(format!("{name} head has a zero-width layer"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model", "crnn");
        kv.set("num_classes", self.num_classes);
        kv.set("input_bands", self.input_bands);
        let filters: Vec<_> = self.conv.iter().map(|c| c.filters).collect();
        let pools: Vec<_> = self.conv.iter().map(|c| c.pool).collect();
        kv.set("conv_filters", join_list(&filters));
        kv.set("conv_pools", join_list(&pools));
        kv.set("gru_units", self.gru_units);
        kv.set("strong_dense", join_list(&self.strong_dense));
        kv.set("weak_dense", join_list(&self.weak_dense));
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; absent keys keep
    /// the values of `base`.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let mut cfg = base.clone();
        if let Some(c) = kv.parse_opt("num_classes")? {
            cfg.num_classes = c;
            if kv.get("strong_dense").is_none() {
                *cfg.strong_dense.last_mut().unwrap() = c;
            }
            if kv.get("weak_dense").is_none() {
                *cfg.weak_dense.last_mut().unwrap() = c;
            }
        }
        if let Some(f) = kv.parse_opt("input_bands")? {
            cfg.input_bands = f;
        }
        let filters: Option<Vec<usize>> = kv.parse_list("conv_filters")?;
        let pools: Option<Vec<usize>> = kv.parse_list("conv_pools")?;
        if filters.is_some() || pools.is_some() {
            let filters = filters.unwrap_or_else(|| cfg.conv.iter().map(|c| c.filters).collect());
            let pools = pools.unwrap_or_else(|| cfg.conv.iter().map(|c| c.pool).collect());
            if filters.len() != pools.len() {
                return Err(Error::Config(format!(
                    "{} conv filter counts but {} pools",
                    filters.len(),
                    pools.len()
                )));
            }
            cfg.conv = filters
                .into_iter()
                .zip(pools)
                .map(|(filters, pool)| ConvSpec { filters, pool })
                .collect();
        }
        if let Some(g) = kv.parse_opt("gru_units")? {
            cfg.gru_units = g;
        }
        if let Some(s) = kv.parse_list("strong_dense")? {
            cfg.strong_dense = s;
        }
        if let Some(w) = kv.parse_list("weak_dense")? {
            cfg.weak_dense = w;
        }
        if let Some(d) = kv.parse_opt("dropout")? {
            cfg.dropout = d;
        }
        if let Some(s) = kv.parse_opt("seed")? {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean over the time axis: `[B, T, C]` to `[B, C]`.
pub fn collapse_time(x: &Array) -> Result<Array> {
    let s = x.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape(format!("collapse_time needs [B, T>0, C], got {s:?}")));
    }
    let (b, t, c) = (s[0], s[1], s[2]);
    let mut out = Array::zeros(&[b, c]);
    let o = out.data_mut();
    for (bi, clip) in x.data().chunks_exact(t * c).enumerate() {
        for frame in clip.chunks_exact(c) {
            for (k, &v) in frame.iter().enumerate() {
                o[bi * c + k] += v;
            }
        }
    }
    let inv = 1.0 / t as f64;
    o.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Adjoint of [`collapse_time`]: spreads a `[B, C]` gradient over `time` frames.
pub fn expand_time_grad(grad: &Array, time: usize) -> Result<Array> {
    let s = grad.shape();
    if s.len() != 2 || time == 0 {
        return Err(Error::shape(format!("expand_time_grad needs [B, C], got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    let inv = 1.0 / time as f64;
    let mut out = Array::zeros(&[b, time, c]);
    for (bi, clip) in out.data_mut().chunks_exact_mut(time * c).enumerate() {
        let g = &grad.data()[bi * c..(bi + 1) * c];
        for frame in clip.chunks_exact_mut(c) {
            for (o, &gv) in frame.iter_mut().zip(g) {
                *o = gv * inv;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    relu: ActivationLayer,
    dropout: Dropout,
    pool: MaxPoolFreq,
}

/// A dense layer optionally followed by dropout (hidden layers only).
#[derive(Clone, Debug)]
struct DenseStage {
    dense: Dense,
    dropout: Option<Dropout>,
}

impl DenseStage {
    fn forward(&mut self, x: &Array, mode: Mode) -> Result<Array> {
        let y = self.dense.forward(x, mode)?;
        match &mut self.dropout {
            Some(d) => d.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, g: &Array) -> Result<Array> {
        let g = match &mut self.dropout {
            Some(d) => d.backward(g)?,
            None => g.clone(),
        };
        self.dense.backward(&g)
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    batch: usize,
    time: usize,
    conv_out_shape: Vec<usize>,
}

/// Convolutional-recurrent network with sequential strong and weak heads.
///
/// The strong head is time-distributed and emits `[B, T, C]`. Its
/// pre-sigmoid output is averaged over time and passed through the weak
/// head to give `[B, C]`, so the weak prediction depends on the input
/// only through the strong head.
#[derive(Clone, Debug)]
pub struct Crnn {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    gru: BiGru,
    gru_dropout: Dropout,
    strong: Vec<DenseStage>,
    strong_sigmoid: ActivationLayer,
    weak: Vec<DenseStage>,
    weak_sigmoid: ActivationLayer,
    cache: Option<ForwardCache>,
}

fn dense_stack(
    input: usize,
    widths: &[usize],
    dropout: f64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DenseStage>> {
    let mut stages = Vec::with_capacity(widths.len());
    let mut din = input;
    for (i, &w) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        let act = if last { Activation::Linear } else { Activation::Relu };
        let dropout = if last { None } else { Some(Dropout::new(dropout, seed + i as u64)?) };
        stages.push(DenseStage {
            dense: Dense::new(din, w, act, rng),
            dropout,
        });
        din = w;
    }
    Ok(stages)
}

impl Crnn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let drop_seed = |k: u64| config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(k * 1000);
        let mut blocks = Vec::with_capacity(config.conv.len());
        let mut cin = 1;
        for (i, spec) in config.conv.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(cin, spec.filters, &mut rng),
                bn: BatchNorm::new(spec.filters),
                relu: ActivationLayer::new(Activation::Relu),
                dropout: Dropout::new(config.dropout, drop_seed(1) + i as u64)?,
                pool: MaxPoolFreq::new(spec.pool)?,
            });
            cin = spec.filters;
        }
        let gru = BiGru::new(cin, config.gru_units, &mut rng);
        let gru_dropout = Dropout::new(config.dropout, drop_seed(2))?;
        let strong = dense_stack(
            2 * config.gru_units,
            &config.strong_dense,
            config.dropout,
            drop_seed(3),
            &mut rng,
        )?;
        let weak = dense_stack(
            config.num_classes,
            &config.weak_dense,
            config.dropout,
            drop_seed(4),
            &mut rng,
        )?;
        Ok(Self {
            config,
            blocks,
            gru,
            gru_dropout,
            strong,
            strong_sigmoid: ActivationLayer::new(Activation::Sigmoid),
            weak,
            weak_sigmoid: ActivationLayer::new(Activation::Sigmoid),
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable tensors that belong to the weak head only.
    pub fn weak_head_params(&self) -> Vec<&Tensor> {
        self.weak.iter().flat_map(|s| s.dense.params()).collect()
    }

    /// The strong head's last dense layer, whose output feeds both heads.
    pub fn strong_output_layer_mut(&mut self) -> &mut Dense {
        &mut self.strong.last_mut().unwrap().dense
    }

    /// The first convolution, i.e. the layer that reads the input features.
    pub fn input_layer_mut(&mut self) -> &mut Conv2d {
        &mut self.blocks[0].conv
    }

    fn named_tensors(&self) -> Vec<(String, Array)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), b.conv.kernel.to_array()));
            out.push((format!("conv{i}.bias"), b.conv.bias.to_array()));
            out.push((format!("bn{i}.gamma"), b.bn.gamma.to_array()));
            out.push((format!("bn{i}.beta"), b.bn.beta.to_array()));
            let n = b.bn.channels();
            let stat = |v: &Vec<f64>| Array::from_vec(&[n], v.clone()).expect("channel count");
            out.push((format!("bn{i}.running_mean"), stat(&b.bn.running_mean)));
            out.push((format!("bn{i}.running_var"), stat(&b.bn.running_var)));
        }
        for (dir, cell) in [("fwd", &self.gru.forward), ("bwd", &self.gru.backward)] {
            out.push((format!("gru.{dir}.w"), cell.w.to_array()));
            out.push((format!("gru.{dir}.u"), cell.u.to_array()));
            out.push((format!("gru.{dir}.b"), cell.b.to_array()));
        }
        for (head, stages) in [("strong", &self.strong), ("weak", &self.weak)] {
            for (i, s) in stages.iter().enumerate() {
                out.push((format!("{head}{i}.w"), s.dense.weight.to_array()));
                out.push((format!("{head}{i}.b"), s.dense.bias.to_array()));
            }
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.get("model") != Some("crnn") {
            return Err(Error::Format("checkpoint does not hold a CRNN".into()));
        }
        let config = ModelConfig::from_kv(&ckpt.config, &ModelConfig::default())?;
        let mut model = Self::new(config)?;
        let expected: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if let Some((extra, _)) = ckpt.tensors.iter().find(|(n, _)| !expected.contains(n)) {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        let load = |t: &mut Tensor, name: String| -> Result<()> {
            t.assign(ckpt.tensor(&name)?)
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
        };
        for (i, b) in model.blocks.iter_mut().enumerate() {
            load(&mut b.conv.kernel, format!("conv{i}.kernel"))?;
            load(&mut b.conv.bias, format!("conv{i}.bias"))?;
            load(&mut b.bn.gamma, format!("bn{i}.gamma"))?;
            load(&mut b.bn.beta, format!("bn{i}.beta"))?;
            for (stat, key) in [
                (&mut b.bn.running_mean, "running_mean"),
                (&mut b.bn.running_var, "running_var"),
            ] {
                let name = format!("bn{i}.{key}");
                let src = ckpt.tensor(&name)?;
                if src.shape() != [stat.len()] {
                    return Err(Error::Format(format!("tensor `{name}` has shape {:?}", src.shape())));
                }
                stat.copy_from_slice(src.data());
            }
        }
        for (dir, cell) in [("fwd", &mut model.gru.forward), ("bwd", &mut model.gru.backward)] {
            load(&mut cell.w, format!("gru.{dir}.w"))?;
            load(&mut cell.u, format!("gru.{dir}.u"))?;
            load(&mut cell.b, format!("gru.{dir}.b"))?;
        }
        for (head, stages) in [("strong", &mut model.strong), ("weak", &mut model.weak)] {
            for (i, s) in stages.iter_mut().enumerate() {
                load(&mut s.dense.weight, format!("{head}{i}.w"))?;
                load(&mut s.dense.bias, format!("{head}{i}.b"))?;
            }
        }
        Ok(model)
    }
}

impl SedModel for Crnn {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_bands(&self) -> usize {
        self.config.input_bands
    }

    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Prediction> {
        let s = input.shape();
        if s.len() != 3 || s[2] != self.config.input_bands || s[1] == 0 {
            return Err(Error::shape(format!(
                "CRNN expects [batch, time>0, {}], got {s:?}",
                self.config.input_bands
            )));
        }
        let (batch, time) = (s[0], s[1]);
        let mut x = input.clone().reshape(&[batch, time, s[2], 1])?;
        for b in &mut self.blocks {
            x = b.conv.forward(&x, mode)?;
            x = b.bn.forward(&x, mode)?;
            x = b.relu.forward(&x, mode)?;
            x = b.dropout.forward(&x, mode)?;
            x = b.pool.forward(&x, mode)?;
        }
        let conv_out_shape = x.shape().to_vec();
        let channels = conv_out_shape[3];
        let mut h = self.gru.forward(&x.reshape(&[batch, time, channels])?, mode)?;
        h = self.gru_dropout.forward(&h, mode)?;
        for stage in &mut self.strong {
            h = stage.forward(&h, mode)?;
        }
        let strong = self.strong_sigmoid.forward(&h, mode)?;
        let mut w = collapse_time(&h)?;
        for stage in &mut self.weak {
            w = stage.forward(&w, mode)?;
        }
        let weak = self.weak_sigmoid.forward(&w, mode)?;
        self.cache = Some(ForwardCache {
            batch,
            time,
            conv_out_shape,
        });
        Ok(Prediction {
            strong,
            weak: Some(weak),
        })
    }

    fn backward(&mut self, grad_strong: &Array, grad_weak: Option<&Array>) -> Result<Array> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward called before forward"))?;
        let c = self.config.num_classes;
        if grad_strong.shape() != [cache.batch, cache.time, c] {
            return Err(Error::shape(format!(
                "strong gradient {:?} does not match the last forward",
                grad_strong.shape()
            )));
        }
        let mut g = self.strong_sigmoid.backward(grad_strong)?;
        if let Some(gw) = grad_weak {
            if gw.shape() != [cache.batch, c] {
                return Err(Error::shape(format!(
                    "weak gradient {:?} does not match the last forward",
                    gw.shape()
                )));
            }
            let mut gw = self.weak_sigmoid.backward(gw)?;
            for stage in self.weak.iter_mut().rev() {
                gw = stage.backward(&gw)?;
            }
            let spread = expand_time_grad(&gw, cache.time)?;
            for (a, b) in g.data_mut().iter_mut().zip(spread.data()) {
                *a += b;
            }
        }
        for stage in self.strong.iter_mut().rev() {
            g = stage.backward(&g)?;
        }
        g = self.gru_dropout.backward(&g)?;
        g = self.gru.backward(&g)?;
        let mut g = g.reshape(&cache.conv_out_shape)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.pool.backward(&g)?;
            g = b.dropout.backward(&g)?;
            g = b.relu.backward(&g)?;
            g = b.bn.backward(&g)?;
            g = b.conv.backward(&g)?;
        }
        g.reshape(&[cache.batch, cache.time, self.config.input_bands])
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.gru.params());
        for s in self.strong.iter().chain(&self.weak) {
            out.extend(s.dense.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.gru.params_mut());
        for s in self.strong.iter_mut().chain(&mut self.weak) {
            out.extend(s.dense.params_mut());
        }
        out
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_kv(),
            tensors: self.named_tensors(),
        }
    }
}
