use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, Prediction, SedModel};
use crate::autodiff::{Activation, ActivationLayer, Array, Dense, Dropout, Layer, Mode, Tensor};
use crate::kv::{join_list, KeyValues};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub num_classes: usize,
    pub input_bands: usize,
    /// Odd number of frames centred on the predicted one.
    pub context_frames: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(num_classes: usize, input_bands: usize) -> Self {
        Self {
            num_classes,
            input_bands,
            context_frames: 5,
            hidden: vec![50, 50],
            dropout: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_bands == 0 {
            return Err(Error::Config("classes and bands must be positive".into()));
        }
        if self.context_frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "context must be an odd frame count, got {}",
                self.context_frames
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model", "baseline");
        kv.set("num_classes", self.num_classes);
        kv.set("input_bands", self.input_bands);
        kv.set("context_frames", self.context_frames);
        kv.set("hidden", join_list(&self.hidden));
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::new(kv.parse_req("num_classes")?, kv.parse_req("input_bands")?);
        if let Some(c) = kv.parse_opt("context_frames")? {
            cfg.context_frames = c;
        }
        if let Some(h) = kv.parse_list("hidden")? {
            cfg.hidden = h;
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

/// Frame-wise MLP over a window of neighbouring frames (zero-padded at
/// the clip edges). It has no clip-level head.
#[derive(Clone, Debug)]
pub struct BaselineMlp {
    config: BaselineConfig,
    hidden: Vec<(Dense, Dropout)>,
    output: Dense,
    sigmoid: ActivationLayer,
    input_shape: Option<Vec<usize>>,
}

impl BaselineMlp {
    pub fn new(config: BaselineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut din = config.context_frames * config.input_bands;
        let mut hidden = Vec::new();
        for (i, &w) in config.hidden.iter().enumerate() {
            let dense = Dense::new(din, w, Activation::Relu, &mut rng);
            let drop = Dropout::new(config.dropout, config.seed.wrapping_add(100 + i as u64))?;
            hidden.push((dense, drop));
            din = w;
        }
        let output = Dense::new(din, config.num_classes, Activation::Linear, &mut rng);
        Ok(Self {
            config,
            hidden,
            output,
            sigmoid: ActivationLayer::new(Activation::Sigmoid),
            input_shape: None,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense {
        &mut self.output
    }

    /// `[B, T, F]` to `[B, T, K·F]` with frame `t + j - K/2` in slot `j`.
    fn stack_context(&self, x: &Array) -> Array {
        let s = x.shape();
        let (b, t, f) = (s[0], s[1], s[2]);
        let k = self.config.context_frames;
        let half = k / 2;
        let mut out = Array::zeros(&[b, t, k * f]);
        let o = out.data_mut();
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..k {
                    let Some(src) = (ti + j).checked_sub(half).filter(|&v| v < t) else {
                        continue;
                    };
                    let dst = ((bi * t + ti) * k + j) * f;
                    let from = (bi * t + src) * f;
                    o[dst..dst + f].copy_from_slice(&x.data()[from..from + f]);
                }
            }
        }
        out
    }

    fn unstack_context(&self, g: &Array, shape: &[usize]) -> Result<Array> {
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let k = self.config.context_frames;
        let half = k / 2;
        let mut out = Array::zeros(shape);
        let o = out.data_mut();
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..k {
                    let Some(src) = (ti + j).checked_sub(half).filter(|&v| v < t) else {
                        continue;
                    };
                    let from = ((bi * t + ti) * k + j) * f;
                    let dst = (bi * t + src) * f;
                    for (a, v) in o[dst..dst + f].iter_mut().zip(&g.data()[from..from + f]) {
                        *a += v;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.get("model") != Some("baseline") {
            return Err(Error::Format("checkpoint does not hold a baseline MLP".into()));
        }
        let mut model = Self::new(BaselineConfig::from_kv(&ckpt.config)?)?;
        let expected = model.hidden.len() * 2 + 2;
        if ckpt.tensors.len() != expected {
            return Err(Error::Format(format!(
                "baseline checkpoint has {} tensors, expected {expected}",
                ckpt.tensors.len()
            )));
        }
        let load = |t: &mut Tensor, name: String| -> Result<()> {
            t.assign(ckpt.tensor(&name)?)
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
        };
        for (i, (dense, _)) in model.hidden.iter_mut().enumerate() {
            load(&mut dense.weight, format!("hidden{i}.w"))?;
            load(&mut dense.bias, format!("hidden{i}.b"))?;
        }
        load(&mut model.output.weight, "output.w".into())?;
        load(&mut model.output.bias, "output.b".into())?;
        Ok(model)
    }
}

impl SedModel for BaselineMlp {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_bands(&self) -> usize {
        self.config.input_bands
    }

    fn forward(&mut self, input: &Array, mode: Mode) -> Result<Prediction> {
        let s = input.shape();
        if s.len() != 3 || s[2] != self.config.input_bands {
            return Err(Error::shape(format!(
                "baseline expects [batch, time, {}], got {s:?}",
                self.config.input_bands
            )));
        }
        let mut h = self.stack_context(input);
        for (dense, drop) in &mut self.hidden {
            h = dense.forward(&h, mode)?;
            h = drop.forward(&h, mode)?;
        }
        h = self.output.forward(&h, mode)?;
        let strong = self.sigmoid.forward(&h, mode)?;
        self.input_shape = Some(s.to_vec());
        Ok(Prediction { strong, weak: None })
    }

    fn backward(&mut self, grad_strong: &Array, _grad_weak: Option<&Array>) -> Result<Array> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::invalid("backward called before forward"))?;
        let mut g = self.sigmoid.backward(grad_strong)?;
        g = self.output.backward(&g)?;
        for (dense, drop) in self.hidden.iter_mut().rev() {
            g = drop.backward(&g)?;
            g = dense.backward(&g)?;
        }
        self.unstack_context(&g, &shape)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.hidden.iter().flat_map(|(d, _)| d.params()).collect();
        out.extend(self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            self.hidden.iter_mut().flat_map(|(d, _)| d.params_mut()).collect();
        out.extend(self.output.params_mut());
        out
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, (dense, _)) in self.hidden.iter().enumerate() {
            tensors.push((format!("hidden{i}.w"), dense.weight.to_array()));
            tensors.push((format!("hidden{i}.b"), dense.bias.to_array()));
        }
        tensors.push(("output.w".into(), self.output.weight.to_array()));
        tensors.push(("output.b".into(), self.output.bias.to_array()));
        Checkpoint {
            config: self.config.to_kv(),
            tensors,
        }
    }
}
