//! Small MLP and convnet classifiers with a flat parameter view.
//!
//! Both architectures are normalization-free on purpose: subset forward
//! passes must produce the same per-example values as full-batch passes,
//! which batch statistics would break.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{GradientMap, Mode, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 7] = b"SAMKIT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected net: input -> hidden widths -> classes. An empty
    /// hidden list gives a plain linear (logistic) classifier.
    Mlp { hidden: Vec<usize> },
    /// Two 3x3 same-padded conv layers, each followed by relu and 2x2
    /// max-pool, then two fully connected layers.
    ConvNet { channels: [usize; 2], fc: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// `[features]` for the MLP, `[channels, height, width]` for the convnet.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(features: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> Self {
        ModelConfig {
            arch: Architecture::Mlp { hidden },
            input_shape: vec![features],
            classes,
            seed,
        }
    }

    pub fn convnet(input_shape: [usize; 3], channels: [usize; 2], fc: usize, classes: usize, seed: u64) -> Self {
        ModelConfig {
            arch: Architecture::ConvNet { channels, fc },
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be >= 2, got {}",
                self.classes
            )));
        }
        if self.input_shape.iter().product::<usize>() == 0 {
            return Err(Error::InvalidArgument("input shape has a zero extent".into()));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if self.input_shape.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "mlp wants input shape [features], got {:?}",
                        self.input_shape
                    )));
                }
                if hidden.contains(&0) {
                    return Err(Error::InvalidArgument("hidden width 0".into()));
                }
            }
            Architecture::ConvNet { channels, fc } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "convnet wants input shape [channels, h, w], got {:?}",
                        self.input_shape
                    )));
                }
                if channels.contains(&0) || *fc == 0 {
                    return Err(Error::InvalidArgument("channel or fc width 0".into()));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "convnet input {h}x{w} must be divisible by 4 (two 2x2 pools)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A parameter tensor and its role, in forward order.
#[derive(Debug, Clone)]
struct Param {
    tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

impl Model {
    /// Initializes parameters with uniform fan-in scaling,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, from a SplitMix64 stream seeded
    /// by `config.seed`. The same seed always yields the same bits.
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let mut params = Vec::new();
        let mut push = |rng: &mut SplitMix64, shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.next_symmetric(bound)).collect();
            params.push(Param {
                tensor: Tensor::new(shape, data).unwrap().with_requires_grad(true),
            });
        };
        match &config.arch {
            Architecture::Mlp { hidden } => {
                let mut dims = vec![config.input_shape[0]];
                dims.extend_from_slice(hidden);
                dims.push(config.classes);
                for pair in dims.windows(2) {
                    let (fan_in, fan_out) = (pair[0], pair[1]);
                    push(&mut rng, vec![fan_in, fan_out], fan_in);
                    push(&mut rng, vec![fan_out], fan_in);
                }
            }
            Architecture::ConvNet { channels, fc } => {
                let [c1, c2] = *channels;
                let cin = config.input_shape[0];
                let (h, w) = (config.input_shape[1], config.input_shape[2]);
                push(&mut rng, vec![c1, cin, 3, 3], cin * 9);
                push(&mut rng, vec![c1], cin * 9);
                push(&mut rng, vec![c2, c1, 3, 3], c1 * 9);
                push(&mut rng, vec![c2], c1 * 9);
                let flat = c2 * (h / 4) * (w / 4);
                push(&mut rng, vec![flat, *fc], flat);
                push(&mut rng, vec![*fc], flat);
                push(&mut rng, vec![*fc, config.classes], *fc);
                push(&mut rng, vec![config.classes], *fc);
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total parameter count P.
    pub fn param_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Builds the forward graph on `tape` from an input already registered
    /// there. Input batches are accepted in any layout whose per-example
    /// size matches the configured input shape.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let in_len: usize = self.config.input_shape.iter().product();
        let shape = tape.value(input).shape().to_vec();
        if shape.is_empty() || shape[1..].iter().product::<usize>() != in_len {
            return Err(Error::shape(
                "model_forward",
                format!("input {:?} does not match per-example shape {:?}", shape, self.config.input_shape),
            ));
        }
        let batch = shape[0];
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.tensor.clone()))
            .collect();
        match &self.config.arch {
            Architecture::Mlp { hidden } => {
                let mut h = tape.reshape(input, &[batch, in_len])?;
                let n_layers = hidden.len() + 1;
                for layer in 0..n_layers {
                    h = tape.matmul(h, param_vars[2 * layer])?;
                    h = tape.bias_add(h, param_vars[2 * layer + 1])?;
                    if layer + 1 < n_layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::ConvNet { channels, .. } => {
                let cin = self.config.input_shape[0];
                let (ih, iw) = (self.config.input_shape[1], self.config.input_shape[2]);
                let mut h = tape.reshape(input, &[batch, cin, ih, iw])?;
                h = tape.conv2d(h, param_vars[0], 1)?;
                h = tape.bias_add(h, param_vars[1])?;
                h = tape.relu(h)?;
                h = tape.max_pool2(h)?;
                h = tape.conv2d(h, param_vars[2], 1)?;
                h = tape.bias_add(h, param_vars[3])?;
                h = tape.relu(h)?;
                h = tape.max_pool2(h)?;
                let flat = channels[1] * (ih / 4) * (iw / 4);
                h = tape.reshape(h, &[batch, flat])?;
                h = tape.matmul(h, param_vars[4])?;
                h = tape.bias_add(h, param_vars[5])?;
                h = tape.relu(h)?;
                h = tape.matmul(h, param_vars[6])?;
                h = tape.bias_add(h, param_vars[7])?;
                Ok(h)
            }
        }
    }

    /// Forward-only logits for evaluation; nothing is recorded.
    pub fn forward_infer(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.leaf(inputs.clone());
        let logits = self.forward(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Copies all parameters into one flat vector, in layer order.
    pub fn params_flat(&self) -> ParamVector {
        let mut data = Vec::with_capacity(self.param_len());
        for p in &self.params {
            data.extend_from_slice(p.tensor.data());
        }
        ParamVector::from_vec(data)
    }

    /// Overwrites all parameters from a flat vector. Restoring a snapshot
    /// taken with [`Model::params_flat`] is bitwise exact, which is what the
    /// perturb/revert cycle in the SAM family relies on.
    pub fn set_flat(&mut self, v: &ParamVector) -> Result<()> {
        self.check_len(v)?;
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.tensor.len();
            p.tensor
                .data_mut()
                .copy_from_slice(&v.as_slice()[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// In-place `w += v` without reallocating parameter storage.
    pub fn add_in_place(&mut self, v: &ParamVector) -> Result<()> {
        self.check_len(v)?;
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.tensor.len();
            for (w, dv) in p.tensor.data_mut().iter_mut().zip(&v.as_slice()[offset..offset + len]) {
                *w += dv;
            }
            offset += len;
        }
        Ok(())
    }

    /// Flattens a gradient map into parameter order; parameters that did not
    /// participate in the graph contribute zeros.
    pub fn flatten_grads(&self, grads: &GradientMap) -> ParamVector {
        let mut data = Vec::with_capacity(self.param_len());
        for (i, p) in self.params.iter().enumerate() {
            match grads.get(ParamId(i)) {
                Some(g) => data.extend_from_slice(g.data()),
                None => data.extend(std::iter::repeat_n(0.0, p.tensor.len())),
            }
        }
        ParamVector::from_vec(data)
    }

    fn check_len(&self, v: &ParamVector) -> Result<()> {
        if v.len() != self.param_len() {
            return Err(Error::shape(
                "param_vector",
                format!("length {} vs P={}", v.len(), self.param_len()),
            ));
        }
        Ok(())
    }

    /// Checkpoint layout: magic `SAMKIT1`, architecture byte (0 mlp,
    /// 1 convnet), u16 width count, widths as u32 little-endian, P as u64
    /// little-endian, then P f64 little-endian values in flat order.
    /// MLP widths are `[features, hidden.., classes]`; convnet widths are
    /// `[cin, h, w, c1, c2, fc, classes]`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let widths: Vec<u32> = match &self.config.arch {
            Architecture::Mlp { hidden } => {
                buf.push(0);
                let mut w = vec![self.config.input_shape[0] as u32];
                w.extend(hidden.iter().map(|&x| x as u32));
                w.push(self.config.classes as u32);
                w
            }
            Architecture::ConvNet { channels, fc } => {
                buf.push(1);
                vec![
                    self.config.input_shape[0] as u32,
                    self.config.input_shape[1] as u32,
                    self.config.input_shape[2] as u32,
                    channels[0] as u32,
                    channels[1] as u32,
                    *fc as u32,
                    self.config.classes as u32,
                ]
            }
        };
        buf.extend_from_slice(&(widths.len() as u16).to_le_bytes());
        for w in &widths {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        let flat = self.params_flat();
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(7)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let kind = cur.take(1)?[0];
        let n_widths = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let config = match kind {
            0 => {
                if widths.len() < 2 {
                    return Err(Error::Checkpoint("mlp needs at least [in, classes]".into()));
                }
                let features = widths[0];
                let classes = *widths.last().unwrap();
                let hidden = widths[1..widths.len() - 1].to_vec();
                ModelConfig::mlp(features, hidden, classes, 0)
            }
            1 => {
                if widths.len() != 7 {
                    return Err(Error::Checkpoint(format!(
                        "convnet needs 7 widths, got {}",
                        widths.len()
                    )));
                }
                ModelConfig::convnet(
                    [widths[0], widths[1], widths[2]],
                    [widths[3], widths[4]],
                    widths[5],
                    widths[6],
                    0,
                )
            }
            k => return Err(Error::Checkpoint(format!("unknown architecture byte {k}"))),
        };
        let p = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let mut model = Model::init(config)?;
        if p != model.param_len() {
            return Err(Error::Checkpoint(format!(
                "P={} does not match architecture ({} expected)",
                p,
                model.param_len()
            )));
        }
        let mut data = Vec::with_capacity(p);
        for _ in 0..p {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        model.set_flat(&ParamVector::from_vec(data))?;
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_784() -> Model {
        Model::init(ModelConfig::mlp(784, vec![256], 10, 7)).unwrap()
    }

    #[test]
    fn mlp_parameter_count() {
        // 784*256 + 256 + 256*10 + 10
        assert_eq!(mlp_784().param_len(), 203_530);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = Model::init(ModelConfig::mlp(32, vec![16], 4, 5)).unwrap();
        let b = Model::init(ModelConfig::mlp(32, vec![16], 4, 5)).unwrap();
        assert!(a.params_flat().bitwise_eq(&b.params_flat()));
    }

    #[test]
    fn zero_width_rejected() {
        assert!(Model::init(ModelConfig::mlp(32, vec![0], 4, 5)).is_err());
        assert!(Model::init(ModelConfig::convnet([1, 28, 28], [0, 8], 32, 10, 1)).is_err());
        assert!(Model::init(ModelConfig::mlp(32, vec![8], 1, 5)).is_err());
    }

    #[test]
    fn logits_shape() {
        let model = Model::init(ModelConfig::mlp(6, vec![4], 3, 2)).unwrap();
        let x = Tensor::new(vec![1, 6], vec![0.1; 6]).unwrap();
        let logits = model.forward_infer(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
    }

    #[test]
    fn train_and_infer_forward_match() {
        let model = Model::init(ModelConfig::mlp(6, vec![4], 3, 2)).unwrap();
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 / 7.0 - 0.6).collect()).unwrap();
        let infer = model.forward_infer(&x).unwrap();
        let mut tape = Tape::new(Mode::Train);
        let xv = tape.leaf(x);
        let logits = model.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(logits).data(), infer.data());
    }

    #[test]
    fn perturb_and_restore_is_bitwise() {
        let mut model = Model::init(ModelConfig::mlp(6, vec![4], 3, 9)).unwrap();
        let before = model.params_flat();
        let x = Tensor::new(vec![1, 6], vec![0.3; 6]).unwrap();
        let logits_before = model.forward_infer(&x).unwrap();

        let eps = ParamVector::from_vec((0..model.param_len()).map(|i| (i as f64).sin() * 1e-3).collect());
        model.add_in_place(&eps).unwrap();
        model.set_flat(&before).unwrap();

        assert!(model.params_flat().bitwise_eq(&before));
        let logits_after = model.forward_infer(&x).unwrap();
        assert!(logits_before
            .data()
            .iter()
            .zip(logits_after.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn add_in_place_norm_bound() {
        let mut model = Model::init(ModelConfig::mlp(6, vec![4], 3, 9)).unwrap();
        let before_norm = model.params_flat().l2_norm();
        let rho = 0.05;
        let raw = ParamVector::from_vec((0..model.param_len()).map(|i| (i as f64 + 1.0).cos()).collect());
        let eps = raw.scaled(rho / raw.l2_norm());
        model.add_in_place(&eps).unwrap();
        let after_norm = model.params_flat().l2_norm();
        assert!((after_norm - before_norm).abs() <= rho + 1e-12);
    }

    #[test]
    fn wrong_length_vector_rejected() {
        let mut model = Model::init(ModelConfig::mlp(6, vec![4], 3, 9)).unwrap();
        assert!(model.add_in_place(&ParamVector::zeros(3)).is_err());
        assert!(model.set_flat(&ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(ModelConfig::convnet([1, 8, 8], [2, 3], 5, 4, 3)).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config().arch, model.config().arch);
        assert!(loaded.params_flat().bitwise_eq(&model.params_flat()));
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTSAM1rest").unwrap();
        assert!(matches!(Model::load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn convnet_forward_shape() {
        let model = Model::init(ModelConfig::convnet([1, 8, 8], [2, 3], 5, 4, 3)).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], vec![0.25; 128]).unwrap();
        let logits = model.forward_infer(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
    }
}
