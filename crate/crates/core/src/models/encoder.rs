use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Param, Rng, Tensor};

use super::{ModelError, Result};

const MASK_BIAS: f64 = -1e4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 {
            return fail("layers, hidden size and heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.intermediate_size == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail(
                "intermediate size, vocabulary and sequence length must be positive".into(),
            );
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    /// Same architecture with a different depth.
    pub fn with_layers(&self, num_layers: usize) -> Self {
        EncoderConfig {
            num_layers,
            ..self.clone()
        }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub w_qkv: Param<T>,
    pub b_qkv: Param<T>,
    pub w_o: Param<T>,
    pub b_o: Param<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub w_1: Param<T>,
    pub b_1: Param<T>,
    pub w_2: Param<T>,
    pub b_2: Param<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new(idx: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (h, f, s) = (cfg.hidden_size, cfg.intermediate_size, cfg.init_std);
        let n = |name: &str| format!("layer{idx}.{name}");
        EncoderLayer {
            ln1_g: Param::filled(n("ln1_g"), vec![h], T::one()),
            ln1_b: Param::zeros(n("ln1_b"), vec![h]),
            w_qkv: Param::normal(n("w_qkv"), vec![h, 3 * h], s, rng),
            b_qkv: Param::zeros(n("b_qkv"), vec![3 * h]),
            w_o: Param::normal(n("w_o"), vec![h, h], s, rng),
            b_o: Param::zeros(n("b_o"), vec![h]),
            ln2_g: Param::filled(n("ln2_g"), vec![h], T::one()),
            ln2_b: Param::zeros(n("ln2_b"), vec![h]),
            w_1: Param::normal(n("w_1"), vec![h, f], s, rng),
            b_1: Param::zeros(n("b_1"), vec![f]),
            w_2: Param::normal(n("w_2"), vec![f, h], s, rng),
            b_2: Param::zeros(n("b_2"), vec![h]),
        }
    }

    fn params(&self) -> [&Param<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_o,
            &self.b_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<'g, T: Scalar> {
    /// `[batch × num_classes]`.
    pub logits: Tensor<'g, T>,
    /// CLS row of the residual stream after each layer, `[batch × H]`,
    /// bottom layer first.
    pub cls: Vec<Tensor<'g, T>>,
}

impl<'g, T: Scalar> ModelOutput<'g, T> {
    pub fn predicted_labels(&self) -> Vec<usize> {
        let c = self.logits.shape()[1];
        self.logits
            .with_value(|v| v.chunks(c).map(argmax).collect())
    }

    /// CLS embedding of the last layer.
    pub fn last_cls(&self) -> Tensor<'g, T> {
        *self.cls.last().expect("at least one layer")
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Encoder classifier: token and learned position embeddings, pre-norm
/// blocks, a final layer norm on the CLS row and a linear head.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    cfg: EncoderConfig,
    pub tok_emb: Param<T>,
    pub pos_emb: Param<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub lnf_g: Param<T>,
    pub lnf_b: Param<T>,
    pub w_cls: Param<T>,
    pub b_cls: Param<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, s) = (cfg.hidden_size, cfg.init_std);
        let tok_emb = Param::normal("tok_emb", vec![cfg.vocab_size, h], s, rng);
        let pos_emb = Param::normal("pos_emb", vec![cfg.max_seq_len, h], s, rng);
        let layers = (0..cfg.num_layers)
            .map(|i| EncoderLayer::new(i, &cfg, rng))
            .collect();
        let w_cls = Param::normal("w_cls", vec![h, cfg.num_classes], s, rng);
        Ok(Encoder {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Param::filled("lnf_g", vec![h], T::one()),
            lnf_b: Param::zeros("lnf_b", vec![h]),
            w_cls,
            b_cls: Param::zeros("b_cls", vec![cfg.num_classes]),
            cfg,
        })
    }

    /// Student initialized from the teacher's embeddings, its bottom
    /// `num_layers` blocks, final norm and head.
    pub fn from_teacher_bottom(teacher: &Encoder<T>, num_layers: usize) -> Result<Self> {
        if num_layers == 0 || num_layers > teacher.cfg.num_layers {
            return Err(ModelError::Config(format!(
                "cannot take {num_layers} layers from a {}-layer teacher",
                teacher.cfg.num_layers
            )));
        }
        Ok(Encoder {
            cfg: teacher.cfg.with_layers(num_layers),
            tok_emb: teacher.tok_emb.clone(),
            pos_emb: teacher.pos_emb.clone(),
            layers: teacher.layers[..num_layers].to_vec(),
            lnf_g: teacher.lnf_g.clone(),
            lnf_b: teacher.lnf_b.clone(),
            w_cls: teacher.w_cls.clone(),
            b_cls: teacher.b_cls.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// All parameters in a fixed order; checkpoints and optimizers rely on it.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_cls, &self.b_cls]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_cls,
            &mut self.b_cls,
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Zeroes the classifier weights and bias.
    pub fn zero_head(&mut self) {
        self.w_cls.data.iter_mut().for_each(|v| *v = T::zero());
        self.b_cls.data.iter_mut().for_each(|v| *v = T::zero());
    }

    fn check_input(&self, batch: &TokenBatch) -> Result<()> {
        if batch.batch_size == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if batch.seq_len > self.cfg.max_seq_len {
            return Err(ModelError::Input(format!(
                "sequence length {} exceeds maximum {}",
                batch.seq_len, self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(ModelError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `batch`.
    ///
    /// Passing `dropout_rng` selects train mode. Parameters are bound as
    /// trainable leaves when `trainable` is set, as constants otherwise.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut Rng>,
        trainable: bool,
    ) -> Result<ModelOutput<'g, T>> {
        self.check_input(batch)?;
        let (b, s, h) = (batch.batch_size, batch.seq_len, self.cfg.hidden_size);
        let heads = self.cfg.num_heads;
        let dh = h / heads;
        let p = |x: &Param<T>| g.bind(x, trainable);
        let eps = T::lit(LN_EPS);
        let rate = self.cfg.dropout;
        let mut drop = |t: Tensor<'g, T>| -> Result<Tensor<'g, T>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => Ok(t.dropout(rate, rng)?),
                _ => Ok(t),
            }
        };

        let tok = p(&self.tok_emb)
            .gather_rows(&batch.ids)?
            .reshape(vec![b, s, h])?;
        let pos = p(&self.pos_emb).slice(0, 0, s)?;
        let mut x = drop(tok.add(pos)?.reshape(vec![b * s, h])?)?;

        let bias: Vec<T> = batch
            .mask
            .iter()
            .map(|&m| if m { T::zero() } else { T::lit(MASK_BIAS) })
            .collect();
        let mask = g.constant(vec![b, 1, 1, s], bias)?;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let cls_rows: Vec<usize> = (0..b).map(|r| r * s).collect();

        let mut cls = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let hn = x.layer_norm(p(&layer.ln1_g), p(&layer.ln1_b), eps)?;
            let qkv = hn.matmul(p(&layer.w_qkv))?.add(p(&layer.b_qkv))?;
            let split_heads = |t: Tensor<'g, T>| -> Result<Tensor<'g, T>> {
                Ok(t.reshape(vec![b, s, heads, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(vec![b * heads, s, dh])?)
            };
            let q = split_heads(qkv.slice(1, 0, h)?)?;
            let k = split_heads(qkv.slice(1, h, h)?)?;
            let v = split_heads(qkv.slice(1, 2 * h, h)?)?;
            let scores = q
                .bmm(k, true)?
                .scale(scale)
                .reshape(vec![b, heads, s, s])?
                .add(mask)?
                .softmax()?
                .reshape(vec![b * heads, s, s])?;
            let ctx = scores
                .bmm(v, false)?
                .reshape(vec![b, heads, s, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(vec![b * s, h])?;
            let attn = ctx.matmul(p(&layer.w_o))?.add(p(&layer.b_o))?;
            x = x.add(drop(attn)?)?;

            let hn = x.layer_norm(p(&layer.ln2_g), p(&layer.ln2_b), eps)?;
            let ff = hn
                .matmul(p(&layer.w_1))?
                .add(p(&layer.b_1))?
                .gelu()
                .matmul(p(&layer.w_2))?
                .add(p(&layer.b_2))?;
            x = x.add(drop(ff)?)?;
            cls.push(x.gather_rows(&cls_rows)?);
        }

        let last = *cls.last().expect("validated non-zero depth");
        let pooled = last.layer_norm(p(&self.lnf_g), p(&self.lnf_b), eps)?;
        let logits = pooled.matmul(p(&self.w_cls))?.add(p(&self.b_cls))?;
        Ok(ModelOutput { logits, cls })
    }
}
