use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::block::{self, BlockCache, LnCache};
use super::config::{ModelConfig, Part};
use super::params::{Backbone, BlockAdapter, Head, TrainableParams};
use crate::error::{ElsaError, Result};
use crate::seed;

/// Padding token id; padded positions are masked out of attention and pooling.
pub const PAD: u32 = 0;

/// A boundary activation: one row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub values: DMatrix<f64>,
    pub mask: Vec<bool>,
}

impl Activation {
    pub fn new(values: DMatrix<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != mask.len() {
            return Err(ElsaError::Input(format!(
                "activation has {} rows but mask has {} entries",
                values.nrows(),
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cached intermediates of one part's blocks.
#[derive(Debug, Clone)]
pub struct PartCache {
    part: Part,
    mask: Vec<bool>,
    blocks: Vec<BlockCache>,
}

/// Cached intermediates of the tail: blocks plus the pooled head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    blocks: PartCache,
    final_ln: LnCache,
    pooled: DVector<f64>,
    probs: DVector<f64>,
    label: usize,
}

/// Output of the tail forward.
#[derive(Debug, Clone)]
pub struct TailOutput {
    pub logits: DVector<f64>,
    pub loss: f64,
    pub cache: HeadCache,
}

/// Records a full split forward so the whole chain can be differentiated at once.
#[derive(Debug, Clone, Default)]
pub struct SplitTape {
    pub part1: Option<PartCache>,
    pub part2: Option<PartCache>,
    pub part3: Option<HeadCache>,
}

/// Gradients for every trainable tensor plus the two boundary gradients.
#[derive(Debug, Clone)]
pub struct SplitGrads {
    pub params: TrainableParams,
    /// d loss / d H_down as seen by the tail.
    pub grad_h_down: DMatrix<f64>,
    /// d loss / d H_up as seen by the edge.
    pub grad_h_up: DMatrix<f64>,
}

/// Gradients returned by the tail's backward.
#[derive(Debug, Clone)]
pub struct TailGrads {
    pub theta3: Vec<BlockAdapter>,
    pub head: Head,
    pub grad_input: DMatrix<f64>,
}

/// Frozen model definition shared by every party.
#[derive(Debug, Clone)]
pub struct SplitModel {
    cfg: ModelConfig,
    backbone: Arc<Backbone>,
}

/// A model plus one party's trainable parameters.
#[derive(Debug, Clone)]
pub struct SplitModelState {
    pub model: SplitModel,
    pub params: TrainableParams,
}

/// Builds the frozen backbone and fresh adapters for `(cfg, seed)`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<SplitModelState> {
    let model = SplitModel::new(cfg.clone(), seed)?;
    let params = model.init_params(seed);
    Ok(SplitModelState { model, params })
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

impl SplitModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng_for(&[seed::tag::MODEL, seed, 0]);
        let backbone = Arc::new(Backbone::random(&cfg, &mut rng));
        Ok(Self { cfg, backbone })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shares_backbone(&self, other: &SplitModel) -> bool {
        Arc::ptr_eq(&self.backbone, &other.backbone)
    }

    pub fn init_params(&self, seed: u64) -> TrainableParams {
        let mut rng = seed::rng_for(&[seed::tag::MODEL, seed, 1]);
        TrainableParams::init(&self.cfg, &mut rng)
    }

    /// Pads `tokens` to the sequence length and builds the mask.
    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<(Vec<u32>, Vec<bool>)> {
        let mu = self.cfg.seq_len;
        if tokens.is_empty() || tokens.len() > mu {
            return Err(ElsaError::Input(format!(
                "token sequence length {} outside [1, {mu}]",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= self.cfg.vocab_size) {
            return Err(ElsaError::Input(format!(
                "token id {t} out of vocabulary (size {})",
                self.cfg.vocab_size
            )));
        }
        let mut ids = tokens.to_vec();
        let mut mask = vec![true; tokens.len()];
        ids.resize(mu, PAD);
        mask.resize(mu, false);
        Ok((ids, mask))
    }

    /// Token plus positional embedding (frozen).
    pub fn embed(&self, tokens: &[u32]) -> Result<Activation> {
        let (ids, mask) = self.encode_tokens(tokens)?;
        let d = self.cfg.hidden_dim;
        let mut h = DMatrix::zeros(self.cfg.seq_len, d);
        for (i, &t) in ids.iter().enumerate() {
            for j in 0..d {
                h[(i, j)] = self.backbone.embed[(t as usize, j)] + self.backbone.pos[(i, j)];
            }
        }
        Activation::new(h, mask)
    }

    fn check_part(&self, part: Part, adapters: &[BlockAdapter]) -> Result<()> {
        let want = self.cfg.blocks_of(part).len();
        if adapters.len() != want {
            return Err(ElsaError::Input(format!(
                "{part:?} expects {want} block adapters, got {}",
                adapters.len()
            )));
        }
        Ok(())
    }

    fn check_activation(&self, h: &Activation) -> Result<()> {
        let want = (self.cfg.seq_len, self.cfg.hidden_dim);
        if h.values.shape() != want || h.mask.len() != want.0 {
            return Err(ElsaError::Input(format!(
                "activation shape {:?} does not match {:?}",
                h.values.shape(),
                want
            )));
        }
        if !h.mask.iter().any(|m| *m) {
            return Err(ElsaError::Input("activation mask has no valid position".into()));
        }
        Ok(())
    }

    fn run_blocks(
        &self,
        part: Part,
        h: &Activation,
        adapters: &[BlockAdapter],
    ) -> Result<(Activation, PartCache)> {
        self.check_part(part, adapters)?;
        self.check_activation(h)?;
        let mut x = h.values.clone();
        let mut caches = Vec::with_capacity(adapters.len());
        for (idx, ad) in self.cfg.blocks_of(part).zip(adapters) {
            let (y, c) = block::forward(&x, &h.mask, &self.backbone.blocks[idx], ad, self.cfg.n_heads);
            x = y;
            caches.push(c);
        }
        let out = Activation::new(x, h.mask.clone())?;
        if !out.is_finite() {
            return Err(ElsaError::Numeric(format!("non-finite activation leaving {part:?}")));
        }
        Ok((
            out,
            PartCache {
                part,
                mask: h.mask.clone(),
                blocks: caches,
            },
        ))
    }

    fn back_blocks(
        &self,
        cache: &PartCache,
        adapters: &[BlockAdapter],
        grad_out: &DMatrix<f64>,
    ) -> Result<(Vec<BlockAdapter>, DMatrix<f64>)> {
        self.check_part(cache.part, adapters)?;
        let mut g = grad_out.clone();
        let mut grads = Vec::with_capacity(adapters.len());
        let idx: Vec<usize> = self.cfg.blocks_of(cache.part).collect();
        for ((bi, c), ad) in idx.iter().zip(&cache.blocks).zip(adapters).rev() {
            let (dx, ga) = block::backward(&g, c, &self.backbone.blocks[*bi], ad, self.cfg.n_heads);
            g = dx;
            grads.push(ga);
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// Client head: embedding followed by blocks `1..=p`.
    pub fn forward_part1(&self, tokens: &[u32], theta1: &[BlockAdapter]) -> Result<(Activation, PartCache)> {
        let h = self.embed(tokens)?;
        self.run_blocks(Part::Client1, &h, theta1)
    }

    /// Edge middle: blocks `p+1..=p+q`.
    pub fn forward_part2(&self, h_in: &Activation, theta2: &[BlockAdapter]) -> Result<(Activation, PartCache)> {
        self.run_blocks(Part::Edge, h_in, theta2)
    }

    /// Client tail without a label: logits only.
    pub fn forward_part3_logits(
        &self,
        h_in: &Activation,
        theta3: &[BlockAdapter],
        head: &Head,
    ) -> Result<DVector<f64>> {
        let (h, _) = self.run_blocks(Part::Client3, h_in, theta3)?;
        let (pooled, _) = self.pool(&h);
        Ok(self.head_logits(head, &pooled))
    }

    fn pool(&self, h: &Activation) -> (DVector<f64>, LnCache) {
        let (y, c) = block::layer_norm(&h.values, &self.backbone.final_gain, &self.backbone.final_bias);
        let n = h.valid_len() as f64;
        let mut pooled = DVector::zeros(self.cfg.hidden_dim);
        for (i, _) in h.mask.iter().enumerate().filter(|(_, m)| **m) {
            pooled += y.row(i).transpose();
        }
        (pooled / n, c)
    }

    fn head_logits(&self, head: &Head, pooled: &DVector<f64>) -> DVector<f64> {
        head.weight.transpose() * pooled + &head.bias
    }

    /// Client tail: blocks `p+q+1..=M`, final norm, mean pooling over valid
    /// positions, head, cross-entropy against `label`.
    pub fn forward_part3_loss(
        &self,
        h_in: &Activation,
        theta3: &[BlockAdapter],
        head: &Head,
        label: usize,
    ) -> Result<TailOutput> {
        if label >= self.cfg.n_classes {
            return Err(ElsaError::Input(format!(
                "label {label} out of range for {} classes",
                self.cfg.n_classes
            )));
        }
        let (h, blocks) = self.run_blocks(Part::Client3, h_in, theta3)?;
        let (pooled, final_ln) = self.pool(&h);
        let logits = self.head_logits(head, &pooled);
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        Ok(TailOutput {
            logits,
            loss,
            cache: HeadCache {
                blocks,
                final_ln,
                pooled,
                probs,
                label,
            },
        })
    }

    pub fn backward_part3(&self, cache: &HeadCache, theta3: &[BlockAdapter], head: &Head) -> Result<TailGrads> {
        let mut d_logits = cache.probs.clone();
        d_logits[cache.label] -= 1.0;
        let head_grad = Head {
            weight: &cache.pooled * d_logits.transpose(),
            bias: d_logits.clone(),
        };
        let d_pooled = &head.weight * &d_logits;
        let mask = &cache.blocks.mask;
        let n = mask.iter().filter(|m| **m).count() as f64;
        let mut dy = DMatrix::zeros(self.cfg.seq_len, self.cfg.hidden_dim);
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            dy.row_mut(i).copy_from(&(d_pooled.transpose() / n));
        }
        let dh = block::layer_norm_backward(&dy, &self.backbone.final_gain, &cache.final_ln);
        let (theta3_grad, grad_input) = self.back_blocks(&cache.blocks, theta3, &dh)?;
        Ok(TailGrads {
            theta3: theta3_grad,
            head: head_grad,
            grad_input,
        })
    }

    pub fn backward_part2(
        &self,
        cache: &PartCache,
        theta2: &[BlockAdapter],
        grad_out: &DMatrix<f64>,
    ) -> Result<(Vec<BlockAdapter>, DMatrix<f64>)> {
        self.back_blocks(cache, theta2, grad_out)
    }

    /// The embedding is frozen, so only adapter gradients come back.
    pub fn backward_part1(
        &self,
        cache: &PartCache,
        theta1: &[BlockAdapter],
        grad_out: &DMatrix<f64>,
    ) -> Result<Vec<BlockAdapter>> {
        Ok(self.back_blocks(cache, theta1, grad_out)?.0)
    }

    /// Runs the three parts back to back, recording a tape.
    pub fn forward_split(
        &self,
        params: &TrainableParams,
        tokens: &[u32],
        label: usize,
        tape: &mut SplitTape,
    ) -> Result<f64> {
        let (h_up, c1) = self.forward_part1(tokens, &params.theta1)?;
        let (h_down, c2) = self.forward_part2(&h_up, &params.theta2)?;
        let out = self.forward_part3_loss(&h_down, &params.theta3, &params.head, label)?;
        tape.part1 = Some(c1);
        tape.part2 = Some(c2);
        tape.part3 = Some(out.cache);
        Ok(out.loss)
    }

    /// Backward over a recorded tape with no channel between the parts.
    pub fn backward_split(&self, params: &TrainableParams, tape: &SplitTape) -> Result<SplitGrads> {
        let (Some(c1), Some(c2), Some(c3)) = (&tape.part1, &tape.part2, &tape.part3) else {
            return Err(ElsaError::Usage("backward called before a complete forward pass".into()));
        };
        let tail = self.backward_part3(c3, &params.theta3, &params.head)?;
        let (theta2, grad_h_up) = self.backward_part2(c2, &params.theta2, &tail.grad_input)?;
        let theta1 = self.backward_part1(c1, &params.theta1, &grad_h_up)?;
        Ok(SplitGrads {
            params: TrainableParams {
                theta1,
                theta2,
                theta3: tail.theta3,
                head: tail.head,
            },
            grad_h_down: tail.grad_input,
            grad_h_up,
        })
    }

    /// Monolithic loss and gradient for one labelled sequence.
    pub fn loss_and_grad(&self, params: &TrainableParams, tokens: &[u32], label: usize) -> Result<(f64, TrainableParams)> {
        let mut tape = SplitTape::default();
        let loss = self.forward_split(params, tokens, label, &mut tape)?;
        Ok((loss, self.backward_split(params, &tape)?.params))
    }

    /// Mean loss and gradient over a batch.
    pub fn batch_loss_and_grad(
        &self,
        params: &TrainableParams,
        batch: &[(&[u32], usize)],
    ) -> Result<(f64, TrainableParams)> {
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for (tokens, label) in batch {
            let (l, g) = self.loss_and_grad(params, tokens, *label)?;
            loss += l;
            grad.axpy(1.0, &g);
        }
        let n = batch.len().max(1) as f64;
        grad.scale(1.0 / n);
        Ok((loss / n, grad))
    }

    pub fn loss(&self, params: &TrainableParams, tokens: &[u32], label: usize) -> Result<f64> {
        let mut tape = SplitTape::default();
        self.forward_split(params, tokens, label, &mut tape)
    }

    pub fn logits(&self, params: &TrainableParams, tokens: &[u32]) -> Result<DVector<f64>> {
        let (h_up, _) = self.forward_part1(tokens, &params.theta1)?;
        let (h_down, _) = self.forward_part2(&h_up, &params.theta2)?;
        self.forward_part3_logits(&h_down, &params.theta3, &params.head)
    }

    pub fn predict(&self, params: &TrainableParams, tokens: &[u32]) -> Result<usize> {
        Ok(self.logits(params, tokens)?.argmax().0)
    }

    /// Hidden states after every block (no final norm), used for fingerprints.
    pub fn forward_hidden(&self, params: &TrainableParams, tokens: &[u32]) -> Result<Activation> {
        let (h_up, _) = self.forward_part1(tokens, &params.theta1)?;
        let (h_down, _) = self.forward_part2(&h_up, &params.theta2)?;
        Ok(self.run_blocks(Part::Client3, &h_down, &params.theta3)?.0)
    }
}

impl SplitModelState {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }
}
