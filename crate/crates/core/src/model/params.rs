use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Part};
use crate::error::{ElsaError, Result};

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: DVector<f64>,
    pub ln1_bias: DVector<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_gain: DVector<f64>,
    pub ln2_bias: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// The frozen backbone. Nothing in the crate hands out a mutable reference
/// to it once constructed; clients share it through an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embed: DMatrix<f64>,
    pub pos: DMatrix<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: DVector<f64>,
    pub final_bias: DVector<f64>,
}

// Token embeddings mimic the anisotropy of pretrained encoders: a shared
// offset, a handful of semantic directions, and a small isotropic residue.
const EMBED_OFFSET_NORM: f64 = 3.0;
const EMBED_SEMANTIC_DIMS: usize = 6;
const EMBED_NOISE_STD: f64 = 0.2;
const POS_STD: f64 = 0.1;
// Attention and MLP outputs are kept small next to the embedding so the
// residual stream stays concentrated in a few dominant directions.
const BLOCK_OUT_SCALE: f64 = 0.2;

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl Backbone {
    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.mlp_width();
        let normal = Normal::new(0.0, 1.0).unwrap();

        let mut offset = DVector::from_fn(d, |_, _| normal.sample(rng));
        offset *= EMBED_OFFSET_NORM / offset.norm();
        let s = EMBED_SEMANTIC_DIMS.min(d);
        // orthonormal semantic directions via QR of a gaussian block
        let basis = gaussian_matrix(rng, d, s, 1.0).qr().q();
        let codes = gaussian_matrix(rng, cfg.vocab_size, s, 1.0);
        let mut embed = &codes * basis.transpose();
        embed += gaussian_matrix(rng, cfg.vocab_size, d, EMBED_NOISE_STD);
        for mut row in embed.row_iter_mut() {
            row += offset.transpose();
        }
        let pos = gaussian_matrix(rng, cfg.seq_len, d, POS_STD);

        let proj_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                ln1_gain: DVector::from_element(d, 1.0),
                ln1_bias: DVector::zeros(d),
                wq: gaussian_matrix(rng, d, d, proj_std),
                wk: gaussian_matrix(rng, d, d, proj_std),
                wv: gaussian_matrix(rng, d, d, proj_std),
                wo: gaussian_matrix(rng, d, d, BLOCK_OUT_SCALE * proj_std),
                ln2_gain: DVector::from_element(d, 1.0),
                ln2_bias: DVector::zeros(d),
                w1: gaussian_matrix(rng, d, f, proj_std),
                b1: DVector::zeros(f),
                w2: gaussian_matrix(rng, f, d, BLOCK_OUT_SCALE / (f as f64).sqrt()),
                b2: DVector::zeros(d),
            })
            .collect();
        Self {
            embed,
            pos,
            blocks,
            final_gain: DVector::from_element(d, 1.0),
            final_bias: DVector::zeros(d),
        }
    }

    pub fn param_count(&self) -> usize {
        let block: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.ln1_gain.len()
                    + b.ln1_bias.len()
                    + b.wq.len()
                    + b.wk.len()
                    + b.wv.len()
                    + b.wo.len()
                    + b.ln2_gain.len()
                    + b.ln2_bias.len()
                    + b.w1.len()
                    + b.b1.len()
                    + b.w2.len()
                    + b.b2.len()
            })
            .sum();
        self.embed.len() + self.pos.len() + block + self.final_gain.len() + self.final_bias.len()
    }

    /// Little-endian dump of every weight, for byte-level immutability checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        let mut push = |xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(self.embed.as_slice());
        push(self.pos.as_slice());
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                push(m.as_slice());
            }
            for v in [&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.b1, &b.b2] {
                push(v.as_slice());
            }
        }
        push(self.final_gain.as_slice());
        push(self.final_bias.as_slice());
        out
    }
}

/// A low-rank pair adding `B A` to a frozen projection. `a` is `rank x D`,
/// `b` is `D x rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LoraPair {
    fn init<R: Rng>(rank: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / rank as f64;
        let unif = Uniform::new_inclusive(-bound, bound).expect("valid range");
        Self {
            a: DMatrix::from_fn(rank, d, |_, _| unif.sample(rng)),
            b: DMatrix::zeros(d, rank),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: DMatrix::zeros(self.a.nrows(), self.a.ncols()),
            b: DMatrix::zeros(self.b.nrows(), self.b.ncols()),
        }
    }
}

/// Adapters on the query and value projections of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAdapter {
    pub query: LoraPair,
    pub value: LoraPair,
}

impl BlockAdapter {
    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            value: self.value.zeros_like(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        self.query.a += &other.query.a * alpha;
        self.query.b += &other.query.b * alpha;
        self.value.a += &other.value.a * alpha;
        self.value.b += &other.value.b * alpha;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.query.a *= alpha;
        self.query.b *= alpha;
        self.value.a *= alpha;
        self.value.b *= alpha;
    }
}

/// Trainable classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Everything that trains: adapters for the three parts plus the head.
/// Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableParams {
    pub theta1: Vec<BlockAdapter>,
    pub theta2: Vec<BlockAdapter>,
    pub theta3: Vec<BlockAdapter>,
    pub head: Head,
}

impl TrainableParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let r = cfg.lora_rank;
        let mut part = |n: usize| -> Vec<BlockAdapter> {
            (0..n)
                .map(|_| BlockAdapter {
                    query: LoraPair::init(r, d, rng),
                    value: LoraPair::init(r, d, rng),
                })
                .collect()
        };
        let [p, q, o] = cfg.split;
        let theta1 = part(p);
        let theta2 = part(q);
        let theta3 = part(o);
        let head = Head {
            weight: gaussian_matrix(rng, d, cfg.n_classes, 0.1 / (d as f64).sqrt()),
            bias: DVector::zeros(cfg.n_classes),
        };
        Self {
            theta1,
            theta2,
            theta3,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &[BlockAdapter]| v.iter().map(BlockAdapter::zeros_like).collect();
        Self {
            theta1: z(&self.theta1),
            theta2: z(&self.theta2),
            theta3: z(&self.theta3),
            head: Head {
                weight: DMatrix::zeros(self.head.weight.nrows(), self.head.weight.ncols()),
                bias: DVector::zeros(self.head.bias.len()),
            },
        }
    }

    pub fn part(&self, part: Part) -> &[BlockAdapter] {
        match part {
            Part::Client1 => &self.theta1,
            Part::Edge => &self.theta2,
            Part::Client3 => &self.theta3,
        }
    }

    pub fn part_mut(&mut self, part: Part) -> &mut Vec<BlockAdapter> {
        match part {
            Part::Client1 => &mut self.theta1,
            Part::Edge => &mut self.theta2,
            Part::Client3 => &mut self.theta3,
        }
    }

    /// Number of adapter scalars, head excluded.
    pub fn adapter_len(&self) -> usize {
        self.theta1
            .iter()
            .chain(&self.theta2)
            .chain(&self.theta3)
            .map(|b| b.query.a.len() + b.query.b.len() + b.value.a.len() + b.value.b.len())
            .sum()
    }

    pub fn head_len(&self) -> usize {
        self.head.weight.len() + self.head.bias.len()
    }

    pub fn len(&self) -> usize {
        self.adapter_len() + self.head_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in self.theta1.iter().chain(&self.theta2).chain(&self.theta3) {
            out.push(b.query.a.as_slice());
            out.push(b.query.b.as_slice());
            out.push(b.value.a.as_slice());
            out.push(b.value.b.as_slice());
        }
        out.push(self.head.weight.as_slice());
        out.push(self.head.bias.as_slice());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self
            .theta1
            .iter_mut()
            .chain(self.theta2.iter_mut())
            .chain(self.theta3.iter_mut())
        {
            out.push(b.query.a.as_mut_slice());
            out.push(b.query.b.as_mut_slice());
            out.push(b.value.a.as_mut_slice());
            out.push(b.value.b.as_mut_slice());
        }
        out.push(self.head.weight.as_mut_slice());
        out.push(self.head.bias.as_mut_slice());
        out
    }

    /// Flattened view: theta1, theta2, theta3 (per block: qA, qB, vA, vB,
    /// column-major), then head weight and bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for s in self.slices() {
            v.extend_from_slice(s);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(ElsaError::Input(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for dst in self.slices_mut() {
            for d in dst.iter_mut() {
                *d *= alpha;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}
