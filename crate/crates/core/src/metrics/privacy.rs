//! Reconstruction and token-identification metrics for what an
//! honest-but-curious edge observes at the client boundary.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec::{buckets_for_ratio, channel_forward, ChannelMode, PerturbationBasis, SketchParams};
use crate::error::{ElsaError, Result};
use crate::metrics::data::Sample;
use crate::model::{Activation, SplitModel, TrainableParams};

/// Position-0 first-part output of every vocabulary token fed alone through
/// the public frozen backbone. Rows are unit-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerTable {
    pub rows: DMatrix<f64>,
}

impl AttackerTable {
    pub fn build(model: &SplitModel) -> Result<Self> {
        let cfg = model.config();
        let backbone_only = model.init_params(0).theta1;
        // fresh adapters have B = 0, so this is the frozen backbone alone
        debug_assert!(backbone_only.iter().all(|a| a.query.b.amax() == 0.0 && a.value.b.amax() == 0.0));
        let mut rows = DMatrix::zeros(cfg.vocab_size, cfg.hidden_dim);
        for v in 0..cfg.vocab_size {
            let (h, _) = model.forward_part1(&[v as u32], &backbone_only)?;
            let row = h.values.row(0);
            let n = row.norm();
            if n > 0.0 {
                rows.row_mut(v).copy_from(&(row / n));
            }
        }
        Ok(Self { rows })
    }

    /// Token whose reference row has the highest cosine with `x` (lowest id on ties).
    pub fn identify(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for v in 0..self.rows.nrows() {
            let s: f64 = (0..x.len()).map(|j| self.rows[(v, j)] * x[j]).sum();
            if s > best.1 {
                best = (v, s);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mode: String,
    pub rho: f64,
    pub rank: usize,
    pub cos_sim: f64,
    pub mse: f64,
    pub token_acc: f64,
    /// Positions counted.
    pub positions: usize,
    /// Positions skipped because a row had zero norm.
    pub skipped: usize,
    /// The mode ignores the compression ratio; the row is repeated per ratio.
    pub rho_independent: bool,
}

/// Running sums over many observed activations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyTally {
    cos: f64,
    sq_err: f64,
    elements: usize,
    hits: usize,
    positions: usize,
    skipped: usize,
}

impl PrivacyTally {
    /// Adds the valid positions of one sequence. `tokens` are the true
    /// (unpadded) ids.
    pub fn add(&mut self, orig: &Activation, observed: &DMatrix<f64>, tokens: &[u32], table: &AttackerTable) -> Result<()> {
        if orig.values.shape() != observed.shape() {
            return Err(ElsaError::Input("original and observed activations differ in shape".into()));
        }
        for (i, valid) in orig.mask.iter().enumerate() {
            if !valid {
                continue;
            }
            let a = orig.values.row(i);
            let b = observed.row(i);
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                self.skipped += 1;
                continue;
            }
            // exact 1.0 when the rows are identical
            let cos = if a == b { 1.0 } else { a.dot(&b) / (na * nb) };
            self.cos += cos;
            self.sq_err += (a - b).norm_squared();
            self.elements += a.len();
            let guess = table.identify(b.transpose().as_slice());
            if tokens.get(i).is_some_and(|&t| t as usize == guess) {
                self.hits += 1;
            }
            self.positions += 1;
        }
        Ok(())
    }

    pub fn report(&self, mode: &str, rho: f64, rank: usize) -> PrivacyReport {
        let p = self.positions.max(1) as f64;
        PrivacyReport {
            mode: mode.to_string(),
            rho,
            rank,
            cos_sim: self.cos / p,
            mse: self.sq_err / self.elements.max(1) as f64,
            token_acc: self.hits as f64 / p,
            positions: self.positions,
            skipped: self.skipped,
            rho_independent: false,
        }
    }
}

/// Metrics for a single observed activation.
pub fn privacy_eval(
    orig: &Activation,
    observed: &DMatrix<f64>,
    tokens: &[u32],
    table: &AttackerTable,
    mode: &str,
    rho: f64,
    rank: usize,
) -> Result<PrivacyReport> {
    let mut t = PrivacyTally::default();
    t.add(orig, observed, tokens, table)?;
    Ok(t.report(mode, rho, rank))
}

/// Grid for [`privacy_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySweep {
    pub ranks: Vec<usize>,
    pub rhos: Vec<f64>,
    pub rows: usize,
    pub salt: Vec<u8>,
    /// Samples are spread round-robin over this many clients, each with its
    /// own secret rotation and hash seeds.
    pub clients: usize,
}

/// Every channel mode over the `(rho, rank)` grid against the attacker table.
/// `basis_source` is the matrix the perturbation subspace is fitted on.
pub fn privacy_sweep(
    model: &SplitModel,
    params: &TrainableParams,
    basis_source: &DMatrix<f64>,
    samples: &[Sample],
    sweep: &PrivacySweep,
) -> Result<Vec<PrivacyReport>> {
    if samples.is_empty() || sweep.clients == 0 || sweep.rhos.is_empty() {
        return Err(ElsaError::Config(
            "privacy sweep needs samples, privacy.clients >= 1 and a non-empty privacy.rhos".into(),
        ));
    }
    let dim = model.config().hidden_dim;
    let table = AttackerTable::build(model)?;
    let boundary: Vec<Activation> = samples
        .iter()
        .map(|s| model.forward_part1(&s.tokens, &params.theta1).map(|(h, _)| h))
        .collect::<Result<_>>()?;

    let run = |mode: ChannelMode, rho: f64, rank: usize| -> Result<PrivacyReport> {
        let buckets = buckets_for_ratio(dim, sweep.rows, rho);
        let bases: Vec<Option<PerturbationBasis>> = (0..sweep.clients.min(samples.len()))
            .map(|c| {
                (mode == ChannelMode::SsopSketch)
                    .then(|| PerturbationBasis::fit(basis_source, rank, &sweep.salt, c as u64))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let mut tally = PrivacyTally::default();
        for (i, (s, h)) in samples.iter().zip(&boundary).enumerate() {
            let c = i % bases.len();
            let sp = SketchParams::new(sweep.rows, buckets, dim, &sweep.salt, c as u64, i as u64)?;
            let observed = channel_forward(h, bases[c].as_ref(), &sp, mode, i as u64)?;
            tally.add(h, &observed.values, &s.tokens, &table)?;
        }
        Ok(tally.report(mode.label(), rho, rank))
    };

    let direct = run(ChannelMode::Direct, 1.0, 0)?;
    let mut noise = run(ChannelMode::GaussianNoise, 1.0, 0)?;
    noise.rho_independent = true;
    let mut out = Vec::new();
    for &rho in &sweep.rhos {
        let mut d = direct.clone();
        d.rho = rho;
        d.rho_independent = true;
        let mut g = noise.clone();
        g.rho = rho;
        out.push(d);
        out.push(g);
        out.push(run(ChannelMode::SketchOnly, rho, 0)?);
        for &r in &sweep.ranks {
            out.push(run(ChannelMode::SsopSketch, rho, r)?);
        }
    }
    Ok(out)
}
