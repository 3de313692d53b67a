//! One client's boundary channel and the split training step that uses it.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::clustering::ClusterAssignment;
use crate::codec::{channel_forward, sketch_roundtrip_rows, ChannelMode, PerturbationBasis, SketchParams};
use crate::error::{ElsaError, Result};
use crate::model::{Activation, BlockAdapter, SplitModel, TrainableParams};
use crate::seed;

#[derive(Debug, Clone)]
pub struct ClientLink {
    pub client: usize,
    pub mode: ChannelMode,
    pub basis: Option<Arc<PerturbationBasis>>,
    pub rows: usize,
    pub buckets: usize,
    pub dim: usize,
    pub salt: Vec<u8>,
    pub compress_gradients: bool,
    pub edge_unrotate: bool,
    pub zeta: usize,
    /// Run seed, mixed into the gaussian-noise stream.
    pub run_seed: u64,
}

impl ClientLink {
    pub fn sketch_params(&self, round: u64) -> Result<SketchParams> {
        SketchParams::new(self.rows, self.buckets, self.dim, &self.salt, self.client as u64, round)
    }

    /// Bytes for one sequence crossing the boundary in one direction
    /// (padding rows included, header excluded).
    pub fn activation_bytes(&self, seq_len: usize) -> usize {
        let width = if self.mode.sketches() { self.rows * self.buckets } else { self.dim };
        seq_len * width * self.zeta
    }

    fn q(&self) -> Result<&DMatrix<f64>> {
        self.basis
            .as_deref()
            .map(|b| &b.q)
            .ok_or_else(|| ElsaError::Config("ssop+sketch mode requires a perturbation basis".into()))
    }

    /// What the edge computes on after the uplink.
    pub fn uplink(&self, h: &Activation, sp: &SketchParams, noise_seed: u64) -> Result<Activation> {
        let seed = seed::derive(&[self.run_seed, self.client as u64, noise_seed]);
        let mut out = channel_forward(h, self.basis.as_deref(), sp, self.mode, seed)?;
        if self.mode == ChannelMode::SsopSketch && self.edge_unrotate {
            out.values = &out.values * self.q()?;
        }
        Ok(out)
    }

    /// What the client receives back from the edge.
    pub fn downlink(&self, h: &Activation, sp: &SketchParams) -> Result<Activation> {
        if self.mode.sketches() {
            Activation::new(sketch_roundtrip_rows(&h.values, sp)?, h.mask.clone())
        } else {
            Ok(h.clone())
        }
    }

    fn grad_channel(&self, g: &DMatrix<f64>, sp: &SketchParams) -> Result<DMatrix<f64>> {
        if self.mode.sketches() && self.compress_gradients {
            sketch_roundtrip_rows(g, sp)
        } else {
            Ok(g.clone())
        }
    }

    /// Gradient of the loss w.r.t. the edge output, client -> edge.
    pub fn grad_to_edge(&self, g: &DMatrix<f64>, sp: &SketchParams) -> Result<DMatrix<f64>> {
        self.grad_channel(g, sp)
    }

    /// Gradient w.r.t. the edge input, edge -> client, mapped back through
    /// the client's rotation.
    pub fn grad_to_client(&self, g: &DMatrix<f64>, sp: &SketchParams) -> Result<DMatrix<f64>> {
        let mut g = g.clone();
        if self.mode == ChannelMode::SsopSketch && self.edge_unrotate {
            g = &g * self.q()?.transpose();
        }
        let mut g = self.grad_channel(&g, sp)?;
        if self.mode == ChannelMode::SsopSketch {
            g = &g * self.q()?;
        }
        Ok(g)
    }

    /// Forward only, for evaluation: logits of the split model through this link.
    pub fn logits(&self, model: &SplitModel, params: &TrainableParams, tokens: &[u32], round: u64) -> Result<nalgebra::DVector<f64>> {
        let sp = self.sketch_params(round)?;
        let (h1, _) = model.forward_part1(tokens, &params.theta1)?;
        let up = self.uplink(&h1, &sp, round)?;
        let (h2, _) = model.forward_part2(&up, &params.theta2)?;
        let down = self.downlink(&h2, &sp)?;
        model.forward_part3_logits(&down, &params.theta3, &params.head)
    }
}

/// Bytes and loss of one split training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundTraffic {
    pub loss: f64,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    pub gradient_bytes: usize,
}

impl RoundTraffic {
    pub fn activation_bytes(&self) -> usize {
        self.uplink_bytes + self.downlink_bytes
    }
}

/// Gradients of one split step, before the update is applied.
#[derive(Debug, Clone)]
pub struct SplitStep {
    pub client: TrainableParams,
    pub edge: Vec<BlockAdapter>,
    pub traffic: RoundTraffic,
}

/// Forward and backward over a batch through the link, returning mean
/// gradients. `client.theta2` is ignored; the edge's `theta2` is used.
pub fn split_gradients(
    model: &SplitModel,
    link: &ClientLink,
    client: &TrainableParams,
    theta2: &[BlockAdapter],
    batch: &[(&[u32], usize)],
    round: u64,
) -> Result<SplitStep> {
    if batch.is_empty() {
        return Err(ElsaError::Protocol(format!("client {} has an empty batch", link.client)));
    }
    let sp = link.sketch_params(round)?;
    let mut grad = client.zeros_like();
    let mut edge_grad: Vec<BlockAdapter> = theta2.iter().map(BlockAdapter::zeros_like).collect();
    let mut traffic = RoundTraffic::default();
    let per_dir = link.activation_bytes(model.config().seq_len);
    for (i, (tokens, label)) in batch.iter().enumerate() {
        let (h1, c1) = model.forward_part1(tokens, &client.theta1)?;
        let up = link.uplink(&h1, &sp, round.wrapping_mul(1 << 20).wrapping_add(i as u64))?;
        let (h2, c2) = model.forward_part2(&up, theta2)?;
        let down = link.downlink(&h2, &sp)?;
        let out = model.forward_part3_loss(&down, &client.theta3, &client.head, *label)?;
        if !out.loss.is_finite() {
            return Err(ElsaError::Numeric(format!("non-finite loss on client {}", link.client)));
        }

        let tail = model.backward_part3(&out.cache, &client.theta3, &client.head)?;
        let g_down = link.grad_to_edge(&tail.grad_input, &sp)?;
        let (g2, g_up) = model.backward_part2(&c2, theta2, &g_down)?;
        let g_h1 = link.grad_to_client(&g_up, &sp)?;
        let g1 = model.backward_part1(&c1, &client.theta1, &g_h1)?;

        traffic.loss += out.loss;
        for (acc, g) in grad.theta1.iter_mut().zip(&g1) {
            acc.axpy(1.0, g);
        }
        for (acc, g) in grad.theta3.iter_mut().zip(&tail.theta3) {
            acc.axpy(1.0, g);
        }
        grad.head.weight += &tail.head.weight;
        grad.head.bias += &tail.head.bias;
        for (acc, g) in edge_grad.iter_mut().zip(&g2) {
            acc.axpy(1.0, g);
        }
        traffic.uplink_bytes += per_dir;
        traffic.downlink_bytes += per_dir;
        traffic.gradient_bytes += 2 * if link.compress_gradients || !link.mode.sketches() {
            per_dir
        } else {
            model.config().seq_len * link.dim * link.zeta
        };
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    for g in &mut edge_grad {
        g.scale(1.0 / n);
    }
    traffic.loss /= n;
    Ok(SplitStep {
        client: grad,
        edge: edge_grad,
        traffic,
    })
}

/// One SGD step of client `client` on edge `edge`: client-side adapters and
/// head are updated in `client_params`, the edge's shared `theta2` in place.
#[allow(clippy::too_many_arguments)]
pub fn local_split_round(
    model: &SplitModel,
    assignment: &ClusterAssignment,
    client: usize,
    edge: usize,
    link: &ClientLink,
    client_params: &mut TrainableParams,
    theta2: &mut [BlockAdapter],
    batch: &[(&[u32], usize)],
    lr: f64,
    round: u64,
) -> Result<RoundTraffic> {
    if assignment.edge_of.get(client).copied().flatten() != Some(edge) {
        return Err(ElsaError::Protocol(format!("client {client} is not assigned to edge {edge}")));
    }
    if link.client != client {
        return Err(ElsaError::Protocol(format!("link belongs to client {}, not {client}", link.client)));
    }
    let step = split_gradients(model, link, client_params, theta2, batch, round)?;
    for (p, g) in client_params.theta1.iter_mut().zip(&step.client.theta1) {
        p.axpy(-lr, g);
    }
    for (p, g) in client_params.theta3.iter_mut().zip(&step.client.theta3) {
        p.axpy(-lr, g);
    }
    client_params.head.weight -= &step.client.head.weight * lr;
    client_params.head.bias -= &step.client.head.bias * lr;
    for (p, g) in theta2.iter_mut().zip(&step.edge) {
        p.axpy(-lr, g);
    }
    Ok(step.traffic)
}
