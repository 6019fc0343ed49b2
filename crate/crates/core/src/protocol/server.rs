//! Server-side steps: supervised fine-tuning, sBN refresh, client sampling,
//! aggregation, global momentum and the learning-rate schedule.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use super::{stream, StepError, StreamKey};
use crate::augment::{weak_batch, WeakAugment};
use crate::data::{ClientShard, SampleShape};
use crate::model::{
    sgd_step, LayerContribution, Matrix, ModelError, MomentumState, Network, NormSource,
    ParamSet, SbnState, SgdConfig,
};

/// Epoch/batch/optimizer settings for one local training call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
}

/// Step count and mean minibatch loss of one local training call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_loss: Option<f64>,
}

impl TrainStats {
    pub(crate) fn from_losses(losses: &[f64]) -> Self {
        TrainStats {
            steps: losses.len(),
            mean_loss: (!losses.is_empty())
                .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        }
    }
}

/// One epoch's minibatches: a uniform shuffle of `0..n` cut into chunks of
/// `batch`. A trailing chunk of a single row is merged into the previous one,
/// since batch-mode normalization needs two rows. `n == 1` yields no batches.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.pop_if(|b| b.len() == 1) {
        match batches.last_mut() {
            Some(prev) => prev.extend(last),
            None => return Vec::new(),
        }
    }
    batches
}

/// Row-wise selection of a target matrix.
pub(crate) fn select(m: &Matrix, rows: &[usize]) -> Matrix {
    m.select_rows(rows)
}

/// `E` epochs of supervised SGD on `(x, targets)` with weak augmentation.
/// Momentum starts from zero on every call.
#[allow(clippy::too_many_arguments)]
pub fn server_update(
    network: &Network,
    params: &ParamSet,
    x: &Matrix,
    targets: &Matrix,
    shape: SampleShape,
    weak: &WeakAugment,
    train: LocalTraining,
    key: &StreamKey,
) -> Result<(ParamSet, TrainStats), StepError> {
    let mut w = params.clone();
    let mut mstate = MomentumState::zeros_like(&w);
    let mut shuffle = key.rng(stream::SHUFFLE_FIX);
    let mut weak_rng = key.rng(stream::WEAK);
    let mut losses = Vec::new();
    for _ in 0..train.epochs {
        for rows in epoch_batches(x.rows(), train.batch, &mut shuffle) {
            let xb = weak_batch(&x.select_rows(&rows), shape, weak, &mut weak_rng)?;
            let (loss, grad) =
                network.loss_and_grad(&w, &xb, &select(targets, &rows), NormSource::Batch)?;
            sgd_step(&mut w, &grad, &mut mstate, train.sgd)?;
            losses.push(loss);
        }
    }
    Ok((w, TrainStats::from_losses(&losses)))
}

/// Which data the global sBN statistics are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbnVariant {
    ServerOnly,
    ServerAndClients,
}

/// Per-layer `(N_m, mu_m, sigma_m^2)` of one participant's data under `params`.
/// Participants with fewer than two rows contribute nothing.
pub fn participant_stats(
    network: &Network,
    params: &ParamSet,
    x: &Matrix,
) -> Result<Option<Vec<LayerContribution>>, ModelError> {
    if x.rows() < 2 {
        return Ok(None);
    }
    let moments = network.layer_moments(params, x)?;
    Ok(Some(moments.iter().map(LayerContribution::from).collect()))
}

/// Statistics from every client, as gathered by one extra query round.
pub fn client_stats(
    network: &Network,
    params: &ParamSet,
    shards: &[ClientShard],
) -> Result<Vec<Vec<LayerContribution>>, ModelError> {
    let stats: Vec<Option<Vec<LayerContribution>>> = shards
        .par_iter()
        .map(|s| participant_stats(network, params, s.features()))
        .collect::<Result<_, _>>()?;
    Ok(stats.into_iter().flatten().collect())
}

/// Global sBN statistics. `server_only` takes population moments of one
/// full-batch pass over the server data; `server_and_clients` pools the
/// server's and every supplied client's moments.
pub fn refresh_sbn(
    network: &Network,
    params: &ParamSet,
    variant: SbnVariant,
    server_x: &Matrix,
    clients: Option<&[Vec<LayerContribution>]>,
) -> Result<SbnState, ModelError> {
    match variant {
        SbnVariant::ServerOnly => {
            if server_x.rows() < 2 {
                return Err(ModelError::DegenerateStatistics);
            }
            let moments = network.layer_moments(params, server_x)?;
            Ok(SbnState::from_moments(&moments, server_x.rows() as u64))
        }
        SbnVariant::ServerAndClients => {
            let mut parts: Vec<Vec<LayerContribution>> = Vec::new();
            parts.extend(participant_stats(network, params, server_x)?);
            parts.extend(clients.unwrap_or_default().iter().cloned());
            crate::model::pool_state(&parts)
        }
    }
}

/// `max(floor(C * M), 1)` distinct ids drawn uniformly, sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(num_clients: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    if num_clients == 0 {
        return Vec::new();
    }
    let k = ((rate * num_clients as f64 + 1e-9).floor() as usize).clamp(1, num_clients);
    let mut ids = index::sample(rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Unweighted mean of the received parameter sets, or `None` when nothing was
/// received. A single set is returned unchanged.
pub fn aggregate(received: &[&ParamSet]) -> Result<Option<ParamSet>, ModelError> {
    let (first, rest) = match received.split_first() {
        Some(split) => split,
        None => return Ok(None),
    };
    let mut acc = (*first).clone();
    for p in rest {
        acc.add_scaled(p, 1.0)?;
    }
    if !rest.is_empty() {
        let n = received.len() as f64;
        acc.flat_mut().for_each(|v| *v /= n);
    }
    Ok(Some(acc))
}

/// Server-side momentum on the pseudo-gradient `W_prev - W_agg`:
/// `v' = beta * v + (W_prev - W_agg)`, `W_next = W_prev - v'`.
/// With `beta == 0` the result is `W_agg` itself.
pub fn apply_global_momentum(
    prev: &ParamSet,
    agg: &ParamSet,
    beta: f64,
    velocity: &mut ParamSet,
) -> Result<ParamSet, ModelError> {
    prev.check_compatible(agg)?;
    prev.check_compatible(velocity)?;
    for ((v, p), a) in velocity.flat_mut().zip(prev.flat()).zip(agg.flat()) {
        *v = beta * *v + (p - a);
    }
    if beta == 0.0 {
        return Ok(agg.clone());
    }
    let mut next = prev.clone();
    next.add_scaled(velocity, -1.0)?;
    Ok(next)
}

/// `eta0 * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(eta0: f64, t: usize, horizon: usize) -> Result<f64, super::ProtocolError> {
    if t > horizon {
        return Err(super::ProtocolError::Schedule { t, horizon });
    }
    if horizon == 0 {
        return Ok(eta0);
    }
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    Ok(eta0 * (1.0 + phase.cos()) / 2.0)
}

/// Test accuracy of `params` with global statistics `sbn`.
pub fn evaluate(
    network: &Network,
    params: &ParamSet,
    sbn: &SbnState,
    x: &Matrix,
    labels: &[usize],
) -> Result<f64, ModelError> {
    let probs = network.forward(params, NormSource::Global(sbn), x)?;
    Ok(crate::model::accuracy(&probs, labels))
}
