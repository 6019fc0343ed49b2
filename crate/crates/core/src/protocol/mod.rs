//! The SemiFL round loop: server fine-tuning, sBN refresh, client sampling,
//! pseudo-labeled client training, aggregation and global momentum.

mod client;
mod server;

pub use client::{
    build_mix, client_update, generate_pseudo, vanilla_client_update, ClientOutcome,
    ClientTraining, PseudoDataset,
};
pub use server::{
    aggregate, apply_global_momentum, client_stats, cosine_lr, epoch_batches, evaluate,
    participant_stats, refresh_sbn, sample_clients, server_update, LocalTraining, SbnVariant,
    TrainStats,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentPolicy};
use crate::data::{ClientShard, LabeledDataset, PseudoLabelScore};
use crate::model::{ModelError, Network, ParamSet, SbnState, SgdConfig};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Participant {
    Server,
    Client(usize),
    Evaluation,
}

impl std::fmt::Display for Participant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Participant::Server => write!(f, "server"),
            Participant::Client(id) => write!(f, "client {id}"),
            Participant::Evaluation => write!(f, "evaluation"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("round {t} is past the schedule horizon {horizon}")]
    Schedule { t: usize, horizon: usize },
    #[error("round {round}, {who}: {source}")]
    Step {
        round: usize,
        who: Participant,
        #[source]
        source: StepError,
    },
}

impl ProtocolError {
    fn at(round: usize, who: Participant) -> impl FnOnce(StepError) -> ProtocolError {
        move |source| ProtocolError::Step { round, who, source }
    }

    fn model_at(round: usize, who: Participant) -> impl FnOnce(ModelError) -> ProtocolError {
        move |e| ProtocolError::Step {
            round,
            who,
            source: e.into(),
        }
    }
}

/// Tags of the independent random streams each participant draws from.
pub mod stream {
    pub const SHUFFLE_FIX: u64 = 1;
    pub const SHUFFLE_MIX: u64 = 2;
    pub const STRONG: u64 = 3;
    pub const WEAK: u64 = 4;
    pub const MIXUP: u64 = 5;
    pub const RESAMPLE: u64 = 6;
    pub const LABEL_WEAK: u64 = 7;
    pub const SAMPLING: u64 = 8;
}

/// Participant id used for the server's streams.
pub const SERVER_ID: u64 = u64::MAX;
/// Participant id used for the round's client-sampling stream.
pub const SAMPLER_ID: u64 = u64::MAX - 1;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifies one participant's randomness in one round. Streams depend only on
/// `(master_seed, round, participant, tag)`, never on execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub round: u64,
    pub participant: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, round: usize, participant: u64) -> Self {
        StreamKey {
            master_seed,
            round: round as u64,
            participant,
        }
    }

    pub fn seed(&self, tag: u64) -> u64 {
        [self.round, self.participant, tag]
            .into_iter()
            .fold(splitmix(self.master_seed), |h, v| splitmix(h ^ v))
    }

    pub fn rng(&self, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(tag))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub server_batch: usize,
    pub client_batch: usize,
    pub activity_rate: f64,
    pub lr: f64,
    pub local_momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub global_momentum: f64,
    pub threshold: f64,
    pub mixup_a: f64,
    pub loss_weight: f64,
    pub scheduler: Scheduler,
    pub sbn_variant: SbnVariant,
    /// Server retrains the aggregate on labels each round. When off, the
    /// per-round server update is skipped; the final fine-tune still runs.
    pub fine_tune_labeled: bool,
    /// Clients pseudo-label once with the received model. When off, labels are
    /// regenerated per batch by the evolving local model.
    pub pseudo_on_receipt: bool,
    pub soft_targets: bool,
    pub mixup_max_trick: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            rounds: 800,
            local_epochs: 5,
            server_batch: 10,
            client_batch: 10,
            activity_rate: 0.1,
            lr: 0.03,
            local_momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            global_momentum: 0.5,
            threshold: 0.95,
            mixup_a: 0.75,
            loss_weight: 1.0,
            scheduler: Scheduler::Cosine,
            sbn_variant: SbnVariant::ServerOnly,
            fine_tune_labeled: true,
            pseudo_on_receipt: true,
            soft_targets: false,
            mixup_max_trick: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let fail = |msg: String| Err(ProtocolError::Config(msg));
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1".into());
        }
        if self.server_batch < 2 || self.client_batch < 2 {
            return fail("batch sizes must be >= 2 for batch statistics".into());
        }
        if !(self.activity_rate > 0.0 && self.activity_rate <= 1.0) {
            return fail(format!("activity_rate {} outside (0, 1]", self.activity_rate));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.local_momentum) {
            return fail(format!("local_momentum {} outside [0, 1)", self.local_momentum));
        }
        if !(0.0..1.0).contains(&self.global_momentum) {
            return fail(format!("global_momentum {} outside [0, 1)", self.global_momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} < 0", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.mixup_a > 0.0 && self.mixup_a.is_finite()) {
            return fail(format!("mixup_a {} must be > 0", self.mixup_a));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return fail(format!("loss_weight {} must be >= 0", self.loss_weight));
        }
        Ok(())
    }

    /// Learning rate of round `t` (1-based); round `t` uses the schedule at `t - 1`.
    pub fn lr_for_round(&self, t: usize) -> Result<f64, ProtocolError> {
        match self.scheduler {
            Scheduler::Constant => Ok(self.lr),
            Scheduler::Cosine => cosine_lr(self.lr, t.saturating_sub(1), self.rounds),
        }
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.local_momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn server_training(&self, lr: f64) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch: self.server_batch,
            sgd: self.sgd(lr),
        }
    }

    pub fn client_training(&self, lr: f64) -> ClientTraining {
        ClientTraining {
            local: LocalTraining {
                epochs: self.local_epochs,
                batch: self.client_batch,
                sgd: self.sgd(lr),
            },
            mixup_a: self.mixup_a,
            max_trick: self.mixup_max_trick,
            loss_weight: self.loss_weight,
        }
    }
}

/// Metrics of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    /// Clients sampled this round.
    pub sampled: usize,
    /// Clients that transmitted a model (`M_t`).
    pub participating: usize,
    /// Accuracy of the round's global model on the test set.
    pub test_accuracy: f64,
    /// Fraction of sampled-client rows that received a pseudo-label.
    pub pseudo_quantity: Option<f64>,
    /// Fraction of pseudo-labels that match the hidden labels.
    pub pseudo_quality: Option<f64>,
    pub server_loss: Option<f64>,
    pub client_loss: Option<f64>,
}

/// Everything one training run needs besides its configuration.
#[derive(Clone, Copy)]
pub struct Federation<'a> {
    pub network: &'a Network,
    pub server: &'a LabeledDataset,
    pub shards: &'a [ClientShard],
    pub test: &'a LabeledDataset,
    pub augment: &'a AugmentPolicy,
}

impl Federation<'_> {
    fn refresh(&self, params: &ParamSet, variant: SbnVariant) -> Result<SbnState, ModelError> {
        let clients = match variant {
            SbnVariant::ServerOnly => None,
            SbnVariant::ServerAndClients => Some(client_stats(self.network, params, self.shards)?),
        };
        refresh_sbn(self.network, params, variant, self.server.x(), clients.as_deref())
    }

    fn evaluate(&self, params: &ParamSet, variant: SbnVariant) -> Result<(SbnState, f64), ModelError> {
        let sbn = self.refresh(params, variant)?;
        let acc = evaluate(self.network, params, &sbn, self.test.x(), self.test.labels())?;
        Ok((sbn, acc))
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub params: ParamSet,
    pub sbn: SbnState,
    /// Test accuracy after the final fine-tune and sBN refresh.
    pub final_accuracy: f64,
}

struct ClientReport {
    outcome: ClientOutcome,
    score: PseudoLabelScore,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs `cfg.rounds` rounds from `init` and then the final fine-tune.
/// `on_round` sees each record as soon as the round completes.
pub fn run_semifl(
    fed: &Federation<'_>,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    run_rounds(fed, cfg, init, master_seed, false, on_round)
}

/// With `parallel_server` the server trains on labels alongside the clients,
/// its model joins the mean, and there is no fine-tune at all.
pub(crate) fn run_rounds(
    fed: &Federation<'_>,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    parallel_server: bool,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    cfg.validate()?;
    let network = fed.network;
    let server_targets = fed.server.one_hot();
    let shape = fed.server.shape();
    let mut w = init;
    let mut velocity = w.zeros_like();
    let mut records = Vec::with_capacity(cfg.rounds);

    let train_server = |w: &ParamSet, round: usize, lr: f64| {
        server_update(
            network,
            w,
            fed.server.x(),
            &server_targets,
            shape,
            &fed.augment.weak,
            cfg.server_training(lr),
            &StreamKey::new(master_seed, round, SERVER_ID),
        )
        .map_err(ProtocolError::at(round, Participant::Server))
    };

    for t in 1..=cfg.rounds {
        let lr = cfg.lr_for_round(t)?;
        let (broadcast, server_loss, server_model) = if parallel_server {
            let (trained, stats) = train_server(&w, t, lr)?;
            (w.clone(), stats.mean_loss, Some(trained))
        } else if cfg.fine_tune_labeled {
            let (tuned, stats) = train_server(&w, t, lr)?;
            (tuned, stats.mean_loss, None)
        } else {
            (w.clone(), None, None)
        };
        let sbn = fed
            .refresh(&broadcast, cfg.sbn_variant)
            .map_err(ProtocolError::model_at(t, Participant::Server))?;
        let mut sampler = StreamKey::new(master_seed, t, SAMPLER_ID).rng(stream::SAMPLING);
        let sampled = sample_clients(fed.shards.len(), cfg.activity_rate, &mut sampler);
        let client_cfg = cfg.client_training(lr);

        let reports: Vec<ClientReport> = sampled
            .par_iter()
            .map(|&id| {
                let shard = &fed.shards[id];
                let key = StreamKey::new(master_seed, t, id as u64);
                let run = || -> Result<ClientReport, StepError> {
                    if cfg.pseudo_on_receipt {
                        let mut weak = key.rng(stream::LABEL_WEAK);
                        let (fix, score) = generate_pseudo(
                            network,
                            &broadcast,
                            &sbn,
                            shard,
                            cfg.threshold,
                            fed.augment,
                            cfg.soft_targets,
                            &mut weak,
                        )?;
                        let mix = build_mix(&fix, &mut key.rng(stream::RESAMPLE));
                        let outcome = client_update(
                            network,
                            &broadcast,
                            &fix,
                            &mix,
                            &client_cfg,
                            fed.augment,
                            shard.shape(),
                            &key,
                        )?;
                        Ok(ClientReport { outcome, score })
                    } else {
                        let (outcome, score) = vanilla_client_update(
                            network,
                            &broadcast,
                            shard,
                            cfg.threshold,
                            cfg.soft_targets,
                            &client_cfg,
                            fed.augment,
                            &key,
                        )?;
                        Ok(ClientReport { outcome, score })
                    }
                };
                run().map_err(ProtocolError::at(t, Participant::Client(id)))
            })
            .collect::<Result<_, _>>()?;

        let mut received: Vec<&ParamSet> = server_model.iter().collect();
        let mut client_losses = Vec::new();
        let mut score = PseudoLabelScore::default();
        let mut participating = 0;
        for r in &reports {
            score = score.merge(r.score);
            if let ClientOutcome::Trained { params, stats } = &r.outcome {
                received.push(params);
                participating += 1;
                client_losses.extend(stats.mean_loss);
            }
        }
        // the momentum step spans the whole round, fine-tune included
        w = match aggregate(&received).map_err(ProtocolError::model_at(t, Participant::Server))? {
            Some(agg) => apply_global_momentum(&w, &agg, cfg.global_momentum, &mut velocity)
                .map_err(ProtocolError::model_at(t, Participant::Server))?,
            None => broadcast,
        };
        let (_, test_accuracy) = fed
            .evaluate(&w, cfg.sbn_variant)
            .map_err(ProtocolError::model_at(t, Participant::Evaluation))?;
        let record = RoundRecord {
            round: t,
            lr,
            sampled: sampled.len(),
            participating,
            test_accuracy,
            pseudo_quantity: score.quantity(),
            pseudo_quality: score.quality(),
            server_loss,
            client_loss: mean(client_losses.into_iter()),
        };
        on_round(&record);
        records.push(record);
    }

    let final_round = cfg.rounds + 1;
    if !parallel_server {
        let lr = cfg.lr_for_round(cfg.rounds.max(1))?;
        w = train_server(&w, final_round, lr)?.0;
    }
    let (sbn, final_accuracy) = fed
        .evaluate(&w, cfg.sbn_variant)
        .map_err(ProtocolError::model_at(final_round, Participant::Evaluation))?;
    Ok(RunOutcome {
        records,
        params: w,
        sbn,
        final_accuracy,
    })
}
