//! Reference pipelines: centralized training on all labels or on the server's
//! labels only, and the parallel FedAvg + FixMatch combination.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::LabeledDataset;
use crate::model::{Network, ParamSet};
use crate::protocol::{
    evaluate, refresh_sbn, run_rounds, server_update, Federation, Participant, ProtocolConfig,
    ProtocolError, RoundRecord, RunOutcome, SbnVariant, StreamKey, SERVER_ID,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FullySupervised,
    PartiallySupervised,
    VanillaParallel,
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "fully_supervised" => Ok(BaselineKind::FullySupervised),
            "partially_supervised" => Ok(BaselineKind::PartiallySupervised),
            "vanilla_parallel" => Ok(BaselineKind::VanillaParallel),
            other => Err(format!(
                "unknown baseline `{other}` (expected fully_supervised, partially_supervised or vanilla_parallel)"
            )),
        }
    }
}

/// Supervised training on `train` with the server's optimizer and schedule:
/// one `server_update` per round, then a refresh of the sBN statistics from
/// `train` and a test evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_centralized(
    network: &Network,
    train: &LabeledDataset,
    test: &LabeledDataset,
    augment: &AugmentPolicy,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    cfg.validate()?;
    let targets = train.one_hot();
    let mut w = init;
    let mut records = Vec::with_capacity(cfg.rounds);
    let eval = |w: &ParamSet, round: usize| {
        refresh_sbn(network, w, SbnVariant::ServerOnly, train.x(), None)
            .and_then(|sbn| {
                let acc = evaluate(network, w, &sbn, test.x(), test.labels())?;
                Ok((sbn, acc))
            })
            .map_err(|e| ProtocolError::Step {
                round,
                who: Participant::Evaluation,
                source: e.into(),
            })
    };
    let mut last = None;
    for t in 1..=cfg.rounds {
        let lr = cfg.lr_for_round(t)?;
        let (next, stats) = server_update(
            network,
            &w,
            train.x(),
            &targets,
            train.shape(),
            &augment.weak,
            cfg.server_training(lr),
            &StreamKey::new(master_seed, t, SERVER_ID),
        )
        .map_err(|source| ProtocolError::Step {
            round: t,
            who: Participant::Server,
            source,
        })?;
        w = next;
        let (sbn, test_accuracy) = eval(&w, t)?;
        let record = RoundRecord {
            round: t,
            lr,
            sampled: 0,
            participating: 0,
            test_accuracy,
            pseudo_quantity: None,
            pseudo_quality: None,
            server_loss: stats.mean_loss,
            client_loss: None,
        };
        on_round(&record);
        records.push(record);
        last = Some((sbn, test_accuracy));
    }
    let (sbn, final_accuracy) = match last {
        Some(v) => v,
        None => eval(&w, 0)?,
    };
    Ok(RunOutcome {
        records,
        params: w,
        sbn,
        final_accuracy,
    })
}

/// Centralized training on every label of the training corpus.
#[allow(clippy::too_many_arguments)]
pub fn run_fully_supervised(
    network: &Network,
    full_train: &LabeledDataset,
    test: &LabeledDataset,
    augment: &AugmentPolicy,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    run_centralized(network, full_train, test, augment, cfg, init, master_seed, on_round)
}

/// Centralized training on the server's labeled split only.
pub fn run_partially_supervised(
    fed: &Federation<'_>,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    run_centralized(
        fed.network,
        fed.server,
        fed.test,
        fed.augment,
        cfg,
        init,
        master_seed,
        on_round,
    )
}

/// Server and clients train in parallel each round and are averaged together;
/// clients pseudo-label every batch with their evolving local model.
pub fn run_parallel_vanilla(
    fed: &Federation<'_>,
    cfg: &ProtocolConfig,
    init: ParamSet,
    master_seed: u64,
    on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutcome, ProtocolError> {
    let cfg = ProtocolConfig {
        fine_tune_labeled: false,
        pseudo_on_receipt: false,
        ..cfg.clone()
    };
    run_rounds(fed, &cfg, init, master_seed, true, on_round)
}
