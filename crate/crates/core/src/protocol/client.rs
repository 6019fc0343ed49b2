//! Client-side steps: pseudo-labeling, the Mixup pool, and local training.

use rand::Rng;

use super::server::{epoch_batches, LocalTraining, TrainStats};
use super::{stream, StepError, StreamKey};
use crate::augment::{draw_lambda, mix_with, strong_batch, weak_batch, AugmentPolicy};
use crate::data::{ClientShard, PseudoLabelScore, SampleShape};
use crate::model::{
    argmax, sgd_step, Matrix, MomentumState, Network, NormSource, ParamSet, SbnState,
};

/// Pseudo-labeled rows: features, training targets, hard labels and the
/// confidence (max probability) each label was accepted with.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    pub x: Matrix,
    /// One-hot rows, or the soft outputs when soft targets are enabled.
    pub targets: Matrix,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Row of each entry in the originating shard.
    pub rows: Vec<usize>,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PseudoDataset {
        PseudoDataset {
            x: self.x.select_rows(idx),
            targets: self.targets.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            confidence: idx.iter().map(|&i| self.confidence[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    /// Keeps rows of `x` whose probability row peaks at or above `tau`.
    /// `row_ids[i]` names row `i` of `x` in its shard.
    pub fn from_probabilities(
        x: &Matrix,
        probs: &Matrix,
        row_ids: &[usize],
        tau: f64,
        soft_targets: bool,
    ) -> PseudoDataset {
        let k = probs.cols();
        let mut keep = Vec::new();
        let mut labels = Vec::new();
        let mut confidence = Vec::new();
        let mut targets = Vec::new();
        for (i, p) in probs.iter_rows().enumerate() {
            let label = argmax(p);
            if p[label] >= tau {
                keep.push(i);
                labels.push(label);
                confidence.push(p[label]);
                if soft_targets {
                    targets.extend_from_slice(p);
                } else {
                    targets.extend((0..k).map(|c| if c == label { 1.0 } else { 0.0 }));
                }
            }
        }
        PseudoDataset {
            x: x.select_rows(&keep),
            targets: Matrix::from_vec(keep.len(), k, targets).expect("k columns per row"),
            labels,
            confidence,
            rows: keep.iter().map(|&i| row_ids[i]).collect(),
        }
    }

    pub fn score(&self, shard: &ClientShard, seen: usize) -> PseudoLabelScore {
        let pairs: Vec<(usize, usize)> = self.rows.iter().copied().zip(self.labels.iter().copied()).collect();
        shard.score_pseudo_labels(seen, &pairs)
    }
}

/// `D_fix`: one weak augmentation and one inference pass (global statistics)
/// per shard row with the received model; rows with confidence `>= tau` kept.
#[allow(clippy::too_many_arguments)]
pub fn generate_pseudo<R: Rng + ?Sized>(
    network: &Network,
    params: &ParamSet,
    sbn: &SbnState,
    shard: &ClientShard,
    tau: f64,
    augment: &AugmentPolicy,
    soft_targets: bool,
    rng: &mut R,
) -> Result<(PseudoDataset, PseudoLabelScore), StepError> {
    let x = shard.features();
    let weak = weak_batch(x, shard.shape(), &augment.weak, rng)?;
    let probs = network.forward(params, NormSource::Global(sbn), &weak)?;
    let ids: Vec<usize> = (0..x.rows()).collect();
    let fix = PseudoDataset::from_probabilities(x, &probs, &ids, tau, soft_targets);
    let score = fix.score(shard, x.rows());
    Ok((fix, score))
}

/// `D_mix`: `|D_fix|` rows drawn uniformly with replacement from `D_fix`.
pub fn build_mix<R: Rng + ?Sized>(fix: &PseudoDataset, rng: &mut R) -> PseudoDataset {
    if fix.is_empty() {
        return fix.clone();
    }
    let idx: Vec<usize> = (0..fix.len()).map(|_| rng.random_range(0..fix.len())).collect();
    fix.select(&idx)
}

/// Local semi-supervised training settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientTraining {
    pub local: LocalTraining,
    pub mixup_a: f64,
    pub max_trick: bool,
    /// Weight `lambda` of the mix loss; zero skips the mix branch.
    pub loss_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientOutcome {
    Trained { params: ParamSet, stats: TrainStats },
    /// `D_fix` was empty; the client sends nothing.
    NoTransmission,
}

struct StepRngs {
    strong: rand_chacha::ChaCha8Rng,
    weak: rand_chacha::ChaCha8Rng,
    mixup: rand_chacha::ChaCha8Rng,
}

impl StepRngs {
    fn new(key: &StreamKey) -> Self {
        StepRngs {
            strong: key.rng(stream::STRONG),
            weak: key.rng(stream::WEAK),
            mixup: key.rng(stream::MIXUP),
        }
    }
}

/// One SGD step on `L_fix + lambda * L_mix`; returns `L_fix + lambda * L_mix`.
#[allow(clippy::too_many_arguments)]
fn semi_step(
    network: &Network,
    w: &mut ParamSet,
    mstate: &mut MomentumState,
    fix: (&Matrix, &Matrix),
    mix: Option<(&Matrix, &Matrix)>,
    cfg: &ClientTraining,
    augment: &AugmentPolicy,
    shape: SampleShape,
    rngs: &mut StepRngs,
) -> Result<f64, StepError> {
    let (x_fix, y_fix) = fix;
    let strong = strong_batch(x_fix, shape, &augment.strong, &mut rngs.strong)?;
    let (mut loss, mut grad) = network.loss_and_grad(w, &strong, y_fix, NormSource::Batch)?;
    if let Some((x_mix, y_mix)) = mix {
        let draw = draw_lambda(cfg.mixup_a, cfg.max_trick, &mut rngs.mixup)?;
        let lam = draw.lambda_mix;
        let mixed = weak_batch(&mix_with(x_fix, x_mix, lam)?, shape, &augment.weak, &mut rngs.weak)?;
        // cross-entropy is linear in the target, so the two weighted terms
        // collapse into one pass against the mixed target
        let targets = mix_with(y_fix, y_mix, lam)?;
        let (mix_loss, mix_grad) = network.loss_and_grad(w, &mixed, &targets, NormSource::Batch)?;
        grad.add_scaled(&mix_grad, cfg.loss_weight)?;
        loss += cfg.loss_weight * mix_loss;
    }
    sgd_step(w, &grad, mstate, cfg.local.sgd)?;
    Ok(loss)
}

/// `E` epochs over paired shuffled batches of `D_fix` and `D_mix`.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    network: &Network,
    params: &ParamSet,
    fix: &PseudoDataset,
    mix: &PseudoDataset,
    cfg: &ClientTraining,
    augment: &AugmentPolicy,
    shape: SampleShape,
    key: &StreamKey,
) -> Result<ClientOutcome, StepError> {
    if fix.is_empty() {
        return Ok(ClientOutcome::NoTransmission);
    }
    let use_mix = cfg.loss_weight != 0.0;
    let mut w = params.clone();
    let mut mstate = MomentumState::zeros_like(&w);
    let mut shuffle_fix = key.rng(stream::SHUFFLE_FIX);
    let mut shuffle_mix = key.rng(stream::SHUFFLE_MIX);
    let mut rngs = StepRngs::new(key);
    let mut losses = Vec::new();
    for _ in 0..cfg.local.epochs {
        let fix_batches = epoch_batches(fix.len(), cfg.local.batch, &mut shuffle_fix);
        let mix_batches = if use_mix {
            epoch_batches(mix.len(), cfg.local.batch, &mut shuffle_mix)
        } else {
            Vec::new()
        };
        for (b, rows) in fix_batches.iter().enumerate() {
            let xf = fix.x.select_rows(rows);
            let yf = fix.targets.select_rows(rows);
            let mixed = mix_batches
                .get(b)
                .map(|r| (mix.x.select_rows(r), mix.targets.select_rows(r)));
            let loss = semi_step(
                network,
                &mut w,
                &mut mstate,
                (&xf, &yf),
                mixed.as_ref().map(|(x, y)| (x, y)),
                cfg,
                augment,
                shape,
                &mut rngs,
            )?;
            losses.push(loss);
        }
    }
    Ok(ClientOutcome::Trained {
        params: w,
        stats: TrainStats::from_losses(&losses),
    })
}

/// The parallel baseline's client: every local batch is pseudo-labeled by the
/// current local model (batch statistics). As in FixMatch the whole batch is
/// forwarded and rows below `tau` get an all-zero target, so they carry no
/// loss. Mix partners are drawn with replacement from the same batch, zero
/// targets included.
/// Sends nothing when no batch ever produced a pseudo-label.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_client_update(
    network: &Network,
    params: &ParamSet,
    shard: &ClientShard,
    tau: f64,
    soft_targets: bool,
    cfg: &ClientTraining,
    augment: &AugmentPolicy,
    key: &StreamKey,
) -> Result<(ClientOutcome, PseudoLabelScore), StepError> {
    let shape = shard.shape();
    let x = shard.features();
    let use_mix = cfg.loss_weight != 0.0;
    let mut w = params.clone();
    let mut mstate = MomentumState::zeros_like(&w);
    let mut shuffle = key.rng(stream::SHUFFLE_FIX);
    let mut resample = key.rng(stream::RESAMPLE);
    let mut label_weak = key.rng(stream::LABEL_WEAK);
    let mut rngs = StepRngs::new(key);
    let mut score = PseudoLabelScore::default();
    let mut losses = Vec::new();
    for _ in 0..cfg.local.epochs {
        for rows in epoch_batches(x.rows(), cfg.local.batch, &mut shuffle) {
            let xb = x.select_rows(&rows);
            let weak = weak_batch(&xb, shape, &augment.weak, &mut label_weak)?;
            let probs = network.forward(&w, NormSource::Batch, &weak)?;
            let local: Vec<usize> = (0..rows.len()).collect();
            let kept = PseudoDataset::from_probabilities(&xb, &probs, &local, tau, soft_targets);
            let in_shard = PseudoDataset {
                rows: kept.rows.iter().map(|&i| rows[i]).collect(),
                ..kept.clone()
            };
            score = score.merge(in_shard.score(shard, rows.len()));
            if kept.is_empty() {
                continue;
            }
            let mut masked = Matrix::zeros(rows.len(), probs.cols());
            for (j, &i) in kept.rows.iter().enumerate() {
                masked.row_mut(i).copy_from_slice(kept.targets.row(j));
            }
            let mix = use_mix.then(|| {
                let pick: Vec<usize> = (0..rows.len())
                    .map(|_| resample.random_range(0..rows.len()))
                    .collect();
                (xb.select_rows(&pick), masked.select_rows(&pick))
            });
            let loss = semi_step(
                network,
                &mut w,
                &mut mstate,
                (&xb, &masked),
                mix.as_ref().map(|(x, y)| (x, y)),
                cfg,
                augment,
                shape,
                &mut rngs,
            )?;
            losses.push(loss);
        }
    }
    let outcome = if score.kept == 0 {
        ClientOutcome::NoTransmission
    } else {
        ClientOutcome::Trained {
            params: w,
            stats: TrainStats::from_losses(&losses),
        }
    };
    Ok((outcome, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let p = probs(&[[0.96, 0.04], [0.5, 0.5]]);
        let fix = PseudoDataset::from_probabilities(&x, &p, &[0, 1], 0.95, false);
        assert_eq!(fix.labels, vec![0]);
        assert_eq!(fix.confidence, vec![0.96]);
        assert_eq!(fix.targets.row(0), &[1.0, 0.0]);
        let all = PseudoDataset::from_probabilities(&x, &p, &[0, 1], 1e-12, false);
        assert_eq!(all.len(), 2);
        // tie goes to the lowest index
        assert_eq!(all.labels[1], 0);
    }

    #[test]
    fn mix_pool_matches_size_and_frequency() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let fix = PseudoDataset::from_probabilities(&x, &probs(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 1], 0.5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ones = 0;
        for _ in 0..500 {
            let mix = build_mix(&fix, &mut rng);
            assert_eq!(mix.len(), 2);
            ones += mix.labels.iter().filter(|&&l| l == 1).count();
        }
        let freq = ones as f64 / 1000.0;
        assert!((freq - 0.5).abs() < 0.05, "{freq}");

        let single = fix.select(&[1]);
        assert_eq!(build_mix(&single, &mut rng), single);
    }
}
