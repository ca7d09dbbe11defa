use numkit::{Adam, AdamConfig, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{DsdpError, Result};
use crate::nn::train_step;
use crate::policy::{CheckpointScore, PolicyConfig, PolicyTrainLog};
use crate::seeding::{derive_seed, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Part {
    Train,
    Val,
}

/// Adam over minibatches of row indices with the same checkpoint schedule as
/// the diffusion policy. `loss(tape, part, rows, rng)` builds the batch loss;
/// validation reuses one fixed rng stream so scores are comparable. On
/// return `store` holds the checkpoint with the lowest validation loss.
pub(crate) fn fit<L>(
    store: &mut ParamStore,
    n_train: usize,
    n_val: usize,
    cfg: &PolicyConfig,
    seed: u64,
    loss: L,
) -> Result<PolicyTrainLog>
where
    L: Fn(&mut Tape<'_>, Part, &[usize], &mut SimRng) -> Result<Var>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(DsdpError::Precondition(
            "baseline training needs at least one example".into(),
        ));
    }
    let (part, n_scored) = if n_val == 0 {
        (Part::Train, n_train)
    } else {
        (Part::Val, n_val)
    };
    let mut val_idx: Vec<usize> = (0..n_scored).collect();
    val_idx.shuffle(&mut SimRng::seed_from_u64(derive_seed(
        seed,
        "validation/rows",
    )));
    val_idx.truncate(cfg.val_examples);
    let score = |store: &ParamStore| -> Result<f64> {
        let mut rng = SimRng::seed_from_u64(derive_seed(seed, "validation"));
        let mut sum = 0.0;
        for chunk in val_idx.chunks(512) {
            let mut tape = Tape::new(store);
            let l = loss(&mut tape, part, chunk, &mut rng)?;
            sum += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(sum / val_idx.len() as f64)
    };
    let mut log = PolicyTrainLog {
        examples: n_train,
        val_examples: val_idx.len(),
        ..Default::default()
    };
    let mut best = (score(store)?, store.clone());
    log.checkpoints.push(CheckpointScore {
        epoch: 0,
        val_loss: best.0,
    });
    let mut adam = Adam::new(store, AdamConfig::with_lr(cfg.lr))?;
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, "batches"));
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order
            .chunks(cfg.batch)
            .take(cfg.max_batches_per_epoch.unwrap_or(usize::MAX))
        {
            sum += train_step(store, &mut adam, |tape| {
                loss(tape, Part::Train, chunk, &mut rng)
            })?;
            n += 1;
        }
        log.epoch_loss.push(sum / n.max(1) as f64);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let s = score(store)?;
            log.checkpoints.push(CheckpointScore { epoch, val_loss: s });
            if s < best.0 {
                best = (s, store.clone());
                log.best_epoch = epoch;
            }
        }
    }
    *store = best.1;
    Ok(log)
}
