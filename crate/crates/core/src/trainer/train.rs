use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamConfig, AdamState, Dataset, MlpModel, TrainError};
use crate::indicators::LossCurve;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: String,
    /// Fault injection: overwrite a parameter with NaN at the start of this
    /// (absolute, 1-based) epoch.
    pub poison_epoch: Option<u32>,
}

impl TrainHyper {
    pub fn new(epochs: u32, lr: f64, batch_size: usize) -> Self {
        TrainHyper {
            epochs,
            lr,
            batch_size,
            loss: "MSELoss".into(),
            poison_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: u32,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Everything besides the model that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub history: LossCurve,
}

impl TrainState {
    pub fn new(model: &MlpModel, shuffle_seed: u64) -> Self {
        TrainState {
            adam: AdamState::new(model.count_params(), AdamConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            history: LossCurve::default(),
        }
    }

    pub fn epochs_done(&self) -> u32 {
        self.history.len() as u32
    }
}

pub(crate) fn check_loss_name(name: &str) -> Result<(), TrainError> {
    match name.to_ascii_lowercase().as_str() {
        "mseloss" | "mse" => Ok(()),
        _ => Err(TrainError::UnsupportedLoss(name.to_string())),
    }
}

/// Runs `hp.epochs` further epochs of minibatch Adam, appending to
/// `state.history` and reporting every epoch through `on_epoch`.
///
/// The epoch train loss is the mean over train samples of the error each one
/// had in its minibatch (the size-weighted mean of the batch losses), summed
/// in sample order so that it does not depend on the shuffle.
pub fn train(
    model: &mut MlpModel,
    data: &Dataset,
    hp: &TrainHyper,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(EpochLosses),
) -> Result<(), TrainError> {
    check_loss_name(&hp.loss)?;
    if hp.batch_size == 0 {
        return Err(TrainError::InvalidParam {
            name: "batch_size".into(),
            message: "must be positive".into(),
        });
    }
    if data.d_in() != model.d_in() || data.d_out() != model.d_out() {
        return Err(TrainError::ShapeMismatch {
            expected: model.d_in(),
            actual: data.d_in(),
        });
    }
    let train_x = data.train_x();
    let train_y = data.train_y();
    let test_x = data.test_x();
    let test_y = data.test_y();
    let n = data.n_train;
    let norm = (n * data.d_out()) as f64;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut sample_err = vec![0.0; n];
    for _ in 0..hp.epochs {
        let epoch = state.epochs_done() + 1;
        if hp.poison_epoch == Some(epoch) {
            if let Some(p) = model.params.first_mut() {
                *p = f64::NAN;
            }
        }
        // Each epoch permutes the identity so the shuffle depends only on the RNG state.
        order.clear();
        order.extend(0..n);
        order.shuffle(&mut state.rng);
        for batch in order.chunks(hp.batch_size) {
            let bx = train_x.select_rows(batch);
            let by = train_y.select_rows(batch);
            let (loss, grad, sq) = model.loss_and_grad(&bx, &by)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            for (&i, e) in batch.iter().zip(sq) {
                sample_err[i] = e;
            }
            state.adam.step(&mut model.params, &grad, hp.lr);
        }
        let train_loss = sample_err.iter().sum::<f64>() / norm;
        let test_loss = model.mse(&test_x, &test_y)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        state.history.train.push(train_loss);
        state.history.test.push(test_loss);
        on_epoch(EpochLosses {
            epoch,
            train_loss,
            test_loss,
        });
    }
    Ok(())
}
