use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, Carry, Forecast, ForecastModel};
use crate::data::{Dataset, PatientTrajectory, Slot, Split};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_with_logit, sigmoid, Activation, AdamState, DenseParams, LstmMasks, LstmParams, Parameters,
};

/// How unobserved values are filled before entering the LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Missing as zero; matches the simulated task.
    #[default]
    Zero,
    /// Missing as the training-split mean of the feature.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmDropout {
    pub input: f64,
    pub recurrent: f64,
    pub output: f64,
}

impl Default for LstmDropout {
    fn default() -> Self {
        Self {
            input: 0.3,
            recurrent: 0.5,
            output: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmHyper {
    pub hidden: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: LstmDropout,
    pub imputation: Imputation,
}

impl Default for LstmHyper {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 1e-3,
            l2: 1e-5,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            dropout: LstmDropout::default(),
            imputation: Imputation::Zero,
        }
    }
}

impl LstmHyper {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.dropout.input, self.dropout.recurrent, self.dropout.output];
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("lstm hidden size, batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 || rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("invalid lstm learning rate, L2 or dropout rate".into()));
        }
        Ok(())
    }
}

/// Recurrent cell plus the single-logit output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmNet {
    pub lstm: LstmParams,
    pub output: DenseParams,
}

impl Parameters for LstmNet {
    fn tensors(&self) -> Vec<(&[f64], bool)> {
        let mut t = self.lstm.tensors();
        t.extend(self.output.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.lstm.tensors_mut();
        t.extend(self.output.tensors_mut());
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmForecaster {
    pub net: LstmNet,
    pub n_features: usize,
    pub n_statics: usize,
    pub imputation: Imputation,
    /// Fill values for unobserved features, frozen after training.
    pub means: Vec<f64>,
    pub hyper: LstmHyper,
}

/// Values (imputed), missingness indicators, then statics.
pub fn featurize_slot(slot: &Slot, means: &[f64], statics: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * slot.values.len() + statics.len());
    x.extend(
        slot.values
            .iter()
            .zip(&slot.observed)
            .zip(means)
            .map(|((&v, &o), &m)| if o { v } else { m }),
    );
    x.extend(slot.observed.iter().map(|&o| if o { 1.0 } else { 0.0 }));
    x.extend_from_slice(statics);
    x
}

/// Featurized slots `0..=t` of an episode.
pub fn featurize_window(episode: &PatientTrajectory, t: usize, means: &[f64]) -> Vec<Vec<f64>> {
    (0..=t.min(episode.len().saturating_sub(1)))
        .map(|s| featurize_slot(&episode.slot(s), means, &episode.statics))
        .collect()
}

impl LstmForecaster {
    pub fn input_dim(&self) -> usize {
        2 * self.n_features + self.n_statics
    }

    fn split_carry<'a>(&self, carry: &'a Carry) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let hd = self.net.lstm.hidden_dim;
        let (h, rest) = carry.0.split_at(hd);
        let (c, statics) = rest.split_at(hd);
        (h, c, statics)
    }

    fn step(&self, carry: &Carry, slot: &Slot) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (h, c, statics) = self.split_carry(carry);
        let x = featurize_slot(slot, &self.means, statics);
        let (h, c) = self.net.lstm.step(&x, h, c).expect("carry and slot sized by the model");
        (h, c, statics.to_vec())
    }

    fn logit(&self, h: &[f64]) -> f64 {
        self.net.output.forward(h).expect("hidden sized by the model")[0]
    }

    /// Probability at the final slot of an episode.
    pub fn predict_episode(&self, episode: &PatientTrajectory) -> f64 {
        let inputs = featurize_window(episode, episode.len() - 1, &self.means);
        let states = self.net.lstm.unroll(&inputs).expect("featurized by the model");
        sigmoid(self.logit(&states[states.len() - 1].0))
    }
}

impl ForecastModel for LstmForecaster {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn hidden_dim(&self) -> usize {
        self.net.lstm.hidden_dim
    }

    /// `[h, c, statics]` with a zero recurrent state.
    fn initial(&self, statics: &[f64]) -> Carry {
        let hd = self.net.lstm.hidden_dim;
        let mut v = vec![0.0; 2 * hd];
        v.extend_from_slice(statics);
        Carry(v)
    }

    fn advance(&self, carry: &Carry, slot: &Slot) -> Carry {
        let (mut h, c, statics) = self.step(carry, slot);
        h.extend(c);
        h.extend(statics);
        Carry(h)
    }

    fn peek(&self, carry: &Carry, slot: &Slot) -> Forecast {
        let (h, _, _) = self.step(carry, slot);
        Forecast {
            prob: sigmoid(self.logit(&h)),
            hidden: h,
        }
    }
}

/// Summary of an LSTM training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmTrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub validation_auc: Option<f64>,
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Loss and gradients for one episode, label at the final slot.
fn episode_grad(
    model: &LstmForecaster,
    inputs: &[Vec<f64>],
    label: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, LstmNet)> {
    let d = model.hyper.dropout;
    let hd = model.net.lstm.hidden_dim;
    let masks = LstmMasks {
        input: (d.input > 0.0).then(|| inputs.iter().map(|x| dropout_mask(rng, x.len(), d.input)).collect()),
        recurrent: (d.recurrent > 0.0).then(|| dropout_mask(rng, hd, d.recurrent)),
    };
    let out_mask = dropout_mask(rng, hd, d.output);
    let (hs, cache) = model.net.lstm.unroll_cached(inputs, masks)?;
    let h_last: Vec<f64> = hs[hs.len() - 1].iter().zip(&out_mask).map(|(h, m)| h * m).collect();
    let logit = model.net.output.forward(&h_last)?[0];
    let (loss, dlogit) = cross_entropy_with_logit(logit, label);
    let mut out_grad = model.net.output.zeros_like();
    for (g, h) in out_grad.weight.row_mut(0).iter_mut().zip(&h_last) {
        *g = dlogit * h;
    }
    out_grad.bias[0] = dlogit;
    let mut dh = vec![vec![0.0; hd]; hs.len()];
    for (j, v) in dh[hs.len() - 1].iter_mut().enumerate() {
        *v = dlogit * model.net.output.weight.get(0, j) * out_mask[j];
    }
    let (lstm_grad, _) = model.net.lstm.backward(&cache, &dh)?;
    Ok((
        loss,
        LstmNet {
            lstm: lstm_grad,
            output: out_grad,
        },
    ))
}

fn mean_loss(model: &LstmForecaster, episodes: &[&PatientTrajectory]) -> f64 {
    let losses: Vec<f64> = episodes
        .par_iter()
        .map(|e| crate::nn::loss_cross_entropy(model.predict_episode(e), e.label))
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

fn feature_means(dataset: &Dataset, train: &[&PatientTrajectory]) -> Vec<f64> {
    let k = dataset.n_features();
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for p in train {
        for (vals, obs) in p.values.iter().zip(&p.observed) {
            for j in 0..k {
                if obs[j] {
                    sum[j] += vals[j];
                    n[j] += 1;
                }
            }
        }
    }
    sum.iter().zip(&n).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Mini-batch Adam on final-slot cross entropy with early stopping on the
/// validation split (the last fifth of the training split when the dataset
/// has none). Deterministic per seed.
pub fn train_lstm(dataset: &Dataset, hyper: &LstmHyper, seed: u64) -> Result<(LstmForecaster, LstmTrainReport)> {
    hyper.validate()?;
    let mut train: Vec<&PatientTrajectory> = dataset.in_split(Split::Train).filter(|p| !p.is_empty()).collect();
    let mut valid: Vec<&PatientTrajectory> =
        dataset.in_split(Split::Validation).filter(|p| !p.is_empty()).collect();
    if valid.is_empty() && train.len() >= 5 {
        valid = train.split_off(train.len() - train.len() / 5);
    }
    let positives = train.iter().filter(|p| p.label).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::DegenerateData("training split must contain both labels".into()));
    }
    let n_features = dataset.n_features();
    let n_statics = train[0].statics.len();
    let means = match hyper.imputation {
        Imputation::Zero => vec![0.0; n_features],
        Imputation::Mean => feature_means(dataset, &train),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = 2 * n_features + n_statics;
    let mut model = LstmForecaster {
        net: LstmNet {
            lstm: LstmParams::init(input_dim, hyper.hidden, &mut rng),
            output: DenseParams::init(hyper.hidden, 1, Activation::Identity, &mut rng),
        },
        n_features,
        n_statics,
        imputation: hyper.imputation,
        means,
        hyper: hyper.clone(),
    };
    let inputs: Vec<Vec<Vec<f64>>> = train
        .iter()
        .map(|p| featurize_window(p, p.len() - 1, &model.means))
        .collect();
    let mut adam = AdamState::new(&model.net, hyper.lr, hyper.l2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (model.net.clone(), f64::INFINITY, 0usize);
    let mut report = LstmTrainReport {
        epochs: 0,
        best_epoch: 0,
        best_validation_loss: f64::INFINITY,
        validation_auc: None,
        train_losses: Vec::new(),
        validation_losses: Vec::new(),
    };
    for epoch in 0..hyper.max_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let base: u64 = rng.random();
            let results: Vec<(f64, LstmNet)> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let mut r = ChaCha8Rng::seed_from_u64(base);
                    r.set_stream(i as u64);
                    episode_grad(&model, &inputs[idx], train[idx].label, &mut r)
                })
                .collect::<Result<_>>()?;
            let mut grad = model.net.zeros_like();
            for (loss, g) in &results {
                epoch_loss += loss;
                grad.add_scaled(1.0, g);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.net, &grad)?;
        }
        report.train_losses.push(epoch_loss / train.len() as f64);
        report.epochs = epoch + 1;
        let vloss = if valid.is_empty() {
            report.train_losses[epoch]
        } else {
            mean_loss(&model, &valid)
        };
        report.validation_losses.push(vloss);
        if vloss < best.1 {
            best = (model.net.clone(), vloss, epoch);
        } else if epoch - best.2 >= hyper.patience {
            break;
        }
    }
    model.net = best.0;
    report.best_validation_loss = best.1;
    report.best_epoch = best.2;
    if !valid.is_empty() {
        let scores: Vec<f64> = valid.iter().map(|p| model.predict_episode(p)).collect();
        let labels: Vec<bool> = valid.iter().map(|p| p.label).collect();
        report.validation_auc = auc(&scores, &labels).ok();
    }
    Ok((model, report))
}
