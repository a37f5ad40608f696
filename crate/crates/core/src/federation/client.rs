use super::plan::{AggregatorKind, RoundPlan};
use crate::error::{Error, Result};
use crate::masked::MaskedMatrix;
use crate::miwae::{miwae_bound_grad, MiwaeConfig, MiwaeModel};
use crate::numcore::{AdamState, ParamVector};
use crate::rng::stream;
use crate::scalar::Real;
use rand::seq::SliceRandom;

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// A training site: its standardized data plus optimizer and control state
/// that persist across rounds.
#[derive(Clone, Debug)]
pub struct ClientState<T> {
    id: usize,
    data: MaskedMatrix<T>,
    adam: Option<AdamState<T>>,
    control: Option<ParamVector<T>>,
}

/// Result of one round of local training.
#[derive(Clone, Debug)]
pub struct LocalUpdate<T> {
    pub params: ParamVector<T>,
    pub n: usize,
    pub steps: usize,
    /// Mean minibatch loss of each epoch.
    pub losses: Vec<f64>,
    /// Scaffold only: `c_i(new) − c_i(old)`.
    pub control_delta: Option<ParamVector<T>>,
}

impl<T: Real> ClientState<T> {
    /// Fails on an empty dataset or a row with nothing observed.
    pub fn new(id: usize, data: MaskedMatrix<T>) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Config(format!("client {id} holds no rows")));
        }
        data.require_observed_rows()
            .map_err(|e| Error::Config(format!("client {id}: {e}")))?;
        Ok(Self { id, data, adam: None, control: None })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &MaskedMatrix<T> {
        &self.data
    }

    pub fn n_rows(&self) -> usize {
        self.data.rows()
    }

    pub fn control(&self) -> Option<&ParamVector<T>> {
        self.control.as_ref()
    }

    /// `E` epochs of minibatch Adam on the bound, starting from `global`.
    ///
    /// Minibatch order and reparameterization noise depend only on
    /// `(seed, round, client id, epoch, batch)`.
    pub fn local_update(
        &mut self,
        global: &ParamVector<T>,
        plan: &RoundPlan,
        config: &MiwaeConfig,
        round: usize,
        server_control: Option<&ParamVector<T>>,
    ) -> Result<LocalUpdate<T>> {
        let scaffold = matches!(plan.aggregator, AggregatorKind::Scaffold);
        if scaffold && server_control.is_none() {
            return Err(Error::Protocol("Scaffold round without a server control variate".into()));
        }
        let mut model = MiwaeModel::from_params(config.clone(), global.clone())?;
        let adam = self.adam.get_or_insert_with(|| AdamState::new(global.len(), &plan.adam));
        if scaffold && self.control.is_none() {
            self.control = Some(ParamVector::zeros(global.layout().clone()));
        }
        let correction = match (scaffold, server_control, &self.control) {
            (true, Some(c), Some(ci)) => Some(c.sub(ci)?),
            _ => None,
        };
        let prox_mu = match plan.aggregator {
            AggregatorKind::FedProx { mu } if mu > 0.0 => Some(T::lit(mu)),
            _ => None,
        };

        let n = self.data.rows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut losses = Vec::with_capacity(plan.local_epochs);
        let mut steps = 0usize;
        for epoch in 0..plan.local_epochs {
            let path = [round as u64, self.id as u64, epoch as u64];
            order.sort_unstable();
            order.shuffle(&mut stream(plan.seed, &[SHUFFLE_STREAM, path[0], path[1], path[2]]));
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
                let batch = self.data.select_rows(chunk);
                let mut rng = stream(plan.seed, &[NOISE_STREAM, path[0], path[1], path[2], b as u64]);
                let (mut loss, mut grad) = miwae_bound_grad(&model, &batch, config.k_train, &mut rng)?;
                if let Some(mu) = prox_mu {
                    let diff = model.params().sub(global)?;
                    loss += mu * T::lit(0.5) * diff.norm().powi(2);
                    grad.axpy(mu, &diff)?;
                }
                if let Some(c) = &correction {
                    grad.axpy(T::one(), c)?;
                }
                adam.step(model.params_mut(), &grad)?;
                epoch_loss += loss.as_f64();
                batches += 1;
                steps += 1;
            }
            losses.push(epoch_loss / batches as f64);
        }

        let params = model.into_params();
        let mut control_delta = None;
        if let (Some(c), Some(ci)) = (server_control.filter(|_| scaffold), self.control.as_mut()) {
            let lr = T::lit(plan.adam.lr);
            let mut delta = ParamVector::zeros(ci.layout().clone());
            if lr > T::zero() && steps > 0 {
                // c_i+ = c_i − c + (w_global − w_local) / (steps · lr)
                let drift = global.sub(&params)?.scale(T::one() / (T::from_usize(steps).unwrap() * lr));
                delta = drift.sub(c)?;
            }
            ci.axpy(T::one(), &delta)?;
            control_delta = Some(delta);
        }
        Ok(LocalUpdate { params, n, steps, losses, control_delta })
    }
}
