//! In-process simulation of federated MIWAE training.
//!
//! Stage 1 standardizes every client against pooled moments in one round;
//! Stage 2 runs `R` rounds of broadcast, `E` local epochs per client, and
//! sample-size-weighted aggregation.

mod client;
mod plan;
mod transcript;

pub use client::{ClientState, LocalUpdate};
pub use plan::{AggregatorKind, RoundPlan};
pub use transcript::{Event, Payload, PayloadKind, RoundMetric, Transcript};

use crate::error::{Error, Result};
use crate::fedstd::{aggregate_moments, apply_scaler, local_moments, GlobalScaler, MomentSummary};
use crate::masked::MaskedMatrix;
use crate::miwae::{MiwaeConfig, MiwaeModel};
use crate::numcore::ParamVector;
use crate::rng::stream;
use crate::scalar::Real;
use rayon::prelude::*;

const INIT_STREAM: u64 = 0;

fn summary_f64<T: Real>(s: &MomentSummary<T>) -> MomentSummary<f64> {
    MomentSummary {
        count: s.count.clone(),
        sum: s.sum.iter().map(|x| x.as_f64()).collect(),
        sum_sq: s.sum_sq.iter().map(|x| x.as_f64()).collect(),
    }
}

fn scaler_f64<T: Real>(s: &GlobalScaler<T>) -> GlobalScaler<f64> {
    GlobalScaler {
        mu: s.mu.iter().map(|x| x.as_f64()).collect(),
        sigma: s.sigma.iter().map(|x| x.as_f64()).collect(),
        n: s.n.clone(),
    }
}

/// Stage 1: one moment upload and one scaler broadcast per client.
pub fn federated_standardize<T: Real>(
    clients: &[MaskedMatrix<T>],
    transcript: &mut Transcript,
) -> Result<(GlobalScaler<T>, Vec<MaskedMatrix<T>>)> {
    let summaries: Vec<MomentSummary<T>> = clients.iter().map(local_moments).collect::<Result<_>>()?;
    for (c, s) in summaries.iter().enumerate() {
        transcript.push(Event::MomentUpload { client: c, summary: summary_f64(s) })?;
    }
    let scaler = aggregate_moments(&summaries)?;
    let wire = scaler_f64(&scaler);
    for c in 0..clients.len() {
        transcript.push(Event::ScalerBroadcast { client: c, scaler: wire.clone() })?;
    }
    let standardized = clients.iter().map(|d| apply_scaler(d, &scaler)).collect::<Result<_>>()?;
    Ok((scaler, standardized))
}

/// Sample-size-weighted average of client parameters.
///
/// Every coordinate is clamped to the client range so the result is a
/// convex combination even under rounding. Scaffold uses the same rule;
/// its control variates are folded in by [`aggregate_controls`].
pub fn aggregate<T: Real>(updates: &[(ParamVector<T>, usize)], _kind: AggregatorKind) -> Result<ParamVector<T>> {
    let (first, _) = updates.first().ok_or_else(|| Error::Protocol("no client updates to aggregate".into()))?;
    for (i, (u, _)) in updates.iter().enumerate() {
        if !u.same_layout(first) {
            return Err(Error::Protocol(format!("update {i} has a different parameter layout")));
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregation over zero samples".into()));
    }
    let total = T::from_usize(total).unwrap();
    let mut out = ParamVector::zeros(first.layout().clone());
    for (u, n) in updates {
        out.axpy(T::from_usize(*n).unwrap() / total, u)?;
    }
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        let (lo, hi) = updates
            .iter()
            .map(|(u, _)| u.as_slice()[k])
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), x| (lo.min(x), hi.max(x)));
        *v = v.max(lo).min(hi);
    }
    Ok(out)
}

/// `c ← c + Σ (n_i/N)·Δc_i`, keeping the server control equal to the
/// weighted average of client controls.
pub fn aggregate_controls<T: Real>(server: &mut ParamVector<T>, deltas: &[(ParamVector<T>, usize)]) -> Result<()> {
    let total: usize = deltas.iter().map(|(_, n)| n).sum();
    let total = T::from_usize(total.max(1)).unwrap();
    for (d, n) in deltas {
        server.axpy(T::from_usize(*n).unwrap() / total, d)?;
    }
    Ok(())
}

/// The round-0 global model of a run with `plan`.
pub fn initial_model<T: Real>(config: &MiwaeConfig, plan: &RoundPlan) -> Result<MiwaeModel<T>> {
    MiwaeModel::init(config.clone(), &mut stream(plan.seed, &[INIT_STREAM]))
}

/// Stage 2: `plan.rounds` rounds over `clients`, appending to `transcript`.
pub fn run_training_with<T: Real>(
    clients: &mut [ClientState<T>],
    plan: &RoundPlan,
    config: &MiwaeConfig,
    transcript: &mut Transcript,
) -> Result<MiwaeModel<T>> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("federated training needs at least one client".into()));
    }
    let p = clients[0].data().cols();
    if clients.iter().any(|c| c.data().cols() != p) {
        return Err(Error::Config("clients disagree on the number of features".into()));
    }
    let config = if config.n_features == 0 { config.clone().with_features(p) } else { config.clone() };
    if config.n_features != p {
        return Err(Error::Config(format!("model expects {} features, data has {p}", config.n_features)));
    }
    clients.sort_by_key(ClientState::id);

    let mut model = initial_model::<T>(&config, plan)?;
    let scaffold = matches!(plan.aggregator, AggregatorKind::Scaffold);
    let mut server_control = scaffold.then(|| ParamVector::zeros(model.params().layout().clone()));

    for round in 0..plan.rounds {
        let global = model.params().clone();
        transcript.push(Event::Broadcast {
            round,
            clients: clients.len(),
            payload: Payload::of(PayloadKind::ParamVector, &global),
        })?;
        let sc = server_control.as_ref();
        let updates: Vec<LocalUpdate<T>> = clients
            .par_iter_mut()
            .map(|c| c.local_update(&global, plan, &config, round, sc))
            .collect::<Result<_>>()?;
        for (c, u) in clients.iter().zip(&updates) {
            transcript.push(Event::ClientUpdate {
                round,
                client: c.id(),
                n: u.n,
                epochs: plan.local_epochs,
                steps: u.steps,
                losses: u.losses.clone(),
                payload: Payload::of(PayloadKind::ParamVector, &u.params),
                control: c.control().map(|ci| Payload::of(PayloadKind::ControlVariate, ci)),
            })?;
        }
        let n_total = updates.iter().map(|u| u.n).sum();
        let pairs: Vec<(ParamVector<T>, usize)> = updates.iter().map(|u| (u.params.clone(), u.n)).collect();
        *model.params_mut() = aggregate(&pairs, plan.aggregator)?;
        if let Some(c) = server_control.as_mut() {
            let deltas: Vec<(ParamVector<T>, usize)> = updates
                .iter()
                .map(|u| u.control_delta.clone().map(|d| (d, u.n)))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Protocol("Scaffold client returned no control delta".into()))?;
            aggregate_controls(c, &deltas)?;
        }
        transcript.push(Event::Aggregation {
            round,
            n_total,
            payload: Payload::of(PayloadKind::ParamVector, model.params()),
            server_control: server_control.as_ref().map(|c| Payload::of(PayloadKind::ControlVariate, c)),
        })?;
    }
    Ok(model)
}

/// Stage 2 from scratch: builds client states, trains, returns the final
/// global model and the transcript.
pub fn run_training<T: Real>(
    clients: Vec<MaskedMatrix<T>>,
    plan: &RoundPlan,
    config: &MiwaeConfig,
) -> Result<(MiwaeModel<T>, Transcript)> {
    let mut states = clients
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d))
        .collect::<Result<Vec<_>>>()?;
    let mut transcript = Transcript::new();
    let model = run_training_with(&mut states, plan, config, &mut transcript)?;
    Ok((model, transcript))
}

/// Single-site training on pooled data for `rounds · n_clients` rounds of
/// `local_epochs` epochs, the centralized benchmark arm.
pub fn run_centralized<T: Real>(
    pooled: MaskedMatrix<T>,
    plan: &RoundPlan,
    config: &MiwaeConfig,
    n_clients: usize,
) -> Result<(MiwaeModel<T>, Transcript)> {
    if n_clients == 0 {
        return Err(Error::Config("centralized arm needs the number of federated clients".into()));
    }
    let plan = RoundPlan { rounds: plan.rounds * n_clients, ..plan.clone() };
    run_training(vec![pooled], &plan, config)
}

#[cfg(test)]
mod tests;
