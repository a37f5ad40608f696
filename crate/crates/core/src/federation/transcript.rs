use crate::error::{Error, Result};
use crate::fedstd::{GlobalScaler, MomentSummary};
use crate::numcore::ParamVector;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// What a parameter-shaped message carried, without the values themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub kind: PayloadKind,
    pub len: usize,
    pub sum: f64,
    pub norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    ParamVector,
    ControlVariate,
}

impl Payload {
    pub fn of<T: Real>(kind: PayloadKind, v: &ParamVector<T>) -> Self {
        Self { kind, len: v.len(), sum: v.sum().as_f64(), norm: v.norm().as_f64() }
    }
}

/// One protocol message or server action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    MomentUpload { client: usize, summary: MomentSummary<f64> },
    ScalerBroadcast { client: usize, scaler: GlobalScaler<f64> },
    Broadcast { round: usize, clients: usize, payload: Payload },
    ClientUpdate {
        round: usize,
        client: usize,
        n: usize,
        epochs: usize,
        steps: usize,
        losses: Vec<f64>,
        payload: Payload,
        control: Option<Payload>,
    },
    Aggregation { round: usize, n_total: usize, payload: Payload, server_control: Option<Payload> },
}

impl Event {
    fn is_stage_one(&self) -> bool {
        matches!(self, Event::MomentUpload { .. } | Event::ScalerBroadcast { .. })
    }
}

/// `(round, client, mean_loss, n)` rows derived from client updates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetric {
    pub round: usize,
    pub client: usize,
    pub mean_loss: f64,
    pub n: usize,
}

/// Ordered event log of one federated run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    events: Vec<Event>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an event; standardization messages may not follow training.
    pub fn push(&mut self, e: Event) -> Result<()> {
        if e.is_stage_one() && self.events.iter().any(|x| !x.is_stage_one()) {
            return Err(Error::Protocol("standardization message after training started".into()));
        }
        self.events.push(e);
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn aggregations(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::Aggregation { .. })).count()
    }

    pub fn client_updates(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, Event::ClientUpdate { .. })).count()
    }

    /// Total local epochs over every client update.
    pub fn total_epochs(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                Event::ClientUpdate { epochs, .. } => *epochs,
                _ => 0,
            })
            .sum()
    }

    pub fn round_metrics(&self) -> Vec<RoundMetric> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::ClientUpdate { round, client, n, losses, .. } => Some(RoundMetric {
                    round: *round,
                    client: *client,
                    mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
                    n: *n,
                }),
                _ => None,
            })
            .collect()
    }

    /// Writes one JSON object per event, tagged with `run`.
    pub fn write_jsonl<W: Write>(&self, run: &str, w: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            run: &'a str,
            #[serde(flatten)]
            event: &'a Event,
        }
        for event in &self.events {
            serde_json::to_writer(&mut *w, &Line { run, event })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
