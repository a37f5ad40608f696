use super::config::MiwaeConfig;
use crate::error::Result;
use crate::numcore::{mlp_forward, push_mlp_layout, Layout, Matrix, ObsDensity, ParamVector};
use crate::scalar::{softplus, Real};
use rand::Rng;
use std::sync::Arc;

pub(crate) const ENCODER: &str = "encoder";
pub(crate) const DECODER: &str = "decoder";

/// Encoder `p -> h -> h -> 2d` and decoder `d -> h -> h -> 2p`, both emitting
/// a location block followed by a pre-softplus scale block.
#[derive(Clone, Debug, PartialEq)]
pub struct MiwaeModel<T> {
    config: MiwaeConfig,
    params: ParamVector<T>,
}

/// Parameter layout of a model with this configuration.
pub fn miwae_layout(config: &MiwaeConfig) -> Arc<Layout> {
    let mut l = Layout::new();
    push_mlp_layout(&mut l, ENCODER, &config.encoder_widths());
    push_mlp_layout(&mut l, DECODER, &config.decoder_widths());
    Arc::new(l)
}

impl<T: Real> MiwaeModel<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(config: MiwaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = miwae_layout(&config);
        let mut params = ParamVector::zeros(layout.clone());
        for seg in layout.segments() {
            if seg.rows == 1 {
                continue;
            }
            let a = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
            for w in &mut params.as_mut_slice()[seg.range()] {
                *w = T::lit(rng.gen_range(-a..a));
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: MiwaeConfig, params: ParamVector<T>) -> Result<Self> {
        config.validate()?;
        let layout = miwae_layout(&config);
        if **params.layout() != *layout {
            return Err(crate::Error::Dimension("parameter layout does not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MiwaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVector<T> {
        self.params
    }

    pub(crate) fn floor(&self) -> T {
        T::lit(self.config.scale_floor)
    }

    pub(crate) fn density(&self) -> ObsDensity<T> {
        self.config.likelihood.density()
    }

    fn net_slice(&self, prefix: &str) -> &[T] {
        let segs = self.params.layout().segments();
        let first = segs.iter().find(|s| s.name.starts_with(prefix)).expect("network present");
        let last = segs.iter().rev().find(|s| s.name.starts_with(prefix)).expect("network present");
        &self.params.as_slice()[first.offset..last.offset + last.len()]
    }

    fn split_head(&self, out: Matrix<T>, width: usize) -> (Matrix<T>, Matrix<T>) {
        let floor = self.floor();
        let loc = out.slice_cols(0, width);
        let scale = out.slice_cols(width, 2 * width).map(|r| softplus(r) + floor);
        (loc, scale)
    }

    /// Posterior mean and std of `q(z|x)` for zero-filled inputs.
    pub fn encode(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let out = mlp_forward(self.net_slice(ENCODER), x, &self.config.encoder_widths(), self.config.activation)?;
        Ok(self.split_head(out, self.config.latent_dim))
    }

    /// Location and scale of `p(x|z)`.
    pub fn decode(&self, z: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let out = mlp_forward(self.net_slice(DECODER), z, &self.config.decoder_widths(), self.config.activation)?;
        Ok(self.split_head(out, self.config.n_features))
    }
}
