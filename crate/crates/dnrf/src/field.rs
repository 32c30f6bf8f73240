//! The radiance field sampled by the renderer.
//!
//! [`RadianceField`] is the query surface: density and RGB at a canonical
//! point for a view encoding and an expression code. [`NeuralField`] is the
//! trainable implementation (hash grid -> density net -> color net);
//! analytic stand-ins implement the same trait for renderer tests.

use crate::encoding::{EncodingError, HashGrid, HashGridConfig, SH_DIM};
use crate::network::{Mlp, MlpTape, NetworkError, OutputActivation, EXPRESSION_DIM, HIDDEN_WIDTH, SIGMA_FEATURES};
use crate::scalar::Scalar;
use rand::Rng;

/// Queryable radiance field over canonical space.
pub trait RadianceField<S: Scalar>: Sync {
    /// Density only (occupancy probes skip the color net).
    fn density(&self, p_canonical: [S; 3], expression: &[S; EXPRESSION_DIM]) -> S;

    /// Density and color.
    fn query(
        &self,
        p_canonical: [S; 3],
        dir_encoding: &[S; SH_DIM],
        expression: &[S; EXPRESSION_DIM],
    ) -> (S, [S; 3]);
}

/// Hash grid plus the two MLPs.
#[derive(Debug, Clone)]
pub struct NeuralField<S: Scalar> {
    pub grid: HashGrid<S>,
    pub density_net: Mlp<S>,
    pub color_net: Mlp<S>,
}

/// Forward state of one field query, kept for the backward pass. Reused
/// across samples to avoid churn.
#[derive(Debug, Clone)]
pub struct SampleTape<S: Scalar> {
    pub position: [S; 3],
    pub density_tape: MlpTape<S>,
    pub color_tape: MlpTape<S>,
    pub density: S,
}

/// Parameter gradients for both nets; table gradients accumulate separately
/// into a shared atomic buffer.
#[derive(Debug, Clone)]
pub struct MlpGradients<S: Scalar> {
    pub density: Vec<S>,
    pub color: Vec<S>,
    scratch_input: Vec<S>,
    scratch_sigma: Vec<S>,
}

impl<S: Scalar> MlpGradients<S> {
    pub fn for_field(field: &NeuralField<S>) -> Self {
        Self {
            density: vec![S::zero(); field.density_net.param_count()],
            color: vec![S::zero(); field.color_net.param_count()],
            scratch_input: vec![S::zero(); field.density_net.input_dim()],
            scratch_sigma: vec![S::zero(); field.color_net.input_dim()],
        }
    }

    pub fn reset(&mut self) {
        self.density.fill(S::zero());
        self.color.fill(S::zero());
    }

    pub fn merge(&mut self, other: &MlpGradients<S>) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += *b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += *b;
        }
    }
}

/// Initial log density: just below the occupancy threshold, so untrained
/// space stays prunable and only supervised density can open cells.
pub const DENSITY_LOG_INIT: f64 = -5.0;

impl<S: Scalar> NeuralField<S> {
    /// Fresh field: tables uniform in [-1e-4, 1e-4], Xavier MLPs. The
    /// density output layer starts small with its log-density bias at
    /// [`DENSITY_LOG_INIT`].
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self, EncodingError> {
        let grid = HashGrid::new(config, rng)?;
        let mut density_net = Mlp::new(
            vec![grid.output_dim() + EXPRESSION_DIM, HIDDEN_WIDTH, SIGMA_FEATURES],
            OutputActivation::None,
            rng,
        );
        let out_layer = density_net.layer_count() - 1;
        density_net.scale_layer_weights(out_layer, 0.1);
        density_net.set_bias(out_layer, 0, DENSITY_LOG_INIT);
        let color_net = Mlp::new(
            vec![SIGMA_FEATURES + SH_DIM, HIDDEN_WIDTH, 3],
            OutputActivation::Sigmoid,
            rng,
        );
        Ok(Self {
            grid,
            density_net,
            color_net,
        })
    }

    pub fn tape(&self) -> SampleTape<S> {
        SampleTape {
            position: [S::zero(); 3],
            density_tape: MlpTape::for_net(&self.density_net),
            color_tape: MlpTape::for_net(&self.color_net),
            density: S::zero(),
        }
    }

    /// Forward pass recording everything needed for [`Self::backward_sample`].
    pub fn query_tape(
        &self,
        p: [S; 3],
        dir_encoding: &[S; SH_DIM],
        expression: &[S; EXPRESSION_DIM],
        tape: &mut SampleTape<S>,
    ) -> Result<(S, [S; 3]), NetworkError> {
        tape.position = p;
        let feat_dim = self.grid.output_dim();
        {
            let input = tape.density_tape.input_mut();
            self.grid.encode_position_into(p, &mut input[..feat_dim]);
            input[feat_dim..].copy_from_slice(expression);
        }
        self.density_net.forward_prefilled(&mut tape.density_tape)?;
        tape.density = tape.density_tape.output()[0].exp();
        {
            let sigma = tape.density_tape.output();
            let input = tape.color_tape.input_mut();
            input[..SIGMA_FEATURES].copy_from_slice(sigma);
            input[SIGMA_FEATURES..].copy_from_slice(dir_encoding);
        }
        self.color_net.forward_prefilled(&mut tape.color_tape)?;
        let out = tape.color_tape.output();
        Ok((tape.density, [out[0], out[1], out[2]]))
    }

    /// Reverse pass for one sample: routes the color gradient through the
    /// color net into the density features, adds the density gradient at
    /// the log-density channel, then backprops the density net into the
    /// hash tables. Table contributions go to `table_sink(offset, value)`.
    pub fn backward_sample_with(
        &self,
        tape: &SampleTape<S>,
        d_rgb: [S; 3],
        d_density: S,
        grads: &mut MlpGradients<S>,
        table_sink: impl FnMut(usize, S),
    ) -> Result<(), NetworkError> {
        let feat_dim = self.grid.output_dim();
        grads.scratch_sigma.fill(S::zero());
        self.color_net.backward_tape(
            &tape.color_tape,
            &d_rgb,
            &mut grads.color,
            &mut grads.scratch_sigma,
        )?;
        // d(sigma features) from the color path plus the density path
        // through exp at channel 0; the view-encoding half is discarded.
        let mut d_sigma = [S::zero(); SIGMA_FEATURES];
        d_sigma.copy_from_slice(&grads.scratch_sigma[..SIGMA_FEATURES]);
        d_sigma[0] += d_density * tape.density;

        grads.scratch_input.fill(S::zero());
        self.density_net.backward_tape(
            &tape.density_tape,
            &d_sigma,
            &mut grads.density,
            &mut grads.scratch_input,
        )?;
        self.grid
            .visit_gradient(tape.position, &grads.scratch_input[..feat_dim], table_sink);
        Ok(())
    }

    /// [`Self::backward_sample_with`] into a shared atomic buffer.
    pub fn backward_sample(
        &self,
        tape: &SampleTape<S>,
        d_rgb: [S; 3],
        d_density: S,
        grads: &mut MlpGradients<S>,
        table_grad: &[S::Atomic],
    ) -> Result<(), NetworkError> {
        self.backward_sample_with(tape, d_rgb, d_density, grads, |offset, v| {
            S::atomic_add(&table_grad[offset], v)
        })
    }

    /// Same-structure field with different parameter values (e.g. the EMA
    /// shadow for rendering).
    pub fn with_params(&self, tables: &[S], density: &[S], color: &[S]) -> Self {
        let mut out = self.clone();
        out.grid.set_params(tables);
        out.density_net.set_params(density);
        out.color_net.set_params(color);
        out
    }
}

impl<S: Scalar> RadianceField<S> for NeuralField<S> {
    fn density(&self, p: [S; 3], expression: &[S; EXPRESSION_DIM]) -> S {
        let feat_dim = self.grid.output_dim();
        let mut input = vec![S::zero(); feat_dim + EXPRESSION_DIM];
        self.grid.encode_position_into(p, &mut input[..feat_dim]);
        input[feat_dim..].copy_from_slice(expression);
        let out = self.density_net.forward(&input).expect("dims fixed at construction");
        out[0].exp()
    }

    fn query(
        &self,
        p: [S; 3],
        dir_encoding: &[S; SH_DIM],
        expression: &[S; EXPRESSION_DIM],
    ) -> (S, [S; 3]) {
        let feat_dim = self.grid.output_dim();
        let mut input = vec![S::zero(); feat_dim + EXPRESSION_DIM];
        self.grid.encode_position_into(p, &mut input[..feat_dim]);
        input[feat_dim..].copy_from_slice(expression);
        let sigma = self.density_net.forward(&input).expect("dims fixed at construction");
        let density = sigma[0].exp();
        let mut cin = vec![S::zero(); SIGMA_FEATURES + SH_DIM];
        cin[..SIGMA_FEATURES].copy_from_slice(&sigma);
        cin[SIGMA_FEATURES..].copy_from_slice(dir_encoding);
        let rgb = self.color_net.forward(&cin).expect("dims fixed at construction");
        (density, [rgb[0], rgb[1], rgb[2]])
    }
}
