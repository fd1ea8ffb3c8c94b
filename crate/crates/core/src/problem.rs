//! Builds every operator of an experiment from its configuration and hands
//! out named random streams derived from the root seed.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{Design, InverseProblem, ObservationOperator, Prior, SensorGrid};
use crate::config::{ExperimentConfig, TargetSpec};
use crate::control::ControlProblem;
use crate::counter::SolveCounter;
use crate::error::Result;
use crate::fem::{
    assemble_operators, assemble_temporal, build_mesh, FeOperators, Mesh, PdeCoefficients,
    TemporalGrid,
};
use crate::heat::{SteadyModel, TerminalMap, TransientModel};

/// Independent random streams. Each one is a ChaCha stream of the root seed,
/// so changing how much one phase draws never shifts another phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Noise,
    Sketch,
    Trace,
    Mc,
    RandomDesigns,
    Spectral,
    Reference,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Noise => 1,
            Stream::Sketch => 2,
            Stream::Trace => 3,
            Stream::Mc => 4,
            Stream::RandomDesigns => 5,
            Stream::Spectral => 6,
            Stream::Reference => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Noise => "noise",
            Stream::Sketch => "sketch",
            Stream::Trace => "trace",
            Stream::Mc => "mc",
            Stream::RandomDesigns => "random-designs",
            Stream::Spectral => "spectral",
            Stream::Reference => "reference",
        }
    }

    pub const ALL: [Stream; 7] = [
        Stream::Noise,
        Stream::Sketch,
        Stream::Trace,
        Stream::Mc,
        Stream::RandomDesigns,
        Stream::Spectral,
        Stream::Reference,
    ];
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Seed for a derived generator, e.g. a parallel Monte-Carlo run.
pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

/// Manufactured ground-truth source: Gaussian bumps at (0.3, 0.7) and
/// (0.75, 0.3) with the given peak values.
pub fn manufactured_m_true(amplitudes: [f64; 2]) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let bump = |cx: f64, cy: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.02).exp();
        amplitudes[0] * bump(0.3, 0.7) + amplitudes[1] * bump(0.75, 0.3)
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub mesh: Mesh,
    pub ops: FeOperators,
    pub grid: TemporalGrid,
    pub counter: SolveCounter,
    pub map: Arc<TerminalMap>,
    pub ip: InverseProblem,
    pub m_true: DVector<f64>,
    /// Prior draw that generates the target and the UQ data in reachable
    /// mode. The manufactured truth is far out in the prior tail, so its
    /// MAP bias would swamp the posterior spread of the objective.
    pub reference: Option<DVector<f64>>,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mesh = build_mesh(config.mesh_n, &config.robin_sides)?;
        let coeffs = PdeCoefficients {
            kappa: config.kappa,
            gamma_h: config.gamma_h,
            gamma_a: config.gamma_a,
        };
        let ops = assemble_operators(&mesh, coeffs, &config.velocity, config.mass_mode)?;
        let grid = assemble_temporal(config.final_time, config.nt)?;
        let [x0, y0, x1, y1] = config.control_region;
        let chi = mesh.box_indicator([x0, y0], [x1, y1]);
        let counter = SolveCounter::new();
        let steady = Arc::new(SteadyModel::new(&ops, counter.clone())?);
        let transient = Arc::new(TransientModel::new(&ops, chi, grid.clone(), counter.clone())?);
        let map = Arc::new(TerminalMap::new(steady.clone(), transient)?);
        let prior = Arc::new(Prior::new(
            &ops,
            config.prior_alpha,
            config.prior_beta,
            counter.clone(),
        )?);
        let sensors = SensorGrid::uniform(&mesh, config.sensor_rows, config.sensor_cols)?;
        let obs = Arc::new(ObservationOperator::new(sensors, steady));
        let ip = InverseProblem::new(prior, obs);
        let m_true = mesh.interpolate(manufactured_m_true(config.truth_amplitudes));
        let reference = match config.target {
            TargetSpec::Reachable { .. } => {
                Some(ip.prior.sample(&mut stream_rng(config.seed, Stream::Reference)))
            }
            TargetSpec::Uniform(_) => None,
        };
        Ok(Self {
            config,
            mesh,
            ops,
            grid,
            counter,
            map,
            ip,
            m_true,
            reference,
        })
    }

    pub fn num_sensors(&self) -> usize {
        self.ip.num_sensors()
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        stream_rng(self.config.seed, stream)
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        stream_seed(self.config.seed, stream)
    }

    /// Synthetic data at every candidate sensor and the noise level.
    pub fn synthesize(&self) -> Result<(DVector<f64>, f64)> {
        self.ip
            .synthesize_data(&self.m_true, self.config.noise_delta, &mut self.rng(Stream::Noise))
    }

    /// Data for the UQ stage: the synthetic data, or in reachable mode a
    /// noisy observation of the reference draw at noise level `sigma`.
    pub fn uq_data(&self, sigma: f64) -> Result<DVector<f64>> {
        match &self.reference {
            None => Ok(self.synthesize()?.0),
            Some(m) => {
                let mut rng = self.rng(Stream::Noise);
                let noise = crate::bayes::standard_normal(self.num_sensors(), &mut rng) * sigma;
                Ok(self.ip.obs.observe(m) + noise)
            }
        }
    }

    pub fn full_design(&self, sigma: f64) -> Design {
        Design::full(self.num_sensors(), sigma)
    }

    pub fn target(&self) -> DVector<f64> {
        match self.config.target {
            TargetSpec::Uniform(v) => ControlProblem::uniform_target(&self.map, v),
            TargetSpec::Reachable { z0 } => {
                let m = self.reference.as_ref().unwrap_or(&self.m_true);
                ControlProblem::reachable_target(&self.map, m, z0)
            }
        }
    }

    pub fn control_problem(&self) -> Result<ControlProblem> {
        ControlProblem::new(self.map.clone(), self.target(), self.config.beta_reg)
    }
}
