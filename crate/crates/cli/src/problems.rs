//! Builds problem instances from a parsed configuration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use riescomp::composition::{
    gaussian_vector, AsMultiLevel, LevelConstants, MultiLevelProblem, ProblemConstants, TwoLevelProblem,
};
use riescomp::fixtures::{LinearQuadratic, SpdChain, SpdTarget};
use riescomp::policy_eval::{generate_instance, GridMdp, InstanceFile, ParamMode, PolicyEvalProblem, RbfValueModel};
use riescomp::rng::SampleRng;
use riescomp::Point;

use crate::config::{PolicyParams, ProblemSpec};
use crate::error::{CliError, CliResult};

/// A constructed problem of any supported family.
#[derive(Debug, Clone)]
pub enum Instance {
    Policy(PolicyEvalProblem),
    Spd(SpdTarget),
    Chain(SpdChain),
    Lq(LinearQuadratic),
}

/// Runs `$body` with `$p` bound to the two-level problem inside `$inst`.
/// Evaluates `$multi` for the multi-level chain.
#[macro_export]
macro_rules! with_two_level {
    ($inst:expr, $p:ident => $body:expr, $multi:expr) => {
        match $inst {
            $crate::problems::Instance::Policy($p) => $body,
            $crate::problems::Instance::Spd($p) => $body,
            $crate::problems::Instance::Lq($p) => $body,
            $crate::problems::Instance::Chain(_) => $multi,
        }
    };
}

impl Instance {
    pub fn build(spec: &ProblemSpec) -> CliResult<Self> {
        Ok(match spec {
            ProblemSpec::PolicyEval(p) => {
                let (mdp, truth, _) = policy_parts(p)?;
                let sigma0 = identity_point(2);
                let x0 = match p.mode {
                    ParamMode::SharedSigma => sigma0,
                    ParamMode::Full => PolicyEvalProblem::full_start(&truth, &sigma0)?,
                };
                Instance::Policy(PolicyEvalProblem::with_options(mdp, truth, p.mode, p.noise, x0)?)
            }
            ProblemSpec::SyntheticTwoLevel(p) => Instance::Spd(SpdTarget::new(
                synthetic_target(p.spd_dim),
                identity_point(p.spd_dim),
                p.noise_std,
                p.outer_noise_std,
            )),
            ProblemSpec::SyntheticMultiLevel(p) => Instance::Chain(SpdChain::new(
                p.levels,
                synthetic_target(p.spd_dim),
                identity_point(p.spd_dim),
                p.noise_std,
            )),
            ProblemSpec::LinearQuadratic(p) => {
                let mut rng = SampleRng::seed_from_u64(p.instance_seed);
                let entries = gaussian_vector(&mut rng, p.m * p.dim);
                let a = DMatrix::from_column_slice(p.m, p.dim, entries.as_slice()) / (p.m as f64).sqrt();
                let target: DVector<f64> = gaussian_vector(&mut rng, p.m);
                Instance::Lq(LinearQuadratic::new(a, target, p.noise_std, p.outer_noise_std))
            }
        })
    }

    /// Number of levels `N` (2 for two-level problems).
    pub fn levels(&self) -> usize {
        match self {
            Instance::Chain(c) => c.levels,
            _ => 2,
        }
    }

    pub fn two_level_constants(&self) -> Option<ProblemConstants> {
        with_two_level!(self, p => Some(p.constants()), None)
    }

    pub fn level_constants(&self) -> Vec<LevelConstants> {
        match self {
            Instance::Chain(c) => c.level_constants(),
            Instance::Policy(p) => AsMultiLevel(p.clone()).level_constants(),
            Instance::Spd(p) => AsMultiLevel(p.clone()).level_constants(),
            Instance::Lq(p) => AsMultiLevel(p.clone()).level_constants(),
        }
    }
}

fn identity_point(d: usize) -> Point {
    Point::from_matrix(&DMatrix::identity(d, d)).expect("identity is SPD")
}

/// Tridiagonal target with diagonal cycling through 1.5, 0.8, 1.2 and
/// off-diagonal 0.3; diagonally dominant, hence SPD.
pub fn synthetic_target(d: usize) -> DMatrix<f64> {
    const DIAG: [f64; 3] = [1.5, 0.8, 1.2];
    DMatrix::from_fn(d, d, |i, j| match i.abs_diff(j) {
        0 => DIAG[i % 3],
        1 => 0.3,
        _ => 0.0,
    })
}

/// The MDP, the true value model and the instance seed for a policy-eval config.
pub fn policy_parts(p: &PolicyParams) -> CliResult<(GridMdp, RbfValueModel, u64)> {
    match &p.instance_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file =
                InstanceFile::from_json(&text).map_err(|e| CliError::config("problem.instance_path", e.to_string()))?;
            let seed = file.seed;
            let (mdp, truth) =
                file.into_parts().map_err(|e| CliError::config("problem.instance_path", e.to_string()))?;
            Ok((mdp, truth, seed))
        }
        None => {
            let (mdp, truth) = generate_instance(p.grid_side, p.bases, p.rho, p.sigma_p, p.sigma_r, p.instance_seed)
                .map_err(|e| CliError::config("problem", e.to_string()))?;
            Ok((mdp, truth, p.instance_seed))
        }
    }
}
