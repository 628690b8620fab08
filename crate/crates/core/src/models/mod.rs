//! Model specification: drivers, obstacles, terminals, the frameworks they
//! live in, assumption checks and contraction constants.

pub mod contraction;
pub mod driver;
pub mod obstacle;
pub mod sample;
pub mod validate;

use serde::{Deserialize, Serialize};

pub use contraction::{contraction_params, ContractionParams, PoissonStep};
pub use driver::{
    j_lambda, u_norm, Convexity, DeclaredDriverConstants, Driver, DriverFamily, DriverSpec, FnDriver, MeasureForm,
    ParamDriver, ZeroDriver,
};
pub use obstacle::{
    FnObstacle, FnTerminal, Obstacle, ObstacleFamily, ObstacleSpec, ParamObstacle, ParamTerminal, Terminal,
    TerminalSpec,
};
pub use sample::{random_model, terminal_margin, SampleOptions};
pub use validate::{validate_assumptions, Check, ValidationReport};

use crate::error::{Error, Result};
use crate::mpp::{Clock, ClockSpec, IntensityKernel, MarkSpace, ScenarioTree, TreeKind};

/// Which family of equations: general MPP noise with `W_2` Lipschitz data, or
/// Poisson noise (`A(t) = t`) with `W_1` data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    Mpp,
    Poisson,
}

impl Framework {
    /// Wasserstein order used by the Lipschitz hypotheses.
    pub fn order(self) -> u32 {
        match self {
            Framework::Mpp => 2,
            Framework::Poisson => 1,
        }
    }
}

fn identity_clock() -> ClockSpec {
    ClockSpec::Identity
}

fn inactive_obstacle() -> ObstacleSpec {
    ObstacleSpec::inactive()
}

/// Serialized model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub framework: Framework,
    pub horizon: f64,
    /// Grid size `M`.
    pub steps: usize,
    #[serde(default)]
    pub tree: TreeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<MarkSpace>,
    #[serde(default = "identity_clock")]
    pub clock: ClockSpec,
    pub kernel: IntensityKernel,
    pub driver: DriverSpec,
    #[serde(default = "inactive_obstacle")]
    pub obstacle: ObstacleSpec,
    pub terminal: TerminalSpec,
}

/// A validated, ready-to-solve model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub framework: Framework,
    pub marks: MarkSpace,
    pub clock: Clock,
    pub kernel: IntensityKernel,
    pub driver: ParamDriver,
    pub obstacle: ParamObstacle,
    pub terminal: ParamTerminal,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if config.framework == Framework::Poisson && config.clock != ClockSpec::Identity {
            return Err(Error::Config("the poisson framework requires the identity clock".into()));
        }
        let kernel = IntensityKernel::nondegenerate(config.kernel.weights().to_vec())?;
        let marks = match &config.marks {
            Some(m) => {
                m.validate()?;
                m.clone()
            }
            None => MarkSpace::numbered(kernel.len()),
        };
        if marks.len() != kernel.len() {
            return Err(Error::Config(format!(
                "mark space has {} marks but the kernel has {} weights",
                marks.len(),
                kernel.len()
            )));
        }
        let clock = Clock::new(config.clock.clone(), config.horizon)?;
        let order = config.framework.order();
        let driver = ParamDriver::new(&config.driver, kernel.weights(), order)?;
        let obstacle = ParamObstacle::new(&config.obstacle, &marks.values, order)?;
        let terminal = ParamTerminal::new(&config.terminal, &marks.values)?;
        Ok(Model { framework: config.framework, config, marks, clock, kernel, driver, obstacle, terminal })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(cfg)
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem { framework: self.framework, driver: &self.driver, obstacle: &self.obstacle, terminal: &self.terminal }
    }

    /// Single-source tree of the configured kind.
    pub fn tree(&self) -> Result<ScenarioTree> {
        self.tree_with(self.config.tree, 1, None)
    }

    pub fn tree_with(&self, kind: TreeKind, sources: usize, budget: Option<u128>) -> Result<ScenarioTree> {
        let mut b = ScenarioTree::builder(&self.kernel, &self.clock, self.config.steps).kind(kind).sources(sources);
        if let Some(budget) = budget {
            b = b.budget(budget);
        }
        b.build()
    }

    pub fn contraction(&self) -> Result<ContractionParams> {
        contraction_params(self.framework, self.driver.lipschitz(), self.obstacle.gammas(), &self.clock)
    }
}

/// Borrowed equation data shared by all solvers.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub framework: Framework,
    pub driver: &'a dyn Driver,
    pub obstacle: &'a dyn Obstacle,
    pub terminal: &'a dyn Terminal,
}

impl<'a> Problem<'a> {
    pub fn new(framework: Framework, driver: &'a dyn Driver, obstacle: &'a dyn Obstacle, terminal: &'a dyn Terminal) -> Self {
        Problem { framework, driver, obstacle, terminal }
    }

    pub fn order(&self) -> u32 {
        self.framework.order()
    }
}
