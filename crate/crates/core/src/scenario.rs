//! Everything a controller needs to know about the task.

use crate::costs::CostModel;
use crate::dynamics::{AgentSystem, StateVec};
use crate::feedback::LqrWeights;
use crate::trajopt::SolverSettings;

/// Point-to-point task for one or more agents over a fixed horizon.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: AgentSystem,
    pub cost: CostModel,
    pub x0: StateVec,
    /// Episode length `T` in steps.
    pub horizon: usize,
    /// Tracking weights per agent.
    pub lqr: Vec<LqrWeights>,
    pub solver: SolverSettings,
}

impl Scenario {
    /// Tracking weights default to the planner's own weights, split by agent.
    pub fn new(system: AgentSystem, cost: CostModel, x0: StateVec, horizon: usize, solver: SolverSettings) -> Self {
        let joint = LqrWeights::from_costs(&cost.weights);
        let lqr = (0..system.agents()).map(|j| joint.agent_block(j)).collect();
        Self {
            system,
            cost,
            x0,
            horizon,
            lqr,
            solver,
        }
    }

    pub fn agents(&self) -> usize {
        self.system.agents()
    }
}
