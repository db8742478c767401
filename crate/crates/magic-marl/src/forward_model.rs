//! Learned one-step dynamics model and the closed-loop rollout engine.
//!
//! The model maps `(centralized state ⊕ flattened joint action)` to the next
//! centralized state and is trained on real transitions with a one-step
//! squared prediction loss. Rollouts replace only the first-step joint
//! action; afterwards every agent acts through its current policy on the
//! model-predicted states, so an intervention propagates through later policy
//! responses. Predicted states are clipped to the environment's valid ranges
//! before observations are rebuilt from them.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::env::{Environment, JointAction};
use crate::instrument::Counters;
use crate::nn::{Activation, Adam, Mlp};
use crate::{Error, Result};

/// Abstract one-step dynamics used by rollouts: the learned model, the exact
/// environment twin, or a corrupted wrapper.
pub trait Dynamics {
    fn predict_next(&self, state: &[f64], action: &JointAction) -> Vec<f64>;
}

/// Learned forward dynamics model.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl ForwardModel {
    /// Two hidden rectifier layers, linear output.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let net = Mlp::new(
            &[state_dim + action_dim, hidden.0, hidden.1, state_dim],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        );
        ForwardModel {
            net,
            state_dim,
            action_dim,
        }
    }

    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim || net.output_dim() != state_dim {
            return Err(Error::Shape(format!(
                "forward model net maps {} -> {}, expected {} -> {}",
                net.input_dim(),
                net.output_dim(),
                state_dim + action_dim,
                state_dim
            )));
        }
        Ok(ForwardModel {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// One deterministic forward pass on a pre-flattened action.
    pub fn predict(&self, state: &[f64], action_flat: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action_flat.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "predict got state {} / action {}, expected {} / {}",
                state.len(),
                action_flat.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(state);
        input.extend_from_slice(action_flat);
        self.net.forward(&input)
    }

    /// Batched forward pass over pre-assembled `[state | action]` rows.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward_batch(inputs)
    }

    /// One Adam step on the batch-mean squared one-step prediction loss.
    /// Returns the pre-step loss.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        learning_rate: f64,
        grad_clip: f64,
    ) -> Result<f64> {
        if inputs.nrows() != targets.nrows() || targets.ncols() != self.state_dim {
            return Err(Error::Shape("fm training batch shape mismatch".into()));
        }
        let batch = inputs.nrows() as f64;
        let trace = self.net.forward_trace(inputs)?;
        let pred = trace.output();
        let mut loss = 0.0;
        let mut upstream = Array2::zeros(pred.raw_dim());
        for ((u, p), t) in upstream.iter_mut().zip(pred.iter()).zip(targets.iter()) {
            let diff = p - t;
            loss += diff * diff;
            *u = 2.0 * diff / batch;
        }
        let mut grads = self.net.backward(&trace, upstream.view())?;
        grads.clip_global_norm(grad_clip);
        opt.update(&mut self.net, &grads, learning_rate)?;
        Ok(loss / batch)
    }
}

impl Dynamics for ForwardModel {
    fn predict_next(&self, state: &[f64], action: &JointAction) -> Vec<f64> {
        self.predict(state, &action.flat())
            .expect("forward model dims checked at construction")
    }
}

/// Which branch a rollout belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchTag {
    Factual,
    Counterfactual(usize),
}

/// An H-step predicted state sequence for one branch.
#[derive(Debug, Clone)]
pub struct BranchRollout {
    pub tag: BranchTag,
    pub first_action: JointAction,
    /// Predicted centralized states at horizons `1..=H`, clipped to valid
    /// ranges.
    pub states: Vec<Vec<f64>>,
}

impl BranchRollout {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn state_at(&self, horizon: usize) -> &[f64] {
        &self.states[horizon - 1]
    }
}

/// Closed-loop branch rollout: step 1 applies `first_action` to `start`;
/// later steps rebuild local observations from the clipped predicted state
/// and query the current actors deterministically.
pub fn rollout_branch(
    dynamics: &dyn Dynamics,
    actors: &[Mlp],
    env: &dyn Environment,
    start: &[f64],
    first_action: &JointAction,
    horizon: usize,
    tag: BranchTag,
    counters: &Counters,
) -> Result<BranchRollout> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("rollout horizon must be >= 1".into()));
    }
    if actors.len() != env.num_agents() {
        return Err(Error::Shape(format!(
            "got {} actors for {} agents",
            actors.len(),
            env.num_agents()
        )));
    }
    let mut states = Vec::with_capacity(horizon);
    let mut current = dynamics.predict_next(start, first_action);
    env.clip_state_vec(&mut current);
    counters.add_model_predictions(1);
    counters.add_rollout_steps(1);
    states.push(current.clone());
    for _ in 1..horizon {
        let mut action = JointAction::zeros(actors.len());
        for (i, actor) in actors.iter().enumerate() {
            let obs = env.observation_vec(&current, i);
            let out = actor.forward(&obs)?;
            action.0[i] = [out[0], out[1]];
        }
        current = dynamics.predict_next(&current, &action);
        env.clip_state_vec(&mut current);
        counters.add_model_predictions(1);
        counters.add_rollout_steps(1);
        states.push(current.clone());
    }
    Ok(BranchRollout {
        tag,
        first_action: first_action.clone(),
        states,
    })
}
