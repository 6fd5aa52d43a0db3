//! Centralised action-value critics over (global state, joint action).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CentralCritic<S: Scalar = f64> {
    state_dim: usize,
    action_dim: usize,
    /// Width of the one-hot cost-index channel; zero when absent.
    index_width: usize,
    net: Mlp<S>,
    target: Mlp<S>,
}

/// Mini-batch for TD updates. `next_actions` must come from the target policy.
#[derive(Clone, Debug)]
pub struct TdBatch<S: Scalar = f64> {
    pub states: Tensor<S>,
    pub actions: Tensor<S>,
    pub rewards: Vec<S>,
    /// `costs[j][l]`: cost `j` of sample `l`.
    pub costs: Vec<Vec<S>>,
    pub next_states: Tensor<S>,
    pub next_actions: Tensor<S>,
    pub done: Vec<bool>,
}

impl<S: Scalar> TdBatch<S> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TdLoss<S: Scalar = f64> {
    pub loss: S,
    /// Aligned with `Mlp::params` of the online network.
    pub grads: Vec<Tensor<S>>,
}

impl<S: Scalar> CentralCritic<S> {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        index_width: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![state_dim + action_dim + index_width];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, activation, Activation::Identity, rng);
        Self {
            state_dim,
            action_dim,
            index_width,
            target: net.clone(),
            net,
        }
    }

    pub fn from_net(state_dim: usize, action_dim: usize, index_width: usize, net: Mlp<S>) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim + index_width || net.output_dim() != 1 {
            return Err(Error::invalid("critic network has the wrong input or output width"));
        }
        Ok(Self {
            state_dim,
            action_dim,
            index_width,
            target: net.clone(),
            net,
        })
    }

    pub fn net(&self) -> &Mlp<S> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<S> {
        &mut self.net
    }

    pub fn target(&self) -> &Mlp<S> {
        &self.target
    }

    /// Zeroes the last layer of both networks so every output starts at 0.
    pub fn zero_output_layer(&mut self) {
        for net in [&mut self.net, &mut self.target] {
            if let Some(l) = net.layers_mut().last_mut() {
                l.weight.data_mut().iter_mut().for_each(|w| *w = S::zero());
                l.bias.data_mut().iter_mut().for_each(|b| *b = S::zero());
            }
        }
    }

    pub fn index_width(&self) -> usize {
        self.index_width
    }

    fn index_block(&self, rows: usize, index: Option<usize>) -> Result<Option<Tensor<S>>> {
        match (self.index_width, index) {
            (0, None) => Ok(None),
            (0, Some(_)) => Err(Error::invalid("cost index given to a critic without an index channel")),
            (_, None) => Err(Error::invalid("shared cost critic needs a cost index")),
            (w, Some(j)) if j >= w => Err(Error::invalid(format!("cost index {j} out of range for {w}"))),
            (w, Some(j)) => {
                let mut t = Tensor::zeros(rows, w);
                for r in 0..rows {
                    t.data_mut()[r * w + j] = S::one();
                }
                Ok(Some(t))
            }
        }
    }

    fn input(&self, states: &Tensor<S>, actions: &Tensor<S>, index: Option<usize>) -> Result<Tensor<S>> {
        if states.cols() != self.state_dim || actions.cols() != self.action_dim || states.rows() != actions.rows() {
            return Err(Error::ShapeMismatch {
                context: "critic input",
                expected: vec![self.state_dim, self.action_dim],
                found: vec![states.cols(), actions.cols()],
            });
        }
        let idx = self.index_block(states.rows(), index)?;
        let mut parts = vec![states, actions];
        if let Some(t) = &idx {
            parts.push(t);
        }
        Tensor::concat_cols(&parts)
    }

    /// `Q(s, a)` for one state and joint action.
    pub fn q_value(&self, state: &[S], joint_action: &[S], index: Option<usize>) -> Result<S> {
        let q = self.q_batch(&Tensor::row(state.to_vec()), &Tensor::row(joint_action.to_vec()), index, false)?;
        Ok(q.item())
    }

    /// `[batch, 1]` values from the online or target network.
    pub fn q_batch(&self, states: &Tensor<S>, actions: &Tensor<S>, index: Option<usize>, target: bool) -> Result<Tensor<S>> {
        let x = self.input(states, actions, index)?;
        if target {
            self.target.forward(&x)
        } else {
            self.net.forward(&x)
        }
    }

    /// Records `Q(s, a)` on the tape with `a` given as a tape variable.
    /// Returns the `[batch, 1]` output and the parameter handles.
    pub fn record(
        &self,
        tape: &mut Tape<S>,
        states: &Tensor<S>,
        actions: Var,
        index: Option<usize>,
        trainable: bool,
    ) -> Result<(Var, MlpVars)> {
        let rows = states.rows();
        if tape.value(actions).cols() != self.action_dim || tape.value(actions).rows() != rows {
            return Err(Error::ShapeMismatch {
                context: "critic recorded action",
                expected: vec![rows, self.action_dim],
                found: tape.value(actions).shape().to_vec(),
            });
        }
        let s = tape.constant(states.clone());
        let mut parts = vec![s, actions];
        if let Some(t) = self.index_block(rows, index)? {
            parts.push(tape.constant(t));
        }
        let x = tape.concat_cols(&parts)?;
        self.net.forward_recorded(tape, x, trainable)
    }

    /// Bootstrapped targets `y_l + γ·(1 − done_l)·Q′(s′_l, a′_l)`, computed without recording.
    pub fn td_targets(&self, batch: &TdBatch<S>, signal: &[S], index: Option<usize>, gamma: S) -> Result<Vec<S>> {
        let next = self.q_batch(&batch.next_states, &batch.next_actions, index, true)?;
        Ok(signal
            .iter()
            .zip(next.data())
            .zip(&batch.done)
            .map(|((&y, &q), &d)| if d { y } else { y + gamma * q })
            .collect())
    }

    /// Mean squared TD error `(1/L)·Σ (q_l − Q(s_l, a_l))²` averaged over the listed
    /// signals, with gradients for the online network only.
    fn td_loss_over(&self, batch: &TdBatch<S>, signals: &[(&[S], Option<usize>)], gamma: S) -> Result<TdLoss<S>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("td loss"));
        }
        let mut tape = Tape::new();
        let vars = self.net.register(&mut tape, true);
        let mut total: Option<Var> = None;
        for &(signal, index) in signals {
            if signal.len() != batch.len() {
                return Err(Error::ShapeMismatch {
                    context: "td signal",
                    expected: vec![batch.len()],
                    found: vec![signal.len()],
                });
            }
            let targets = self.td_targets(batch, signal, index, gamma)?;
            let x = tape.constant(self.input(&batch.states, &batch.actions, index)?);
            let q = vars.forward(&mut tape, x)?;
            let y = tape.constant(Tensor::column(targets));
            let diff = tape.sub(y, q)?;
            let sq = tape.square(diff);
            let m = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
        let total = total.ok_or(Error::EmptyBatch("td loss signals"))?;
        let loss = tape.scale(total, S::one() / S::cast(signals.len() as f64));
        let g = tape.backward(loss)?;
        Ok(TdLoss {
            loss: tape.value(loss).item(),
            grads: self.net.grads(&vars, &g),
        })
    }

    pub fn reward_td_loss(&self, batch: &TdBatch<S>, gamma: S) -> Result<TdLoss<S>> {
        self.td_loss_over(batch, &[(&batch.rewards, None)], gamma)
    }

    /// TD loss on cost `j`; a shared critic is addressed through its index channel.
    pub fn cost_td_loss(&self, batch: &TdBatch<S>, j: usize, gamma: S) -> Result<TdLoss<S>> {
        let costs = batch.costs.get(j).ok_or_else(|| Error::invalid(format!("no cost stream {j}")))?;
        let index = (self.index_width > 0).then_some(j);
        self.td_loss_over(batch, &[(costs, index)], gamma)
    }

    /// Mean of the per-cost TD losses of a shared critic, as one objective.
    pub fn shared_cost_td_loss(&self, batch: &TdBatch<S>, gamma: S) -> Result<TdLoss<S>> {
        if self.index_width != batch.costs.len() {
            return Err(Error::invalid("shared critic index width differs from the cost count"));
        }
        let signals: Vec<(&[S], Option<usize>)> = batch
            .costs
            .iter()
            .enumerate()
            .map(|(j, c)| (c.as_slice(), Some(j)))
            .collect();
        self.td_loss_over(batch, &signals, gamma)
    }

    /// `η′ ← δ·η + (1 − δ)·η′`.
    pub fn soft_update(&mut self, delta: f64) -> Result<()> {
        self.target.soft_update_from(&self.net, S::cast(delta))
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, name: &str) -> Result<()> {
        ckpt.insert_mlp(name, &self.net)?;
        ckpt.insert_mlp(&format!("{name}_target"), &self.target)
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, name: &str) -> Result<()> {
        ckpt.load_mlp(name, &mut self.net)?;
        ckpt.load_mlp(&format!("{name}_target"), &mut self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_critic(index_width: usize) -> CentralCritic<f64> {
        let net = Mlp::zeros(&[2 + 1 + index_width, 4, 1], Activation::LeakyRelu, Activation::Identity);
        CentralCritic::from_net(2, 1, index_width, net).unwrap()
    }

    #[test]
    fn zero_critic_outputs_zero() {
        assert_eq!(zero_critic(0).q_value(&[0.3, 1.0], &[0.2], None).unwrap(), 0.0);
        assert!(zero_critic(0).q_value(&[0.3], &[0.2], None).is_err());
        assert!(zero_critic(2).q_value(&[0.3, 1.0], &[0.2], None).is_err());
        assert!(zero_critic(2).q_value(&[0.3, 1.0], &[0.2], Some(2)).is_err());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let c = zero_critic(0);
        let b = TdBatch {
            states: Tensor::zeros(1, 2),
            actions: Tensor::zeros(1, 1),
            rewards: vec![],
            costs: vec![],
            next_states: Tensor::zeros(1, 2),
            next_actions: Tensor::zeros(1, 1),
            done: vec![],
        };
        assert!(matches!(c.reward_td_loss(&b, 0.9), Err(Error::EmptyBatch(_))));
    }
}
