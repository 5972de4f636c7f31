use super::arch::NetArchitecture;
use super::net::{backward, forward_tape, q_values_batch};
use super::params::{GradStore, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::replay::Transition;

/// Bootstrapped regression targets for a batch; terminal transitions drop
/// the bootstrap term.
pub fn td_targets<T: Scalar>(
    arch: &NetArchitecture,
    target: &ParamStore<T>,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let open: Vec<_> = batch.iter().filter(|t| !t.terminal).map(|t| &t.next_state).collect();
    let mut next = if open.is_empty() || gamma == 0.0 {
        Vec::new()
    } else {
        q_values_batch(arch, target, &open)?
    }
    .into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            if t.terminal {
                t.reward
            } else {
                match next.next() {
                    Some(q) => t.reward + gamma * q.max(),
                    None => t.reward,
                }
            }
        })
        .collect())
}

pub fn td_target<T: Scalar>(
    arch: &NetArchitecture,
    target: &ParamStore<T>,
    transition: &Transition,
    gamma: f64,
) -> Result<f64> {
    Ok(td_targets(arch, target, &[transition], gamma)?[0])
}

/// Mean squared TD error over the batch and its gradient with respect to
/// the online parameters. The target network only supplies constants.
pub fn loss_and_grads<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    target: &ParamStore<T>,
    batch: &[&Transition],
    gamma: f64,
) -> Result<(f64, GradStore<T>)> {
    if batch.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    target.check_layout(params)?;
    let y = td_targets(arch, target, batch, gamma)?;
    let states: Vec<_> = batch.iter().map(|t| &t.state).collect();
    let (out, tape) = forward_tape(arch, params, &states)?;
    let a = arch.n_actions;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut d_out = vec![T::zero(); out.len()];
    for (b, t) in batch.iter().enumerate() {
        let ai = t.action.index();
        if ai >= a {
            return Err(Error::ShapeMismatch(format!(
                "action index {ai} outside the {a}-action head"
            )));
        }
        let residual = out[b * a + ai].as_f64() - y[b];
        loss += residual * residual * scale;
        d_out[b * a + ai] = T::lit(2.0 * residual * scale);
    }
    let mut grads = params.zeros_like();
    backward(arch, params, &tape, &d_out, &mut grads);
    Ok((loss, grads))
}
