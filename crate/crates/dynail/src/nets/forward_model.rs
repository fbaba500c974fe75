use super::{init_linear, insert_params, linear};
use crate::diffcore::{DiffError, NodeId, Tape, Tensor};
use rand::RngCore;

/// Embedding and recurrent width used by the shipped models.
pub const FM_HIDDEN: usize = 64;

/// Forward dynamics model predicting the state delta: the state is encoded
/// by an MLP feeding a GRU cell (hidden state carried across a rollout,
/// zeroed at sequence starts), the action by an MLP; the two embeddings are
/// merged with a Hadamard product and a head MLP emits `delta_s`, so the
/// prediction `s + delta_s` is residual by construction.
///
/// Parameter order: ws, bs, w_ir, w_hr, b_r, w_iz, w_hz, b_z, w_in, w_hn,
/// b_n, wa, ba, wh, bh, wo, bo.
#[derive(Clone)]
pub struct ForwardModelNet {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    params: Vec<Tensor>,
}

impl ForwardModelNet {
    pub fn init(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let h = hidden;
        let (ws, bs) = init_linear(h, state_dim, rng);
        let (w_ir, _) = init_linear(h, h, rng);
        let (w_hr, b_r) = init_linear(h, h, rng);
        let (w_iz, _) = init_linear(h, h, rng);
        let (w_hz, b_z) = init_linear(h, h, rng);
        let (w_in, _) = init_linear(h, h, rng);
        let (w_hn, b_n) = init_linear(h, h, rng);
        let (wa, ba) = init_linear(h, action_dim, rng);
        let (wh, bh) = init_linear(h, h, rng);
        // Small head so early predictions stay near the identity map.
        let wo = Tensor::randn(&[state_dim, h], 0.01, rng);
        let bo = Tensor::zeros(&[state_dim]);
        ForwardModelNet {
            state_dim,
            action_dim,
            hidden,
            params: vec![
                ws, bs, w_ir, w_hr, b_r, w_iz, w_hz, b_z, w_in, w_hn, b_n, wa, ba, wh, bh, wo, bo,
            ],
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len(), "parameter list shape");
        for (new, old) in params.iter().zip(&self.params) {
            assert_eq!(new.shape(), old.shape(), "parameter tensor shape");
        }
        self.params = params;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden]
    }

    pub fn insert(&self, tape: &mut Tape) -> TapedForwardModel {
        self.taped(tape, true)
    }

    pub fn insert_const(&self, tape: &mut Tape) -> TapedForwardModel {
        self.taped(tape, false)
    }

    fn taped(&self, tape: &mut Tape, trainable: bool) -> TapedForwardModel {
        TapedForwardModel {
            ids: insert_params(tape, &self.params, trainable),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    /// Plain one-step prediction: returns (s_pred, h_next).
    pub fn predict(&self, h: &[f64], s: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let tf = self.insert_const(&mut tape);
        let hn = tape.constant_vec(h);
        let sn = tape.constant_vec(s);
        let an = tape.constant_vec(a);
        let (s_pred, h_next) = tf
            .forward(&mut tape, hn, sn, an)
            .expect("forward model step");
        (
            tape.value(s_pred).data().to_vec(),
            tape.value(h_next).data().to_vec(),
        )
    }
}

pub struct TapedForwardModel {
    ids: Vec<NodeId>,
    state_dim: usize,
    action_dim: usize,
}

impl TapedForwardModel {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// One model step: `(s_pred, h_next) = f(h, s, a)` with
    /// `s_pred = s + delta` (exact residual).
    pub fn forward(
        &self,
        tape: &mut Tape,
        h: NodeId,
        s: NodeId,
        a: NodeId,
    ) -> Result<(NodeId, NodeId), DiffError> {
        if tape.value(s).len() != self.state_dim || tape.value(a).len() != self.action_dim {
            return Err(DiffError::ShapeMismatch {
                node: tape.len(),
                detail: format!(
                    "model input dims ({}, {}), expected ({}, {})",
                    tape.value(s).len(),
                    tape.value(a).len(),
                    self.state_dim,
                    self.action_dim
                ),
            });
        }
        let ids = &self.ids;
        // State encoder into the GRU cell.
        let xs = linear(tape, ids[0], ids[1], s)?;
        let xs = tape.relu(xs)?;
        let h_next = {
            let rx = tape.matmul(ids[2], xs)?;
            let rh = tape.matmul(ids[3], h)?;
            let r = tape.add(rx, rh)?;
            let r = tape.add(r, ids[4])?;
            let r = tape.sigmoid(r)?;
            let zx = tape.matmul(ids[5], xs)?;
            let zh = tape.matmul(ids[6], h)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add(z, ids[7])?;
            let z = tape.sigmoid(z)?;
            let nx = tape.matmul(ids[8], xs)?;
            let nh = tape.matmul(ids[9], h)?;
            let gated = tape.mul(r, nh)?;
            let n = tape.add(nx, gated)?;
            let n = tape.add(n, ids[10])?;
            let n = tape.tanh(n)?;
            // h' = (1 - z) * n + z * h
            let zn = tape.neg(z)?;
            let one_minus_z = tape.add_scalar(zn, 1.0)?;
            let new_part = tape.mul(one_minus_z, n)?;
            let kept = tape.mul(z, h)?;
            tape.add(new_part, kept)?
        };
        // Action encoder, Hadamard merge, delta head.
        let ea = linear(tape, ids[11], ids[12], a)?;
        let ea = tape.relu(ea)?;
        let merged = tape.mul(h_next, ea)?;
        let g = linear(tape, ids[13], ids[14], merged)?;
        let g = tape.relu(g)?;
        let delta = linear(tape, ids[15], ids[16], g)?;
        let s_pred = tape.add(s, delta)?;
        Ok((s_pred, h_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cartpole = ForwardModelNet::init(4, 2, FM_HIDDEN, &mut rng);
        let h = FM_HIDDEN;
        // state enc + 6 GRU mats + 3 GRU biases + action enc + head.
        let expect = (h * 4 + h) + 6 * h * h + 3 * h + (h * 2 + h) + (h * h + h) + (4 * h + 4);
        assert_eq!(cartpole.param_count(), expect);
        assert_eq!(expect, 29_700);
        let pendulum = ForwardModelNet::init(3, 1, FM_HIDDEN, &mut rng);
        assert_eq!(pendulum.param_count(), 29_507);
    }

    #[test]
    fn zeroed_head_predicts_identity_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ForwardModelNet::init(4, 2, 16, &mut rng);
        net.params_mut()[15].scale_assign(0.0);
        net.params_mut()[16].scale_assign(0.0);
        let s = vec![0.3, -1.2, 0.05, 2.0];
        let (s_pred, _) = net.predict(&net.zero_hidden(), &s, &[1.0, 0.0]);
        assert_eq!(s_pred, s, "residual with zero delta must be bitwise s");
    }

    #[test]
    fn zeroed_head_state_jacobian_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ForwardModelNet::init(4, 2, 16, &mut rng);
        net.params_mut()[15].scale_assign(0.0);
        net.params_mut()[16].scale_assign(0.0);
        let mut tape = Tape::new();
        let tf = net.insert_const(&mut tape);
        let h = tape.constant_vec(&net.zero_hidden());
        let s = tape.constant_vec(&[0.3, -1.2, 0.05, 2.0]);
        let a = tape.constant_vec(&[1.0, 0.0]);
        let (s_pred, _) = tf.forward(&mut tape, h, s, a).unwrap();
        for i in 0..4 {
            let mut seed = vec![0.0; 4];
            seed[i] = 1.0;
            let pass = tape.backward_seeded(s_pred, Tensor::vector(seed), 0, &[s]);
            let row = tape.captured_sum(&pass, s);
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(row.data()[j], want, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn hidden_state_changes_the_prediction() {
        // The GRU must actually carry information across steps.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ForwardModelNet::init(4, 2, 16, &mut rng);
        let s = vec![0.1, 0.2, -0.1, 0.4];
        let a = vec![0.0, 1.0];
        let (pred_zero, h1) = net.predict(&net.zero_hidden(), &s, &a);
        let (pred_carried, _) = net.predict(&h1, &s, &a);
        assert_ne!(pred_zero, pred_carried);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ForwardModelNet::init(4, 2, 16, &mut rng);
        let mut tape = Tape::new();
        let tf = net.insert_const(&mut tape);
        let h = tape.constant_vec(&net.zero_hidden());
        let s = tape.constant_vec(&[0.1, 0.2, -0.1]);
        let a = tape.constant_vec(&[0.0, 1.0]);
        assert!(matches!(
            tf.forward(&mut tape, h, s, a),
            Err(DiffError::ShapeMismatch { .. })
        ));
    }
}
