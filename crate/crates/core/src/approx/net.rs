//! Network evaluation and reverse-mode gradients.
//!
//! A [`Network`] is a stateless evaluator over a [`NetSpec`] and a
//! [`ParamStore`]. Recurrent networks expose the hidden state explicitly:
//! callers thread it step by step, or use the sequence helpers which do the
//! threading (and the reverse-time gradient chaining) for them.

use super::{NetSpec, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{accumulate_outer, accumulate_vec, matvec, matvec_t};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Captured intermediate values of one forward step, needed by `backward`.
#[derive(Debug, Clone)]
pub struct StepCtx {
    /// Per dense layer of the pre-chain: (layer input, pre-activation).
    dense: Vec<(Vec<f64>, Vec<f64>)>,
    gru: Option<GruCtx>,
    /// Input to the final linear layer of a recurrent net (the new hidden).
    out_input: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct GruCtx {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

/// One network's outputs, contexts, and hidden trajectory over a sequence.
#[derive(Debug, Clone)]
pub struct SeqRun {
    pub outputs: Vec<Vec<f64>>,
    pub ctxs: Vec<StepCtx>,
    /// Hidden state after each step (empty for feed-forward nets).
    pub hiddens: Vec<Vec<f64>>,
}

impl SeqRun {
    /// Hidden state entering step `t` (zeros for t = 0).
    pub fn hidden_before(&self, t: usize, hidden_dim: usize) -> Vec<f64> {
        if t == 0 {
            vec![0.0; hidden_dim]
        } else {
            self.hiddens[t - 1].clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Network { spec })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn is_recurrent(&self) -> bool {
        self.spec.recurrent.is_some()
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.recurrent.unwrap_or(0)
    }

    pub fn init_hidden(&self) -> Option<Vec<f64>> {
        self.spec.recurrent.map(|h| vec![0.0; h])
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim() {
            return Err(Error::config(format!(
                "input length {} does not match spec input size {}",
                input.len(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    /// Pure forward pass. `hidden` must be `Some` with the right width for
    /// recurrent nets and `None` for feed-forward ones.
    pub fn forward(
        &self,
        params: &ParamStore,
        input: &[f64],
        hidden: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let (out, new_hidden, _) = self.forward_ctx(params, input, hidden)?;
        Ok((out, new_hidden))
    }

    /// Forward pass that captures the context needed for `backward`.
    pub fn forward_ctx(
        &self,
        params: &ParamStore,
        input: &[f64],
        hidden: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>, StepCtx)> {
        self.check_input(input)?;
        let sizes = &self.spec.layer_sizes;
        let n = sizes.len();
        let act = self.spec.activation;

        let mut ctx = StepCtx {
            dense: Vec::new(),
            gru: None,
            out_input: None,
        };

        match self.spec.recurrent {
            None => {
                let mut x = input.to_vec();
                for i in 0..n - 1 {
                    let w = params.get(&format!("w{i}"));
                    let b = params.get(&format!("b{i}"));
                    let mut pre = matvec(w, &x);
                    for (p, bv) in pre.iter_mut().zip(b.data()) {
                        *p += bv;
                    }
                    ctx.dense.push((x, pre.clone()));
                    x = if i < n - 2 {
                        pre.iter().map(|&v| act.apply(v)).collect()
                    } else {
                        pre
                    };
                }
                Ok((x, None, ctx))
            }
            Some(h_dim) => {
                let h_prev = hidden.ok_or_else(|| {
                    Error::usage("recurrent network forward requires a hidden state")
                })?;
                if h_prev.len() != h_dim {
                    return Err(Error::config(format!(
                        "hidden state length {} does not match spec hidden size {}",
                        h_prev.len(),
                        h_dim
                    )));
                }
                // Pre-chain: every dense layer activated.
                let mut x = input.to_vec();
                for i in 0..n - 2 {
                    let w = params.get(&format!("w{i}"));
                    let b = params.get(&format!("b{i}"));
                    let mut pre = matvec(w, &x);
                    for (p, bv) in pre.iter_mut().zip(b.data()) {
                        *p += bv;
                    }
                    ctx.dense.push((x, pre.clone()));
                    x = pre.iter().map(|&v| act.apply(v)).collect();
                }

                // Gated recurrent cell:
                //   z = σ(Wz x + Uz h + bz)
                //   r = σ(Wr x + Ur h + br)
                //   c = tanh(Wh x + Uh (r ⊙ h) + bh)
                //   h' = (1 − z) ⊙ h + z ⊙ c
                let gate = |w: &str, u: &str, b: &str, hin: &[f64]| -> Vec<f64> {
                    let mut a = matvec(params.get(w), &x);
                    let rec = matvec(params.get(u), hin);
                    for ((av, rv), bv) in a.iter_mut().zip(rec).zip(params.get(b).data()) {
                        *av += rv + bv;
                    }
                    a
                };
                let z: Vec<f64> = gate("gru_wz", "gru_uz", "gru_bz", h_prev)
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect();
                let r: Vec<f64> = gate("gru_wr", "gru_ur", "gru_br", h_prev)
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect();
                let rh: Vec<f64> = r.iter().zip(h_prev).map(|(rv, hv)| rv * hv).collect();
                let cand: Vec<f64> = gate("gru_wh", "gru_uh", "gru_bh", &rh)
                    .iter()
                    .map(|&v| v.tanh())
                    .collect();
                let h_new: Vec<f64> = z
                    .iter()
                    .zip(&cand)
                    .zip(h_prev)
                    .map(|((zv, cv), hv)| (1.0 - zv) * hv + zv * cv)
                    .collect();

                ctx.gru = Some(GruCtx {
                    x,
                    h_prev: h_prev.to_vec(),
                    z,
                    r,
                    cand,
                });
                ctx.out_input = Some(h_new.clone());

                let w = params.get("w_out");
                let b = params.get("b_out");
                let mut out = matvec(w, &h_new);
                for (o, bv) in out.iter_mut().zip(b.data()) {
                    *o += bv;
                }
                Ok((out, Some(h_new), ctx))
            }
        }
    }

    /// Reverse-mode step. Accumulates parameter gradients (+=) into
    /// `params.grads` and returns (input gradient, hidden-state gradient).
    ///
    /// `upstream_hidden` carries dL/dh' arriving from later time steps; pass
    /// `None` for feed-forward nets or at the last step of a sequence.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        ctx: &StepCtx,
        upstream_out: &[f64],
        upstream_hidden: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        if upstream_out.len() != self.spec.output_dim() {
            return Err(Error::usage(format!(
                "upstream gradient length {} does not match output size {}",
                upstream_out.len(),
                self.spec.output_dim()
            )));
        }
        let sizes = &self.spec.layer_sizes;
        let n = sizes.len();
        let act = self.spec.activation;

        match self.spec.recurrent {
            None => {
                let mut dy = upstream_out.to_vec();
                for i in (0..n - 1).rev() {
                    let (layer_in, pre) = &ctx.dense[i];
                    // Hidden layers have an activation after the affine map.
                    if i < n - 2 {
                        for (d, p) in dy.iter_mut().zip(pre) {
                            *d *= act.derivative(*p);
                        }
                    }
                    let wname = format!("w{i}");
                    let dx = matvec_t(params.get(&wname), &dy);
                    accumulate_outer(params.grad_mut(&wname), &dy, layer_in);
                    accumulate_vec(params.grad_mut(&format!("b{i}")), &dy);
                    dy = dx;
                }
                Ok((dy, None))
            }
            Some(_) => {
                let gru = ctx
                    .gru
                    .as_ref()
                    .expect("recurrent context captured by forward_ctx");
                let h_new_in = ctx
                    .out_input
                    .as_ref()
                    .expect("recurrent context captured by forward_ctx");

                // Output layer.
                let dh_out = matvec_t(params.get("w_out"), upstream_out);
                accumulate_outer(params.grad_mut("w_out"), upstream_out, h_new_in);
                accumulate_vec(params.grad_mut("b_out"), upstream_out);

                // Total gradient on h'.
                let mut dh_new = dh_out;
                if let Some(up) = upstream_hidden {
                    for (d, u) in dh_new.iter_mut().zip(up) {
                        *d += u;
                    }
                }

                // GRU cell backward.
                let GruCtx {
                    x,
                    h_prev,
                    z,
                    r,
                    cand,
                } = gru;
                let h = z.len();
                let mut dh_prev = vec![0.0; h];
                let mut dz = vec![0.0; h];
                let mut dcand = vec![0.0; h];
                for i in 0..h {
                    dz[i] = dh_new[i] * (cand[i] - h_prev[i]);
                    dcand[i] = dh_new[i] * z[i];
                    dh_prev[i] = dh_new[i] * (1.0 - z[i]);
                }
                // Candidate: c = tanh(ac), ac = Wh x + Uh (r ⊙ h_prev) + bh.
                let dac: Vec<f64> = dcand
                    .iter()
                    .zip(cand)
                    .map(|(d, c)| d * (1.0 - c * c))
                    .collect();
                let rh: Vec<f64> = r.iter().zip(h_prev).map(|(rv, hv)| rv * hv).collect();
                accumulate_outer(params.grad_mut("gru_wh"), &dac, x);
                accumulate_outer(params.grad_mut("gru_uh"), &dac, &rh);
                accumulate_vec(params.grad_mut("gru_bh"), &dac);
                let drh = matvec_t(params.get("gru_uh"), &dac);
                let mut dr = vec![0.0; h];
                for i in 0..h {
                    dr[i] = drh[i] * h_prev[i];
                    dh_prev[i] += drh[i] * r[i];
                }
                // Gates: σ' = s(1−s).
                let daz: Vec<f64> = dz.iter().zip(z).map(|(d, s)| d * s * (1.0 - s)).collect();
                let dar: Vec<f64> = dr.iter().zip(r).map(|(d, s)| d * s * (1.0 - s)).collect();
                accumulate_outer(params.grad_mut("gru_wz"), &daz, x);
                accumulate_outer(params.grad_mut("gru_uz"), &daz, h_prev);
                accumulate_vec(params.grad_mut("gru_bz"), &daz);
                accumulate_outer(params.grad_mut("gru_wr"), &dar, x);
                accumulate_outer(params.grad_mut("gru_ur"), &dar, h_prev);
                accumulate_vec(params.grad_mut("gru_br"), &dar);
                for (dst, v) in dh_prev.iter_mut().zip(matvec_t(params.get("gru_uz"), &daz)) {
                    *dst += v;
                }
                for (dst, v) in dh_prev.iter_mut().zip(matvec_t(params.get("gru_ur"), &dar)) {
                    *dst += v;
                }
                let mut dx = matvec_t(params.get("gru_wz"), &daz);
                for (dst, v) in dx.iter_mut().zip(matvec_t(params.get("gru_wr"), &dar)) {
                    *dst += v;
                }
                for (dst, v) in dx.iter_mut().zip(matvec_t(params.get("gru_wh"), &dac)) {
                    *dst += v;
                }

                // Pre-chain backward (all layers activated).
                let mut dy = dx;
                for i in (0..n - 2).rev() {
                    let (layer_in, pre) = &ctx.dense[i];
                    for (d, p) in dy.iter_mut().zip(pre) {
                        *d *= act.derivative(*p);
                    }
                    let wname = format!("w{i}");
                    let dnext = matvec_t(params.get(&wname), &dy);
                    accumulate_outer(params.grad_mut(&wname), &dy, layer_in);
                    accumulate_vec(params.grad_mut(&format!("b{i}")), &dy);
                    dy = dnext;
                }
                Ok((dy, Some(dh_prev)))
            }
        }
    }

    /// Runs the network over a whole sequence, threading hidden state from
    /// zeros. Equals step-by-step `forward` with the same threading.
    pub fn forward_seq(&self, params: &ParamStore, inputs: &[Vec<f64>]) -> Result<SeqRun> {
        let mut run = SeqRun {
            outputs: Vec::with_capacity(inputs.len()),
            ctxs: Vec::with_capacity(inputs.len()),
            hiddens: Vec::with_capacity(inputs.len()),
        };
        let mut hidden = self.init_hidden();
        for input in inputs {
            let (out, new_hidden, ctx) = self.forward_ctx(params, input, hidden.as_deref())?;
            run.outputs.push(out);
            run.ctxs.push(ctx);
            if let Some(h) = &new_hidden {
                run.hiddens.push(h.clone());
            }
            hidden = new_hidden;
        }
        Ok(run)
    }

    /// Backpropagates through a sequence run. `upstreams[t]` is dL/d(output
    /// at step t); hidden-state gradients are chained backwards in time.
    pub fn backward_seq(
        &self,
        params: &mut ParamStore,
        run: &SeqRun,
        upstreams: &[Vec<f64>],
    ) -> Result<()> {
        if upstreams.len() != run.ctxs.len() {
            return Err(Error::usage(
                "one upstream gradient per sequence step is required",
            ));
        }
        let mut dh: Option<Vec<f64>> = None;
        for t in (0..run.ctxs.len()).rev() {
            let (_, dh_prev) =
                self.backward(params, &run.ctxs[t], &upstreams[t], dh.as_deref())?;
            dh = dh_prev;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{init_params, Activation};
    use crate::tensor::Tensor;

    fn zeroed_store(spec: &NetSpec) -> ParamStore {
        let mut store = init_params(spec, 0).unwrap();
        let names: Vec<String> = store.names().cloned().collect();
        for n in &names {
            store.get_mut(n).fill(0.0);
        }
        store
    }

    #[test]
    fn zero_weights_identity_activation_outputs_bias() {
        let spec = NetSpec::mlp(vec![3, 2], Activation::Identity);
        let mut store = zeroed_store(&spec);
        store.get_mut("b0").data_mut().copy_from_slice(&[0.5, -1.5]);
        let net = Network::new(spec).unwrap();
        for input in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0], [9.0, 9.0, 9.0]] {
            let (out, _) = net.forward(&store, &input, None).unwrap();
            assert_eq!(out, vec![0.5, -1.5]);
        }
    }

    #[test]
    fn identity_matrix_passes_input_through() {
        let spec = NetSpec::mlp(vec![3, 3], Activation::Identity);
        let mut store = zeroed_store(&spec);
        *store.get_mut("w0") = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let net = Network::new(spec).unwrap();
        let (out, _) = net.forward(&store, &[0.25, -4.0, 2.0], None).unwrap();
        assert_eq!(out, vec![0.25, -4.0, 2.0]);
    }

    /// Independent straight-line oracle for a 2-hidden-layer MLP.
    fn mlp_oracle(store: &ParamStore, input: &[f64], act: Activation) -> Vec<f64> {
        let mut x = input.to_vec();
        for i in 0..3 {
            let w = store.get(&format!("w{i}"));
            let b = store.get(&format!("b{i}"));
            let mut y = vec![0.0; w.rows()];
            for r in 0..w.rows() {
                let mut acc = b.data()[r];
                for c in 0..w.cols() {
                    acc += w.at(r, c) * x[c];
                }
                y[r] = acc;
            }
            if i < 2 {
                for v in y.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let spec = NetSpec::mlp(vec![5, 7, 6, 3], Activation::Tanh);
        let net = Network::new(spec.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for trial in 0..20 {
            let store = init_params(&spec, trial).unwrap();
            let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (out, _) = net.forward(&store, &input, None).unwrap();
            let expect = mlp_oracle(&store, &input, Activation::Tanh);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let spec = NetSpec::mlp(vec![3, 2], Activation::Relu);
        let store = init_params(&spec, 0).unwrap();
        let net = Network::new(spec).unwrap();
        assert!(net.forward(&store, &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn linear_backward_is_outer_product() {
        let spec = NetSpec::mlp(vec![3, 2], Activation::Identity);
        let store = init_params(&spec, 5).unwrap();
        let net = Network::new(spec).unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut params = store;
        let (_, _, ctx) = net.forward_ctx(&params, &x, None).unwrap();
        net.backward(&mut params, &ctx, &[1.0, 1.0], None).unwrap();
        let gw = params.grad("w0");
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(gw.at(r, c), x[c]);
            }
        }
        assert_eq!(params.grad("b0").data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_accumulates_nothing() {
        let spec = NetSpec::recurrent(vec![4, 6, 2], Activation::Elu, 5);
        let mut params = init_params(&spec, 11).unwrap();
        let net = Network::new(spec).unwrap();
        let h0 = net.init_hidden().unwrap();
        let (_, _, ctx) = net
            .forward_ctx(&params, &[0.1, 0.2, 0.3, 0.4], Some(&h0))
            .unwrap();
        net.backward(&mut params, &ctx, &[0.0, 0.0], None).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            assert!(params.grad(&n).data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn recurrent_sequence_equals_stepwise_threading() {
        let spec = NetSpec::recurrent(vec![3, 6, 2], Activation::Tanh, 4);
        let params = init_params(&spec, 21).unwrap();
        let net = Network::new(spec).unwrap();
        let inputs: Vec<Vec<f64>> = vec![
            vec![0.3, -0.1, 0.9],
            vec![-0.4, 0.2, 0.0],
            vec![1.0, 1.0, -1.0],
        ];
        let run = net.forward_seq(&params, &inputs).unwrap();

        let mut hidden = net.init_hidden();
        for (t, input) in inputs.iter().enumerate() {
            let (out, new_h) = net.forward(&params, input, hidden.as_deref()).unwrap();
            assert_eq!(out, run.outputs[t]);
            assert_eq!(new_h.as_ref().unwrap(), &run.hiddens[t]);
            hidden = new_h;
        }
    }

    #[test]
    fn recurrent_forward_requires_hidden() {
        let spec = NetSpec::recurrent(vec![3, 6, 2], Activation::Tanh, 4);
        let params = init_params(&spec, 2).unwrap();
        let net = Network::new(spec).unwrap();
        assert!(net.forward(&params, &[0.0, 0.0, 0.0], None).is_err());
    }
}
