//! LSTM cell and the bidirectional projected encoder built from it.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::tensor::Tensor;

/// Hidden vector and memory cell of one LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl LstmState {
    pub fn zeros(dim: usize) -> Self {
        LstmState {
            hidden: Tensor::zeros(&[dim]),
            cell: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.hidden.len()
    }

    pub fn on_tape(&self, tape: &mut Tape) -> TapedLstmState {
        TapedLstmState {
            hidden: tape.constant(self.hidden.clone()),
            cell: tape.constant(self.cell.clone()),
        }
    }
}

/// An [`LstmState`] living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapedLstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl TapedLstmState {
    pub fn read(&self, tape: &Tape) -> LstmState {
        LstmState {
            hidden: tape.value(self.hidden).clone(),
            cell: tape.value(self.cell).clone(),
        }
    }
}

/// Gate weights stacked as one `[4d, n + d]` matrix over `[x; h]`, rows in
/// input, forget, output, candidate order.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        forget_bias: f64,
        seed: u64,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{prefix}.w"),
            &[4 * hidden_dim, input_dim + hidden_dim],
            Init::Uniform(INIT_SCALE),
            seed,
        )?;
        let b = store.add(&format!("{prefix}.b"), &[4 * hidden_dim], Init::Zeros, seed)?;
        if forget_bias != 0.0 {
            let data = store.get_mut(b).value.data_mut();
            data[hidden_dim..2 * hidden_dim].iter_mut().for_each(|v| *v = forget_bias);
        }
        Ok(LstmParams {
            w,
            b,
            input_dim,
            hidden_dim,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = store.require(&format!("{prefix}.w"))?;
        let b = store.require(&format!("{prefix}.b"))?;
        let (rows, cols) = store
            .value(w)
            .dims2()
            .ok_or_else(|| Error::Config(format!("{prefix}.w is not a matrix")))?;
        if rows % 4 != 0 || cols < rows / 4 {
            return Err(Error::Config(format!("{prefix}.w has invalid shape [{rows}, {cols}]")));
        }
        let hidden_dim = rows / 4;
        Ok(LstmParams {
            w,
            b,
            input_dim: cols - hidden_dim,
            hidden_dim,
        })
    }

    /// One recurrence: `i, f, o = σ(·)`, `g = tanh(·)`,
    /// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, tape: &mut Tape, x: Var, prev: TapedLstmState) -> Result<TapedLstmState> {
        let d = self.hidden_dim;
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::shape("lstm input", tape.shape(x), &[self.input_dim]));
        }
        if tape.shape(prev.hidden) != [d] || tape.shape(prev.cell) != [d] {
            return Err(Error::shape("lstm state", tape.shape(prev.hidden), &[d]));
        }
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let xh = tape.concat(&[x, prev.hidden])?;
        let z = tape.linear(w, b, xh)?;
        let i = tape.slice(z, 0, d)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(z, d, d)?;
        let f = tape.sigmoid(f);
        let o = tape.slice(z, 2 * d, d)?;
        let o = tape.sigmoid(o);
        let g = tape.slice(z, 3 * d, d)?;
        let g = tape.tanh(g);
        let keep = tape.mul(f, prev.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok(TapedLstmState { hidden, cell })
    }
}

/// Untaped single step.
pub fn lstm_cell_step(x: &Tensor, prev: &LstmState, p: &LstmParams, store: &ParamStore) -> Result<LstmState> {
    let mut tape = Tape::inference(store);
    let xv = tape.constant(x.clone());
    let st = prev.on_tape(&mut tape);
    Ok(p.step(&mut tape, xv, st)?.read(&tape))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub units: usize,
    pub proj: usize,
}

/// One bidirectional layer followed by `tanh(W [fwd; bwd] + b)`.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl BiLstmLayer {
    /// Raw per-frame outputs of both directions, each in frame order.
    pub fn directions(&self, tape: &mut Tape, inputs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let d = self.fwd.hidden_dim;
        let mut run = |p: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
            let mut outs = vec![None; inputs.len()];
            let mut st = LstmState::zeros(d).on_tape(tape);
            for t in order {
                st = p.step(tape, inputs[t], st)?;
                outs[t] = Some(st.hidden);
            }
            Ok(outs)
        };
        let fwd = run(&self.fwd, &mut (0..inputs.len()))?;
        let bwd = run(&self.bwd, &mut (0..inputs.len()).rev())?;
        Ok((
            fwd.into_iter().map(Option::unwrap).collect(),
            bwd.into_iter().map(Option::unwrap).collect(),
        ))
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        let (fwd, bwd) = self.directions(tape, inputs)?;
        let (w, b) = (tape.param(self.proj_w), tape.param(self.proj_b));
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, bk)| {
                let both = tape.concat(&[f, bk])?;
                let z = tape.linear(w, b, both)?;
                Ok(tape.tanh(z))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<BiLstmLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.units == 0 || config.proj == 0 || config.input_dim == 0 {
            return Err(Error::Config(format!("degenerate encoder config {config:?}")));
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.input_dim;
        for l in 0..config.layers {
            let p = format!("{prefix}.l{l}");
            layers.push(BiLstmLayer {
                fwd: LstmParams::new(store, &format!("{p}.fwd"), input, config.units, 1.0, seed)?,
                bwd: LstmParams::new(store, &format!("{p}.bwd"), input, config.units, 1.0, seed)?,
                proj_w: store.add(&format!("{p}.proj.w"), &[config.proj, 2 * config.units], Init::Uniform(INIT_SCALE), seed)?,
                proj_b: store.add(&format!("{p}.proj.b"), &[config.proj], Init::Zeros, seed)?,
            });
            input = config.proj;
        }
        Ok(Encoder { config, layers })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                Ok(BiLstmLayer {
                    fwd: LstmParams::from_store(store, &format!("{p}.fwd"))?,
                    bwd: LstmParams::from_store(store, &format!("{p}.bwd"))?,
                    proj_w: store.require(&format!("{p}.proj.w"))?,
                    proj_b: store.require(&format!("{p}.proj.b"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { config, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.config.proj
    }

    pub fn forward(&self, tape: &mut Tape, frames: &[Var]) -> Result<Vec<Var>> {
        if frames.is_empty() {
            return Err(Error::Argument("cannot encode an empty frame sequence".into()));
        }
        let mut h = frames.to_vec();
        for layer in &self.layers {
            h = layer.forward(tape, &h)?;
        }
        Ok(h)
    }
}

/// Untaped encoder pass; output length equals input length.
pub fn bilstm_encode(frames: &[Tensor], encoder: &Encoder, store: &ParamStore) -> Result<Vec<Tensor>> {
    let mut tape = Tape::inference(store);
    let inputs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let out = encoder.forward(&mut tape, &inputs)?;
    Ok(out.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GRAD_EPSILON, GRAD_TOLERANCE};
    use crate::tensor::sigmoid;

    fn zero_params(store: &mut ParamStore, n: usize, d: usize) -> LstmParams {
        let p = LstmParams::new(store, "cell", n, d, 0.0, 0).unwrap();
        let w = store.get_mut(p.w);
        w.value = Tensor::zeros(w.value.shape());
        p
    }

    #[test]
    fn zero_network_from_zero_state() {
        let mut store = ParamStore::new();
        let p = zero_params(&mut store, 3, 2);
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let out = lstm_cell_step(&x, &LstmState::zeros(2), &p, &store).unwrap();
        assert_eq!(out.hidden.data(), &[0.0, 0.0]);
        assert_eq!(out.cell.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_network_halves_cell() {
        let mut store = ParamStore::new();
        let p = zero_params(&mut store, 2, 2);
        let prev = LstmState {
            hidden: Tensor::zeros(&[2]),
            cell: Tensor::vector(vec![0.8, -0.4]).unwrap(),
        };
        let out = lstm_cell_step(&Tensor::zeros(&[2]), &prev, &p, &store).unwrap();
        assert_eq!(out.cell.data(), &[0.4, -0.2]);
    }

    #[test]
    fn matches_hand_rolled_step() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 2, 2, 0.0, 42).unwrap();
        // Give the bias some non-zero values too.
        store.get_mut(p.b).value = Tensor::vector((0..8).map(|i| 0.05 * i as f64 - 0.2).collect()).unwrap();
        let x = [0.3, -0.7];
        let (h0, c0) = ([0.1, -0.2], [0.5, 0.25]);
        let prev = LstmState {
            hidden: Tensor::vector(h0.to_vec()).unwrap(),
            cell: Tensor::vector(c0.to_vec()).unwrap(),
        };
        let out = lstm_cell_step(&Tensor::vector(x.to_vec()).unwrap(), &prev, &p, &store).unwrap();

        let w = store.value(p.w).data();
        let b = store.value(p.b).data();
        let xh = [x[0], x[1], h0[0], h0[1]];
        let pre = |r: usize| b[r] + (0..4).map(|j| w[r * 4 + j] * xh[j]).sum::<f64>();
        for k in 0..2 {
            let i = sigmoid(pre(k));
            let f = sigmoid(pre(2 + k));
            let o = sigmoid(pre(4 + k));
            let g = pre(6 + k).tanh();
            let c = f * c0[k] + i * g;
            let h = o * c.tanh();
            assert!((out.cell.data()[k] - c).abs() < 1e-15);
            assert!((out.hidden.data()[k] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 2, 2, 0.0, 3).unwrap();
        let w = store.get_mut(p.w);
        w.value = Tensor::zeros(w.value.shape());
        let mut bias = vec![0.0; 8];
        bias[0..2].iter_mut().for_each(|v| *v = -800.0); // input gate → 0
        bias[2..4].iter_mut().for_each(|v| *v = 800.0); // forget gate → 1
        store.get_mut(p.b).value = Tensor::vector(bias).unwrap();
        let prev = LstmState {
            hidden: Tensor::vector(vec![0.3, 0.1]).unwrap(),
            cell: Tensor::vector(vec![1.7, -0.9]).unwrap(),
        };
        let out = lstm_cell_step(&Tensor::vector(vec![5.0, -5.0]).unwrap(), &prev, &p, &store).unwrap();
        assert_eq!(out.cell, prev.cell);
    }

    #[test]
    fn dimension_mismatch() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 2, 2, 0.0, 3).unwrap();
        let err = lstm_cell_step(&Tensor::zeros(&[3]), &LstmState::zeros(2), &p, &store);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    fn encoder(store: &mut ParamStore, layers: usize, units: usize) -> Encoder {
        let cfg = EncoderConfig {
            input_dim: 2,
            layers,
            units,
            proj: 3,
        };
        Encoder::new(store, "enc", cfg, 11).unwrap()
    }

    #[test]
    fn empty_input_rejected() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 1, 2);
        assert!(matches!(bilstm_encode(&[], &enc, &store), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 2, 2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let out = bilstm_encode(&[Tensor::vector(vec![1.0, 2.0]).unwrap()], &enc, &store).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn directions_mirror_under_reversal() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 1, 2);
        let layer = enc.layers[0];
        // Same weights in both directions.
        let fw = store.value(layer.fwd.w).clone();
        let fb = store.value(layer.fwd.b).clone();
        store.get_mut(layer.bwd.w).value = fw;
        store.get_mut(layer.bwd.b).value = fb;

        let a = Tensor::vector(vec![0.5, -1.0]).unwrap();
        let b = Tensor::vector(vec![-0.3, 0.8]).unwrap();
        let mut tape = Tape::inference(&store);
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let (f_ab, _) = layer.directions(&mut tape, &[va, vb]).unwrap();
        let (_, b_ba) = layer.directions(&mut tape, &[vb, va]).unwrap();
        assert_eq!(tape.value(f_ab[0]), tape.value(b_ba[1]));
        assert_eq!(tape.value(f_ab[1]), tape.value(b_ba[0]));
    }

    #[test]
    fn encoder_matches_manual_composition() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 1, 2);
        let frames: Vec<Tensor> = [[0.1, 0.2], [-0.5, 0.4], [0.9, -0.3]]
            .iter()
            .map(|f| Tensor::vector(f.to_vec()).unwrap())
            .collect();
        let out = bilstm_encode(&frames, &enc, &store).unwrap();

        let layer = enc.layers[0];
        let mut fwd = Vec::new();
        let mut st = LstmState::zeros(2);
        for f in &frames {
            st = lstm_cell_step(f, &st, &layer.fwd, &store).unwrap();
            fwd.push(st.hidden.clone());
        }
        let mut bwd = vec![Tensor::zeros(&[2]); 3];
        let mut st = LstmState::zeros(2);
        for t in (0..3).rev() {
            st = lstm_cell_step(&frames[t], &st, &layer.bwd, &store).unwrap();
            bwd[t] = st.hidden.clone();
        }
        for t in 0..3 {
            let both: Vec<f64> = fwd[t].data().iter().chain(bwd[t].data()).copied().collect();
            let z = crate::tensor::linear(
                store.value(layer.proj_w),
                store.value(layer.proj_b),
                &Tensor::vector(both).unwrap(),
            )
            .unwrap();
            let expect: Vec<f64> = z.data().iter().map(|v| v.tanh()).collect();
            assert_eq!(out[t].data(), expect.as_slice());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            "enc",
            EncoderConfig {
                input_dim: 2,
                layers: 2,
                units: 3,
                proj: 3,
            },
            5,
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            // Spread weights out so the check sees non-trivial curvature.
            let p = store.get_mut(id);
            let v: Vec<f64> = p.value.data().iter().map(|x| x * 5.0 + 0.01).collect();
            p.value.assign(&v).unwrap();
        }
        let frames: Vec<Tensor> = (0..4)
            .map(|t| Tensor::vector(vec![0.3 * t as f64 - 0.4, 0.5 - 0.2 * t as f64]).unwrap())
            .collect();
        let ids: Vec<_> = store.ids().collect();
        let reports = check_params(&store, &ids, GRAD_EPSILON, |tape| {
            let inputs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let out = enc.forward(tape, &inputs)?;
            let stacked = tape.stack_rows(&out)?;
            let ls = tape.log_softmax(stacked);
            let r = tape.row(ls, 2)?;
            let a = tape.pick(r, 1)?;
            let r0 = tape.row(stacked, 0)?;
            let b = tape.pick(r0, 0)?;
            tape.weighted_sum(&[(a, 1.0), (b, 0.5)])
        })
        .unwrap();
        for r in reports {
            assert!(r.passed(GRAD_TOLERANCE), "{}: {}", r.name, r.rel_error);
        }
    }

    proptest::proptest! {
        #[test]
        fn output_length_equals_input_length(t in 1usize..7) {
            let mut store = ParamStore::new();
            let enc = encoder(&mut store, 2, 2);
            let frames = vec![Tensor::vector(vec![0.1, 0.2]).unwrap(); t];
            proptest::prop_assert_eq!(bilstm_encode(&frames, &enc, &store).unwrap().len(), t);
        }

        #[test]
        fn hidden_stays_in_open_unit_interval(xs in proptest::collection::vec(-5.0f64..5.0, 2), seed in 0u64..50) {
            let mut store = ParamStore::new();
            let p = LstmParams::new(&mut store, "c", 2, 3, 1.0, seed).unwrap();
            let out = lstm_cell_step(&Tensor::vector(xs).unwrap(), &LstmState::zeros(3), &p, &store).unwrap();
            proptest::prop_assert!(out.hidden.data().iter().all(|h| h.abs() < 1.0));
        }
    }
}
