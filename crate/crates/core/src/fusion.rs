//! Language-model fusion inside the decoder.
//!
//! Every variant maps the decoder LSTM output `(s, c)` of the current step
//! plus the LM outputs into three things: the vector fed to the output layer
//! and the hidden and cell states carried into the next LSTM step.
//!
//! | kind        | LM input | projection | carries rewritten | output ReLU |
//! |-------------|----------|------------|-------------------|-------------|
//! | none        | -        | -          | none              | no          |
//! | deep        | hidden   | scalar gate| none              | no          |
//! | cold        | logits   | affine     | none              | yes         |
//! | ccf1        | logits   | tanh       | cell              | no          |
//! | ccf2        | logits   | affine     | cell              | yes         |
//! | ccf3-sum    | logits   | tanh       | hidden and cell   | yes         |
//! | ccf3-affine | logits   | tanh       | hidden and cell   | yes         |

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::tensor::Tensor;

pub const FUSION_PREFIX: &str = "fusion";

/// How cell control fusion 3 merges the gated LM vector into the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellUpdate {
    /// `c + g ⊙ h`
    Sum,
    /// `W₀ [c; g ⊙ h] + b₀`
    Affine,
}

impl FromStr for CellUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CellUpdate::Sum),
            "affine" => Ok(CellUpdate::Affine),
            other => Err(Error::Argument(format!("unknown cell update mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    None,
    Deep,
    Cold,
    Ccf1,
    Ccf2,
    Ccf3(CellUpdate),
}

impl FusionKind {
    pub const ALL: [FusionKind; 7] = [
        FusionKind::None,
        FusionKind::Deep,
        FusionKind::Cold,
        FusionKind::Ccf1,
        FusionKind::Ccf2,
        FusionKind::Ccf3(CellUpdate::Sum),
        FusionKind::Ccf3(CellUpdate::Affine),
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Deep => "deep",
            FusionKind::Cold => "cold",
            FusionKind::Ccf1 => "ccf1",
            FusionKind::Ccf2 => "ccf2",
            FusionKind::Ccf3(CellUpdate::Sum) => "ccf3-sum",
            FusionKind::Ccf3(CellUpdate::Affine) => "ccf3-affine",
        }
    }

    /// Whether the decoder runs an LM alongside itself.
    pub fn uses_lm(self) -> bool {
        self != FusionKind::None
    }

    /// Deep fusion trains only a connector on top of a finished model.
    pub fn is_post_hoc(self) -> bool {
        self == FusionKind::Deep
    }

    pub fn rewrites_cell(self) -> bool {
        matches!(self, FusionKind::Ccf1 | FusionKind::Ccf2 | FusionKind::Ccf3(_))
    }

    pub fn rewrites_hidden(self) -> bool {
        matches!(self, FusionKind::Ccf3(_))
    }

    /// Whether the LM logit projection `h` passes through tanh. `None` when
    /// the variant has no such projection.
    pub fn projection_tanh(self) -> Option<bool> {
        match self {
            FusionKind::None | FusionKind::Deep => None,
            FusionKind::Cold | FusionKind::Ccf2 => Some(false),
            FusionKind::Ccf1 | FusionKind::Ccf3(_) => Some(true),
        }
    }

    /// Whether the output layer applies ReLU to its logits before softmax.
    pub fn output_relu(self) -> bool {
        matches!(self, FusionKind::Cold | FusionKind::Ccf2 | FusionKind::Ccf3(_))
    }

    /// Width of the vector fed to the output layer.
    pub fn inference_dim(self, d: usize, lm_dim: usize) -> usize {
        match self {
            FusionKind::None | FusionKind::Ccf1 | FusionKind::Ccf3(_) => d,
            FusionKind::Deep => d + lm_dim,
            FusionKind::Cold | FusionKind::Ccf2 => 2 * d,
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Argument(format!("unknown fusion kind `{s}`")))
    }
}

/// Weight and bias of one affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, w: &str, b: &str, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        Ok(Affine {
            w: store.add(&format!("{FUSION_PREFIX}.{w}"), &[rows, cols], Init::Uniform(INIT_SCALE), seed)?,
            b: store.add(&format!("{FUSION_PREFIX}.{b}"), &[rows], Init::Zeros, seed)?,
        })
    }

    fn from_store(store: &ParamStore, w: &str, b: &str) -> Result<Self> {
        Ok(Affine {
            w: store.require(&format!("{FUSION_PREFIX}.{w}"))?,
            b: store.require(&format!("{FUSION_PREFIX}.{b}"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(w, b, x)
    }
}

/// Connector parameters of one fusion variant.
///
/// `proj` is `W₁, b₁` (for deep fusion, the gate vector `v, b`); `gate_a` is
/// `W₂, b₂`; `gate_b` is `W₃, b₃`; `state` is `W₄, b₄`; `cell` is `W₀, b₀`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionParams {
    pub kind: FusionKind,
    pub proj: Option<Affine>,
    pub gate_a: Option<Affine>,
    pub gate_b: Option<Affine>,
    pub state: Option<Affine>,
    pub cell: Option<Affine>,
}

impl FusionParams {
    /// Allocates the connector for decoder width `d`, vocabulary `v` and LM
    /// hidden width `lm_dim`.
    pub fn new(store: &mut ParamStore, kind: FusionKind, d: usize, v: usize, lm_dim: usize, seed: u64) -> Result<Self> {
        let mut p = FusionParams::empty(kind);
        match kind {
            FusionKind::None => {}
            FusionKind::Deep => p.proj = Some(Affine::new(store, "v", "b", 1, lm_dim, seed)?),
            _ => {
                p.proj = Some(Affine::new(store, "w1", "b1", d, v, seed)?);
                p.gate_a = Some(Affine::new(store, "w2", "b2", d, 2 * d, seed)?);
            }
        }
        if matches!(kind, FusionKind::Ccf2 | FusionKind::Ccf3(_)) {
            p.gate_b = Some(Affine::new(store, "w3", "b3", d, 2 * d, seed)?);
        }
        if let FusionKind::Ccf3(mode) = kind {
            p.state = Some(Affine::new(store, "w4", "b4", d, 2 * d, seed)?);
            if mode == CellUpdate::Affine {
                p.cell = Some(Affine::new(store, "w0", "b0", d, 2 * d, seed)?);
            }
        }
        Ok(p)
    }

    pub fn from_store(store: &ParamStore, kind: FusionKind) -> Result<Self> {
        let mut p = FusionParams::empty(kind);
        match kind {
            FusionKind::None => {}
            FusionKind::Deep => p.proj = Some(Affine::from_store(store, "v", "b")?),
            _ => {
                p.proj = Some(Affine::from_store(store, "w1", "b1")?);
                p.gate_a = Some(Affine::from_store(store, "w2", "b2")?);
            }
        }
        if matches!(kind, FusionKind::Ccf2 | FusionKind::Ccf3(_)) {
            p.gate_b = Some(Affine::from_store(store, "w3", "b3")?);
        }
        if let FusionKind::Ccf3(mode) = kind {
            p.state = Some(Affine::from_store(store, "w4", "b4")?);
            if mode == CellUpdate::Affine {
                p.cell = Some(Affine::from_store(store, "w0", "b0")?);
            }
        }
        Ok(p)
    }

    fn empty(kind: FusionKind) -> Self {
        FusionParams {
            kind,
            proj: None,
            gate_a: None,
            gate_b: None,
            state: None,
            cell: None,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.proj, self.gate_a, self.gate_b, self.state, self.cell]
            .into_iter()
            .flatten()
            .flat_map(|a| [a.w, a.b])
            .collect()
    }

    fn get(&self, slot: Option<Affine>, what: &str) -> Result<Affine> {
        slot.ok_or_else(|| Error::Argument(format!("{} fusion has no {what} parameters", self.kind)))
    }
}

/// What the LM contributes at one step.
#[derive(Debug, Clone, Copy)]
pub struct LmSide {
    pub logits: Var,
    pub hidden: Var,
}

/// Intermediate values of one fusion step, recorded on request.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateTrace {
    /// The LM vector `h` after projection (for deep fusion, `s_lm`).
    pub projection: Option<Tensor>,
    /// Gate activations by name: `g`, `g_cell` or `g_state`.
    pub gates: Vec<(&'static str, Tensor)>,
    /// Nonlinearities applied, in order.
    pub ops: Vec<&'static str>,
}

impl GateTrace {
    pub fn gate(&self, name: &str) -> Option<&Tensor> {
        self.gates.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Tape-level fusion result.
#[derive(Debug, Clone)]
pub struct TapedFusion {
    pub inference: Var,
    pub carry_hidden: Var,
    pub carry_cell: Var,
    pub trace: Option<GateTrace>,
}

/// Fusion result as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub inference_vec: Tensor,
    pub carry_hidden: Tensor,
    pub carry_cell: Tensor,
    pub gate_trace: Option<GateTrace>,
}

struct Recorder<'t> {
    trace: Option<&'t mut GateTrace>,
}

impl Recorder<'_> {
    fn projection(&mut self, tape: &Tape, v: Var) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.projection = Some(tape.value(v).clone());
        }
    }

    fn gate(&mut self, tape: &Tape, name: &'static str, v: Var) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.gates.push((name, tape.value(v).clone()));
            t.ops.push("sigmoid");
        }
    }

    fn op(&mut self, name: &'static str) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.ops.push(name);
        }
    }
}

/// Applies the fusion variant of `params` on a tape.
///
/// `s` and `c` are this step's decoder LSTM outputs. `lm` may be `None` only
/// for [`FusionKind::None`].
pub fn fuse(
    tape: &mut Tape,
    params: &FusionParams,
    s: Var,
    c: Var,
    lm: Option<LmSide>,
    record: bool,
) -> Result<TapedFusion> {
    let mut trace = record.then(GateTrace::default);
    let mut rec = Recorder {
        trace: trace.as_mut(),
    };
    if tape.shape(s) != tape.shape(c) {
        return Err(Error::shape("fuse", tape.shape(s), tape.shape(c)));
    }
    let kind = params.kind;
    let lm = match (kind, lm) {
        (FusionKind::None, _) => None,
        (_, Some(lm)) => Some(lm),
        (_, None) => return Err(Error::Argument(format!("{kind} fusion needs LM outputs"))),
    };

    let (inference, carry_hidden, carry_cell) = match (kind, lm) {
        (FusionKind::None, _) => (s, s, c),
        (FusionKind::Deep, Some(lm)) => {
            let pre = params.get(params.proj, "gate")?.apply(tape, lm.hidden)?;
            let g = tape.sigmoid(pre);
            rec.projection(tape, lm.hidden);
            rec.gate(tape, "g", g);
            let gated = tape.scale_by(lm.hidden, g)?;
            (tape.concat(&[s, gated])?, s, c)
        }
        (_, Some(lm)) => {
            let mut h = params.get(params.proj, "projection")?.apply(tape, lm.logits)?;
            if kind.projection_tanh() == Some(true) {
                h = tape.tanh(h);
                rec.op("tanh");
            }
            rec.projection(tape, h);
            match kind {
                FusionKind::Cold => {
                    let g = gate(tape, params.get(params.gate_a, "gate")?, s, h)?;
                    rec.gate(tape, "g", g);
                    let gh = tape.mul(g, h)?;
                    (tape.concat(&[s, gh])?, s, c)
                }
                FusionKind::Ccf1 => {
                    let g = gate(tape, params.get(params.gate_a, "cell gate")?, c, h)?;
                    rec.gate(tape, "g_cell", g);
                    let gh = tape.mul(g, h)?;
                    (s, s, tape.add(c, gh)?)
                }
                FusionKind::Ccf2 => {
                    let gc = gate(tape, params.get(params.gate_a, "cell gate")?, c, h)?;
                    rec.gate(tape, "g_cell", gc);
                    let gch = tape.mul(gc, h)?;
                    let cell = tape.add(c, gch)?;
                    let gs = gate(tape, params.get(params.gate_b, "state gate")?, s, h)?;
                    rec.gate(tape, "g_state", gs);
                    let gsh = tape.mul(gs, h)?;
                    (tape.concat(&[s, gsh])?, s, cell)
                }
                FusionKind::Ccf3(mode) => {
                    let gs = gate(tape, params.get(params.gate_a, "state gate")?, s, h)?;
                    rec.gate(tape, "g_state", gs);
                    let gc = gate(tape, params.get(params.gate_b, "cell gate")?, c, h)?;
                    rec.gate(tape, "g_cell", gc);
                    let gsh = tape.mul(gs, h)?;
                    let joined = tape.concat(&[s, gsh])?;
                    let hidden = params.get(params.state, "state")?.apply(tape, joined)?;
                    let gch = tape.mul(gc, h)?;
                    let cell = match mode {
                        CellUpdate::Sum => tape.add(c, gch)?,
                        CellUpdate::Affine => {
                            let joined = tape.concat(&[c, gch])?;
                            params.get(params.cell, "cell update")?.apply(tape, joined)?
                        }
                    };
                    (hidden, hidden, cell)
                }
                FusionKind::None | FusionKind::Deep => unreachable!(),
            }
        }
        (_, None) => unreachable!(),
    };
    Ok(TapedFusion {
        inference,
        carry_hidden,
        carry_cell,
        trace,
    })
}

/// `σ(W [a; h] + b)`.
fn gate(tape: &mut Tape, p: Affine, a: Var, h: Var) -> Result<Var> {
    let x = tape.concat(&[a, h])?;
    let pre = p.apply(tape, x)?;
    Ok(tape.sigmoid(pre))
}

fn fuse_values(
    params: &FusionParams,
    store: &ParamStore,
    s: &Tensor,
    c: &Tensor,
    lm_logits: Option<&Tensor>,
    lm_hidden: Option<&Tensor>,
) -> Result<FusionOutput> {
    let mut tape = Tape::inference(store);
    let sv = tape.constant(s.clone());
    let cv = tape.constant(c.clone());
    let dummy = Tensor::zeros(&[1]);
    let logits = tape.constant(lm_logits.unwrap_or(&dummy).clone());
    let hidden = tape.constant(lm_hidden.unwrap_or(&dummy).clone());
    let out = fuse(&mut tape, params, sv, cv, Some(LmSide { logits, hidden }), true)?;
    Ok(FusionOutput {
        inference_vec: tape.value(out.inference).clone(),
        carry_hidden: tape.value(out.carry_hidden).clone(),
        carry_cell: tape.value(out.carry_cell).clone(),
        gate_trace: out.trace,
    })
}

fn expect_kind(params: &FusionParams, ok: bool, op: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!("{op} given {} fusion parameters", params.kind)))
    }
}

/// Deep fusion: scalar gate on the LM hidden state, carries untouched.
pub fn deep_fuse(s: &Tensor, s_lm: &Tensor, params: &FusionParams, store: &ParamStore) -> Result<FusionOutput> {
    expect_kind(params, params.kind == FusionKind::Deep, "deep_fuse")?;
    let c = Tensor::zeros(s.shape());
    let mut out = fuse_values(params, store, s, &c, None, Some(s_lm))?;
    out.carry_cell = c;
    Ok(out)
}

/// Cold fusion: gated affine LM-logit projection concatenated to `s`.
pub fn cold_fuse(s: &Tensor, l_lm: &Tensor, params: &FusionParams, store: &ParamStore) -> Result<FusionOutput> {
    expect_kind(params, params.kind == FusionKind::Cold, "cold_fuse")?;
    let c = Tensor::zeros(s.shape());
    let mut out = fuse_values(params, store, s, &c, Some(l_lm), None)?;
    out.carry_cell = c;
    Ok(out)
}

/// Cell control fusion 1: gated tanh LM projection added to the cell.
pub fn ccf1_fuse(s: &Tensor, c: &Tensor, l_lm: &Tensor, params: &FusionParams, store: &ParamStore) -> Result<FusionOutput> {
    expect_kind(params, params.kind == FusionKind::Ccf1, "ccf1_fuse")?;
    fuse_values(params, store, s, c, Some(l_lm), None)
}

/// Cell control fusion 2: cold fusion output plus a gated cell update.
pub fn ccf2_fuse(s: &Tensor, c: &Tensor, l_lm: &Tensor, params: &FusionParams, store: &ParamStore) -> Result<FusionOutput> {
    expect_kind(params, params.kind == FusionKind::Ccf2, "ccf2_fuse")?;
    fuse_values(params, store, s, c, Some(l_lm), None)
}

/// Cell control fusion 3: both the hidden state and the cell are rewritten.
pub fn ccf3_fuse(
    s: &Tensor,
    c: &Tensor,
    l_lm: &Tensor,
    params: &FusionParams,
    store: &ParamStore,
    mode: CellUpdate,
) -> Result<FusionOutput> {
    expect_kind(params, params.kind == FusionKind::Ccf3(mode), "ccf3_fuse")?;
    fuse_values(params, store, s, c, Some(l_lm), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    const D: usize = 2;
    const V: usize = 3;

    fn setup(kind: FusionKind, seed: u64) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let p = FusionParams::new(&mut store, kind, D, V, D, seed).unwrap();
        (store, p)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.get_mut(id).value.assign(data).unwrap();
    }

    fn zero_projection(store: &mut ParamStore, p: &FusionParams) {
        let a = p.proj.unwrap();
        set(store, a.w, &vec![0.0; D * V]);
        set(store, a.b, &[0.0; D]);
    }

    fn vals(store: &ParamStore, id: ParamId) -> Vec<f64> {
        store.value(id).data().to_vec()
    }

    /// `W x + b` by hand.
    fn aff(store: &ParamStore, a: Affine, x: &[f64]) -> Vec<f64> {
        let w = vals(store, a.w);
        let b = vals(store, a.b);
        let n = x.len();
        b.iter()
            .enumerate()
            .map(|(i, bi)| bi + (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>())
            .collect()
    }

    fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().chain(b).copied().collect()
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-14, "{a:?} vs {b:?}");
        }
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    const S: [f64; 2] = [0.3, -0.7];
    const C: [f64; 2] = [1.2, -0.4];
    const L: [f64; 3] = [2.0, -1.0, 0.5];

    #[test]
    fn names_round_trip() {
        for k in FusionKind::ALL {
            assert_eq!(k.name().parse::<FusionKind>().unwrap(), k);
        }
        assert_eq!("ccf3_affine".parse::<FusionKind>().unwrap(), FusionKind::Ccf3(CellUpdate::Affine));
        assert!(matches!("ccf4".parse::<FusionKind>(), Err(Error::Argument(_))));
        assert!(matches!("mean".parse::<CellUpdate>(), Err(Error::Argument(_))));
    }

    #[test]
    fn deep_zero_gate_is_half() {
        let (mut store, p) = setup(FusionKind::Deep, 1);
        let a = p.proj.unwrap();
        set(&mut store, a.w, &[0.0, 0.0]);
        let out = deep_fuse(&t(&S), &t(&[0.4, 0.8]), &p, &store).unwrap();
        assert_eq!(out.gate_trace.unwrap().gate("g").unwrap().data(), &[0.5]);
        assert_eq!(out.inference_vec.data(), &[0.3, -0.7, 0.2, 0.4]);
        assert_eq!(out.carry_hidden.data(), &S);
    }

    #[test]
    fn deep_saturated_gate_drops_lm() {
        let (mut store, p) = setup(FusionKind::Deep, 1);
        set(&mut store, p.proj.unwrap().b, &[-60.0]);
        let out = deep_fuse(&t(&S), &t(&[0.4, 0.8]), &p, &store).unwrap();
        close(out.inference_vec.data(), &[0.3, -0.7, 0.0, 0.0]);
    }

    #[test]
    fn deep_matches_hand_arithmetic() {
        let (mut store, p) = setup(FusionKind::Deep, 1);
        let a = p.proj.unwrap();
        set(&mut store, a.w, &[0.5, -1.0]);
        set(&mut store, a.b, &[0.25]);
        let slm = [0.4, 0.8];
        let g = sigmoid(0.5 * 0.4 - 0.8 + 0.25);
        let out = deep_fuse(&t(&S), &t(&slm), &p, &store).unwrap();
        close(out.inference_vec.data(), &[0.3, -0.7, g * 0.4, g * 0.8]);
        assert!(deep_fuse(&t(&S), &t(&[1.0; 3]), &p, &store).is_err());
    }

    #[test]
    fn cold_zero_projection_and_oracle() {
        let (mut store, p) = setup(FusionKind::Cold, 3);
        let out = cold_fuse(&t(&S), &t(&L), &p, &store).unwrap();
        let h = aff(&store, p.proj.unwrap(), &L);
        let g: Vec<f64> = aff(&store, p.gate_a.unwrap(), &cat(&S, &h)).into_iter().map(sigmoid).collect();
        let gh: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a * b).collect();
        close(out.inference_vec.data(), &cat(&S, &gh));
        let trace = out.gate_trace.unwrap();
        assert!(trace.gate("g").unwrap().data().iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(!trace.ops.contains(&"tanh"));

        zero_projection(&mut store, &p);
        let out = cold_fuse(&t(&S), &t(&L), &p, &store).unwrap();
        assert_eq!(out.inference_vec.data(), &[0.3, -0.7, 0.0, 0.0]);
        assert!(cold_fuse(&t(&S), &t(&[1.0; 4]), &p, &store).is_err());
    }

    #[test]
    fn ccf1_oracle_and_reduction() {
        let (mut store, p) = setup(FusionKind::Ccf1, 5);
        let out = ccf1_fuse(&t(&S), &t(&C), &t(&L), &p, &store).unwrap();
        let h: Vec<f64> = aff(&store, p.proj.unwrap(), &L).into_iter().map(f64::tanh).collect();
        let g: Vec<f64> = aff(&store, p.gate_a.unwrap(), &cat(&C, &h)).into_iter().map(sigmoid).collect();
        let cell: Vec<f64> = (0..D).map(|k| C[k] + g[k] * h[k]).collect();
        close(out.carry_cell.data(), &cell);
        assert_eq!(out.inference_vec.data(), &S);
        assert_eq!(out.carry_hidden.data(), &S);
        assert_eq!(out.gate_trace.unwrap().ops, vec!["tanh", "sigmoid"]);

        zero_projection(&mut store, &p);
        let out = ccf1_fuse(&t(&S), &t(&C), &t(&L), &p, &store).unwrap();
        assert_eq!(out.carry_cell.data(), &C);
    }

    #[test]
    fn ccf2_oracle_and_reduction() {
        let (mut store, p) = setup(FusionKind::Ccf2, 7);
        let out = ccf2_fuse(&t(&S), &t(&C), &t(&L), &p, &store).unwrap();
        let h = aff(&store, p.proj.unwrap(), &L);
        let gc: Vec<f64> = aff(&store, p.gate_a.unwrap(), &cat(&C, &h)).into_iter().map(sigmoid).collect();
        let gs: Vec<f64> = aff(&store, p.gate_b.unwrap(), &cat(&S, &h)).into_iter().map(sigmoid).collect();
        close(out.carry_cell.data(), &(0..D).map(|k| C[k] + gc[k] * h[k]).collect::<Vec<_>>());
        close(
            out.inference_vec.data(),
            &cat(&S, &(0..D).map(|k| gs[k] * h[k]).collect::<Vec<_>>()),
        );
        assert_eq!(out.carry_hidden.data(), &S);
        let trace = out.gate_trace.unwrap();
        assert_eq!(trace.gates.len(), 2);
        assert_ne!(trace.gate("g_cell"), trace.gate("g_state"));

        zero_projection(&mut store, &p);
        let out = ccf2_fuse(&t(&S), &t(&C), &t(&L), &p, &store).unwrap();
        assert_eq!(out.carry_cell.data(), &C);
        assert_eq!(out.inference_vec.data(), &[0.3, -0.7, 0.0, 0.0]);
    }

    fn ccf3_oracle(mode: CellUpdate) {
        let (store, p) = setup(FusionKind::Ccf3(mode), 11);
        let out = ccf3_fuse(&t(&S), &t(&C), &t(&L), &p, &store, mode).unwrap();
        let h: Vec<f64> = aff(&store, p.proj.unwrap(), &L).into_iter().map(f64::tanh).collect();
        let gs: Vec<f64> = aff(&store, p.gate_a.unwrap(), &cat(&S, &h)).into_iter().map(sigmoid).collect();
        let gc: Vec<f64> = aff(&store, p.gate_b.unwrap(), &cat(&C, &h)).into_iter().map(sigmoid).collect();
        let gsh: Vec<f64> = (0..D).map(|k| gs[k] * h[k]).collect();
        let gch: Vec<f64> = (0..D).map(|k| gc[k] * h[k]).collect();
        let s2 = aff(&store, p.state.unwrap(), &cat(&S, &gsh));
        let c2 = match mode {
            CellUpdate::Sum => (0..D).map(|k| C[k] + gch[k]).collect(),
            CellUpdate::Affine => aff(&store, p.cell.unwrap(), &cat(&C, &gch)),
        };
        close(out.carry_hidden.data(), &s2);
        close(out.inference_vec.data(), &s2);
        close(out.carry_cell.data(), &c2);
    }

    #[test]
    fn ccf3_sum_matches_oracle() {
        ccf3_oracle(CellUpdate::Sum);
    }

    #[test]
    fn ccf3_affine_matches_oracle() {
        ccf3_oracle(CellUpdate::Affine);
    }

    fn identity_slice(store: &mut ParamStore, a: Affine) {
        set(store, a.w, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        set(store, a.b, &[0.0, 0.0]);
    }

    #[test]
    fn ccf3_identity_reductions() {
        let mode = CellUpdate::Sum;
        let (mut store, p) = setup(FusionKind::Ccf3(mode), 13);
        zero_projection(&mut store, &p);
        identity_slice(&mut store, p.state.unwrap());
        let out = ccf3_fuse(&t(&S), &t(&C), &t(&L), &p, &store, mode).unwrap();
        assert_eq!(out.carry_cell.data(), &C);
        assert_eq!(out.carry_hidden.data(), &S);

        let mode = CellUpdate::Affine;
        let (mut store, p) = setup(FusionKind::Ccf3(mode), 13);
        zero_projection(&mut store, &p);
        identity_slice(&mut store, p.cell.unwrap());
        let out = ccf3_fuse(&t(&S), &t(&C), &t(&L), &p, &store, mode).unwrap();
        assert_eq!(out.carry_cell.data(), &C);
    }

    #[test]
    fn wrong_parameters_rejected() {
        let (store, p) = setup(FusionKind::Ccf1, 1);
        assert!(matches!(ccf2_fuse(&t(&S), &t(&C), &t(&L), &p, &store), Err(Error::Argument(_))));
        assert!(ccf1_fuse(&t(&S), &t(&[1.0; 3]), &t(&L), &p, &store).is_err());
    }

    #[test]
    fn nonlinearity_audit() {
        for kind in FusionKind::ALL.into_iter().filter(|k| !matches!(k, FusionKind::None | FusionKind::Deep)) {
            let (mut store, p) = setup(kind, 17);
            // Large projection weights: tanh keeps h inside (-1, 1), affine does not.
            let a = p.proj.unwrap();
            set(&mut store, a.w, &vec![5.0; D * V]);
            let mut tape = Tape::inference(&store);
            let s = tape.constant(t(&S));
            let c = tape.constant(t(&C));
            let logits = tape.constant(t(&L));
            let out = fuse(&mut tape, &p, s, c, Some(LmSide { logits, hidden: logits }), true).unwrap();
            let trace = out.trace.unwrap();
            let h = trace.projection.unwrap();
            let bounded = h.data().iter().all(|x| x.abs() < 1.0);
            assert_eq!(kind.projection_tanh(), Some(bounded), "{kind}");
            assert_eq!(trace.ops.contains(&"tanh"), bounded, "{kind}");
        }
        assert!(!FusionKind::Ccf1.output_relu());
        assert!(!FusionKind::None.output_relu());
        assert!(!FusionKind::Deep.output_relu());
        assert!(FusionKind::Cold.output_relu() && FusionKind::Ccf2.output_relu());
        assert!(FusionKind::Ccf3(CellUpdate::Sum).output_relu());
    }

    #[test]
    fn carry_contract() {
        for kind in FusionKind::ALL.into_iter().filter(|k| *k != FusionKind::None) {
            let mut store = ParamStore::new();
            let p = FusionParams::new(&mut store, kind, D, V, D, 19).unwrap();
            let mut tape = Tape::inference(&store);
            let s = tape.constant(t(&S));
            let c = tape.constant(t(&C));
            let logits = tape.constant(t(&L));
            let hidden = tape.constant(t(&[0.1, 0.2]));
            let out = fuse(&mut tape, &p, s, c, Some(LmSide { logits, hidden }), true).unwrap();
            let same_h = tape.data(out.carry_hidden) == S;
            let same_c = tape.data(out.carry_cell) == C;
            assert_eq!(same_h, !kind.rewrites_hidden(), "{kind}");
            assert_eq!(same_c, !kind.rewrites_cell(), "{kind}");
            for (_, g) in &out.trace.unwrap().gates {
                assert!(g.data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
            assert_eq!(tape.value(out.inference).len(), kind.inference_dim(D, D));
        }
    }
}
