//! Recurrent heads over the 32-wide feature sequence: a 19-neuron NCP with
//! liquid-time-constant dynamics on sparse wiring, and a 19-unit LSTM.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feature width feeding the heads (the encoder latent).
pub const SENSORY: usize = 32;
pub const INTER: usize = 12;
pub const COMMAND: usize = 6;
pub const MOTOR: usize = 1;
/// Non-sensory neurons; state vectors are this wide.
pub const NEURONS: usize = INTER + COMMAND + MOTOR;
/// State layout is [inter, command, motor]; the motor potential is the
/// steering output.
pub const MOTOR_IDX: usize = INTER + COMMAND;

/// Integration defaults: one frame interval split into six fused steps.
pub const LTC_DT: f64 = 1.0;
pub const LTC_UNFOLDS: usize = 6;

/// Sparse connectivity targets for `build_ncp_wiring`.
#[derive(Debug, Clone, Copy)]
pub struct Fanouts {
    /// Outgoing synapses per sensory input into the inter layer.
    pub sensory_fanout: usize,
    /// Incoming inter synapses per command neuron.
    pub inter_fanin: usize,
    /// Recurrent synapses per command neuron within the command layer.
    pub command_fanout: usize,
    /// Incoming command synapses for the motor neuron.
    pub motor_fanin: usize,
}

impl Default for Fanouts {
    fn default() -> Self {
        Fanouts { sensory_fanout: 4, inter_fanin: 4, command_fanout: 2, motor_fanin: 6 }
    }
}

/// Directed synapse lists. Sensory edges run from input index to neuron;
/// recurrent edges connect neurons (inter -> command -> motor plus the
/// command-layer recurrence). No edge targets a sensory node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NcpWiring {
    pub sensory: Vec<(usize, usize, i8)>,
    pub recurrent: Vec<(usize, usize, i8)>,
}

impl NcpWiring {
    /// Dense 0/1 masks and polarity matrices: sensory [32,19] and
    /// recurrent [19,19], row = source, column = target.
    pub fn masks<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let mut smask = Tensor::zeros(&[SENSORY, NEURONS]);
        let mut spol = Tensor::zeros(&[SENSORY, NEURONS]);
        for &(s, t, p) in &self.sensory {
            smask.data_mut()[s * NEURONS + t] = T::one();
            spol.data_mut()[s * NEURONS + t] = T::from_f64(p as f64);
        }
        let mut rmask = Tensor::zeros(&[NEURONS, NEURONS]);
        let mut rpol = Tensor::zeros(&[NEURONS, NEURONS]);
        for &(s, t, p) in &self.recurrent {
            rmask.data_mut()[s * NEURONS + t] = T::one();
            rpol.data_mut()[s * NEURONS + t] = T::from_f64(p as f64);
        }
        (smask, spol, rmask, rpol)
    }

    /// True when a directed path exists from sensory input `s` to the
    /// motor neuron.
    pub fn reaches_motor(&self, s: usize) -> bool {
        let starts: Vec<usize> =
            self.sensory.iter().filter(|e| e.0 == s).map(|e| e.1).collect();
        let mut seen = [false; NEURONS];
        let mut queue = starts;
        while let Some(n) = queue.pop() {
            if n == MOTOR_IDX {
                return true;
            }
            if seen[n] {
                continue;
            }
            seen[n] = true;
            for &(src, dst, _) in &self.recurrent {
                if src == n && !seen[dst] {
                    queue.push(dst);
                }
            }
        }
        false
    }
}

/// Layered sparse wiring, deterministic in `seed`. Targets left unreached
/// by the fan-out draws are repaired with one extra synapse so the full
/// sensory-to-motor pathway always exists.
pub fn build_ncp_wiring(seed: u64, f: &Fanouts) -> Result<NcpWiring> {
    if f.sensory_fanout == 0 || f.sensory_fanout > INTER {
        return Err(Error::config(format!("sensory fanout must be in 1..={INTER}")));
    }
    if f.inter_fanin == 0 || f.inter_fanin > INTER {
        return Err(Error::config(format!("inter fan-in must be in 1..={INTER}")));
    }
    if f.command_fanout == 0 || f.command_fanout > COMMAND {
        return Err(Error::config(format!("command fanout must be in 1..={COMMAND}")));
    }
    if f.motor_fanin == 0 || f.motor_fanin > COMMAND {
        return Err(Error::config(format!("motor fan-in must be in 1..={COMMAND}")));
    }
    let mut rng = Rng::new(seed);
    let polarity = |rng: &mut Rng| -> i8 { if rng.below(2) == 0 { 1 } else { -1 } };

    let mut sensory = Vec::new();
    let mut inter_reached = [false; INTER];
    for s in 0..SENSORY {
        for t in rng.choose_distinct(INTER, f.sensory_fanout) {
            inter_reached[t] = true;
            let p = polarity(&mut rng);
            sensory.push((s, t, p));
        }
    }
    for (t, reached) in inter_reached.into_iter().enumerate() {
        if !reached {
            let s = rng.below(SENSORY);
            let p = polarity(&mut rng);
            sensory.push((s, t, p));
        }
    }

    let mut recurrent = Vec::new();
    let mut inter_out = [false; INTER];
    for c in 0..COMMAND {
        for src in rng.choose_distinct(INTER, f.inter_fanin) {
            inter_out[src] = true;
            let p = polarity(&mut rng);
            recurrent.push((src, INTER + c, p));
        }
    }
    for (src, has_out) in inter_out.into_iter().enumerate() {
        if !has_out {
            let c = rng.below(COMMAND);
            let p = polarity(&mut rng);
            recurrent.push((src, INTER + c, p));
        }
    }
    for c in 0..COMMAND {
        for t in rng.choose_distinct(COMMAND, f.command_fanout) {
            let p = polarity(&mut rng);
            recurrent.push((INTER + c, INTER + t, p));
        }
    }
    for src in rng.choose_distinct(COMMAND, f.motor_fanin) {
        let p = polarity(&mut rng);
        recurrent.push((INTER + src, MOTOR_IDX, p));
    }
    Ok(NcpWiring { sensory, recurrent })
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// LTC parameters over the wiring. Conductances, shapes, capacitances, and
/// reversal magnitudes live in softplus storage so positivity is
/// structural; reversal signs come from the (constant) polarity matrices.
pub fn init_ncp<T: Scalar>(ps: &mut ParamSet<T>, wiring: &NcpWiring, rng: &mut Rng) {
    let (smask, spol, rmask, rpol) = wiring.masks::<T>();
    let init_block = |ps: &mut ParamSet<T>, tag: &str, p: usize, rng: &mut Rng| {
        // Presynaptic potentials here are zero-centered (latent features
        // and resting states), so the activation midpoints straddle zero
        // and the slopes stay moderate; steep synapses centered well into
        // positive territory start saturated-off and train glacially.
        let gamma = Tensor::from_vec(
            &[p, NEURONS],
            (0..p * NEURONS).map(|_| T::from_f64(softplus_inv(rng.range(1.0, 3.0)))).collect(),
        )
        .unwrap();
        let mu = Tensor::rand_uniform(&[p, NEURONS], -0.4, 0.4, rng);
        let w = Tensor::from_vec(
            &[p, NEURONS],
            (0..p * NEURONS).map(|_| T::from_f64(softplus_inv(rng.range(0.3, 1.0)))).collect(),
        )
        .unwrap();
        let e = Tensor::full(&[p, NEURONS], T::from_f64(softplus_inv(1.0)));
        ps.insert(format!("ncp.{tag}.gamma"), gamma);
        ps.insert(format!("ncp.{tag}.mu"), mu);
        ps.insert(format!("ncp.{tag}.w"), w);
        ps.insert(format!("ncp.{tag}.e"), e);
    };
    init_block(ps, "sens", SENSORY, rng);
    init_block(ps, "rec", NEURONS, rng);
    ps.insert(
        "ncp.cm",
        Tensor::from_vec(
            &[NEURONS],
            (0..NEURONS).map(|_| T::from_f64(softplus_inv(rng.range(0.4, 0.6)))).collect(),
        )
        .unwrap(),
    );
    ps.insert("ncp.gleak", Tensor::full(&[NEURONS], T::from_f64(softplus_inv(1.0))));
    ps.insert("ncp.vleak", Tensor::zeros(&[NEURONS]));
    ps.insert("stats.ncp.smask", smask);
    ps.insert("stats.ncp.spol", spol);
    ps.insert("stats.ncp.rmask", rmask);
    ps.insert("stats.ncp.rpol", rpol);
}

/// Per-step synaptic scale vectors, built once and reused across steps.
struct SynScales {
    gamma: Var,
    mu: Var,
    num: Var,
    den: Var,
}

fn syn_scales<T: Scalar>(tape: &mut Tape<T>, bp: &BoundParams, tag: &str) -> SynScales {
    let w_raw = bp.var(&format!("ncp.{tag}.w"));
    let e_raw = bp.var(&format!("ncp.{tag}.e"));
    let mask = bp.var(&format!("stats.ncp.{}mask", &tag[..1]));
    let pol = bp.var(&format!("stats.ncp.{}pol", &tag[..1]));
    let w = tape.softplus(w_raw);
    let w = tape.mul(w, mask);
    let e_mag = tape.softplus(e_raw);
    let e = tape.mul(e_mag, pol);
    SynScales {
        gamma: {
            let g = bp.var(&format!("ncp.{tag}.gamma"));
            tape.softplus(g)
        },
        mu: bp.var(&format!("ncp.{tag}.mu")),
        num: tape.mul(w, e),
        den: w,
    }
}

/// One LTC step: the fused semi-implicit update applied `unfolds` times
/// with delta = dt / unfolds. Returns the new state and the motor output.
///
///   v <- (cm/delta * v + gleak*vleak + num_syn) / (cm/delta + gleak + den_syn)
///
/// Every term in the denominator is positive by construction, and the
/// update is a convex combination of v, vleak, and the reversal
/// potentials, which is what keeps the state inside their hull.
pub fn ltc_step<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    v: Var,
    x: Var,
    dt: f64,
    unfolds: usize,
) -> (Var, Var) {
    assert!(dt > 0.0 && unfolds > 0, "ltc_step: dt and unfolds must be positive");
    let delta = dt / unfolds as f64;

    let sens = syn_scales(tape, bp, "sens");
    let rec = syn_scales(tape, bp, "rec");

    // Sensory activations depend only on the (fixed) input this step.
    let s_sens = tape.syn_act(x, sens.gamma, sens.mu);
    let num_s = tape.syn_reduce(s_sens, sens.num);
    let den_s = tape.syn_reduce(s_sens, sens.den);

    let cm_raw = bp.var("ncp.cm");
    let gleak_raw = bp.var("ncp.gleak");
    let vleak = bp.var("ncp.vleak");
    let cm = tape.softplus(cm_raw);
    let gleak = tape.softplus(gleak_raw);
    let cm_dt = tape.scale(cm, 1.0 / delta);
    let num_leak = tape.mul(gleak, vleak);
    let den_fixed = tape.add(cm_dt, gleak);

    let mut v = v;
    for _ in 0..unfolds {
        let s_rec = tape.syn_act(v, rec.gamma, rec.mu);
        let num_r = tape.syn_reduce(s_rec, rec.num);
        let den_r = tape.syn_reduce(s_rec, rec.den);
        let vn = tape.row_mul(v, cm_dt);
        let vn = tape.add(vn, num_s);
        let vn = tape.add(vn, num_r);
        let num = tape.row_add(vn, num_leak);
        let dn = tape.add(den_s, den_r);
        let den = tape.row_add(dn, den_fixed);
        v = tape.div(num, den);
    }
    let y = tape.slice_cols(v, MOTOR_IDX, 1);
    (v, y)
}

/// LSTM of `NEURONS` units plus a scalar steering projection. Gate order
/// in the packed weight matrices is [input, forget, candidate, output];
/// the forget bias starts at +1.
pub fn init_lstm<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut Rng) {
    let gates = 4 * NEURONS;
    let bx = 1.0 / (SENSORY as f64).sqrt();
    let bh = 1.0 / (NEURONS as f64).sqrt();
    ps.insert("lstm.wx", Tensor::rand_uniform(&[SENSORY, gates], -bx, bx, rng));
    ps.insert("lstm.wh", Tensor::rand_uniform(&[NEURONS, gates], -bh, bh, rng));
    let mut b = Tensor::zeros(&[gates]);
    for i in NEURONS..2 * NEURONS {
        b.data_mut()[i] = T::one();
    }
    ps.insert("lstm.b", b);
    ps.insert("lstm.out.w", Tensor::rand_uniform(&[NEURONS, 1], -bh, bh, rng));
    ps.insert("lstm.out.b", Tensor::zeros(&[1]));
}

/// One standard LSTM update; returns ((h', c'), steering).
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    state: (Var, Var),
    x: Var,
) -> ((Var, Var), Var) {
    let (h, c) = state;
    let zx = tape.dense(x, bp.var("lstm.wx"), Some(bp.var("lstm.b")));
    let zh = tape.dense(h, bp.var("lstm.wh"), None);
    let z = tape.add(zx, zh);
    let i_pre = tape.slice_cols(z, 0, NEURONS);
    let f_pre = tape.slice_cols(z, NEURONS, NEURONS);
    let g_pre = tape.slice_cols(z, 2 * NEURONS, NEURONS);
    let o_pre = tape.slice_cols(z, 3 * NEURONS, NEURONS);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o, ct);
    let y = tape.dense(h_new, bp.var("lstm.out.w"), Some(bp.var("lstm.out.b")));
    ((h_new, c_new), y)
}

/// Which recurrent head maps features to steering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Ncp,
    Lstm,
}

/// Zero-initialized state vars for a batch of `n` sequences.
pub fn init_state<T: Scalar>(tape: &mut Tape<T>, head: Head, n: usize) -> Vec<Var> {
    match head {
        Head::Ncp => vec![tape.leaf(Tensor::zeros(&[n, NEURONS]))],
        Head::Lstm => vec![
            tape.leaf(Tensor::zeros(&[n, NEURONS])),
            tape.leaf(Tensor::zeros(&[n, NEURONS])),
        ],
    }
}

/// Advances the selected head one step. `state` layout matches
/// `init_state`; the returned Var is the [N,1] steering output.
pub fn head_step<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    head: Head,
    state: &mut Vec<Var>,
    x: Var,
) -> Var {
    match head {
        Head::Ncp => {
            let (v, y) = ltc_step(tape, bp, state[0], x, LTC_DT, LTC_UNFOLDS);
            state[0] = v;
            y
        }
        Head::Lstm => {
            let ((h, c), y) = lstm_step(tape, bp, (state[0], state[1]), x);
            state[0] = h;
            state[1] = c;
            y
        }
    }
}

/// Runs a single feature sequence [T,32] through the head from a zero
/// state, returning the per-timestep steering values.
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    head: Head,
    features: &Tensor<T>,
) -> Result<Vec<Var>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != SENSORY || shape[0] == 0 {
        return Err(Error::dim(format!("rollout wants a nonempty [T,{SENSORY}] sequence, got {shape:?}")));
    }
    let t_len = shape[0];
    let mut state = init_state(tape, head, 1);
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = Tensor::from_vec(
            &[1, SENSORY],
            features.data()[t * SENSORY..(t + 1) * SENSORY].to_vec(),
        )?;
        let x = tape.leaf(row);
        out.push(head_step(tape, bp, head, &mut state, x));
    }
    Ok(out)
}
