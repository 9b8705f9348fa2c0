//! The 8-16-16-2 Q-network: tanh hidden layers, linear output.
//!
//! Parameters live in one flat array so the optimizer and checkpointing can
//! treat them uniformly. The layout is fixed:
//!
//! | block | shape       | flat range  |
//! |-------|-------------|-------------|
//! | `W1`  | 8 x 16      | `0..128`    |
//! | `b1`  | 16          | `128..144`  |
//! | `W2`  | 16 x 16     | `144..400`  |
//! | `b2`  | 16          | `400..416`  |
//! | `W3`  | 16 x 2      | `416..448`  |
//! | `b3`  | 2           | `448..450`  |
//!
//! Weight matrices are row-major with the input unit as the row, so
//! `W1[i][j]` (input `i` to hidden unit `j`) sits at `i * 16 + j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::OBS_DIM;
use crate::error::NetError;

pub const INPUT: usize = OBS_DIM;
pub const HIDDEN: usize = 16;
pub const OUTPUT: usize = 2;

pub const W1: usize = 0;
pub const B1: usize = W1 + INPUT * HIDDEN;
pub const W2: usize = B1 + HIDDEN;
pub const B2: usize = W2 + HIDDEN * HIDDEN;
pub const W3: usize = B2 + HIDDEN;
pub const B3: usize = W3 + HIDDEN * OUTPUT;
pub const PARAM_COUNT: usize = B3 + OUTPUT;

/// Flat parameter vector (or a gradient of the same shape).
#[derive(Clone, PartialEq)]
pub struct MlpParams(pub Box<[f64; PARAM_COUNT]>);

impl std::fmt::Debug for MlpParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MlpParams([{} values])", PARAM_COUNT)
    }
}

impl Default for MlpParams {
    fn default() -> Self {
        Self::zeros()
    }
}

/// Hidden activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct Activations {
    pub h1: [f64; HIDDEN],
    pub h2: [f64; HIDDEN],
    pub q: [f64; OUTPUT],
}

impl MlpParams {
    pub fn zeros() -> Self {
        MlpParams(Box::new([0.0; PARAM_COUNT]))
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        for (start, fan_in, fan_out) in [(W1, INPUT, HIDDEN), (W2, HIDDEN, HIDDEN), (W3, HIDDEN, OUTPUT)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut p.0[start..start + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0[..]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0[..]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(NetError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn forward(&self, x: &[f64; INPUT]) -> [f64; OUTPUT] {
        self.forward_full(x).q
    }

    /// Like [`forward`](Self::forward) but refuses non-finite parameters.
    pub fn try_forward(&self, x: &[f64; INPUT]) -> Result<[f64; OUTPUT], NetError> {
        self.check_finite()?;
        Ok(self.forward(x))
    }

    pub fn forward_full(&self, x: &[f64; INPUT]) -> Activations {
        let p = &self.0;
        let mut h1 = [0.0; HIDDEN];
        h1.copy_from_slice(&p[B1..B1 + HIDDEN]);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &p[W1 + i * HIDDEN..W1 + (i + 1) * HIDDEN];
            for (h, &w) in h1.iter_mut().zip(row) {
                *h += xi * w;
            }
        }
        h1.iter_mut().for_each(|h| *h = h.tanh());

        let mut h2 = [0.0; HIDDEN];
        h2.copy_from_slice(&p[B2..B2 + HIDDEN]);
        for (i, &hi) in h1.iter().enumerate() {
            let row = &p[W2 + i * HIDDEN..W2 + (i + 1) * HIDDEN];
            for (h, &w) in h2.iter_mut().zip(row) {
                *h += hi * w;
            }
        }
        h2.iter_mut().for_each(|h| *h = h.tanh());

        let mut q = [p[B3], p[B3 + 1]];
        for (i, &hi) in h2.iter().enumerate() {
            q[0] += hi * p[W3 + i * OUTPUT];
            q[1] += hi * p[W3 + i * OUTPUT + 1];
        }
        Activations { h1, h2, q }
    }

    /// Add `d(out_grad . q)/d(params)` into `grad`, given the activations of `x`.
    pub fn accumulate_gradient(
        &self,
        x: &[f64; INPUT],
        act: &Activations,
        out_grad: [f64; OUTPUT],
        grad: &mut MlpParams,
    ) {
        let p = &self.0;
        let g = &mut grad.0;

        g[B3] += out_grad[0];
        g[B3 + 1] += out_grad[1];
        let mut dz2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            g[W3 + i * OUTPUT] += act.h2[i] * out_grad[0];
            g[W3 + i * OUTPUT + 1] += act.h2[i] * out_grad[1];
            let dh = p[W3 + i * OUTPUT] * out_grad[0] + p[W3 + i * OUTPUT + 1] * out_grad[1];
            dz2[i] = dh * (1.0 - act.h2[i] * act.h2[i]);
        }

        let mut dz1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = W2 + i * HIDDEN;
            let mut dh = 0.0;
            for j in 0..HIDDEN {
                g[row + j] += act.h1[i] * dz2[j];
                dh += p[row + j] * dz2[j];
            }
            dz1[i] = dh * (1.0 - act.h1[i] * act.h1[i]);
        }
        for j in 0..HIDDEN {
            g[B2 + j] += dz2[j];
            g[B1 + j] += dz1[j];
        }

        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = W1 + i * HIDDEN;
            for j in 0..HIDDEN {
                g[row + j] += xi * dz1[j];
            }
        }
    }

    /// Gradient of `is_weight * td_error^2 / 2` where `td_error = q[action] - target`
    /// and the target is held constant.
    pub fn backward(&self, x: &[f64; INPUT], action: usize, td_error: f64, is_weight: f64) -> MlpParams {
        assert!(action < OUTPUT, "action index {action} out of range");
        let act = self.forward_full(x);
        let mut out_grad = [0.0; OUTPUT];
        out_grad[action] = is_weight * td_error;
        let mut grad = MlpParams::zeros();
        self.accumulate_gradient(x, &act, out_grad, &mut grad);
        grad
    }

    /// Little-endian f64 bytes in flat layout order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        if bytes.len() != PARAM_COUNT * 8 {
            return Err(NetError::Length { expected: PARAM_COUNT * 8, found: bytes.len() });
        }
        let mut p = Self::zeros();
        for (dst, chunk) in p.0.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(p)
    }

    /// Stable 64-bit FNV-1a fingerprint of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.0.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState { config, m: MlpParams::zeros(), v: MlpParams::zeros(), step: 0 }
    }
}

/// One bias-corrected Adam step, applied in place.
pub fn apply_update(params: &mut MlpParams, opt: &mut OptimizerState, gradient: &MlpParams) {
    let c = &opt.config;
    let scale = match c.clip_norm {
        Some(max) => {
            let norm = gradient.0.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max { max / norm } else { 1.0 }
        }
        None => 1.0,
    };
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..PARAM_COUNT {
        let g = gradient.0[i] * scale;
        let m = c.beta1 * opt.m.0[i] + (1.0 - c.beta1) * g;
        let v = c.beta2 * opt.v.0[i] + (1.0 - c.beta2) * g * g;
        opt.m.0[i] = m;
        opt.v.0[i] = v;
        params.0[i] -= c.learning_rate * (m / bc1) / ((v / bc2).sqrt() + c.epsilon);
    }
}

/// Online network plus the target snapshot used for bootstrapping.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetworkPair {
    pub online: MlpParams,
    pub target: MlpParams,
}

impl QNetworkPair {
    pub fn new(online: MlpParams) -> Self {
        QNetworkPair { target: online.clone(), online }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(MlpParams::init(rng))
    }

    pub fn sync_target(&mut self) {
        self.target.0.copy_from_slice(&self.online.0[..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic parameters reproducible outside Rust:
    /// `p[k] = 0.5 * sin(0.37 * k + 0.1)`.
    fn formula_params() -> MlpParams {
        let mut p = MlpParams::zeros();
        for (k, v) in p.0.iter_mut().enumerate() {
            *v = 0.5 * (0.37 * k as f64 + 0.1).sin();
        }
        p
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 8 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(PARAM_COUNT, 450);
    }

    #[test]
    fn zero_params_give_zero_q() {
        let p = MlpParams::zeros();
        assert_eq!(p.forward(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]), [0.0, 0.0]);
    }

    #[test]
    fn output_bias_passthrough() {
        let mut p = MlpParams::zeros();
        p.0[B3] = 1.0;
        p.0[B3 + 1] = -1.0;
        assert_eq!(p.forward(&[0.3, -2.0, 1.0, 0.0, 5.0, 0.0, 0.0, 1.0]), [1.0, -1.0]);
    }

    #[test]
    fn forward_matches_numpy_oracle() {
        // Frozen from an independent numpy evaluation of
        // W3.T @ tanh(W2.T @ tanh(W1.T @ x + b1) + b2) + b3 with the formula parameters.
        let p = formula_params();
        let cases: [([f64; 8], [f64; 2]); 3] = [
            ([1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0], [0.5327741476945329, 0.24119100660636358]),
            ([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], [0.6059663458428035, 0.27869589513280524]),
            ([0.25, -0.5, 1.5, 0.0, -1.0, 2.0, 0.75, 0.1], [0.6028389844042732, 0.27934356083273315]),
        ];
        for (x, expected) in cases {
            let q = p.forward(&x);
            for k in 0..2 {
                let rel = (q[k] - expected[k]).abs() / expected[k].abs().max(1e-300);
                assert!(rel < 1e-12, "q={q:?} expected={expected:?}");
            }
        }
    }

    #[test]
    fn non_finite_is_a_fault() {
        let mut p = MlpParams::zeros();
        p.0[W2 + 3] = f64::NAN;
        assert!(matches!(p.try_forward(&[0.0; 8]), Err(NetError::NonFinite { index }) if index == W2 + 3));
    }

    #[test]
    fn hidden_activations_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = MlpParams::init(&mut rng);
            let x: [f64; 8] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            let a = p.forward_full(&x);
            assert!(a.h1.iter().chain(a.h2.iter()).all(|h| h.abs() < 1.0));
        }
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MlpParams::init(&mut rng);
        assert!(p.0[W1..B1].iter().all(|w| w.abs() < 1.0 / 8f64.sqrt()));
        assert!(p.0[W2..B2].iter().all(|w| w.abs() < 0.25));
        assert!(p.0[B1..W2].iter().all(|&b| b == 0.0));
        assert!(p.0[B2..W3].iter().all(|&b| b == 0.0));
        assert!(p.0[B3..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_td_error_zero_gradient() {
        let p = formula_params();
        let g = p.backward(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 1, 0.0, 0.7);
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_in_is_weight() {
        let p = formula_params();
        let x = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let g1 = p.backward(&x, 0, 0.8, 0.5);
        let g2 = p.backward(&x, 0, 0.8, 1.0);
        for (a, b) in g1.0.iter().zip(g2.0.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = formula_params();
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.m.0[0] = 0.5;
        opt.v.0[0] = 0.25;
        apply_update(&mut p, &mut opt, &MlpParams::zeros());
        // m decayed but nonzero, so the parameter moves by the leftover momentum
        assert_eq!(opt.m.0[0], 0.45);
        assert_eq!(opt.v.0[0], 0.25 * 0.999);
        assert_eq!(opt.step, 1);
        assert_eq!(&p.0[1..], &before.0[1..]);
    }

    #[test]
    fn adam_three_steps_match_hand_recurrence() {
        // Frozen by evaluating the bias-corrected recurrence by hand (python floats)
        // for w0 = 0.5, lr = 0.1, gradients 1.0, -2.0, 0.5.
        let mut p = MlpParams::zeros();
        p.0[0] = 0.5;
        let mut opt = OptimizerState::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() });
        let expected = [0.400000001, 0.43661035347207483, 0.45027941967382146];
        for (g, want) in [1.0, -2.0, 0.5].into_iter().zip(expected) {
            let mut grad = MlpParams::zeros();
            grad.0[0] = g;
            apply_update(&mut p, &mut opt, &grad);
            assert!((p.0[0] - want).abs() < 1e-12, "{} vs {}", p.0[0], want);
        }
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = MlpParams::zeros();
        p.0[0] = 1.0;
        let mut opt = OptimizerState::new(AdamConfig::default());
        for _ in 0..10_000 {
            let mut grad = MlpParams::zeros();
            grad.0[0] = 2.0 * p.0[0];
            apply_update(&mut p, &mut opt, &grad);
        }
        assert!(p.0[0].abs() < 1e-3, "w = {}", p.0[0]);
    }

    #[test]
    fn clip_norm_bounds_step_input() {
        let mut a = formula_params();
        let mut b = a.clone();
        let mut grad = MlpParams::zeros();
        grad.0[5] = 100.0;
        let mut oa = OptimizerState::new(AdamConfig { clip_norm: Some(1.0), ..AdamConfig::default() });
        apply_update(&mut a, &mut oa, &grad);
        assert!((oa.m.0[5] - 0.1).abs() < 1e-15);
        let mut ob = OptimizerState::new(AdamConfig::default());
        apply_update(&mut b, &mut ob, &grad);
        assert!((ob.m.0[5] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn sync_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = QNetworkPair::init(&mut rng);
        pair.online.0[7] += 0.25;
        assert_ne!(pair.online, pair.target);
        pair.sync_target();
        assert_eq!(pair.online, pair.target);
        let x = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(pair.online.forward(&x), pair.target.forward(&x));
        let snapshot = pair.clone();
        pair.sync_target();
        assert_eq!(pair, snapshot);
        pair.online.0[0] = 9.0;
        assert_eq!(pair.target, snapshot.target);
    }

    #[test]
    fn byte_round_trip() {
        let p = formula_params();
        let bytes = p.to_le_bytes();
        assert_eq!(bytes.len(), 3600);
        assert_eq!(&bytes[..8], &p.0[0].to_le_bytes());
        assert_eq!(MlpParams::from_le_bytes(&bytes).unwrap(), p);
        assert!(MlpParams::from_le_bytes(&bytes[1..]).is_err());
    }
}
