use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NdError, ParamId, ParamStore, Tape, Var};

/// Gated recurrent unit: reset gate `r`, update gate `z`, candidate `n`,
/// `h' = (1 - z) * n + z * h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruParams {
    pub input: usize,
    pub hidden: usize,
    w_ir: ParamId,
    w_iz: ParamId,
    w_in: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_ir: ParamId,
    b_iz: ParamId,
    b_in: ParamId,
    b_hr: ParamId,
    b_hz: ParamId,
    b_hn: ParamId,
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = |name: &str, rows: usize| store.uniform(format!("{prefix}.{name}"), rows, hidden, bound, rng);
        let w_ir = w("w_ir", input);
        let w_iz = w("w_iz", input);
        let w_in = w("w_in", input);
        let w_hr = w("w_hr", hidden);
        let w_hz = w("w_hz", hidden);
        let w_hn = w("w_hn", hidden);
        let b_ir = w("b_ir", 1);
        let b_iz = w("b_iz", 1);
        let b_in = w("b_in", 1);
        let b_hr = w("b_hr", 1);
        let b_hz = w("b_hz", 1);
        let b_hn = w("b_hn", 1);
        Self { input, hidden, w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn }
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.w_ir, self.w_iz, self.w_in, self.w_hr, self.w_hz, self.w_hn, self.b_ir, self.b_iz, self.b_in,
            self.b_hr, self.b_hz, self.b_hn,
        ]
    }

    pub fn update_gate_bias(&self) -> (ParamId, ParamId) {
        (self.b_iz, self.b_hz)
    }

    /// One recurrent step for a batch of rows: `x: n x input`, `h: n x hidden`.
    pub fn cell(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var, NdError> {
        let xr = tape.linear(x, self.w_ir, self.b_ir)?;
        let hr = tape.linear(h, self.w_hr, self.b_hr)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;

        let xz = tape.linear(x, self.w_iz, self.b_iz)?;
        let hz = tape.linear(h, self.w_hz, self.b_hz)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;

        let xn = tape.linear(x, self.w_in, self.b_in)?;
        let hn = tape.linear(h, self.w_hn, self.b_hn)?;
        let rhn = tape.mul(r, hn)?;
        let n = tape.add(xn, rhn)?;
        let n = tape.tanh(n)?;

        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
