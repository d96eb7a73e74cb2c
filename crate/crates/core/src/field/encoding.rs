//! Sinusoidal positional encoding.

use std::f64::consts::PI;

/// `[sin(2^k π x_c), cos(2^k π x_c)]` for every component `c` and frequency
/// `k < num_frequencies`, component-major. Output length is
/// `x.len() * 2 * num_frequencies`.
pub fn positional_encoding(x: &[f64], num_frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 2 * num_frequencies);
    encode_into(x, num_frequencies, &mut out);
    out
}

pub fn encode_into(x: &[f64], num_frequencies: usize, out: &mut Vec<f64>) {
    for &c in x {
        let mut f = PI;
        for _ in 0..num_frequencies {
            let (s, co) = (f * c).sin_cos();
            out.push(s);
            out.push(co);
            f *= 2.0;
        }
    }
}
