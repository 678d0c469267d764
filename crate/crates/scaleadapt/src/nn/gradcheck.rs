//! Helpers for checking analytic gradients against central finite
//! differences. Used by unit tests and the acceptance suite.

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor so near-zero pairs do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Deterministic index sample without replacement.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = move || {
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        state.wrapping_mul(0x2545F4914F6CDD1D)
    };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = (next() % len as u64) as usize;
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Default, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{name}[{idx}]: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {:.3e} >= {tol:.0e} at {} ({} entries checked)",
            self.max_rel_err,
            self.worst,
            self.checked
        );
    }
}
