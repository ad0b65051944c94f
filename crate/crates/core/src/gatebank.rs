//! Acceptance gates `g(r)` and their effective weights `w(r) = g'(r)·r`.
//!
//! Three gates map the ratio into a bounded acceptance value (sigmoid,
//! clipped-linear, temperature). Two more reproduce the gradient weights of
//! existing surrogates: `identity_is` (`g(r) = r`, plain importance sampling)
//! and `ppo_clip` (`g(r) = clip(r, 1−ε, 1+ε)`).
//!
//! At the kinks of the piecewise gates (`r = c`, `r = 1 ± ε`) the weight
//! takes the outside value 0, the same convention the autodiff `clip` uses.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{sigmoid, Tape, Var};
use crate::{Error, Result};

/// Lower clamp applied to `ln r` by the temperature gate.
const LOG_FLOOR: f64 = -700.0;

/// Range and resolution of the grids used for suprema of `w` and `|g'|`.
pub const DENSE_GRID_MAX: f64 = 20.0;
pub const DENSE_GRID_POINTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// `σ(k(r − 1))`.
    Sigmoid { k: f64 },
    /// `clip(r, 0, c)`.
    ClippedLinear { c: f64 },
    /// `r^β / (1 + r^β)`, evaluated as `σ(β ln r)`.
    Temperature { beta: f64 },
    /// `g(r) = r`.
    IdentityIs,
    /// `clip(r, 1 − ε, 1 + ε)`.
    PpoClip { eps: f64 },
}

impl Default for Gate {
    fn default() -> Self {
        Gate::Sigmoid { k: 5.0 }
    }
}

impl Gate {
    /// The five gates with their default parameters.
    pub fn defaults() -> [Gate; 5] {
        [
            Gate::Sigmoid { k: 5.0 },
            Gate::ClippedLinear { c: 2.0 },
            Gate::Temperature { beta: 1.0 },
            Gate::IdentityIs,
            Gate::PpoClip { eps: 0.2 },
        ]
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Gate::Sigmoid { .. } => "sigmoid",
            Gate::ClippedLinear { .. } => "clipped_linear",
            Gate::Temperature { .. } => "temperature",
            Gate::IdentityIs => "identity_is",
            Gate::PpoClip { .. } => "ppo_clip",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Gate::Sigmoid { k } => k > 0.0 && k.is_finite(),
            Gate::ClippedLinear { c } => c > 0.0 && c.is_finite(),
            Gate::Temperature { beta } => beta > 0.0 && beta.is_finite(),
            Gate::IdentityIs => true,
            Gate::PpoClip { eps } => eps > 0.0 && eps < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("gate parameters out of range: {self}")))
        }
    }

    fn check_ratio(&self, r: f64) -> Result<()> {
        self.validate()?;
        if r.is_nan() || r < 0.0 {
            return Err(Error::invalid(format!("ratio must be nonnegative, got {r}")));
        }
        Ok(())
    }

    /// `g(r)`.
    pub fn value(&self, r: f64) -> Result<f64> {
        self.check_ratio(r)?;
        Ok(match *self {
            Gate::Sigmoid { k } => sigmoid(k * (r - 1.0)),
            Gate::ClippedLinear { c } => r.min(c),
            Gate::Temperature { beta } => {
                if r == 0.0 {
                    0.0
                } else {
                    sigmoid(beta * r.ln().max(LOG_FLOOR))
                }
            }
            Gate::IdentityIs => r,
            Gate::PpoClip { eps } => r.clamp(1.0 - eps, 1.0 + eps),
        })
    }

    /// `g'(r)`. At `r = 0` the temperature gate reports its one-sided limit.
    pub fn derivative(&self, r: f64) -> Result<f64> {
        self.check_ratio(r)?;
        Ok(match *self {
            Gate::Sigmoid { k } => {
                let s = sigmoid(k * (r - 1.0));
                k * s * (1.0 - s)
            }
            Gate::ClippedLinear { c } => {
                if r < c {
                    1.0
                } else {
                    0.0
                }
            }
            Gate::Temperature { beta } => {
                if r == 0.0 {
                    if beta > 1.0 {
                        0.0
                    } else if beta == 1.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    let g = sigmoid(beta * r.ln().max(LOG_FLOOR));
                    beta * g * (1.0 - g) / r
                }
            }
            Gate::IdentityIs => 1.0,
            Gate::PpoClip { eps } => {
                if (r - 1.0).abs() < eps {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// Effective weight `w(r) = g'(r)·r`.
    pub fn weight(&self, r: f64) -> Result<f64> {
        self.check_ratio(r)?;
        Ok(match *self {
            Gate::Sigmoid { k } => {
                let s = sigmoid(k * (r - 1.0));
                k * s * (1.0 - s) * r
            }
            Gate::ClippedLinear { c } => {
                if r < c {
                    r
                } else {
                    0.0
                }
            }
            Gate::Temperature { beta } => {
                let g = self.value(r)?;
                beta * g * (1.0 - g)
            }
            Gate::IdentityIs => r,
            Gate::PpoClip { eps } => {
                if (r - 1.0).abs() < eps {
                    r
                } else {
                    0.0
                }
            }
        })
    }

    /// Records `g(r)` elementwise on the tape.
    pub fn apply(&self, tape: &mut Tape, r: Var) -> Result<Var> {
        self.validate()?;
        let out = match *self {
            Gate::Sigmoid { k } => {
                let z = tape.offset(r, -1.0)?;
                let z = tape.scale(z, k)?;
                tape.sigmoid(z)?
            }
            Gate::ClippedLinear { c } => tape.clip(r, 0.0, c)?,
            Gate::Temperature { beta } => {
                let l = tape.log(r)?;
                let l = tape.clip(l, LOG_FLOOR, f64::INFINITY)?;
                let l = tape.scale(l, beta)?;
                tape.sigmoid(l)?
            }
            Gate::IdentityIs => r,
            Gate::PpoClip { eps } => tape.clip(r, 1.0 - eps, 1.0 + eps)?,
        };
        Ok(out)
    }

    /// Supremum of `w` over a dense grid on `[0, 20]`.
    pub fn weight_bound(&self) -> Result<f64> {
        dense_sup(|r| self.weight(r))
    }

    /// Supremum of `|g'|` over a dense grid on `[0, 20]`: the Lipschitz constant.
    pub fn lipschitz_bound(&self) -> Result<f64> {
        dense_sup(|r| self.derivative(r).map(f64::abs))
    }
}

fn dense_sup(f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let step = DENSE_GRID_MAX / (DENSE_GRID_POINTS - 1) as f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..DENSE_GRID_POINTS {
        best = best.max(f(i as f64 * step)?);
    }
    Ok(best)
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Gate::Sigmoid { k } => write!(f, "sigmoid:{k}"),
            Gate::ClippedLinear { c } => write!(f, "clipped_linear:{c}"),
            Gate::Temperature { beta } => write!(f, "temperature:{beta}"),
            Gate::IdentityIs => write!(f, "identity_is"),
            Gate::PpoClip { eps } => write!(f, "ppo_clip:{eps}"),
        }
    }
}

/// Parses `kind` or `kind:param`, e.g. `sigmoid:5`, `ppo_clip:0.2`, `identity_is`.
impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => {
                let v: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad gate parameter in `{s}`")))?;
                (k.trim(), Some(v))
            }
            None => (s, None),
        };
        let gate = match kind {
            "sigmoid" => Gate::Sigmoid { k: param.unwrap_or(5.0) },
            "clipped_linear" => Gate::ClippedLinear { c: param.unwrap_or(2.0) },
            "temperature" => Gate::Temperature { beta: param.unwrap_or(1.0) },
            "identity_is" if param.is_none() => Gate::IdentityIs,
            "ppo_clip" => Gate::PpoClip { eps: param.unwrap_or(0.2) },
            _ => return Err(Error::invalid(format!("unknown gate `{s}`"))),
        };
        gate.validate()?;
        Ok(gate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub r: f64,
    pub g: f64,
    pub w: f64,
}

/// `n_points` evenly spaced ratios from `r_min` to `r_max` inclusive.
pub fn gate_grid(gate: &Gate, r_min: f64, r_max: f64, n_points: usize) -> Result<Vec<GridPoint>> {
    if !(r_min >= 0.0 && r_min < r_max && r_max.is_finite()) || n_points < 2 {
        return Err(Error::invalid(format!(
            "grid needs 0 <= r_min < r_max and n >= 2, got [{r_min}, {r_max}] with {n_points}"
        )));
    }
    let step = (r_max - r_min) / (n_points - 1) as f64;
    (0..n_points)
        .map(|i| {
            let r = if i + 1 == n_points { r_max } else { r_min + i as f64 * step };
            Ok(GridPoint { r, g: gate.value(r)?, w: gate.weight(r)? })
        })
        .collect()
}

pub fn write_grid_csv(path: &Path, grid: &[GridPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["r", "g", "w"])?;
    for p in grid {
        w.write_record([p.r.to_string(), p.g.to_string(), p.w.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram of `w(r)` for `r ~ LogNormal(0, σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_samples: usize,
    /// Sample mean and standard deviation of the drawn weights.
    pub mean: f64,
    pub std: f64,
}

pub const HISTOGRAM_BINS: usize = 50;

impl WeightHistogram {
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n_samples as f64).sqrt()
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// Bin edges are fixed per gate: `HISTOGRAM_BINS` equal bins over
/// `[0, sup w]`; draws beyond the last edge fall in the last bin.
pub fn weight_histogram<R: Rng + ?Sized>(
    gate: &Gate,
    sigma_log_r: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<WeightHistogram> {
    if !(sigma_log_r > 0.0 && sigma_log_r.is_finite()) {
        return Err(Error::invalid(format!("sigma_log_r must be positive, got {sigma_log_r}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("weight histogram needs at least one sample"));
    }
    let upper = gate.weight_bound()?;
    let width = upper / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(rng);
        let w = gate.weight((sigma_log_r * z).exp())?;
        let bin = ((w / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
        sum += w;
        sum_sq += w * w;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(WeightHistogram { edges, counts, n_samples, mean, std: var.sqrt() })
}

pub fn write_histogram_csv(path: &Path, hist: &WeightHistogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_left", "bin_right", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record([hist.edges[i].to_string(), hist.edges[i + 1].to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SIG5: Gate = Gate::Sigmoid { k: 5.0 };

    #[test]
    fn center_values() {
        assert_eq!(SIG5.value(1.0).unwrap(), 0.5);
        assert_eq!(SIG5.weight(1.0).unwrap(), 1.25);
        assert_eq!(Gate::ClippedLinear { c: 2.0 }.value(3.0).unwrap(), 2.0);
        assert_eq!(Gate::Temperature { beta: 1.0 }.value(1.0).unwrap(), 0.5);
    }

    #[test]
    fn clipped_linear_hard_exclusion() {
        let g = Gate::ClippedLinear { c: 2.0 };
        assert_eq!(g.weight(1.999).unwrap(), 1.999);
        assert_eq!(g.weight(2.001).unwrap(), 0.0);
        assert_eq!(g.weight(2.0).unwrap(), 0.0);
    }

    #[test]
    fn temperature_weight_bounded_by_quarter_beta() {
        let g = Gate::Temperature { beta: 1.0 };
        let sup = g.weight_bound().unwrap();
        assert!(sup <= 0.25 && sup > 0.2499, "{sup}");
        assert_eq!(g.value(0.0).unwrap(), 0.0);
    }

    #[test]
    fn negative_ratio_and_bad_spec_are_rejected() {
        assert!(SIG5.value(-0.1).is_err());
        assert!(SIG5.weight(f64::NAN).is_err());
        assert!(Gate::Sigmoid { k: 0.0 }.value(1.0).is_err());
        assert!(Gate::PpoClip { eps: 1.0 }.value(1.0).is_err());
        assert!(Gate::ClippedLinear { c: -1.0 }.weight(1.0).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_extreme_ratios() {
        let g = Gate::Sigmoid { k: 50.0 };
        assert_eq!(g.value(1e6).unwrap(), 1.0);
        assert_eq!(g.weight(1e6).unwrap(), 0.0);
        assert!(g.value(0.0).unwrap() > 0.0);
    }

    #[test]
    fn weight_equals_ratio_times_finite_difference_of_gate() {
        let h = 1e-6;
        for gate in Gate::defaults() {
            for i in 1..400 {
                let r = i as f64 * 0.01;
                let kink = match gate {
                    Gate::ClippedLinear { c } => (r - c).abs() < 1e-3,
                    Gate::PpoClip { eps } => ((r - 1.0).abs() - eps).abs() < 1e-3,
                    _ => false,
                };
                if kink {
                    continue;
                }
                let fd = (gate.value(r + h).unwrap() - gate.value(r - h).unwrap()) / (2.0 * h);
                let w = gate.weight(r).unwrap();
                assert!((w - r * fd).abs() <= 1e-5 * w.abs().max(1.0), "{gate} r={r}: {w} vs {}", r * fd);
            }
        }
    }

    #[test]
    fn every_gate_is_monotone() {
        for gate in Gate::defaults().into_iter().chain([Gate::Sigmoid { k: 20.0 }, Gate::Temperature { beta: 0.3 }]) {
            let grid = gate_grid(&gate, 0.0, 10.0, 20_001).unwrap();
            for pair in grid.windows(2) {
                assert!(pair[1].g >= pair[0].g, "{gate} not monotone at {}", pair[1].r);
            }
        }
    }

    #[test]
    fn weights_are_bounded_and_nonnegative() {
        for k in [2.0, 5.0, 20.0] {
            let g = Gate::Sigmoid { k };
            let sup = g.weight_bound().unwrap();
            // k σ(1−σ) ≤ k/4 and the extra factor r stays below 1 + 5/k near the peak
            assert!(sup <= k * (1.0 + 5.0 / k) / 4.0, "k={k} sup={sup}");
            assert!(sup >= k / 4.0);
        }
        let c = Gate::ClippedLinear { c: 2.0 };
        assert!(c.weight_bound().unwrap() <= 2.0);
        for gate in Gate::defaults() {
            for p in gate_grid(&gate, 0.0, 20.0, 5001).unwrap() {
                assert!(p.w >= 0.0);
            }
        }
    }

    #[test]
    fn unified_view_weights() {
        let eps = 0.2;
        for i in 0..300 {
            let r = i as f64 * 0.01;
            assert_eq!(Gate::IdentityIs.weight(r).unwrap(), r);
            let expect = if (r - 1.0).abs() < eps { r } else { 0.0 };
            assert_eq!(Gate::PpoClip { eps }.weight(r).unwrap(), expect);
        }
    }

    #[test]
    fn grid_examples() {
        let grid = gate_grid(&SIG5, 0.0, 2.0, 201).unwrap();
        let center = grid.iter().find(|p| (p.r - 1.0).abs() < 1e-12).unwrap();
        assert_eq!((center.g, center.w), (0.5, 1.25));
        for p in gate_grid(&Gate::IdentityIs, 0.0, 5.0, 11).unwrap() {
            assert_eq!((p.g, p.w), (p.r, p.r));
        }
        let ppo = gate_grid(&Gate::PpoClip { eps: 0.2 }, 0.0, 2.0, 21).unwrap();
        let p = ppo.iter().find(|p| (p.r - 1.3).abs() < 1e-9).unwrap();
        assert_eq!(p.w, 0.0);
        assert!(gate_grid(&SIG5, 1.0, 1.0, 5).is_err());
        assert!(gate_grid(&SIG5, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn gate_round_trips_through_text() {
        for gate in Gate::defaults() {
            assert_eq!(gate.to_string().parse::<Gate>().unwrap(), gate);
        }
        assert_eq!("sigmoid".parse::<Gate>().unwrap(), SIG5);
        assert!("sigmoid:-1".parse::<Gate>().is_err());
        assert!("nope".parse::<Gate>().is_err());
    }

    #[test]
    fn degenerate_ratio_puts_all_mass_at_w_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = weight_histogram(&SIG5, 1e-12, 1000, &mut rng).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let bin = h.counts.iter().position(|&c| c == 1000).unwrap();
        assert!(h.edges[bin] <= 1.25 && 1.25 < h.edges[bin + 1]);
    }

    /// Composite Simpson rule for E[w(e^{σZ})], Z standard normal.
    fn lognormal_expectation(gate: &Gate, sigma: f64) -> f64 {
        let (a, b, n) = (-12.0f64, 12.0f64, 20_000usize);
        let h = (b - a) / n as f64;
        let f = |z: f64| {
            gate.weight((sigma * z).exp()).unwrap() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            let z = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        s * h / 3.0
    }

    #[test]
    fn histogram_mean_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = weight_histogram(&SIG5, 0.35, 100_000, &mut rng).unwrap();
        let exact = lognormal_expectation(&SIG5, 0.35);
        assert!((h.mean - exact).abs() < 3.0 * h.standard_error(), "{} vs {exact}", h.mean);
        assert_eq!(h.counts.iter().sum::<u64>(), 100_000);
    }

    #[test]
    fn narrower_ratio_law_concentrates_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let wide = weight_histogram(&SIG5, 0.35, 50_000, &mut rng).unwrap();
        let narrow = weight_histogram(&SIG5, 0.08, 50_000, &mut rng).unwrap();
        assert!(narrow.variance() < wide.variance());
    }

    #[test]
    fn histogram_rejects_nonpositive_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(weight_histogram(&SIG5, 0.0, 10, &mut rng).is_err());
    }
}
