//! One-dimensional laws, Wasserstein distances by quantile coupling, and
//! time-indexed measure flows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finitely supported law on the real line with sorted, distinct atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LawRepr", into = "LawRepr")]
pub struct DiscreteLaw {
    atoms: Vec<f64>,
    probs: Vec<f64>,
    mean: f64,
}

#[derive(Serialize, Deserialize)]
struct LawRepr {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl From<DiscreteLaw> for LawRepr {
    fn from(l: DiscreteLaw) -> Self {
        LawRepr { atoms: l.atoms, probs: l.probs }
    }
}

impl TryFrom<LawRepr> for DiscreteLaw {
    type Error = Error;

    fn try_from(r: LawRepr) -> Result<Self> {
        if r.atoms.len() != r.probs.len() {
            return Err(Error::Shape("law atoms and probs differ in length".into()));
        }
        DiscreteLaw::from_weighted(r.atoms.into_iter().zip(r.probs))
    }
}

impl DiscreteLaw {
    pub fn dirac(x: f64) -> Self {
        DiscreteLaw { atoms: vec![x], probs: vec![1.0], mean: x }
    }

    /// Builds a law from `(value, weight)` pairs, merging equal values and
    /// renormalizing by the total weight.
    pub fn from_weighted<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::Domain("empty law".into()));
        }
        if pairs.iter().any(|(x, w)| !x.is_finite() || !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("law needs finite atoms and finite nonnegative weights".into()));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut atoms: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut probs: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            if atoms.last() == Some(&x) {
                *probs.last_mut().unwrap() += w;
            } else {
                atoms.push(x);
                probs.push(w);
            }
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("law has zero total mass".into()));
        }
        if total != 1.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self::assemble(atoms, probs))
    }

    /// Uniform law on the samples (the empirical measure).
    pub fn uniform(samples: &[f64]) -> Result<Self> {
        let w = 1.0 / samples.len() as f64;
        Self::from_weighted(samples.iter().map(|&x| (x, w)))
    }

    fn assemble(atoms: Vec<f64>, probs: Vec<f64>) -> Self {
        let mean = atoms.iter().zip(&probs).map(|(x, p)| x * p).sum();
        DiscreteLaw { atoms, probs, mean }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `E|X|^p`, i.e. `W_p(μ, δ_0)^p`.
    pub fn abs_moment(&self, p: f64) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(x, w)| w * x.abs().powf(p)).sum()
    }

    pub fn variance(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(x, w)| w * (x - self.mean).powi(2)).sum()
    }
}

/// Empirical measure `L_n[x] = (1/n) Σ δ_{x_j}` stored as sorted samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    samples: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("empirical measure needs at least one sample".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite sample".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(EmpiricalMeasure { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_law(&self) -> DiscreteLaw {
        DiscreteLaw::uniform(&self.samples).expect("validated samples")
    }
}

fn check_order(p: u32) -> Result<()> {
    if p == 0 {
        return Err(Error::Domain("Wasserstein order must be at least 1".into()));
    }
    Ok(())
}

fn cost(d: f64, p: u32) -> f64 {
    match p {
        1 => d.abs(),
        2 => d * d,
        _ => d.abs().powi(p as i32),
    }
}

/// `W_p(μ, ν)^p` by merging the two quantile functions.
pub fn wasserstein_pow(mu: &DiscreteLaw, nu: &DiscreteLaw, p: u32) -> Result<f64> {
    check_order(p)?;
    let (a, wa, b, wb) = (&mu.atoms, &mu.probs, &nu.atoms, &nu.probs);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (wa[0], wb[0]);
    let mut acc = 0.0;
    loop {
        let m = ra.min(rb);
        if m > 0.0 {
            acc += m * cost(a[i] - b[j], p);
        }
        if ra <= rb {
            rb -= ra;
            i += 1;
            if i == a.len() {
                break;
            }
            ra = wa[i];
        } else {
            ra -= rb;
            j += 1;
            if j == b.len() {
                break;
            }
            rb = wb[j];
        }
    }
    Ok(acc)
}

/// `W_p(μ, ν)`.
pub fn wasserstein(mu: &DiscreteLaw, nu: &DiscreteLaw, p: u32) -> Result<f64> {
    Ok(wasserstein_pow(mu, nu, p)?.powf(1.0 / p as f64))
}

/// `W_p^p` between two empirical measures of equal size: sorted pairing.
pub fn wasserstein_pow_empirical(x: &EmpiricalMeasure, y: &EmpiricalMeasure, p: u32) -> Result<f64> {
    check_order(p)?;
    if x.len() != y.len() {
        return wasserstein_pow(&x.to_law(), &y.to_law(), p);
    }
    let s: f64 = x.samples.iter().zip(&y.samples).map(|(a, b)| cost(a - b, p)).sum();
    Ok(s / x.len() as f64)
}

/// Result of comparing `W_p^p(L_n[x], L_n[y])` with `(1/n) Σ |x_j − y_j|^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

pub fn empirical_contraction_check(x: &[f64], y: &[f64], p: u32) -> Result<ContractionCheck> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let lhs = wasserstein_pow_empirical(&EmpiricalMeasure::new(x.to_vec())?, &EmpiricalMeasure::new(y.to_vec())?, p)?;
    let rhs = x.iter().zip(y).map(|(a, b)| cost(a - b, p)).sum::<f64>() / x.len() as f64;
    // Sorting can only reduce the cost; allow for summation-order rounding.
    let holds = lhs <= rhs + 1e-12 * rhs.abs().max(1.0);
    Ok(ContractionCheck { lhs, rhs, slack: rhs - lhs, holds })
}

/// Time-indexed laws on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureFlow {
    pub times: Vec<f64>,
    pub laws: Vec<DiscreteLaw>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, laws: Vec<DiscreteLaw>) -> Result<Self> {
        if times.len() != laws.len() {
            return Err(Error::Shape(format!("{} times but {} laws", times.len(), laws.len())));
        }
        Ok(MeasureFlow { times, laws })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `sup_t W_p(self_t, other_t)`.
    pub fn sup_distance(&self, other: &MeasureFlow, p: u32) -> Result<f64> {
        if self.times != other.times {
            return Err(Error::Shape("measure flows live on different grids".into()));
        }
        let mut sup: f64 = 0.0;
        for (a, b) in self.laws.iter().zip(&other.laws) {
            sup = sup.max(wasserstein(a, b, p)?);
        }
        Ok(sup)
    }

    /// Rows `(time, atom, prob)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "atom", "prob"])?;
        for (t, law) in self.times.iter().zip(&self.laws) {
            for (x, p) in law.atoms.iter().zip(&law.probs) {
                w.write_record([t.to_string(), x.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `sup_t W_2²(L_n[Ȳ_t], P_{Y_t})` for `copies[j][i] = Ȳ^j_{t_i}`.
pub fn lln_statistic(copies: &[Vec<f64>], reference: &MeasureFlow) -> Result<f64> {
    lln_statistic_p(copies, reference, 2)
}

/// `sup_t W_p^p(L_n[Ȳ_t], P_{Y_t})`.
pub fn lln_statistic_p(copies: &[Vec<f64>], reference: &MeasureFlow, p: u32) -> Result<f64> {
    if copies.is_empty() {
        return Err(Error::Domain("no copies".into()));
    }
    if copies.iter().any(|c| c.len() != reference.len()) {
        return Err(Error::Shape("copies and reference flow have different grids".into()));
    }
    let mut sup: f64 = 0.0;
    let mut column = vec![0.0; copies.len()];
    for (i, law) in reference.laws.iter().enumerate() {
        for (c, path) in column.iter_mut().zip(copies) {
            *c = path[i];
        }
        let emp = DiscreteLaw::uniform(&column)?;
        sup = sup.max(wasserstein_pow(&emp, law, p)?);
    }
    Ok(sup)
}
