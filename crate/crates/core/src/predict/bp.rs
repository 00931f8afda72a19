//! Max-product loopy belief propagation on pairwise Markov networks, in the log domain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpOptions {
    /// Weight of the previous message in each update.
    pub damping: f64,
    pub max_iter: usize,
    /// Convergence threshold on the largest message change.
    pub tol: f64,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Pairwise network with log potentials. `pairwise[(i, j)]` scores state `i` of `a`
/// together with state `j` of `b`.
#[derive(Debug, Clone)]
pub struct PairwiseMrf {
    pub unary: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize, DMatrix<f64>)>,
}

#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub assignment: Vec<usize>,
    /// Per-node max-marginal beliefs normalized to sum to 1.
    pub beliefs: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl PairwiseMrf {
    pub fn validate(&self) -> Result<()> {
        if self.unary.iter().any(|u| u.is_empty()) {
            return Err(Error::InvalidArgument("every node needs at least one state".into()));
        }
        for (a, b, t) in &self.edges {
            if *a >= self.unary.len() || *b >= self.unary.len() || a == b {
                return Err(Error::InvalidArgument(format!("invalid edge ({a}, {b})")));
            }
            if t.nrows() != self.unary[*a].len() || t.ncols() != self.unary[*b].len() {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) table has the wrong shape")));
            }
        }
        Ok(())
    }

    /// Log score of a joint assignment.
    pub fn score(&self, x: &[usize]) -> f64 {
        let mut s: f64 = self.unary.iter().zip(x).map(|(u, &k)| u[k]).sum();
        for (a, b, t) in &self.edges {
            s += t[(x[*a], x[*b])];
        }
        s
    }
}

fn normalize_log(m: &mut [f64]) {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        for v in m.iter_mut() {
            *v -= max;
        }
    }
}

/// First index of the maximum, so ties go to the lowest state.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Synchronous damped max-product message passing.
pub fn max_product(mrf: &PairwiseMrf, opts: &BpOptions) -> Result<BpOutcome> {
    mrf.validate()?;
    let n = mrf.unary.len();
    // directed messages: 2k carries a -> b, 2k + 1 carries b -> a
    let mut msgs: Vec<Vec<f64>> = Vec::with_capacity(2 * mrf.edges.len());
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, (a, b, _)) in mrf.edges.iter().enumerate() {
        msgs.push(vec![0.0; mrf.unary[*b].len()]);
        msgs.push(vec![0.0; mrf.unary[*a].len()]);
        incoming[*b].push(2 * k);
        incoming[*a].push(2 * k + 1);
    }
    let mut iterations = 0;
    let mut converged = mrf.edges.is_empty();
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut next = msgs.clone();
        let mut change: f64 = 0.0;
        for (k, (a, b, table)) in mrf.edges.iter().enumerate() {
            for dir in 0..2 {
                let (from, to, id) = if dir == 0 { (*a, *b, 2 * k) } else { (*b, *a, 2 * k + 1) };
                let reverse = id ^ 1;
                let mut h = mrf.unary[from].clone();
                for &m in &incoming[from] {
                    if m != reverse {
                        for (hv, mv) in h.iter_mut().zip(&msgs[m]) {
                            *hv += mv;
                        }
                    }
                }
                let mut out = vec![f64::NEG_INFINITY; mrf.unary[to].len()];
                for (xf, &hf) in h.iter().enumerate() {
                    for (xt, o) in out.iter_mut().enumerate() {
                        let pair = if dir == 0 { table[(xf, xt)] } else { table[(xt, xf)] };
                        let v = hf + pair;
                        if v > *o {
                            *o = v;
                        }
                    }
                }
                normalize_log(&mut out);
                for (o, old) in out.iter_mut().zip(&msgs[id]) {
                    let damped = opts.damping * old + (1.0 - opts.damping) * *o;
                    // keep -inf entries stable instead of producing NaN
                    *o = if damped.is_nan() { f64::NEG_INFINITY } else { damped };
                    let diff = (*o - old).abs();
                    if diff.is_finite() {
                        change = change.max(diff);
                    }
                }
                next[id] = out;
            }
        }
        msgs = next;
        converged = change < opts.tol;
    }
    let mut assignment = Vec::with_capacity(n);
    let mut beliefs = Vec::with_capacity(n);
    for v in 0..n {
        let mut b = mrf.unary[v].clone();
        for &m in &incoming[v] {
            for (bv, mv) in b.iter_mut().zip(&msgs[m]) {
                *bv += mv;
            }
        }
        assignment.push(argmax(&b));
        let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = b.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = p.iter().sum();
        for x in &mut p {
            *x /= z;
        }
        beliefs.push(p);
    }
    Ok(BpOutcome {
        assignment,
        beliefs,
        iterations,
        converged,
    })
}

/// Exhaustive MAP assignment (lowest joint index on ties). Intended for small tests.
pub fn brute_force_map(mrf: &PairwiseMrf) -> Result<Vec<usize>> {
    mrf.validate()?;
    let sizes: Vec<usize> = mrf.unary.iter().map(|u| u.len()).collect();
    let total: usize = sizes.iter().product();
    let mut x = vec![0usize; sizes.len()];
    let mut best = x.clone();
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..total {
        let s = mrf.score(&x);
        if s > best_score {
            best_score = s;
            best = x.clone();
        }
        for k in (0..x.len()).rev() {
            x[k] += 1;
            if x[k] < sizes[k] {
                break;
            }
            x[k] = 0;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mrf(rng: &mut ChaCha8Rng, edges: &[(usize, usize)], max_states: usize) -> PairwiseMrf {
        let unary: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let k = rng.gen_range(1..=max_states);
                (0..k).map(|_| rng.gen_range(-3.0..0.0)).collect()
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(a, b)| {
                let t = DMatrix::from_fn(unary[a].len(), unary[b].len(), |_, _| rng.gen_range(-3.0..0.0));
                (a, b, t)
            })
            .collect();
        PairwiseMrf { unary, edges }
    }

    #[test]
    fn single_states_are_forced() {
        let mrf = PairwiseMrf {
            unary: vec![vec![-1.0]; 3],
            edges: vec![
                (0, 1, DMatrix::from_element(1, 1, -2.0)),
                (1, 2, DMatrix::from_element(1, 1, -0.5)),
                (2, 0, DMatrix::from_element(1, 1, -0.5)),
            ],
        };
        let out = max_product(&mrf, &BpOptions::default()).unwrap();
        assert_eq!(out.assignment, vec![0, 0, 0]);
        assert!(out.beliefs.iter().all(|b| b == &vec![1.0]));
    }

    #[test]
    fn ties_go_to_the_lowest_state() {
        let mrf = PairwiseMrf {
            unary: vec![vec![0.0, 0.0, 0.0]],
            edges: vec![],
        };
        assert_eq!(max_product(&mrf, &BpOptions::default()).unwrap().assignment, vec![0]);
    }

    #[test]
    fn trees_match_brute_force() {
        let tree = [(0, 1), (1, 2), (1, 3), (3, 4), (0, 5), (5, 6), (6, 7)];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let mrf = random_mrf(&mut rng, &tree, 5);
            let bp = max_product(&mrf, &BpOptions::default()).unwrap();
            assert!(bp.converged);
            assert_eq!(bp.assignment, brute_force_map(&mrf).unwrap());
        }
    }

    #[test]
    fn bad_tables_are_rejected() {
        let mrf = PairwiseMrf {
            unary: vec![vec![0.0, 0.0], vec![0.0]],
            edges: vec![(0, 1, DMatrix::zeros(1, 1))],
        };
        assert!(max_product(&mrf, &BpOptions::default()).is_err());
    }
}
