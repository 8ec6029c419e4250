//! Syndrome-based reconciliation with LDPC codes.
//!
//! Alice discloses the syndrome of her block under a code of the chosen rate;
//! Bob runs sum-product belief propagation (serial check schedule, LLR domain)
//! to find the word nearest his own bits with that syndrome. A seeded 64-bit
//! Toeplitz hash confirms the correction. If BP fails, Alice discloses the
//! extra checks of a nested code one rate step lower and Bob decodes again.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::entropy::binary_entropy;
use super::toeplitz;
use crate::error::{Error, Result};
use crate::rng;

pub const RATES: [f64; 7] = [0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9];
pub const MIN_BLOCK_LENGTH: usize = 1024;

/// Variable-node degree distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegreeProfile {
    /// Every variable in `column_weight` checks.
    Regular { column_weight: usize },
    /// Degree-2/3 bulk plus a fraction of heavy variables. Fractions are per
    /// variable node; the degree-2 share is capped below the check fraction
    /// so degree-2 variables cannot close a cycle among themselves.
    Irregular { heavy_degree: usize, heavy_fraction: f64, degree2_fraction: f64 },
}

impl Default for DegreeProfile {
    fn default() -> Self {
        DegreeProfile::Irregular {
            heavy_degree: 12,
            heavy_fraction: 0.2,
            degree2_fraction: 0.2,
        }
    }
}

impl DegreeProfile {
    /// Per-variable degrees for a code of `n` variables and `m` checks.
    /// Sorted by increasing degree.
    fn degrees(&self, n: usize, m: usize) -> Result<Vec<usize>> {
        match *self {
            DegreeProfile::Regular { column_weight } => {
                if column_weight < 2 || column_weight > m {
                    return Err(Error::InvalidArgument(format!("column weight {column_weight} with {m} checks")));
                }
                Ok(vec![column_weight; n])
            }
            DegreeProfile::Irregular {
                heavy_degree,
                heavy_fraction,
                degree2_fraction,
            } => {
                if heavy_degree < 4 || heavy_degree > m {
                    return Err(Error::InvalidArgument(format!("heavy degree {heavy_degree} with {m} checks")));
                }
                if !(0.0..=1.0).contains(&heavy_fraction) || !(0.0..=1.0).contains(&degree2_fraction) {
                    return Err(Error::InvalidArgument("degree fractions outside [0,1]".into()));
                }
                let heavy = (heavy_fraction * n as f64).round() as usize;
                let two = ((degree2_fraction * n as f64).round() as usize).min(m.saturating_sub(1));
                if heavy + two > n {
                    return Err(Error::InvalidArgument("degree fractions sum above 1".into()));
                }
                let mut d = vec![2; two];
                d.resize(n - heavy, 3);
                d.resize(n, heavy_degree);
                Ok(d)
            }
        }
    }
}

/// Sparse parity-check matrix in both adjacency directions.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    pub n: usize,
    pub m: usize,
    pub rate: f64,
    var_start: Vec<usize>,
    var_checks: Vec<u32>,
    check_start: Vec<usize>,
    check_vars: Vec<u32>,
}

impl LdpcCode {
    /// Code with `round(n(1-rate))` checks and the default degree profile.
    pub fn new(n: usize, rate: f64, seed: u64) -> Result<Self> {
        Self::with_profile(n, rate, &DegreeProfile::default(), seed)
    }

    /// Progressive edge growth: variables in order of increasing degree;
    /// each new edge goes to a check outside the variable's current
    /// neighbourhood if one exists, otherwise to one at the deepest level
    /// reached, lowest check degree first with a seeded random tie-break.
    pub fn with_profile(n: usize, rate: f64, profile: &DegreeProfile, seed: u64) -> Result<Self> {
        if n < MIN_BLOCK_LENGTH {
            return Err(Error::InvalidArgument(format!("LDPC block length {n} < {MIN_BLOCK_LENGTH}")));
        }
        if !(0.0 < rate && rate < 1.0) {
            return Err(Error::InvalidArgument(format!("LDPC rate {rate} outside (0,1)")));
        }
        let m = (n as f64 * (1.0 - rate)).round() as usize;
        if m < 6 {
            return Err(Error::InvalidArgument(format!("too few checks ({m}) for rate {rate}")));
        }
        let degrees = profile.degrees(n, m)?;
        let mut rng = rng::stream(seed, "ldpc", (rate * 1000.0).round() as u64);
        let edges: usize = degrees.iter().sum();
        let mut var_adj: Vec<Vec<u32>> = degrees.iter().map(|&d| Vec::with_capacity(d)).collect();
        let mut check_adj: Vec<Vec<u32>> = vec![Vec::new(); m];
        // Visit stamps avoid clearing per search.
        let mut check_seen = vec![0u32; m];
        let mut var_seen = vec![0u32; n];
        let mut stamp = 0u32;
        let mut frontier: Vec<u32> = Vec::new();
        let mut next: Vec<u32> = Vec::new();
        let mut candidates: Vec<u32> = Vec::with_capacity(m);

        for v in 0..n {
            for k in 0..degrees[v] {
                // `eligible(c)` says whether check c may take the edge.
                let eligible: Vec<bool> = if k == 0 {
                    vec![true; m]
                } else {
                    stamp += 1;
                    var_seen[v] = stamp;
                    let mut reached = 0usize;
                    frontier.clear();
                    for &c in &var_adj[v] {
                        check_seen[c as usize] = stamp;
                        reached += 1;
                        frontier.push(c);
                    }
                    loop {
                        next.clear();
                        for &c in &frontier {
                            for &u in &check_adj[c as usize] {
                                if var_seen[u as usize] == stamp {
                                    continue;
                                }
                                var_seen[u as usize] = stamp;
                                for &c2 in &var_adj[u as usize] {
                                    if check_seen[c2 as usize] != stamp {
                                        check_seen[c2 as usize] = stamp;
                                        next.push(c2);
                                    }
                                }
                            }
                        }
                        if next.is_empty() || reached + next.len() == m {
                            break;
                        }
                        reached += next.len();
                        std::mem::swap(&mut frontier, &mut next);
                    }
                    if next.is_empty() {
                        // Some checks are unreachable: use those.
                        (0..m).map(|c| check_seen[c] != stamp).collect()
                    } else {
                        // Adding `next` would cover every check: choose among
                        // the ones it would add.
                        let mut e = vec![false; m];
                        for &c in &next {
                            e[c as usize] = true;
                        }
                        e
                    }
                };
                candidates.clear();
                let mut best = usize::MAX;
                for c in 0..m {
                    if !eligible[c] || var_adj[v].contains(&(c as u32)) {
                        continue;
                    }
                    let d = check_adj[c].len();
                    if d < best {
                        best = d;
                        candidates.clear();
                    }
                    if d == best {
                        candidates.push(c as u32);
                    }
                }
                let c = if candidates.is_empty() {
                    // Only reachable when the degree exceeds the checks
                    // available, which the profile rules out.
                    (0..m as u32).find(|c| !var_adj[v].contains(c)).expect("degree bounded by check count")
                } else {
                    candidates[rng.random_range(0..candidates.len())]
                };
                var_adj[v].push(c);
                check_adj[c as usize].push(v as u32);
            }
        }

        let mut var_start = Vec::with_capacity(n + 1);
        var_start.push(0);
        let mut var_checks = Vec::with_capacity(edges);
        for cs in &var_adj {
            var_checks.extend_from_slice(cs);
            var_start.push(var_checks.len());
        }
        let degree: Vec<usize> = check_adj.iter().map(Vec::len).collect();
        let mut check_start = vec![0usize; m + 1];
        for (c, d) in degree.iter().enumerate() {
            check_start[c + 1] = check_start[c] + d;
        }
        let mut fill = check_start.clone();
        let mut check_vars = vec![0u32; edges];
        for v in 0..n {
            for &c in &var_checks[var_start[v]..var_start[v + 1]] {
                check_vars[fill[c as usize]] = v as u32;
                fill[c as usize] += 1;
            }
        }
        Ok(LdpcCode {
            n,
            m,
            rate,
            var_start,
            var_checks,
            check_start,
            check_vars,
        })
    }

    /// Nested lower-rate code: this code's checks followed by `extra` new
    /// ones. Every variable joins one new check, the least loaded that shares
    /// no variable with its existing neighbourhood where possible. A word's
    /// syndrome under the result starts with its syndrome under `self`, so
    /// moving to it discloses only `extra` further bits.
    pub fn extend(&self, extra: usize, seed: u64) -> Result<Self> {
        if extra == 0 || self.m + extra >= self.n {
            return Err(Error::InvalidArgument(format!("cannot add {extra} checks to {} of {}", self.m, self.n)));
        }
        let mut rng = rng::stream(seed, "ldpc-extend", self.m as u64 * 1_000_003 + extra as u64);
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); extra];
        let mut near = vec![u32::MAX; self.n];
        let mut candidates = Vec::with_capacity(extra);
        let mut new_edge = vec![0u32; self.n];
        let mut order: Vec<u32> = (0..self.n as u32).collect();
        order.shuffle(&mut rng);
        for &v in &order {
            for &c in self.var_checks(v as usize) {
                for &u in self.check(c as usize) {
                    near[u as usize] = v;
                }
            }
            let mut pick = None;
            for strict in [true, false] {
                candidates.clear();
                let mut best = usize::MAX;
                for (e, mem) in members.iter().enumerate() {
                    if strict && mem.iter().any(|&u| near[u as usize] == v) {
                        continue;
                    }
                    if mem.len() < best {
                        best = mem.len();
                        candidates.clear();
                    }
                    if mem.len() == best {
                        candidates.push(e);
                    }
                }
                if !candidates.is_empty() {
                    pick = Some(candidates[rng.random_range(0..candidates.len())]);
                    break;
                }
            }
            let e = pick.expect("extra > 0");
            members[e].push(v);
            new_edge[v as usize] = (self.m + e) as u32;
        }
        let mut var_start = Vec::with_capacity(self.n + 1);
        var_start.push(0);
        let mut var_checks = Vec::with_capacity(self.var_checks.len() + self.n);
        for v in 0..self.n {
            var_checks.extend_from_slice(self.var_checks(v));
            var_checks.push(new_edge[v]);
            var_start.push(var_checks.len());
        }
        let mut check_start = self.check_start.clone();
        let mut check_vars = self.check_vars.clone();
        for mut mem in members {
            mem.sort_unstable();
            check_vars.extend_from_slice(&mem);
            check_start.push(check_vars.len());
        }
        let m = self.m + extra;
        Ok(LdpcCode {
            n: self.n,
            m,
            rate: 1.0 - m as f64 / self.n as f64,
            var_start,
            var_checks,
            check_start,
            check_vars,
        })
    }

    pub fn check(&self, c: usize) -> &[u32] {
        &self.check_vars[self.check_start[c]..self.check_start[c + 1]]
    }

    pub fn var_checks(&self, v: usize) -> &[u32] {
        &self.var_checks[self.var_start[v]..self.var_start[v + 1]]
    }

    /// Number of variable pairs sharing two or more checks.
    pub fn four_cycles(&self) -> usize {
        let mut seen = HashSet::new();
        let mut count = 0;
        for v in 0..self.n {
            let cs = self.var_checks(v);
            for a in 0..cs.len() {
                for b in a + 1..cs.len() {
                    let key = (cs[a].min(cs[b]), cs[a].max(cs[b]));
                    if !seen.insert(key) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    pub fn syndrome(&self, bits: &[u8]) -> Vec<u8> {
        (0..self.m)
            .map(|c| self.check(c).iter().fold(0u8, |acc, &v| acc ^ bits[v as usize]))
            .collect()
    }

    /// Sum-product decoding of `received` toward the word with `syndrome`,
    /// assuming a binary symmetric channel with crossover `p`. Returns the
    /// corrected word once every check is satisfied.
    pub fn decode(&self, received: &[u8], syndrome: &[u8], p: f64, max_iterations: usize) -> Option<Vec<u8>> {
        let p = p.clamp(1e-6, 0.5 - 1e-6);
        let prior = ((1.0 - p) / p).ln();
        let mut total: Vec<f64> = received.iter().map(|&b| if b == 0 { prior } else { -prior }).collect();
        let mut msg = vec![0.0f64; self.check_vars.len()];
        let mut word = vec![0u8; self.n];
        let mut incoming: Vec<f64> = Vec::with_capacity(64);
        let mut t: Vec<f64> = Vec::with_capacity(64);

        for _ in 0..max_iterations {
            for c in 0..self.m {
                let (lo, hi) = (self.check_start[c], self.check_start[c + 1]);
                incoming.clear();
                t.clear();
                let mut prod = if syndrome[c] == 1 { -1.0 } else { 1.0 };
                let mut zeros = 0;
                let mut zero_at = 0;
                for e in lo..hi {
                    let v = self.check_vars[e] as usize;
                    let x = total[v] - msg[e];
                    incoming.push(x);
                    let th = (0.5 * x).tanh();
                    if th == 0.0 {
                        zeros += 1;
                        zero_at = e - lo;
                        t.push(1.0);
                    } else {
                        prod *= th;
                        t.push(th);
                    }
                }
                for (k, e) in (lo..hi).enumerate() {
                    let excl = match zeros {
                        0 => prod / t[k],
                        1 if k == zero_at => prod,
                        _ => 0.0,
                    };
                    let out = 2.0 * excl.clamp(-0.999_999_999_999, 0.999_999_999_999).atanh();
                    let v = self.check_vars[e] as usize;
                    msg[e] = out;
                    total[v] = incoming[k] + out;
                }
            }
            for (w, l) in word.iter_mut().zip(&total) {
                *w = u8::from(*l < 0.0);
            }
            if self.syndrome(&word) == syndrome {
                return Some(word);
            }
        }
        None
    }
}

/// One code per supported rate, all with the same block length, plus for
/// each rate a chain of nested extensions down the rate ladder for retries.
#[derive(Debug, Clone)]
pub struct LdpcFamily {
    pub n: usize,
    codes: Vec<LdpcCode>,
    retries: Vec<Vec<LdpcCode>>,
}

impl LdpcFamily {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        Self::with_profile(n, &DegreeProfile::default(), 2, seed)
    }

    /// `retry_depth` nested extensions per rate. The degree-2 share is
    /// capped at 80% of each rate's check fraction.
    pub fn with_profile(n: usize, profile: &DegreeProfile, retry_depth: usize, seed: u64) -> Result<Self> {
        let codes: Vec<LdpcCode> = RATES
            .iter()
            .map(|&r| {
                let p = match *profile {
                    DegreeProfile::Irregular {
                        heavy_degree,
                        heavy_fraction,
                        degree2_fraction,
                    } => DegreeProfile::Irregular {
                        heavy_degree,
                        heavy_fraction,
                        degree2_fraction: degree2_fraction.min(0.8 * (1.0 - r)),
                    },
                    ref other => other.clone(),
                };
                LdpcCode::with_profile(n, r, &p, seed)
            })
            .collect::<Result<_>>()?;
        let mut retries = Vec::with_capacity(codes.len());
        for i in 0..codes.len() {
            let mut chain: Vec<LdpcCode> = Vec::new();
            for j in (0..i).rev().take(retry_depth) {
                let prev = chain.last().unwrap_or(&codes[i]);
                let extra = codes[j].m.saturating_sub(prev.m);
                if extra == 0 {
                    break;
                }
                chain.push(prev.extend(extra, seed)?);
            }
            retries.push(chain);
        }
        Ok(LdpcFamily { n, codes, retries })
    }

    /// Codes tried in order for a block first sent at `rate_index`.
    pub fn ladder(&self, rate_index: usize) -> impl Iterator<Item = &LdpcCode> {
        std::iter::once(&self.codes[rate_index]).chain(self.retries[rate_index].iter())
    }

    pub fn code(&self, rate_index: usize) -> &LdpcCode {
        &self.codes[rate_index]
    }

    /// Largest rate whose redundancy covers `f_target·h2(qber)`, or the
    /// lowest rate when none does.
    pub fn select_rate(&self, qber_estimate: f64, f_target: f64) -> usize {
        let need = f_target * binary_entropy(qber_estimate.clamp(0.0, 0.5)).unwrap_or(1.0);
        (0..RATES.len()).rev().find(|&i| 1.0 - RATES[i] >= need).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcConfig {
    pub block_length: usize,
    pub f_target: f64,
    pub max_iterations: usize,
    pub hash_bits: usize,
    /// Syndrome rounds before the block is discarded; each retry discloses
    /// the extra checks of the next nested extension.
    pub max_attempts: usize,
    pub profile: DegreeProfile,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig {
            block_length: 4096,
            f_target: 1.25,
            max_iterations: 100,
            hash_bits: 64,
            max_attempts: 3,
            profile: DegreeProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcOutcome {
    /// Bob's corrected block; present only when verification passed.
    pub corrected: Option<Vec<u8>>,
    /// Syndrome bits disclosed over all rounds.
    pub leak: usize,
    pub verified: bool,
    pub attempts: usize,
    pub final_rate: Option<f64>,
}

impl EcOutcome {
    /// `leak / (n·h2(true QBER))`; `None` when the block had no errors.
    pub fn efficiency(&self, n: usize, true_qber: f64) -> Option<f64> {
        let h = binary_entropy(true_qber).ok()?;
        (h > 0.0).then(|| self.leak as f64 / (n as f64 * h))
    }
}

/// Reconcile one block. `hash_seed` selects the verification hash.
pub fn ec_reconcile(
    family: &LdpcFamily,
    alice: &[u8],
    bob: &[u8],
    qber_estimate: f64,
    config: &EcConfig,
    hash_seed: u64,
) -> Result<EcOutcome> {
    if alice.len() != bob.len() {
        return Err(Error::InvalidArgument("alice and bob blocks differ in length".into()));
    }
    if alice.len() != family.n {
        return Err(Error::InvalidArgument(format!(
            "block length {} does not match code length {}",
            alice.len(),
            family.n
        )));
    }
    let alice_hash = verification_hash(alice, config.hash_bits, hash_seed);
    let mut leak = 0;
    let mut attempts = 0;
    let p = qber_estimate.clamp(1e-4, 0.5);
    let first = family.select_rate(qber_estimate, config.f_target);
    for code in family.ladder(first).take(config.max_attempts.max(1)) {
        // Nested codes: the syndrome under `code` contains every bit sent
        // before, so the total disclosed is its full length.
        let syndrome = code.syndrome(alice);
        leak = code.m;
        attempts += 1;
        if let Some(word) = code.decode(bob, &syndrome, p, config.max_iterations) {
            let verified = verification_hash(&word, config.hash_bits, hash_seed) == alice_hash;
            return Ok(EcOutcome {
                corrected: verified.then_some(word),
                leak,
                verified,
                attempts,
                final_rate: Some(code.rate),
            });
        }
    }
    Ok(EcOutcome {
        corrected: None,
        leak,
        verified: false,
        attempts,
        final_rate: None,
    })
}

fn verification_hash(bits: &[u8], hash_bits: usize, seed: u64) -> Vec<u8> {
    let n = bits.len();
    let m = hash_bits.min(n);
    let mut rng = rng::stream(seed, "verify", n as u64);
    let s: Vec<u8> = (0..n + m - 1).map(|_| rng.random::<bool>() as u8).collect();
    toeplitz::toeplitz_direct(bits, m, &s).expect("seed length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(n: usize, q: f64, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut r = rng::stream(seed, "ldpc-test", 0);
        let a: Vec<u8> = (0..n).map(|_| r.random::<bool>() as u8).collect();
        let b = a.iter().map(|&x| x ^ u8::from(r.random::<f64>() < q)).collect();
        (a, b)
    }

    #[test]
    fn construction_is_regular_and_cycle_free() {
        for rate in [0.5, 0.75, 0.9] {
            let code = LdpcCode::with_profile(4096, rate, &DegreeProfile::Regular { column_weight: 3 }, 1).unwrap();
            assert_eq!(code.m, (4096.0 * (1.0 - rate)).round() as usize);
            assert_eq!(code.four_cycles(), 0);
            let degrees: Vec<usize> = (0..code.m).map(|c| code.check(c).len()).collect();
            let (lo, hi) = (degrees.iter().min().unwrap(), degrees.iter().max().unwrap());
            assert!(hi - lo <= 2, "rate {rate}: {lo}..{hi}");
        }
    }

    #[test]
    fn irregular_profile_degrees() {
        let code = LdpcCode::new(4096, 0.75, 2).unwrap();
        let mut hist = [0usize; 13];
        for v in 0..code.n {
            hist[code.var_checks(v).len()] += 1;
        }
        assert_eq!(hist[12], 819);
        assert_eq!(hist[2], 819);
        assert_eq!(hist[3], 4096 - 2 * 819);
        assert_eq!(code.four_cycles(), 0);
        let edges: usize = (0..code.m).map(|c| code.check(c).len()).sum();
        assert_eq!(edges, 819 * 12 + 819 * 2 + (4096 - 2 * 819) * 3);
    }

    #[test]
    fn construction_is_seeded() {
        let a = LdpcCode::new(1024, 0.7, 3).unwrap();
        let b = LdpcCode::new(1024, 0.7, 3).unwrap();
        let c = LdpcCode::new(1024, 0.7, 4).unwrap();
        assert_eq!(a.var_checks, b.var_checks);
        assert_ne!(a.var_checks, c.var_checks);
    }

    #[test]
    fn rejects_short_blocks() {
        assert!(LdpcCode::new(512, 0.5, 0).is_err());
    }

    #[test]
    fn rate_selection() {
        let f = LdpcFamily::new(1024, 0).unwrap();
        assert_eq!(RATES[f.select_rate(0.0, 1.25)], 0.9);
        assert_eq!(RATES[f.select_rate(0.03, 1.25)], 0.75);
        assert_eq!(RATES[f.select_rate(0.2, 1.25)], 0.5);
    }

    #[test]
    fn clean_block_decodes_at_any_rate() {
        let family = LdpcFamily::new(1024, 7).unwrap();
        let (a, _) = noisy(1024, 0.0, 1);
        let out = ec_reconcile(&family, &a, &a, 0.0, &EcConfig::default(), 5).unwrap();
        assert!(out.verified);
        assert_eq!(out.corrected.as_deref(), Some(&a[..]));
        assert_eq!(out.final_rate, Some(0.9));
    }

    #[test]
    fn corrects_moderate_noise() {
        let family = LdpcFamily::new(4096, 7).unwrap();
        let mut ok = 0;
        for s in 0..20 {
            let (a, b) = noisy(4096, 0.03, s);
            let out = ec_reconcile(&family, &a, &b, 0.03, &EcConfig::default(), s).unwrap();
            if let Some(c) = &out.corrected {
                assert_eq!(c, &a);
                ok += 1;
            }
        }
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn hopeless_block_is_never_emitted_unverified() {
        let family = LdpcFamily::new(1024, 7).unwrap();
        for s in 0..5 {
            let (a, b) = noisy(1024, 0.11, s);
            let out = ec_reconcile(&family, &a, &b, 0.11, &EcConfig::default(), s).unwrap();
            match &out.corrected {
                Some(c) => assert_eq!(c, &a),
                None => assert!(!out.verified),
            }
        }
    }
}
