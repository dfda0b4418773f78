//! Rate-1/2 LDPC code for the coded chain.
//!
//! A seeded progressive-edge-growth construction builds a (3,6)-regular
//! parity-check matrix: every variable node has degree 3, every check node
//! degree 6. Encoding is systematic via a one-time GF(2) elimination; decoding
//! is flooding sum-product with the tanh rule and early stop on parity.
//!
//! LLR convention throughout the crate: positive means bit = 1
//! (`llr = log P(b=1)/P(b=0)`).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const VAR_DEGREE: usize = 3;
pub const CHECK_DEGREE: usize = 6;
pub const DECODE_MAX_ITERS: usize = 20;
/// Magnitude used for known (shortened) bits and general LLR saturation.
pub const LLR_SATURATION: f64 = 40.0;

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("codeword length {0} is not usable for a (3,6)-regular code (need even, >= 8)")]
    BadLength(usize),
    #[error("expected {expected} bits, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("construction failed for n={n}, seed={seed} (exhausted retries)")]
    ConstructionFailed { n: usize, seed: u64 },
    #[error("bad code cache: {0}")]
    BadCache(String),
    #[error("cannot shorten {requested} of {available} info bits")]
    BadShorten { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Hard decisions at the systematic positions.
    pub info_bits: Vec<u8>,
    /// Hard decisions for the full codeword.
    pub codeword: Vec<u8>,
    /// Parity satisfied with every posterior bounded away from zero.
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct LdpcCode {
    n: usize,
    m: usize,
    seed: u64,
    /// Variable indices on each check (each row has CHECK_DEGREE entries).
    check_vars: Vec<Vec<usize>>,
    /// Columns holding parity bits (one per check after elimination).
    pivot_cols: Vec<usize>,
    /// Columns holding info bits, ascending; the systematic payload.
    info_cols: Vec<usize>,
    /// Reduced parity rows over the info columns, bit-packed: parity at
    /// pivot_cols[i] = XOR of info bits selected by gen_rows[i].
    gen_rows: Vec<Vec<u64>>,
}

impl LdpcCode {
    pub fn new(n: usize, seed: u64) -> Result<Self, CodingError> {
        if n < 8 || n % 2 != 0 {
            return Err(CodingError::BadLength(n));
        }
        for attempt in 0..64u64 {
            let sub = seed.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15));
            if let Some(check_vars) = peg_construct(n, sub) {
                if let Some(code) = Self::from_checks(n, seed, check_vars) {
                    return Ok(code);
                }
            }
        }
        Err(CodingError::ConstructionFailed { n, seed })
    }

    /// Builds the systematic encoder from an adjacency; None if H is rank
    /// deficient (caller retries with a new graph).
    fn from_checks(n: usize, seed: u64, check_vars: Vec<Vec<usize>>) -> Option<Self> {
        let m = check_vars.len();
        let words = n.div_ceil(64);
        let mut rows: Vec<Vec<u64>> = vec![vec![0u64; words]; m];
        for (c, vars) in check_vars.iter().enumerate() {
            for &v in vars {
                rows[c][v / 64] ^= 1u64 << (v % 64);
            }
        }
        // Gauss-Jordan over GF(2), scanning columns left to right.
        let mut pivot_cols = Vec::with_capacity(m);
        let mut r = 0usize;
        for col in 0..n {
            if r == m {
                break;
            }
            let (w, b) = (col / 64, col % 64);
            let Some(src) = (r..m).find(|&i| rows[i][w] >> b & 1 == 1) else { continue };
            rows.swap(r, src);
            let pivot_row = rows[r].clone();
            for (i, row) in rows.iter_mut().enumerate() {
                if i != r && row[w] >> b & 1 == 1 {
                    for (x, y) in row.iter_mut().zip(&pivot_row) {
                        *x ^= y;
                    }
                }
            }
            pivot_cols.push(col);
            r += 1;
        }
        if r < m {
            return None;
        }
        let info_cols: Vec<usize> = {
            let mut is_pivot = vec![false; n];
            for &c in &pivot_cols {
                is_pivot[c] = true;
            }
            (0..n).filter(|&c| !is_pivot[c]).collect()
        };
        let k = info_cols.len();
        let kwords = k.div_ceil(64);
        let mut gen_rows = vec![vec![0u64; kwords]; m];
        for i in 0..m {
            for (j, &col) in info_cols.iter().enumerate() {
                if rows[i][col / 64] >> (col % 64) & 1 == 1 {
                    gen_rows[i][j / 64] |= 1u64 << (j % 64);
                }
            }
        }
        Some(LdpcCode { n, m, seed, check_vars, pivot_cols, info_cols, gen_rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.info_cols.len()
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_cols
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>, CodingError> {
        if info.len() != self.k() {
            return Err(CodingError::LengthMismatch { expected: self.k(), got: info.len() });
        }
        let kwords = self.k().div_ceil(64);
        let mut packed = vec![0u64; kwords];
        for (j, &b) in info.iter().enumerate() {
            packed[j / 64] |= ((b & 1) as u64) << (j % 64);
        }
        let mut cw = vec![0u8; self.n];
        for (j, &col) in self.info_cols.iter().enumerate() {
            cw[col] = info[j] & 1;
        }
        for (i, row) in self.gen_rows.iter().enumerate() {
            let ones: u32 = row.iter().zip(&packed).map(|(a, b)| (a & b).count_ones()).sum();
            cw[self.pivot_cols[i]] = (ones & 1) as u8;
        }
        debug_assert!(self.parity_ok(&cw));
        Ok(cw)
    }

    pub fn parity_ok(&self, cw: &[u8]) -> bool {
        self.check_vars
            .iter()
            .all(|vars| vars.iter().fold(0u8, |acc, &v| acc ^ (cw[v] & 1)) == 0)
    }

    /// Sum-product decoding; `llr[i] = log P(c_i = 1)/P(c_i = 0)`.
    pub fn decode(&self, llr: &[f64], max_iters: usize) -> Result<DecodeResult, CodingError> {
        if llr.len() != self.n {
            return Err(CodingError::LengthMismatch { expected: self.n, got: llr.len() });
        }
        // Internally: L = log P(0)/P(1), the classic SPA sign convention.
        let chan: Vec<f64> = llr.iter().map(|&l| (-l).clamp(-LLR_SATURATION, LLR_SATURATION)).collect();
        let mut msg: Vec<Vec<f64>> =
            self.check_vars.iter().map(|vars| vec![0.0; vars.len()]).collect();
        let mut post = chan.clone();
        let mut hard = vec![0u8; self.n];
        for iter in 1..=max_iters {
            // Totals use last iteration's messages (flooding schedule).
            let mut total = chan.clone();
            for (c, vars) in self.check_vars.iter().enumerate() {
                for (i, &v) in vars.iter().enumerate() {
                    total[v] += msg[c][i];
                }
            }
            for (c, vars) in self.check_vars.iter().enumerate() {
                let th: Vec<f64> =
                    vars.iter().enumerate().map(|(i, &v)| (0.5 * (total[v] - msg[c][i])).tanh()).collect();
                // Leave-one-out products via prefix/suffix scans.
                let d = th.len();
                let mut pre = vec![1.0; d + 1];
                for i in 0..d {
                    pre[i + 1] = pre[i] * th[i];
                }
                let mut suf = vec![1.0; d + 1];
                for i in (0..d).rev() {
                    suf[i] = suf[i + 1] * th[i];
                }
                for i in 0..d {
                    let p = (pre[i] * suf[i + 1]).clamp(-(1.0 - 1e-12), 1.0 - 1e-12);
                    msg[c][i] = 2.0 * p.atanh();
                }
            }
            post = chan.clone();
            for (c, vars) in self.check_vars.iter().enumerate() {
                for (i, &v) in vars.iter().enumerate() {
                    post[v] += msg[c][i];
                }
            }
            for (v, &p) in post.iter().enumerate() {
                hard[v] = (p < 0.0) as u8;
            }
            if self.parity_ok(&hard) && post.iter().all(|&p| p != 0.0) {
                return Ok(DecodeResult {
                    info_bits: self.info_cols.iter().map(|&c| hard[c]).collect(),
                    codeword: hard,
                    converged: true,
                    iterations: iter,
                });
            }
        }
        for (v, &p) in post.iter().enumerate() {
            hard[v] = (p < 0.0) as u8;
        }
        Ok(DecodeResult {
            info_bits: self.info_cols.iter().map(|&c| hard[c]).collect(),
            codeword: hard,
            converged: false,
            iterations: max_iters,
        })
    }

    /// Drops the last `drop` info bits (fixed to zero, never transmitted).
    pub fn shorten(&self, drop: usize) -> Result<Shortened<'_>, CodingError> {
        if drop >= self.k() {
            return Err(CodingError::BadShorten { requested: drop, available: self.k() });
        }
        let mut skip = vec![false; self.n];
        for &col in &self.info_cols[self.k() - drop..] {
            skip[col] = true;
        }
        let transmitted: Vec<usize> = (0..self.n).filter(|&c| !skip[c]).collect();
        Ok(Shortened { code: self, drop, transmitted })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ldpc-3-6 v1 n {} m {} seed {}\n", self.n, self.m, self.seed);
        for vars in &self.check_vars {
            let row: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CodingError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CodingError::BadCache("empty".into()))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 8 || f[0] != "ldpc-3-6" || f[1] != "v1" || f[2] != "n" || f[4] != "m" || f[6] != "seed" {
            return Err(CodingError::BadCache(format!("bad header {header:?}")));
        }
        let n: usize = f[3].parse().map_err(|_| CodingError::BadCache("bad n".into()))?;
        let m: usize = f[5].parse().map_err(|_| CodingError::BadCache("bad m".into()))?;
        let seed: u64 = f[7].parse().map_err(|_| CodingError::BadCache("bad seed".into()))?;
        let mut check_vars = Vec::with_capacity(m);
        for line in lines {
            let vars: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
            let vars = vars.map_err(|_| CodingError::BadCache(format!("bad row {line:?}")))?;
            if vars.len() != CHECK_DEGREE || vars.iter().any(|&v| v >= n) {
                return Err(CodingError::BadCache(format!("bad row {line:?}")));
            }
            check_vars.push(vars);
        }
        if check_vars.len() != m || m * 2 != n {
            return Err(CodingError::BadCache("row count mismatch".into()));
        }
        Self::from_checks(n, seed, check_vars)
            .ok_or_else(|| CodingError::BadCache("rank-deficient matrix".into()))
    }

    /// Loads the seed-addressed cache file or constructs and writes it.
    pub fn cached(n: usize, seed: u64, dir: &Path) -> Result<Self, CodingError> {
        let path = dir.join(format!("ldpc_n{n}_seed{seed}.txt"));
        if path.exists() {
            let code = Self::from_text(&std::fs::read_to_string(&path)?)?;
            if code.n == n && code.seed == seed {
                return Ok(code);
            }
            return Err(CodingError::BadCache(format!("{} does not match n={n}, seed={seed}", path.display())));
        }
        let code = Self::new(n, seed)?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, code.to_text())?;
        Ok(code)
    }
}

/// A code with trailing info bits pinned to zero and removed from the channel.
pub struct Shortened<'a> {
    code: &'a LdpcCode,
    drop: usize,
    transmitted: Vec<usize>,
}

impl Shortened<'_> {
    pub fn k(&self) -> usize {
        self.code.k() - self.drop
    }

    pub fn transmitted_len(&self) -> usize {
        self.code.n() - self.drop
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>, CodingError> {
        if info.len() != self.k() {
            return Err(CodingError::LengthMismatch { expected: self.k(), got: info.len() });
        }
        let mut full = info.to_vec();
        full.resize(self.code.k(), 0);
        let cw = self.code.encode(&full)?;
        Ok(self.transmitted.iter().map(|&c| cw[c]).collect())
    }

    pub fn decode(&self, llr: &[f64], max_iters: usize) -> Result<DecodeResult, CodingError> {
        if llr.len() != self.transmitted_len() {
            return Err(CodingError::LengthMismatch {
                expected: self.transmitted_len(),
                got: llr.len(),
            });
        }
        // Pinned bits enter as certainly-zero evidence.
        let mut full = vec![-LLR_SATURATION; self.code.n()];
        for (&col, &l) in self.transmitted.iter().zip(llr) {
            full[col] = l;
        }
        let mut res = self.code.decode(&full, max_iters)?;
        res.info_bits.truncate(self.k());
        Ok(res)
    }
}

/// Progressive edge growth: each new edge attaches to the most distant
/// (ideally unreached) check of minimal current degree, which pushes short
/// cycles out and keeps the degree profile exactly regular.
fn peg_construct(n: usize, seed: u64) -> Option<Vec<Vec<usize>>> {
    let m = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check_vars: Vec<Vec<usize>> = vec![Vec::with_capacity(CHECK_DEGREE); m];
    let mut var_checks: Vec<Vec<usize>> = vec![Vec::with_capacity(VAR_DEGREE); n];
    for v in 0..n {
        for _ in 0..VAR_DEGREE {
            let dist = check_distances(v, &check_vars, &var_checks, m);
            let mut best: Vec<usize> = Vec::new();
            let mut best_key = (0usize, usize::MAX);
            for c in 0..m {
                if check_vars[c].len() >= CHECK_DEGREE || var_checks[v].contains(&c) {
                    continue;
                }
                // Unreached checks (usize::MAX) sort above any finite distance.
                let key = (dist[c], check_vars[c].len());
                let better = key.0 > best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1);
                if best.is_empty() || better {
                    best_key = key;
                    best.clear();
                    best.push(c);
                } else if key == best_key {
                    best.push(c);
                }
            }
            if best.is_empty() {
                return None;
            }
            let c = best[rng.random_range(0..best.len())];
            check_vars[c].push(v);
            var_checks[v].push(c);
        }
    }
    Some(check_vars)
}

/// BFS distances from variable `v` to every check in the bipartite graph;
/// unreached checks get usize::MAX.
fn check_distances(
    v: usize,
    check_vars: &[Vec<usize>],
    var_checks: &[Vec<usize>],
    m: usize,
) -> Vec<usize> {
    let mut dist = vec![usize::MAX; m];
    let mut seen_var = vec![false; var_checks.len()];
    seen_var[v] = true;
    let mut frontier = vec![v];
    let mut depth = 0usize;
    while !frontier.is_empty() {
        depth += 1;
        let mut next_vars = Vec::new();
        for &u in &frontier {
            for &c in &var_checks[u] {
                if dist[c] == usize::MAX {
                    dist[c] = depth;
                    for &w in &check_vars[c] {
                        if !seen_var[w] {
                            seen_var[w] = true;
                            next_vars.push(w);
                        }
                    }
                }
            }
        }
        frontier = next_vars;
    }
    dist
}
