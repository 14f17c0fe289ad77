//! Loss kernels and multi-task aggregation.
//!
//! Every kernel works on flattened `(sample, step)` rows with a validity
//! mask and returns the masked mean, so padding contributes nothing to
//! either value or gradient. Kernels report how many elements they
//! allocate so the negative-sampling strategies can be compared.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, logsumexp, matmul, Matrix, Real};

/// Largest vocabulary the exhaustive kernel accepts.
pub const EXHAUSTIVE_MAX_CARDINALITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Shared,
    Independent,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeSamplingPlan {
    pub strategy: NegativeStrategy,
    /// Per batch for `shared`, per positive for `independent`.
    pub n_negative: usize,
    pub seed: u64,
}

impl NegativeSamplingPlan {
    pub fn shared(n_negative: usize, seed: u64) -> Self {
        NegativeSamplingPlan {
            strategy: NegativeStrategy::Shared,
            n_negative,
            seed,
        }
    }

    pub fn independent(n_negative: usize, seed: u64) -> Self {
        NegativeSamplingPlan {
            strategy: NegativeStrategy::Independent,
            n_negative,
            seed,
        }
    }

    pub fn exhaustive() -> Self {
        NegativeSamplingPlan {
            strategy: NegativeStrategy::Exhaustive,
            n_negative: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy != NegativeStrategy::Exhaustive && self.n_negative == 0 {
            return Err(Error::config("n_negative", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for NegativeSamplingPlan {
    fn default() -> Self {
        NegativeSamplingPlan::shared(1024, 0)
    }
}

/// Uniform draws with replacement from `[0, cardinality)`.
pub fn sample_negatives(cardinality: usize, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..n)
        .map(|_| rng.random_range(0..cardinality as u32))
        .collect()
}

/// Deterministic per-call generator for negative indices.
pub fn negative_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Elements allocated by a kernel. `resident` covers the inputs it reads
/// (hidden rows and the table) and their dense gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub intermediate_elements: usize,
    pub resident_elements: usize,
}

impl KernelStats {
    pub fn total(&self) -> usize {
        self.intermediate_elements + self.resident_elements
    }
}

fn valid_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

fn row_weight<R: Real>(mask: &[bool]) -> R {
    let n = valid_count(mask);
    if n == 0 {
        R::zero()
    } else {
        R::one() / R::from_f64(n as f64)
    }
}

// ---------------------------------------------------------------------------
// Numerical: negative log-likelihood of a normal distribution.
// ---------------------------------------------------------------------------

/// `(y−μ)²/(2σ²) + ln σ + ln(2π)/2` for one position.
pub fn normal_nll<R: Real>(mu: R, sigma: R, y: R) -> R {
    let r = y - mu;
    let half_ln_2pi = R::from_f64(0.5 * (2.0 * PI).ln());
    r * r / (R::from_f64(2.0) * sigma * sigma) + sigma.ln() + half_ln_2pi
}

/// Masked mean of [`normal_nll`]; `musig` columns are `(μ, σ)`.
pub fn loss_num<R: Real>(musig: &Matrix<R>, y: &[R], mask: &[bool]) -> Result<R> {
    check_rows(musig.rows, y.len(), mask.len())?;
    let w = row_weight::<R>(mask);
    let mut s = R::zero();
    for r in 0..musig.rows {
        if !mask[r] {
            continue;
        }
        let (mu, sigma) = (musig.get(r, 0), musig.get(r, 1));
        if !(sigma > R::zero()) {
            return Err(Error::Invalid(format!("sigma must be > 0, got {sigma:?}")));
        }
        s = s + normal_nll(mu, sigma, y[r]);
    }
    Ok(s * w)
}

/// Gradient of [`loss_num`] scaled by `g`.
pub fn loss_num_backward<R: Real>(musig: &Matrix<R>, y: &[R], mask: &[bool], g: R) -> Matrix<R> {
    let w = row_weight::<R>(mask) * g;
    let mut d = Matrix::zeros(musig.rows, 2);
    for r in 0..musig.rows {
        if !mask[r] {
            continue;
        }
        let (mu, sigma) = (musig.get(r, 0), musig.get(r, 1));
        let res = y[r] - mu;
        let s2 = sigma * sigma;
        d.data[2 * r] = -res / s2 * w;
        d.data[2 * r + 1] = (R::one() / sigma - res * res / (s2 * sigma)) * w;
    }
    d
}

fn check_rows(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Shape(format!("row counts differ: {a}, {b}, {c}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Low-cardinality categorical: full softmax cross-entropy.
// ---------------------------------------------------------------------------

/// Softmax probabilities per row and the masked-mean cross-entropy.
pub fn loss_lcat<R: Real>(logits: &Matrix<R>, y: &[u32], mask: &[bool]) -> Result<(R, Matrix<R>)> {
    check_rows(logits.rows, y.len(), mask.len())?;
    let w = row_weight::<R>(mask);
    let mut probs = Matrix::zeros(logits.rows, logits.cols);
    let mut s = R::zero();
    for r in 0..logits.rows {
        let row = logits.row(r);
        let lse = logsumexp(row.iter().copied());
        for (p, &z) in probs.row_mut(r).iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
        if mask[r] {
            let t = y[r] as usize;
            if t >= logits.cols {
                return Err(Error::IndexOutOfRange {
                    attribute: String::new(),
                    index: t,
                    cardinality: logits.cols,
                });
            }
            s = s + (lse - row[t]);
        }
    }
    Ok((s * w, probs))
}

pub fn loss_lcat_backward<R: Real>(probs: &Matrix<R>, y: &[u32], mask: &[bool], g: R) -> Matrix<R> {
    let w = row_weight::<R>(mask) * g;
    let mut d = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        if !mask[r] {
            continue;
        }
        for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
            *o = p * w;
        }
        let t = y[r] as usize;
        d.data[r * probs.cols + t] = d.data[r * probs.cols + t] - w;
    }
    d
}

// ---------------------------------------------------------------------------
// High-cardinality categorical: InfoNCE with shared negatives.
// ---------------------------------------------------------------------------

/// Forward state of [`shared_infonce`], consumed by its backward pass.
#[derive(Debug, Clone)]
pub struct SharedInfoNce<R> {
    pub batch: usize,
    pub steps: usize,
    pub negatives: Vec<u32>,
    /// Per-row loss (zero on masked rows).
    pub per_row: Vec<R>,
    pub loss: R,
    /// Gathered positives `E[y]`, `[B·T × k]`.
    positives: Matrix<R>,
    /// Gathered negatives, `[N × k]`.
    negative_rows: Matrix<R>,
    /// Candidate probabilities: in-batch positives `[B·T × B]`.
    p_pos: Matrix<R>,
    /// Candidate probabilities: shared negatives `[B·T × N]`.
    p_neg: Matrix<R>,
    pub stats: KernelStats,
}

/// InfoNCE where one negative set serves every row and the positives of
/// the other samples at the same step join each row's candidate set.
///
/// Rows are `i·T + j`. Candidates of row `(i, j)` are the positives of all
/// valid rows `(l, j)` plus every shared negative. With `dedup_positive`
/// negatives equal to the row's own positive are skipped, which turns an
/// all-indices negative set into an exact full softmax.
pub fn shared_infonce<R: Real>(
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    batch: usize,
    negatives: &[u32],
    dedup_positive: bool,
) -> Result<SharedInfoNce<R>> {
    let rows = h.rows;
    let k = h.cols;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape(format!(
            "{rows} rows not divisible by batch {batch}"
        )));
    }
    check_rows(rows, y.len(), mask.len())?;
    if e.cols != k {
        return Err(Error::Shape(format!(
            "hidden width {k} vs table width {}",
            e.cols
        )));
    }
    let steps = rows / batch;
    let n = negatives.len();
    let positives = gather_rows(e, y)?;
    let negative_rows = gather_rows(e, negatives)?;
    let mut p_pos: Matrix<R> = Matrix::zeros(rows, batch);
    for j in 0..steps {
        // D_pos[(i,j), l] = H[(i,j)] · P[(l,j)] over strided step-j rows.
        // SAFETY: offsets and strides stay within the three matrices.
        unsafe {
            R::gemm_raw(
                batch,
                k,
                batch,
                R::one(),
                h.data.as_ptr().add(j * k),
                (steps * k) as isize,
                1,
                positives.data.as_ptr().add(j * k),
                1,
                (steps * k) as isize,
                R::zero(),
                p_pos.data.as_mut_ptr().add(j * batch),
                (steps * batch) as isize,
                1,
            );
        }
    }
    let mut p_neg = Matrix::zeros(rows, n);
    if n > 0 {
        gemm(
            R::one(),
            h,
            false,
            &negative_rows,
            true,
            R::zero(),
            &mut p_neg,
        );
    }
    let mut per_row = vec![R::zero(); rows];
    let w = row_weight::<R>(mask);
    let mut total = R::zero();
    for r in 0..rows {
        let (i, j) = (r / steps, r % steps);
        if !mask[r] {
            p_pos.row_mut(r).iter_mut().for_each(|x| *x = R::zero());
            p_neg.row_mut(r).iter_mut().for_each(|x| *x = R::zero());
            continue;
        }
        let own = y[r];
        let pos_ok = |l: usize| mask[l * steps + j];
        let neg_ok = |m: usize| !(dedup_positive && negatives[m] == own);
        let mut mx = R::neg_infinity();
        for l in (0..batch).filter(|&l| pos_ok(l)) {
            mx = mx.max(p_pos.get(r, l));
        }
        for m in (0..n).filter(|&m| neg_ok(m)) {
            mx = mx.max(p_neg.get(r, m));
        }
        let mut z = R::zero();
        for l in 0..batch {
            let v = if pos_ok(l) {
                (p_pos.get(r, l) - mx).exp()
            } else {
                R::zero()
            };
            z = z + v;
        }
        for m in 0..n {
            let v = if neg_ok(m) {
                (p_neg.get(r, m) - mx).exp()
            } else {
                R::zero()
            };
            z = z + v;
        }
        let lse = mx + z.ln();
        let loss = (lse - p_pos.get(r, i)).max(R::zero());
        per_row[r] = loss;
        total = total + loss;
        for l in 0..batch {
            let v = &mut p_pos.data[r * batch + l];
            *v = if pos_ok(l) {
                (*v - lse).exp()
            } else {
                R::zero()
            };
        }
        for m in 0..n {
            let v = &mut p_neg.data[r * n + m];
            *v = if neg_ok(m) {
                (*v - lse).exp()
            } else {
                R::zero()
            };
        }
    }
    let stats = KernelStats {
        intermediate_elements: positives.len() + negative_rows.len() + p_pos.len() + p_neg.len(),
        resident_elements: 2 * (h.len() + e.len()),
    };
    Ok(SharedInfoNce {
        batch,
        steps,
        negatives: negatives.to_vec(),
        per_row,
        loss: total * w,
        positives,
        negative_rows,
        p_pos,
        p_neg,
        stats,
    })
}

/// Gradients `(dH, dE)` of `g · loss`.
pub fn shared_infonce_backward<R: Real>(
    st: &SharedInfoNce<R>,
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    g: R,
) -> (Matrix<R>, Matrix<R>) {
    let (batch, steps, k) = (st.batch, st.steps, h.cols);
    let rows = h.rows;
    let w = row_weight::<R>(mask) * g;
    // dD = w·(p − onehot(own positive)) on valid rows.
    let mut d_pos = st.p_pos.clone();
    let mut d_neg = st.p_neg.clone();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        for v in d_pos.row_mut(r) {
            *v = *v * w;
        }
        for v in d_neg.row_mut(r) {
            *v = *v * w;
        }
        let i = r / steps;
        d_pos.data[r * batch + i] = d_pos.data[r * batch + i] - w;
    }
    let mut dh: Matrix<R> = Matrix::zeros(rows, k);
    let mut dp: Matrix<R> = Matrix::zeros(rows, k);
    for j in 0..steps {
        // SAFETY: same strided views as the forward pass.
        unsafe {
            // dH[(i,j)] += Σ_l dD[(i,j),l] P[(l,j)]
            R::gemm_raw(
                batch,
                batch,
                k,
                R::one(),
                d_pos.data.as_ptr().add(j * batch),
                (steps * batch) as isize,
                1,
                st.positives.data.as_ptr().add(j * k),
                (steps * k) as isize,
                1,
                R::zero(),
                dh.data.as_mut_ptr().add(j * k),
                (steps * k) as isize,
                1,
            );
            // dP[(l,j)] = Σ_i dD[(i,j),l] H[(i,j)]
            R::gemm_raw(
                batch,
                batch,
                k,
                R::one(),
                d_pos.data.as_ptr().add(j * batch),
                1,
                (steps * batch) as isize,
                h.data.as_ptr().add(j * k),
                (steps * k) as isize,
                1,
                R::zero(),
                dp.data.as_mut_ptr().add(j * k),
                (steps * k) as isize,
                1,
            );
        }
    }
    let n = st.negatives.len();
    let mut de = Matrix::zeros(e.rows, k);
    if n > 0 {
        gemm(
            R::one(),
            &d_neg,
            false,
            &st.negative_rows,
            false,
            R::one(),
            &mut dh,
        );
        let dn = matmul(&d_neg, true, h, false);
        scatter_add(&mut de, &st.negatives, &dn);
    }
    scatter_add(&mut de, y, &dp);
    (dh, de)
}

// ---------------------------------------------------------------------------
// High-cardinality categorical: independent negatives per position.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IndependentInfoNce<R> {
    pub n_per_positive: usize,
    pub negatives: Vec<u32>,
    pub per_row: Vec<R>,
    pub loss: R,
    positives: Matrix<R>,
    /// `[B·T·n × k]`, one block of `n` rows per position.
    negative_rows: Matrix<R>,
    /// `[B·T × (n+1)]`, column 0 is the positive.
    probs: Matrix<R>,
    pub stats: KernelStats,
}

/// InfoNCE where each row has its own `n_per_positive` negatives
/// (`negatives[r·n .. (r+1)·n]`) and no cross-sample candidates.
pub fn independent_infonce<R: Real>(
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    negatives: &[u32],
    n_per_positive: usize,
) -> Result<IndependentInfoNce<R>> {
    let rows = h.rows;
    check_rows(rows, y.len(), mask.len())?;
    if negatives.len() != rows * n_per_positive {
        return Err(Error::Shape(format!(
            "expected {} negatives, got {}",
            rows * n_per_positive,
            negatives.len()
        )));
    }
    let positives = gather_rows(e, y)?;
    let negative_rows = gather_rows(e, negatives)?;
    let n = n_per_positive;
    let mut probs = Matrix::zeros(rows, n + 1);
    let w = row_weight::<R>(mask);
    let mut per_row = vec![R::zero(); rows];
    let mut total = R::zero();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let hr = h.row(r);
        let row = probs.row_mut(r);
        row[0] = dot(hr, positives.row(r));
        for m in 0..n {
            row[m + 1] = dot(hr, negative_rows.row(r * n + m));
        }
        let lse = logsumexp(row.iter().copied());
        let loss = (lse - row[0]).max(R::zero());
        per_row[r] = loss;
        total = total + loss;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    let stats = KernelStats {
        intermediate_elements: positives.len() + negative_rows.len() + probs.len(),
        resident_elements: 2 * (h.len() + e.len()),
    };
    Ok(IndependentInfoNce {
        n_per_positive,
        negatives: negatives.to_vec(),
        per_row,
        loss: total * w,
        positives,
        negative_rows,
        probs,
        stats,
    })
}

pub fn independent_infonce_backward<R: Real>(
    st: &IndependentInfoNce<R>,
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    g: R,
) -> (Matrix<R>, Matrix<R>) {
    let (rows, k, n) = (h.rows, h.cols, st.n_per_positive);
    let w = row_weight::<R>(mask) * g;
    let mut dh = Matrix::zeros(rows, k);
    let mut dp = Matrix::zeros(rows, k);
    let mut dn = Matrix::zeros(rows * n, k);
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let p = st.probs.row(r);
        let c0 = (p[0] - R::one()) * w;
        let hr = h.row(r).to_vec();
        for c in 0..k {
            dh.data[r * k + c] = dh.data[r * k + c] + c0 * st.positives.get(r, c);
            dp.data[r * k + c] = c0 * hr[c];
        }
        for m in 0..n {
            let cm = p[m + 1] * w;
            let nr = r * n + m;
            for c in 0..k {
                dh.data[r * k + c] = dh.data[r * k + c] + cm * st.negative_rows.get(nr, c);
                dn.data[nr * k + c] = cm * hr[c];
            }
        }
    }
    let mut de = Matrix::zeros(e.rows, k);
    scatter_add(&mut de, y, &dp);
    scatter_add(&mut de, &st.negatives, &dn);
    (dh, de)
}

// ---------------------------------------------------------------------------
// Exhaustive: full softmax over the table, computed in row chunks.
// ---------------------------------------------------------------------------

const EXHAUSTIVE_CHUNK: usize = 256;

/// Full-vocabulary cross-entropy of logits `H·Eᵀ`. Returns the masked mean
/// and per-row losses.
pub fn exhaustive_ce<R: Real>(
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
) -> Result<(R, Vec<R>)> {
    exhaustive_impl(h, e, y, mask, None)
}

/// Gradients `(dH, dE)` of `g · exhaustive_ce`.
pub fn exhaustive_ce_backward<R: Real>(
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    g: R,
) -> Result<(Matrix<R>, Matrix<R>)> {
    let mut dh = Matrix::zeros(h.rows, h.cols);
    let mut de = Matrix::zeros(e.rows, e.cols);
    exhaustive_impl(h, e, y, mask, Some((g, &mut dh, &mut de)))?;
    Ok((dh, de))
}

type ExhaustiveGrads<'a, R> = (R, &'a mut Matrix<R>, &'a mut Matrix<R>);

fn exhaustive_impl<R: Real>(
    h: &Matrix<R>,
    e: &Matrix<R>,
    y: &[u32],
    mask: &[bool],
    mut grads: Option<ExhaustiveGrads<'_, R>>,
) -> Result<(R, Vec<R>)> {
    if e.rows > EXHAUSTIVE_MAX_CARDINALITY {
        return Err(Error::Invalid(format!(
            "exhaustive loss refuses cardinality {} > {}",
            e.rows, EXHAUSTIVE_MAX_CARDINALITY
        )));
    }
    check_rows(h.rows, y.len(), mask.len())?;
    let w = row_weight::<R>(mask);
    let k = h.cols;
    let mut per_row = vec![R::zero(); h.rows];
    let mut total = R::zero();
    let mut start = 0;
    while start < h.rows {
        let end = (start + EXHAUSTIVE_CHUNK).min(h.rows);
        let hc = Matrix::from_vec(end - start, k, h.data[start * k..end * k].to_vec());
        let mut logits = matmul(&hc, false, e, true);
        for (lr, r) in (start..end).enumerate() {
            if !mask[r] {
                logits.row_mut(lr).iter_mut().for_each(|x| *x = R::zero());
                continue;
            }
            let t = y[r] as usize;
            if t >= e.rows {
                return Err(Error::IndexOutOfRange {
                    attribute: String::new(),
                    index: t,
                    cardinality: e.rows,
                });
            }
            let row = logits.row_mut(lr);
            let lse = logsumexp(row.iter().copied());
            let loss = lse - row[t];
            per_row[r] = loss;
            total = total + loss;
            if let Some((g, _, _)) = grads.as_ref() {
                let s = w * *g;
                for v in row.iter_mut() {
                    *v = (*v - lse).exp() * s;
                }
                row[t] = row[t] - s;
            }
        }
        if let Some((_, dh, de)) = grads.as_mut() {
            let mut dhc = Matrix::zeros(end - start, k);
            gemm(R::one(), &logits, false, e, false, R::zero(), &mut dhc);
            dh.data[start * k..end * k].copy_from_slice(&dhc.data);
            gemm(R::one(), &logits, true, &hc, false, R::one(), de);
        }
        start = end;
    }
    Ok((total * w, per_row))
}

// ---------------------------------------------------------------------------
// Row helpers
// ---------------------------------------------------------------------------

pub fn gather_rows<R: Real>(e: &Matrix<R>, idx: &[u32]) -> Result<Matrix<R>> {
    let k = e.cols;
    let mut out = Matrix::zeros(idx.len(), k);
    for (o, &i) in idx.iter().enumerate() {
        let i = i as usize;
        if i >= e.rows {
            return Err(Error::IndexOutOfRange {
                attribute: String::new(),
                index: i,
                cardinality: e.rows,
            });
        }
        out.data[o * k..(o + 1) * k].copy_from_slice(e.row(i));
    }
    Ok(out)
}

pub fn scatter_add<R: Real>(dst: &mut Matrix<R>, idx: &[u32], src: &Matrix<R>) {
    let k = dst.cols;
    for (s, &i) in idx.iter().enumerate() {
        let d = &mut dst.data[i as usize * k..(i as usize + 1) * k];
        for (a, &b) in d.iter_mut().zip(src.row(s)) {
            *a = *a + b;
        }
    }
}

// ---------------------------------------------------------------------------
// Analytic element counts
// ---------------------------------------------------------------------------

/// Intermediate elements of the shared kernel: positives, negatives and
/// the `(B + N)` candidate scores of every row.
pub fn shared_intermediate_elements(b: usize, t: usize, n: usize, k: usize) -> usize {
    b * t * k + n * k + b * t * (b + n)
}

/// Intermediate elements of the independent kernel: `N` gathered rows per
/// position dominate.
pub fn independent_intermediate_elements(b: usize, t: usize, n: usize, k: usize) -> usize {
    b * t * n * k + b * t * k + b * t * (n + 1)
}

/// Inputs read by either kernel plus their dense gradients.
pub fn resident_elements(b: usize, t: usize, k: usize, cardinality: usize) -> usize {
    2 * (b * t * k + cardinality * k)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Pivot loss plus the mean of the other losses, each capped at the
    /// pivot's value with its gradient rescaled accordingly.
    #[default]
    Treasure,
    /// Plain sum.
    Simple,
    /// Each loss divided by its own detached value.
    Equal,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treasure" => Ok(Self::Treasure),
            "simple" => Ok(Self::Simple),
            "equal" => Ok(Self::Equal),
            _ => Err(Error::config(
                "aggregation_mode",
                format!("unknown mode `{s}`"),
            )),
        }
    }
}

/// Per-loss coefficients `c_i`; the aggregate is `Σ c_i L_i` with the
/// coefficients treated as constants. `losses` holds detached values in
/// report order; `pivot` indexes the pivot loss, if active.
pub fn aggregation_coefficients(
    mode: AggregationMode,
    losses: &[f64],
    pivot: Option<usize>,
) -> Vec<f64> {
    match mode {
        AggregationMode::Simple => vec![1.0; losses.len()],
        AggregationMode::Equal => losses
            .iter()
            .map(|&l| if l > 0.0 { 1.0 / l } else { 0.0 })
            .collect(),
        AggregationMode::Treasure => {
            let Some(p) = pivot else {
                // Without a pivot every loss is its own reference.
                return vec![1.0; losses.len()];
            };
            let abn = losses[p];
            let others = losses.len() - 1;
            losses
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    if i == p {
                        1.0
                    } else if l <= 0.0 {
                        0.0
                    } else if l <= abn {
                        1.0 / others as f64
                    } else {
                        abn / l / others as f64
                    }
                })
                .collect()
        }
    }
}

pub fn aggregate_value(mode: AggregationMode, losses: &[f64], pivot: Option<usize>) -> f64 {
    aggregation_coefficients(mode, losses, pivot)
        .iter()
        .zip(losses)
        .map(|(c, l)| c * l)
        .sum()
}

/// Per-attribute losses of one evaluation, plus the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub losses: BTreeMap<String, f64>,
    pub pivot: Option<String>,
    pub aggregate: f64,
}

impl LossReport {
    pub fn new(entries: Vec<(String, f64)>, pivot: Option<&str>, mode: AggregationMode) -> Self {
        let values: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let p = pivot.and_then(|p| entries.iter().position(|e| e.0 == p));
        let aggregate = aggregate_value(mode, &values, p);
        LossReport {
            losses: entries.into_iter().collect(),
            pivot: p.and(pivot.map(str::to_string)),
            aggregate,
        }
    }

    pub fn pivot_loss(&self) -> Option<f64> {
        self.pivot
            .as_ref()
            .and_then(|p| self.losses.get(p).copied())
    }

    /// Recomputes the aggregate from the entries.
    pub fn recompute(&self, mode: AggregationMode) -> f64 {
        let names: Vec<&String> = self.losses.keys().collect();
        let values: Vec<f64> = self.losses.values().copied().collect();
        let p = self
            .pivot
            .as_ref()
            .and_then(|p| names.iter().position(|n| *n == p));
        aggregate_value(mode, &values, p)
    }
}
