//! Representative benchmark subsetting by token-length histogram matching.
//!
//! A subset is drawn in two stages. First each length bin gets a quota
//! proportional to its size (largest-remainder rounding so the quotas sum
//! to the target size) and members are drawn uniformly within bins. Then
//! greedy swaps move one member between bins whenever that lowers
//! `KL(subset || full)`, until no swap helps or `10 * |subset|` swaps have
//! been made. Both histograms are smoothed with the same additive `alpha`.

use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 30;
pub const DEFAULT_SMOOTHING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("smoothing must be >= 0 and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("histograms have different bin edges")]
    BinMismatch,
    #[error("reference histogram is zero in bin {0} where the other is not")]
    UnsupportedZero(usize),
    #[error("fraction must be in (0, 1] and select at least one item, got {0}")]
    FractionOutOfRange(f64),
    #[error("token lengths must be positive (line {line})")]
    NonPositiveLength { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token-length histogram with additive smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLengthHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub smoothing_alpha: f64,
}

impl TokenLengthHistogram {
    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(count + alpha) / (N + alpha * B)` per bin.
    pub fn probabilities(&self) -> Vec<f64> {
        let denom = self.total() as f64 + self.smoothing_alpha * self.num_bins() as f64;
        self.counts
            .iter()
            .map(|&c| {
                if denom == 0.0 {
                    0.0
                } else {
                    (c as f64 + self.smoothing_alpha) / denom
                }
            })
            .collect()
    }
}

/// Equal-width edges spanning `[min, max]`. When every value is equal the
/// span is widened to `[min, min + 1]` so edges stay strictly increasing.
pub fn equal_width_edges(min: u64, max: u64, num_bins: usize) -> Vec<f64> {
    let lo = min as f64;
    let hi = if max > min { max as f64 } else { lo + 1.0 };
    let width = (hi - lo) / num_bins as f64;
    let mut edges: Vec<f64> = (0..num_bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);
    edges
}

/// Bin of `x`: the bin whose lower edge is `<= x`, with the last edge
/// belonging to the last bin. Values outside the edges clamp.
pub fn bin_index(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    let interior = &edges[1..bins];
    interior.partition_point(|&e| e <= x)
}

fn validate_smoothing(alpha: f64) -> Result<(), SamplerError> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(SamplerError::InvalidSmoothing(alpha))
    }
}

pub fn histogram(
    lengths: &[u64],
    num_bins: usize,
    smoothing_alpha: f64,
) -> Result<TokenLengthHistogram, SamplerError> {
    if num_bins < 2 {
        return Err(SamplerError::TooFewBins(num_bins));
    }
    let min = *lengths.iter().min().ok_or(SamplerError::EmptyDataset)?;
    let max = *lengths.iter().max().ok_or(SamplerError::EmptyDataset)?;
    let edges = equal_width_edges(min, max, num_bins);
    histogram_with_edges(lengths.iter().copied(), edges, smoothing_alpha)
}

pub fn histogram_with_edges(
    lengths: impl IntoIterator<Item = u64>,
    bin_edges: Vec<f64>,
    smoothing_alpha: f64,
) -> Result<TokenLengthHistogram, SamplerError> {
    validate_smoothing(smoothing_alpha)?;
    if bin_edges.len() < 3 {
        return Err(SamplerError::TooFewBins(bin_edges.len().saturating_sub(1)));
    }
    let mut counts = vec![0u64; bin_edges.len() - 1];
    for x in lengths {
        counts[bin_index(&bin_edges, x as f64)] += 1;
    }
    Ok(TokenLengthHistogram {
        bin_edges,
        counts,
        smoothing_alpha,
    })
}

/// `sum_b p_b ln(p_b / q_b)` over bins with `p_b > 0`, in nats.
pub fn kl_divergence(
    p: &TokenLengthHistogram,
    q: &TokenLengthHistogram,
) -> Result<f64, SamplerError> {
    if p.bin_edges != q.bin_edges {
        return Err(SamplerError::BinMismatch);
    }
    kl_from_probabilities(&p.probabilities(), &q.probabilities())
}

fn kl_from_probabilities(p: &[f64], q: &[f64]) -> Result<f64, SamplerError> {
    let mut kl = 0.0;
    for (b, (&pb, &qb)) in p.iter().zip(q).enumerate() {
        if pb > 0.0 {
            if qb <= 0.0 {
                return Err(SamplerError::UnsupportedZero(b));
            }
            kl += pb * (pb / qb).ln();
        }
    }
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub indices: Vec<usize>,
    pub achieved_kl_nats: f64,
    pub fraction: f64,
    pub num_bins: usize,
    pub seed: u64,
    /// KL after stratified allocation, then after each accepted swap.
    pub kl_history: Vec<f64>,
}

/// Target subset size `round(fraction * n)`.
pub fn subset_size(fraction: f64, n: usize) -> Result<usize, SamplerError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SamplerError::FractionOutOfRange(fraction));
    }
    let k = (fraction * n as f64).round() as usize;
    if k < 1 {
        return Err(SamplerError::FractionOutOfRange(fraction));
    }
    Ok(k.min(n))
}

/// Largest-remainder apportionment of `k` items across bins proportional to `counts`.
pub fn proportional_quotas(counts: &[u64], k: usize) -> Vec<u64> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas = Vec::with_capacity(counts.len());
    let mut remainders = Vec::with_capacity(counts.len());
    for (b, &c) in counts.iter().enumerate() {
        // Exact integer arithmetic: floor(k * c / n) and its remainder.
        let num = k as u128 * c as u128;
        quotas.push((num / n as u128) as u64);
        remainders.push((num % n as u128, b));
    }
    let assigned: u64 = quotas.iter().sum();
    let mut left = k as u64 - assigned;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, b) in &remainders {
        if left == 0 {
            break;
        }
        if quotas[b] < counts[b] {
            quotas[b] += 1;
            left -= 1;
        }
    }
    quotas
}

/// KL(subset || full) from per-bin subset counts, with fixed reference probabilities.
struct SwapScorer<'a> {
    alpha: f64,
    denom: f64,
    q: &'a [f64],
}

impl SwapScorer<'_> {
    fn term(&self, count: u64, b: usize) -> f64 {
        let p = (count as f64 + self.alpha) / self.denom;
        if p > 0.0 {
            p * (p / self.q[b]).ln()
        } else {
            0.0
        }
    }

    fn kl(&self, counts: &[u64]) -> f64 {
        counts
            .iter()
            .enumerate()
            .map(|(b, &c)| self.term(c, b))
            .sum::<f64>()
            .max(0.0)
    }
}

pub fn sample_subset(
    lengths: &[u64],
    fraction: f64,
    num_bins: usize,
    seed: u64,
) -> Result<SubsetPlan, SamplerError> {
    sample_subset_with(lengths, fraction, num_bins, DEFAULT_SMOOTHING, seed)
}

pub fn sample_subset_with(
    lengths: &[u64],
    fraction: f64,
    num_bins: usize,
    smoothing_alpha: f64,
    seed: u64,
) -> Result<SubsetPlan, SamplerError> {
    if lengths.is_empty() {
        return Err(SamplerError::EmptyDataset);
    }
    let k = subset_size(fraction, lengths.len())?;
    let full = histogram(lengths, num_bins, smoothing_alpha)?;
    let edges = &full.bin_edges;

    // Members of each bin in a seeded random order; the first `quota` are selected.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_bins];
    for (i, &len) in lengths.iter().enumerate() {
        members[bin_index(edges, len as f64)].push(i);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut selected = proportional_quotas(&full.counts, k);

    let q = full.probabilities();
    if let Some(b) = q.iter().zip(&full.counts).position(|(&qb, &c)| qb <= 0.0 && c > 0) {
        return Err(SamplerError::UnsupportedZero(b));
    }
    let scorer = SwapScorer {
        alpha: smoothing_alpha,
        denom: k as f64 + smoothing_alpha * num_bins as f64,
        q: &q,
    };
    let mut kl = scorer.kl(&selected);
    let mut history = vec![kl];

    let max_swaps = 10 * k;
    while history.len() <= max_swaps {
        let mut best: Option<(f64, usize, usize)> = None;
        for from in (0..num_bins).filter(|&b| selected[b] > 0) {
            let remove = scorer.term(selected[from] - 1, from) - scorer.term(selected[from], from);
            for to in (0..num_bins).filter(|&b| b != from && selected[b] < full.counts[b]) {
                if q[to] <= 0.0 {
                    continue;
                }
                let add = scorer.term(selected[to] + 1, to) - scorer.term(selected[to], to);
                let delta = remove + add;
                if best.is_none_or(|(d, _, _)| delta < d) {
                    best = Some((delta, from, to));
                }
            }
        }
        match best {
            Some((delta, from, to)) if delta < -1e-15 => {
                selected[from] -= 1;
                selected[to] += 1;
                let next = scorer.kl(&selected);
                if next >= kl {
                    // Rounding disagreed with the incremental delta; stop here.
                    selected[from] += 1;
                    selected[to] -= 1;
                    break;
                }
                kl = next;
                history.push(kl);
            }
            _ => break,
        }
    }

    let mut indices: Vec<usize> = members
        .iter()
        .zip(&selected)
        .flat_map(|(m, &take)| m[..take as usize].iter().copied())
        .collect();
    indices.sort_unstable();

    let subset = histogram_with_edges(
        indices.iter().map(|&i| lengths[i]),
        full.bin_edges.clone(),
        smoothing_alpha,
    )?;
    let achieved = kl_divergence(&subset, &full)?;

    Ok(SubsetPlan {
        indices,
        achieved_kl_nats: achieved,
        fraction,
        num_bins,
        seed,
        kl_history: history,
    })
}

/// Reads one positive integer per line; blank lines are skipped.
pub fn read_lengths(reader: impl BufRead) -> Result<Vec<u64>, SamplerError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let v: u64 = text.parse().map_err(|e| SamplerError::Parse {
            line: i + 1,
            message: format!("`{text}`: {e}"),
        })?;
        if v == 0 {
            return Err(SamplerError::NonPositiveLength { line: i + 1 });
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(SamplerError::EmptyDataset);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PlanHeader {
    size: usize,
    fraction: f64,
    num_bins: usize,
    seed: u64,
    achieved_kl_nats: f64,
}

/// One-line JSON header followed by one selected index per line.
pub fn write_plan(plan: &SubsetPlan, mut out: impl Write) -> io::Result<()> {
    let header = PlanHeader {
        size: plan.indices.len(),
        fraction: plan.fraction,
        num_bins: plan.num_bins,
        seed: plan.seed,
        achieved_kl_nats: plan.achieved_kl_nats,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for i in &plan.indices {
        writeln!(out, "{i}")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, LogNormal};

    pub(crate) fn lognormal_lengths(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = LogNormal::new(4.5, 0.6).unwrap();
        (0..n).map(|_| (d.sample(&mut rng) as u64).max(1)).collect()
    }

    #[test]
    fn two_bins() {
        let h = histogram(&(1..=10).collect::<Vec<_>>(), 2, 0.0).unwrap();
        assert_eq!(h.counts, [5, 5]);
    }

    #[test]
    fn equal_lengths_single_bin() {
        for bins in [2, 7, 30] {
            let h = histogram(&[42; 17], bins, 0.5).unwrap();
            assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
            assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn edge_values_go_to_upper_bin_except_max() {
        // Edges 0, 5, 10: 5 starts the second bin, 10 closes it.
        let h = histogram(&[0, 5, 10], 2, 0.0).unwrap();
        assert_eq!(h.counts, [1, 2]);
        let h = histogram(&[0, 4, 10], 2, 0.0).unwrap();
        assert_eq!(h.counts, [2, 1]);
    }

    #[test]
    fn histogram_errors() {
        assert!(matches!(histogram(&[], 4, 0.5), Err(SamplerError::EmptyDataset)));
        assert!(matches!(histogram(&[1, 2], 1, 0.5), Err(SamplerError::TooFewBins(1))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let h = histogram(&lognormal_lengths(10_000, 1), 30, 0.5).unwrap();
        let sum: f64 = h.probabilities().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_examples() {
        let edges = vec![0.0, 1.0, 2.0];
        let p = TokenLengthHistogram {
            bin_edges: edges.clone(),
            counts: vec![1, 1],
            smoothing_alpha: 0.0,
        };
        let q = TokenLengthHistogram {
            bin_edges: edges.clone(),
            counts: vec![1, 3],
            smoothing_alpha: 0.0,
        };
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.1438).abs() <= 1e-4);

        let zero_q = TokenLengthHistogram {
            counts: vec![2, 0],
            ..q.clone()
        };
        assert!(matches!(
            kl_divergence(&p, &zero_q),
            Err(SamplerError::UnsupportedZero(1))
        ));
        let other = TokenLengthHistogram {
            bin_edges: vec![0.0, 1.5, 2.0],
            ..q
        };
        assert!(matches!(kl_divergence(&p, &other), Err(SamplerError::BinMismatch)));
    }

    #[test]
    fn quotas_sum_exactly() {
        assert_eq!(proportional_quotas(&[5, 5, 5], 2), [1, 1, 0]);
        assert_eq!(proportional_quotas(&[10, 20, 30], 6), [1, 2, 3]);
        let q = proportional_quotas(&[3, 3, 3, 1], 5);
        assert_eq!(q.iter().sum::<u64>(), 5);
    }

    #[test]
    fn full_fraction_is_exact() {
        let lengths = lognormal_lengths(500, 3);
        let plan = sample_subset(&lengths, 1.0, 30, 7).unwrap();
        assert_eq!(plan.indices, (0..500).collect::<Vec<_>>());
        assert_eq!(plan.achieved_kl_nats, 0.0);
    }

    #[test]
    fn paper_sized_subset() {
        let lengths = lognormal_lengths(2_380, 11);
        let plan = sample_subset(&lengths, 0.1, 30, 1).unwrap();
        assert_eq!(plan.indices.len(), 238);
        assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fraction_bounds() {
        let lengths = [1, 2, 3];
        for f in [0.0, -0.1, 1.5, f64::NAN, 0.1] {
            assert!(matches!(
                sample_subset(&lengths, f, 4, 0),
                Err(SamplerError::FractionOutOfRange(_))
            ));
        }
    }

    #[test]
    fn lognormal_subset_matches() {
        let lengths = lognormal_lengths(10_000, 5);
        let plan = sample_subset(&lengths, 0.1, 30, 9).unwrap();
        assert_eq!(plan.indices.len(), 1_000);
        assert!(plan.achieved_kl_nats <= 0.05, "{}", plan.achieved_kl_nats);
        assert!(plan.kl_history.windows(2).all(|w| w[1] <= w[0]));
        let last = *plan.kl_history.last().unwrap();
        assert!((last - plan.achieved_kl_nats).abs() < 1e-12);
        assert_eq!(sample_subset(&lengths, 0.1, 30, 9).unwrap(), plan);
    }

    #[test]
    fn read_lengths_parses() {
        let v = read_lengths("3\n\n 17 \n5\n".as_bytes()).unwrap();
        assert_eq!(v, [3, 17, 5]);
        assert!(matches!(
            read_lengths("3\nx\n".as_bytes()),
            Err(SamplerError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_lengths("0\n".as_bytes()),
            Err(SamplerError::NonPositiveLength { line: 1 })
        ));
    }

    #[test]
    fn plan_file_layout() {
        let plan = SubsetPlan {
            indices: vec![1, 4],
            achieved_kl_nats: 0.25,
            fraction: 0.5,
            num_bins: 2,
            seed: 3,
            kl_history: vec![0.25],
        };
        let mut buf = Vec::new();
        write_plan(&plan, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"size\":2,\"fraction\":0.5,\"num_bins\":2,\"seed\":3,\"achieved_kl_nats\":0.25}\n1\n4\n"
        );
    }

    proptest! {
        #[test]
        fn kl_nonnegative(a in prop::collection::vec(0u64..50, 5), b in prop::collection::vec(0u64..50, 5)) {
            let edges: Vec<f64> = (0..6).map(|i| i as f64).collect();
            let p = TokenLengthHistogram { bin_edges: edges.clone(), counts: a.clone(), smoothing_alpha: 0.5 };
            let q = TokenLengthHistogram { bin_edges: edges, counts: b.clone(), smoothing_alpha: 0.5 };
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            if p.probabilities() == q.probabilities() {
                prop_assert_eq!(kl, 0.0);
            }
        }

        #[test]
        fn subset_size_exact(n in 1usize..400, f in 0.01f64..=1.0, seed in 0u64..1000) {
            let lengths: Vec<u64> = (0..n as u64).map(|i| 1 + (i * 7919) % 313).collect();
            if let Ok(k) = subset_size(f, n) {
                let plan = sample_subset(&lengths, f, 10, seed).unwrap();
                prop_assert_eq!(plan.indices.len(), k);
                prop_assert!(plan.kl_history.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }
}
