use super::{QuantizedPmf, PMF_TOTAL};
use crate::error::{Error, Result};

/// Maps non-negative scores to a [`QuantizedPmf`].
///
/// Each token gets `1 + floor(score·(PMF_TOTAL − D) / S)`. The units left
/// over go one each to the tokens with the largest fractional parts, lower
/// token id first on ties. An all-zero score vector is treated as all ones.
pub fn quantize_scores(scores: &[u64]) -> Result<QuantizedPmf> {
    let d = scores.len();
    let limit = (PMF_TOTAL / 2) as usize;
    if d == 0 {
        return Err(Error::InvalidPmf("empty score vector".into()));
    }
    if d > limit {
        return Err(Error::VocabularyTooLarge { size: d, limit });
    }

    let sum: u128 = scores.iter().map(|&s| u128::from(s)).sum();
    let (sum, all_zero) = if sum == 0 { (d as u128, true) } else { (sum, false) };
    let free = u128::from(PMF_TOTAL) - d as u128;
    let narrow = sum.checked_mul(free).is_some_and(|p| p <= u128::from(u64::MAX));
    let split = |s: u64| -> (u32, u128) {
        if narrow {
            let (scaled, sum) = (s * free as u64, sum as u64);
            let q = scaled / sum;
            (1 + q as u32, u128::from(scaled - q * sum))
        } else {
            let scaled = u128::from(s) * free;
            let q = scaled / sum;
            (1 + q as u32, scaled - q * sum)
        }
    };

    // Most tokens usually sit at the minimum score; they share one weight and
    // one remainder, so only the others need dividing and ranking.
    let score = |raw: u64| if all_zero { 1 } else { raw };
    let floor = scores.iter().map(|&s| score(s)).min().unwrap_or(0);
    let (w0, r0) = split(floor);

    let mut weights = Vec::with_capacity(d);
    let mut above: Vec<(u128, u32)> = Vec::new();
    let mut below: Vec<(u128, u32)> = Vec::new();
    let mut assigned: u64 = 0;
    for (t, &raw) in scores.iter().enumerate() {
        let s = score(raw);
        let w = if s == floor {
            w0
        } else {
            let (w, rem) = split(s);
            match rem.cmp(&r0) {
                std::cmp::Ordering::Greater => above.push((rem, t as u32)),
                std::cmp::Ordering::Less => below.push((rem, t as u32)),
                std::cmp::Ordering::Equal => {}
            }
            w
        };
        assigned += u64::from(w);
        weights.push(w);
    }

    // Leftover units go by remainder descending, then id ascending: first the
    // tokens above r0, then the tie block at r0 in id order, then the rest.
    let mut residue = (u64::from(PMF_TOTAL) - assigned) as usize;
    debug_assert!(residue < d);
    let by_remainder = |a: &(u128, u32), b: &(u128, u32)| b.0.cmp(&a.0).then(a.1.cmp(&b.1));
    let grant = |list: &mut Vec<(u128, u32)>, weights: &mut Vec<u32>, n: usize| {
        if n > 0 && n < list.len() {
            list.select_nth_unstable_by(n - 1, by_remainder);
        }
        for &(_, t) in &list[..n.min(list.len())] {
            weights[t as usize] += 1;
        }
        n.min(list.len())
    };
    residue -= grant(&mut above, &mut weights, residue);
    if residue > 0 {
        for (t, &raw) in scores.iter().enumerate() {
            if residue == 0 {
                break;
            }
            let s = score(raw);
            if s == floor || split(s).1 == r0 {
                weights[t] += 1;
                residue -= 1;
            }
        }
    }
    residue -= grant(&mut below, &mut weights, residue);
    debug_assert_eq!(residue, 0);
    Ok(QuantizedPmf::from_valid(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    /// Largest-remainder rounding done with exact rationals and a full sort.
    fn oracle(scores: &[u64]) -> Vec<u32> {
        let d = scores.len() as u128;
        let s: u128 = scores.iter().map(|&x| u128::from(x)).sum();
        let free = u128::from(PMF_TOTAL) - d;
        let quotas: Vec<Ratio<u128>> = scores
            .iter()
            .map(|&x| Ratio::new(u128::from(x) * free, s))
            .collect();
        let mut w: Vec<u32> = quotas.iter().map(|q| 1 + q.floor().to_integer() as u32).collect();
        let r = PMF_TOTAL as usize - w.iter().map(|&x| x as usize).sum::<usize>();
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| quotas[b].fract().cmp(&quotas[a].fract()).then(a.cmp(&b)));
        for &t in &idx[..r] {
            w[t] += 1;
        }
        w
    }

    #[test]
    fn uniform_when_d_divides_total() {
        for d in [1usize, 2, 4, 256, 4096] {
            let pmf = quantize_scores(&vec![7; d]).unwrap();
            assert!(pmf.weights().iter().all(|&w| w == PMF_TOTAL / d as u32));
        }
    }

    #[test]
    fn point_mass() {
        let pmf = quantize_scores(&[1, 0, 0]).unwrap();
        assert_eq!(pmf.weights(), &[PMF_TOTAL - 2, 1, 1]);
    }

    #[test]
    fn three_to_one() {
        let pmf = quantize_scores(&[3, 1]).unwrap();
        // Both quotas end in .5; the single leftover unit goes to token 0.
        assert_eq!(pmf.weights(), &[12_582_912, 4_194_304]);
        let (w0, w1) = (i64::from(pmf.weight(0)), i64::from(pmf.weight(1)));
        assert!((w0 - 3 * w1).abs() <= 3);
    }

    #[test]
    fn all_zero_is_all_one() {
        assert_eq!(quantize_scores(&[0, 0, 0, 0]).unwrap(), quantize_scores(&[1; 4]).unwrap());
    }

    #[test]
    fn tie_break_by_ascending_id() {
        // Six equal quotas; 2^24 mod 6 = 4 leftover units.
        let pmf = quantize_scores(&[1; 6]).unwrap();
        let base = (PMF_TOTAL - 6) / 6 + 1;
        assert_eq!(pmf.weights(), &[base + 1, base + 1, base + 1, base + 1, base, base]);
    }

    #[test]
    fn vocabulary_too_large() {
        let d = (PMF_TOTAL / 2) as usize + 1;
        assert!(matches!(
            quantize_scores(&vec![1; d]),
            Err(Error::VocabularyTooLarge { .. })
        ));
        assert!(quantize_scores(&vec![1; d - 1]).is_ok());
        assert!(quantize_scores(&[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_rational_oracle(scores in proptest::collection::vec(0u64..1_000_000, 1..40)) {
            prop_assume!(scores.iter().any(|&s| s > 0));
            let pmf = quantize_scores(&scores).unwrap();
            prop_assert_eq!(pmf.weights(), &oracle(&scores)[..]);
        }

        #[test]
        fn matches_oracle_with_repeated_scores(scores in proptest::collection::vec(0u64..5, 1..300)) {
            prop_assume!(scores.iter().any(|&s| s > 0));
            let pmf = quantize_scores(&scores).unwrap();
            prop_assert_eq!(pmf.weights(), &oracle(&scores)[..]);
        }

        #[test]
        fn fidelity_bound(scores in proptest::collection::vec(0u64..u64::from(u32::MAX), 1..64)) {
            prop_assume!(scores.iter().any(|&s| s > 0));
            let pmf = quantize_scores(&scores).unwrap();
            let d = scores.len() as u128;
            let s: u128 = scores.iter().map(|&x| u128::from(x)).sum();
            let total = u128::from(PMF_TOTAL);
            for (t, &w) in pmf.weights().iter().enumerate() {
                // |w/T - x/S| <= (D+1)/T, cross-multiplied by T*S.
                let lhs = (u128::from(w) * s).abs_diff(u128::from(scores[t]) * total);
                prop_assert!(lhs <= (d + 1) * s);
            }
        }
    }
}
