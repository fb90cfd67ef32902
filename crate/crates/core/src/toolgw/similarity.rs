//! Query similarity used for cache lookups.
//!
//! Both queries are lowercased and their whitespace runs collapsed to a single
//! space (outer whitespace trimmed). The ratio is `2 * LCS / (|a| + |b|)` over
//! Unicode scalar values, where LCS is the longest common subsequence. Two
//! empty strings have similarity 1.

/// Lowercases and collapses whitespace.
pub fn normalize_query(q: &str) -> String {
    q.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn lcs_len(a: &[char], b: &[char]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for &lc in long {
        for (j, &sc) in short.iter().enumerate() {
            cur[j + 1] = if lc == sc {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Ratio over already-normalized character sequences.
pub fn ratio_chars(a: &[char], b: &[char]) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * lcs_len(a, b) as f64 / total as f64
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = normalize_query(a).chars().collect();
    let b: Vec<char> = normalize_query(b).chars().collect();
    ratio_chars(&a, &b)
}
