//! Slow, direct reimplementations of the response metrics.

fn ngram_at(t: &[u32], i: usize, n: usize) -> &[u32] {
    &t[i..i + n]
}

fn occurrences(t: &[u32], g: &[u32]) -> usize {
    let n = g.len();
    if t.len() < n {
        return 0;
    }
    (0..=t.len() - n).filter(|&i| ngram_at(t, i, n) == g).count()
}

fn first_occurrence(t: &[u32], i: usize, n: usize) -> bool {
    (0..i).all(|j| ngram_at(t, j, n) != ngram_at(t, i, n))
}

pub fn bleu(pairs: &[(Vec<u32>, Vec<u32>)], max_n: usize) -> f64 {
    let c_len: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r_len: usize = pairs.iter().map(|p| p.1.len()).sum();
    if c_len == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    for n in 1..=max_n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (c, r) in pairs {
            if c.len() < n {
                continue;
            }
            for i in 0..=c.len() - n {
                total += 1;
                if first_occurrence(c, i, n) {
                    let g = ngram_at(c, i, n);
                    clipped += occurrences(c, g).min(occurrences(r, g));
                }
            }
        }
        if clipped == 0 {
            return 0.0;
        }
        product *= clipped as f64 / total as f64;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * product.powf(1.0 / max_n as f64)
}

pub fn avg_bleu(pairs: &[(Vec<u32>, Vec<u32>)]) -> f64 {
    (bleu(pairs, 1) + bleu(pairs, 2) + bleu(pairs, 3)) / 3.0
}

/// Greedy one-to-one matching of candidate tokens against a pool of
/// reference tokens.
pub fn unigram_f1(c: &[u32], r: &[u32]) -> f64 {
    let mut pool: Vec<Option<u32>> = r.iter().copied().map(Some).collect();
    let mut overlap = 0usize;
    for tok in c {
        if let Some(slot) = pool.iter_mut().find(|s| **s == Some(*tok)) {
            *slot = None;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn entity_f1(cases: &[(Vec<u32>, Vec<Vec<u32>>)]) -> f64 {
    let mut found = 0usize;
    let mut missed = 0usize;
    for (c, gold) in cases {
        for e in gold {
            let hit = !e.is_empty() && c.len() >= e.len() && occurrences(c, e) > 0;
            if hit {
                found += 1;
            } else {
                missed += 1;
            }
        }
    }
    if found == 0 {
        return 0.0;
    }
    let precision = 1.0;
    let recall = found as f64 / (found + missed) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn distinct_n(texts: &[Vec<u32>], n: usize) -> f64 {
    let mut all: Vec<&[u32]> = Vec::new();
    for t in texts {
        if t.len() >= n {
            for i in 0..=t.len() - n {
                all.push(ngram_at(t, i, n));
            }
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let unique = (0..all.len())
        .filter(|&i| (0..i).all(|j| all[j] != all[i]))
        .count();
    unique as f64 / all.len() as f64
}
