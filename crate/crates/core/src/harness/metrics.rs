use super::synth::{is_finding_token, VOCAB_SIZE};

/// Multiset overlap of finding tokens, `|pred ∩ gold| / max(|gold|, 1)`.
/// Non-finding tokens (the end token) are ignored on both sides.
pub fn region_token_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let counts = |tokens: &[usize]| {
        let mut c = [0usize; VOCAB_SIZE];
        for &t in tokens.iter().filter(|&&t| is_finding_token(t)) {
            c[t] += 1;
        }
        c
    };
    let (p, g) = (counts(pred), counts(gold));
    let overlap: usize = p.iter().zip(&g).map(|(a, b)| a.min(b)).sum();
    let gold_len: usize = g.iter().sum();
    overlap as f64 / gold_len.max(1) as f64
}

/// Fraction of gold positions reproduced exactly at the same index.
pub fn token_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    hits as f64 / gold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_accuracy_examples() {
        assert_eq!(region_token_accuracy(&[1, 2, 0], &[1, 2, 0]), 1.0);
        assert_eq!(region_token_accuracy(&[], &[3, 0]), 0.0);
        // gold {A, A, B}, pred {A, B, C}
        assert_eq!(region_token_accuracy(&[1, 2, 3], &[1, 1, 2]), 2.0 / 3.0);
        assert_eq!(region_token_accuracy(&[0], &[0]), 0.0);
    }

    #[test]
    fn token_accuracy_is_positional() {
        assert_eq!(token_accuracy(&[1, 2, 0], &[1, 2, 0]), 1.0);
        assert_eq!(token_accuracy(&[2, 1, 0], &[1, 2, 0]), 1.0 / 3.0);
        assert_eq!(token_accuracy(&[1], &[1, 2, 0]), 1.0 / 3.0);
    }
}
