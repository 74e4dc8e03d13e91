use std::collections::BTreeMap;

use super::MetricsError;

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    /// Feature -> weight; absent features are zero.
    Sparse(BTreeMap<String, f64>),
    Dense(Vec<f64>),
}

pub trait Embedder: Send + Sync {
    /// Identifier printed in reports.
    fn name(&self) -> String;
    fn embed(&self, text: &str) -> Result<Embedding, MetricsError>;
}

/// Character-trigram count vectors. Strings shorter than three characters
/// map to a single feature; the empty string maps to the zero vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

impl Embedder for TrigramEmbedder {
    fn name(&self) -> String {
        "char-trigram-count".into()
    }

    fn embed(&self, text: &str) -> Result<Embedding, MetricsError> {
        let chars: Vec<char> = text.chars().collect();
        let mut counts = BTreeMap::new();
        if chars.len() < 3 {
            if !chars.is_empty() {
                counts.insert(text.to_string(), 1.0);
            }
        } else {
            for w in chars.windows(3) {
                *counts.entry(w.iter().collect::<String>()).or_insert(0.0) += 1.0;
            }
        }
        Ok(Embedding::Sparse(counts))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// An operand embedded to the zero vector; `value` is then 0.
    pub zero_vector: bool,
}

fn dot_and_norms(a: &Embedding, b: &Embedding) -> Result<(f64, f64, f64), MetricsError> {
    match (a, b) {
        (Embedding::Sparse(x), Embedding::Sparse(y)) => {
            let dot = x.iter().filter_map(|(k, v)| y.get(k).map(|w| v * w)).sum();
            let nx = x.values().map(|v| v * v).sum::<f64>();
            let ny = y.values().map(|v| v * v).sum::<f64>();
            Ok((dot, nx, ny))
        }
        (Embedding::Dense(x), Embedding::Dense(y)) if x.len() == y.len() => Ok((
            x.iter().zip(y).map(|(a, b)| a * b).sum(),
            x.iter().map(|v| v * v).sum(),
            y.iter().map(|v| v * v).sum(),
        )),
        _ => Err(MetricsError::EmbedderFailure("embeddings differ in kind or dimension".into())),
    }
}

pub fn cosine_similarity(a: &str, b: &str, embedder: &dyn Embedder) -> Result<Cosine, MetricsError> {
    let (ea, eb) = (embedder.embed(a)?, embedder.embed(b)?);
    let (dot, na, nb) = dot_and_norms(&ea, &eb)?;
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_vector: true,
        });
    }
    let value = if a == b { 1.0 } else { (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) };
    Ok(Cosine {
        value,
        zero_vector: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cs(a: &str, b: &str) -> Cosine {
        cosine_similarity(a, b, &TrigramEmbedder).unwrap()
    }

    #[test]
    fn identical_is_one() {
        assert_eq!(cs("grab cup; walk sofa", "grab cup; walk sofa").value, 1.0);
        assert_eq!(cs("ab", "ab").value, 1.0);
    }

    #[test]
    fn disjoint_trigrams_are_orthogonal() {
        let (a, b) = ("abcabc", "xyzxyz");
        let Embedding::Sparse(ea) = TrigramEmbedder.embed(a).unwrap() else { unreachable!() };
        let Embedding::Sparse(eb) = TrigramEmbedder.embed(b).unwrap() else { unreachable!() };
        assert!(ea.keys().all(|k| !eb.contains_key(k)));
        assert_eq!(cs(a, b).value, 0.0);
    }

    #[test]
    fn zero_vector_flagged() {
        let c = cs("", "abc");
        assert_eq!(c.value, 0.0);
        assert!(c.zero_vector);
    }

    #[test]
    fn hand_computed_value() {
        // "abcd": {abc, bcd}; "abce": {abc, bce}; dot 1, norms sqrt 2
        assert!((cs("abcd", "abce").value - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in "[a-e ;]{0,20}", b in "[a-e ;]{0,20}") {
            let (x, y) = (cs(&a, &b), cs(&b, &a));
            prop_assert_eq!(x.value, y.value);
            prop_assert!((0.0..=1.0).contains(&x.value));
        }
    }
}
