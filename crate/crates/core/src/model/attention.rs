use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::scenegen::Mask;

/// Logit written into suppressed hole→hole positions before the softmax.
pub const SRA_FILL: f64 = -1e9;

/// Token-level hole indicator and its pairwise extension.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedMask {
    /// Flattened row-major token mask; `true` = hole.
    pub m: Vec<bool>,
    /// `n×n` entries: 1 where attention is allowed, `-∞` where it is not.
    pub m_prime: Vec<f64>,
}

impl ExtendedMask {
    /// `m′ᵢⱼ = 1` iff token `i` or token `j` is background.
    pub fn from_tokens(m: Vec<bool>) -> Result<Self> {
        if !m.is_empty() && m.iter().all(|&b| b) {
            return Err(Error::Degenerate(
                "mask covers every attention token; no key would survive".into(),
            ));
        }
        let n = m.len();
        let mut m_prime = vec![1.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if m[i] && m[j] {
                    m_prime[i * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        Ok(Self { m, m_prime })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.m_prime[i * self.len() + j] == 1.0
    }

    /// Row-major flags of the suppressed positions.
    pub fn blocked(&self) -> Vec<bool> {
        self.m_prime.iter().map(|&v| v != 1.0).collect()
    }
}

/// Downsamples an image mask to `h×w` tokens by max-pooling and builds the
/// extended mask over them.
pub fn extended_mask(mask: &Mask, h: usize, w: usize) -> Result<ExtendedMask> {
    let tokens = mask.downsample_max(h, w)?;
    ExtendedMask::from_tokens(tokens.bits().to_vec())
}

/// Single-head scaled dot-product attention on the tape. `q`, `k`, `v` are
/// `N×n×d`; `blocked` (length `N·n·n`) marks logits replaced by
/// [`SRA_FILL`].
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    blocked: Option<&[bool]>,
) -> Result<Var> {
    let d = *tape
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention", "scalar query"))?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    if let Some(b) = blocked {
        if b.iter().any(|&x| x) {
            logits = tape.mask_fill(logits, b, T::from_f64_lossy(SRA_FILL))?;
        }
    }
    let weights = tape.softmax_lastdim(logits)?;
    tape.matmul(weights, v)
}

/// Attention output together with its weight matrix.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    pub output: Tensor<f64>,
    pub weights: Tensor<f64>,
}

/// Attention over `n×d` queries, keys and values. With a mask, hole queries
/// cannot attend to hole keys; without one it is plain self-attention.
pub fn sra_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    mask: Option<&ExtendedMask>,
) -> Result<AttentionResult> {
    let [n, d] = q.shape()[..] else {
        return Err(Error::shape("sra_attention", format!("queries {:?} are not n×d", q.shape())));
    };
    if k.shape() != [n, d] || v.shape()[0] != n || v.rank() != 2 {
        return Err(Error::shape(
            "sra_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("sra_attention", format!("mask of {} for {n} tokens", m.len())));
        }
        if m.m.iter().all(|&b| b) {
            return Err(Error::Degenerate("every attention row is fully masked".into()));
        }
    }
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let kt = tape.transpose(kv)?;
    let logits = tape.matmul(qv, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        let b = m.blocked();
        if b.iter().any(|&x| x) {
            logits = tape.mask_fill(logits, &b, SRA_FILL)?;
        }
    }
    let weights = tape.softmax_lastdim(logits)?;
    let out = tape.matmul(weights, vv)?;
    Ok(AttentionResult {
        output: tape.value(out).clone(),
        weights: tape.value(weights).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng_from};
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force(m: &[bool]) -> Vec<f64> {
        let n = m.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let background_pair = !m[i] || !m[j];
                out.push(if background_pair { 1.0 } else { f64::NEG_INFINITY });
            }
        }
        out
    }

    #[test]
    fn two_token_example() {
        let e = ExtendedMask::from_tokens(vec![false, true]).unwrap();
        assert_eq!(e.m_prime, vec![1.0, 1.0, 1.0, f64::NEG_INFINITY]);
        let e = ExtendedMask::from_tokens(vec![false; 4]).unwrap();
        assert!(e.m_prime.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn exhaustive_rule_up_to_twelve_tokens() {
        for n in 1..=12usize {
            for code in 0u32..(1 << n) {
                let m: Vec<bool> = (0..n).map(|i| code >> i & 1 == 1).collect();
                match ExtendedMask::from_tokens(m.clone()) {
                    Ok(e) => assert_eq!(e.m_prime, brute_force(&m)),
                    Err(_) => assert!(m.iter().all(|&b| b)),
                }
            }
        }
    }

    #[test]
    fn full_mask_is_degenerate() {
        assert!(matches!(
            extended_mask(&Mask::full(8, 8), 4, 4),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn downsampling_is_conservative() {
        let mut m = Mask::empty(8, 8);
        m.set(5, 6, true);
        let e = extended_mask(&m, 4, 4).unwrap();
        assert_eq!(e.m.iter().filter(|&&b| b).count(), 1);
        assert!(e.m[2 * 4 + 3]);
    }

    fn qkv(seed: u64, n: usize, d: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = rng_from(seed);
        (
            normal_tensor(&mut rng, &[n, d]),
            normal_tensor(&mut rng, &[n, d]),
            normal_tensor(&mut rng, &[n, d]),
        )
    }

    #[test]
    fn all_background_equals_plain_attention() {
        let (q, k, v) = qkv(1, 16, 8);
        let e = ExtendedMask::from_tokens(vec![false; 16]).unwrap();
        let plain = sra_attention(&q, &k, &v, None).unwrap();
        let sra = sra_attention(&q, &k, &v, Some(&e)).unwrap();
        assert_eq!(plain.output, sra.output);
    }

    #[test]
    fn single_background_key_is_copied() {
        let (q, k, v) = qkv(2, 5, 3);
        let m = vec![true, true, false, true, true];
        let e = ExtendedMask::from_tokens(m).unwrap();
        let out = sra_attention(&q, &k, &v, Some(&e)).unwrap();
        for i in [0, 1, 3, 4] {
            for c in 0..3 {
                assert_eq!(out.output.data()[i * 3 + c], v.data()[2 * 3 + c]);
            }
        }
    }

    proptest! {
        #[test]
        fn hole_rows_ignore_holes_and_background_rows_are_unchanged(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = rng_from(seed);
            let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            m[rng.random_range(0..n)] = false;
            let e = ExtendedMask::from_tokens(m.clone()).unwrap();
            let (q, k, v) = qkv(seed ^ 1, n, 4);
            let sra = sra_attention(&q, &k, &v, Some(&e)).unwrap();
            let plain = sra_attention(&q, &k, &v, None).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(e.allowed(i, j), e.allowed(j, i));
                    if m[i] && m[j] {
                        prop_assert!(sra.weights.data()[i * n + j].abs() < 1e-12);
                    }
                }
                if !m[i] {
                    prop_assert!(e.m_prime[i * n..(i + 1) * n].iter().all(|&x| x == 1.0));
                    for c in 0..4 {
                        let (a, b) = (sra.output.data()[i * 4 + c], plain.output.data()[i * 4 + c]);
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
