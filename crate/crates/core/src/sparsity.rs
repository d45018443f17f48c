//! Mask generation (unstructured magnitude, N:M, uniform-spatial) and the
//! spatial-sparsity profiler.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask4, Shape4, Tensor4};

/// Keep `n` of every `m` consecutive weights along the input-channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NMPattern {
    pub n: usize,
    pub m: usize,
}

impl NMPattern {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(Self { n, m })
    }

    /// `1 - n/m`, the sparsity every location of an N:M mask has.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.n as f64 / self.m as f64
    }

    pub fn is_dense(&self) -> bool {
        self.n == self.m
    }

    pub fn check_divisible(&self, layer: &str, c_in: usize) -> Result<()> {
        if c_in % self.m != 0 {
            return Err(Error::IndivisibleChannels {
                layer: layer.to_string(),
                c_in,
                m: self.m,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for NMPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidSparsity(p));
    }
    Ok(())
}

/// `floor(x + 0.5)` as a count.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Number of weights [`magnitude_mask`] zeroes in a tensor of `numel` entries.
pub fn pruned_count(p: f64, numel: usize) -> usize {
    round_half_up(p * numel as f64).min(numel)
}

#[inline]
fn by_magnitude<T: Scalar>(a: T, b: T) -> Ordering {
    a.abs().as_f64().total_cmp(&b.abs().as_f64())
}

/// Per-layer unstructured magnitude pruning.
///
/// Exactly `round(p·numel)` positions are zeroed, the smallest `|w|` first;
/// among equal magnitudes the lowest flat index is pruned first.
pub fn magnitude_mask<T: Scalar>(w: &Tensor4<T>, p: f64) -> Result<Mask4> {
    check_rate(p)?;
    let data = w.data();
    let prune = pruned_count(p, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| by_magnitude(data[a], data[b]));
    let mut bits = vec![1u8; data.len()];
    for &idx in &order[..prune] {
        bits[idx] = 0;
    }
    Mask4::from_bits(w.shape(), bits)
}

/// N:M projection keeping the `n` largest `|w|` in every group of `m`
/// consecutive input channels, lowest channel first among ties.
pub fn nm_project<T: Scalar>(w: &Tensor4<T>, pat: NMPattern) -> Result<Mask4> {
    nm_project_layer(w, pat, "<tensor>")
}

/// [`nm_project`] with the layer name carried into errors.
pub fn nm_project_layer<T: Scalar>(w: &Tensor4<T>, pat: NMPattern, layer: &str) -> Result<Mask4> {
    NMPattern::new(pat.n, pat.m)?;
    let s = w.shape();
    pat.check_divisible(layer, s.c_in)?;
    let mut mask = Mask4::zeros(s);
    let mut group: Vec<(usize, T)> = Vec::with_capacity(pat.m);
    for o in 0..s.c_out {
        for g in 0..s.c_in / pat.m {
            for u in 0..s.k_h {
                for v in 0..s.k_w {
                    group.clear();
                    group.extend((g * pat.m..(g + 1) * pat.m).map(|i| (i, w.get(o, i, u, v))));
                    group.sort_by(|a, b| by_magnitude(b.1, a.1));
                    for &(i, _) in &group[..pat.n] {
                        mask.set(o, i, u, v, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Checks that every group of `m` input channels holds exactly `n` ones.
pub fn check_nm(mask: &Mask4, pat: NMPattern) -> Result<()> {
    let s = mask.shape();
    pat.check_divisible("<mask>", s.c_in)?;
    for o in 0..s.c_out {
        for g in 0..s.c_in / pat.m {
            for u in 0..s.k_h {
                for v in 0..s.k_w {
                    let count = (g * pat.m..(g + 1) * pat.m).filter(|&i| mask.get(o, i, u, v)).count();
                    if count != pat.n {
                        return Err(Error::PatternViolation {
                            n: pat.n,
                            m: pat.m,
                            out: o,
                            group: g,
                            u,
                            v,
                            count,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Unstructured pruning with the same sparsity at every kernel location:
/// each `(u, v)` independently keeps its top `round((1-p)·c_out·c_in)`
/// magnitudes.
pub fn uniform_spatial_mask<T: Scalar>(w: &Tensor4<T>, p: f64) -> Result<Mask4> {
    check_rate(p)?;
    let s = w.shape();
    let per_loc = s.c_out * s.c_in;
    let keep = round_half_up((1.0 - p) * per_loc as f64).min(per_loc);
    let mut mask = Mask4::zeros(s);
    let mut slice: Vec<(usize, usize, T)> = Vec::with_capacity(per_loc);
    for u in 0..s.k_h {
        for v in 0..s.k_w {
            slice.clear();
            for o in 0..s.c_out {
                for i in 0..s.c_in {
                    slice.push((o, i, w.get(o, i, u, v)));
                }
            }
            slice.sort_by(|a, b| by_magnitude(b.2, a.2));
            for &(o, i, _) in &slice[..keep] {
                mask.set(o, i, u, v, true);
            }
        }
    }
    Ok(mask)
}

/// Fraction of pruned weights at each kernel location of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub layer_name: String,
    pub k_h: usize,
    pub k_w: usize,
    /// Row-major `k_h × k_w`.
    pub values: Vec<f64>,
}

impl SparsityProfile {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.k_w + v]
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.layer_name = name.into();
        self
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `max - min` over locations.
    pub fn spread(&self) -> f64 {
        self.max() - self.min()
    }
}

pub fn spatial_sparsity(b: &Mask4) -> SparsityProfile {
    let s: Shape4 = b.shape();
    let per_loc = (s.c_out * s.c_in) as f64;
    let mut kept = vec![0usize; s.spatial()];
    for (k, &bit) in b.bits().iter().enumerate() {
        kept[k % s.spatial()] += bit as usize;
    }
    SparsityProfile {
        layer_name: String::new(),
        k_h: s.k_h,
        k_w: s.k_w,
        values: kept.into_iter().map(|c| 1.0 - c as f64 / per_loc).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn magnitude_cases() {
        let shape = Shape4::new(1, 4, 1, 1);
        let w = t(shape, &[1.0, -3.0, 2.0, -0.5]);
        assert_eq!(magnitude_mask(&w, 0.0).unwrap(), Mask4::ones(shape));
        assert_eq!(magnitude_mask(&w, 0.5).unwrap().bits(), &[0, 1, 1, 0]);
        assert_eq!(magnitude_mask(&w, 0.75).unwrap().bits(), &[0, 1, 0, 0]);
        assert!(matches!(magnitude_mask(&w, 1.0), Err(Error::InvalidSparsity(_))));
        assert!(magnitude_mask(&w, -0.1).is_err());
    }

    #[test]
    fn magnitude_ties_prune_lowest_index() {
        let shape = Shape4::new(1, 4, 1, 1);
        let w = t(shape, &[1.0, -1.0, 1.0, 2.0]);
        assert_eq!(magnitude_mask(&w, 0.5).unwrap().bits(), &[0, 0, 1, 1]);
    }

    #[test]
    fn magnitude_round_half_up() {
        // 0.5 * 3 = 1.5 rounds to 2 pruned
        let shape = Shape4::new(1, 3, 1, 1);
        let w = t(shape, &[3.0, 1.0, 2.0]);
        assert_eq!(magnitude_mask(&w, 0.5).unwrap().bits(), &[1, 0, 0]);
    }

    #[test]
    fn nm_cases() {
        let shape = Shape4::new(1, 4, 1, 1);
        let w = t(shape, &[0.1, -0.5, 0.3, -0.2]);
        let pat = NMPattern::new(2, 4).unwrap();
        assert_eq!(nm_project(&w, pat).unwrap().bits(), &[0, 1, 1, 0]);
        assert_eq!(nm_project(&w, NMPattern::new(4, 4).unwrap()).unwrap(), Mask4::ones(shape));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor4::<f64>::randn(Shape4::new(4, 8, 3, 3), 1.0, &mut rng);
        let b = nm_project(&w, NMPattern::new(1, 4).unwrap()).unwrap();
        assert_eq!(b.count_nonzero(), 72);
    }

    #[test]
    fn nm_ties_keep_lowest_channel() {
        let shape = Shape4::new(1, 4, 1, 1);
        let w = t(shape, &[0.5, -0.5, 0.5, 0.1]);
        assert_eq!(nm_project(&w, NMPattern::new(2, 4).unwrap()).unwrap().bits(), &[1, 1, 0, 0]);
    }

    #[test]
    fn nm_indivisible_names_layer() {
        let w = Tensor4::<f64>::zeros(Shape4::new(2, 6, 3, 3));
        let err = nm_project_layer(&w, NMPattern::new(1, 4).unwrap(), "stage1").unwrap_err();
        match err {
            Error::IndivisibleChannels { layer, c_in, m } => {
                assert_eq!((layer.as_str(), c_in, m), ("stage1", 6, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_patterns() {
        assert!(NMPattern::new(0, 4).is_err());
        assert!(NMPattern::new(5, 4).is_err());
    }

    #[test]
    fn profile_cases() {
        let p = spatial_sparsity(&Mask4::ones(Shape4::new(3, 4, 3, 3)));
        assert_eq!(p.values, vec![0.0; 9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor4::<f64>::randn(Shape4::new(8, 16, 3, 3), 1.0, &mut rng);
        let b = nm_project(&w, NMPattern::new(1, 4).unwrap()).unwrap();
        assert!(spatial_sparsity(&b).values.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn check_nm_detects_violation() {
        let shape = Shape4::new(1, 4, 1, 2);
        let pat = NMPattern::new(2, 4).unwrap();
        let ok = Mask4::from_bits(shape, vec![1, 0, 1, 1, 0, 1, 0, 0]).unwrap();
        assert!(check_nm(&ok, pat).is_ok());
        let bad = Mask4::from_bits(shape, vec![1, 0, 1, 1, 0, 1, 1, 0]).unwrap();
        assert!(matches!(check_nm(&bad, pat), Err(Error::PatternViolation { v: 0, count: 3, .. })));
    }

    #[test]
    fn uniform_spatial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor4::<f64>::randn(Shape4::new(4, 4, 3, 3), 1.0, &mut rng);
        assert_eq!(uniform_spatial_mask(&w, 0.0).unwrap(), Mask4::ones(w.shape()));
        let w = t(Shape4::new(2, 2, 1, 1), &[0.3, -2.0, 0.1, 1.0]);
        assert_eq!(uniform_spatial_mask(&w, 0.5).unwrap().bits(), &[0, 1, 0, 1]);
    }

    fn arb_weights() -> impl Strategy<Value = Tensor4<f64>> {
        (1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c, d)| {
            let shape = Shape4::new(a, b * 4, c, d);
            prop::collection::vec(-4.0f64..4.0, shape.numel())
                .prop_map(move |v| Tensor4::from_vec(shape, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn magnitude_prunes_smallest(w in arb_weights(), p in 0.0f64..0.99) {
            let m = magnitude_mask(&w, p).unwrap();
            let zeros = m.bits().iter().filter(|&&b| b == 0).count();
            prop_assert_eq!(zeros, (p * w.data().len() as f64 + 0.5).floor() as usize);
            let max_pruned = w.data().iter().zip(m.bits()).filter(|(_, &b)| b == 0)
                .map(|(x, _)| x.abs()).fold(0.0, f64::max);
            let min_kept = w.data().iter().zip(m.bits()).filter(|(_, &b)| b == 1)
                .map(|(x, _)| x.abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(max_pruned <= min_kept);
        }

        #[test]
        fn nm_is_valid_and_constant(w in arb_weights(), n in 1usize..5) {
            let pat = NMPattern::new(n, 4).unwrap();
            let b = nm_project(&w, pat).unwrap();
            prop_assert!(check_nm(&b, pat).is_ok());
            let prof = spatial_sparsity(&b);
            prop_assert!(prof.values.iter().all(|&v| v == pat.sparsity()));
            prop_assert_eq!(nm_project(&w, pat).unwrap(), b);
        }

        #[test]
        fn uniform_spread_bound(w in arb_weights(), p in 0.0f64..0.99) {
            let b = uniform_spatial_mask(&w, p).unwrap();
            let s = w.shape();
            prop_assert!(spatial_sparsity(&b).spread() <= 1.0 / (s.c_out * s.c_in) as f64);
        }
    }
}
