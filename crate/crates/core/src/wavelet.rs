//! Single-level orthonormal 2-D Haar transform.
//!
//! For every 2×2 block `[a b; c d]`:
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a − b + c − d) / 2    high-pass across columns, ≈ ∂u/∂x
//! hl = (a + b − c − d) / 2    high-pass across rows,    ≈ ∂u/∂y
//! hh = (a − b − c + d) / 2
//! ```
//!
//! The analysis matrix is orthogonal and symmetric up to block ordering, so
//! `idwt2` is both the inverse and the adjoint of `dwt2`.

use crate::error::{dim_err, Result};
use crate::kernels::planes_hw;
use crate::tensor::{Real, Tensor};

/// The four subbands of one analysis step, each `…×H/2×W/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Real> SubbandSet<T> {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    pub fn energy(&self) -> T {
        self.ll.energy() + self.lh.energy() + self.hl.energy() + self.hh.energy()
    }

    /// Energy of the two oriented detail bands.
    pub fn detail_energy(&self) -> T {
        self.lh.energy() + self.hl.energy()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        for band in [&self.lh, &self.hl, &self.hh] {
            if band.shape() != s {
                return Err(dim_err!("subband shapes differ: {:?} vs {:?}", s, band.shape()));
            }
        }
        if s.len() < 2 {
            return Err(dim_err!("subbands must be at least 2-D, got {:?}", s));
        }
        Ok(())
    }
}

pub(crate) fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(dim_err!("Haar analysis needs even, non-zero extents, got {h}×{w}"));
    }
    Ok(())
}

/// Raw analysis over `planes` stacked `h×w` fields. Outputs are
/// `planes×h/2×w/2` each.
pub(crate) fn analyze<T: Real>(u: &[T], planes: usize, h: usize, w: usize) -> [Vec<T>; 4] {
    let (hh_, wh) = (h / 2, w / 2);
    let n = planes * hh_ * wh;
    let half = T::lit(0.5);
    let mut ll = vec![T::zero(); n];
    let mut lh = vec![T::zero(); n];
    let mut hl = vec![T::zero(); n];
    let mut hh = vec![T::zero(); n];
    for p in 0..planes {
        let src = &u[p * h * w..(p + 1) * h * w];
        for by in 0..hh_ {
            let top = &src[2 * by * w..][..w];
            let bot = &src[(2 * by + 1) * w..][..w];
            for bx in 0..wh {
                let (a, b) = (top[2 * bx], top[2 * bx + 1]);
                let (c, d) = (bot[2 * bx], bot[2 * bx + 1]);
                let i = (p * hh_ + by) * wh + bx;
                ll[i] = (a + b + c + d) * half;
                lh[i] = (a - b + c - d) * half;
                hl[i] = (a + b - c - d) * half;
                hh[i] = (a - b - c + d) * half;
            }
        }
    }
    [ll, lh, hl, hh]
}

/// Raw synthesis; inverse (and adjoint) of [`analyze`].
pub(crate) fn synthesize<T: Real>(
    ll: &[T],
    lh: &[T],
    hl: &[T],
    hh: &[T],
    planes: usize,
    hh_: usize,
    wh: usize,
) -> Vec<T> {
    let (h, w) = (2 * hh_, 2 * wh);
    let half = T::lit(0.5);
    let mut u = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut u[p * h * w..(p + 1) * h * w];
        for by in 0..hh_ {
            for bx in 0..wh {
                let i = (p * hh_ + by) * wh + bx;
                let (s, x, y, z) = (ll[i], lh[i], hl[i], hh[i]);
                dst[2 * by * w + 2 * bx] = (s + x + y + z) * half;
                dst[2 * by * w + 2 * bx + 1] = (s - x + y - z) * half;
                dst[(2 * by + 1) * w + 2 * bx] = (s + x - y - z) * half;
                dst[(2 * by + 1) * w + 2 * bx + 1] = (s - x - y + z) * half;
            }
        }
    }
    u
}

fn band_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] /= 2;
    s[r - 1] /= 2;
    s
}

/// Haar analysis of the two trailing axes of `u` (`C×H×W`, or any stack of
/// planes).
pub fn dwt2<T: Real>(u: &Tensor<T>) -> Result<SubbandSet<T>> {
    let (planes, h, w) = planes_hw(u.shape())?;
    check_even(h, w)?;
    let shape = band_shape(u.shape());
    let [ll, lh, hl, hh] = analyze(u.data(), planes, h, w);
    Ok(SubbandSet {
        ll: Tensor::from_parts(shape.clone(), ll),
        lh: Tensor::from_parts(shape.clone(), lh),
        hl: Tensor::from_parts(shape.clone(), hl),
        hh: Tensor::from_parts(shape, hh),
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Real>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    s.check()?;
    let (planes, hh_, wh) = planes_hw(s.shape())?;
    let data = synthesize(s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data(), planes, hh_, wh);
    let mut shape = s.shape().to_vec();
    let r = shape.len();
    shape[r - 2] *= 2;
    shape[r - 1] *= 2;
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_block_has_only_ll() {
        let s = dwt2(&Tensor::<f64>::full(&[1, 2, 2], 3.0)).unwrap();
        assert_eq!(s.ll.data(), &[6.0]);
        assert_eq!(s.lh.data(), &[0.0]);
        assert_eq!(s.hl.data(), &[0.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    #[test]
    fn single_block_arithmetic() {
        let u = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&u).unwrap();
        assert_eq!(s.ll.data(), &[5.0]);
        assert_eq!(s.lh.data(), &[-1.0]);
        assert_eq!(s.hl.data(), &[-2.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    /// Builds the dense orthonormal analysis matrix for an `h×w` field,
    /// rows ordered ll, lh, hl, hh (each block-raster), straight from the
    /// filter definitions.
    fn dense_haar(h: usize, w: usize) -> Vec<Vec<f64>> {
        let (hb, wb) = (h / 2, w / 2);
        let signs: [[f64; 4]; 4] = [[1., 1., 1., 1.], [1., -1., 1., -1.], [1., 1., -1., -1.], [1., -1., -1., 1.]];
        let mut rows = Vec::new();
        for sg in signs {
            for by in 0..hb {
                for bx in 0..wb {
                    let mut row = vec![0.0; h * w];
                    row[2 * by * w + 2 * bx] = sg[0] / 2.0;
                    row[2 * by * w + 2 * bx + 1] = sg[1] / 2.0;
                    row[(2 * by + 1) * w + 2 * bx] = sg[2] / 2.0;
                    row[(2 * by + 1) * w + 2 * bx + 1] = sg[3] / 2.0;
                    rows.push(row);
                }
            }
        }
        rows
    }

    #[test]
    fn matches_dense_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u = Tensor::<f64>::randn(&[1, 8, 8], &mut rng);
        let m = dense_haar(8, 8);
        // orthonormality of the oracle itself
        for (i, r) in m.iter().enumerate() {
            for (j, q) in m.iter().enumerate() {
                let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let expect: Vec<f64> = m.iter().map(|r| r.iter().zip(u.data()).map(|(a, b)| a * b).sum()).collect();
        let s = dwt2(&u).unwrap();
        let got: Vec<f64> = [&s.ll, &s.lh, &s.hl, &s.hh].iter().flat_map(|b| b.data().to_vec()).collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn inverse_edge_cases() {
        let z = SubbandSet {
            ll: Tensor::<f32>::zeros(&[2, 3, 3]),
            lh: Tensor::zeros(&[2, 3, 3]),
            hl: Tensor::zeros(&[2, 3, 3]),
            hh: Tensor::zeros(&[2, 3, 3]),
        };
        assert!(idwt2(&z).unwrap().data().iter().all(|&v| v == 0.0));

        let v = 0.75;
        let c = SubbandSet {
            ll: Tensor::<f64>::full(&[1, 1, 1], 2.0 * v),
            lh: Tensor::zeros(&[1, 1, 1]),
            hl: Tensor::zeros(&[1, 1, 1]),
            hh: Tensor::zeros(&[1, 1, 1]),
        };
        assert_eq!(idwt2(&c).unwrap().data(), &[v; 4]);

        let bad = SubbandSet { hh: Tensor::zeros(&[2, 3, 2]), ..z };
        assert!(matches!(idwt2(&bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn odd_extent_is_rejected() {
        let err = dwt2(&Tensor::<f32>::zeros(&[1, 3, 4])).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn roundtrip_random_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::<f32>::randn(&[3, 16, 16], &mut rng);
        let back = idwt2(&dwt2(&u).unwrap()).unwrap();
        assert!(back.max_abs_diff(&u) <= 1e-6);
    }

    proptest! {
        #[test]
        fn linear_and_energy_preserving(
            hb in 1usize..12, wb in 1usize..12, seed in any::<u64>(),
            alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Tensor::<f64>::randn(&[2, 2 * hb, 2 * wb], &mut rng);
            let v = Tensor::<f64>::randn(&[2, 2 * hb, 2 * wb], &mut rng);
            let su = dwt2(&u).unwrap();
            let sv = dwt2(&v).unwrap();
            prop_assert!((su.energy() - u.energy()).abs() <= 1e-5 * u.energy());
            let mix = u.zip_map(&v, |a, b| alpha * a + beta * b).unwrap();
            let sm = dwt2(&mix).unwrap();
            for (m, (a, b)) in [(&sm.ll, (&su.ll, &sv.ll)), (&sm.hh, (&su.hh, &sv.hh)), (&sm.lh, (&su.lh, &sv.lh))] {
                let lin = a.zip_map(b, |x, y| alpha * x + beta * y).unwrap();
                prop_assert!(m.max_abs_diff(&lin) <= 1e-6);
            }
        }
    }
}
