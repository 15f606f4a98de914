//! Non-overlapping patch tokenization of 2-d maps.
//!
//! A map `[K, A, B]` with patch `(pa, pb)` becomes `(A/pa)(B/pb)` tokens,
//! row-major over the patch grid, each of length `K * pa * pb` ordered
//! `(k, row in patch, col in patch)`.

use ndarray::{Array2, Array3, IxDyn};

use cmdlab_autograd::{Graph, Real, Var};

use crate::error::{Error, Result};

fn check_divisible(a: usize, b: usize, pa: usize, pb: usize) -> Result<()> {
    if pa == 0 || pb == 0 || !a.is_multiple_of(pa) || !b.is_multiple_of(pb) {
        return Err(Error::Config(format!(
            "patch ({pa}, {pb}) does not divide map ({a}, {b})"
        )));
    }
    Ok(())
}

pub fn patchify<F: Real>(map: &Array3<F>, p: usize) -> Result<Array2<F>> {
    patchify_rect(map, p, p)
}

pub fn patchify_rect<F: Real>(map: &Array3<F>, pa: usize, pb: usize) -> Result<Array2<F>> {
    let (k, a, b) = map.dim();
    check_divisible(a, b, pa, pb)?;
    let (ga, gb) = (a / pa, b / pb);
    let v = map
        .view()
        .into_shape_with_order(IxDyn(&[k, ga, pa, gb, pb]))
        .expect("contiguous input")
        .permuted_axes(IxDyn(&[1, 3, 0, 2, 4]))
        .as_standard_layout()
        .into_owned();
    Ok(v
        .into_shape_with_order((ga * gb, k * pa * pb))
        .expect("size preserved"))
}

pub fn unpatchify<F: Real>(tokens: &Array2<F>, p: usize, a: usize, b: usize) -> Result<Array3<F>> {
    unpatchify_rect(tokens, p, p, a, b)
}

pub fn unpatchify_rect<F: Real>(tokens: &Array2<F>, pa: usize, pb: usize, a: usize, b: usize) -> Result<Array3<F>> {
    check_divisible(a, b, pa, pb)?;
    let (ga, gb) = (a / pa, b / pb);
    let (n, len) = tokens.dim();
    if n != ga * gb || len % (pa * pb) != 0 {
        return Err(Error::dim("unpatchify", tokens.shape(), &[ga * gb, pa * pb]));
    }
    let k = len / (pa * pb);
    let v = tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[ga, gb, k, pa, pb]))
        .expect("size preserved")
        .permuted_axes(IxDyn(&[2, 0, 3, 1, 4]))
        .as_standard_layout()
        .into_owned();
    Ok(v.into_shape_with_order((k, a, b)).expect("size preserved"))
}

/// In-graph [`patchify_rect`] for a `[K, A, B]` node.
pub fn patchify_var<F: Real>(g: &mut Graph<F>, map: Var, pa: usize, pb: usize) -> Var {
    let (k, a, b) = {
        let s = g.shape(map);
        (s[0], s[1], s[2])
    };
    let (ga, gb) = (a / pa, b / pb);
    let v = g.reshape(map, &[k, ga, pa, gb, pb]);
    let v = g.permute(v, &[1, 3, 0, 2, 4]);
    g.reshape(v, &[ga * gb, k * pa * pb])
}

/// In-graph [`unpatchify_rect`] for a `[(A/pa)(B/pb), K*pa*pb]` node.
pub fn unpatchify_var<F: Real>(g: &mut Graph<F>, tokens: Var, pa: usize, pb: usize, a: usize, b: usize) -> Var {
    let (ga, gb) = (a / pa, b / pb);
    let k = g.shape(tokens)[1] / (pa * pb);
    let v = g.reshape(tokens, &[ga, gb, k, pa, pb]);
    let v = g.permute(v, &[2, 0, 3, 1, 4]);
    g.reshape(v, &[k, a, b])
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counting(k: usize, a: usize, b: usize) -> Array3<f64> {
        Array3::from_shape_fn((k, a, b), |(i, j, l)| (i * a * b + j * b + l) as f64)
    }

    #[test]
    fn single_patch_holds_every_entry() {
        let m = counting(1, 2, 2);
        let t = patchify(&m, 2).unwrap();
        assert_eq!(t.shape(), &[1, 4]);
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn unit_patch_is_a_transpose() {
        let m = counting(3, 2, 4);
        let t = patchify(&m, 1).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        for j in 0..2 {
            for l in 0..4 {
                for i in 0..3 {
                    assert_eq!(t[[j * 4 + l, i]], m[[i, j, l]]);
                }
            }
        }
    }

    #[test]
    fn two_channel_round_trip() {
        let m = counting(2, 4, 4);
        let t = patchify(&m, 2).unwrap();
        assert_eq!(t.shape(), &[4, 8]);
        // first token: channel 0 rows 0-1 cols 0-1, then channel 1
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        assert_eq!(unpatchify(&t, 2, 4, 4).unwrap(), m);
    }

    #[test]
    fn indivisible_patch_is_a_config_error() {
        assert!(matches!(patchify(&counting(1, 3, 4), 2), Err(Error::Config(_))));
    }

    #[test]
    fn graph_version_matches() {
        let m = counting(3, 4, 6);
        let mut g = Graph::new();
        let v = g.constant(m.clone().into_dyn());
        let t = patchify_var(&mut g, v, 2, 3);
        assert_eq!(g.value(t), &patchify_rect(&m, 2, 3).unwrap().into_dyn());
        let back = unpatchify_var(&mut g, t, 2, 3, 4, 6);
        assert_eq!(g.value(back), &m.into_dyn());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(k in 1usize..4, ga in 1usize..4, gb in 1usize..4, pa in 1usize..4, pb in 1usize..4, seed in 0u64..100) {
            let m = Array3::from_shape_fn((k, ga * pa, gb * pb), |(i, j, l)| {
                ((i * 31 + j * 7 + l * 3) as u64 ^ seed) as f32
            });
            let t = patchify_rect(&m, pa, pb).unwrap();
            prop_assert_eq!(t.shape(), &[ga * gb, k * pa * pb]);
            prop_assert_eq!(unpatchify_rect(&t, pa, pb, ga * pa, gb * pb).unwrap(), m);
        }
    }
}
