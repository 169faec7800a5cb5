//! Tape operators against direct loop implementations on random shapes.

use proptest::prelude::*;

use eocd::tensor::Conv2dParams;
use eocd::{Shape, Tape, Tensor};

fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: Conv2dParams) -> Vec<f64> {
    let [n, _, h, wd] = x.shape().0;
    let [c_out, cin_g, k, _] = w.shape().0;
    let oh = (h + 2 * p.padding - k) / p.stride + 1;
    let ow = (wd + 2 * p.padding - k) / p.stride + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for co in 0..c_out {
            let g = co / (c_out / p.groups);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.at(0, co, 0, 0);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                    acc += x.at(bi, g * cin_g + ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn conv_case() -> impl Strategy<Value = (Shape, Shape, Conv2dParams)> {
    (1usize..3, 1usize..4, 1usize..4, 0usize..2, 1usize..3, 3usize..8, 3usize..8, any::<bool>()).prop_map(
        |(n, g, per_group, ki, stride, h, w, depthwise)| {
            let k = [1, 3][ki];
            let (groups, cin_g, cout_g) = if depthwise { (g * per_group, 1, 1) } else { (g, per_group, 2) };
            let p = Conv2dParams {
                stride,
                padding: k / 2,
                groups,
            };
            (
                Shape::new(n, groups * cin_g, h, w),
                Shape::new(groups * cout_g, cin_g, k, k),
                p,
            )
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_loops((xs, ws, p) in conv_case(), seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Tensor::from_fn(xs, |_| next());
        let w = Tensor::from_fn(ws, |_| next());
        let b = Tensor::from_fn(Shape::new(1, ws.n(), 1, 1), |_| next());
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), p).unwrap();
        let want = conv_naive(&x, &w, &b, p);
        prop_assert_eq!(tape.value(y).numel(), want.len());
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn channel_pools_match_loops(c_out in 1usize..4, group in 1usize..5, hw in 1usize..5, data in values(2 * 16 * 16)) {
        let c = c_out * group;
        let s = Shape::new(2, c, hw, hw);
        let x = Tensor::new(s, data[..s.numel()].to_vec()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let avg = tape.channel_avg_pool(xv, c_out).unwrap();
        let max = tape.channel_max_pool(xv, c_out).unwrap();
        let mean = tape.channel_mean(xv).unwrap();
        for b in 0..2 {
            for y in 0..hw {
                for xx in 0..hw {
                    for o in 0..c_out {
                        let vals: Vec<f64> = (0..group).map(|j| x.at(b, o * group + j, y, xx)).collect();
                        let mut sum = 0.0;
                        for v in &vals {
                            sum += v;
                        }
                        prop_assert_eq!(tape.value(avg).at(b, o, y, xx), sum / group as f64);
                        prop_assert_eq!(tape.value(max).at(b, o, y, xx), vals.iter().copied().fold(f64::MIN, f64::max));
                    }
                    let mut sum = 0.0;
                    for ch in 0..c {
                        sum += x.at(b, ch, y, xx);
                    }
                    prop_assert_eq!(tape.value(mean).at(b, 0, y, xx), sum / c as f64);
                }
            }
        }
    }

    #[test]
    fn bilinear_matches_weighted_corners(h in 1usize..6, w in 1usize..6, oh in 1usize..10, ow in 1usize..10, data in values(36)) {
        let x = Tensor::new(Shape::new(1, 1, h, w), data[..h * w].to_vec()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_resize(xv, oh, ow).unwrap();
        let coord = |d: usize, i: usize, o: usize| {
            let src = ((d as f64 + 0.5) * i as f64 / o as f64 - 0.5).clamp(0.0, (i - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(i - 1), src - i0 as f64)
        };
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w, ow);
                let v = |a, b| x.at(0, 0, a, b);
                let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                    + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                prop_assert!((tape.value(y).at(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_resize_is_a_copy(h in 1usize..6, w in 1usize..6, data in values(36)) {
        let x = Tensor::new(Shape::new(1, 1, h, w), data[..h * w].to_vec()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_resize(xv, h, w).unwrap();
        prop_assert_eq!(tape.value(y).data(), x.data());
    }
}
