//! Central-difference gradient checker for scalar functions built on a
//! [`Tape`]. Runs in `f64`.

use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Smallest denominator in the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Result of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("check_gradients", "scalar output", v.shape()));
    }
    let v = v.data()[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("check_gradients objective"))
    }
}

fn analytic<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::dim(
            "check_gradients",
            "scalar output",
            tape.value(out).shape(),
        ));
    }
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect())
}

/// Check the listed `(tensor, coordinate)` pairs.
pub fn check_coordinates<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_coordinates_floored(f, params, h, coords, DEFAULT_FLOOR)
}

/// [`check_coordinates`] with an explicit denominator floor, so the check
/// passes when `|a - n| < tol * max(|a|, |n|, floor)`. Coordinates whose
/// true gradient is zero then report rounding noise relative to `floor`.
pub fn check_coordinates_floored<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    coords: &[(usize, usize)],
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + h;
        let plus = evaluate(&f, &work)?;
        work[t].data_mut()[i] = orig - h;
        let minus = evaluate(&f, &work)?;
        work[t].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = grads[t].data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((t, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Check every coordinate of every parameter tensor; returns the max
/// relative error.
pub fn check_gradients<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    check_coordinates(f, params, h, &coords).map(|r| r.max_rel_error)
}

/// Check up to `per_tensor` randomly chosen coordinates of each tensor
/// (all of them when the tensor is smaller).
pub fn check_gradients_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_coordinates(f, params, h, &sample_coordinates(params, per_tensor, seed))
}

/// Up to `per_tensor` random coordinates of each tensor, ascending within
/// a tensor.
pub fn sample_coordinates(params: &[Tensor<f64>], per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded(seed, 0x67_72_61_64);
    let mut coords = Vec::new();
    for (t, p) in params.iter().enumerate() {
        if p.len() <= per_tensor {
            coords.extend((0..p.len()).map(|i| (t, i)));
        } else {
            let mut picked = sample(&mut rng, p.len(), per_tensor).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| (t, i)));
        }
    }
    coords
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NORM_EPS;
    use crate::ops::LEAKY_SLOPE;
    use crate::rng::{normal_tensor, seeded, uniform};
    use crate::tape::StyleVars;
    use alloc::vec;

    const SHAPES: [[usize; 3]; 3] = [[2, 3, 3], [3, 4, 5], [5, 2, 6]];

    fn weights(seed: u64, shape: &[usize]) -> Tensor<f64> {
        normal_tensor(&mut seeded(seed, 99), shape, 1.0)
    }

    #[test]
    fn floor_absorbs_rounding_on_zero_gradients() {
        // IN removes the conv bias, so d/d(bias) is zero analytically.
        let mut rng = seeded(8, 0);
        let params = [
            normal_tensor(&mut rng, &[2, 4, 4], 30.0),
            normal_tensor(&mut rng, &[3, 2, 3, 3], 1.0),
            normal_tensor(&mut rng, &[3], 1.0),
        ];
        let w = weights(3, &[3, 4, 4]);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv3x3(v[0], v[1], v[2])?;
            let y = t.instance_norm(y, NORM_EPS)?;
            t.weighted_sum(y, &w)
        };
        let all = sample_coordinates(&params, 100, 1);
        assert_eq!(all.len(), 32 + 54 + 3);
        let report = check_coordinates_floored(f, &params, DEFAULT_STEP, &all, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let bias_only: Vec<_> = (0..3).map(|i| (2, i)).collect();
        let strict = check_coordinates(f, &params, DEFAULT_STEP, &bias_only).unwrap();
        assert!(strict.max_rel_error <= 1.0);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.1);
        let err = check_gradients(|t, v| t.sum(v[0]), &[x], DEFAULT_STEP).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn conv3x3_gradients() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(20 + k as u64, 0);
            let cout = 2 + k;
            let params = vec![
                normal_tensor(&mut rng, s, 1.0),
                normal_tensor(&mut rng, &[cout, s[0], 3, 3], 0.5),
                normal_tensor(&mut rng, &[cout], 0.5),
            ];
            let wts = weights(k as u64, &[cout, s[1], s[2]]);
            let err = check_gradients(
                |t, v| {
                    let y = t.conv3x3(v[0], v[1], v[2])?;
                    t.weighted_sum(y, &wts)
                },
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "shape {s:?}: {err}");
        }
    }

    #[test]
    fn leaky_relu_gradients_away_from_kink() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(30 + k as u64, 0);
            let x = normal_tensor::<f64>(&mut rng, s, 1.0)
                .map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v });
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let y = t.leaky_relu(v[0], LEAKY_SLOPE)?;
                    t.weighted_sum(y, &wts)
                },
                &[x],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn upsample_and_pool_gradients() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(40 + k as u64, 0);
            let x = normal_tensor::<f64>(&mut rng, s, 1.0);
            let wts = weights(k as u64, &[s[0], s[1] * 2, s[2] * 2]);
            let err = check_gradients(
                |t, v| {
                    let y = t.upsample2x(v[0])?;
                    t.weighted_sum(y, &wts)
                },
                &[x.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
        let x = normal_tensor::<f64>(&mut seeded(44, 0), &[2, 4, 6], 1.0);
        let wts = weights(4, &[2, 2, 3]);
        let err = check_gradients(
            |t, v| {
                let y = t.avg_pool2(v[0])?;
                t.weighted_sum(y, &wts)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn noise_scale_gradients() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(50 + k as u64, 0);
            let x = normal_tensor::<f64>(&mut rng, s, 1.0);
            let scale = normal_tensor::<f64>(&mut rng, &[s[0]], 1.0);
            let noise = normal_tensor::<f64>(&mut rng, &[1, s[1], s[2]], 1.0);
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let y = t.add_scaled_noise(v[0], &noise, v[1])?;
                    t.weighted_sum(y, &wts)
                },
                &[x, scale.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4);

            // d/d scale_c = sum_hw noise_hw * upstream_chw
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::zeros(s));
            let sv = tape.leaf(scale.clone());
            let y = tape.add_scaled_noise(xv, &noise, sv).unwrap();
            let out = tape.weighted_sum(y, &wts).unwrap();
            let g = tape.backward(out).unwrap();
            for c in 0..s[0] {
                let want: f64 = noise.data().iter().zip(wts.channel(c)).map(|(n, w)| n * w).sum();
                assert!((g.get(sv).unwrap().data()[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_gradients() {
        for (k, (din, dout)) in [(4, 3), (1, 5), (7, 2)].into_iter().enumerate() {
            let mut rng = seeded(60 + k as u64, 0);
            let params = vec![
                normal_tensor(&mut rng, &[din], 1.0),
                normal_tensor(&mut rng, &[dout, din], 1.0),
                normal_tensor(&mut rng, &[dout], 1.0),
            ];
            let wts = weights(k as u64, &[dout]);
            let err = check_gradients(
                |t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    t.weighted_sum(y, &wts)
                },
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn pixel_norm_squared_sum_gradients() {
        for (k, s) in SHAPES.iter().enumerate() {
            let x = normal_tensor::<f64>(&mut seeded(70 + k as u64, 0), s, 1.0);
            // sum(PN(x)^2) = C*H*W up to eps, so its true gradient is O(eps)
            // and the relative metric only measures rounding. Both gradients
            // must still agree in absolute terms.
            let objective = |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.pixel_norm(v[0], NORM_EPS)?;
                let sq = t.square(y)?;
                t.sum(sq)
            };
            let grads = analytic(&objective, &[x.clone()]).unwrap();
            let mut probe = x.clone();
            for i in 0..x.len() {
                probe.data_mut()[i] = x.data()[i] + DEFAULT_STEP;
                let plus = evaluate(&objective, core::slice::from_ref(&probe)).unwrap();
                probe.data_mut()[i] = x.data()[i] - DEFAULT_STEP;
                let minus = evaluate(&objective, core::slice::from_ref(&probe)).unwrap();
                probe.data_mut()[i] = x.data()[i];
                let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
                assert!((grads[0].data()[i] - numeric).abs() < 1e-6);
            }
            let base = evaluate(&objective, &[x.clone()]).unwrap();
            assert!((base - (s[0] * s[1] * s[2]) as f64).abs() < 1e-3);
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let y = t.pixel_norm(v[0], NORM_EPS)?;
                    t.weighted_sum(y, &wts)
                },
                &[x],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn instance_norm_gradients() {
        for (k, s) in SHAPES.iter().enumerate() {
            let x = normal_tensor::<f64>(&mut seeded(80 + k as u64, 0), s, 1.0);
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let y = t.instance_norm(v[0], NORM_EPS)?;
                    t.weighted_sum(y, &wts)
                },
                &[x],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn pin_gradients_include_rho() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(90 + k as u64, 0);
            let x = normal_tensor::<f64>(&mut rng, s, 1.0);
            let rho = Tensor::from_fn(&[s[0]], |_| uniform(&mut rng, 0.05, 0.95));
            let err = check_gradients(
                |t, v| {
                    let y = t.pin(v[0], v[1], NORM_EPS)?;
                    t.sum(y)
                },
                &[x.clone(), rho.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let y = t.pin(v[0], v[1], NORM_EPS)?;
                    t.weighted_sum(y, &wts)
                },
                &[x, rho],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn adain_gradients_include_latent() {
        for (k, s) in SHAPES.iter().enumerate() {
            let mut rng = seeded(100 + k as u64, 0);
            let d = 3 + k;
            let c = s[0];
            let params = vec![
                normal_tensor(&mut rng, s, 1.0),
                normal_tensor(&mut rng, &[d], 1.0),
                normal_tensor(&mut rng, &[c, d], 0.5),
                normal_tensor(&mut rng, &[c], 0.5),
                normal_tensor(&mut rng, &[c, d], 0.5),
                normal_tensor::<f64>(&mut rng, &[c], 0.5).map(|v| v + 1.0),
            ];
            let wts = weights(k as u64, s);
            let err = check_gradients(
                |t, v| {
                    let src = StyleVars {
                        v_mu: v[2],
                        b_mu: v[3],
                        v_sigma: v[4],
                        b_sigma: v[5],
                    };
                    let y = t.adain(v[0], v[1], &src, NORM_EPS)?;
                    t.weighted_sum(y, &wts)
                },
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn style_modulate_and_softplus_gradients() {
        let mut rng = seeded(110, 0);
        let params = vec![
            normal_tensor(&mut rng, &[3, 4, 4], 1.0),
            normal_tensor(&mut rng, &[3], 1.0),
            normal_tensor(&mut rng, &[3], 1.0),
        ];
        let err = check_gradients(
            |t, v| {
                let y = t.style_modulate(v[0], v[1], v[2])?;
                let sp = t.softplus(y)?;
                t.sum(sp)
            },
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(&[1e300]);
        let r = check_gradients(|t, v| {
            let s = t.square(v[0])?;
            t.sum(s)
        }, &[x], DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
