mod common;

use cfl_core::backbone::{BackboneSpec, MlpSpec};
use cfl_core::diagnostics::{
    cost_report, fixed_point_probe, fixed_point_probe_from, latency_sweep, lipschitz_report, spectral_norm,
    spectral_norm_estimate, spectral_rescale,
};
use cfl_core::feedback::{closed_form_adapter_params, AdapterSpec, AdapterVariant, ProjectorSpec};
use cfl_core::refine::{refine_with, UnrollOptions};
use cfl_core::{Activation, CflError, CflModel, Input, ModelSpec, ModelState, Tensor};
use common::{adapter, mlp, random_init, random_input, rng, transformer};
use proptest::prelude::*;
use rand::Rng;

/// Singular values by one-sided Jacobi rotations.
fn jacobi_singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = a.dims2().unwrap();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn contractive_model(seed: u64, variant: AdapterVariant) -> CflModel {
    CflModel::new(ModelSpec {
        backbone: mlp(4, 6, 3, 3),
        projector: ProjectorSpec::LowRank { d_z: 3, rank: 2 },
        adapter: AdapterSpec {
            gate: false,
            ..adapter(variant, random_init())
        },
        seed,
    })
    .unwrap()
}

fn jitter(st: &ModelState, r: &mut rand_chacha::ChaCha8Rng) -> ModelState {
    let mut out = st.clone();
    for t in out.hiddens.iter_mut().chain(std::iter::once(&mut out.y)) {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.5..0.5));
    }
    out.tau = 0;
    out
}

fn set(m: &mut CflModel, name: &str, v: Vec<f64>) {
    let id = m.params.find(name).unwrap();
    let shape = m.params.get(id).shape().to_vec();
    *m.params.get_mut(id) = Tensor::new(shape, v).unwrap();
}

#[test]
fn spectral_norm_matches_jacobi_svd() {
    let mut r = rng(1);
    for _ in 0..30 {
        let (m, n) = (r.gen_range(1..9), r.gen_range(1..9));
        let w = random_input(&mut r, m, n);
        let want = jacobi_singular_values(&w)[0];
        let got = spectral_norm(&w).unwrap();
        assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{m}x{n}: {got} vs {want}");
        assert!(spectral_norm_estimate(&w, 3).unwrap() <= want * (1.0 + 1e-12));
    }
    assert_eq!(spectral_norm(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
    let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, -5.0]).unwrap();
    assert!((spectral_norm(&d).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn scalar_loop_converges_to_closed_form_fixed_point() {
    let spec = ModelSpec {
        backbone: BackboneSpec::Mlp(MlpSpec {
            d_x: 1,
            d_h: 1,
            d_y: 1,
            layers: 1,
            activation: Activation::Identity,
        }),
        projector: ProjectorSpec::Full { d_z: 1 },
        adapter: AdapterSpec {
            gate: false,
            activation: Activation::Identity,
            ..adapter(AdapterVariant::MergedCore, random_init())
        },
        seed: 0,
    };
    let mut m = CflModel::new(spec).unwrap();
    let (w1, b1, v, c0, p, pb, whh, wzh, b) = (0.8, 0.1, 1.5, -0.2, 0.6, 0.3, 0.4, 0.5, 0.05);
    set(&mut m, "mlp.f1.weight", vec![w1]);
    set(&mut m, "mlp.f1.bias", vec![b1]);
    set(&mut m, "mlp.head.weight", vec![v]);
    set(&mut m, "mlp.head.bias", vec![c0]);
    set(&mut m, "projector.weight", vec![p]);
    set(&mut m, "projector.bias", vec![pb]);
    set(&mut m, "adapter.core", vec![whh, wzh]);
    set(&mut m, "adapter.bias1", vec![b]);
    // h' = k·h + e
    let k = whh + wzh * p * v;
    let e = wzh * (p * c0 + pb) + b;
    let h_star = e / (1.0 - k);
    let x = Tensor::matrix(1, 1, vec![0.7]).unwrap();
    let probe = fixed_point_probe(&m, Input::Dense(&x), 200).unwrap();
    let fp = probe.fixed_point.expect("converged");
    assert!((fp.hiddens[0].data()[0] - h_star).abs() < 1e-9);
    assert!((fp.y.data()[0] - (v * h_star + c0)).abs() < 1e-9);
    assert!((probe.c_hat - k.abs()).abs() < 1e-6, "{} vs {k}", probe.c_hat);
    assert!(!probe.diverged);
    let report = lipschitz_report(&m).unwrap();
    assert!(report.l_total >= k.abs());
}

#[test]
fn rescale_meets_target_and_bounds_steps() {
    let mut r = rng(2);
    for seed in 0..20 {
        let variant = if seed % 2 == 0 { AdapterVariant::MergedCore } else { AdapterVariant::LowRankMerged };
        let m = contractive_model(seed, variant);
        let res = spectral_rescale(&m, 0.5).unwrap();
        assert!(res.scale > 0.0 && res.scale <= 1.0);
        assert!(res.after.l_total <= 0.5 + 1e-9, "{}", res.after.l_total);
        assert!(res.after.contractive);
        let scaled = &res.model;
        let x = random_input(&mut r, 1, 4);
        let probe = fixed_point_probe(scaled, Input::Dense(&x), 10).unwrap();
        assert!(probe.c_hat <= 0.5 + 1e-6, "{}", probe.c_hat);
        for w in probe.deltas.windows(2) {
            assert!(w[1] <= res.after.l_total * w[0] + 1e-15);
        }
        // one step from two arbitrary states
        let base = fixed_point_probe(scaled, Input::Dense(&x), 3).unwrap().last_state.unwrap();
        let (s1, s2) = (jitter(&base, &mut r), jitter(&base, &mut r));
        let step = |s: &ModelState| {
            let opts = UnrollOptions {
                t_max: 1,
                start: Some(s),
                ..Default::default()
            };
            refine_with::<f64>(scaled, Input::Dense(&x), &opts).unwrap().final_state
        };
        let d0 = s1.distance(&s2).unwrap();
        let d1 = step(&s1).distance(&step(&s2)).unwrap();
        assert!(d1 <= res.after.l_total * d0 * (1.0 + 1e-9));
    }
}

#[test]
fn fixed_point_is_unique_from_perturbed_starts() {
    let m = spectral_rescale(&contractive_model(3, AdapterVariant::MergedCore), 0.5).unwrap().model;
    let mut r = rng(3);
    let x = random_input(&mut r, 1, 4);
    let a = fixed_point_probe(&m, Input::Dense(&x), 80).unwrap().fixed_point.unwrap();
    let start = ModelState {
        hiddens: a.hiddens.iter().map(|h| h.map(|v| v + 3.0)).collect(),
        y: a.y.map(|v| v - 3.0),
        tau: 0,
    };
    let b = fixed_point_probe_from(&m, Input::Dense(&x), Some(&start), 80).unwrap().fixed_point.unwrap();
    assert!(a.distance(&b).unwrap() < 1e-7);
}

#[test]
fn film_banks_have_no_global_bound() {
    for variant in [AdapterVariant::PerLayerFilm, AdapterVariant::TiedFilm] {
        let m = contractive_model(1, variant);
        let rep = lipschitz_report(&m).unwrap();
        assert!(!rep.globally_lipschitz);
        assert!(rep.l_total.is_infinite());
        assert!(!rep.contractive);
        assert!(matches!(spectral_rescale(&m, 0.5), Err(CflError::NotGloballyLipschitz(_))));
    }
}

#[test]
fn rescale_argument_and_backbone_checks() {
    let m = contractive_model(4, AdapterVariant::MergedCore);
    for c in [0.0, 1.0, -0.5, f64::NAN] {
        assert!(spectral_rescale(&m, c).is_err());
    }
    let once = spectral_rescale(&m, 0.5).unwrap().model;
    let again = spectral_rescale(&once, 0.5).unwrap();
    assert_eq!(again.scale, 1.0);
    let t = CflModel::new(ModelSpec {
        backbone: transformer(5, 4, 3, 2),
        projector: ProjectorSpec::Full { d_z: 2 },
        adapter: AdapterSpec {
            gate: false,
            ..adapter(AdapterVariant::MergedCore, random_init())
        },
        seed: 0,
    })
    .unwrap();
    assert!(lipschitz_report(&t).unwrap().heuristic);
    assert!(spectral_rescale(&t, 0.5).is_err());
}

#[test]
fn probe_flags_divergence_and_short_horizons() {
    let mut m = contractive_model(5, AdapterVariant::MergedCore);
    let x = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!(fixed_point_probe(&m, Input::Dense(&x), 2).is_err());
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 40.0);
    }
    let p = fixed_point_probe(&m, Input::Dense(&x), 30).unwrap();
    assert!(p.diverged || p.c_hat > 1.0, "{p:?}");
    assert!(p.fixed_point.is_none());
}

#[test]
fn cost_report_reference_dimensions() {
    let spec = ModelSpec {
        backbone: mlp(784, 256, 10, 4),
        projector: ProjectorSpec::LowRank { d_z: 64, rank: 8 },
        adapter: AdapterSpec::new(AdapterVariant::TiedFilm),
        seed: 0,
    };
    let c = cost_report(&spec, 2.0).unwrap();
    assert_eq!(c.formula_params, 2 * 64 * 256 + 8 * (10 + 64));
    assert_eq!(c.enumerated_core_params, c.formula_params);
    assert_eq!(c.adapter_enumerated, c.adapter_closed_form);
    assert_eq!(c.adapter_closed_form, closed_form_adapter_params(AdapterVariant::TiedFilm, 256, 64, 4, true, 8));
    assert_eq!(c.measured_generator_macs, 2 * 64 * 256);
    assert_eq!(c.formula_macs_per_refinement, 2 * 64 * 256 + 784);
    assert_eq!(c.formula_macs_total, 2.0 * c.formula_macs_per_refinement as f64);
    assert_eq!(c.extra_params, c.enumerated_core_params + c.small_params);
    assert!(c.within_ten_percent);
    assert!((c.overhead_ratio - c.extra_params as f64 / c.backbone_params as f64).abs() < 1e-15);
    assert_eq!(
        c.measured_feedback_flops,
        c.measured_projector_flops + 2 * c.measured_generator_macs + c.measured_fusion_flops
    );
    assert!(c.measured_refinement_flops > c.measured_feedback_flops);
    let csv = c.to_csv();
    assert!(csv.lines().any(|l| l == "formula_params,33360"));
    assert!(c.to_text().contains("tied_film"));
}

#[test]
fn latency_sweep_shape_and_fit() {
    let m = contractive_model(6, AdapterVariant::MergedCore);
    let x = Tensor::zeros(&[4, 4]);
    assert!(latency_sweep(&m, Input::Dense(&x), &[0, 1], 10, 0).is_err());
    assert!(latency_sweep(&m, Input::Dense(&x), &[], 30, 0).is_err());
    let table = latency_sweep(&m, Input::Dense(&x), &[0, 1, 2], 30, 2).unwrap();
    assert_eq!(table.rows.len(), 3);
    for (row, t) in table.rows.iter().zip(0..) {
        assert_eq!(row.t, t);
        assert_eq!(row.reps, 30);
        assert!(row.mean_s > 0.0 && row.std_s >= 0.0 && row.median_s > 0.0);
    }
    let csv = table.to_csv();
    assert!(csv.starts_with("T,mean_s,std_s,cv,median_s,reps\n"));
    assert!(csv.contains("# fit"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rescale_is_a_contraction_target(seed in 0u64..1000, c in 0.05f64..0.95) {
        let m = contractive_model(seed, AdapterVariant::MergedCore);
        let res = spectral_rescale(&m, c).unwrap();
        prop_assert!(res.after.l_total <= c + 1e-9);
        prop_assert!(res.before.l_total >= res.after.l_total);
    }
}
