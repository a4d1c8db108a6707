mod common;

use cfl_core::feedback::{
    closed_form_adapter_params, per_layer_full_params, AdapterCount, AdapterInit, AdapterSpec, AdapterVariant,
    Placement, PlacementPreset, ProjectorSpec,
};
use cfl_core::{CflModel, ModelSpec, Tensor};
use common::{mlp, random_init, random_input, rng};
use proptest::prelude::*;
use rand::Rng;

fn build(d_x: usize, d_h: usize, d_y: usize, layers: usize, projector: ProjectorSpec, adapter: AdapterSpec) -> CflModel {
    CflModel::new(ModelSpec {
        backbone: mlp(d_x, d_h, d_y, layers),
        projector,
        adapter,
        seed: 17,
    })
    .unwrap()
}

fn set(m: &mut CflModel, name: &str, value: Tensor<f64>) {
    let id = m.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(m.params.get(id).shape(), value.shape(), "{name}");
    *m.params.get_mut(id) = value;
}

fn get<'a>(m: &'a CflModel, name: &str) -> &'a Tensor<f64> {
    m.params.get(m.params.find(name).unwrap())
}

fn spec(variant: AdapterVariant, init: AdapterInit, gate: bool) -> AdapterSpec {
    AdapterSpec {
        init,
        gate,
        rank: 3,
        ..AdapterSpec::new(variant)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Row-major `a (n×k) · b (k×m)`.
fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn project(m: &CflModel, y: &Tensor<f64>) -> Tensor<f64> {
    let mut s = m.inference_session::<f64>();
    let yn = s.graph.constant(y.clone()).unwrap();
    let z = m.projector.project(&mut s, yn).unwrap();
    s.graph.value(z).clone()
}

/// Applies the bank at layer `l` to `h` with context `z`.
fn apply(m: &CflModel, l: usize, h: &Tensor<f64>, z: &Tensor<f64>) -> Tensor<f64> {
    let mut s = m.inference_session::<f64>();
    let hn = s.graph.constant(h.clone()).unwrap();
    let zn = s.graph.constant(z.clone()).unwrap();
    let md = m.adapters.modulation(&mut s, zn).unwrap();
    let out = m.adapters.apply(&mut s, &md, l, hn).unwrap();
    s.graph.value(out).clone()
}

#[test]
fn full_projector_reproduces_low_rank_map() {
    let low = build(3, 4, 10, 2, ProjectorSpec::LowRank { d_z: 6, rank: 4 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    let mut full = build(3, 4, 10, 2, ProjectorSpec::Full { d_z: 6 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    let a = get(&low, "projector.basis").clone();
    let b = get(&low, "projector.coef").clone();
    set(&mut full, "projector.weight", Tensor::matrix(10, 6, mm(a.data(), b.data(), 10, 4, 6)).unwrap());
    set(&mut full, "projector.bias", Tensor::zeros(&[6]));
    let mut r = rng(1);
    let y = random_input(&mut r, 1000, 10);
    let (zl, zf) = (project(&low, &y), project(&full, &y));
    let worst = zl.data().iter().zip(zf.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn low_rank_basis_selects_coordinates() {
    let mut m = build(2, 4, 3, 1, ProjectorSpec::LowRank { d_z: 2, rank: 1 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    set(&mut m, "projector.basis", Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
    set(&mut m, "projector.coef", Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
    let z = project(&m, &Tensor::matrix(1, 3, vec![5.0, 7.0, 9.0]).unwrap());
    assert_eq!(z.data(), &[10.0, 15.0]);
}

#[test]
fn basis_has_orthonormal_columns() {
    let m = build(2, 4, 12, 1, ProjectorSpec::LowRank { d_z: 6, rank: 5 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    let a = get(&m, "projector.basis");
    let gram = a.transpose().unwrap().matmul(a).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((gram.at(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_full_projector_gives_zero_context() {
    let mut m = build(2, 4, 3, 1, ProjectorSpec::Full { d_z: 5 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    set(&mut m, "projector.weight", Tensor::zeros(&[3, 5]));
    let mut r = rng(2);
    let z = project(&m, &random_input(&mut r, 4, 3));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn film_identity_and_bias_only() {
    let mut r = rng(3);
    let h = random_input(&mut r, 3, 5);
    let z = random_input(&mut r, 3, 2);
    let mut m = build(4, 5, 3, 2, ProjectorSpec::Full { d_z: 2 }, AdapterSpec::new(AdapterVariant::PerLayerFilm));
    for l in 1..=2 {
        assert_eq!(apply(&m, l, &h, &z).data(), h.data());
    }
    set(&mut m, "adapter.film1.b_gamma", Tensor::full(&[5], 2.0));
    let zero = Tensor::zeros(&[3, 2]);
    let out = apply(&m, 1, &h, &zero);
    let twice: Vec<f64> = h.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(out.data(), &twice[..]);
}

#[test]
fn film_matches_scalar_oracle() {
    let mut r = rng(4);
    let (rows, d_h, d_z) = (3, 6, 4);
    for variant in [AdapterVariant::PerLayerFilm, AdapterVariant::TiedFilm] {
        let m = build(5, d_h, 7, 3, ProjectorSpec::Full { d_z }, spec(variant, random_init(), true));
        let h = random_input(&mut r, rows, d_h);
        let z = random_input(&mut r, rows, d_z);
        for l in 1..=3 {
            let (prefix, alpha) = match variant {
                AdapterVariant::PerLayerFilm => (format!("adapter.film{l}"), 1.0),
                _ => ("adapter.film_shared".to_string(), get(&m, &format!("adapter.alpha{l}")).data()[0]),
            };
            let wg = get(&m, &format!("{prefix}.w_gamma"));
            let bg = get(&m, &format!("{prefix}.b_gamma"));
            let wb = get(&m, &format!("{prefix}.w_beta"));
            let bb = get(&m, &format!("{prefix}.b_beta"));
            let zg = mm(z.data(), wg.data(), rows, d_z, d_h);
            let zb = mm(z.data(), wb.data(), rows, d_z, d_h);
            let got = apply(&m, l, &h, &z);
            for i in 0..rows {
                for j in 0..d_h {
                    let k = i * d_h + j;
                    let gamma = alpha * (zg[k] + bg.data()[j]);
                    let beta = alpha * (zb[k] + bb.data()[j]);
                    let want = gamma * h.data()[k] + beta;
                    assert!((got.data()[k] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn merged_matches_scalar_oracle() {
    let mut r = rng(5);
    let (rows, d_h, d_z) = (2, 5, 3);
    for gate in [false, true] {
        let m = build(4, d_h, 6, 2, ProjectorSpec::Full { d_z }, spec(AdapterVariant::MergedCore, random_init(), gate));
        let h = random_input(&mut r, rows, d_h);
        let z = random_input(&mut r, 1, d_z);
        let core = get(&m, "adapter.core");
        for l in 1..=2 {
            let b = get(&m, &format!("adapter.bias{l}"));
            let alpha = if gate { get(&m, &format!("adapter.gate{l}")).data()[0] } else { 1.0 };
            let got = apply(&m, l, &h, &z);
            for i in 0..rows {
                let mut stacked = h.data()[i * d_h..(i + 1) * d_h].to_vec();
                stacked.extend_from_slice(z.data());
                let pre = mm(&stacked, core.data(), 1, d_h + d_z, d_h);
                for j in 0..d_h {
                    let psi = gelu(pre[j]) + b.data()[j];
                    let hv = h.data()[i * d_h + j];
                    let want = alpha * psi + (1.0 - alpha) * hv;
                    assert!((got.data()[i * d_h + j] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn merged_closed_gate_and_zero_core() {
    let mut r = rng(6);
    let h = random_input(&mut r, 2, 4);
    let z = random_input(&mut r, 2, 2);
    let closed = build(3, 4, 3, 2, ProjectorSpec::Full { d_z: 2 }, spec(AdapterVariant::MergedCore, AdapterInit::Identity, true));
    assert_eq!(apply(&closed, 2, &h, &z).data(), h.data());

    let mut zeroed = build(3, 4, 3, 2, ProjectorSpec::Full { d_z: 2 }, spec(AdapterVariant::MergedCore, random_init(), false));
    set(&mut zeroed, "adapter.core", Tensor::zeros(&[6, 4]));
    for l in 1..=2 {
        set(&mut zeroed, &format!("adapter.bias{l}"), Tensor::zeros(&[4]));
        assert!(apply(&zeroed, l, &h, &z).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn low_rank_merged_with_zero_up_equals_base() {
    let mut r = rng(7);
    let h = random_input(&mut r, 3, 5);
    let z = random_input(&mut r, 3, 2);
    let mut low = build(3, 5, 4, 2, ProjectorSpec::Full { d_z: 2 }, spec(AdapterVariant::LowRankMerged, random_init(), true));
    set(&mut low, "adapter.up", Tensor::zeros(&[3, 5]));
    let mut merged = build(3, 5, 4, 2, ProjectorSpec::Full { d_z: 2 }, spec(AdapterVariant::MergedCore, random_init(), true));
    set(&mut merged, "adapter.core", get(&low, "adapter.base").clone());
    for l in 1..=2 {
        for p in ["bias", "gate"] {
            let name = format!("adapter.{p}{l}");
            set(&mut merged, &name, get(&low, &name).clone());
        }
        assert_eq!(apply(&low, l, &h, &z).data(), apply(&merged, l, &h, &z).data());
    }
}

#[test]
fn empty_placement_is_identity() {
    let mut r = rng(8);
    let h = random_input(&mut r, 2, 4);
    let z = random_input(&mut r, 2, 2);
    for variant in AdapterVariant::ALL {
        let a = AdapterSpec {
            placement: Placement::Preset(PlacementPreset::None),
            ..spec(variant, random_init(), true)
        };
        let m = build(3, 4, 3, 3, ProjectorSpec::Full { d_z: 2 }, a);
        assert_eq!(
            AdapterCount::enumerate(&m.params),
            closed_form_adapter_params(variant, 4, 2, 0, true, 3),
            "{variant:?}"
        );
        for l in 1..=3 {
            assert_eq!(apply(&m, l, &h, &z).data(), h.data());
        }
    }
}

#[test]
fn first_last_third_placement_probe() {
    let mut r = rng(9);
    for variant in AdapterVariant::ALL {
        let a = AdapterSpec {
            placement: Placement::Preset(PlacementPreset::FirstLastThird),
            ..spec(variant, random_init(), true)
        };
        let m = build(3, 4, 3, 12, ProjectorSpec::Full { d_z: 2 }, a);
        let h = random_input(&mut r, 2, 4);
        let z1 = random_input(&mut r, 2, 2);
        let z2 = z1.map(|v| v + 0.25);
        let changed: Vec<usize> = (1..=12).filter(|&l| apply(&m, l, &h, &z1) != apply(&m, l, &h, &z2)).collect();
        assert_eq!(changed, vec![1, 2, 3, 4, 9, 10, 11, 12], "{variant:?}");
    }
}

#[test]
fn rejects_bad_context_and_layer() {
    let m = build(3, 4, 3, 2, ProjectorSpec::Full { d_z: 2 }, AdapterSpec::new(AdapterVariant::TiedFilm));
    let mut s = m.inference_session::<f64>();
    let z = s.graph.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(m.adapters.modulation(&mut s, z).is_err());
    let z = s.graph.constant(Tensor::zeros(&[1, 2])).unwrap();
    let h = s.graph.constant(Tensor::zeros(&[1, 4])).unwrap();
    let md = m.adapters.modulation(&mut s, z).unwrap();
    assert!(m.adapters.apply(&mut s, &md, 0, h).is_err());
    assert!(m.adapters.apply(&mut s, &md, 3, h).is_err());
    assert!(m.adapters.merged(&mut s, 1, h, z).is_err());
}

#[test]
fn worked_counts_at_full_scale() {
    let cases = [
        (AdapterVariant::PerLayerFilm, 399_360),
        (AdapterVariant::MergedCore, 84_992),
    ];
    for (variant, want) in cases {
        let m = build(8, 256, 10, 12, ProjectorSpec::Full { d_z: 64 }, spec(variant, random_init(), false));
        let c = AdapterCount::enumerate(&m.params);
        assert_eq!(c.trainable, want);
        assert_eq!(c, closed_form_adapter_params(variant, 256, 64, 12, false, 3));
    }
    let full = per_layer_full_params(12, 256, 64);
    assert_eq!(full, 983_040);
    assert!(full as f64 / 84_992.0 >= 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn enumerated_counts_match_closed_form(
        d_h in 2usize..12,
        d_z in 1usize..6,
        layers in 1usize..6,
        rank in 1usize..4,
        gate: bool,
        variant in 0usize..4,
        seed: u64,
    ) {
        let variant = AdapterVariant::ALL[variant];
        let rank = rank.min(d_h);
        let mut pr = rng(seed);
        let placed: Vec<usize> = (1..=layers).filter(|_| pr.gen_bool(0.6)).collect();
        let a = AdapterSpec {
            placement: Placement::Layers(placed.clone()),
            gate,
            rank,
            ..AdapterSpec::new(variant)
        };
        let a = if !variant.is_film() && !gate { AdapterSpec { init: random_init(), ..a } } else { a };
        let m = build(3, d_h, 6, layers, ProjectorSpec::Full { d_z: d_z.min(6) }, a);
        let want = closed_form_adapter_params(variant, d_h, d_z.min(6), placed.len(), gate, rank);
        prop_assert_eq!(AdapterCount::enumerate(&m.params), want);
    }
}
