use proptest::prelude::*;

use stability_lab::data::{build_dataset, make_teacher_linear, InputDistribution};
use stability_lab::fisher::{fisher_eigenvalues, fisher_frobenius, fisher_spectral, fisher_trace, gram_matrix};
use stability_lab::numerics::{sym_eigenvalues, Matrix, SymMatrix};
use stability_lab::{DiagNet, ModelParams, ReluNet};

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

fn relu_net(max_m: usize, max_d: usize) -> impl Strategy<Value = ReluNet> {
    (1..=max_m, 1..=max_d).prop_flat_map(|(m, d)| {
        (prop::collection::vec(finite(3.0), m), prop::collection::vec(finite(3.0), m * d))
            .prop_map(move |(a, w)| ReluNet::new(a, Matrix::from_vec(m, d, w).unwrap()).unwrap())
    })
}

fn diag_net(max_d: usize) -> impl Strategy<Value = DiagNet> {
    (1..=max_d).prop_flat_map(|d| {
        (prop::collection::vec(finite(3.0), d), prop::collection::vec(finite(3.0), d))
            .prop_map(|(a, b)| DiagNet::shallow(a, b).unwrap())
    })
}

proptest! {
    #[test]
    fn weighted_l2_dominates_path_norm(net in relu_net(6, 5), q in 0.01f64..50.0) {
        let lhs = net.weighted_l2_norm(q).unwrap();
        let rhs = 2.0 * q.sqrt() * net.path_norm();
        prop_assert!(lhs >= rhs * (1.0 - 1e-12) - 1e-300, "{lhs} < {rhs}");
    }

    #[test]
    fn alpha_dominates_beta(net in diag_net(12)) {
        let alpha = net.alpha_vector().unwrap();
        let beta = net.effective_coefficients();
        let a1: f64 = alpha.iter().sum();
        let b1: f64 = beta.iter().map(|b| b.abs()).sum();
        let a2: f64 = alpha.iter().map(|v| v * v).sum();
        let b2: f64 = beta.iter().map(|v| v * v).sum();
        prop_assert!(a1 >= 2.0 * b1 * (1.0 - 1e-12));
        prop_assert!(a2 >= 4.0 * b2 * (1.0 - 1e-12));
        if b1 > 1e-6 {
            prop_assert!(net.balancedness().unwrap() >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn balanced_layers_attain_equality(a in prop::collection::vec(finite(3.0), 1..10), signs in prop::collection::vec(any::<bool>(), 10)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let b: Vec<f64> = a.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let net = DiagNet::shallow(a, b).unwrap();
        prop_assert!((net.balancedness().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharpness_measures_are_ordered(net in relu_net(4, 3), xs in prop::collection::vec(finite(2.0), 18)) {
        let d = stability_lab::Model::input_dim(&net);
        let n = xs.len() / d.max(1);
        let x = Matrix::from_vec(n, d, xs[..n * d].to_vec()).unwrap();
        let teacher = make_teacher_linear(vec![1.0; d]).unwrap();
        let data = build_dataset(x, &teacher, InputDistribution::Cube, 0, 0).unwrap();
        let model = ModelParams::Relu(net);
        let gm = gram_matrix(&model, &data).unwrap();
        let (tr, fro, spec) = (fisher_trace(&gm), fisher_frobenius(&gm), fisher_spectral(&gm).unwrap());
        let slack = 1e-10 * (1.0 + tr);
        prop_assert!(spec <= fro + slack && fro <= tr + slack, "{spec} {fro} {tr}");
        let eig = fisher_eigenvalues(&gm).unwrap();
        prop_assert!((eig.iter().sum::<f64>() - tr).abs() <= slack);
        prop_assert!(eig.iter().all(|&v| v >= -slack));
    }

    #[test]
    fn eigenvalues_sum_to_trace(entries in prop::collection::vec(finite(5.0), 36)) {
        let m = SymMatrix::from_upper_fn(6, |i, j| entries[i * 6 + j]);
        let eig = sym_eigenvalues(&m).unwrap();
        prop_assert!((eig.iter().sum::<f64>() - m.trace()).abs() <= 1e-10 * (1.0 + m.frobenius()));
        let sq: f64 = eig.iter().map(|v| v * v).sum();
        prop_assert!((sq - m.frobenius_sq()).abs() <= 1e-9 * (1.0 + m.frobenius_sq()));
        prop_assert!(eig.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn params_json_round_trip_is_bitwise(net in relu_net(4, 4), diag in diag_net(6)) {
        for p in [ModelParams::Relu(net.clone()), ModelParams::Diag(diag.clone())] {
            let text = serde_json::to_string(&p).unwrap();
            let back: ModelParams = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
