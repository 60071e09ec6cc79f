use candle_core::{Device, Tensor};
use entity_flow::interpolants::{interpolate, velocity_from_data_prediction, Schedule, SingularityPolicy};
use proptest::prelude::*;

fn tensor(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn velocity_of_exact_prediction_is_path_derivative(
        tau in 0.05f64..0.95,
        gvp in any::<bool>(),
        o1 in prop::collection::vec(-3.0f64..3.0, 6),
        eps in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let schedule = if gvp { Schedule::Gvp } else { Schedule::Linear };
        let (a, b) = (tensor(&o1), tensor(&eps));
        let o = interpolate(&a, &b, tau, schedule).unwrap();
        let v = velocity_from_data_prediction(&o, &a, tau, schedule, SingularityPolicy::Strict).unwrap();
        let got: Vec<f64> = v.value.to_vec1().unwrap();
        // Derivative of the path by central differences in tau.
        let h = 1e-5;
        let p: Vec<f64> = interpolate(&a, &b, tau + h, schedule).unwrap().to_vec1().unwrap();
        let m: Vec<f64> = interpolate(&a, &b, tau - h, schedule).unwrap().to_vec1().unwrap();
        for i in 0..6 {
            let want = (p[i] - m[i]) / (2.0 * h);
            prop_assert!((got[i] - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {}", got[i], want);
        }
    }
}
