use htv_web_demo::{Session, CHANNELS, HORIZON, INPUT_LEN};

#[test]
fn outputs_have_documented_shapes() {
    let s = Session::new(7, 3.0, 3).unwrap();
    let origin = s.split.boundaries.1 + INPUT_LEN;
    assert_eq!(s.stationarize(origin).unwrap().len(), INPUT_LEN * CHANNELS);
    assert_eq!(s.forecast(origin).unwrap().len(), HORIZON * CHANNELS);
    assert_eq!(s.latents(origin).unwrap().len(), 4 * INPUT_LEN);
    assert!(s.forecast(INPUT_LEN - 1).is_err());
    assert!(s.forecast(s.series.len() - HORIZON + 1).is_err());
}

#[test]
fn normalized_window_has_zero_mean() {
    let s = Session::new(1, 2.0, 2).unwrap();
    let x = s.stationarize(200).unwrap();
    for c in 0..CHANNELS {
        let mean: f64 = (0..INPUT_LEN).map(|t| x[t * CHANNELS + c]).sum::<f64>() / INPUT_LEN as f64;
        assert!(mean.abs() < 1e-9);
    }
}

#[test]
fn fused_row_is_sum_of_layer_rows() {
    let s = Session::new(2, 3.0, 3).unwrap();
    let lat = s.latents(300).unwrap();
    for t in 0..INPUT_LEN {
        let parts: f64 = (0..3).map(|i| lat[i * INPUT_LEN + t]).sum();
        assert!((parts - lat[3 * INPUT_LEN + t]).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_improves_the_forecast() {
    let run = || {
        let mut s = Session::new(7, 3.0, 3).unwrap();
        let before = s.scores().unwrap()[0];
        s.train(120).unwrap();
        (before, s.scores().unwrap(), s.losses.clone())
    };
    let (before, after, losses) = run();
    assert_eq!(run().2, losses);
    assert!(after[0] < before);
    assert!(losses[110..].iter().sum::<f64>() / 10.0 < losses[0]);
}

#[test]
fn alpha_zero_ignores_latents() {
    let mut s = Session::new(3, 3.0, 2).unwrap();
    s.train(10).unwrap();
    s.set_alpha(0.0);
    let a = s.forecast(400).unwrap();
    for t in s.model.params.tensors_mut().iter_mut().take(4) {
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    assert_eq!(s.forecast(400).unwrap(), a);
}
