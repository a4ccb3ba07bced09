// Temporary diagnostic (removed before finalizing).
use mclnf_core::field::{FieldArch, FieldModel};
use mclnf_core::fisher::mse_loss_tape;
use mclnf_core::rng::Rng;
use mclnf_core::selftest::{fd_gradient, max_rel_err};
use mclnf_core::tape::Tape;
use mclnf_core::tensor::Tensor;

#[test]
#[ignore]
fn probe_gradient_models() {
    let mut rng = Rng::with_stream(42, 1000);
    for k in 0..50 {
        let sine = k % 2 == 0;
        let n_layers = 3 + rng.below(3);
        let hidden = 6 + rng.below(9);
        let d_in = 1 + rng.below(3);
        let d_out = 1 + rng.below(3);
        let mut arch = if sine {
            FieldArch::sine(n_layers, hidden, d_in, d_out)
        } else {
            FieldArch::relu(n_layers, hidden, d_in, d_out)
        };
        if !sine && rng.below(3) == 0 {
            arch.pos_enc = Some(1 + rng.below(3));
        }
        let model = FieldModel::init(arch.clone(), &mut rng).unwrap();
        let m = 8;
        let coords = Tensor::new(
            vec![m, d_in],
            (0..m * d_in).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let targets = Tensor::new(
            vec![m, d_out],
            (0..m * d_out).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let loss = mse_loss_tape(&mut tape, &arch, p, &coords, &targets).unwrap();
        let analytic = tape.backward(loss, p).unwrap();
        let fd = fd_gradient(
            |t| {
                let m2 = FieldModel::new(arch.clone(), t.clone()).unwrap();
                let pred = m2.predict(&coords);
                pred.data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / m as f64
            },
            &model.params,
            1e-5,
        );
        let rel = max_rel_err(&analytic, &fd);
        if rel > 1e-5 {
            eprintln!(
                "model {k}: {} layers={} hidden={} d_in={} d_out={} pe={:?} rel={rel:.3e}",
                if sine { "sine" } else { "relu" },
                n_layers,
                hidden,
                d_in,
                d_out,
                arch.pos_enc
            );
        }
    }
}
