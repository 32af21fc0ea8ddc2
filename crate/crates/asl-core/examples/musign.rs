// Isolated check: with focal terms lower at larger positions, minimizing
// dot(h, f) should pull mu upward (toward the low-loss positions).
use asl_core::autodiff::{ParamStore, Tape, Tensor};
use asl_core::sensitivity::{SensitivityParams, SubTask};

fn main() {
    let mut store = ParamStore::new();
    let sens = SensitivityParams::register(&mut store, 1, 0.5, 2.0, 0.1, 8.0, true).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let positions = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let f = vec![5.0, 4.0, 3.0, 2.0, 1.0]; // low loss late
    let h = sens
        .instance_weights(&tape, &bound, SubTask::Classification, 0, &positions)
        .unwrap();
    let fc = tape.constant(Tensor::from_vec(f));
    let loss = h.mul(fc).unwrap().sum_all();
    let grads = tape.backward(loss).unwrap();
    let g_mu = grads.get(bound.var(sens.mu_cls)).unwrap().data()[0];
    let g_sigma = grads.get(bound.var(sens.sigma_cls)).unwrap().data()[0];
    println!("d loss/d mu = {g_mu:.6} (negative => mu rises under descent)");
    println!("d loss/d sigma = {g_sigma:.6}");
}
