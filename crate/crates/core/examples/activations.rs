//! The nonlinearities used by the model, evaluated on a few points.

use mqa::numerics::{relu, scaled_tanh, scaled_tanh_deriv, sigmoid, softmax};

fn main() {
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>6}",
        "x", "g(x)", "g'(x)", "sigmoid", "relu"
    );
    for x in [-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 3.0] {
        println!(
            "{x:>6.2} {:>10.6} {:>10.6} {:>10.6} {:>6.2}",
            scaled_tanh(x),
            scaled_tanh_deriv(x),
            sigmoid(x),
            relu(x)
        );
    }
    // g(±1) ≈ ±1 by construction of the 1.7159 and 2/3 constants
    println!("g(1) = {}", scaled_tanh(1.0));
    let logits = [1000.0, 1001.0, 1002.0];
    println!("softmax({logits:?}) = {:?}", softmax(&logits));
}
