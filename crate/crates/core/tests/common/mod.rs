#![allow(dead_code)]

use phenogp_core::{Element, Op, Tree};
use rand::Rng;

/// Constants that make exact equivalences likely alongside arbitrary ones.
const SMALL_CONSTANTS: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 0.5];

/// Random tree of at most `max_size` nodes over `n_features` inputs.
pub fn random_tree<R: Rng>(rng: &mut R, max_size: usize, n_features: usize) -> Tree {
    let p_function = rng.gen_range(0.3..0.6);
    let mut elements = Vec::new();
    let mut open = 1usize;
    while open > 0 {
        if elements.len() + open + 2 <= max_size && rng.gen_bool(p_function) {
            elements.push(Element::Function(Op::ALL[rng.gen_range(0..4)]));
            open += 1;
        } else {
            elements.push(random_terminal(rng, n_features));
            open -= 1;
        }
    }
    Tree::new(elements).expect("generator emits valid prefix order")
}

pub fn random_terminal<R: Rng>(rng: &mut R, n_features: usize) -> Element {
    match rng.gen_range(0..10) {
        0..=5 => Element::Feature(rng.gen_range(0..n_features)),
        6..=8 => Element::Constant(SMALL_CONSTANTS[rng.gen_range(0..SMALL_CONSTANTS.len())]),
        _ => Element::Constant(rng.gen_range(-5.0..5.0)),
    }
}

/// `n_features` columns of `n` uniform inputs in [-2, 2].
pub fn random_inputs<R: Rng>(rng: &mut R, n: usize, n_features: usize) -> Vec<Vec<f64>> {
    (0..n_features).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}
