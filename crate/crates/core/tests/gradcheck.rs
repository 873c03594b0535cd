mod common;

use common::gradcheck;

#[test]
fn linear_gradients() {
    gradcheck::linear_gradients();
}

#[test]
fn conv2d_gradients() {
    gradcheck::conv2d_gradients();
}

#[test]
fn silu_gradients() {
    gradcheck::silu_gradients();
}

#[test]
fn softmax_gradients() {
    gradcheck::softmax_gradients();
}

#[test]
fn elementwise_gradients() {
    gradcheck::elementwise_gradients();
}

#[test]
fn reduction_gradients() {
    gradcheck::reduction_gradients();
}

#[test]
fn layout_gradients() {
    gradcheck::layout_gradients();
}

#[test]
fn group_norm_gradients() {
    gradcheck::group_norm_gradients();
}

#[test]
fn attention_gradients() {
    gradcheck::attention_gradients();
}

#[test]
fn composite_graph_gradients() {
    gradcheck::composite_graph_gradients();
}

#[test]
fn full_student_network_with_distillation_loss() {
    gradcheck::full_student_network_with_distillation_loss();
}

#[test]
fn backward_is_bit_deterministic() {
    gradcheck::backward_is_bit_deterministic();
}
