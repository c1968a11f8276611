mod common;

use common::gradient;

#[test]
fn layer_stacks_params_and_inputs() {
    assert_eq!(gradient::layer_stacks_params_and_inputs(), 8);
}

#[test]
fn episode_loss_wrt_support_pixels() {
    assert_eq!(gradient::episode_loss_wrt_support_pixels(), 8);
}

#[test]
fn episode_loss_wrt_model_parameters() {
    assert_eq!(gradient::episode_loss_wrt_model_parameters(), 2);
}

#[test]
fn temperature_scaled_query_gradient() {
    assert_eq!(gradient::temperature_scaled_query_gradient(), 2);
}

#[test]
fn autoencoder_objectives_wrt_parameters() {
    assert_eq!(gradient::autoencoder_objectives_wrt_parameters(), 3);
}

#[test]
fn carlini_wagner_margin_wrt_support_pixels() {
    assert_eq!(gradient::carlini_wagner_margin_wrt_support_pixels(), 2);
}
