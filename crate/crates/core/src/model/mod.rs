pub mod builders;
pub mod network;
pub mod spec;

pub use builders::{
    build_alexnet, build_proposed_cnn, build_proposed_cnn_sized, replace_last_layers,
    replace_last_layers_spec, ALEXNET_INPUT, DEFAULT_FC_HIDDEN, PROPOSED_CNN_INPUT,
};
pub use network::Network;
pub use spec::{ClassLabel, LayerSpec, ModelSpec, ParamSlot};
