//! Small convolutional triage classifier: model, training and class
//! activation maps.

pub mod cam;
pub mod net;
pub mod train;

pub use cam::{compute_cam, ClassActivationMap};
pub use net::{forward, init_params, loss_and_grad, ModelParams, Scalar};
pub use train::{
    predict, predict_all, read_model, train, write_model, Augmentation, Dataset, EpochRecord,
    TrainConfig, TrainedModel,
};
