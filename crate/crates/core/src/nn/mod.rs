//! Small CPU network engine and the landmark, side and descriptor models.

pub mod loss;
pub mod models;
pub mod net;
pub mod optim;
pub mod recipes;
pub mod tensor;
pub mod train;

pub use loss::{loss_center, loss_mse, loss_softmax, softmax, CenterState};
pub use models::{
    classify_side, detect_landmarks, detect_single_stage, extract_cnn_descriptor, fit_input, predict_landmarks_two_stage,
    rectified_frame, side_from_logits, standardize, LandmarkNet, LandmarkRegressor, SidePrediction,
};
pub use net::{LayerKind, LayerSpec, Mode, Network, NetworkSpec, Shape, Trace};
pub use optim::{Optimizer, OptimizerKind};
pub use recipes::{
    train_descriptor_net, train_landmark_net, train_side_net, without_head, DescriptorTraining, LandmarkTraining, SideTraining,
};
pub use tensor::{Scalar, Tensor};
pub use train::{train, Dataset, LogRow, LossKind, Targets, TrainConfig, TrainLog, Trained};
