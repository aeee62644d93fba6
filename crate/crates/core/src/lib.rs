pub mod affine;
pub mod autodiff;
pub mod checkpoint;
pub mod loss;
pub mod manifest;
pub mod mc;
pub mod metrics;
pub mod modality;
pub mod mvox;
pub mod optim;
pub mod phantom;
pub mod real;
pub mod registration;
pub mod resample;
pub mod seed;
pub mod trainer;
pub mod unet;
pub mod volume;
