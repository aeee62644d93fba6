//! Register, resample, segment and map back one volume.

use brainseg::mc::{mc_segment, segment, uncertainty, McConfig, UncertaintyReport};
use brainseg::registration::{register_affine_with, RegistrationConfig, RegistrationResult};
use brainseg::resample::{map_back, resample_onto, Interpolation};
use brainseg::unet::UNet;
use brainseg::volume::{LabelMap, StructureTable, Volume};

use crate::config::InferenceSettings;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// Segmentation on the input grid.
    pub labels: LabelMap,
    pub report: Option<UncertaintyReport>,
    pub registration: RegistrationResult,
}

pub fn check_model(model: &UNet<f32>, reference: &Volume) -> Result<(), CliError> {
    if model.spec.input_dims != reference.grid.dims {
        return Err(CliError::Input(format!(
            "checkpoint expects input dims {:?} but the reference grid is {:?}",
            model.spec.input_dims, reference.grid.dims
        )));
    }
    Ok(())
}

pub fn segment_volume(model: &mut UNet<f32>, reference: &Volume, input: &Volume, s: &InferenceSettings) -> Result<SegmentOutput, CliError> {
    check_model(model, reference)?;
    let cfg = RegistrationConfig { max_iterations_per_level: s.registration_iterations, ..RegistrationConfig::default() };
    let registration = register_affine_with(input, reference, &cfg)?;
    if !registration.converged {
        log::warn!(
            "registration did not converge (final cost {:.4}, initial {:.4}); continuing",
            registration.final_cost,
            registration.initial_cost
        );
    }
    let registered = resample_onto(input, &registration.transform, &reference.grid, Interpolation::CubicBSpline)?;
    let (seg, report) = if s.mc {
        let mc = mc_segment(model, &registered, &McConfig { samples: s.mc_samples, dropout_rate: s.dropout_rate, seed: s.seed })?;
        let report = uncertainty(&mc.samples, &StructureTable::standard(), s.cv_threshold)?;
        (mc.labels, Some(report))
    } else {
        (segment(model, &registered)?, None)
    };
    let labels = map_back(&seg, &input.grid, &registration.transform)?;
    Ok(SegmentOutput { labels, report, registration })
}

/// Human-readable registration summary.
pub fn registration_text(r: &RegistrationResult) -> String {
    format!(
        "{}initial_cost {:.6}\nfinal_cost {:.6}\niterations {}\nconverged {}\n",
        r.transform.to_text(),
        r.initial_cost,
        r.final_cost,
        r.iterations,
        r.converged
    )
}
