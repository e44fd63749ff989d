//! Deterministic demo bundle and radiograph.
//!
//! The networks are untrained seeded initializations whose output bias is
//! pushed far enough that the fixture image always yields result code `100`.
//! Used by the golden tests and handy for exercising a local server.

use cxr_core::bundle::ModelBundle;
use cxr_core::classifier::{build_model, ArchWidth, TrainedModel};
use cxr_core::imaging::{encode_pgm, GrayImage};
use cxr_core::{Abnormality, MasterText};

const OUTPUT_BIAS: f64 = 4.0;

/// Result code the fixture bundle assigns to [`fixture_image`].
pub const FIXTURE_CODE: &str = "100";

pub fn fixture_bundle() -> ModelBundle {
    let models = Abnormality::ALL.map(|a| {
        let mut net = build_model(ArchWidth::Small, 100 + a.index() as u64);
        let bias = if a == Abnormality::Cardiomegaly { OUTPUT_BIAS } else { -OUTPUT_BIAS };
        let params = net.params_mut();
        let last = params.len() - 1;
        params.into_iter().nth(last).expect("output bias").data_mut()[0] = bias;
        TrainedModel::from_network(a, net)
    });
    ModelBundle::from_models(models, MasterText::default()).quantized()
}

/// 160×120 PGM with a bright central blob on a vertical gradient.
pub fn fixture_image() -> Vec<u8> {
    let img = GrayImage::from_fn(160, 120, |x, y| {
        let (dx, dy) = (x as f64 - 80.0, y as f64 - 70.0);
        let blob = (-(dx * dx + dy * dy) / 800.0).exp();
        (0.2 + 0.4 * y as f64 / 119.0 + 0.4 * blob).min(1.0)
    });
    encode_pgm(&img)
}
