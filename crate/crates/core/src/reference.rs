//! Published clinical reference values. These come from a private cohort
//! and are shown next to desk runs for orientation only; nothing here is
//! reproduced by this crate.

/// Lesion-level ROC-AUC, SE, SP, PPV, NPV, ACC followed by patient-level
/// SE, SP, PPV, NPV, ACC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub lesion: [f64; 6],
    pub patient: [f64; 5],
}

const fn row(name: &'static str, lesion: [f64; 6], patient: [f64; 5]) -> ReferenceRow {
    ReferenceRow { name, lesion, patient }
}

/// Readers and comparison networks against the full model.
pub const READER_COMPARISON: [ReferenceRow; 9] = [
    row("ref:expert-1", [0.64, 0.41, 0.91, 0.63, 0.89, 0.84], [0.47, 0.86, 0.75, 0.64, 0.68]),
    row("ref:expert-2", [0.74, 0.54, 0.86, 0.82, 0.91, 0.80], [0.63, 0.38, 0.48, 0.53, 0.50]),
    row("ref:expert-3", [0.73, 0.54, 0.94, 0.96, 0.90, 0.89], [0.63, 0.90, 0.86, 0.73, 0.78]),
    row("ref:expert-4", [0.60, 0.23, 0.92, 0.75, 0.85, 0.80], [0.26, 0.67, 0.40, 0.48, 0.48]),
    row("ref:expert-mean", [0.68, 0.43, 0.91, 0.79, 0.89, 0.83], [0.50, 0.70, 0.62, 0.60, 0.61]),
    row("ref:3d-unet", [0.71, 0.52, 0.72, 0.41, 0.90, 0.72], [0.58, 0.71, 0.65, 0.65, 0.65]),
    row("ref:unetr", [0.56, 0.39, 0.62, 0.27, 0.80, 0.58], [0.50, 0.55, 0.52, 0.52, 0.53]),
    row("ref:swin-unetr", [0.69, 0.69, 0.62, 0.40, 0.91, 0.61], [0.74, 0.43, 0.54, 0.64, 0.58]),
    row("ref:full-model", [0.82, 0.66, 0.90, 0.74, 0.93, 0.85], [0.74, 0.67, 0.67, 0.74, 0.70]),
];

/// Ablation presets in table order.
pub const ABLATION: [ReferenceRow; 4] = [
    row("ref:baseline", [0.76, 0.67, 0.60, 0.48, 0.90, 0.61], [0.73, 0.23, 0.46, 0.50, 0.47]),
    row("ref:+cls", [0.70, 0.70, 0.78, 0.62, 0.93, 0.77], [0.79, 0.43, 0.56, 0.69, 0.60]),
    row("ref:+ent", [0.76, 0.62, 0.77, 0.63, 0.89, 0.76], [0.74, 0.57, 0.61, 0.71, 0.65]),
    row("ref:+cls+ent", [0.82, 0.66, 0.90, 0.74, 0.93, 0.85], [0.74, 0.67, 0.67, 0.74, 0.70]),
];
