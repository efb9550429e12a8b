//! Synthetic fundus-like data, parametric domain shift, and single-pass
//! batch streams.

pub mod retina;
pub mod shift;
pub mod stream;

pub use retina::{
    generate_retinatoy, grade_for_lesion_count, render_with_counts, Domain, Lesion, LesionKind, RetinaToySample,
    DEFAULT_GRADE_DISTRIBUTION, IMAGE_SIZE, NUM_GRADES,
};
pub use shift::{apply_shift, ShiftParams};
pub use stream::{make_stream, Batch, Stream};
