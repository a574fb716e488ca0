use ndarray::Axis;

use crate::error::{Error, Result};
use crate::recording::Recording;

/// Subtracts the instantaneous cross-channel mean from every channel.
pub fn common_average_reference(rec: &Recording) -> Result<Recording> {
    if rec.n_channels() < 2 {
        return Err(Error::invalid("common average reference needs at least 2 channels"));
    }
    let mut data = rec.samples().clone();
    for mut row in data.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / row.len() as f64;
        row.mapv_inplace(|v| v - mean);
    }
    rec.with_samples(data)
}
