use irs_amp::cli::median;
use irs_amp::model::SystemConfig;
use irs_amp::pipeline::{run_pipeline, PipelineOptions};
use rayon::prelude::*;

/// Received SNR is about `2 * snr_db - 244` dB with the default path loss, so
/// the grid spans roughly 15 to 55 dB at the receiver.
const SNR_GRID_DB: [f64; 3] = [130.0, 140.0, 150.0];

#[test]
fn median_nmse_improves_with_snr() {
    let opts = PipelineOptions::default();
    let medians: Vec<f64> = SNR_GRID_DB
        .iter()
        .map(|&snr| {
            let cfg = SystemConfig::default().with_snr_db(snr);
            let nmse: Vec<f64> = (0..20u64)
                .into_par_iter()
                .map(|seed| run_pipeline(&cfg, seed, &opts).unwrap().metrics.nmse_g_db)
                .collect();
            median(nmse).unwrap()
        })
        .collect();
    assert!(
        medians.windows(2).all(|w| w[1] < w[0]),
        "median NMSE(G) per SNR: {medians:?}"
    );
}
