//! Signal kernels: PDM demodulation, FIR design and FFT convolution, chirp
//! generation, matched filtering, envelope detection and decimation.

mod chirp;
mod envelope;
mod fir;
mod matched;
mod pdm;
mod signal;

pub use chirp::{generate_chirp, ChirpParams};
pub use envelope::{envelope, EnvelopeConfig, EnvelopeDetector};
pub use fir::{
    decimate, decimate_with, design_lowpass, design_smoothing, fft_convolve, FftConvolver, FirKernel,
    DECIMATION_TAPS,
};
pub use matched::{matched_filter, MatchedFilter};
pub use pdm::{pack_pdm, pdm_demodulate, unpack_pdm, DemodConfig, PdmBitMatrix, PdmDecimator};
pub use signal::SignalMatrix;
