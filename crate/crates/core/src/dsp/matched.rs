use super::fir::{convolve_strided, FftConvolver};
use super::SignalMatrix;
use crate::error::{Error, Result};

/// Cross-correlation against a fixed reference, aligned so that a copy of
/// the reference starting at sample n peaks at sample n.
#[derive(Debug)]
pub struct MatchedFilter {
    conv: FftConvolver,
    lag: usize,
}

impl MatchedFilter {
    pub fn new(reference: &[f64], signal_len: usize) -> Result<Self> {
        let reversed: Vec<f64> = reference.iter().rev().copied().collect();
        Ok(Self {
            conv: FftConvolver::new(&reversed, signal_len)?,
            lag: reference.len() - 1,
        })
    }

    pub fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        self.conv.apply(x, self.lag, 1, out);
    }
}

pub fn matched_filter(signals: &SignalMatrix, reference: &[f64]) -> Result<SignalMatrix> {
    if reference.is_empty() {
        return Err(Error::arg("empty matched-filter reference"));
    }
    let reversed: Vec<f64> = reference.iter().rev().copied().collect();
    convolve_strided(
        signals,
        &reversed,
        reference.len() - 1,
        1,
        signals.len(),
        signals.sample_rate(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::chirp::ChirpParams;

    fn argmax(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    fn local_peaks(x: &[f64], count: usize, guard: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
        let mut picked: Vec<usize> = Vec::new();
        for i in idx {
            if picked.iter().all(|&p| p.abs_diff(i) > guard) {
                picked.push(i);
            }
            if picked.len() == count {
                break;
            }
        }
        picked.sort();
        picked
    }

    fn chirp() -> Vec<f64> {
        ChirpParams::default().at_rate(225e3).samples()
    }

    #[test]
    fn autocorrelation_peaks_at_zero() {
        let r = chirp();
        let s = SignalMatrix::single(r.clone(), 225e3).unwrap();
        let y = matched_filter(&s, &r).unwrap();
        assert_eq!(argmax(y.channel(0)), 0);
        let energy: f64 = r.iter().map(|v| v * v).sum();
        assert!((y.channel(0)[0] - energy).abs() < 1e-9 * energy);
    }

    #[test]
    fn resolves_two_echoes() {
        let r = chirp();
        let mut x = vec![0.0; 3000];
        for (k, v) in r.iter().enumerate() {
            x[500 + k] += v;
            x[900 + k] += 0.5 * v;
        }
        let y = matched_filter(&SignalMatrix::single(x, 225e3).unwrap(), &r).unwrap();
        let env: Vec<f64> = y.channel(0).iter().map(|v| v.abs()).collect();
        assert_eq!(local_peaks(&env, 2, 50), vec![500, 900]);
    }

    #[test]
    fn linear_in_amplitude() {
        let r = chirp();
        let x: Vec<f64> = (0..2000).map(|n| ((n * n) as f64 * 1e-4).sin()).collect();
        let y1 = matched_filter(&SignalMatrix::single(x.clone(), 1.0).unwrap(), &r).unwrap();
        let y3 = matched_filter(&SignalMatrix::single(x.iter().map(|v| 3.0 * v).collect(), 1.0).unwrap(), &r).unwrap();
        for (a, b) in y1.channel(0).iter().zip(y3.channel(0)) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn struct_matches_free_function() {
        let r = chirp();
        let x: Vec<f64> = (0..4000).map(|n| (n as f64 * 0.77).cos()).collect();
        let reference = matched_filter(&SignalMatrix::single(x.clone(), 1.0).unwrap(), &r).unwrap();
        let mut mf = MatchedFilter::new(&r, x.len()).unwrap();
        let mut out = vec![0.0; x.len()];
        mf.apply(&x, &mut out);
        assert_eq!(out, reference.channel(0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn peak_is_shift_equivariant(start in 0usize..1500, k in 0usize..800) {
                let r = chirp();
                let make = |at: usize| {
                    let mut x = vec![0.0; 3200];
                    x[at..at + r.len()].copy_from_slice(&r);
                    let y = matched_filter(&SignalMatrix::single(x, 225e3).unwrap(), &r).unwrap();
                    argmax(y.channel(0))
                };
                prop_assert_eq!(make(start + k), make(start) + k);
            }
        }
    }
}
