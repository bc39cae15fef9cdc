#pragma once

// Discrete Fourier transform of real segments and the amplitude/phase targets derived from it.

#include <complex>

#include <Eigen/Core>

namespace qfm::spectral {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Bins below this amplitude carry no meaningful phase; their phase is zeroed and excluded from phase losses.
inline constexpr double kPhaseMaskEpsilon = 1e-8;

/// One-sided spectrum: row c holds bins k = 0..N/2 of channel c.
template <typename Scalar>
struct SpectralTarget {
  RowMatrix<Scalar> amplitude;
  RowMatrix<Scalar> phase;
  /// Length of the time-domain signal the spectrum came from.
  Eigen::Index signal_length = 0;

  Eigen::Index channels() const { return amplitude.rows(); }
  Eigen::Index bins() const { return amplitude.cols(); }
  /// 1 where the phase is defined (amplitude >= epsilon), 0 otherwise.
  RowMatrix<Scalar> phase_mask(double epsilon = kPhaseMaskEpsilon) const;
};

inline Eigen::Index one_sided_bins(Eigen::Index n) { return n / 2 + 1; }

/// X[k] = sum_n x(n) exp(-j 2 pi k n / N) for k = 0..N/2, computed with a real-input FFT.
/// Throws ContractError on empty or non-finite input.
template <typename Scalar>
ComplexVector<Scalar> dft(const Eigen::Ref<const Vector<Scalar>>& samples);

/// Amplitude |X[k]| and quadrant-aware phase atan2(Im, Re); phase is zeroed where amplitude < epsilon.
template <typename Scalar>
SpectralTarget<Scalar> amp_phase(const ComplexVector<Scalar>& spectrum, Eigen::Index signal_length,
                                 double epsilon = kPhaseMaskEpsilon);

/// Per-channel targets of a C x N segment (rows are channels).
template <typename Scalar>
SpectralTarget<Scalar> spectral_target(const Eigen::Ref<const RowMatrix<Scalar>>& channels,
                                       double epsilon = kPhaseMaskEpsilon);

/// Rebuilds the time-domain channels from (amplitude, phase). Output is channels x signal_length.
template <typename Scalar>
RowMatrix<Scalar> inverse_check(const SpectralTarget<Scalar>& target);

/// Inverse of `dft` for a one-sided spectrum.
template <typename Scalar>
Vector<Scalar> inverse_dft(const ComplexVector<Scalar>& spectrum, Eigen::Index signal_length);

/// Periodogram |X[k]|^2 of the one-sided spectrum.
template <typename Scalar>
Vector<Scalar> power_spectrum(const Eigen::Ref<const Vector<Scalar>>& samples);

}  // namespace qfm::spectral
