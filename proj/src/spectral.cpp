#include "qfm/spectral.hpp"

#include <cmath>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "qfm/errors.hpp"

namespace qfm::spectral {

template <typename Scalar>
RowMatrix<Scalar> SpectralTarget<Scalar>::phase_mask(double epsilon) const {
  return (amplitude.array() >= static_cast<Scalar>(epsilon)).template cast<Scalar>();
}

template <typename Scalar>
ComplexVector<Scalar> dft(const Eigen::Ref<const Vector<Scalar>>& samples) {
  if (samples.size() == 0) throw ContractError("dft of an empty signal");
  if (!samples.allFinite()) throw ContractError("dft input contains non-finite values");
  // kissfft does not handle a single point
  if (samples.size() == 1) return ComplexVector<Scalar>::Constant(1, samples(0));
  thread_local Eigen::FFT<Scalar> fft;
  fft.SetFlag(Eigen::FFT<Scalar>::HalfSpectrum);
  std::vector<Scalar> in(samples.data(), samples.data() + samples.size());
  std::vector<std::complex<Scalar>> out;
  fft.fwd(out, in);
  out.resize(static_cast<std::size_t>(one_sided_bins(samples.size())));
  return Eigen::Map<ComplexVector<Scalar>>(out.data(), static_cast<Eigen::Index>(out.size()));
}

template <typename Scalar>
SpectralTarget<Scalar> amp_phase(const ComplexVector<Scalar>& spectrum, Eigen::Index signal_length, double epsilon) {
  SpectralTarget<Scalar> t;
  t.signal_length = signal_length;
  t.amplitude.resize(1, spectrum.size());
  t.phase.resize(1, spectrum.size());
  for (Eigen::Index k = 0; k < spectrum.size(); ++k) {
    const auto re = spectrum[k].real();
    const auto im = spectrum[k].imag();
    const Scalar a = std::sqrt(re * re + im * im);
    t.amplitude(0, k) = a;
    t.phase(0, k) = a < static_cast<Scalar>(epsilon) ? Scalar(0) : std::atan2(im, re);
  }
  return t;
}

template <typename Scalar>
SpectralTarget<Scalar> spectral_target(const Eigen::Ref<const RowMatrix<Scalar>>& channels, double epsilon) {
  const auto n = channels.cols();
  SpectralTarget<Scalar> t;
  t.signal_length = n;
  t.amplitude.resize(channels.rows(), one_sided_bins(n));
  t.phase.resize(channels.rows(), one_sided_bins(n));
  for (Eigen::Index c = 0; c < channels.rows(); ++c) {
    const Vector<Scalar> row = channels.row(c).transpose();
    const auto one = amp_phase<Scalar>(dft<Scalar>(row), n, epsilon);
    t.amplitude.row(c) = one.amplitude.row(0);
    t.phase.row(c) = one.phase.row(0);
  }
  return t;
}

template <typename Scalar>
Vector<Scalar> inverse_dft(const ComplexVector<Scalar>& spectrum, Eigen::Index signal_length) {
  if (spectrum.size() != one_sided_bins(signal_length))
    throw ContractError("spectrum has " + std::to_string(spectrum.size()) + " bins, expected " +
                        std::to_string(one_sided_bins(signal_length)));
  if (signal_length == 1) return Vector<Scalar>::Constant(1, spectrum(0).real());
  thread_local Eigen::FFT<Scalar> fft;
  fft.SetFlag(Eigen::FFT<Scalar>::HalfSpectrum);
  std::vector<std::complex<Scalar>> in(spectrum.data(), spectrum.data() + spectrum.size());
  std::vector<Scalar> out;
  fft.inv(out, in, static_cast<typename Eigen::FFT<Scalar>::Index>(signal_length));
  return Eigen::Map<Vector<Scalar>>(out.data(), signal_length);
}

template <typename Scalar>
RowMatrix<Scalar> inverse_check(const SpectralTarget<Scalar>& target) {
  const auto n = target.signal_length;
  RowMatrix<Scalar> out(target.channels(), n);
  for (Eigen::Index c = 0; c < target.channels(); ++c) {
    ComplexVector<Scalar> spec(target.bins());
    for (Eigen::Index k = 0; k < target.bins(); ++k)
      spec[k] = std::polar(target.amplitude(c, k), target.phase(c, k));
    out.row(c) = inverse_dft<Scalar>(spec, n).transpose();
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> power_spectrum(const Eigen::Ref<const Vector<Scalar>>& samples) {
  return dft<Scalar>(samples).cwiseAbs2();
}

#define QFM_INSTANTIATE(S)                                                                                    \
  template struct SpectralTarget<S>;                                                                          \
  template ComplexVector<S> dft<S>(const Eigen::Ref<const Vector<S>>&);                                       \
  template SpectralTarget<S> amp_phase<S>(const ComplexVector<S>&, Eigen::Index, double);                     \
  template SpectralTarget<S> spectral_target<S>(const Eigen::Ref<const RowMatrix<S>>&, double);               \
  template RowMatrix<S> inverse_check<S>(const SpectralTarget<S>&);                                           \
  template Vector<S> inverse_dft<S>(const ComplexVector<S>&, Eigen::Index);                                   \
  template Vector<S> power_spectrum<S>(const Eigen::Ref<const Vector<S>>&);

QFM_INSTANTIATE(float)
QFM_INSTANTIATE(double)
#undef QFM_INSTANTIATE

}  // namespace qfm::spectral
