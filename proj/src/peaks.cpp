#include "nafons/peaks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nafons {

void PeakList::validate() const {
  if (freqs_hz.size() != integrals.size())
    throw std::invalid_argument("peak frequency and integral lengths differ");
  if (!noise_sigma_hz.empty() && noise_sigma_hz.size() != freqs_hz.size())
    throw std::invalid_argument("noise sigma length mismatch");
  for (std::size_t i = 1; i < freqs_hz.size(); ++i)
    if (!(freqs_hz[i] >= freqs_hz[i - 1]))
      throw std::invalid_argument("peak frequencies must be ascending");
  for (double v : integrals)
    if (!(v >= 0.0)) throw std::invalid_argument("peak integrals must be non-negative");
}

namespace {

struct RawPeak {
  int idx;            // sample index of the local maximum
  double freq_hz;     // refined apex
  double integral;
};

// Parabola through (log L, log C, log R); exact for the apex of a sampled
// Lorentzian to second order.
double refine_apex(const SampledSpectrum& s, int i) {
  const double c = s.intensity[i];
  const double l = s.intensity[i - 1];
  const double r = s.intensity[i + 1];
  if (!(l > 0.0) || !(r > 0.0) || !(c > 0.0)) return s.freq_hz[i];
  const double ll = std::log(l), lc = std::log(c), lr = std::log(r);
  const double denom = ll + lr - 2.0 * lc;
  if (denom >= 0.0) return s.freq_hz[i];  // not a curved maximum
  const double t = (ll - lr) / (2.0 * denom);
  return s.freq_hz[i] + t * s.spacing();
}

// Half width at half maximum in samples, from the nearest half-height
// crossings on each side.
double hwhm_points(const SampledSpectrum& s, int i) {
  const double half = 0.5 * s.intensity[i];
  int l = i;
  while (l > 0 && s.intensity[l] > half) --l;
  int r = i;
  const int last = static_cast<int>(s.intensity.size()) - 1;
  while (r < last && s.intensity[r] > half) ++r;
  return 0.5 * (static_cast<double>(i - l) + static_cast<double>(r - i));
}

}  // namespace

PeakList pick_peaks(const SampledSpectrum& spec, std::size_t n, double min_prominence,
                    int window_pts) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("peak count must be >= 1");
  if (!(min_prominence > 0.0) || !(min_prominence < 1.0))
    throw std::invalid_argument("min_prominence must lie in (0, 1)");

  const int npts = static_cast<int>(spec.intensity.size());
  const double gmax = spec.intensity.maxCoeff();
  if (!(gmax > 0.0)) throw std::invalid_argument("spectrum has no positive intensity");
  const double floor = min_prominence * gmax;

  // Local maxima: strictly above the left neighbour, at least the right one,
  // so flat-topped digitized peaks register once.
  std::vector<int> maxima;
  for (int i = 1; i + 1 < npts; ++i)
    if (spec.intensity[i] >= floor && spec.intensity[i] > spec.intensity[i - 1] &&
        spec.intensity[i] >= spec.intensity[i + 1])
      maxima.push_back(i);

  std::vector<RawPeak> peaks;
  for (std::size_t m = 0; m < maxima.size(); ++m) {
    const int i = maxima[m];
    RawPeak p;
    p.idx = i;
    p.freq_hz = refine_apex(spec, i);

    int half_window = window_pts > 0 ? window_pts
                                     : static_cast<int>(std::ceil(8.0 * hwhm_points(spec, i)));
    half_window = std::max(half_window, 1);

    int lo = std::max(0, i - half_window);
    int hi = std::min(npts - 1, i + half_window);
    // Truncate at the valley towards each neighbouring detected peak, never
    // reaching past the midpoint between the two apexes.
    if (m > 0) {
      const int left_peak = maxima[m - 1];
      int valley = left_peak;
      for (int k = left_peak; k <= i; ++k)
        if (spec.intensity[k] < spec.intensity[valley]) valley = k;
      lo = std::max(lo, valley);
    }
    if (m + 1 < maxima.size()) {
      const int right_peak = maxima[m + 1];
      int valley = i;
      for (int k = i; k <= right_peak; ++k)
        if (spec.intensity[k] < spec.intensity[valley]) valley = k;
      hi = std::min(hi, valley);
    }

    double integral = 0.0;
    for (int k = lo; k < hi; ++k)
      integral += 0.5 * (spec.intensity[k] + spec.intensity[k + 1]) * spec.spacing();
    p.integral = integral;
    peaks.push_back(p);
  }

  // Keep the n largest integrals; ties toward lower frequency.
  std::sort(peaks.begin(), peaks.end(), [](const RawPeak& a, const RawPeak& b) {
    if (a.integral != b.integral) return a.integral > b.integral;
    return a.freq_hz < b.freq_hz;
  });
  PeakList out;
  out.short_count = peaks.size() < n;
  if (!out.short_count) peaks.resize(n);
  std::sort(peaks.begin(), peaks.end(),
            [](const RawPeak& a, const RawPeak& b) { return a.freq_hz < b.freq_hz; });
  for (const RawPeak& p : peaks) {
    out.freqs_hz.push_back(p.freq_hz);
    out.integrals.push_back(p.integral);
  }
  out.validate();
  return out;
}

}  // namespace nafons
