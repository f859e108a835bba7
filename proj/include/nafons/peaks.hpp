#pragma once

#include <cstddef>
#include <vector>

#include "nafons/spectrum.hpp"

namespace nafons {

// Sorted experimental frequencies with matching integrals: the fit target.
struct PeakList {
  std::vector<double> freqs_hz;        // ascending
  std::vector<double> integrals;       // >= 0, same length
  std::vector<double> noise_sigma_hz;  // optional per-peak uncertainty (empty or same length)
  bool short_count = false;            // fewer peaks found than requested

  std::size_t size() const { return freqs_hz.size(); }
  void validate() const;
};

// Local maxima above min_prominence * global max, apex refined by 3-point
// parabolic interpolation of log intensity, integral by trapezoidal sum over
// a window truncated at inter-peak valleys. Keeps the n largest integrals,
// sorted ascending. window_pts <= 0 selects the automatic rule
// (8 * HWHM / spacing, capped at half the distance to the neighbours).
PeakList pick_peaks(const SampledSpectrum& spec, std::size_t n, double min_prominence = 0.02,
                    int window_pts = 0);

}  // namespace nafons
