#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nafons/fit.hpp"
#include "nafons/peaks.hpp"
#include "nafons/refine.hpp"
#include "nafons/spectrum.hpp"
#include "nafons/spin_system.hpp"

namespace nafons {

// All artifact files are UTF-8 text, whitespace separated, with '#' comments.

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- spin-system files -----------------------------------------------------
// Sections: [spins] (label species), [shifts_hz] (label value),
// [dipolar_hz] / [scalar_hz] (label label value). Unlisted couplings are 0.

struct SpinSystemFile {
  SpinSystem sys;
  HamiltonianParams params;
};

SpinSystemFile read_spinsys(const std::filesystem::path& path);
SpinSystemFile read_spinsys_stream(std::istream& in, const std::string& origin);
void write_spinsys(const std::filesystem::path& path, const SpinSystem& sys,
                   const HamiltonianParams& params, const std::string& header_comment = {});

// ---- spectra and peak lists -------------------------------------------------

// Two columns: freq_hz intensity.
SampledSpectrum read_spectrum(const std::filesystem::path& path);
void write_spectrum(const std::filesystem::path& path, const SampledSpectrum& spec,
                    const std::string& header_comment = {});

// Three columns: freq_hz integral coherence_order.
std::vector<Transition> read_stick(const std::filesystem::path& path);
void write_stick(const std::filesystem::path& path, std::span<const Transition> transitions,
                 const std::string& header_comment = {});

// Two columns: freq_hz integral.
PeakList read_peaks(const std::filesystem::path& path);
void write_peaks(const std::filesystem::path& path, const PeakList& peaks,
                 const std::string& header_comment = {});

// ---- fit problem configs ----------------------------------------------------
// Spin-system sections plus [free], [bounds], [targets]; see README for the
// grammar. Relative peak paths resolve against the config directory.

FitProblem read_problem(const std::filesystem::path& path);

// ---- reports ----------------------------------------------------------------

void write_fit_report(const std::filesystem::path& path, const FitProblem& prob,
                      const FitResult& result);
void append_refine_report(const std::filesystem::path& path, const SpinSystem& sys,
                          const HamiltonianParams& before, const RefineResult& result);
void append_errors_report(const std::filesystem::path& path, const FitProblem& prob,
                          const ErrorEstimate& est, const Eigen::VectorXd& x_star);

// ---- run manifests ----------------------------------------------------------

std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a_bytes(const void* data, std::size_t n);

struct RunManifest {
  std::string command_line;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;
  std::vector<std::pair<std::string, std::uint64_t>> inputs;   // path, digest
  std::vector<std::pair<std::string, std::uint64_t>> outputs;
};

// Written next to the report as <report>.manifest.
void write_manifest(const std::filesystem::path& report_path, const RunManifest& manifest);

}  // namespace nafons
