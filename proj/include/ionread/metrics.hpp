#pragma once
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ionread/classify.hpp"
#include "ionread/grid.hpp"

namespace ionread::metrics {

/// Readout error report: epsilon = (epsilon_B + epsilon_D) / 2 with binomial
/// standard errors, per ROI size and analysis method.
struct EpsilonReport {
  std::string method;
  int roi_size = 0;
  double epsilon = 0.0;
  double epsilon_b = 0.0;
  double epsilon_d = 0.0;
  double sigma = 0.0;
  double sigma_b = 0.0;
  double sigma_d = 0.0;
  std::uint64_t n_bright = 0;
  std::uint64_t n_dark = 0;
  std::uint64_t errors_bright = 0;
  std::uint64_t errors_dark = 0;
  std::uint64_t trials_total = 0;
  std::uint64_t trials_retained = 0;
  double retained_fraction = 1.0;
  double subtracted_prep_error = 0.0;
};

EpsilonReport compute_epsilon(std::uint64_t n_bright, std::uint64_t errors_bright,
                              std::uint64_t n_dark, std::uint64_t errors_dark,
                              double subtract_prep_error = 0.0);

/// CSV with columns
/// method,N,epsilon,epsilon_B,epsilon_D,sigma,n_trials,retained_fraction.
void write_epsilon_csv(const std::string& path, std::span<const EpsilonReport> reports);

/// Dual-threshold post-selection rule: an ion is retained bright when its
/// "pre" and "post" sums are both >= theta_upper, retained dark when both
/// are < theta_lower; a trial is kept only if every ion is retained.
struct PostSelectRule {
  std::vector<std::vector<std::uint32_t>> roi_pixels;  // rectangular, per ion
  std::vector<long> theta_lower;
  std::vector<long> theta_upper;
};

struct PostSelection {
  bool retained = false;
  regsim::RegisterState inferred;
};

/// Per-ion summed counts of one measurement (a pair of exposures) over the
/// rule's rectangular ROIs.
std::vector<std::uint64_t> measurement_sums(const emccd::Frame& a,
                                            const emccd::Frame& b,
                                            const PostSelectRule& rule);

PostSelection postselect_from_sums(std::span<const std::uint64_t> pre,
                                   std::span<const std::uint64_t> post,
                                   const PostSelectRule& rule);

/// Qunybble frame layout: frames[1]+frames[2] form "pre", frames[4]+frames[5]
/// form "post".
PostSelection postselect_trial(std::span<const emccd::Frame> frames,
                               const PostSelectRule& rule);

/// Pixel list of a w x h pixel rectangle centred on a point (clipped to the
/// grid).
std::vector<std::uint32_t> rect_roi_pixels(const PixelGrid& grid, Vec2 center_um,
                                           int w_px, int h_px);

/// Evaluate one classifier over a labeled dataset for each ROI size.
std::vector<EpsilonReport> sweep_roi(
    const std::vector<const emccd::Frame*>& frames,
    const std::vector<const regsim::RegisterState*>& truths,
    const std::function<classify::Verdict(const emccd::Frame&, int)>& classifier,
    const std::vector<int>& roi_sizes, const std::string& method);

}  // namespace ionread::metrics
