#pragma once
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ionread/calibration.hpp"
#include "ionread/camera.hpp"
#include "ionread/register_sim.hpp"

namespace ionread::classify {

inline constexpr double kNoStop = std::numeric_limits<double>::infinity();

/// Classification outcome for one frame (or frame sequence). llr holds the
/// per-ion confidence R_k = |ln(p_B/p_D)|; the estimated probability that any
/// qubit was misread is sum_k exp(-R_k).
struct Verdict {
  regsim::RegisterState estimate;
  std::vector<double> llr;
  std::vector<int> pixels_used;
  int exposures_used = 0;
  int iterations = 0;

  double estimated_error() const;
};

struct ThresholdChoice {
  long threshold = 0;
  double predicted_error = 0.0;
};

/// Exhaustive scan for the integer threshold minimizing
/// (P_bright(sum < theta) + P_dark(sum >= theta)) / 2 over summed-count
/// histograms; ties resolve to the smallest theta.
ThresholdChoice optimize_threshold(const std::vector<std::uint64_t>& bright_hist,
                                   const std::vector<std::uint64_t>& dark_hist);

/// Per-ion pixel sets and integer thresholds; an ion reads bright when its
/// ROI sum reaches theta. Threshold verdicts carry no likelihood (R = 0).
struct ThresholdRule {
  std::vector<std::vector<std::uint32_t>> roi_pixels;
  std::vector<long> theta;
};

Verdict classify_threshold(const emccd::Frame& frame, const ThresholdRule& rule);

/// Spatial maximum likelihood over the ROI of the N brightest pixels:
/// bright iff sum_i [ln B_i(n_i) - ln D_i(n_i)] > 0 (ties read dark).
/// Requires a neighbour-ignorant distribution set.
Verdict classify_ml(const emccd::Frame& frame, const calib::DistributionSet& dists,
                    int roi_size);

/// Adaptive variant: consume pixels in brightness order and stop as soon as
/// the absolute log-likelihood ratio reaches r_stop (or max_roi pixels).
/// With r_stop = kNoStop this is exactly classify_ml at max_roi.
Verdict classify_adaptive(const emccd::Frame& frame,
                          const calib::DistributionSet& dists, double r_stop,
                          int max_roi);

/// Dark-state likelihood of an exposure sequence, allowing one dark->bright
/// decay: with per-exposure log-likelihoods sB_j, sD_j,
///   p_D = (1 - M ts/tau) prod_j pD_j + (ts/tau) sum_j' prod_{j<j'} pD_j prod_{j>=j'} pB_j,
/// evaluated in log space. Throws if M*ts >= tau.
double log_dark_mixture(std::span<const double> log_pb, std::span<const double> log_pd,
                        double sub_exposure_s, double lifetime_s);

/// Spatio-temporal maximum likelihood over M exposures. dists_per_exposure
/// may repeat one fitted set when the exposures are statistically identical.
Verdict classify_spatiotemporal(std::span<const emccd::Frame> frames,
                                const std::vector<const calib::DistributionSet*>& dists_per_exposure,
                                int roi_size, double sub_exposure_s,
                                double lifetime_s);

/// Temporally adaptive variant: consume exposures in order, evaluating the
/// decay-aware likelihoods over the first m exposures, and stop once the
/// confidence reaches r_stop. exposures_used records m.
Verdict classify_temporal_adaptive(std::span<const emccd::Frame> frames,
                                   const std::vector<const calib::DistributionSet*>& dists_per_exposure,
                                   int roi_size, double sub_exposure_s,
                                   double lifetime_s, double r_stop);

/// Iterative neighbour-conditioned maximum likelihood: start from the
/// all-bright register, re-estimate every ion against the PMFs conditioned on
/// the previous iteration's neighbour states (synchronous update), and stop
/// on a fixed point. On a cycle or iteration cap the visited state with the
/// highest total log-likelihood wins. max_iter <= 0 selects the default cap
/// max(16, 2^arity * n_ions).
Verdict classify_iterative_neighbors(const emccd::Frame& frame,
                                     const calib::DistributionSet& nu_dists,
                                     int roi_size, int max_iter = 0);

/// Total register log-likelihood sum_k ln p_{state_k}(counts | nu_k(state)).
double register_log_likelihood(const emccd::Frame& frame,
                               const calib::DistributionSet& dists, int roi_size,
                               const regsim::RegisterState& state);

}  // namespace ionread::classify
