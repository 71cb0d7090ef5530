#include "ionread/classify.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ionread::classify {

using regsim::IonState;
using regsim::RegisterState;

double Verdict::estimated_error() const {
  double e = 0.0;
  for (double r : llr) e += std::exp(-r);
  return e;
}

ThresholdChoice optimize_threshold(const std::vector<std::uint64_t>& bright_hist,
                                   const std::vector<std::uint64_t>& dark_hist) {
  std::uint64_t n_bright = 0, n_dark = 0;
  for (auto c : bright_hist) n_bright += c;
  for (auto c : dark_hist) n_dark += c;
  if (n_bright == 0 || n_dark == 0)
    throw std::invalid_argument("optimize_threshold: empty histogram");

  const std::size_t top = std::max(bright_hist.size(), dark_hist.size());
  // error(theta) = (P_bright(sum < theta) + P_dark(sum >= theta)) / 2
  ThresholdChoice best{0, 1.0};
  std::uint64_t bright_below = 0;  // bright counts with sum < theta
  std::uint64_t dark_below = 0;
  for (std::size_t theta = 0; theta <= top; ++theta) {
    if (theta > 0) {
      const std::size_t s = theta - 1;
      if (s < bright_hist.size()) bright_below += bright_hist[s];
      if (s < dark_hist.size()) dark_below += dark_hist[s];
    }
    const double err =
        0.5 * (static_cast<double>(bright_below) / static_cast<double>(n_bright) +
               static_cast<double>(n_dark - dark_below) / static_cast<double>(n_dark));
    if (err < best.predicted_error) {
      best.predicted_error = err;
      best.threshold = static_cast<long>(theta);
    }
  }
  return best;
}

Verdict classify_threshold(const emccd::Frame& frame, const ThresholdRule& rule) {
  if (rule.roi_pixels.size() != rule.theta.size())
    throw std::invalid_argument("classify_threshold: rule shape mismatch");
  const int n_ions = static_cast<int>(rule.theta.size());
  Verdict v;
  v.estimate.bits.resize(static_cast<std::size_t>(n_ions));
  v.llr.assign(static_cast<std::size_t>(n_ions), 0.0);
  v.pixels_used.resize(static_cast<std::size_t>(n_ions));
  for (int k = 0; k < n_ions; ++k) {
    const auto& roi = rule.roi_pixels[static_cast<std::size_t>(k)];
    std::uint64_t sum = 0;
    for (auto px : roi) {
      if (px >= frame.counts.size())
        throw std::out_of_range("classify_threshold: ROI pixel outside frame");
      sum += frame.counts[px];
    }
    v.estimate.bits[static_cast<std::size_t>(k)] =
        sum >= static_cast<std::uint64_t>(rule.theta[static_cast<std::size_t>(k)])
            ? IonState::bright
            : IonState::dark;
    v.pixels_used[static_cast<std::size_t>(k)] = static_cast<int>(roi.size());
  }
  return v;
}

namespace {

void require_marginal(const calib::DistributionSet& dists, const char* who) {
  if (dists.scheme() != calib::NeighborScheme::none)
    throw std::invalid_argument(std::string(who) +
                                ": needs a neighbour-ignorant distribution set");
}

void require_rank(const calib::DistributionSet& dists, int roi_size, const char* who) {
  if (roi_size < 1 || roi_size > dists.max_rank())
    throw std::invalid_argument(std::string(who) + ": ROI size outside fitted range");
}

/// Accumulate the bright-vs-dark log-likelihood ratio along the brightness
/// order, stopping at r_stop. Shared by the full and adaptive classifiers so
/// their partial sums are bit-identical.
struct Walk {
  double llr = 0.0;
  int pixels = 0;
};

Walk walk_ion(const emccd::Frame& frame, const calib::DistributionSet& dists,
              int ion, int nu, int roi_size, double r_stop) {
  const auto& order = dists.order().of(ion);
  Walk w;
  for (int i = 0; i < roi_size; ++i) {
    const std::uint32_t n = frame.counts[order[static_cast<std::size_t>(i)]];
    const auto& b = dists.pmf(ion, i, nu, IonState::bright);
    const auto& d = dists.pmf(ion, i, nu, IonState::dark);
    w.llr += b.log_prob(n) - d.log_prob(n);
    w.pixels = i + 1;
    if (std::abs(w.llr) >= r_stop) break;
  }
  return w;
}

}  // namespace

Verdict classify_ml(const emccd::Frame& frame, const calib::DistributionSet& dists,
                    int roi_size) {
  require_marginal(dists, "classify_ml");
  return classify_adaptive(frame, dists, kNoStop, roi_size);
}

Verdict classify_adaptive(const emccd::Frame& frame,
                          const calib::DistributionSet& dists, double r_stop,
                          int max_roi) {
  require_marginal(dists, "classify_adaptive");
  require_rank(dists, max_roi, "classify_adaptive");
  if (!(r_stop > 0.0))
    throw std::invalid_argument("classify_adaptive: r_stop must be > 0");
  const int n_ions = dists.n_ions();
  Verdict v;
  v.estimate.bits.resize(static_cast<std::size_t>(n_ions));
  v.llr.resize(static_cast<std::size_t>(n_ions));
  v.pixels_used.resize(static_cast<std::size_t>(n_ions));
  for (int k = 0; k < n_ions; ++k) {
    const Walk w = walk_ion(frame, dists, k, 0, max_roi, r_stop);
    v.estimate.bits[static_cast<std::size_t>(k)] =
        w.llr > 0.0 ? IonState::bright : IonState::dark;
    v.llr[static_cast<std::size_t>(k)] = std::abs(w.llr);
    v.pixels_used[static_cast<std::size_t>(k)] = w.pixels;
  }
  return v;
}

double log_dark_mixture(std::span<const double> log_pb, std::span<const double> log_pd,
                        double sub_exposure_s, double lifetime_s) {
  const std::size_t m = log_pb.size();
  if (m == 0 || log_pd.size() != m)
    throw std::invalid_argument("log_dark_mixture: need matching per-exposure terms");
  if (!(lifetime_s > 0.0) || !(sub_exposure_s > 0.0) ||
      static_cast<double>(m) * sub_exposure_s >= lifetime_s)
    throw std::invalid_argument("log_dark_mixture: requires M * t_s < lifetime");

  const double log_p_decay = std::log(sub_exposure_s / lifetime_s);
  const double log_p_none =
      std::log1p(-static_cast<double>(m) * sub_exposure_s / lifetime_s);

  // terms[0]: no decay. terms[j']: decay during exposure j' (1-based), dark
  // for j < j', bright from j' on.
  std::vector<double> suffix_b(m + 1, 0.0);
  for (std::size_t j = m; j-- > 0;) suffix_b[j] = suffix_b[j + 1] + log_pb[j];

  std::vector<double> terms;
  terms.reserve(m + 1);
  double prefix_d = 0.0;
  for (std::size_t jp = 1; jp <= m; ++jp) {
    terms.push_back(log_p_decay + prefix_d + suffix_b[jp - 1]);
    prefix_d += log_pd[jp - 1];
  }
  terms.push_back(log_p_none + prefix_d);

  const double peak = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - peak);
  return peak + std::log(acc);
}

namespace {

struct ExposureSums {
  std::vector<double> sb;  // per exposure: sum_i ln B(n_i)
  std::vector<double> sd;
};

ExposureSums per_exposure_sums(
    std::span<const emccd::Frame> frames,
    const std::vector<const calib::DistributionSet*>& dists_per_exposure,
    int roi_size, const char* who) {
  if (frames.empty() || frames.size() != dists_per_exposure.size())
    throw std::invalid_argument(std::string(who) +
                                ": need one distribution set per exposure");
  ExposureSums sums;
  sums.sb.resize(frames.size());
  sums.sd.resize(frames.size());
  for (std::size_t j = 0; j < frames.size(); ++j) {
    const auto& dists = *dists_per_exposure[j];
    require_marginal(dists, who);
    require_rank(dists, roi_size, who);
    if (dists.n_ions() != 1)
      throw std::invalid_argument(std::string(who) + ": one-ion sequences only");
    const auto& order = dists.order().of(0);
    double sb = 0.0, sd = 0.0;
    for (int i = 0; i < roi_size; ++i) {
      const std::uint32_t n = frames[j].counts[order[static_cast<std::size_t>(i)]];
      sb += dists.pmf(0, i, 0, IonState::bright).log_prob(n);
      sd += dists.pmf(0, i, 0, IonState::dark).log_prob(n);
    }
    sums.sb[j] = sb;
    sums.sd[j] = sd;
  }
  return sums;
}

Verdict verdict_from_logs(double log_pb, double log_pd, int roi_size, int exposures) {
  Verdict v;
  v.estimate.bits = {log_pb > log_pd ? IonState::bright : IonState::dark};
  v.llr = {std::abs(log_pb - log_pd)};
  v.pixels_used = {roi_size};
  v.exposures_used = exposures;
  return v;
}

}  // namespace

Verdict classify_spatiotemporal(std::span<const emccd::Frame> frames,
                                const std::vector<const calib::DistributionSet*>& dists_per_exposure,
                                int roi_size, double sub_exposure_s,
                                double lifetime_s) {
  const ExposureSums sums = per_exposure_sums(frames, dists_per_exposure, roi_size,
                                              "classify_spatiotemporal");
  double log_pb = 0.0;
  for (double s : sums.sb) log_pb += s;
  const double log_pd = log_dark_mixture(sums.sb, sums.sd, sub_exposure_s, lifetime_s);
  return verdict_from_logs(log_pb, log_pd, roi_size, static_cast<int>(frames.size()));
}

Verdict classify_temporal_adaptive(std::span<const emccd::Frame> frames,
                                   const std::vector<const calib::DistributionSet*>& dists_per_exposure,
                                   int roi_size, double sub_exposure_s,
                                   double lifetime_s, double r_stop) {
  if (!(r_stop > 0.0))
    throw std::invalid_argument("classify_temporal_adaptive: r_stop must be > 0");
  const ExposureSums sums = per_exposure_sums(frames, dists_per_exposure, roi_size,
                                              "classify_temporal_adaptive");
  const std::size_t m_total = frames.size();
  double log_pb = 0.0;
  for (std::size_t m = 1; m <= m_total; ++m) {
    log_pb += sums.sb[m - 1];
    const double log_pd =
        log_dark_mixture(std::span<const double>(sums.sb.data(), m),
                         std::span<const double>(sums.sd.data(), m),
                         sub_exposure_s, lifetime_s);
    if (std::abs(log_pb - log_pd) >= r_stop || m == m_total)
      return verdict_from_logs(log_pb, log_pd, roi_size, static_cast<int>(m));
  }
  throw std::logic_error("classify_temporal_adaptive: unreachable");
}

double register_log_likelihood(const emccd::Frame& frame,
                               const calib::DistributionSet& dists, int roi_size,
                               const RegisterState& state) {
  require_rank(dists, roi_size, "register_log_likelihood");
  double total = 0.0;
  for (int k = 0; k < dists.n_ions(); ++k) {
    const int nu = dists.nu_index(k, state);
    const auto& order = dists.order().of(k);
    double s = 0.0;
    for (int i = 0; i < roi_size; ++i) {
      const std::uint32_t n = frame.counts[order[static_cast<std::size_t>(i)]];
      s += dists.pmf(k, i, nu, state.bits[static_cast<std::size_t>(k)]).log_prob(n);
    }
    total += s;
  }
  return total;
}

Verdict classify_iterative_neighbors(const emccd::Frame& frame,
                                     const calib::DistributionSet& dists,
                                     int roi_size, int max_iter) {
  if (dists.scheme() == calib::NeighborScheme::none)
    throw std::invalid_argument(
        "classify_iterative_neighbors: needs neighbour-conditioned distributions");
  require_rank(dists, roi_size, "classify_iterative_neighbors");
  const int n_ions = dists.n_ions();
  int max_arity = 0;
  for (int k = 0; k < n_ions; ++k)
    max_arity = std::max(max_arity, static_cast<int>(dists.neighbors(k).size()));
  if (max_iter <= 0) max_iter = std::max(16, (1 << max_arity) * n_ions);

  RegisterState estimate = RegisterState::all_bright(n_ions);
  std::vector<std::uint32_t> visited{estimate.bright_mask()};
  std::vector<double> llr(static_cast<std::size_t>(n_ions), 0.0);

  int iterations = 0;
  bool fixed_point = false;
  while (iterations < max_iter) {
    ++iterations;
    RegisterState next = estimate;
    for (int k = 0; k < n_ions; ++k) {
      const int nu = dists.nu_index(k, estimate);
      const Walk w = walk_ion(frame, dists, k, nu, roi_size, kNoStop);
      next.bits[static_cast<std::size_t>(k)] =
          w.llr > 0.0 ? IonState::bright : IonState::dark;
      llr[static_cast<std::size_t>(k)] = std::abs(w.llr);
    }
    if (next == estimate) {
      fixed_point = true;
      break;
    }
    const std::uint32_t mask = next.bright_mask();
    if (std::find(visited.begin(), visited.end(), mask) != visited.end()) {
      estimate = next;
      break;  // cycle
    }
    visited.push_back(mask);
    estimate = next;
  }

  if (!fixed_point) {
    // Pick the visited state maximizing the total register likelihood.
    double best = -std::numeric_limits<double>::infinity();
    std::uint32_t best_mask = visited.front();
    for (std::uint32_t mask : visited) {
      RegisterState s;
      s.bits.resize(static_cast<std::size_t>(n_ions));
      for (int k = 0; k < n_ions; ++k)
        s.bits[static_cast<std::size_t>(k)] =
            (mask & (1u << k)) ? IonState::bright : IonState::dark;
      const double ll = register_log_likelihood(frame, dists, roi_size, s);
      if (ll > best) {
        best = ll;
        best_mask = mask;
      }
    }
    for (int k = 0; k < n_ions; ++k)
      estimate.bits[static_cast<std::size_t>(k)] =
          (best_mask & (1u << k)) ? IonState::bright : IonState::dark;
    // Refresh the per-ion confidences in the winning state's context.
    for (int k = 0; k < n_ions; ++k) {
      const int nu = dists.nu_index(k, estimate);
      const Walk w = walk_ion(frame, dists, k, nu, roi_size, kNoStop);
      llr[static_cast<std::size_t>(k)] = std::abs(w.llr);
    }
  }

  Verdict v;
  v.estimate = estimate;
  v.llr = llr;
  v.pixels_used.assign(static_cast<std::size_t>(n_ions), roi_size);
  v.iterations = iterations;
  return v;
}

}  // namespace ionread::classify
