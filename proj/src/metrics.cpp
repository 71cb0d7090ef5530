#include "ionread/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ionread::metrics {

EpsilonReport compute_epsilon(std::uint64_t n_bright, std::uint64_t errors_bright,
                              std::uint64_t n_dark, std::uint64_t errors_dark,
                              double subtract_prep_error) {
  if (n_bright == 0 && n_dark == 0)
    throw std::invalid_argument("compute_epsilon: no trials");
  if (errors_bright > n_bright || errors_dark > n_dark)
    throw std::invalid_argument("compute_epsilon: more errors than trials");
  EpsilonReport r;
  r.n_bright = n_bright;
  r.n_dark = n_dark;
  r.errors_bright = errors_bright;
  r.errors_dark = errors_dark;
  r.epsilon_b = n_bright ? static_cast<double>(errors_bright) / n_bright : 0.0;
  r.epsilon_d = n_dark ? static_cast<double>(errors_dark) / n_dark : 0.0;
  r.sigma_b = n_bright ? std::sqrt(r.epsilon_b * (1.0 - r.epsilon_b) / n_bright) : 0.0;
  r.sigma_d = n_dark ? std::sqrt(r.epsilon_d * (1.0 - r.epsilon_d) / n_dark) : 0.0;
  r.epsilon = 0.5 * (r.epsilon_b + r.epsilon_d) - subtract_prep_error;
  r.sigma = 0.5 * std::sqrt(r.sigma_b * r.sigma_b + r.sigma_d * r.sigma_d);
  r.subtracted_prep_error = subtract_prep_error;
  return r;
}

void write_epsilon_csv(const std::string& path, std::span<const EpsilonReport> reports) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("epsilon csv: cannot open " + path);
  out << "method,N,epsilon,epsilon_B,epsilon_D,sigma,n_trials,retained_fraction\n";
  out.precision(10);
  for (const auto& r : reports) {
    out << r.method << ',' << r.roi_size << ',' << r.epsilon << ',' << r.epsilon_b
        << ',' << r.epsilon_d << ',' << r.sigma << ',' << (r.n_bright + r.n_dark)
        << ',' << r.retained_fraction << '\n';
  }
  if (!out) throw std::runtime_error("epsilon csv: write failed for " + path);
}

std::vector<std::uint64_t> measurement_sums(const emccd::Frame& a,
                                            const emccd::Frame& b,
                                            const PostSelectRule& rule) {
  std::vector<std::uint64_t> sums(rule.roi_pixels.size(), 0);
  for (std::size_t k = 0; k < rule.roi_pixels.size(); ++k) {
    for (auto px : rule.roi_pixels[k]) {
      sums[k] += a.counts[px];
      sums[k] += b.counts[px];
    }
  }
  return sums;
}

PostSelection postselect_from_sums(std::span<const std::uint64_t> pre,
                                   std::span<const std::uint64_t> post,
                                   const PostSelectRule& rule) {
  const std::size_t n = rule.roi_pixels.size();
  if (pre.size() != n || post.size() != n || rule.theta_lower.size() != n ||
      rule.theta_upper.size() != n)
    throw std::invalid_argument("postselect: rule shape mismatch");
  PostSelection sel;
  sel.retained = true;
  sel.inferred.bits.assign(n, regsim::IonState::bright);
  for (std::size_t k = 0; k < n; ++k) {
    if (rule.theta_lower[k] > rule.theta_upper[k])
      throw std::invalid_argument("postselect: lower threshold above upper");
    const auto up = static_cast<std::uint64_t>(rule.theta_upper[k]);
    const auto lo = static_cast<std::uint64_t>(rule.theta_lower[k]);
    if (pre[k] >= up && post[k] >= up) {
      sel.inferred.bits[k] = regsim::IonState::bright;
    } else if (pre[k] < lo && post[k] < lo) {
      sel.inferred.bits[k] = regsim::IonState::dark;
    } else {
      sel.retained = false;
    }
  }
  return sel;
}

PostSelection postselect_trial(std::span<const emccd::Frame> frames,
                               const PostSelectRule& rule) {
  if (frames.size() != 6)
    throw std::invalid_argument("postselect: qunybble trials have 6 frames");
  const auto pre = measurement_sums(frames[1], frames[2], rule);
  const auto post = measurement_sums(frames[4], frames[5], rule);
  return postselect_from_sums(pre, post, rule);
}

std::vector<std::uint32_t> rect_roi_pixels(const PixelGrid& grid, Vec2 center_um,
                                           int w_px, int h_px) {
  grid.validate();
  if (w_px < 1 || h_px < 1)
    throw std::invalid_argument("rect roi: need positive dimensions");
  const int cx = static_cast<int>(center_um.x / grid.pitch_um);
  const int cy = static_cast<int>(center_um.y / grid.pitch_um);
  const int x0 = std::max(0, cx - w_px / 2);
  const int x1 = std::min(grid.width, x0 + w_px);
  const int y0 = std::max(0, cy - h_px / 2);
  const int y1 = std::min(grid.height, y0 + h_px);
  std::vector<std::uint32_t> pixels;
  pixels.reserve(static_cast<std::size_t>((x1 - x0) * (y1 - y0)));
  for (int iy = y0; iy < y1; ++iy)
    for (int ix = x0; ix < x1; ++ix)
      pixels.push_back(static_cast<std::uint32_t>(grid.index(ix, iy)));
  return pixels;
}

std::vector<EpsilonReport> sweep_roi(
    const std::vector<const emccd::Frame*>& frames,
    const std::vector<const regsim::RegisterState*>& truths,
    const std::function<classify::Verdict(const emccd::Frame&, int)>& classifier,
    const std::vector<int>& roi_sizes, const std::string& method) {
  if (frames.size() != truths.size())
    throw std::invalid_argument("sweep_roi: frame/truth count mismatch");
  std::vector<EpsilonReport> reports;
  reports.reserve(roi_sizes.size());
  for (int n : roi_sizes) {
    std::uint64_t nb = 0, nd = 0, eb = 0, ed = 0;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const auto verdict = classifier(*frames[t], n);
      const auto& truth = *truths[t];
      for (int k = 0; k < truth.n_ions(); ++k) {
        if (truth.dark(k)) {
          ++nd;
          if (!verdict.estimate.dark(k)) ++ed;
        } else {
          ++nb;
          if (verdict.estimate.dark(k)) ++eb;
        }
      }
    }
    auto report = compute_epsilon(nb, eb, nd, ed);
    report.method = method;
    report.roi_size = n;
    report.trials_total = frames.size();
    report.trials_retained = frames.size();
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace ionread::metrics
