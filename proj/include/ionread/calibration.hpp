#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "ionread/camera.hpp"
#include "ionread/grid.hpp"
#include "ionread/register_sim.hpp"

namespace ionread::calib {

/// Per-ion permutation of pixel indices in decreasing order of the mean
/// brightness attributable to that ion. Ties break by row-major pixel index
/// so the order is deterministic.
struct PixelOrder {
  std::vector<std::vector<std::uint32_t>> order;
  int n_ions() const { return static_cast<int>(order.size()); }
  const std::vector<std::uint32_t>& of(int ion) const {
    return order[static_cast<std::size_t>(ion)];
  }
};

/// Build the order from per-ion mean images (single-ion-bright calibration
/// frames, or a check-exposure mean split by attribute_mean_image). Throws
/// if an ion has no pixel above the background level.
PixelOrder brightness_order(const std::vector<std::vector<double>>& per_ion_mean,
                            const PixelGrid& grid, double background_mean);

/// Empirical probability mass function over counts with additive smoothing.
/// Lookups beyond the stored range return the configured floor so
/// log-likelihood ratios stay finite.
struct Pmf {
  std::vector<double> p;
  std::vector<double> log_p;
  double floor = 1e-9;
  double log_floor = 0.0;

  double prob(std::uint32_t n) const {
    return n < p.size() ? p[n] : floor;
  }
  double log_prob(std::uint32_t n) const {
    return n < log_p.size() ? log_p[n] : log_floor;
  }
  double mean() const {
    double m = 0.0;
    for (std::size_t n = 0; n < p.size(); ++n) m += static_cast<double>(n) * p[n];
    return m;
  }
};

enum class NeighborScheme { none, nearest, all_others };

std::string scheme_name(NeighborScheme scheme);
NeighborScheme scheme_from_name(const std::string& name);

/// Neighbour ion indices for one ion of an n-ion linear string under the
/// given conditioning scheme, ascending.
std::vector<int> neighbor_ions(int ion, int n_ions, NeighborScheme scheme);

struct FitOptions {
  int max_rank = 100;
  NeighborScheme scheme = NeighborScheme::none;
  double alpha = 0.5;
  int extend_bins = 5;   // smoothing range is [0, observed max + extend_bins]
  double floor = 1e-9;
  std::uint64_t min_samples = 100;
};

/// Count histograms per (ion, pixel rank, neighbour state, ion state),
/// accumulated over labeled frames. Accumulation is a reduction: partial
/// accumulators merge associatively, so frames may be binned in parallel.
class DistributionAccumulator {
 public:
  DistributionAccumulator(int n_ions, int max_rank, NeighborScheme scheme,
                          int count_cap = 512);

  void add(const emccd::Frame& frame, const regsim::RegisterState& label,
           const PixelOrder& order);
  void merge(const DistributionAccumulator& other);

  int n_ions() const { return n_ions_; }
  int max_rank() const { return max_rank_; }
  NeighborScheme scheme() const { return scheme_; }

 private:
  friend class DistributionSet;
  std::size_t cell_index(int ion, int rank, int nu, int state) const;

  int n_ions_;
  int max_rank_;
  NeighborScheme scheme_;
  int cap_;
  std::vector<std::vector<int>> neighbors_;
  std::vector<std::size_t> ion_offset_;  // into hist_, units of cap_
  std::vector<std::uint64_t> hist_;
  std::vector<std::uint64_t> cell_totals_;
};

/// Immutable set of fitted count distributions plus the pixel order they are
/// indexed by.
class DistributionSet {
 public:
  DistributionSet() = default;

  /// Fit from an accumulator. The target scheme may be the accumulator's
  /// scheme or any coarser one (neighbour bits are marginalized away), so a
  /// single all-others accumulation yields the all-others, nearest and
  /// neighbour-ignorant sets.
  static DistributionSet fit(const DistributionAccumulator& acc,
                             const PixelOrder& order, const FitOptions& options);

  int n_ions() const { return n_ions_; }
  int max_rank() const { return max_rank_; }
  NeighborScheme scheme() const { return scheme_; }
  double alpha() const { return alpha_; }
  double floor() const { return floor_; }
  const PixelOrder& order() const { return order_; }
  const std::vector<int>& neighbors(int ion) const {
    return neighbors_[static_cast<std::size_t>(ion)];
  }
  int nu_count(int ion) const {
    return 1 << neighbors_[static_cast<std::size_t>(ion)].size();
  }
  /// Neighbour-state index of `ion` given an estimated register state.
  int nu_index(int ion, const regsim::RegisterState& estimate) const {
    int nu = 0;
    const auto& nb = neighbors_[static_cast<std::size_t>(ion)];
    for (std::size_t j = 0; j < nb.size(); ++j)
      if (estimate.dark(nb[j])) nu |= 1 << j;
    return nu;
  }

  const Pmf& pmf(int ion, int rank, int nu, regsim::IonState state) const {
    return pmfs_[pmf_index(ion, rank, nu, state)];
  }

  void save(const std::string& path) const;
  static DistributionSet load(const std::string& path);

 private:
  std::size_t pmf_index(int ion, int rank, int nu, regsim::IonState state) const;

  int n_ions_ = 0;
  int max_rank_ = 0;
  NeighborScheme scheme_ = NeighborScheme::none;
  double alpha_ = 0.5;
  double floor_ = 1e-9;
  std::vector<std::vector<int>> neighbors_;
  std::vector<std::size_t> ion_offset_;
  std::vector<Pmf> pmfs_;
  PixelOrder order_;
};

/// One-call fit over a frame/label sequence (the spec-level operation).
DistributionSet fit_distributions(
    const std::vector<const emccd::Frame*>& frames,
    const std::vector<const regsim::RegisterState*>& labels,
    const PixelOrder& order, const FitOptions& options);

}  // namespace ionread::calib
