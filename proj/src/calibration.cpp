#include "ionread/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ionread::calib {

PixelOrder brightness_order(const std::vector<std::vector<double>>& per_ion_mean,
                            const PixelGrid& grid, double background_mean) {
  grid.validate();
  if (per_ion_mean.empty()) throw std::invalid_argument("brightness_order: no ions");
  PixelOrder result;
  result.order.resize(per_ion_mean.size());
  const auto n_px = static_cast<std::size_t>(grid.n_pixels());
  for (std::size_t k = 0; k < per_ion_mean.size(); ++k) {
    const auto& mean = per_ion_mean[k];
    if (mean.size() != n_px)
      throw std::invalid_argument("brightness_order: image size mismatch");
    const double peak = *std::max_element(mean.begin(), mean.end());
    if (!(peak > background_mean))
      throw std::runtime_error("brightness_order: ion " + std::to_string(k) +
                               " has no pixel above background");
    auto& order = result.order[k];
    order.resize(n_px);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&mean](std::uint32_t a, std::uint32_t b) {
      if (mean[a] != mean[b]) return mean[a] > mean[b];
      return a < b;  // row-major tie break
    });
  }
  return result;
}

std::string scheme_name(NeighborScheme scheme) {
  switch (scheme) {
    case NeighborScheme::none: return "none";
    case NeighborScheme::nearest: return "nearest";
    case NeighborScheme::all_others: return "all_others";
  }
  return "none";
}

NeighborScheme scheme_from_name(const std::string& name) {
  if (name == "none") return NeighborScheme::none;
  if (name == "nearest") return NeighborScheme::nearest;
  if (name == "all_others") return NeighborScheme::all_others;
  throw std::invalid_argument("unknown neighbour scheme '" + name + "'");
}

std::vector<int> neighbor_ions(int ion, int n_ions, NeighborScheme scheme) {
  std::vector<int> nb;
  switch (scheme) {
    case NeighborScheme::none:
      break;
    case NeighborScheme::nearest:
      if (ion > 0) nb.push_back(ion - 1);
      if (ion + 1 < n_ions) nb.push_back(ion + 1);
      break;
    case NeighborScheme::all_others:
      for (int j = 0; j < n_ions; ++j)
        if (j != ion) nb.push_back(j);
      break;
  }
  return nb;
}

DistributionAccumulator::DistributionAccumulator(int n_ions, int max_rank,
                                                 NeighborScheme scheme, int count_cap)
    : n_ions_(n_ions), max_rank_(max_rank), scheme_(scheme), cap_(count_cap) {
  if (n_ions < 1) throw std::invalid_argument("accumulator: need >= 1 ion");
  if (max_rank < 1) throw std::invalid_argument("accumulator: need max_rank >= 1");
  neighbors_.reserve(static_cast<std::size_t>(n_ions));
  std::size_t cells = 0;
  for (int k = 0; k < n_ions; ++k) {
    neighbors_.push_back(neighbor_ions(k, n_ions, scheme));
    ion_offset_.push_back(cells);
    cells += static_cast<std::size_t>(max_rank) *
             (1u << neighbors_.back().size()) * 2u;
  }
  hist_.assign(cells * static_cast<std::size_t>(cap_), 0);
  cell_totals_.assign(cells, 0);
}

std::size_t DistributionAccumulator::cell_index(int ion, int rank, int nu,
                                                int state) const {
  const auto arity = neighbors_[static_cast<std::size_t>(ion)].size();
  return ion_offset_[static_cast<std::size_t>(ion)] +
         ((static_cast<std::size_t>(rank) << (arity + 1)) |
          (static_cast<std::size_t>(nu) << 1) | static_cast<std::size_t>(state));
}

void DistributionAccumulator::add(const emccd::Frame& frame,
                                  const regsim::RegisterState& label,
                                  const PixelOrder& order) {
  if (label.n_ions() != n_ions_)
    throw std::invalid_argument("accumulator: label size mismatch");
  for (int k = 0; k < n_ions_; ++k) {
    int nu = 0;
    const auto& nb = neighbors_[static_cast<std::size_t>(k)];
    for (std::size_t j = 0; j < nb.size(); ++j)
      if (label.dark(nb[j])) nu |= 1 << j;
    const int state = label.dark(k) ? 1 : 0;
    const auto& ranks = order.of(k);
    for (int i = 0; i < max_rank_; ++i) {
      const std::uint32_t n = frame.counts[ranks[static_cast<std::size_t>(i)]];
      if (static_cast<int>(n) >= cap_)
        throw std::runtime_error("accumulator: count exceeds histogram capacity");
      const std::size_t cell = cell_index(k, i, nu, state);
      ++hist_[cell * static_cast<std::size_t>(cap_) + n];
      ++cell_totals_[cell];
    }
  }
}

void DistributionAccumulator::merge(const DistributionAccumulator& other) {
  if (other.hist_.size() != hist_.size() || other.scheme_ != scheme_)
    throw std::invalid_argument("accumulator: merge shape mismatch");
  for (std::size_t i = 0; i < hist_.size(); ++i) hist_[i] += other.hist_[i];
  for (std::size_t i = 0; i < cell_totals_.size(); ++i)
    cell_totals_[i] += other.cell_totals_[i];
}

std::size_t DistributionSet::pmf_index(int ion, int rank, int nu,
                                       regsim::IonState state) const {
  const auto arity = neighbors_[static_cast<std::size_t>(ion)].size();
  return ion_offset_[static_cast<std::size_t>(ion)] +
         ((static_cast<std::size_t>(rank) << (arity + 1)) |
          (static_cast<std::size_t>(nu) << 1) |
          static_cast<std::size_t>(state == regsim::IonState::dark ? 1 : 0));
}

namespace {

bool coarser_or_equal(NeighborScheme target, NeighborScheme source) {
  if (target == source) return true;
  if (target == NeighborScheme::none) return true;
  return target == NeighborScheme::nearest && source == NeighborScheme::all_others;
}

Pmf smooth_histogram(const std::uint64_t* bins, int cap, std::uint64_t total,
                     const FitOptions& options) {
  int obs_max = 0;
  for (int n = cap - 1; n >= 0; --n) {
    if (bins[n] != 0) {
      obs_max = n;
      break;
    }
  }
  const int range = obs_max + options.extend_bins + 1;
  Pmf pmf;
  pmf.floor = options.floor;
  pmf.log_floor = std::log(options.floor);
  pmf.p.resize(static_cast<std::size_t>(range));
  pmf.log_p.resize(static_cast<std::size_t>(range));
  const double denom =
      static_cast<double>(total) + options.alpha * static_cast<double>(range);
  for (int n = 0; n < range; ++n) {
    const double c = n < cap ? static_cast<double>(bins[n]) : 0.0;
    pmf.p[static_cast<std::size_t>(n)] = (c + options.alpha) / denom;
    pmf.log_p[static_cast<std::size_t>(n)] =
        std::log(pmf.p[static_cast<std::size_t>(n)]);
  }
  return pmf;
}

}  // namespace

DistributionSet DistributionSet::fit(const DistributionAccumulator& acc,
                                     const PixelOrder& order,
                                     const FitOptions& options) {
  if (options.max_rank > acc.max_rank_)
    throw std::invalid_argument("fit: requested rank exceeds accumulated rank");
  if (!coarser_or_equal(options.scheme, acc.scheme_))
    throw std::invalid_argument("fit: accumulator lacks the requested neighbour detail");
  if (order.n_ions() != acc.n_ions_)
    throw std::invalid_argument("fit: pixel order ion count mismatch");
  if (!(options.alpha > 0.0))
    throw std::invalid_argument("fit: smoothing alpha must be > 0");

  DistributionSet set;
  set.n_ions_ = acc.n_ions_;
  set.max_rank_ = options.max_rank;
  set.scheme_ = options.scheme;
  set.alpha_ = options.alpha;
  set.floor_ = options.floor;
  set.order_ = order;

  std::size_t cells = 0;
  for (int k = 0; k < set.n_ions_; ++k) {
    set.neighbors_.push_back(neighbor_ions(k, set.n_ions_, options.scheme));
    set.ion_offset_.push_back(cells);
    cells += static_cast<std::size_t>(set.max_rank_) *
             (1u << set.neighbors_.back().size()) * 2u;
  }
  set.pmfs_.resize(cells);

  const int cap = acc.cap_;
  std::vector<std::uint64_t> merged(static_cast<std::size_t>(cap));
  for (int k = 0; k < set.n_ions_; ++k) {
    const auto& target_nb = set.neighbors_[static_cast<std::size_t>(k)];
    const auto& source_nb = acc.neighbors_[static_cast<std::size_t>(k)];
    // Map each target nu to the source nus that marginalize onto it.
    const int target_nus = 1 << target_nb.size();
    const int source_nus = 1 << source_nb.size();
    for (int nu = 0; nu < target_nus; ++nu) {
      for (int state = 0; state < 2; ++state) {
        for (int rank = 0; rank < set.max_rank_; ++rank) {
          std::fill(merged.begin(), merged.end(), 0);
          std::uint64_t total = 0;
          for (int snu = 0; snu < source_nus; ++snu) {
            int proj = 0;
            bool match = true;
            for (std::size_t j = 0; j < target_nb.size(); ++j) {
              const auto it =
                  std::find(source_nb.begin(), source_nb.end(), target_nb[j]);
              if (it == source_nb.end()) {
                match = false;
                break;
              }
              const auto bit = static_cast<std::size_t>(it - source_nb.begin());
              if (snu & (1 << bit)) proj |= 1 << j;
            }
            if (!match || proj != nu) continue;
            const std::size_t cell = acc.cell_index(k, rank, snu, state);
            const std::uint64_t* bins = &acc.hist_[cell * static_cast<std::size_t>(cap)];
            for (int n = 0; n < cap; ++n) merged[static_cast<std::size_t>(n)] += bins[n];
            total += acc.cell_totals_[cell];
          }
          if (rank == 0 && total < options.min_samples) {
            std::ostringstream msg;
            msg << "calibration cell starved: ion " << k << ", state "
                << (state ? "dark" : "bright") << ", nu ";
            for (std::size_t j = target_nb.size(); j-- > 0;)
              msg << ((nu >> j) & 1);
            if (target_nb.empty()) msg << "-";
            msg << " (" << total << " samples < " << options.min_samples << ")";
            throw std::runtime_error(msg.str());
          }
          set.pmfs_[set.pmf_index(k, rank, nu,
                                  state ? regsim::IonState::dark
                                        : regsim::IonState::bright)] =
              smooth_histogram(merged.data(), cap, total, options);
        }
      }
    }
  }
  return set;
}

DistributionSet fit_distributions(
    const std::vector<const emccd::Frame*>& frames,
    const std::vector<const regsim::RegisterState*>& labels,
    const PixelOrder& order, const FitOptions& options) {
  if (frames.size() != labels.size())
    throw std::invalid_argument("fit_distributions: frame/label count mismatch");
  if (frames.empty()) throw std::invalid_argument("fit_distributions: no frames");
  DistributionAccumulator acc(order.n_ions(), options.max_rank, options.scheme);
  for (std::size_t i = 0; i < frames.size(); ++i)
    acc.add(*frames[i], *labels[i], order);
  return DistributionSet::fit(acc, order, options);
}

void DistributionSet::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("calibration archive: cannot open " + path);
  out << "ionread-calibration v1\n";
  out << "ions " << n_ions_ << "\n";
  out << "max_rank " << max_rank_ << "\n";
  out << "scheme " << scheme_name(scheme_) << "\n";
  out << "alpha " << alpha_ << "\n";
  out << "floor " << floor_ << "\n";
  out.precision(17);
  out << "order,ion,rank,pixel\n";
  for (int k = 0; k < n_ions_; ++k)
    for (std::size_t i = 0; i < order_.of(k).size(); ++i)
      out << "O," << k << ',' << i << ',' << order_.of(k)[i] << "\n";
  out << "pmf,ion,rank,state,nu,count,probability\n";
  for (int k = 0; k < n_ions_; ++k)
    for (int rank = 0; rank < max_rank_; ++rank)
      for (int nu = 0; nu < nu_count(k); ++nu)
        for (int state = 0; state < 2; ++state) {
          const auto& pmf = pmfs_[pmf_index(k, rank, nu,
                                            state ? regsim::IonState::dark
                                                  : regsim::IonState::bright)];
          for (std::size_t n = 0; n < pmf.p.size(); ++n)
            out << "P," << k << ',' << rank << ',' << (state ? 'D' : 'B') << ','
                << nu << ',' << n << ',' << pmf.p[n] << "\n";
        }
  if (!out) throw std::runtime_error("calibration archive: write failed for " + path);
}

DistributionSet DistributionSet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("calibration archive: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "ionread-calibration v1")
    throw std::runtime_error("calibration archive: bad magic in " + path);

  DistributionSet set;
  int n_ions = 0, max_rank = 0;
  std::string scheme;
  double alpha = 0.5, floor = 1e-9;
  for (int i = 0; i < 5; ++i) {
    if (!std::getline(in, line))
      throw std::runtime_error("calibration archive: truncated header");
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "ions")
      ss >> n_ions;
    else if (key == "max_rank")
      ss >> max_rank;
    else if (key == "scheme")
      ss >> scheme;
    else if (key == "alpha")
      ss >> alpha;
    else if (key == "floor")
      ss >> floor;
    else
      throw std::runtime_error("calibration archive: unexpected header '" + key + "'");
  }
  set.n_ions_ = n_ions;
  set.max_rank_ = max_rank;
  set.scheme_ = scheme_from_name(scheme);
  set.alpha_ = alpha;
  set.floor_ = floor;
  std::size_t cells = 0;
  for (int k = 0; k < n_ions; ++k) {
    set.neighbors_.push_back(neighbor_ions(k, n_ions, set.scheme_));
    set.ion_offset_.push_back(cells);
    cells += static_cast<std::size_t>(max_rank) *
             (1u << set.neighbors_.back().size()) * 2u;
  }
  set.pmfs_.resize(cells);
  set.order_.order.resize(static_cast<std::size_t>(n_ions));

  const double log_floor = std::log(floor);
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == 'o' || line[0] == 'p') continue;  // column headers
    std::istringstream ss(line);
    std::string tag;
    std::getline(ss, tag, ',');
    if (tag == "O") {
      std::string ion_s, rank_s, pixel_s;
      std::getline(ss, ion_s, ',');
      std::getline(ss, rank_s, ',');
      std::getline(ss, pixel_s, ',');
      auto& ord = set.order_.order[static_cast<std::size_t>(std::stoi(ion_s))];
      const auto rank = static_cast<std::size_t>(std::stoul(rank_s));
      if (ord.size() <= rank) ord.resize(rank + 1);
      ord[rank] = static_cast<std::uint32_t>(std::stoul(pixel_s));
    } else if (tag == "P") {
      std::string f[5];
      for (auto& v : f) std::getline(ss, v, ',');
      const int ion = std::stoi(f[0]);
      const int rank = std::stoi(f[1]);
      const auto state =
          f[2] == "D" ? regsim::IonState::dark : regsim::IonState::bright;
      const int nu = std::stoi(f[3]);
      const auto count = static_cast<std::size_t>(std::stoul(f[4]));
      auto& pmf = set.pmfs_[set.pmf_index(ion, rank, nu, state)];
      if (pmf.p.size() <= count) {
        pmf.p.resize(count + 1, 0.0);
        pmf.log_p.resize(count + 1, log_floor);
      }
      pmf.floor = floor;
      pmf.log_floor = log_floor;
      const double prob = std::stod(line.substr(line.rfind(',') + 1));
      pmf.p[count] = prob;
      pmf.log_p[count] = std::log(prob);
    } else {
      throw std::runtime_error("calibration archive: unexpected row '" + line + "'");
    }
  }
  return set;
}

}  // namespace ionread::calib
