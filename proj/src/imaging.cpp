#include "ionread/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ionread::optics {

AliasTable::AliasTable(const std::vector<double>& weights) {
  const std::size_t n = weights.size();
  if (n == 0) return;
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w))
      throw std::invalid_argument("alias table: weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0.0)) return;  // stays empty; caller must not sample

  prob_.assign(n, 0.0);
  alias_.assign(n, 0);
  std::vector<double> scaled(n);
  for (std::size_t i = 0; i < n; ++i) scaled[i] = weights[i] * n / total;

  std::vector<std::uint32_t> small, large;
  for (std::size_t i = 0; i < n; ++i)
    (scaled[i] < 1.0 ? small : large).push_back(static_cast<std::uint32_t>(i));

  while (!small.empty() && !large.empty()) {
    const std::uint32_t s = small.back();
    small.pop_back();
    const std::uint32_t l = large.back();
    prob_[s] = scaled[s];
    alias_[s] = l;
    scaled[l] -= 1.0 - scaled[s];
    if (scaled[l] < 1.0) {
      large.pop_back();
      small.push_back(l);
    }
  }
  for (std::uint32_t i : large) prob_[i] = 1.0;
  for (std::uint32_t i : small) prob_[i] = 1.0;
}

void ImagingModel::validate() const {
  grid.validate();
  if (ion_positions_um.empty())
    throw std::invalid_argument("imaging model: no ions");
  if (!(bright_rate_phps >= 0.0))
    throw std::invalid_argument("imaging model: bright rate must be >= 0");
  if (subpixel_samples < 1)
    throw std::invalid_argument("imaging model: subpixel samples must be >= 1");
  for (std::size_t a = 0; a < ion_positions_um.size(); ++a)
    for (std::size_t b = a + 1; b < ion_positions_um.size(); ++b) {
      const auto& p = ion_positions_um[a];
      const auto& q = ion_positions_um[b];
      if (p.x == q.x && p.y == q.y)
        throw std::invalid_argument("imaging model: ion positions must be distinct");
    }
}

void RateMap::finalize() {
  total_rate_phps = 0.0;
  for (double r : rate_phps) {
    if (r < 0.0) throw std::logic_error("rate map: negative rate");
    total_rate_phps += r;
  }
  alias = total_rate_phps > 0.0 ? AliasTable(rate_phps) : AliasTable();
}

std::vector<double> ion_pixel_fractions(const ImagingModel& model, int ion) {
  model.validate();
  if (ion < 0 || ion >= model.n_ions())
    throw std::out_of_range("ion index out of range");
  const auto& pos = model.ion_positions_um[static_cast<std::size_t>(ion)];
  const double support = model.psf.support_radius_um();
  if (pos.x < -support || pos.x > model.grid.extent_x() + support ||
      pos.y < -support || pos.y > model.grid.extent_y() + support)
    throw std::invalid_argument("ion " + std::to_string(ion) +
                                " lies outside the field of view by more than the PSF support");

  const int s = model.subpixel_samples;
  const double pitch = model.grid.pitch_um;
  const double cell = pitch / s;
  const double cell_area = cell * cell;
  std::vector<double> frac(static_cast<std::size_t>(model.grid.n_pixels()), 0.0);
  for (int iy = 0; iy < model.grid.height; ++iy) {
    for (int ix = 0; ix < model.grid.width; ++ix) {
      const double x0 = ix * pitch, y0 = iy * pitch;
      double acc = 0.0;
      for (int sy = 0; sy < s; ++sy) {
        const double dy = y0 + (sy + 0.5) * cell - pos.y;
        for (int sx = 0; sx < s; ++sx) {
          const double dx = x0 + (sx + 0.5) * cell - pos.x;
          acc += model.psf(std::sqrt(dx * dx + dy * dy));
        }
      }
      frac[static_cast<std::size_t>(model.grid.index(ix, iy))] = acc * cell_area;
    }
  }
  return frac;
}

RateMap pixel_rate_map(const ImagingModel& model,
                       const std::vector<int>& bright_ions) {
  model.validate();
  RateMap map;
  map.grid = model.grid;
  map.rate_phps.assign(static_cast<std::size_t>(model.grid.n_pixels()), 0.0);
  double on_grid = 0.0;
  for (int ion : bright_ions) {
    const auto frac = ion_pixel_fractions(model, ion);
    for (std::size_t i = 0; i < frac.size(); ++i) {
      map.rate_phps[i] += model.bright_rate_phps * frac[i];
      on_grid += frac[i];
    }
  }
  map.spill_fraction =
      bright_ions.empty() ? 0.0
                          : 1.0 - on_grid / static_cast<double>(bright_ions.size());
  map.finalize();
  return map;
}

RateMapCache::RateMapCache(const ImagingModel& model) {
  model.validate();
  const int n = model.n_ions();
  if (n > 16) throw std::invalid_argument("rate map cache: too many ions");
  unit_maps_.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) unit_maps_.push_back(ion_pixel_fractions(model, k));

  const std::uint32_t n_masks = 1u << n;
  maps_.resize(n_masks);
  for (std::uint32_t mask = 0; mask < n_masks; ++mask) {
    RateMap& map = maps_[mask];
    map.grid = model.grid;
    map.rate_phps.assign(static_cast<std::size_t>(model.grid.n_pixels()), 0.0);
    double on_grid = 0.0;
    int bright = 0;
    for (int k = 0; k < n; ++k) {
      if (!(mask & (1u << k))) continue;
      ++bright;
      const auto& frac = unit_maps_[static_cast<std::size_t>(k)];
      for (std::size_t i = 0; i < frac.size(); ++i) {
        map.rate_phps[i] += model.bright_rate_phps * frac[i];
        on_grid += frac[i];
      }
    }
    map.spill_fraction = bright == 0 ? 0.0 : 1.0 - on_grid / bright;
    map.finalize();
  }
}

namespace {

/// Adaptive Simpson on [a, b].
double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double fa, double fm, double fb, double whole, double tol,
                        int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
    return left + right + delta / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b,
                 double tol) {
  if (!(b > a)) return 0.0;
  // Seed with a modest uniform split so narrow features are not missed.
  const int seed = 32;
  const double h = (b - a) / seed;
  double total = 0.0;
  for (int i = 0; i < seed; ++i) {
    const double x0 = a + i * h, x1 = x0 + h, xm = 0.5 * (x0 + x1);
    const double f0 = f(x0), fm = f(xm), f1 = f(x1);
    const double whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
    total += adaptive_simpson(f, x0, x1, f0, fm, f1, whole, tol / seed, 28);
  }
  return total;
}

}  // namespace

double psf_disc_fraction(const PointSpreadFunction& psf, double distance_um,
                         double roi_radius_um) {
  if (!(roi_radius_um > 0.0))
    throw std::invalid_argument("crosstalk: ROI diameter must be > 0");
  const double d = std::abs(distance_um);
  const double R = roi_radius_um;
  if (d < 1e-12) return psf.encircled_energy(R);

  double frac = 0.0;
  if (d < R) frac += psf.encircled_energy(R - d);
  const double lo = std::abs(R - d);
  const double hi = std::min(d + R, psf.support_radius_um() * 1.5 + d + R);
  const auto integrand = [&](double r) {
    if (r <= 0.0) return 0.0;
    double c = (d * d + r * r - R * R) / (2.0 * d * r);
    c = std::clamp(c, -1.0, 1.0);
    return 2.0 * r * std::acos(c) * psf(r);
  };
  frac += integrate(integrand, lo, hi, 1e-9);
  return std::min(frac, 1.0);
}

double crosstalk_fraction(const ImagingModel& model, Vec2 roi_center_um,
                          double roi_diameter_um, int source_ion) {
  model.validate();
  if (source_ion < 0 || source_ion >= model.n_ions())
    throw std::out_of_range("crosstalk: source ion out of range");
  const auto& pos = model.ion_positions_um[static_cast<std::size_t>(source_ion)];
  const double dx = roi_center_um.x - pos.x;
  const double dy = roi_center_um.y - pos.y;
  return psf_disc_fraction(model.psf, std::sqrt(dx * dx + dy * dy),
                           0.5 * roi_diameter_um);
}

std::vector<std::vector<double>> attribute_mean_image(
    const std::vector<double>& mean_image, const ImagingModel& model) {
  model.validate();
  const auto n_px = static_cast<std::size_t>(model.grid.n_pixels());
  if (mean_image.size() != n_px)
    throw std::invalid_argument("attribute_mean_image: image size mismatch");
  const int n = model.n_ions();
  std::vector<std::vector<double>> unit;
  unit.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) unit.push_back(ion_pixel_fractions(model, k));

  std::vector<std::vector<double>> out(
      static_cast<std::size_t>(n), std::vector<double>(n_px, 0.0));
  for (std::size_t i = 0; i < n_px; ++i) {
    double denom = 0.0;
    for (int k = 0; k < n; ++k) denom += unit[static_cast<std::size_t>(k)][i];
    if (denom <= 0.0) continue;
    for (int k = 0; k < n; ++k)
      out[static_cast<std::size_t>(k)][i] =
          mean_image[i] * unit[static_cast<std::size_t>(k)][i] / denom;
  }
  return out;
}

}  // namespace ionread::optics
