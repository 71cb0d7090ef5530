#pragma once
#include <cstdint>
#include <vector>

#include "ionread/grid.hpp"
#include "ionread/psf.hpp"
#include "ionread/rng.hpp"

namespace ionread::optics {

/// Walker/Vose alias table for O(1) categorical sampling.
class AliasTable {
 public:
  AliasTable() = default;
  explicit AliasTable(const std::vector<double>& weights);
  bool empty() const { return prob_.empty(); }
  std::uint32_t sample(rng::Stream& stream) const {
    const std::uint32_t i = stream.next_below(static_cast<std::uint32_t>(prob_.size()));
    return stream.uniform() < prob_[i] ? i : alias_[i];
  }

 private:
  std::vector<double> prob_;
  std::vector<std::uint32_t> alias_;
};

/// Maps ion positions and a per-ion brightness to expected per-pixel photon
/// rates. bright_rate_phps is the detected photon rate per bright ion at the
/// sensor (collection and transmission losses already applied; the camera's
/// quantum efficiency is applied by the camera model).
struct ImagingModel {
  std::vector<Vec2> ion_positions_um;
  PointSpreadFunction psf = PointSpreadFunction::aberrated();
  PixelGrid grid{50, 10, 2.6};
  double bright_rate_phps = 0.0;
  int subpixel_samples = 4;  // midpoint rule, per axis

  int n_ions() const { return static_cast<int>(ion_positions_um.size()); }
  void validate() const;
};

/// Expected photon rates per pixel for one set of bright ions, plus the
/// fraction of the emitted signal that misses the grid (spill).
struct RateMap {
  PixelGrid grid;
  std::vector<double> rate_phps;  // per pixel, row-major
  double total_rate_phps = 0.0;
  double spill_fraction = 0.0;  // of the summed bright signal
  AliasTable alias;             // proportional to rate_phps

  void finalize();  // fills total + alias from rate_phps
};

/// PSF integral of one ion over every grid pixel, as fractions of the ion's
/// total signal. Throws if the ion lies farther than the PSF support from
/// the grid.
std::vector<double> ion_pixel_fractions(const ImagingModel& model, int ion);

/// Superposition of the bright ions' per-pixel rates.
RateMap pixel_rate_map(const ImagingModel& model,
                       const std::vector<int>& bright_ions);

/// Pre-built rate maps for every register state (bright mask), immutable and
/// safe for concurrent use.
class RateMapCache {
 public:
  explicit RateMapCache(const ImagingModel& model);
  const RateMap& for_mask(std::uint32_t bright_mask) const {
    return maps_[bright_mask];
  }
  const std::vector<double>& unit_map(int ion) const { return unit_maps_[ion]; }
  int n_ions() const { return static_cast<int>(unit_maps_.size()); }

 private:
  std::vector<std::vector<double>> unit_maps_;
  std::vector<RateMap> maps_;
};

/// Fraction of source_ion's total detected signal inside a circular ROI.
double crosstalk_fraction(const ImagingModel& model, Vec2 roi_center_um,
                          double roi_diameter_um, int source_ion);

/// Same quantity for a bare PSF centred at the origin, ROI at distance d.
double psf_disc_fraction(const PointSpreadFunction& psf, double distance_um,
                         double roi_radius_um);

/// Split an all-ions-bright mean image into per-ion attributed images using
/// the model's expected per-ion maps as weights (the "check exposure"
/// attribution rule).
std::vector<std::vector<double>> attribute_mean_image(
    const std::vector<double>& mean_image, const ImagingModel& model);

}  // namespace ionread::optics
