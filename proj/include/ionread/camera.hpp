#pragma once
#include <cstdint>
#include <span>
#include <vector>

#include "ionread/imaging.hpp"
#include "ionread/rng.hpp"

namespace ionread::emccd {

enum class ExcessNoiseMode { effective_qe, analog_gain };

/// EM-CCD noise model. In effective_qe mode photons are counted directly
/// with the quantum efficiency halved, which reproduces the factor-sqrt(2)
/// excess noise of the multiplication register for counting purposes. In
/// analog_gain mode each photoelectron is multiplied by an exponential gain
/// of mean em_gain and the output is quantized back to photon-equivalent
/// integers; the two modes agree on means and the analog mode shows the full
/// excess-noise variance.
struct CameraModel {
  double quantum_efficiency = 0.48;
  ExcessNoiseMode mode = ExcessNoiseMode::effective_qe;
  double em_gain = 1000.0;
  double cic_rate = 0.01;  // electrons / pixel / readout
  double readout_dead_time_s = 6e-6;
  double frame_read_time_per_pixel_s = 1e-7;

  double counting_qe() const {
    return mode == ExcessNoiseMode::effective_qe ? 0.5 * quantum_efficiency
                                                 : quantum_efficiency;
  }
  void validate() const;
};

/// One exposure's integer photon-equivalent counts.
struct Frame {
  int width = 0;
  int height = 0;
  double exposure_s = 0.0;
  int timestamp_index = 0;
  std::vector<std::uint16_t> counts;  // row-major

  std::uint32_t at(int ix, int iy) const {
    return counts[static_cast<std::size_t>(iy * width + ix)];
  }
  std::uint64_t sum() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

/// A constant-rate slice of one exposure (rate maps switch mid-exposure when
/// an ion decays).
struct ExposureSegment {
  const optics::RateMap* rates = nullptr;
  double duration_s = 0.0;
};

void expose_into(Frame& frame, const CameraModel& camera,
                 std::span<const ExposureSegment> segments,
                 rng::Stream& stream);

Frame expose(const CameraModel& camera, const optics::RateMap& rates,
             double exposure_s, rng::Stream& stream);

/// One frame per schedule entry; dead time advances the trial clock between
/// consecutive readouts but produces no counts.
std::vector<Frame> expose_sequence(
    const CameraModel& camera,
    const std::vector<std::pair<const optics::RateMap*, double>>& schedule,
    rng::Stream& stream);

/// Total wall time of a schedule including inter-exposure dead time.
double sequence_wall_time_s(const CameraModel& camera,
                            std::span<const double> durations_s);

}  // namespace ionread::emccd
