#include "ionread/camera.hpp"

#include <cmath>
#include <stdexcept>

namespace ionread::emccd {

void CameraModel::validate() const {
  if (!(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0))
    throw std::invalid_argument("camera: quantum efficiency must be in (0, 1]");
  if (!(cic_rate >= 0.0)) throw std::invalid_argument("camera: cic rate must be >= 0");
  if (mode == ExcessNoiseMode::analog_gain && !(em_gain >= 1.0))
    throw std::invalid_argument("camera: EM gain must be >= 1 in analog mode");
  if (!(readout_dead_time_s >= 0.0))
    throw std::invalid_argument("camera: dead time must be >= 0");
}

void expose_into(Frame& frame, const CameraModel& camera,
                 std::span<const ExposureSegment> segments,
                 rng::Stream& stream) {
  camera.validate();
  if (segments.empty()) throw std::invalid_argument("expose: no segments");
  const auto& grid = segments.front().rates->grid;
  const auto n_px = static_cast<std::size_t>(grid.n_pixels());

  frame.width = grid.width;
  frame.height = grid.height;
  frame.exposure_s = 0.0;
  frame.counts.assign(n_px, 0);

  const double qe = camera.counting_qe();
  // Signal electrons: one total Poisson draw per segment scattered over the
  // pixels in proportion to their rates; by Poisson thinning this equals
  // independent per-pixel Poisson draws in law.
  for (const auto& seg : segments) {
    if (seg.rates == nullptr || !(seg.duration_s >= 0.0))
      throw std::invalid_argument("expose: bad segment");
    if (seg.rates->grid.n_pixels() != grid.n_pixels())
      throw std::invalid_argument("expose: segment grid mismatch");
    frame.exposure_s += seg.duration_s;
    const double mean = seg.rates->total_rate_phps * seg.duration_s * qe;
    if (mean <= 0.0) continue;
    const long n = stream.poisson(mean);
    for (long i = 0; i < n; ++i) ++frame.counts[seg.rates->alias.sample(stream)];
  }
  // Clock-induced charge: one Poisson total per readout, uniform over pixels.
  if (camera.cic_rate > 0.0) {
    const long n = stream.poisson(camera.cic_rate * static_cast<double>(n_px));
    for (long i = 0; i < n; ++i)
      ++frame.counts[stream.next_below(static_cast<std::uint32_t>(n_px))];
  }

  if (camera.mode == ExcessNoiseMode::analog_gain) {
    const double g = camera.em_gain;
    for (auto& c : frame.counts) {
      if (c == 0) continue;
      const double analog = stream.gamma_integer(static_cast<long>(c), g);
      c = static_cast<std::uint16_t>(std::nearbyint(analog / g));
    }
  }
}

Frame expose(const CameraModel& camera, const optics::RateMap& rates,
             double exposure_s, rng::Stream& stream) {
  if (!(exposure_s >= 0.0))
    throw std::invalid_argument("expose: exposure time must be >= 0");
  Frame frame;
  const ExposureSegment seg{&rates, exposure_s};
  expose_into(frame, camera, std::span<const ExposureSegment>(&seg, 1), stream);
  return frame;
}

std::vector<Frame> expose_sequence(
    const CameraModel& camera,
    const std::vector<std::pair<const optics::RateMap*, double>>& schedule,
    rng::Stream& stream) {
  if (schedule.empty()) throw std::invalid_argument("expose_sequence: empty schedule");
  std::vector<Frame> frames(schedule.size());
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const ExposureSegment seg{schedule[i].first, schedule[i].second};
    expose_into(frames[i], camera, std::span<const ExposureSegment>(&seg, 1), stream);
    frames[i].timestamp_index = static_cast<int>(i);
  }
  return frames;
}

double sequence_wall_time_s(const CameraModel& camera,
                            std::span<const double> durations_s) {
  double total = 0.0;
  for (double d : durations_s) total += d;
  if (!durations_s.empty())
    total += camera.readout_dead_time_s * static_cast<double>(durations_s.size() - 1);
  return total;
}

}  // namespace ionread::emccd
