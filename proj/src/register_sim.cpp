#include "ionread/register_sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ionread::regsim {

RegisterState RegisterState::from_string(const std::string& s) {
  RegisterState st;
  st.bits.reserve(s.size());
  for (char c : s) {
    if (c == '0')
      st.bits.push_back(IonState::bright);
    else if (c == '1')
      st.bits.push_back(IonState::dark);
    else
      throw std::invalid_argument("register state: expected '0'/'1' bits");
  }
  return st;
}

void DecayModel::validate() const {
  if (!(lifetime_s > 0.0)) throw std::invalid_argument("decay model: lifetime must be > 0");
}

void Protocol::validate() const {
  if (n_exposures < 1) throw std::invalid_argument("protocol: need >= 1 exposure");
  if (!(exposure_s >= 0.0)) throw std::invalid_argument("protocol: exposure must be >= 0");
  if (kind == ProtocolKind::single_exposure && n_exposures != 1)
    throw std::invalid_argument("protocol: single exposure means one frame");
  if (kind == ProtocolKind::qunybble_six_exposure && n_exposures != 6)
    throw std::invalid_argument("protocol: qunybble trials have 6 frames");
}

RegisterState prepare_random_state(int n_ions, double shelve_probability,
                                   rng::Stream& stream) {
  if (!(shelve_probability >= 0.0 && shelve_probability <= 1.0))
    throw std::invalid_argument("shelve probability must be in [0, 1]");
  RegisterState st;
  st.bits.resize(static_cast<std::size_t>(n_ions));
  for (auto& b : st.bits)
    b = stream.bernoulli(shelve_probability) ? IonState::dark : IonState::bright;
  return st;
}

std::vector<DecayEvent> sample_decays(const RegisterState& state,
                                      double total_time_s, const DecayModel& decay,
                                      rng::Stream& stream) {
  decay.validate();
  if (!(total_time_s >= 0.0))
    throw std::invalid_argument("sample_decays: window must be >= 0");
  std::vector<DecayEvent> events;
  const double p_window = -std::expm1(-total_time_s / decay.lifetime_s);
  for (int k = 0; k < state.n_ions(); ++k) {
    if (!state.dark(k)) continue;
    const double u = stream.uniform();
    if (u >= p_window) continue;
    // u uniform on [0, p_window) maps through the inverse CDF to an
    // exponential time conditioned on the window.
    events.push_back({k, -decay.lifetime_s * std::log1p(-u)});
  }
  return events;
}

double decay_window_s(const Protocol& protocol, const emccd::CameraModel& camera) {
  const int m = protocol.kind == ProtocolKind::qunybble_six_exposure
                    ? protocol.n_exposures - 1
                    : protocol.n_exposures;
  return m * protocol.exposure_s + (m - 1) * camera.readout_dead_time_s;
}

namespace {

/// Expose frames [first, last) with the register evolving under `decays`,
/// placing exposure e at decay-clock offset e_index*(t + dead).
void expose_evolving(TrialRecord& record, std::size_t first_frame, int n_exposures,
                     const TrialModels& models, const RegisterState& prepared,
                     const std::vector<DecayEvent>& decays, rng::Stream& stream) {
  const auto& cache = *models.rate_maps;
  const double dead = models.camera->readout_dead_time_s;

  for (int e = 0; e < n_exposures; ++e) {
    emccd::Frame& frame = record.frames[first_frame + static_cast<std::size_t>(e)];
    const double t0 = e * (frame.exposure_s + dead);
    const double t1 = t0 + frame.exposure_s;

    // State at t0, plus any flips strictly inside (t0, t1).
    std::uint32_t mask = prepared.bright_mask();
    std::vector<std::pair<double, int>> cuts;
    for (const auto& ev : decays) {
      if (ev.time_s <= t0)
        mask |= 1u << ev.ion;
      else if (ev.time_s < t1)
        cuts.emplace_back(ev.time_s, ev.ion);
    }
    std::sort(cuts.begin(), cuts.end());

    emccd::ExposureSegment segs[8];
    std::size_t n_segs = 0;
    double seg_start = t0;
    for (const auto& [when, ion] : cuts) {
      segs[n_segs++] = {&cache.for_mask(mask), when - seg_start};
      seg_start = when;
      mask |= 1u << ion;
    }
    segs[n_segs++] = {&cache.for_mask(mask), t1 - seg_start};

    const int stamp = frame.timestamp_index;
    expose_into(frame, *models.camera,
                std::span<const emccd::ExposureSegment>(segs, n_segs), stream);
    frame.timestamp_index = stamp;
  }
}

}  // namespace

void run_trial_into(TrialRecord& record, const Protocol& protocol,
                    const TrialModels& models, rng::Stream& stream,
                    const std::optional<RegisterState>& prepared,
                    const std::optional<std::vector<DecayEvent>>& forced_decays) {
  protocol.validate();
  if (models.imaging == nullptr || models.camera == nullptr || models.rate_maps == nullptr)
    throw std::invalid_argument("run_trial: missing models");
  const int n_ions = models.imaging->n_ions();
  if (prepared && prepared->n_ions() != n_ions)
    throw std::invalid_argument("run_trial: prepared state size mismatch");

  record.protocol = protocol.kind;
  record.prepared =
      prepared ? *prepared
               : prepare_random_state(n_ions, models.shelve_probability, stream);
  const double window = decay_window_s(protocol, *models.camera);
  record.decays = forced_decays
                      ? *forced_decays
                      : sample_decays(record.prepared, window, models.decay, stream);

  const bool qunybble = protocol.kind == ProtocolKind::qunybble_six_exposure;
  const auto n_frames = static_cast<std::size_t>(protocol.n_exposures);
  record.frames.resize(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    record.frames[i].exposure_s = protocol.exposure_s;
    record.frames[i].timestamp_index = static_cast<int>(i);
  }

  std::size_t first = 0;
  if (qunybble) {
    // Check exposure with every ion fluorescing; preparation happens after it.
    const std::uint32_t all = (1u << n_ions) - 1u;
    const emccd::ExposureSegment seg{&models.rate_maps->for_mask(all),
                                     protocol.exposure_s};
    expose_into(record.frames[0], *models.camera,
                std::span<const emccd::ExposureSegment>(&seg, 1), stream);
    record.frames[0].timestamp_index = 0;
    first = 1;
  }
  expose_evolving(record, first, protocol.n_exposures - static_cast<int>(first),
                  models, record.prepared, record.decays, stream);
}

TrialRecord run_trial(const Protocol& protocol, const TrialModels& models,
                      rng::Stream& stream,
                      const std::optional<RegisterState>& prepared,
                      const std::optional<std::vector<DecayEvent>>& forced_decays) {
  TrialRecord record;
  run_trial_into(record, protocol, models, stream, prepared, forced_decays);
  return record;
}

}  // namespace ionread::regsim
