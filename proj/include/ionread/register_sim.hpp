#pragma once
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ionread/camera.hpp"
#include "ionread/imaging.hpp"
#include "ionread/rng.hpp"

namespace ionread::regsim {

enum class IonState : std::uint8_t { bright = 0, dark = 1 };

/// Register of bright/dark ion labels. Rendered as a bit string with
/// '0' = bright and '1' = dark (so the all-bright register is "0000").
struct RegisterState {
  std::vector<IonState> bits;

  int n_ions() const { return static_cast<int>(bits.size()); }
  bool dark(int ion) const { return bits[static_cast<std::size_t>(ion)] == IonState::dark; }
  std::uint32_t bright_mask() const {
    std::uint32_t m = 0;
    for (int k = 0; k < n_ions(); ++k)
      if (!dark(k)) m |= 1u << k;
    return m;
  }
  std::string to_string() const {
    std::string s;
    for (auto b : bits) s += (b == IonState::dark ? '1' : '0');
    return s;
  }
  static RegisterState all_bright(int n) {
    return RegisterState{std::vector<IonState>(static_cast<std::size_t>(n), IonState::bright)};
  }
  static RegisterState from_string(const std::string& s);
  bool operator==(const RegisterState&) const = default;
};

/// Metastable dark-state decay; the only state change the model allows is
/// dark -> bright.
struct DecayModel {
  double lifetime_s = 1.168;
  void validate() const;
};

enum class ProtocolKind { single_exposure, time_resolved, qunybble_six_exposure };

struct Protocol {
  ProtocolKind kind = ProtocolKind::single_exposure;
  int n_exposures = 1;       // frames per trial (6 for the qunybble)
  double exposure_s = 400e-6;

  static Protocol single_exposure(double exposure_s = 400e-6) {
    return {ProtocolKind::single_exposure, 1, exposure_s};
  }
  static Protocol time_resolved(int m, double sub_exposure_s = 200e-6) {
    return {ProtocolKind::time_resolved, m, sub_exposure_s};
  }
  static Protocol qunybble(double exposure_s = 400e-6) {
    return {ProtocolKind::qunybble_six_exposure, 6, exposure_s};
  }
  void validate() const;
};

struct DecayEvent {
  int ion = 0;
  double time_s = 0.0;  // on the decay clock (t = 0 at state preparation)
};

struct TrialRecord {
  RegisterState prepared;
  std::vector<DecayEvent> decays;
  std::vector<emccd::Frame> frames;
  ProtocolKind protocol = ProtocolKind::single_exposure;
};

struct TrialModels {
  const optics::ImagingModel* imaging = nullptr;
  const emccd::CameraModel* camera = nullptr;
  const optics::RateMapCache* rate_maps = nullptr;
  DecayModel decay;
  double shelve_probability = 0.46;
};

/// Each ion is shelved (made dark) independently with the given probability.
RegisterState prepare_random_state(int n_ions, double shelve_probability,
                                   rng::Stream& stream);

/// Dark -> bright decays over a window of the given length; at most one per
/// ion, with the exponential law conditioned on the window.
std::vector<DecayEvent> sample_decays(const RegisterState& state,
                                      double total_time_s, const DecayModel& decay,
                                      rng::Stream& stream);

/// Generate one trial into `record` (buffers are reused). For the qunybble
/// protocol frame 0 is the all-bright "check" exposure and preparation
/// happens immediately before frame 1; for the other protocols the prepared
/// state applies from frame 0. `prepared` overrides the random preparation
/// and `forced_decays` overrides decay sampling (both used by tests and by
/// the alternating single-qubit experiments).
void run_trial_into(TrialRecord& record, const Protocol& protocol,
                    const TrialModels& models, rng::Stream& stream,
                    const std::optional<RegisterState>& prepared = std::nullopt,
                    const std::optional<std::vector<DecayEvent>>& forced_decays =
                        std::nullopt);

TrialRecord run_trial(const Protocol& protocol, const TrialModels& models,
                      rng::Stream& stream,
                      const std::optional<RegisterState>& prepared = std::nullopt,
                      const std::optional<std::vector<DecayEvent>>& forced_decays =
                          std::nullopt);

/// Length of the decay window (preparation to end of last exposure).
double decay_window_s(const Protocol& protocol, const emccd::CameraModel& camera);

}  // namespace ionread::regsim
