#pragma once
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ionread/camera.hpp"
#include "ionread/register_sim.hpp"

namespace ionread::io {

/// "IRF1" frame container: magic bytes, little-endian u32 {width, height,
/// n_frames, exposure_ns}, then per frame width*height little-endian u16
/// counts, row-major. Counts above 65535 are an encoding error (they cannot
/// occur in frames produced by this simulator's count range checks).
void write_irf1(const std::string& path, std::span<const emccd::Frame> frames,
                std::uint32_t exposure_ns);

struct Irf1File {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t exposure_ns = 0;
  std::vector<emccd::Frame> frames;
};

Irf1File read_irf1(const std::string& path);

/// Trial label sidecar: one line per trial, the prepared state bit string
/// followed by decay events as ion:time_ns.
struct TrialLabel {
  regsim::RegisterState prepared;
  std::vector<regsim::DecayEvent> decays;
};

void write_labels(const std::string& path, std::span<const TrialLabel> labels);
std::vector<TrialLabel> read_labels(const std::string& path);

}  // namespace ionread::io
