#include "ionread/irf1.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ionread::io {
namespace {

constexpr char kMagic[4] = {'I', 'R', 'F', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff),
  };
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("IRF1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_irf1(const std::string& path, std::span<const emccd::Frame> frames,
                std::uint32_t exposure_ns) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("IRF1: cannot open " + path + " for writing");
  if (frames.empty()) throw std::invalid_argument("IRF1: no frames");
  const int w = frames.front().width, h = frames.front().height;
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(frames.size()));
  put_u32(out, exposure_ns);
  for (const auto& f : frames) {
    if (f.width != w || f.height != h)
      throw std::invalid_argument("IRF1: mixed frame geometries");
    for (std::uint32_t c : f.counts) {
      if (c > 0xffff) throw std::invalid_argument("IRF1: count exceeds 65535");
      const unsigned char b[2] = {static_cast<unsigned char>(c & 0xff),
                                  static_cast<unsigned char>((c >> 8) & 0xff)};
      out.write(reinterpret_cast<const char*>(b), 2);
    }
  }
  if (!out) throw std::runtime_error("IRF1: write failed for " + path);
}

Irf1File read_irf1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("IRF1: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("IRF1: bad magic in " + path);
  Irf1File file;
  file.width = get_u32(in);
  file.height = get_u32(in);
  const std::uint32_t n_frames = get_u32(in);
  file.exposure_ns = get_u32(in);
  if (file.width == 0 || file.height == 0)
    throw std::runtime_error("IRF1: empty geometry in " + path);
  const std::size_t n_px = static_cast<std::size_t>(file.width) * file.height;
  file.frames.resize(n_frames);
  std::vector<unsigned char> buf(n_px * 2);
  for (auto& f : file.frames) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("IRF1: truncated frame data in " + path);
    f.width = static_cast<int>(file.width);
    f.height = static_cast<int>(file.height);
    f.exposure_s = file.exposure_ns * 1e-9;
    f.counts.resize(n_px);
    for (std::size_t i = 0; i < n_px; ++i)
      f.counts[i] = static_cast<std::uint16_t>(buf[2 * i] |
                                               (static_cast<unsigned>(buf[2 * i + 1]) << 8));
  }
  return file;
}

void write_labels(const std::string& path, std::span<const TrialLabel> labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("labels: cannot open " + path + " for writing");
  for (const auto& label : labels) {
    out << label.prepared.to_string();
    for (const auto& ev : label.decays)
      out << ' ' << ev.ion << ':'
          << static_cast<long long>(std::llround(ev.time_s * 1e9));
    out << '\n';
  }
  if (!out) throw std::runtime_error("labels: write failed for " + path);
}

std::vector<TrialLabel> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("labels: cannot open " + path);
  std::vector<TrialLabel> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string bits;
    ss >> bits;
    TrialLabel label;
    label.prepared = regsim::RegisterState::from_string(bits);
    std::string token;
    while (ss >> token) {
      const auto colon = token.find(':');
      if (colon == std::string::npos)
        throw std::runtime_error("labels: bad decay token '" + token + "'");
      regsim::DecayEvent ev;
      ev.ion = std::stoi(token.substr(0, colon));
      ev.time_s = std::stod(token.substr(colon + 1)) * 1e-9;
      label.decays.push_back(ev);
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

}  // namespace ionread::io
