// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

#include "advmlm/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>

#include "advmlm/hash.hpp"

namespace advmlm {

namespace {

// Every integer and float is written little-endian byte by byte, so the
// layout does not depend on the host.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw CheckpointError("checkpoint: unexpected end of payload");
  }
  const std::uint8_t* take(std::size_t k) {
    need(k);
    const std::uint8_t* at = p_ + pos_;
    pos_ += k;
    return at;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const std::uint8_t* b = take(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* b = take(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t len = u32();
    const std::uint8_t* b = take(len);
    return std::string(reinterpret_cast<const char*>(b), len);
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

struct Blob {
  Shape shape;
  std::vector<float> data;
};

void write_blob(Writer& w, const std::string& name, const Shape& shape, const Eigen::ArrayXf& data) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.u64(static_cast<std::uint64_t>(d));
  w.u64(static_cast<std::uint64_t>(data.size()));
  for (Index k = 0; k < data.size(); ++k) w.f32(data[k]);
}

template <class Fn>
void for_each_blob(const TrainState& s, Fn&& fn) {
  const auto emit_set = [&](const std::string& tag, const ParameterList<Real>& params, const AdamW<Real>& opt) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      fn(p.name, p.tensor.shape(), p.tensor.value());
      fn("adamw." + tag + ".m/" + p.name, p.tensor.shape(), opt.first_moments()[i]);
      fn("adamw." + tag + ".v/" + p.name, p.tensor.shape(), opt.second_moments()[i]);
    }
  };
  emit_set("noiser", s.theta(), s.noiser_opt);
  emit_set("encoder", s.phi(), s.encoder_opt);
}

void restore_set(const std::string& tag, ParameterList<Real> params, AdamW<Real>& opt,
                 std::map<std::string, Blob>& blobs) {
  const auto fetch = [&](const std::string& name, const Shape& shape) -> std::vector<float> {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape != shape)
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                            ", expected " + shape_str(shape));
    std::vector<float> data = std::move(it->second.data);
    blobs.erase(it);
    return data;
  };
  const auto copy = [](const std::vector<float>& src, Eigen::ArrayXf& dst) {
    for (std::size_t k = 0; k < src.size(); ++k) dst[static_cast<Index>(k)] = src[k];
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    copy(fetch(p.name, p.tensor.shape()), p.tensor.mutable_value());
    copy(fetch("adamw." + tag + ".m/" + p.name, p.tensor.shape()), opt.first_moments()[i]);
    copy(fetch("adamw." + tag + ".v/" + p.name, p.tensor.shape()), opt.second_moments()[i]);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& s) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string fp = fingerprint(s.config);
  w.bytes(fp.data(), fp.size());
  w.str(canonical_text(s.config));

  w.i64(s.step);
  w.u8(static_cast<std::uint8_t>(s.mode));
  w.f64(s.best_probe);
  w.i64(s.stale_probes);
  w.u8(s.stopped ? 1 : 0);
  w.i64(s.noiser_opt.step_count());
  w.i64(s.encoder_opt.step_count());

  std::uint32_t count = 0;
  for_each_blob(s, [&](const std::string&, const Shape&, const Eigen::ArrayXf&) { ++count; });
  w.u32(count);
  for_each_blob(s, [&](const std::string& name, const Shape& shape, const Eigen::ArrayXf& data) {
    write_blob(w, name, shape, data);
  });

  auto& out = w.buffer();
  const Sha256Digest digest = sha256(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

TrainState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                  const std::optional<std::string>& expected_fingerprint) {
  constexpr std::size_t kDigest = 32, kHeader = sizeof kCheckpointMagic + 4 + 64;
  if (bytes.size() < kHeader + kDigest) throw CheckpointError("checkpoint: file too short (truncated?)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("checkpoint: bad magic; not an advmlm checkpoint");
  const std::size_t body = bytes.size() - kDigest;
  const Sha256Digest digest = sha256(bytes.data(), body);
  if (std::memcmp(digest.data(), bytes.data() + body, kDigest) != 0)
    throw CheckpointError("checkpoint: checksum mismatch (file truncated or corrupted)");

  Reader r(bytes.data() + sizeof kCheckpointMagic, body - sizeof kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint8_t* fp_bytes = r.take(64);
  const std::string fp(reinterpret_cast<const char*>(fp_bytes), 64);
  if (expected_fingerprint && *expected_fingerprint != fp)
    throw CheckpointError("checkpoint: config fingerprint mismatch (checkpoint " + fp.substr(0, 12) + ", config " +
                          expected_fingerprint->substr(0, 12) + ")");

  RunConfig cfg;
  try {
    cfg = parse_config(r.str());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: embedded config is invalid: ") + e.what());
  }
  if (fingerprint(cfg) != fp) throw CheckpointError("checkpoint: embedded config does not match its fingerprint");

  TrainState s = init_state(cfg);
  s.step = r.i64();
  const std::uint8_t mode = r.u8();
  if (mode > 1) throw CheckpointError("checkpoint: invalid mode byte");
  s.mode = static_cast<Phase>(mode);
  s.best_probe = r.f64();
  s.stale_probes = r.i64();
  s.stopped = r.u8() != 0;
  s.noiser_opt.set_step_count(r.i64());
  s.encoder_opt.set_step_count(r.i64());
  if (s.step < 1) throw CheckpointError("checkpoint: invalid step");

  std::map<std::string, Blob> blobs;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str();
    Blob b;
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(static_cast<Index>(r.u64()));
    const std::uint64_t n = r.u64();
    if (n != static_cast<std::uint64_t>(numel(b.shape))) throw CheckpointError("checkpoint: blob '" + name + "' size mismatch");
    r.need(4 * n);
    b.data.resize(n);
    for (auto& v : b.data) v = r.f32();
    if (!blobs.emplace(std::move(name), std::move(b)).second) throw CheckpointError("checkpoint: duplicate tensor");
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after the tensor table");
  restore_set("noiser", s.theta(), s.noiser_opt, blobs);
  restore_set("encoder", s.phi(), s.encoder_opt, blobs);
  if (!blobs.empty()) throw CheckpointError("checkpoint: unexpected tensor '" + blobs.begin()->first + "'");
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes, expected_fingerprint);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string checkpoint_name(std::int64_t completed_step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-%08lld.bin", static_cast<long long>(completed_step));
  return buf;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  static const std::regex pattern(R"(ckpt-(\d+)\.bin)");
  std::optional<std::filesystem::path> best;
  long long best_step = -1;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    const long long step = std::stoll(m[1].str());
    if (step > best_step) {
      best_step = step;
      best = entry.path();
    }
  }
  return best;
}

}  // namespace advmlm
