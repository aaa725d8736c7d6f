// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cotr_moe/random.hpp"

namespace cotr_moe::stack {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'T', 'R', 'M', 'O', 'E', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof v);
  }
  void put_bytes(const std::string& s) { bytes_.append(s); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("corrupt checkpoint: truncated");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const MultimodalModel& model, int stage) {
  Writer w;
  w.put_bytes(std::string(kMagic, sizeof kMagic));
  w.put(kCheckpointVersion);
  w.put_bytes(model.config().digest());
  w.put(static_cast<std::int32_t>(stage));
  w.put(static_cast<std::uint8_t>(model.wiring() == Wiring::concat ? 0 : 1));
  const std::string cfg = model.config().to_json(false).dump();
  w.put(static_cast<std::uint64_t>(cfg.size()));
  w.put_bytes(cfg);
  const auto& entries = model.parameters().entries();
  w.put(static_cast<std::uint64_t>(entries.size()));
  for (const auto& e : entries) {
    w.put_string(e.name);
    w.put(static_cast<std::uint8_t>(e.group));
    w.put(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : e.tensor.data()) w.put(v);
  }
  w.put(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw CheckpointError("corrupt checkpoint: file too short");
  }
  if (bytes.compare(0, sizeof kMagic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (stored != fnv1a64(std::string_view(bytes.data(), body))) throw CheckpointError("corrupt checkpoint: checksum mismatch");

  Reader r(bytes, body);
  r.get_bytes(sizeof kMagic);
  r.get<std::uint32_t>();
  Checkpoint c;
  c.digest = r.get_bytes(16);
  c.stage = r.get<std::int32_t>();
  const auto wiring = r.get<std::uint8_t>();
  if (wiring > 1) throw CheckpointError("corrupt checkpoint: wiring tag");
  c.wiring = wiring == 0 ? Wiring::concat : Wiring::reduced;
  const std::string cfg = r.get_bytes(static_cast<std::size_t>(r.get<std::uint64_t>()));
  try {
    c.config = RunConfig::from_json(nlohmann::json::parse(cfg));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: embedded config: ") + e.what());
  }
  if (c.config.digest() != c.digest) throw CheckpointError("corrupt checkpoint: digest does not match config");
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    ParameterBlock b;
    b.name = r.get_string();
    const auto g = r.get<std::uint8_t>();
    if (g >= std::size(kAllGroups)) throw CheckpointError("corrupt checkpoint: group tag");
    b.group = kAllGroups[g];
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CheckpointError("corrupt checkpoint: rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= b.shape.back();
    }
    if (n == 0 || n > bytes.size()) throw CheckpointError("corrupt checkpoint: block size");
    b.data.resize(n);
    for (auto& v : b.data) v = r.get<double>();
    c.blocks.push_back(std::move(b));
  }
  if (!r.done()) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const MultimodalModel& model, int stage, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model, stage);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::ios_base::failure("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::ios_base::failure("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const CheckpointVersionError& e) {
    throw CheckpointVersionError(path.string() + ": " + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

MultimodalModel restore_model(const Checkpoint& checkpoint, const RunConfig& config, Wiring wiring) {
  MultimodalModel model(config, wiring);
  for (const auto& b : checkpoint.blocks) {
    auto entry = model.parameters().find(b.name);
    if (!entry) throw CheckpointError("checkpoint parameter '" + b.name + "' does not exist in the model");
    if (entry->group != b.group || entry->tensor.shape() != b.shape) {
      throw CheckpointError("checkpoint parameter '" + b.name + "' has shape " + shape_string(b.shape) +
                            ", model expects " + shape_string(entry->tensor.shape()));
    }
    entry->tensor.assign(b.data);
  }
  return model;
}

MultimodalModel restore_model(const Checkpoint& checkpoint) {
  return restore_model(checkpoint, checkpoint.config, checkpoint.wiring);
}

}  // namespace cotr_moe::stack
