// SPDX-License-Identifier: Apache-2.0
#include "comodal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "comodal/error.hpp"

namespace comodal {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'K', 'T'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2,
                                                                     std::uint16_t,
                                                                     std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2,
                                                                       std::uint16_t,
                                                                       std::uint8_t>>>;
    need(sizeof(U), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError("truncated checkpoint at byte offset " + std::to_string(pos_) +
                        " reading " + what + " (" + std::to_string(n) + " bytes needed, " +
                        std::to_string(remaining()) + " available)");
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint to_checkpoint(const ParamList& params) {
  Checkpoint out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back({p.name, p.tensor.shape(),
                   std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  return out;
}

Checkpoint to_checkpoint(const CoTrainModel& model) {
  ParamList refs;
  for (const auto& e : model.parameters()) refs.push_back(e.ref);
  return to_checkpoint(refs);
}

Checkpoint to_checkpoint(const UnimodalModel& model) { return to_checkpoint(model.parameters()); }

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.size()));
  for (const auto& e : checkpoint) {
    if (e.name.size() > 0xFFFF) throw FormatError("parameter name too long: " + e.name);
    if (e.shape.size() > 0xFF) throw FormatError("rank too large for " + e.name);
    if (numel(e.shape) != e.values.size()) {
      throw ShapeError("entry '" + e.name + "' has " + std::to_string(e.values.size()) +
                       " values for shape " + to_string(e.shape));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : e.values) put<double>(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  const std::string magic = in.string(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("entry count");
  Checkpoint out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = in.get<std::uint16_t>("name length");
    e.name = in.string(len, "name");
    const auto rank = in.get<std::uint8_t>("rank");
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(in.get<std::uint32_t>("dim"));
    const std::size_t n = numel(e.shape);
    if (n > in.remaining() / 8) {
      throw FormatError("truncated checkpoint at byte offset " + std::to_string(in.offset()) +
                        " reading payload of '" + e.name + "' (" + std::to_string(n * 8) +
                        " bytes needed, " + std::to_string(in.remaining()) + " available)");
    }
    e.values.resize(n);
    for (auto& v : e.values) v = in.get<double>("payload");
    out.push_back(std::move(e));
  }
  if (in.remaining() != 0) {
    throw FormatError("trailing bytes after checkpoint at byte offset " +
                      std::to_string(in.offset()));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void apply_checkpoint(const Checkpoint& checkpoint, ParamList& params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : checkpoint) {
    if (!by_name.emplace(e.name, &e).second) {
      throw FormatError("duplicate checkpoint entry '" + e.name + "'");
    }
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LookupError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "' has shape " + to_string(p.tensor.shape()) +
                       " but checkpoint holds " + to_string(it->second->shape));
    }
  }
  if (by_name.size() != params.size()) {
    std::map<std::string, bool> known;
    for (const auto& p : params) known[p.name] = true;
    for (const auto& e : checkpoint) {
      if (!known.count(e.name)) {
        throw LookupError("checkpoint entry '" + e.name + "' names no model parameter");
      }
    }
  }
  for (auto& p : params) {
    const auto& values = by_name.at(p.name)->values;
    std::copy(values.begin(), values.end(), p.tensor.mutable_data().begin());
  }
}

void apply_checkpoint(const Checkpoint& checkpoint, const CoTrainModel& model) {
  ParamList refs;
  for (const auto& e : model.parameters()) refs.push_back(e.ref);
  apply_checkpoint(checkpoint, refs);
}

void apply_checkpoint(const Checkpoint& checkpoint, const UnimodalModel& model) {
  ParamList refs = model.parameters();
  apply_checkpoint(checkpoint, refs);
}

Checkpoint extract_unimodal_checkpoint(const Checkpoint& checkpoint,
                                      const std::string& modality) {
  Checkpoint out;
  for (const auto& e : checkpoint) {
    for (const char* part : {".stem.", ".tail.", ".head."}) {
      if (e.name.rfind(modality + part, 0) == 0) {
        out.push_back(e);
        break;
      }
    }
  }
  if (out.empty()) throw LookupError("checkpoint has no branch for modality '" + modality + "'");
  return out;
}

std::string unimodal_checkpoint_modality(const Checkpoint& checkpoint) {
  if (checkpoint.empty()) throw FormatError("empty checkpoint");
  if (has_multimodal_entries(checkpoint)) {
    throw FormatError("checkpoint holds a multimodal branch");
  }
  const std::string modality = checkpoint.front().name.substr(0, checkpoint.front().name.find('.'));
  for (const auto& e : checkpoint) {
    if (e.name.rfind(modality + ".", 0) != 0) {
      throw FormatError("checkpoint mixes modalities '" + modality + "' and '" +
                        e.name.substr(0, e.name.find('.')) + "'");
    }
  }
  return modality;
}

bool has_multimodal_entries(const Checkpoint& checkpoint) {
  for (const auto& e : checkpoint) {
    if (e.name.rfind("mm.", 0) == 0) return true;
  }
  return false;
}

}  // namespace comodal
