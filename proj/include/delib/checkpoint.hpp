#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "delib/tensor.hpp"

namespace delib {

// Self-describing container: magic, a free-form JSON metadata block, then
// name -> shape -> raw IEEE-754 values per parameter. Round-trips bit-exactly.
constexpr char kCheckpointMagic[8] = {'D', 'L', 'B', 'C', 'K', 'P', 'T', '1'};

namespace ckpt_detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw UsageError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    write_u64(out, bits);
  }
}

inline void read_doubles(std::istream& in, std::vector<double>& v) {
  for (double& x : v) {
    const std::uint64_t bits = read_u64(in);
    std::memcpy(&x, &bits, 8);
  }
}

}  // namespace ckpt_detail

struct CheckpointData {
  std::string meta_json;
  std::vector<std::pair<std::string, Tensor>> params;
};

inline void save_checkpoint(const std::string& path, const std::string& meta_json,
                            const ParameterStore& params) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + tmp.string() + "' for writing");
    out.write(kCheckpointMagic, 8);
    ckpt_detail::write_u64(out, meta_json.size());
    out.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    ckpt_detail::write_u64(out, params.all().size());
    for (const auto& p : params.all()) {
      ckpt_detail::write_u64(out, p.name.size());
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      const auto& sh = p.tensor.shape();
      ckpt_detail::write_u64(out, sh.size());
      for (std::size_t d : sh) ckpt_detail::write_u64(out, d);
      ckpt_detail::write_doubles(out, p.tensor.data());
    }
    if (!out) throw UsageError("failed writing checkpoint '" + path + "'");
  }
  fs::rename(tmp, target);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw UsageError("'" + path + "' is not a checkpoint file");
  }
  CheckpointData data;
  const std::uint64_t meta_len = ckpt_detail::read_u64(in);
  data.meta_json.resize(meta_len);
  in.read(data.meta_json.data(), static_cast<std::streamsize>(meta_len));
  const std::uint64_t count = ckpt_detail::read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = ckpt_detail::read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t ndim = ckpt_detail::read_u64(in);
    Shape shape(ndim);
    for (auto& d : shape) d = ckpt_detail::read_u64(in);
    std::vector<double> values(shape_numel(shape));
    ckpt_detail::read_doubles(in, values);
    if (!in) throw UsageError("checkpoint '" + path + "': truncated parameter '" + name + "'");
    data.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return data;
}

/// Copies checkpoint values into an already-constructed parameter store;
/// names and shapes must match exactly.
inline void restore_parameters(const CheckpointData& data, ParameterStore& params) {
  if (data.params.size() != params.all().size()) {
    throw UsageError("checkpoint holds " + std::to_string(data.params.size()) +
                     " parameters, model expects " + std::to_string(params.all().size()));
  }
  for (const auto& [name, tensor] : data.params) {
    Tensor dst = params.get(name);
    if (dst.shape() != tensor.shape()) {
      throw UsageError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(tensor.shape()) + ", model expects " + shape_str(dst.shape()));
    }
    dst.data() = tensor.data();
  }
}

}  // namespace delib
