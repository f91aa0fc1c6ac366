#include "cfp/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cfp/error.hpp"

namespace cfp::safetensors {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

}  // namespace

Archive Archive::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open weights file " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || header_len == 0 || header_len > (1ull << 30)) {
    throw LoadError("weights file " + path.string() + " has no valid safetensors header");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw LoadError("weights file " + path.string() + " is truncated inside its header");

  Archive archive;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("weights file " + path.string() + ": bad header JSON: " + e.what());
  }

  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(in.tellg());
  const std::size_t data_start = 8 + header_len;
  if (file_size < data_start) throw LoadError("weights file " + path.string() + " is truncated");
  archive.data_.resize(file_size - data_start);
  in.seekg(static_cast<std::streamoff>(data_start));
  in.read(archive.data_.data(), static_cast<std::streamsize>(archive.data_.size()));

  for (const auto& [name, entry] : j.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) archive.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    TensorInfo info;
    try {
      info.dtype = entry.at("dtype").get<std::string>();
      info.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
      if (offsets.size() != 2) throw LoadError("bad data_offsets");
      info.begin = offsets[0];
      info.end = offsets[1];
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("tensor '" + name + "': malformed header entry: " + e.what());
    }
    if (info.end < info.begin || info.end > archive.data_.size()) {
      throw LoadError("tensor '" + name + "': data range exceeds file (truncated archive?)");
    }
    archive.tensors_.emplace(name, std::move(info));
  }
  return archive;
}

const TensorInfo& Archive::info(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "'");
  return it->second;
}

std::vector<float> Archive::to_f32(const std::string& name) const {
  const TensorInfo& t = info(name);
  const std::size_t width = dtype_size(t.dtype);
  if (width == 0) throw LoadError("tensor '" + name + "': unsupported dtype " + t.dtype);
  std::size_t count = 1;
  for (auto d : t.shape) count *= static_cast<std::size_t>(d);
  if (count * width != t.end - t.begin) {
    throw LoadError("tensor '" + name + "': byte size does not match its shape");
  }
  std::vector<float> out(count);
  const char* src = data_.data() + t.begin;
  if (t.dtype == "F32") {
    std::memcpy(out.data(), src, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint16_t h;
      std::memcpy(&h, src + 2 * i, 2);
      out[i] = t.dtype == "F16" ? half_to_float(h) : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
    }
  }
  return out;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

void write(const std::filesystem::path& path, const std::vector<TensorView>& tensors,
           const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header;
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t count = 1;
    for (auto d : t.shape) count *= static_cast<std::size_t>(d);
    if (count != t.values.size()) throw Error("tensor '" + t.name + "': shape does not match value count");
    header[t.name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + 4 * count}}};
    offset += 4 * count;
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
      out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 4));
    }
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace cfp::safetensors
