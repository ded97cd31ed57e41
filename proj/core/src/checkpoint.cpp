#include "xmodal/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "xmodal/config.hpp"
#include "xmodal/errors.hpp"

namespace xmodal {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kMagic = "xmodal-checkpoint";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto& params = checkpoint.params;
  ordered_json header;
  header["format"] = kMagic;
  header["format_version"] = kFormatVersion;
  header["meta"] = checkpoint.meta;
  ordered_json table = ordered_json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ordered_json entry;
    entry["name"] = params.name(i);
    entry["shape"] = params.value(i).shape();
    entry["offset"] = offset;
    table.push_back(std::move(entry));
    offset += params.value(i).size() * sizeof(float);
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  std::string blob;
  blob.reserve(8 + text.size() + offset);
  put_u64(blob, text.size());
  blob += text;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (float v : params.value(i).values()) put_f32(blob, v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw DataError("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  if (blob.size() < 8) throw DataError("checkpoint " + path.string() + " is truncated");
  const std::uint64_t header_len = get_u64(bytes);
  if (header_len > blob.size() - 8) {
    throw DataError("checkpoint " + path.string() + " header length exceeds file size");
  }
  ordered_json header;
  try {
    header = ordered_json::parse(blob.substr(8, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("checkpoint " + path.string() + " header is not valid JSON: " + e.what());
  }
  if (header.value("format", std::string()) != kMagic) {
    throw DataError(path.string() + " is not an xmodal checkpoint");
  }
  if (header.value("format_version", std::string()) != kFormatVersion) {
    throw DataError("checkpoint " + path.string() + " has unsupported format version");
  }
  Checkpoint out;
  out.meta = header.value("meta", ordered_json::object());
  const std::size_t data_start = 8 + header_len;
  const std::size_t data_len = blob.size() - data_start;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_size(shape);
      if (offset % 4 != 0 || offset > data_len || n * 4 > data_len - offset) {
        throw DataError("checkpoint tensor '" + entry.at("name").get<std::string>() +
                        "' lies outside the data section");
      }
      std::vector<float> values(n);
      const unsigned char* p = bytes + data_start + offset;
      for (std::size_t k = 0; k < n; ++k) values[k] = get_f32(p + 4 * k);
      out.params.add(entry.at("name").get<std::string>(), Tensor<float>(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + " has a malformed tensor table: " + e.what());
  }
  return out;
}

}  // namespace xmodal
