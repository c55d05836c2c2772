#pragma once

// On-disk volumes: a JSON sidecar `{stem}.json` describing a raw little-endian
// payload `{stem}.raw`, z slowest. Intensities are f32, labels u16, and
// displacement fields f32 with three channel-major components.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcip/error.hpp"
#include "tcip/volume.hpp"

namespace tcip {

namespace io_detail {

namespace fs = std::filesystem;

inline constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

inline std::string stem_of(const std::string& path) {
  for (const char* ext : {".json", ".raw"}) {
    const std::string e(ext);
    if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0)
      return path.substr(0, path.size() - e.size());
  }
  return path;
}

struct Header {
  Dims3 dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string dtype;
  Index channels = 1;
};

inline std::size_t dtype_size(const std::string& dtype) { return dtype == "u16" ? 2 : 4; }

inline void write_header(const std::string& stem, const Header& h) {
  nlohmann::ordered_json j;
  j["dims"] = {h.dims.d, h.dims.h, h.dims.w};
  j["spacing"] = {h.spacing[0], h.spacing[1], h.spacing[2]};
  j["dtype"] = h.dtype;
  j["byte_order"] = "little";
  if (h.channels != 1) j["channels"] = h.channels;
  const std::string path = stem + ".json";
  std::ofstream out(path);
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "cannot open for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "write failed");
}

inline Header read_header(const std::string& stem, const std::string& expected_dtype, Index expected_channels) {
  const std::string path = stem + ".json";
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorKind::Unreadable, path, "cannot open");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoErrorKind::MalformedHeader, path, e.what());
  }
  auto malformed = [&](const std::string& why) { return IoError(IoErrorKind::MalformedHeader, path, why); };
  if (!j.is_object()) throw malformed("header is not an object");
  for (const char* key : {"dims", "spacing", "dtype", "byte_order"})
    if (!j.contains(key)) throw malformed(std::string("missing field '") + key + "'");
  if (!j["dims"].is_array() || j["dims"].size() != 3) throw malformed("dims must be an array of 3 integers");
  if (!j["spacing"].is_array() || j["spacing"].size() != 3) throw malformed("spacing must be an array of 3 numbers");
  if (j["byte_order"] != "little") throw malformed("byte_order must be \"little\"");
  if (!j["dtype"].is_string()) throw malformed("dtype must be a string");

  Header h;
  h.dtype = j["dtype"].get<std::string>();
  if (h.dtype != "f32" && h.dtype != "u16") throw malformed("unsupported dtype '" + h.dtype + "'");
  if (h.dtype != expected_dtype) throw malformed("expected dtype " + expected_dtype + ", found " + h.dtype);
  h.channels = 1;
  if (j.contains("channels")) {
    if (!j["channels"].is_number_integer()) throw malformed("channels must be an integer");
    h.channels = j["channels"].get<Index>();
  }
  if (h.channels != expected_channels)
    throw malformed("expected " + std::to_string(expected_channels) + " channel(s), found " +
                    std::to_string(h.channels));

  std::uint64_t elements = static_cast<std::uint64_t>(h.channels);
  Index dims[3];
  for (int i = 0; i < 3; ++i) {
    const auto& v = j["dims"][i];
    if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() > 0)) {
      const std::uint64_t u = v.get<std::uint64_t>();
      if (u == 0) throw malformed("dims must be positive");
      if (u > kMaxElements || elements > kMaxElements / u)
        throw IoError(IoErrorKind::DimensionOverflow, path, "volume exceeds 2^31 elements");
      elements *= u;
      dims[i] = static_cast<Index>(u);
    } else {
      throw malformed("dims must be positive integers");
    }
    const auto& s = j["spacing"][i];
    if (!s.is_number() || !(s.get<double>() > 0.0)) throw malformed("spacing must be positive numbers");
    h.spacing[i] = s.get<double>();
  }
  h.dims = Dims3{dims[0], dims[1], dims[2]};
  return h;
}

template <class T>
void write_payload(const std::string& stem, const std::vector<T>& values) {
  const std::string path = stem + ".raw";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "cannot open for writing");
  std::vector<char> bytes(values.size() * sizeof(T));
  std::memcpy(bytes.data(), values.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < bytes.size(); i += sizeof(T)) std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(IoErrorKind::Unwritable, path, "write failed");
}

template <class T>
std::vector<T> read_payload(const std::string& stem, std::uint64_t count) {
  const std::string path = stem + ".raw";
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw IoError(IoErrorKind::Unreadable, path, "cannot stat payload");
  const std::uint64_t expected = count * sizeof(T);
  if (size != expected)
    throw IoError(IoErrorKind::TruncatedPayload, path,
                  "payload has " + std::to_string(size) + " bytes, header implies " + std::to_string(expected));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorKind::Unreadable, path, "cannot open");
  std::vector<char> bytes(expected);
  in.read(bytes.data(), static_cast<std::streamsize>(expected));
  if (static_cast<std::uint64_t>(in.gcount()) != expected)
    throw IoError(IoErrorKind::TruncatedPayload, path, "short read");
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < bytes.size(); i += sizeof(T)) std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  std::vector<T> values(count);
  std::memcpy(values.data(), bytes.data(), expected);
  return values;
}

}  // namespace io_detail

inline void save_volume(const std::string& path, const Volume& v) {
  const std::string stem = io_detail::stem_of(path);
  io_detail::write_header(stem, {v.dims, v.spacing, "f32", 1});
  io_detail::write_payload(stem, v.data);
}

inline Volume load_volume(const std::string& path) {
  const std::string stem = io_detail::stem_of(path);
  const auto h = io_detail::read_header(stem, "f32", 1);
  Volume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.data = io_detail::read_payload<float>(stem, static_cast<std::uint64_t>(h.dims.count()));
  return v;
}

inline void save_labels(const std::string& path, const LabelVolume& v) {
  const std::string stem = io_detail::stem_of(path);
  io_detail::write_header(stem, {v.dims, v.spacing, "u16", 1});
  io_detail::write_payload(stem, v.labels);
}

inline LabelVolume load_labels(const std::string& path) {
  const std::string stem = io_detail::stem_of(path);
  const auto h = io_detail::read_header(stem, "u16", 1);
  LabelVolume v;
  v.dims = h.dims;
  v.spacing = h.spacing;
  v.labels = io_detail::read_payload<std::uint16_t>(stem, static_cast<std::uint64_t>(h.dims.count()));
  return v;
}

/// Writes a (1,3,D,H,W) displacement field as f32.
inline void save_field(const std::string& path, const Tensor& field, Spacing spacing = {1.0, 1.0, 1.0}) {
  const Shape& s = field.shape();
  if (s.n() != 1 || s.c() != 3) throw ShapeError("save_field: expected (1,3,D,H,W), got " + s.str());
  const std::string stem = io_detail::stem_of(path);
  io_detail::write_header(stem, {spatial_dims(s), spacing, "f32", 3});
  std::vector<float> values(field.data().begin(), field.data().end());
  io_detail::write_payload(stem, values);
}

inline Tensor load_field(const std::string& path) {
  const std::string stem = io_detail::stem_of(path);
  const auto h = io_detail::read_header(stem, "f32", 3);
  const auto values = io_detail::read_payload<float>(stem, static_cast<std::uint64_t>(3 * h.dims.count()));
  return Tensor::from_data(Shape{1, 3, h.dims.d, h.dims.h, h.dims.w}, std::vector<double>(values.begin(), values.end()));
}

}  // namespace tcip
