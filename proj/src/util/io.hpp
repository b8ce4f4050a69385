#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace se3ctrl::util {

static_assert(sizeof(float) == 4, "float must be 32-bit");

// Raw little-endian float32 blob IO. Host is assumed little-endian (checked
// at startup by callers via is_little_endian()).
inline bool is_little_endian() {
  const uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

inline void write_f32_blob(const std::string& path, const std::vector<float>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write: " + path);
}

inline std::vector<float> read_f32_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  const std::streamsize bytes = in.tellg();
  if (bytes % 4 != 0) throw std::runtime_error("blob size not multiple of 4: " + path);
  std::vector<float> data(static_cast<size_t>(bytes) / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (!in) throw std::runtime_error("short read: " + path);
  return data;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << text;
  if (!out) throw std::runtime_error("short write: " + path);
}

}  // namespace se3ctrl::util
