#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tpmm/common.hpp"
#include "tpmm/policy.hpp"

// Checkpoint file format, little-endian throughout:
//   "TPMM" | version u32 (=1) | family u8 | V u32 | k u32 | d u32 | h u32 |
//   max_response_len u32 | iteration_index u32 | param_count u64 |
//   param_count f64 payload
// k, d, h are written as 0 for the bigram family.

namespace tpmm {

inline constexpr char kCheckpointMagic[4] = {'T', 'P', 'M', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<unsigned char*>(&value);
    std::reverse(p, p + sizeof(T));
  }
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<unsigned char*>(&value);
    std::reverse(p, p + sizeof(T));
  }
  return value;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const PolicyCheckpoint& ckpt) {
  validate_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(ckpt.spec.family));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.spec.vocab_size));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.spec.context_window));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.spec.embed_dim));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.spec.hidden_dim));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.spec.max_response_len));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.iteration_index));
  detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.params.size()));
  for (double p : ckpt.params)
    detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(p));
  if (!os) throw IoError("write failed for " + path.string());
}

inline PolicyCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in " + path.string());
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  const auto family_tag = detail::read_le<std::uint8_t>(is, "family");
  if (family_tag > 1)
    throw FormatError("checkpoint: unknown family tag " + std::to_string(family_tag));

  PolicyCheckpoint ckpt;
  ckpt.spec.family = static_cast<Family>(family_tag);
  ckpt.spec.vocab_size = static_cast<int>(detail::read_le<std::uint32_t>(is, "vocab_size"));
  ckpt.spec.context_window = static_cast<int>(detail::read_le<std::uint32_t>(is, "context_window"));
  ckpt.spec.embed_dim = static_cast<int>(detail::read_le<std::uint32_t>(is, "embed_dim"));
  ckpt.spec.hidden_dim = static_cast<int>(detail::read_le<std::uint32_t>(is, "hidden_dim"));
  ckpt.spec.max_response_len = static_cast<int>(detail::read_le<std::uint32_t>(is, "max_response_len"));
  ckpt.iteration_index = static_cast<int>(detail::read_le<std::uint32_t>(is, "iteration_index"));
  const auto count = detail::read_le<std::uint64_t>(is, "param_count");

  try {
    validate_spec(ckpt.spec);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint: invalid header: ") + e.what());
  }
  if (count != param_count(ckpt.spec))
    throw FormatError("checkpoint: header param_count " + std::to_string(count) +
                      " does not match spec param_count " +
                      std::to_string(param_count(ckpt.spec)));

  ckpt.params.resize(count);
  for (std::uint64_t i = 0; i < count; ++i)
    ckpt.params[i] = std::bit_cast<double>(detail::read_le<std::uint64_t>(is, "payload"));
  // A trailing byte means the file does not match its own header.
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError("checkpoint: trailing bytes after payload in " + path.string());
  try {
    validate_checkpoint(ckpt);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint: invalid payload: ") + e.what());
  }
  return ckpt;
}

// Serialize-and-reload identity used by tests and by the CLI `merge`
// subcommand when copying inputs.
inline PolicyCheckpoint param_roundtrip(const PolicyCheckpoint& ckpt,
                                        const std::filesystem::path& scratch) {
  save_checkpoint(scratch, ckpt);
  return load_checkpoint(scratch);
}

}  // namespace tpmm
