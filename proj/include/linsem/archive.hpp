#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "linsem/generator.hpp"
#include "linsem/nse.hpp"
#include "linsem/probe.hpp"

namespace linsem {

inline constexpr int kArchiveFormatVersion = 1;

/// Unreadable or malformed archive.
class ArchiveFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArchiveVersionError : public ArchiveFormatError {
 public:
  using ArchiveFormatError::ArchiveFormatError;
};

/// Well-formed archive that does not fit the target generator.
class ArchiveMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// ustar container with deterministic headers

struct TarEntry {
  std::string name;
  std::string data;
};

namespace detail {

inline void tar_octal(char* field, std::size_t width, std::uint64_t value) {
  std::string s(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value;) {
    s[i] = static_cast<char>('0' + (value & 7));
    value >>= 3;
  }
  if (value) throw std::length_error("tar field overflow");
  std::memcpy(field, s.data(), width - 1);
  field[width - 1] = '\0';
}

inline std::uint64_t tar_parse_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && field[i] != '\0' && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw ArchiveFormatError("tar: bad octal field");
    v = (v << 3) | static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

inline std::uint32_t tar_checksum(const std::array<char, 512>& h) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i < 512; ++i) {
    sum += (i >= 148 && i < 156) ? static_cast<std::uint32_t>(' ') : static_cast<unsigned char>(h[i]);
  }
  return sum;
}

}  // namespace detail

inline std::string write_tar(const std::vector<TarEntry>& entries) {
  std::string out;
  for (const TarEntry& e : entries) {
    if (e.name.empty() || e.name.size() > 99) throw std::invalid_argument("tar: bad entry name '" + e.name + "'");
    std::array<char, 512> h{};
    std::memcpy(h.data(), e.name.data(), e.name.size());
    detail::tar_octal(h.data() + 100, 8, 0644);
    detail::tar_octal(h.data() + 108, 8, 0);
    detail::tar_octal(h.data() + 116, 8, 0);
    detail::tar_octal(h.data() + 124, 12, e.data.size());
    detail::tar_octal(h.data() + 136, 12, 0);
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 6);
    h[263] = '0';
    h[264] = '0';
    detail::tar_octal(h.data() + 148, 7, detail::tar_checksum(h));
    h[155] = ' ';
    out.append(h.data(), h.size());
    out += e.data;
    out.append((512 - e.data.size() % 512) % 512, '\0');
  }
  out.append(1024, '\0');
  return out;
}

inline std::vector<TarEntry> read_tar(std::string_view bytes) {
  std::vector<TarEntry> out;
  std::size_t off = 0;
  while (true) {
    if (off + 512 > bytes.size()) throw ArchiveFormatError("tar: truncated header");
    std::array<char, 512> h{};
    std::memcpy(h.data(), bytes.data() + off, 512);
    bool zero = true;
    for (char c : h) zero = zero && c == '\0';
    if (zero) break;
    if (std::memcmp(h.data() + 257, "ustar", 5) != 0) throw ArchiveFormatError("tar: not a ustar archive");
    if (detail::tar_parse_octal(h.data() + 148, 8) != detail::tar_checksum(h)) {
      throw ArchiveFormatError("tar: header checksum mismatch");
    }
    const std::size_t size = detail::tar_parse_octal(h.data() + 124, 12);
    off += 512;
    if (off + size > bytes.size()) throw ArchiveFormatError("tar: truncated entry");
    TarEntry e;
    e.name.assign(h.data(), strnlen(h.data(), 100));
    e.data.assign(bytes.data() + off, size);
    if (h[156] == '0' || h[156] == '\0') out.push_back(std::move(e));
    off += (size + 511) / 512 * 512;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generic archive: metadata document plus float32 little-endian matrices

struct Blob {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
};

struct Archive {
  nlohmann::json metadata;
  std::vector<Blob> blobs;

  const Blob& blob(const std::string& name) const {
    for (const Blob& b : blobs)
      if (b.name == name) return b;
    throw ArchiveFormatError("archive has no blob '" + name + "'");
  }
};

namespace detail {

inline std::string encode_f32(const std::vector<float>& v) {
  std::string out(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  return out;
}

inline std::vector<float> decode_f32(const std::string& s) {
  if (s.size() % 4) throw ArchiveFormatError("blob size is not a multiple of 4");
  std::vector<float> v(s.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[4 * i + b])) << (8 * b);
    std::memcpy(&v[i], &u, 4);
  }
  return v;
}

}  // namespace detail

inline std::string encode_archive(const Archive& a) {
  nlohmann::json meta = a.metadata;
  meta["format_version"] = kArchiveFormatVersion;
  nlohmann::json index = nlohmann::json::array();
  std::vector<TarEntry> entries;
  entries.push_back({"metadata.json", ""});
  for (const Blob& b : a.blobs) {
    if (static_cast<std::size_t>(b.rows) * b.cols != b.values.size()) {
      throw std::invalid_argument("blob '" + b.name + "' size does not match its shape");
    }
    index.push_back({{"name", b.name}, {"shape", {b.rows, b.cols}}});
    entries.push_back({b.name + ".f32", detail::encode_f32(b.values)});
  }
  meta["blobs"] = index;
  entries.front().data = meta.dump(2) + "\n";
  return write_tar(entries);
}

inline Archive decode_archive(std::string_view bytes) {
  const std::vector<TarEntry> entries = read_tar(bytes);
  const TarEntry* meta_entry = nullptr;
  for (const TarEntry& e : entries)
    if (e.name == "metadata.json") meta_entry = &e;
  if (!meta_entry) throw ArchiveFormatError("archive has no metadata.json");
  Archive a;
  try {
    a.metadata = nlohmann::json::parse(meta_entry->data);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveFormatError(std::string("metadata.json: ") + e.what());
  }
  if (!a.metadata.contains("format_version") || !a.metadata["format_version"].is_number_integer()) {
    throw ArchiveFormatError("metadata has no format_version");
  }
  const int version = a.metadata["format_version"].get<int>();
  if (version != kArchiveFormatVersion) {
    throw ArchiveVersionError("archive format version " + std::to_string(version) + ", expected " +
                              std::to_string(kArchiveFormatVersion));
  }
  try {
    for (const auto& b : a.metadata.at("blobs")) {
      Blob blob;
      blob.name = b.at("name").get<std::string>();
      blob.rows = b.at("shape").at(0).get<int>();
      blob.cols = b.at("shape").at(1).get<int>();
      const TarEntry* data = nullptr;
      for (const TarEntry& e : entries)
        if (e.name == blob.name + ".f32") data = &e;
      if (!data) throw ArchiveFormatError("missing blob '" + blob.name + "'");
      blob.values = detail::decode_f32(data->data);
      if (blob.values.size() != static_cast<std::size_t>(blob.rows) * blob.cols) {
        throw ArchiveFormatError("blob '" + blob.name + "' has the wrong size");
      }
      a.blobs.push_back(std::move(blob));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveFormatError(std::string("metadata.json: ") + e.what());
  }
  return a;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Typed archives

/// Provenance recorded next to the weights.
struct ArchiveInfo {
  std::string generator_config_hash;
  std::vector<int> layer_resolutions;
  std::optional<int> shots;
  std::optional<std::size_t> iterations;
};

namespace detail {

inline Blob matrix_blob(std::string name, const Matrix& m) {
  Blob b{std::move(name), m.rows(), m.cols(), {}};
  b.values.reserve(m.size());
  for (double v : m.data()) b.values.push_back(static_cast<float>(v));
  return b;
}

inline Matrix blob_matrix(const Blob& b) {
  Matrix m(b.rows, b.cols);
  for (std::size_t i = 0; i < b.values.size(); ++i) m.data()[i] = static_cast<double>(b.values[i]);
  return m;
}

inline Blob vector_blob(std::string name, const std::vector<double>& v) {
  Blob b{std::move(name), 1, static_cast<int>(v.size()), {}};
  for (double x : v) b.values.push_back(static_cast<float>(x));
  return b;
}

inline void put_info(nlohmann::json& meta, const ArchiveInfo& info) {
  meta["generator_config_hash"] = info.generator_config_hash;
  meta["layer_resolutions"] = info.layer_resolutions;
  if (info.shots) meta["shots"] = *info.shots;
  if (info.iterations) meta["iterations"] = *info.iterations;
}

inline ArchiveInfo get_info(const nlohmann::json& meta) {
  ArchiveInfo info;
  info.generator_config_hash = meta.value("generator_config_hash", "");
  info.layer_resolutions = meta.value("layer_resolutions", std::vector<int>{});
  if (meta.contains("shots")) info.shots = meta["shots"].get<int>();
  if (meta.contains("iterations")) info.iterations = meta["iterations"].get<std::size_t>();
  return info;
}

inline std::string meta_kind(const nlohmann::json& meta) {
  if (!meta.contains("probe_kind")) throw ArchiveFormatError("metadata has no probe_kind");
  return meta["probe_kind"].get<std::string>();
}

}  // namespace detail

inline ArchiveInfo archive_info_for(const Generator& gen) {
  ArchiveInfo info;
  info.generator_config_hash = gen.config_hash();
  for (const LayerInfo& l : gen.layers()) info.layer_resolutions.push_back(l.resolution);
  return info;
}

inline std::string encode_probe(const ProbeWeights& w, const ArchiveInfo& info) {
  w.validate();
  Archive a;
  a.metadata["probe_kind"] = "lse";
  a.metadata["num_classes"] = w.num_classes;
  a.metadata["class_names"] = w.class_names;
  a.metadata["layer_depths"] = w.layer_depths;
  a.metadata["upsample_mode"] = std::string(to_string(w.upsample));
  detail::put_info(a.metadata, info);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    a.blobs.push_back(detail::matrix_blob("layer_" + std::to_string(i), w.layers[i]));
  }
  return encode_archive(a);
}

struct LoadedProbe {
  ProbeWeights weights;
  ArchiveInfo info;
};

inline LoadedProbe decode_probe(std::string_view bytes) {
  const Archive a = decode_archive(bytes);
  if (detail::meta_kind(a.metadata) != "lse") throw ArchiveFormatError("archive does not hold LSE weights");
  LoadedProbe out;
  try {
    ProbeWeights& w = out.weights;
    w.num_classes = a.metadata.at("num_classes").get<int>();
    w.class_names = a.metadata.at("class_names").get<std::vector<std::string>>();
    w.layer_depths = a.metadata.at("layer_depths").get<std::vector<int>>();
    w.upsample = parse_upsample_mode(a.metadata.at("upsample_mode").get<std::string>());
    for (std::size_t i = 0; i < w.layer_depths.size(); ++i) {
      w.layers.push_back(detail::blob_matrix(a.blob("layer_" + std::to_string(i))));
    }
    w.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveFormatError(std::string("metadata: ") + e.what());
  } catch (const ShapeError& e) {
    throw ArchiveFormatError(e.what());
  }
  out.info = detail::get_info(a.metadata);
  return out;
}

/// Rejects weights whose layer depths or resolutions differ from the generator's.
inline void check_against(const std::vector<int>& depths, const ArchiveInfo& info, const Generator& gen) {
  if (depths != gen.layer_depths()) {
    throw ArchiveMismatchError("archive layer depths [" + detail::join_ints(depths) + "] do not match generator [" +
                               detail::join_ints(gen.layer_depths()) + "]");
  }
  if (!info.layer_resolutions.empty() && info.layer_resolutions != archive_info_for(gen).layer_resolutions) {
    throw ArchiveMismatchError("archive layer resolutions do not match the generator");
  }
}

inline void save_probe(const std::string& path, const ProbeWeights& w, const ArchiveInfo& info) {
  write_file(path, encode_probe(w, info));
}

inline LoadedProbe load_probe(const std::string& path) { return decode_probe(read_file(path)); }

inline LoadedProbe load_probe(const std::string& path, const Generator& gen) {
  LoadedProbe p = load_probe(path);
  check_against(p.weights.layer_depths, p.info, gen);
  return p;
}

inline std::string encode_nse(const NseWeights& w, const ArchiveInfo& info) {
  Archive a;
  a.metadata["probe_kind"] = std::string(to_string(w.variant));
  a.metadata["num_classes"] = w.num_classes;
  a.metadata["class_names"] = default_class_names(w.num_classes);
  a.metadata["layer_depths"] = w.layer_depths;
  a.metadata["hidden"] = w.hidden;
  a.metadata["upsample_mode"] = w.variant == NseVariant::kNse1 ? "bilinear" : "nearest";
  detail::put_info(a.metadata, info);
  a.metadata["layer_resolutions"] = w.layer_resolutions;
  for (std::size_t i = 0; i < w.convs.size(); ++i) {
    const Conv3x3& c = w.convs[i];
    Blob wb{"conv_" + std::to_string(i) + "_weight", c.out, c.in * 9, {}};
    for (double v : c.weight) wb.values.push_back(static_cast<float>(v));
    a.blobs.push_back(std::move(wb));
    a.blobs.push_back(detail::vector_blob("conv_" + std::to_string(i) + "_bias", c.bias));
  }
  return encode_archive(a);
}

struct LoadedNse {
  NseWeights weights;
  ArchiveInfo info;
};

inline LoadedNse decode_nse(std::string_view bytes) {
  const Archive a = decode_archive(bytes);
  const std::string kind = detail::meta_kind(a.metadata);
  if (kind != "nse1" && kind != "nse2") throw ArchiveFormatError("archive does not hold NSE weights");
  LoadedNse out;
  out.info = detail::get_info(a.metadata);
  try {
    std::vector<LayerInfo> layers;
    const auto depths = a.metadata.at("layer_depths").get<std::vector<int>>();
    if (depths.size() != out.info.layer_resolutions.size()) throw ArchiveFormatError("NSE: layer metadata mismatch");
    for (std::size_t i = 0; i < depths.size(); ++i) layers.push_back({depths[i], out.info.layer_resolutions[i]});
    out.weights = NseWeights::zeros(parse_nse_variant(kind), a.metadata.at("num_classes").get<int>(), layers,
                                    a.metadata.at("hidden").get<int>());
    for (std::size_t i = 0; i < out.weights.convs.size(); ++i) {
      Conv3x3& c = out.weights.convs[i];
      const Blob& wb = a.blob("conv_" + std::to_string(i) + "_weight");
      const Blob& bb = a.blob("conv_" + std::to_string(i) + "_bias");
      if (wb.values.size() != c.weight.size() || bb.values.size() != c.bias.size()) {
        throw ArchiveFormatError("NSE: convolution " + std::to_string(i) + " has the wrong size");
      }
      for (std::size_t j = 0; j < c.weight.size(); ++j) c.weight[j] = wb.values[j];
      for (std::size_t j = 0; j < c.bias.size(); ++j) c.bias[j] = bb.values[j];
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveFormatError(std::string("metadata: ") + e.what());
  }
  return out;
}

/// Named matrices (class centres, confusion matrices) in the same format.
inline std::string encode_matrices(const std::string& kind, const std::vector<std::string>& class_names,
                                   const std::vector<std::pair<std::string, Matrix>>& mats,
                                   const ArchiveInfo& info) {
  Archive a;
  a.metadata["probe_kind"] = kind;
  a.metadata["num_classes"] = static_cast<int>(class_names.size());
  a.metadata["class_names"] = class_names;
  detail::put_info(a.metadata, info);
  for (const auto& [name, m] : mats) a.blobs.push_back(detail::matrix_blob(name, m));
  return encode_archive(a);
}

inline Matrix decode_matrix(std::string_view bytes, const std::string& name) {
  return detail::blob_matrix(decode_archive(bytes).blob(name));
}

}  // namespace linsem
