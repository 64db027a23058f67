#pragma once

// Embedding Binary Format (EBF), little-endian:
//   0..3   magic "CXEB"
//   4..7   version u32 = 1
//   8..11  dtype u32 (0 = f32, 1 = f64)
//   12..19 rows u64
//   20..27 cols u64
//   28..   rows*cols values, row-major
// Every matrix may carry a sidecar manifest "<stem>.manifest.json".

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccf/error.hpp"
#include "ccf/matrix.hpp"

namespace ccf {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Precision : std::uint32_t { f32 = 0, f64 = 1 };

enum class ManifestKind {
  concept_bank,
  features,
  vlm_embeddings,
  head,
  prompt_pairs,
  projector_pair,
  linear_map,
  synth_world,
};

NLOHMANN_JSON_SERIALIZE_ENUM(ManifestKind, {
                                               {ManifestKind::concept_bank, "concept_bank"},
                                               {ManifestKind::features, "features"},
                                               {ManifestKind::vlm_embeddings, "vlm_embeddings"},
                                               {ManifestKind::head, "head"},
                                               {ManifestKind::prompt_pairs, "prompt_pairs"},
                                               {ManifestKind::projector_pair, "projector_pair"},
                                               {ManifestKind::linear_map, "linear_map"},
                                               {ManifestKind::synth_world, "synth_world"},
                                           })

struct Manifest {
  ManifestKind kind = ManifestKind::features;
  std::optional<std::vector<std::string>> names;
  std::size_t dim = 0;
  json extra = json::object();
};

inline json to_json(const Manifest& m) {
  json j;
  j["kind"] = m.kind;
  j["dim"] = m.dim;
  if (m.names) j["names"] = *m.names;
  j["extra"] = m.extra;
  return j;
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    m.kind = j.at("kind").get<ManifestKind>();
    if (json(m.kind).get<std::string>() != kind) fail(ErrorKind::BadManifest, "unknown manifest kind '" + kind + "'");
    m.dim = j.at("dim").get<std::size_t>();
    if (j.contains("names")) m.names = j.at("names").get<std::vector<std::string>>();
    if (j.contains("extra")) m.extra = j.at("extra");
  } catch (const json::exception& e) {
    fail(ErrorKind::BadManifest, e.what());
  }
  return m;
}

inline fs::path manifest_path(const fs::path& matrix_path) {
  fs::path p = matrix_path;
  p.replace_extension(".manifest.json");
  return p;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorKind::Io, "write failed for " + path.string());
}

inline json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::BadManifest, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

namespace detail {

inline constexpr std::array<char, 4> kMagic = {'C', 'X', 'E', 'B'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 28;

template <typename T>
void put_le(std::string& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  buf.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void check_finite(const Matrix& m, ErrorKind kind, const std::string& where) {
  const auto data = m.data();
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i]))
      fail(kind, where + ": non-finite entry at row " + std::to_string(i / std::max<std::size_t>(m.cols(), 1)) +
                     ", col " + std::to_string(i % std::max<std::size_t>(m.cols(), 1)));
}

}  // namespace detail

inline std::string encode_ebf(const Matrix& m, Precision precision) {
  detail::check_finite(m, ErrorKind::NonFiniteEntry, "encode_ebf");
  std::string buf;
  const std::size_t width = precision == Precision::f32 ? 4 : 8;
  buf.reserve(detail::kHeaderBytes + m.rows() * m.cols() * width);
  buf.append(detail::kMagic.data(), 4);
  detail::put_le<std::uint32_t>(buf, detail::kVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(precision));
  detail::put_le<std::uint64_t>(buf, m.rows());
  detail::put_le<std::uint64_t>(buf, m.cols());
  for (double v : m.data()) {
    if (precision == Precision::f32)
      detail::put_le<float>(buf, static_cast<float>(v));
    else
      detail::put_le<double>(buf, v);
  }
  return buf;
}

// Decodes an EBF byte string. f32 payloads are widened to double.
inline Matrix decode_ebf(const std::string& bytes, const std::string& origin = "<memory>") {
  require(bytes.size() >= detail::kHeaderBytes, ErrorKind::TruncatedPayload, origin + ": header shorter than 28 bytes");
  require(std::memcmp(bytes.data(), detail::kMagic.data(), 4) == 0, ErrorKind::BadMagic,
          origin + ": magic is not CXEB");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  require(version == detail::kVersion, ErrorKind::VersionMismatch,
          origin + ": version " + std::to_string(version) + ", expected 1");
  const auto dtype = detail::get_le<std::uint32_t>(bytes.data() + 8);
  require(dtype <= 1, ErrorKind::UnknownDtype, origin + ": dtype code " + std::to_string(dtype));
  const auto rows = detail::get_le<std::uint64_t>(bytes.data() + 12);
  const auto cols = detail::get_le<std::uint64_t>(bytes.data() + 20);
  const std::size_t width = dtype == 0 ? 4 : 8;
  const std::size_t payload = bytes.size() - detail::kHeaderBytes;
  require(cols == 0 || rows <= payload / width / cols, ErrorKind::TruncatedPayload,
          origin + ": payload holds " + std::to_string(payload) + " bytes");
  require(payload == rows * cols * width, ErrorKind::TruncatedPayload,
          origin + ": payload is " + std::to_string(payload) + " bytes, header implies " +
              std::to_string(rows * cols * width));
  Matrix m(rows, cols);
  auto data = m.data();
  const char* p = bytes.data() + detail::kHeaderBytes;
  for (std::size_t i = 0; i < data.size(); ++i, p += width)
    data[i] = dtype == 0 ? static_cast<double>(detail::get_le<float>(p)) : detail::get_le<double>(p);
  detail::check_finite(m, ErrorKind::NonFiniteEntry, origin);
  return m;
}

// Raw matrix file without a sidecar.
inline void write_ebf(const fs::path& path, const Matrix& m, Precision precision = Precision::f64) {
  write_text_file(path, encode_ebf(m, precision));
}

inline Matrix read_ebf(const fs::path& path) { return decode_ebf(read_text_file(path), path.string()); }

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return cells;
}

// CSV: first line is a header. If its first cell is "name", the first
// column of every later line is the row label.
inline std::pair<Matrix, Manifest> load_csv(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::TruncatedPayload, path.string() + ": empty csv");
  const auto header = split_csv_line(line);
  const bool labelled = !header.empty() && header.front() == "name";
  const std::size_t cols = header.size() - (labelled ? 1 : 0);
  std::vector<double> values;
  std::vector<std::string> names;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv_line(line);
    require(cells.size() == header.size(), ErrorKind::TruncatedPayload,
            path.string() + ": row " + std::to_string(rows + 1) + " has " + std::to_string(cells.size()) + " cells");
    std::size_t start = 0;
    if (labelled) {
      names.push_back(cells.front());
      start = 1;
    }
    for (std::size_t c = start; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cells[c], &used));
        if (used != cells[c].size()) throw std::invalid_argument(cells[c]);
      } catch (const std::exception&) {
        fail(ErrorKind::NonFiniteEntry, path.string() + ": unparsable value '" + cells[c] + "'");
      }
    }
    ++rows;
  }
  Matrix m(rows, cols, std::move(values));
  check_finite(m, ErrorKind::NonFiniteEntry, path.string());
  Manifest man;
  man.dim = cols;
  if (labelled) man.names = std::move(names);
  return {std::move(m), std::move(man)};
}

}  // namespace detail

inline void validate_manifest(const Manifest& man, const Matrix& m, const std::string& origin) {
  if (man.names && man.kind != ManifestKind::prompt_pairs)
    require(man.names->size() == m.rows(), ErrorKind::BadManifest,
            origin + ": manifest lists " + std::to_string(man.names->size()) + " names for " +
                std::to_string(m.rows()) + " rows");
  require(man.dim == m.cols(), ErrorKind::BadManifest,
          origin + ": manifest dim " + std::to_string(man.dim) + " != matrix cols " + std::to_string(m.cols()));
}

// Loads an EBF matrix plus its sidecar manifest, or a CSV by extension.
// A missing sidecar yields a default "features" manifest.
inline std::pair<Matrix, Manifest> load_matrix(const fs::path& path) {
  if (path.extension() == ".csv") {
    auto loaded = detail::load_csv(path);
    if (fs::exists(manifest_path(path))) {
      loaded.second = manifest_from_json(read_json_file(manifest_path(path)));
      validate_manifest(loaded.second, loaded.first, path.string());
    }
    return loaded;
  }
  Matrix m = read_ebf(path);
  Manifest man;
  man.dim = m.cols();
  if (fs::exists(manifest_path(path))) {
    man = manifest_from_json(read_json_file(manifest_path(path)));
    validate_manifest(man, m, path.string());
  }
  return {std::move(m), std::move(man)};
}

inline void save_matrix(const Matrix& m, const Manifest& manifest, const fs::path& path,
                        Precision precision = Precision::f64) {
  validate_manifest(manifest, m, path.string());
  write_ebf(path, m, precision);
  write_json_file(manifest_path(path), to_json(manifest));
}

}  // namespace ccf
