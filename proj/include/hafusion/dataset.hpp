#pragma once

// Region datasets: multiple feature views over a fixed region set, optional
// downstream target tables, a deterministic synthetic generator, and k-fold
// index splitting.
//
// On-disk layout of a dataset directory:
//   manifest.json   {"n", "region_ids", "views":[{"name","kind","file",
//                    "categories"}], "targets":{"task":"file.csv"}}
//   *.csv           headerless, one region per row, '.' decimal, LF endings

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hafusion/io.hpp"
#include "hafusion/rng.hpp"
#include "hafusion/sha256.hpp"
#include "hafusion/tensor.hpp"

namespace hafusion::data {

enum class ViewKind { mobility, categorical_count };

inline std::string kind_name(ViewKind k) {
  return k == ViewKind::mobility ? "mobility" : "categorical-count";
}

inline ViewKind kind_from_name(const std::string& s) {
  if (s == "mobility") return ViewKind::mobility;
  if (s == "categorical-count") return ViewKind::categorical_count;
  throw DataError("unknown view kind '" + s + "'");
}

struct ViewMatrix {
  std::string name;
  ViewKind kind = ViewKind::categorical_count;
  Tensor<double> matrix;  // n x f, nonnegative counts
  std::vector<std::string> category_labels;

  std::size_t feature_dim() const { return matrix.cols(); }
};

struct RegionDataset {
  std::size_t n = 0;
  std::vector<std::string> region_ids;
  std::vector<ViewMatrix> views;
  std::map<std::string, std::vector<double>> targets;

  const ViewMatrix* find_view(const std::string& name) const {
    for (const auto& v : views)
      if (v.name == name) return &v;
    return nullptr;
  }

  void validate() const {
    if (n == 0) throw DataError("dataset has no regions");
    if (region_ids.size() != n) throw DataError("region_ids length does not match n");
    if (views.empty()) throw DataError("dataset needs at least one view");
    for (const auto& v : views) {
      if (v.matrix.rank() != 2 || v.matrix.rows() != n) {
        throw DataError("view '" + v.name + "' must have exactly " + std::to_string(n) + " rows");
      }
      if (v.kind == ViewKind::mobility && v.matrix.cols() != n) {
        throw DataError("mobility view '" + v.name + "' must be " + std::to_string(n) + "x" +
                        std::to_string(n));
      }
      if (v.kind == ViewKind::categorical_count && v.category_labels.size() != v.matrix.cols()) {
        throw DataError("view '" + v.name + "' categories length must equal feature count");
      }
      for (std::size_t i = 0; i < v.matrix.numel(); ++i) {
        if (!std::isfinite(v.matrix[i])) throw DataError("non-finite value in view '" + v.name + "'");
        if (v.matrix[i] < 0.0) throw DataError("negative count in view '" + v.name + "'");
      }
    }
    for (const auto& [task, y] : targets) {
      if (y.size() != n) throw DataError("target '" + task + "' length does not match n");
      for (double v : y)
        if (!std::isfinite(v)) throw DataError("non-finite value in target '" + task + "'");
    }
  }

  // Canonical content hash over the region set and views (target tables may be
  // added after training without invalidating a checkpoint).
  std::string fingerprint() const {
    Sha256 h;
    h.update("HAFDS1");
    auto put_u64 = [&h](std::uint64_t v) {
      unsigned char b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
      h.update(b, 8);
    };
    put_u64(n);
    for (const auto& id : region_ids) {
      put_u64(id.size());
      h.update(id);
    }
    put_u64(views.size());
    for (const auto& v : views) {
      put_u64(v.name.size());
      h.update(v.name);
      h.update(kind_name(v.kind));
      put_u64(v.matrix.cols());
      static_assert(sizeof(double) == 8);
      h.update(v.matrix.data(), v.matrix.numel() * sizeof(double));
    }
    return h.hex_digest();
  }
};

namespace csv {

inline double parse_cell(const std::string& cell, const std::string& file, std::size_t row,
                         std::size_t col) {
  std::size_t b = cell.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    throw DataError("non-numeric cell in " + file + " at row " + std::to_string(row + 1) +
                    " column " + std::to_string(col + 1) + " (empty)");
  }
  std::size_t e = cell.find_last_not_of(" \t\r") + 1;
  double out = 0.0;
  const char* first = cell.data() + b;
  const char* last = cell.data() + e;
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || !std::isfinite(out)) {
    throw DataError("non-numeric cell '" + cell.substr(b, e - b) + "' in " + file + " at row " +
                    std::to_string(row + 1) + " column " + std::to_string(col + 1));
  }
  return out;
}

inline std::vector<std::vector<double>> read_matrix(const std::filesystem::path& path) {
  const std::string text = io::read_text_file(path);
  const std::string fname = path.filename().string();
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos = nl + 1;
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t cell_start = 0, col = 0;
    while (true) {
      std::size_t comma = line.find(',', cell_start);
      const std::string cell =
          comma == std::string::npos ? line.substr(cell_start) : line.substr(cell_start, comma - cell_start);
      row.push_back(parse_cell(cell, fname, rows.size(), col));
      ++col;
      if (comma == std::string::npos) break;
      cell_start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_value(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

inline void write_matrix(const std::filesystem::path& path, const Tensor<double>& m) {
  std::string out;
  out.reserve(m.numel() * 8);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out.push_back(',');
      out += format_value(m.at2(i, j));
    }
    out.push_back('\n');
  }
  io::write_file_atomic(path, out);
}

}  // namespace csv

inline Tensor<double> matrix_from_rows(const std::vector<std::vector<double>>& rows,
                                       const std::string& file, std::size_t expect_rows,
                                       std::size_t expect_cols) {
  if (rows.size() != expect_rows) {
    throw DataError(file + ": expected " + std::to_string(expect_rows) + " rows, found " +
                    std::to_string(rows.size()));
  }
  Tensor<double> m({expect_rows, expect_cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != expect_cols) {
      throw DataError(file + ": row " + std::to_string(i + 1) + " has " +
                      std::to_string(rows[i].size()) + " columns, expected " +
                      std::to_string(expect_cols));
    }
    for (std::size_t j = 0; j < expect_cols; ++j) m.at2(i, j) = rows[i][j];
  }
  return m;
}

inline RegionDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw DataError("missing file: " + manifest_path.string());
  }
  const nlohmann::json j = io::load_json(manifest_path);
  RegionDataset ds;
  try {
    ds.n = j.at("n").get<std::size_t>();
    ds.region_ids = j.at("region_ids").get<std::vector<std::string>>();
    for (const auto& vj : j.at("views")) {
      ViewMatrix v;
      v.name = vj.at("name").get<std::string>();
      v.kind = kind_from_name(vj.at("kind").get<std::string>());
      if (vj.contains("categories")) {
        v.category_labels = vj.at("categories").get<std::vector<std::string>>();
      }
      const std::string file = vj.at("file").get<std::string>();
      const auto path = dir / file;
      if (!std::filesystem::exists(path)) throw DataError("missing file: " + path.string());
      const std::size_t cols =
          v.kind == ViewKind::mobility ? ds.n : v.category_labels.size();
      v.matrix = matrix_from_rows(csv::read_matrix(path), file, ds.n, cols);
      for (std::size_t i = 0; i < v.matrix.rows(); ++i) {
        for (std::size_t c = 0; c < v.matrix.cols(); ++c) {
          if (v.matrix.at2(i, c) < 0.0) {
            throw DataError("negative count in " + file + " at row " + std::to_string(i + 1) +
                            " column " + std::to_string(c + 1));
          }
        }
      }
      ds.views.push_back(std::move(v));
    }
    if (j.contains("targets")) {
      for (const auto& [task, fj] : j.at("targets").items()) {
        const std::string file = fj.get<std::string>();
        const auto path = dir / file;
        if (!std::filesystem::exists(path)) throw DataError("missing file: " + path.string());
        const auto rows = csv::read_matrix(path);
        if (rows.size() != ds.n) {
          throw DataError(file + ": expected " + std::to_string(ds.n) + " rows, found " +
                          std::to_string(rows.size()));
        }
        std::vector<double> y(ds.n);
        for (std::size_t i = 0; i < ds.n; ++i) {
          if (rows[i].size() != 1) {
            throw DataError(file + ": row " + std::to_string(i + 1) + " must have one value");
          }
          y[i] = rows[i][0];
        }
        ds.targets[task] = std::move(y);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

inline void write_dataset(const RegionDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["n"] = ds.n;
  manifest["region_ids"] = ds.region_ids;
  manifest["views"] = nlohmann::json::array();
  for (const auto& v : ds.views) {
    nlohmann::json vj;
    vj["name"] = v.name;
    vj["kind"] = kind_name(v.kind);
    vj["file"] = v.name + ".csv";
    if (v.kind == ViewKind::categorical_count) vj["categories"] = v.category_labels;
    manifest["views"].push_back(vj);
    csv::write_matrix(dir / (v.name + ".csv"), v.matrix);
  }
  if (!ds.targets.empty()) {
    nlohmann::json tj = nlohmann::json::object();
    for (const auto& [task, y] : ds.targets) {
      const std::string file = "target_" + task + ".csv";
      tj[task] = file;
      Tensor<double> col({y.size(), 1});
      for (std::size_t i = 0; i < y.size(); ++i) col.at2(i, 0) = y[i];
      csv::write_matrix(dir / file, col);
    }
    manifest["targets"] = tj;
  }
  io::write_json_atomic(dir / "manifest.json", manifest);
}

struct SynthConfig {
  std::size_t n = 50;
  std::size_t latent_dim = 4;
  std::size_t poi_categories = 26;
  std::size_t landuse_categories = 12;
  double noise_level = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 10) throw ConfigError("synthetic dataset needs n >= 10");
    if (latent_dim < 2) throw ConfigError("synthetic dataset needs latent_dim >= 2");
    if (noise_level < 0.0) throw ConfigError("noise_level must be >= 0");
    if (poi_categories < 1 || landuse_categories < 1) throw ConfigError("category counts must be >= 1");
  }
};

struct SynthDetail {
  RegionDataset dataset;
  Tensor<double> latents;                          // n x q
  std::map<std::string, std::vector<double>> task_weights;  // per task: q coefficients
};

// Plants a q-dimensional latent factor per region and derives every view from
// it: mobility counts from a gravity-style rate exp(u_i . u_j / sqrt(q)),
// category counts from Poisson rates softplus(A u_i), and targets that are
// (nearly always unclipped) linear functions of the latent factors, so a
// downstream regression has a recoverable signal.
inline SynthDetail generate_synthetic_detailed(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.n, q = cfg.latent_dim;

  SynthDetail out;
  out.latents = Tensor<double>({n, q});
  for (std::size_t i = 0; i < out.latents.numel(); ++i) out.latents[i] = rng.normal();

  RegionDataset& ds = out.dataset;
  ds.n = n;
  {
    const int width = static_cast<int>(std::to_string(n - 1).size());
    for (std::size_t i = 0; i < n; ++i) {
      std::string id = std::to_string(i);
      ds.region_ids.push_back("r" + std::string(width - static_cast<int>(id.size()), '0') + id);
    }
  }

  auto softplus = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };

  // mobility
  {
    ViewMatrix v;
    v.name = "mobility";
    v.kind = ViewKind::mobility;
    v.matrix = Tensor<double>({n, n});
    const double scale = 5.0;
    const double inv_sq = 1.0 / std::sqrt(static_cast<double>(q));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t a = 0; a < q; ++a) dot += out.latents.at2(i, a) * out.latents.at2(j, a);
        const double rate = std::min(scale * std::exp(dot * inv_sq), 1e6);
        v.matrix.at2(i, j) = static_cast<double>(rng.poisson(rate));
      }
    }
    ds.views.push_back(std::move(v));
  }

  auto count_view = [&](const std::string& name, std::size_t cats, double scale) {
    ViewMatrix v;
    v.name = name;
    v.kind = ViewKind::categorical_count;
    Tensor<double> proj({cats, q});
    for (std::size_t i = 0; i < proj.numel(); ++i) proj[i] = rng.normal();
    v.matrix = Tensor<double>({n, cats});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < cats; ++c) {
        double z = 0.0;
        for (std::size_t a = 0; a < q; ++a) z += proj.at2(c, a) * out.latents.at2(i, a);
        v.matrix.at2(i, c) = static_cast<double>(rng.poisson(scale * softplus(z)));
      }
    }
    for (std::size_t c = 0; c < cats; ++c) {
      std::string lbl = std::to_string(c);
      if (lbl.size() < 2) lbl = "0" + lbl;
      v.category_labels.push_back(name + "_" + lbl);
    }
    return v;
  };
  ds.views.push_back(count_view("poi", cfg.poi_categories, 12.0));
  ds.views.push_back(count_view("landuse", cfg.landuse_categories, 6.0));

  // targets: y = max(0, b0 + w.u + noise); b0 sits 4 sigma above zero so the
  // clip is almost never active and the target stays linear in the latents
  for (const std::string task : {"count_a", "count_b"}) {
    std::vector<double> w(q);
    double norm2 = 0.0;
    for (std::size_t a = 0; a < q; ++a) {
      w[a] = 10.0 * rng.normal();
      norm2 += w[a] * w[a];
    }
    const double b0 = 4.0 * std::sqrt(norm2);
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double val = b0;
      for (std::size_t a = 0; a < q; ++a) val += w[a] * out.latents.at2(i, a);
      val += cfg.noise_level * rng.normal();
      y[i] = std::max(0.0, val);
    }
    ds.targets[task] = std::move(y);
    out.task_weights[task] = std::move(w);
  }

  ds.validate();
  return out;
}

inline RegionDataset generate_synthetic(const SynthConfig& cfg) {
  return generate_synthetic_detailed(cfg).dataset;
}

using Fold = std::pair<std::vector<std::size_t>, std::vector<std::size_t>>;

// k disjoint test folds covering 0..n-1, sizes differing by at most one.
inline std::vector<Fold> split_kfold(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("split_kfold: k must be >= 2");
  if (k > n) throw ConfigError("split_kfold: k must be <= n");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(idx[i], idx[j]);
  }
  std::vector<Fold> folds;
  const std::size_t base = n / k, extra = n % k;
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    Fold fold;
    fold.second.assign(idx.begin() + start, idx.begin() + start + size);
    for (std::size_t i = 0; i < n; ++i) {
      if (i < start || i >= start + size) fold.first.push_back(idx[i]);
    }
    std::sort(fold.first.begin(), fold.first.end());
    std::sort(fold.second.begin(), fold.second.end());
    folds.push_back(std::move(fold));
    start += size;
  }
  return folds;
}

}  // namespace hafusion::data
